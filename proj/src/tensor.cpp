#include "tinylayout/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include "json.hpp"
#include <numeric>
#include <ostream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "tensor blobs are stored little-endian");

namespace tinylayout {

namespace detail {

struct Node {
  std::uint64_t id;
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // producing tape, 0 for leaves
};

namespace {
std::atomic<std::uint64_t> next_node_id{1};
std::atomic<std::uint64_t> next_tape_id{1};
thread_local GradTape* active_tape = nullptr;
}  // namespace

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

}  // namespace detail

struct OpAccess {
  static const std::shared_ptr<detail::Node>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }
};

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static void check_shape_positive(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
}

Tensor::Tensor(Shape shape, double fill) {
  check_shape_positive(shape);
  auto n = numel(shape);
  node_ = detail::make_node(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape_positive(shape);
  if (numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  node_ = detail::make_node(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

static const detail::Node& deref(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw std::logic_error("use of an undefined tensor");
  return *n;
}

const Shape& Tensor::shape() const { return deref(node_).shape; }
std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}
std::size_t Tensor::size() const { return deref(node_).data.size(); }
std::span<const double> Tensor::values() const { return deref(node_).data; }
std::span<double> Tensor::mutable_values() {
  deref(node_);
  return node_->data;
}
double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}
bool Tensor::requires_grad() const { return deref(node_).requires_grad; }
Tensor& Tensor::set_requires_grad(bool on) {
  deref(node_);
  node_->requires_grad = on;
  return *this;
}
std::uint64_t Tensor::id() const { return deref(node_).id; }
Tensor Tensor::clone() const { return Tensor(shape(), std::vector<double>(values().begin(), values().end())); }

const Tensor& Gradients::operator[](const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw std::out_of_range("tensor is not a leaf of this tape");
  return it->second;
}

// ---- tape --------------------------------------------------------------------

GradTape::GradTape() : tape_id_(detail::next_tape_id.fetch_add(1)) {}
GradTape::~GradTape() = default;

GradTape::Recording::Recording(GradTape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
GradTape::Recording::~Recording() { detail::active_tape = previous_; }
GradTape::Pause::Pause() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
GradTape::Pause::~Pause() { detail::active_tape = previous_; }

GradTape* GradTape::active() { return detail::active_tape; }

void GradTape::push(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  Entry e;
  e.out = OpAccess::node(out);
  e.out->requires_grad = true;
  e.out->tape_id = tape_id_;
  e.inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    const auto& n = OpAccess::node(in);
    if (n->requires_grad && n->tape_id != tape_id_ && !leaf_index_.count(n->id)) {
      leaf_index_.emplace(n->id, leaves_.size());
      leaves_.push_back(n);
    }
    e.inputs.push_back(n);
  }
  e.fn = std::move(fn);
  entries_.push_back(std::move(e));
}

Gradients GradTape::backward(const Tensor& scalar) const {
  if (scalar.size() != 1)
    throw std::invalid_argument("backward() requires a one-element tensor, got " + shape_str(scalar.shape()));
  if (entries_.empty()) throw std::invalid_argument("backward() on an empty tape");

  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads[OpAccess::node(scalar).get()] = {1.0};

  std::vector<std::vector<double>*> grad_in;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto found = grads.find(it->out.get());
    if (found == grads.end()) continue;
    std::vector<double> grad_out = std::move(found->second);
    grads.erase(found);
    grad_in.assign(it->inputs.size(), nullptr);
    for (std::size_t k = 0; k < it->inputs.size(); ++k) {
      const auto& in = it->inputs[k];
      if (!in->requires_grad) continue;
      auto& g = grads[in.get()];
      if (g.empty()) g.assign(in->data.size(), 0.0);
      grad_in[k] = &g;
    }
    it->fn(grad_out, grad_in);
  }

  Gradients result;
  for (const auto& leaf : leaves_) {
    auto found = grads.find(leaf.get());
    std::vector<double> g = found != grads.end() ? found->second : std::vector<double>(leaf->data.size(), 0.0);
    result.grads_.emplace(leaf->id, Tensor(leaf->shape, std::move(g)));
  }
  return result;
}

// ---- helpers -----------------------------------------------------------------

namespace {

using Fn = GradTape::BackwardFn;

const std::vector<double>& data_of(const Tensor& t) { return OpAccess::node(t)->data; }

Tensor finish(const char* op, Shape shape, std::vector<double> data) {
  for (double v : data)
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  return OpAccess::wrap(detail::make_node(std::move(shape), std::move(data)));
}

GradTape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  GradTape* tape = GradTape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, double beta) {
  using Stride = Eigen::OuterStride<>;
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  const auto idx = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<RowMat, 0, Stride> C(c, idx(m), idx(n), Stride(idx(ldc)));
  if (beta == 0.0) C.setZero();
  else if (beta != 1.0) C *= beta;
  // A row-major [k, m] buffer read column-major is its transpose [m, k].
  auto run = [&](const auto& A) {
    if (tb) C.noalias() += A * Eigen::Map<const ColMat, 0, Stride>(b, idx(k), idx(n), Stride(idx(ldb)));
    else C.noalias() += A * Eigen::Map<const RowMat, 0, Stride>(b, idx(k), idx(n), Stride(idx(ldb)));
  };
  if (ta) run(Eigen::Map<const ColMat, 0, Stride>(a, idx(m), idx(k), Stride(idx(lda))));
  else run(Eigen::Map<const RowMat, 0, Stride>(a, idx(m), idx(k), Stride(idx(lda))));
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  const auto& x = data_of(a);
  const auto& y = data_of(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  Tensor r = finish("add", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a, &b})) {
    tape->push(r, {a, b}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (auto* dst : gi)
        if (dst)
          for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
    });
  }
  return r;
}

Tensor add(const Tensor& a, double c) {
  const auto& x = data_of(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + c;
  Tensor r = finish("add", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a})) {
    tape->push(r, {a}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    });
  }
  return r;
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same("multiply", a, b);
  const auto& x = data_of(a);
  const auto& y = data_of(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  Tensor r = finish("multiply", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a, &b})) {
    tape->push(r, {a, b}, [a, b](std::span<const double> g, std::span<std::vector<double>*> gi) {
      const auto& x = data_of(a);
      const auto& y = data_of(b);
      if (gi[0])
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i];
      if (gi[1])
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * x[i];
    });
  }
  return r;
}

Tensor divide(const Tensor& a, const Tensor& b) {
  require_same("divide", a, b);
  const auto& x = data_of(a);
  const auto& y = data_of(b);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  Tensor r = finish("divide", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a, &b})) {
    tape->push(r, {a, b}, [a, b](std::span<const double> g, std::span<std::vector<double>*> gi) {
      const auto& x = data_of(a);
      const auto& y = data_of(b);
      if (gi[0])
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / y[i];
      if (gi[1])
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i] * x[i] / (y[i] * y[i]);
    });
  }
  return r;
}

Tensor scale(const Tensor& a, double s) {
  const auto& x = data_of(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  Tensor r = finish("scale", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a})) {
    tape->push(r, {a}, [s](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * s;
    });
  }
  return r;
}

Tensor silu(const Tensor& a) {
  const auto& x = data_of(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  Tensor r = finish("silu", a.shape(), std::move(out));
  if (auto* tape = recording_tape({&a})) {
    tape->push(r, {a}, [a](std::span<const double> g, std::span<std::vector<double>*> gi) {
      const auto& x = data_of(a);
      auto& dst = *gi[0];
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        dst[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
      }
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }
Tensor square(const Tensor& x) { return multiply(x, x); }

// ---- linear algebra --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t k2 = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
                     shape_str(b.shape()) + (tb ? "^T" : ""));
  std::vector<double> out(m * n);
  gemm(ta, tb, m, n, k, data_of(a).data(), a.dim(1), data_of(b).data(), b.dim(1), out.data(), n, 0.0);
  Tensor r = finish("matmul", {m, n}, std::move(out));
  if (auto* tape = recording_tape({&a, &b})) {
    tape->push(r, {a, b}, [a, b, ta, tb, m, n, k](std::span<const double> g, std::span<std::vector<double>*> gi) {
      const double* A = data_of(a).data();
      const double* B = data_of(b).data();
      const std::size_t lda = a.dim(1), ldb = b.dim(1);
      if (gi[0]) {
        if (!ta)
          gemm(false, !tb, m, k, n, g.data(), n, B, ldb, gi[0]->data(), k, 1.0);
        else
          gemm(tb, true, k, m, n, B, ldb, g.data(), n, gi[0]->data(), m, 1.0);
      }
      if (gi[1]) {
        if (!tb)
          gemm(!ta, false, k, n, m, A, lda, g.data(), n, gi[1]->data(), n, 1.0);
        else
          gemm(true, ta, n, k, m, g.data(), n, A, lda, gi[1]->data(), k, 1.0);
      }
    });
  }
  return r;
}

namespace {

void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, double* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col + ((ci * 3 + ky) * 3 + kx) * hw;
        const double* src = x + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          double* dst = row + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(dst, dst + w, 0.0);
            continue;
          }
          const double* s = src + sy * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            dst[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : s[sx];
          }
        }
      }
}

void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w, double* dx) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col + ((ci * 3 + ky) * 3 + kx) * hw;
        double* dst = dx + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const double* r = row + y * w;
          double* d = dst + sy * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) d[sx] += r[xx];
          }
        }
      }
}

}  // namespace

Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) throw ShapeError("conv3x3: input must be [C, H, W], got " + shape_str(x.shape()));
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (weight.rank() != 4 || weight.dim(1) != cin || weight.dim(2) != 3 || weight.dim(3) != 3)
    throw ShapeError("conv3x3: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  const std::size_t cout = weight.dim(0);
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv3x3: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  const std::size_t hw = h * w, kk = cin * 9;
  std::vector<double> col(kk * hw);
  im2col(data_of(x).data(), cin, h, w, col.data());
  std::vector<double> out(cout * hw);
  const auto& bv = data_of(bias);
  for (std::size_t o = 0; o < cout; ++o) std::fill(out.begin() + o * hw, out.begin() + (o + 1) * hw, bv[o]);
  gemm(false, false, cout, hw, kk, data_of(weight).data(), kk, col.data(), hw, out.data(), hw, 1.0);
  Tensor r = finish("conv3x3", {cout, h, w}, std::move(out));
  if (auto* tape = recording_tape({&x, &weight, &bias})) {
    tape->push(r, {x, weight, bias},
               [x, weight, cin, cout, h, w](std::span<const double> g, std::span<std::vector<double>*> gi) {
                 const std::size_t hw = h * w, kk = cin * 9;
                 if (gi[1]) {
                   std::vector<double> col(kk * hw);
                   im2col(data_of(x).data(), cin, h, w, col.data());
                   gemm(false, true, cout, kk, hw, g.data(), hw, col.data(), hw, gi[1]->data(), kk, 1.0);
                 }
                 if (gi[2]) {
                   for (std::size_t o = 0; o < cout; ++o) {
                     double s = 0.0;
                     for (std::size_t i = 0; i < hw; ++i) s += g[o * hw + i];
                     (*gi[2])[o] += s;
                   }
                 }
                 if (gi[0]) {
                   std::vector<double> dcol(kk * hw);
                   gemm(true, false, kk, hw, cout, data_of(weight).data(), kk, g.data(), hw, dcol.data(), hw, 0.0);
                   col2im_add(dcol.data(), cin, h, w, gi[0]->data());
                 }
               });
  }
  return r;
}

Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample2x: input must be [C, H, W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto& src = data_of(x);
  std::vector<double> out(c * 4 * h * w);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(ci * 2 * h + y) * 2 * w + xx] = src[(ci * h + y / 2) * w + xx / 2];
  Tensor r = finish("upsample2x", {c, 2 * h, 2 * w}, std::move(out));
  if (auto* tape = recording_tape({&x})) {
    tape->push(r, {x}, [c, h, w](std::span<const double> g, std::span<std::vector<double>*> gi) {
      auto& dst = *gi[0];
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx)
            dst[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
    });
  }
  return r;
}

Tensor avgpool2x(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
    throw ShapeError("avgpool2x: input must be [C, H, W] with even H and W, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  const auto& src = data_of(x);
  std::vector<double> out(c * h * w);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double* p = src.data() + (ci * 2 * h + 2 * y) * 2 * w + 2 * xx;
        out[(ci * h + y) * w + xx] = 0.25 * (p[0] + p[1] + p[2 * w] + p[2 * w + 1]);
      }
  Tensor r = finish("avgpool2x", {c, h, w}, std::move(out));
  if (auto* tape = recording_tape({&x})) {
    tape->push(r, {x}, [c, h, w](std::span<const double> g, std::span<std::vector<double>*> gi) {
      auto& dst = *gi[0];
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const double v = 0.25 * g[(ci * h + y) * w + xx];
            double* p = dst.data() + (ci * 2 * h + 2 * y) * 2 * w + 2 * xx;
            p[0] += v;
            p[1] += v;
            p[2 * w] += v;
            p[2 * w + 1] += v;
          }
    });
  }
  return r;
}

// ---- structural ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape_positive(shape);
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor r = finish("reshape", std::move(shape), data_of(x));
  if (auto* tape = recording_tape({&x})) {
    tape->push(r, {x}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    });
  }
  return r;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto& src = data_of(x);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  Tensor r = finish("transpose", {n, m}, std::move(out));
  if (auto* tape = recording_tape({&x})) {
    tape->push(r, {x}, [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
      auto& dst = *gi[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
    });
  }
  return r;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = data_of(parts[k]);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    offset += widths[k];
  }
  Tensor r = finish("concat", out_shape, std::move(out));
  GradTape* tape = GradTape::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    tape->push(r, parts, [widths, outer, row](std::span<const double> g, std::span<std::vector<double>*> gi) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (gi[k])
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < widths[k]; ++i) (*gi[k])[o * widths[k] + i] += g[o * row + offset + i];
        offset += widths[k];
      }
    });
  }
  return r;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, M], got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t v = table.dim(0), m = table.dim(1);
  const auto& src = data_of(table);
  std::vector<double> out(ids.size() * m);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " + shape_str(table.shape()));
    std::copy_n(src.begin() + ids[i] * m, m, out.begin() + i * m);
  }
  Tensor r = finish("embedding", {ids.size(), m}, std::move(out));
  if (auto* tape = recording_tape({&table})) {
    std::vector<int> saved(ids.begin(), ids.end());
    tape->push(r, {table}, [saved, m](std::span<const double> g, std::span<std::vector<double>*> gi) {
      auto& dst = *gi[0];
      for (std::size_t i = 0; i < saved.size(); ++i)
        for (std::size_t j = 0; j < m; ++j) dst[saved[i] * m + j] += g[i * m + j];
    });
  }
  return r;
}

Tensor gather(const Tensor& x, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("gather: empty index list");
  const auto& src = data_of(x);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= src.size())
      throw ShapeError("gather: index " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
    out[i] = src[idx[i]];
  }
  Tensor r = finish("gather", {idx.size()}, std::move(out));
  if (auto* tape = recording_tape({&x})) {
    std::vector<std::size_t> saved(idx.begin(), idx.end());
    tape->push(r, {x}, [saved](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (std::size_t i = 0; i < saved.size(); ++i) (*gi[0])[saved[i]] += g[i];
    });
  }
  return r;
}

// ---- normalization / reductions ---------------------------------------------------

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.dim(0);
  if (groups == 0 || c % groups)
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + shape_str(x.shape()));
  if (gamma.defined() && gamma.shape() != Shape{c})
    throw ShapeError("group_norm: gamma " + shape_str(gamma.shape()) + " vs input " + shape_str(x.shape()));
  if (beta.defined() && beta.shape() != Shape{c})
    throw ShapeError("group_norm: beta " + shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t len = x.size() / c, per = c / groups, n = per * len;
  const auto& src = data_of(x);
  std::vector<double> xhat(src.size()), inv_std(groups), out(src.size());
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    const double* p = src.data() + gidx * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += p[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[gidx] = is;
    for (std::size_t i = 0; i < n; ++i) xhat[gidx * n + i] = (p[i] - mu) * is;
  }
  const double* gm = gamma.defined() ? data_of(gamma).data() : nullptr;
  const double* bt = beta.defined() ? data_of(beta).data() : nullptr;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double gv = gm ? gm[ci] : 1.0, bv = bt ? bt[ci] : 0.0;
    for (std::size_t l = 0; l < len; ++l) out[ci * len + l] = xhat[ci * len + l] * gv + bv;
  }
  Tensor r = finish("group_norm", x.shape(), std::move(out));
  if (auto* tape = recording_tape({&x, &gamma, &beta})) {
    std::vector<Tensor> inputs{x};
    if (gamma.defined()) inputs.push_back(gamma);
    if (beta.defined()) inputs.push_back(beta);
    const bool has_gamma = gamma.defined(), has_beta = beta.defined();
    tape->push(r, inputs,
               [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, has_gamma, has_beta, c, len, per, n,
                groups](std::span<const double> g, std::span<std::vector<double>*> gi) {
                 const double* gm = has_gamma ? data_of(gamma).data() : nullptr;
                 std::vector<double>* dgamma = has_gamma ? gi[1] : nullptr;
                 std::vector<double>* dbeta = has_beta ? gi[has_gamma ? 2 : 1] : nullptr;
                 for (std::size_t ci = 0; ci < c; ++ci) {
                   if (dgamma) {
                     double s = 0.0;
                     for (std::size_t l = 0; l < len; ++l) s += g[ci * len + l] * xhat[ci * len + l];
                     (*dgamma)[ci] += s;
                   }
                   if (dbeta) {
                     double s = 0.0;
                     for (std::size_t l = 0; l < len; ++l) s += g[ci * len + l];
                     (*dbeta)[ci] += s;
                   }
                 }
                 if (!gi[0]) return;
                 std::vector<double> dxhat(n);
                 for (std::size_t gidx = 0; gidx < groups; ++gidx) {
                   double s1 = 0.0, s2 = 0.0;
                   for (std::size_t i = 0; i < n; ++i) {
                     const std::size_t flat = gidx * n + i;
                     const double gv = gm ? gm[flat / len] : 1.0;
                     dxhat[i] = g[flat] * gv;
                     s1 += dxhat[i];
                     s2 += dxhat[i] * xhat[flat];
                   }
                   const double inv_n = 1.0 / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i) {
                     const std::size_t flat = gidx * n + i;
                     (*gi[0])[flat] += inv_std[gidx] * (dxhat[i] - s1 * inv_n - xhat[flat] * s2 * inv_n);
                   }
                 }
                 (void)per;
               });
  }
  return r;
}

Tensor softmax(const Tensor& x) {
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  const auto& src = data_of(x);
  std::vector<double> out(src.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = src.data() + r * cols;
    double* q = out.data() + r * cols;
    const double mx = *std::max_element(p, p + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      q[j] = std::exp(p[j] - mx);
      s += q[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < cols; ++j) q[j] *= inv;
  }
  Tensor res = finish("softmax", x.shape(), std::move(out));
  if (auto* tape = recording_tape({&x})) {
    tape->push(res, {x}, [res, rows, cols](std::span<const double> g, std::span<std::vector<double>*> gi) {
      const auto& y = data_of(res);
      auto& dst = *gi[0];
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) dst[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
      }
    });
  }
  return res;
}

Tensor sum(const Tensor& x) {
  const auto& src = data_of(x);
  double s = 0.0;
  for (double v : src) s += v;
  Tensor r = finish("sum", {1}, {s});
  if (auto* tape = recording_tape({&x})) {
    tape->push(r, {x}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
      for (auto& v : *gi[0]) v += g[0];
    });
  }
  return r;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---- finite differences -------------------------------------------------------------

FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step,
                                 std::span<const std::size_t> coords) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  FdReport report;
  const std::size_t n = point.size();
  std::vector<std::size_t> which(coords.begin(), coords.end());
  if (which.empty()) {
    which.resize(n);
    std::iota(which.begin(), which.end(), std::size_t{0});
  }

  std::vector<double> full_grad(n, 0.0);
  {
    GradTape tape;
    Tensor x = point.clone();
    x.set_requires_grad(true);
    Tensor y;
    {
      auto rec = tape.record();
      y = f(x);
    }
    if (y.size() != 1) throw std::invalid_argument("finite_difference_check: function must return a scalar");
    if (y.requires_grad() && tape.size() > 0) {
      Gradients g = tape.backward(y);
      if (g.contains(x)) {
        auto v = g[x].values();
        full_grad.assign(v.begin(), v.end());
      }
    }
  }

  GradTape::Pause pause;
  for (std::size_t c : which) {
    if (c >= n) throw std::out_of_range("finite_difference_check: coordinate outside point");
    Tensor xp = point.clone(), xm = point.clone();
    xp.mutable_values()[c] += step;
    xm.mutable_values()[c] -= step;
    double fp = 0.0, fm = 0.0;
    try {
      fp = f(xp).item();
      fm = f(xm).item();
    } catch (const NonFiniteError&) {
      report.non_finite_at = c;
      return report;
    }
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.non_finite_at = c;
      return report;
    }
    report.analytic.push_back(full_grad[c]);
    report.numeric.push_back((fp - fm) / (2.0 * step));
  }
  report.checked = which.size();
  double scale_a = 0.0, scale_n = 0.0;
  for (std::size_t i = 0; i < which.size(); ++i) {
    scale_a = std::max(scale_a, std::abs(report.analytic[i]));
    scale_n = std::max(scale_n, std::abs(report.numeric[i]));
  }
  const double denom = std::max(scale_a, scale_n);
  if (denom == 0.0) return report;
  for (std::size_t i = 0; i < which.size(); ++i) {
    const double e = std::abs(report.analytic[i] - report.numeric[i]) / denom;
    if (e > report.max_rel_error) {
      report.max_rel_error = e;
      report.worst_index = which[i];
    }
  }
  return report;
}

// ---- serialization -----------------------------------------------------------------

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  nlohmann::json header{{"name", name}, {"shape", t.shape()}};
  out << header.dump() << '\n';
  const auto v = t.values();
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing tensor '" + name + "'");
}

std::pair<std::string, Tensor> read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("unexpected end of stream reading tensor header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("malformed tensor header: ") + e.what());
  }
  std::string name = header.at("name").get<std::string>();
  Shape shape = header.at("shape").get<Shape>();
  check_shape_positive(shape);
  std::vector<double> data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated tensor data for '" + name + "'");
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

}  // namespace tinylayout
