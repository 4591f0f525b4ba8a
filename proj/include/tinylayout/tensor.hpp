#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tinylayout {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node;
}

class GradTape;

// Dense row-major double tensor. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // Direct write access; intended for leaves (parameters, optimizer updates).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  std::uint64_t id() const;

  Tensor clone() const;
  // Same values, no history, requires_grad off.
  Tensor detach() const { return clone(); }

 private:
  friend struct detail::Node;
  friend class GradTape;
  friend struct OpAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Gradients of a backward() call, keyed by leaf id.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  const Tensor& operator[](const Tensor& leaf) const;
  const std::unordered_map<std::uint64_t, Tensor>& all() const { return grads_; }

 private:
  friend class GradTape;
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

// Records primitive applications while a Recording scope is active on the
// current thread. Tapes are thread-confined; independent tapes may run on
// separate threads concurrently.
class GradTape {
 public:
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  class Recording {
   public:
    explicit Recording(GradTape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    GradTape* previous_;
  };

  [[nodiscard]] Recording record() { return Recording(*this); }

  // Reverse-mode pass from a one-element tensor. The tape is left intact so the
  // pass can be replayed.
  Gradients backward(const Tensor& scalar) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }

  static GradTape* active();

  // Suspends recording on the current thread for its lifetime.
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    GradTape* previous_;
  };

  // Used by primitives. Marks `out` as produced by this tape.
  void push(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    BackwardFn fn;
  };
  std::uint64_t tape_id_;
  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<detail::Node>> leaves_;
  std::unordered_map<std::uint64_t, std::size_t> leaf_index_;
};

// ---- primitives ------------------------------------------------------------
// Every primitive rejects mismatched shapes (ShapeError naming both shapes) and
// non-finite outputs (NonFiniteError naming the primitive).

Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// (m x k)(k x n); transposes are applied to the stored matrices before the product.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
// x: [Cin, H, W], weight: [Cout, Cin, 3, 3], bias: [Cout]. Stride 1, zero padding 1.
Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor upsample2x(const Tensor& x);  // nearest, [C, H, W] -> [C, 2H, 2W]
Tensor avgpool2x(const Tensor& x);   // [C, H, W] -> [C, H/2, W/2]
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);   // 2-D only
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor embedding(const Tensor& table, std::span<const int> ids);  // [V, M] -> [n, M]
// x: [C, ...]; statistics over each group of C/groups channels and all trailing
// positions. gamma/beta are optional per-channel affine terms.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma = {}, const Tensor& beta = {},
                  double eps = 1e-5);
Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x);  // over the last axis
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor gather(const Tensor& x, std::span<const std::size_t> flat_indices);

// Composites built only from primitives.
Tensor sub(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);

// ---- test oracle -------------------------------------------------------------

struct FdReport {
  double max_rel_error = 0.0;   // max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::optional<std::size_t> non_finite_at;  // coordinate where f was non-finite
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// Central differences of a tensor -> scalar function compared against backward().
// `coords` restricts the comparison to a subset of coordinates (all when empty).
FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                 double step, std::span<const std::size_t> coords = {});

// ---- serialization -----------------------------------------------------------
// A JSON line {"name":..., "shape":[...]} followed by raw little-endian doubles.

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> read_tensor(std::istream& in);

}  // namespace tinylayout
