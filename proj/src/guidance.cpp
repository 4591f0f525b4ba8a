#include "tinylayout/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace tinylayout {

namespace {

void check_steps(int begin, int end, int inference_steps, const char* what) {
  if (begin < 0 || end < begin || end > inference_steps)
    throw std::invalid_argument(std::string(what) + " step range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") outside the " + std::to_string(inference_steps) +
                                " inference steps");
}

const CrossAttnRecord& find_record(const std::vector<CrossAttnRecord>& records, LayerId layer) {
  for (const auto& r : records)
    if (r.layer == layer) return r;
  throw std::invalid_argument("no attention record for layer " + std::string(layer_name(layer)));
}

}  // namespace

// ---- targets -------------------------------------------------------------------------

std::vector<std::size_t> resolve_selector(const TokenSelector& selector, const TokenSequence& tokens) {
  std::vector<std::size_t> out;
  switch (selector.kind) {
    case TokenSelector::Kind::Index:
    case TokenSelector::Kind::Indices:
      out = selector.indices;
      break;
    case TokenSelector::Kind::Sot:
      out = {0};
      break;
    case TokenSelector::Kind::Eot:
      out = tokens.eot_indices();
      break;
    case TokenSelector::Kind::Words:
      out = tokens.word_indices();
      break;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw std::invalid_argument("token selector resolves to an empty set");
  if (out.back() >= tokens.size())
    throw std::invalid_argument("token index " + std::to_string(out.back()) + " outside 0.." +
                                std::to_string(tokens.size() - 1));
  return out;
}

std::vector<ResolvedTarget> resolve_layout(const LayoutSpec& layout, const TokenSequence& tokens) {
  std::vector<ResolvedTarget> out;
  for (const auto& t : layout) out.push_back({resolve_selector(t.selector, tokens), t.box});
  for (std::size_t a = 0; a < out.size(); ++a)
    for (std::size_t b = a + 1; b < out.size(); ++b) {
      if (out[a].box == out[b].box) continue;
      for (auto i : out[a].tokens)
        if (std::binary_search(out[b].tokens.begin(), out[b].tokens.end(), i))
          throw std::invalid_argument("conflicting targets: token " + std::to_string(i) + " has two boxes");
    }
  return out;
}

LayoutSpec parse_layout(const std::string& json_text, const TokenSequence& tokens, const Vocabulary& vocab) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw LayoutParseError("layout JSON parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_array()) throw LayoutParseError("layout must be a JSON array");
  LayoutSpec spec;
  for (std::size_t k = 0; k < doc.size(); ++k) {
    const auto& item = doc[k];
    const std::string where = "layout entry " + std::to_string(k);
    if (!item.is_object() || !item.contains("token") || !item.contains("box") || !item["token"].is_string() ||
        !item["box"].is_array() || item["box"].size() != 4)
      throw LayoutParseError(where + ": expected {\"token\": string, \"box\": [x0, y0, x1, y1]}");
    std::array<double, 4> b{};
    for (std::size_t i = 0; i < 4; ++i) {
      if (!item["box"][i].is_number()) throw LayoutParseError(where + ": box coordinates must be numbers");
      b[i] = item["box"][i].get<double>();
    }
    BBox box;
    try {
      box = make_bbox(b[0], b[1], b[2], b[3]);
    } catch (const std::invalid_argument& e) {
      throw LayoutParseError(where + ": " + e.what());
    }
    const auto word = item["token"].get<std::string>();
    if (word == "SOT") {
      spec.push_back({TokenSelector::sot(), box});
    } else if (word == "EOT") {
      spec.push_back({TokenSelector::eot(), box});
    } else {
      const auto id = vocab.find(word);
      if (!id) throw LayoutParseError(where + ": unknown word '" + word + "'");
      std::vector<std::size_t> hits;
      for (std::size_t i = tokens.word_begin; i < tokens.word_end; ++i)
        if (tokens.ids[i] == *id) hits.push_back(i);
      if (hits.empty()) throw LayoutParseError(where + ": word '" + word + "' is not in the prompt");
      if (hits.size() > 1)
        throw LayoutParseError(where + ": word '" + word + "' occurs " + std::to_string(hits.size()) +
                               " times in the prompt");
      spec.push_back({TokenSelector::index(hits[0]), box});
    }
  }
  return spec;
}

void ForwardConfig::validate(int inference_steps) const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  check_steps(step_begin, step_end, inference_steps, "forward");
}

void BackwardConfig::validate(int inference_steps) const {
  if (!(eta >= 0.0)) throw std::invalid_argument("eta must be >= 0");
  if (layers.empty()) throw std::invalid_argument("backward layer set must be nonempty");
  if (repeats < 1) throw std::invalid_argument("backward repeats must be >= 1");
  check_steps(step_begin, step_end, inference_steps, "backward");
}

// ---- windows -------------------------------------------------------------------------

Tensor gaussian_window(const BBox& box, std::size_t grid_h, std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0) throw std::invalid_argument("gaussian_window: empty grid");
  const double cx = box.cx() * grid_w, cy = box.cy() * grid_h;
  const double sx = std::max(0.5, box.width() * grid_w / 2.0);
  const double sy = std::max(0.5, box.height() * grid_h / 2.0);
  std::vector<double> g(grid_h * grid_w);
  double total = 0.0;
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      const double dx = (c + 0.5 - cx) / sx, dy = (r + 0.5 - cy) / sy;
      g[r * grid_w + c] = std::exp(-0.5 * (dx * dx + dy * dy));
      total += g[r * grid_w + c];
    }
  for (double& v : g) v /= total;
  return Tensor({grid_h * grid_w}, std::move(g));
}

std::vector<std::size_t> rasterize_box(const BBox& box, std::size_t grid_h, std::size_t grid_w) {
  std::vector<std::size_t> cells;
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c)
      if (box.contains((c + 0.5) / grid_w, (r + 0.5) / grid_h)) cells.push_back(r * grid_w + c);
  if (cells.empty())
    throw std::invalid_argument("box covers no cell centers of the " + std::to_string(grid_h) + "x" +
                                std::to_string(grid_w) + " grid");
  return cells;
}

// ---- forward guidance ----------------------------------------------------------------

Tensor forward_bias(const Tensor& A, std::span<const std::size_t> tokens, const Tensor& g, double lambda) {
  std::vector<Tensor> windows(tokens.size(), g);
  return forward_bias(A, tokens, windows, lambda);
}

Tensor forward_bias(const Tensor& A, std::span<const std::size_t> tokens, const std::vector<Tensor>& windows,
                    double lambda) {
  if (A.rank() != 2) throw ShapeError("forward_bias: attention map must be [cells, N], got " + shape_str(A.shape()));
  const std::size_t cells = A.dim(0), n = A.dim(1);
  if (windows.size() != tokens.size()) throw std::invalid_argument("forward_bias: one window per token required");
  std::vector<double> keep(cells * n, 1.0), place(cells * n, 0.0);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const std::size_t i = tokens[k];
    if (i >= n) throw std::invalid_argument("forward_bias: token index " + std::to_string(i) + " out of range");
    if (windows[k].size() != cells)
      throw ShapeError("forward_bias: window " + shape_str(windows[k].shape()) + " for " + std::to_string(cells) +
                       " cells");
    auto g = windows[k].values();
    for (std::size_t u = 0; u < cells; ++u) {
      keep[u * n + i] = 1.0 - lambda;
      place[u * n + i] = lambda * g[u];
    }
  }
  Tensor col_mass = matmul(Tensor({1, cells}, 1.0), A);            // [1, N]
  Tensor spread = matmul(Tensor({cells, 1}, 1.0), col_mass);       // [cells, N]
  return add(multiply(A, Tensor({cells, n}, std::move(keep))), multiply(spread, Tensor({cells, n}, std::move(place))));
}

// ---- backward guidance ---------------------------------------------------------------

Tensor layout_energy(const Tensor& A, std::span<const std::size_t> mask, std::size_t token) {
  if (A.rank() != 2) throw ShapeError("layout_energy: attention map must be [cells, N], got " + shape_str(A.shape()));
  const std::size_t cells = A.dim(0), n = A.dim(1);
  if (token >= n) throw std::invalid_argument("layout_energy: token index " + std::to_string(token) + " out of range");
  std::vector<std::size_t> column(cells), inside;
  for (std::size_t u = 0; u < cells; ++u) column[u] = u * n + token;
  for (auto u : mask) {
    if (u >= cells) throw std::invalid_argument("layout_energy: mask cell outside the map");
    inside.push_back(u * n + token);
  }
  Tensor total = sum(gather(A, column));
  if (!(total.item() > 0.0)) throw std::invalid_argument("layout_energy: column has zero attention mass");
  if (inside.empty()) return add(scale(total, 0.0), 1.0);
  Tensor ratio = divide(sum(gather(A, inside)), total);
  return square(add(scale(ratio, -1.0), 1.0));
}

Tensor total_energy(const std::vector<CrossAttnRecord>& records, const std::vector<ResolvedTarget>& targets,
                    std::span<const LayerId> gamma) {
  if (gamma.empty() || targets.empty()) throw std::invalid_argument("total_energy needs layers and targets");
  Tensor acc;
  for (LayerId layer : gamma) {
    const auto& rec = find_record(records, layer);
    for (const auto& target : targets) {
      const auto mask = rasterize_box(target.box, rec.grid_h, rec.grid_w);
      Tensor part;
      for (auto i : target.tokens) {
        Tensor e = layout_energy(rec.map, mask, i);
        part = part.defined() ? add(part, e) : e;
      }
      if (target.tokens.size() > 1) part = scale(part, 1.0 / static_cast<double>(target.tokens.size()));
      acc = acc.defined() ? add(acc, part) : part;
    }
  }
  return acc;
}

Tensor backward_update(const Tensor& z, const std::vector<ResolvedTarget>& targets, const Model& model,
                       const Tensor& context, int timestep, const BackwardConfig& config,
                       const NoiseSchedule& schedule, int step, std::vector<BackwardStep>* log) {
  if (config.eta == 0.0) return z;
  LayerId last = config.layers.front();
  for (auto l : config.layers)
    if (layer_index(l) > layer_index(last)) last = l;
  DenoiseOptions opt;
  opt.stop_after = last;
  const double step_size = schedule.sigma(timestep) * config.eta;
  Tensor cur = z;
  for (int r = 0; r < config.repeats; ++r) {
    Tensor leaf = cur.clone();
    leaf.set_requires_grad(true);
    GradTape tape;
    Tensor energy;
    {
      auto rec = tape.record();
      auto out = model.denoise(leaf, timestep, context, opt);
      energy = total_energy(out.records, targets, config.layers);
    }
    auto grads = tape.backward(energy);
    if (log) log->push_back({step, r, energy.item()});
    auto g = grads[leaf].values();
    std::vector<double> next(cur.values().begin(), cur.values().end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NonFiniteError("non-finite guidance gradient at step " + std::to_string(step) + ", repeat " +
                             std::to_string(r));
      next[i] -= step_size * g[i];
    }
    cur = Tensor(cur.shape(), std::move(next));
  }
  return cur;
}

// ---- orchestration -------------------------------------------------------------------

LayoutGuidance::LayoutGuidance(const Model& model, const NoiseSchedule& schedule, const TokenSequence& tokens,
                               const LayoutSpec& layout, std::optional<ForwardConfig> forward,
                               std::optional<BackwardConfig> backward, int inference_steps)
    : model_(model), schedule_(schedule), forward_(std::move(forward)), backward_(std::move(backward)) {
  if (!forward_ && !backward_) throw std::invalid_argument("guidance needs a forward or backward config");
  if (layout.empty()) throw std::invalid_argument("guidance needs a nonempty layout");
  if (forward_) forward_->validate(inference_steps);
  if (backward_) backward_->validate(inference_steps);
  targets_ = resolve_layout(layout, tokens);
  if (!forward_) return;

  // Column -> targets whose window it takes. User targets win over the
  // special-token additions, which average the windows of all word targets.
  std::map<std::size_t, std::vector<std::size_t>> sources;
  for (std::size_t k = 0; k < targets_.size(); ++k)
    for (auto i : targets_[k].tokens) sources[i] = {k};
  if (forward_->include_special) {
    std::vector<std::size_t> special{0};
    for (auto i : tokens.eot_indices()) special.push_back(i);
    std::vector<std::size_t> word_targets;
    for (std::size_t k = 0; k < targets_.size(); ++k)
      if (std::any_of(targets_[k].tokens.begin(), targets_[k].tokens.end(),
                      [&](std::size_t i) { return i >= tokens.word_begin && i < tokens.word_end; }))
        word_targets.push_back(k);
    if (!word_targets.empty())
      for (auto i : special)
        if (!sources.count(i)) sources[i] = word_targets;
  }
  for (const auto& [i, _] : sources) fwd_tokens_.push_back(i);
  for (LayerId layer : forward_->layers) {
    const std::size_t side = model.config().grid_size(layer);
    std::vector<Tensor> windows;
    for (const auto& [i, src] : sources) {
      std::vector<double> w(side * side, 0.0);
      for (auto k : src) {
        const Tensor window = gaussian_window(targets_[k].box, side, side);
        auto g = window.values();
        for (std::size_t u = 0; u < w.size(); ++u) w[u] += g[u] / static_cast<double>(src.size());
      }
      windows.emplace_back(Shape{side * side}, std::move(w));
    }
    fwd_windows_[layer] = std::move(windows);
  }
  fn_ = [this](LayerId layer, int, const Tensor& map) -> std::optional<Tensor> {
    auto it = fwd_windows_.find(layer);
    if (it == fwd_windows_.end()) return std::nullopt;
    return forward_bias(map, fwd_tokens_, it->second, forward_->lambda);
  };
}

bool LayoutGuidance::forward_active(int step) const {
  return forward_ && step >= forward_->step_begin && step < forward_->step_end;
}

bool LayoutGuidance::backward_active(int step) const {
  return backward_ && step >= backward_->step_begin && step < backward_->step_end;
}

std::vector<std::size_t> LayoutGuidance::forward_tokens() const { return fwd_tokens_; }

Tensor LayoutGuidance::pre_update(int step, int timestep, const Tensor& z, const Tensor& context) {
  if (!backward_active(step)) return z;
  return backward_update(z, targets_, model_, context, timestep, *backward_, schedule_, step, &log_);
}

const AttnIntervention* LayoutGuidance::intervention(int step) {
  return forward_active(step) && fn_ ? &fn_ : nullptr;
}

LayoutGuidance schedule_guidance(const Model& model, const NoiseSchedule& schedule, const TokenSequence& tokens,
                                 const LayoutSpec& layout, std::optional<ForwardConfig> forward,
                                 std::optional<BackwardConfig> backward, int inference_steps) {
  return LayoutGuidance(model, schedule, tokens, layout, std::move(forward), std::move(backward), inference_steps);
}

}  // namespace tinylayout
