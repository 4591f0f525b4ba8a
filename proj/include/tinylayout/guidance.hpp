#pragma once

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tinylayout/diffusion.hpp"
#include "tinylayout/geometry.hpp"
#include "tinylayout/model.hpp"

namespace tinylayout {

struct TokenSelector {
  enum class Kind { Index, Indices, Sot, Eot, Words };
  Kind kind = Kind::Index;
  std::vector<std::size_t> indices;  // token positions for Index (one entry) / Indices

  static TokenSelector index(std::size_t i) { return {Kind::Index, {i}}; }
  static TokenSelector set(std::vector<std::size_t> s) { return {Kind::Indices, std::move(s)}; }
  static TokenSelector sot() { return {Kind::Sot, {}}; }
  static TokenSelector eot() { return {Kind::Eot, {}}; }
  static TokenSelector words() { return {Kind::Words, {}}; }
};

struct GuidanceTarget {
  TokenSelector selector;
  BBox box;
};
using LayoutSpec = std::vector<GuidanceTarget>;

struct ResolvedTarget {
  std::vector<std::size_t> tokens;
  BBox box;
};

// Sorted, deduplicated token positions; rejects empty or out-of-range sets.
std::vector<std::size_t> resolve_selector(const TokenSelector& selector, const TokenSequence& tokens);
std::vector<ResolvedTarget> resolve_layout(const LayoutSpec& layout, const TokenSequence& tokens);

class LayoutParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// JSON array of {"token": word | "SOT" | "EOT", "box": [x0, y0, x1, y1]}.
LayoutSpec parse_layout(const std::string& json_text, const TokenSequence& tokens, const Vocabulary& vocab);

struct ForwardConfig {
  double lambda = 0.8;
  int step_begin = 0;
  int step_end = 40;  // exclusive
  std::vector<LayerId> layers{kAllLayers.begin(), kAllLayers.end()};
  bool include_special = true;

  void validate(int inference_steps) const;
};

struct BackwardConfig {
  double eta = 30.0;
  std::vector<LayerId> layers{LayerId::Mid1, LayerId::Up1};
  int step_begin = 0;
  int step_end = 10;  // exclusive
  int repeats = 5;

  void validate(int inference_steps) const;
};

// L1-normalized Gaussian over grid cells (row-major), shape [grid_h * grid_w].
Tensor gaussian_window(const BBox& box, std::size_t grid_h, std::size_t grid_w);

// Flat indices of the cells whose centers lie inside the box.
std::vector<std::size_t> rasterize_box(const BBox& box, std::size_t grid_h, std::size_t grid_w);

// A: [cells, N]. Guided columns i get (1 - lambda) A_ui + lambda g_u sum_v A_vi.
Tensor forward_bias(const Tensor& A, std::span<const std::size_t> tokens, const Tensor& g, double lambda);
// Per-column windows: windows[k] applies to column tokens[k].
Tensor forward_bias(const Tensor& A, std::span<const std::size_t> tokens, const std::vector<Tensor>& windows,
                    double lambda);

Tensor layout_energy(const Tensor& A, std::span<const std::size_t> mask, std::size_t token);

Tensor total_energy(const std::vector<CrossAttnRecord>& records, const std::vector<ResolvedTarget>& targets,
                    std::span<const LayerId> gamma);

struct BackwardStep {
  int step = 0;
  int repeat = 0;
  double energy = 0.0;
};

Tensor backward_update(const Tensor& z, const std::vector<ResolvedTarget>& targets, const Model& model,
                       const Tensor& context, int timestep, const BackwardConfig& config,
                       const NoiseSchedule& schedule, int step = 0, std::vector<BackwardStep>* log = nullptr);

class LayoutGuidance : public GuidanceHooks {
 public:
  LayoutGuidance(const Model& model, const NoiseSchedule& schedule, const TokenSequence& tokens,
                 const LayoutSpec& layout, std::optional<ForwardConfig> forward, std::optional<BackwardConfig> backward,
                 int inference_steps);
  LayoutGuidance(const LayoutGuidance&) = delete;
  LayoutGuidance& operator=(const LayoutGuidance&) = delete;

  Tensor pre_update(int step, int timestep, const Tensor& z, const Tensor& context) override;
  const AttnIntervention* intervention(int step) override;

  bool forward_active(int step) const;
  bool backward_active(int step) const;
  // Columns biased by the forward intervention, ascending.
  std::vector<std::size_t> forward_tokens() const;
  const std::vector<ResolvedTarget>& targets() const { return targets_; }
  const std::vector<BackwardStep>& energy_log() const { return log_; }

 private:
  const Model& model_;
  const NoiseSchedule& schedule_;
  std::vector<ResolvedTarget> targets_;
  std::optional<ForwardConfig> forward_;
  std::optional<BackwardConfig> backward_;
  std::vector<std::size_t> fwd_tokens_;
  std::map<LayerId, std::vector<Tensor>> fwd_windows_;  // per layer, parallel to fwd_tokens_
  AttnIntervention fn_;
  std::vector<BackwardStep> log_;
};

LayoutGuidance schedule_guidance(const Model& model, const NoiseSchedule& schedule, const TokenSequence& tokens,
                                 const LayoutSpec& layout, std::optional<ForwardConfig> forward,
                                 std::optional<BackwardConfig> backward, int inference_steps);

}  // namespace tinylayout
