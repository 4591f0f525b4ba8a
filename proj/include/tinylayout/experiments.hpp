#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tinylayout/dataset.hpp"
#include "tinylayout/diffusion.hpp"
#include "tinylayout/eval.hpp"
#include "tinylayout/guidance.hpp"
#include "tinylayout/model.hpp"

namespace tinylayout {

enum class GuidanceMode { None, Forward, Backward, Both };
GuidanceMode parse_mode(const std::string& s);
std::string mode_name(GuidanceMode m);

struct RunConfig {
  int steps = 50;
  double cfg_scale = 7.5;
  std::uint64_t seed = 0;
  double lambda = 0.8;
  double eta = 30.0;
  std::vector<LayerId> gamma_layers{LayerId::Mid1, LayerId::Up1};
  std::vector<LayerId> forward_layers{kAllLayers.begin(), kAllLayers.end()};
  int forward_steps = 40;
  int backward_steps = 10;
  int backward_repeats = 5;
  bool include_special = true;
  std::size_t jobs = 1;

  void validate() const;
  SamplerConfig sampler(std::uint64_t seed_value) const;
  ForwardConfig forward() const;
  BackwardConfig backward() const;
};

// Overrides fields present in a JSON object; unknown keys are rejected.
void apply_run_config_json(RunConfig& config, const std::string& json_text);
std::vector<LayerId> parse_layer_list(const std::string& comma_separated);

SampleResult generate(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                      const LayoutSpec& layout, GuidanceMode mode, const RunConfig& config, std::uint64_t seed,
                      const Tensor* context_override = nullptr, std::vector<BackwardStep>* energy_log = nullptr);

struct VisorPrompt {
  ObjectClass subject;
  ObjectClass object;
  Relation relation = Relation::Left;
  std::string prompt;
  BBox subject_box;
  BBox object_box;
  std::uint64_t seed = 0;
};

// Split-canvas boxes: left of -> subject (0,0,0.5,1), object (0.5,0,1,1), etc.
std::pair<BBox, BBox> split_canvas_boxes(Relation r);
std::string two_object_prompt(const ObjectClass& subject, Relation r, const ObjectClass& object);
// Ordered class pairs x relations, shuffled by `seed`; the held-out class is skipped.
std::vector<VisorPrompt> visor_prompts(std::size_t n, std::uint64_t seed, const std::optional<ObjectClass>& held_out);
// Targets the color and shape tokens of each object.
LayoutSpec visor_layout(const VisorPrompt& prompt, const TokenSequence& tokens);

struct VisorRun {
  MetricsReport report;
  std::vector<Image> images;
  std::vector<double> seconds;  // wall-clock per image
  std::vector<std::vector<CrossAttnRecord>> histories;  // kept only when requested
};

VisorRun run_visor(const Model& model, const NoiseSchedule& schedule, const std::vector<VisorPrompt>& prompts,
                   GuidanceMode mode, const RunConfig& config, bool keep_history = false);

// Mean over `layers` and the final `last_steps` steps of the in-box fraction of
// the targets' attention mass (token sets averaged within a target).
double in_box_attention(const std::vector<CrossAttnRecord>& history, const std::vector<ResolvedTarget>& targets,
                        std::span<const LayerId> layers, int steps, int last_steps);

// Layer subsets of the ablation sweep, in table order.
std::vector<std::vector<LayerId>> ablation_layer_sets();
std::vector<double> ablation_etas();

}  // namespace tinylayout
