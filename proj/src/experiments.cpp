#include "tinylayout/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tinylayout {

GuidanceMode parse_mode(const std::string& s) {
  if (s == "none") return GuidanceMode::None;
  if (s == "forward") return GuidanceMode::Forward;
  if (s == "backward") return GuidanceMode::Backward;
  if (s == "both") return GuidanceMode::Both;
  throw std::invalid_argument("unknown guidance mode '" + s + "' (none, forward, backward, both)");
}

std::string mode_name(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::None:
      return "none";
    case GuidanceMode::Forward:
      return "forward";
    case GuidanceMode::Backward:
      return "backward";
    case GuidanceMode::Both:
      return "both";
  }
  return "none";
}

void RunConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (!(cfg_scale >= 0.0)) throw std::invalid_argument("cfg_scale must be >= 0");
  if (jobs == 0) throw std::invalid_argument("jobs must be >= 1");
  forward().validate(steps);
  backward().validate(steps);
}

SamplerConfig RunConfig::sampler(std::uint64_t seed_value) const {
  SamplerConfig s;
  s.steps = steps;
  s.cfg_scale = cfg_scale;
  s.seed = seed_value;
  return s;
}

ForwardConfig RunConfig::forward() const {
  ForwardConfig f;
  f.lambda = lambda;
  f.step_end = forward_steps;
  f.layers = forward_layers;
  f.include_special = include_special;
  return f;
}

BackwardConfig RunConfig::backward() const {
  BackwardConfig b;
  b.eta = eta;
  b.layers = gamma_layers;
  b.step_end = backward_steps;
  b.repeats = backward_repeats;
  return b;
}

std::vector<LayerId> parse_layer_list(const std::string& s) {
  std::vector<LayerId> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(parse_layer(item));
  if (out.empty()) throw std::invalid_argument("empty layer list");
  return out;
}

void apply_run_config_json(RunConfig& c, const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config JSON parse error at byte " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "steps") c.steps = v.get<int>();
      else if (key == "cfg_scale") c.cfg_scale = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "eta") c.eta = v.get<double>();
      else if (key == "gamma_layers") c.gamma_layers = parse_layer_list(v.get<std::string>());
      else if (key == "forward_layers") c.forward_layers = parse_layer_list(v.get<std::string>());
      else if (key == "forward_steps") c.forward_steps = v.get<int>();
      else if (key == "backward_steps") c.backward_steps = v.get<int>();
      else if (key == "backward_repeats") c.backward_repeats = v.get<int>();
      else if (key == "include_special") c.include_special = v.get<bool>();
      else if (key == "jobs") c.jobs = v.get<std::size_t>();
      else if (key == "model" || key == "train" || key == "edit") continue;  // read by their commands
      else throw std::invalid_argument("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
  }
}

SampleResult generate(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                      const LayoutSpec& layout, GuidanceMode mode, const RunConfig& config, std::uint64_t seed,
                      const Tensor* context_override, std::vector<BackwardStep>* energy_log) {
  const auto tokens = model.tokenize(prompt);
  Tensor context;
  if (context_override) {
    context = *context_override;
  } else {
    GradTape::Pause no_grad;
    context = model.encode_text(tokens);
  }
  auto sc = config.sampler(seed);
  if (mode == GuidanceMode::None || layout.empty()) return sample(model, schedule, context, sc);
  std::optional<ForwardConfig> fwd;
  std::optional<BackwardConfig> bwd;
  if (mode == GuidanceMode::Forward || mode == GuidanceMode::Both) fwd = config.forward();
  if (mode == GuidanceMode::Backward || mode == GuidanceMode::Both) bwd = config.backward();
  auto hooks = schedule_guidance(model, schedule, tokens, layout, fwd, bwd, config.steps);
  auto result = sample(model, schedule, context, sc, &hooks);
  if (energy_log) *energy_log = hooks.energy_log();
  return result;
}

std::pair<BBox, BBox> split_canvas_boxes(Relation r) {
  const BBox left{0.0, 0.0, 0.5, 1.0}, right{0.5, 0.0, 1.0, 1.0};
  const BBox top{0.0, 0.0, 1.0, 0.5}, bottom{0.0, 0.5, 1.0, 1.0};
  switch (r) {
    case Relation::Left:
      return {left, right};
    case Relation::Right:
      return {right, left};
    case Relation::Above:
      return {top, bottom};
    case Relation::Below:
      return {bottom, top};
  }
  return {left, right};
}

std::string two_object_prompt(const ObjectClass& s, Relation r, const ObjectClass& o) {
  return "a " + s.name() + " " + std::string(relation_phrase(r)) + " a " + o.name();
}

std::vector<VisorPrompt> visor_prompts(std::size_t n, std::uint64_t seed, const std::optional<ObjectClass>& held_out) {
  if (n == 0) throw std::invalid_argument("n_prompts must be >= 1");
  std::vector<VisorPrompt> all;
  for (std::size_t a = 0; a < kNumClasses; ++a)
    for (std::size_t b = 0; b < kNumClasses; ++b) {
      const auto s = ObjectClass::from_index(a), o = ObjectClass::from_index(b);
      if (a == b || (held_out && (s == *held_out || o == *held_out))) continue;
      for (Relation r : kRelations) {
        auto [sb, ob] = split_canvas_boxes(r);
        all.push_back({s, o, r, two_object_prompt(s, r, o), sb, ob, 0});
      }
    }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<VisorPrompt> out;
  for (std::size_t i = 0; i < n; ++i) {
    VisorPrompt p = all[i % all.size()];
    p.seed = seed * 7919ull + i;
    out.push_back(p);
  }
  return out;
}

LayoutSpec visor_layout(const VisorPrompt& p, const TokenSequence& tokens) {
  if (tokens.word_count() < 7) throw std::invalid_argument("not a two-object prompt");
  const std::size_t s_color = tokens.word_begin + 1, o_color = tokens.word_end - 2;
  return {{TokenSelector::set({s_color, s_color + 1}), p.subject_box},
          {TokenSelector::set({o_color, o_color + 1}), p.object_box}};
}

VisorRun run_visor(const Model& model, const NoiseSchedule& schedule, const std::vector<VisorPrompt>& prompts,
                   GuidanceMode mode, const RunConfig& config, bool keep_history) {
  config.validate();
  VisorRun run;
  run.images.resize(prompts.size());
  run.seconds.resize(prompts.size());
  if (keep_history) run.histories.resize(prompts.size());
  std::vector<VisorSample> samples(prompts.size());
  parallel_for(prompts.size(), config.jobs, [&](std::size_t i) {
    const auto& p = prompts[i];
    const auto start = std::chrono::steady_clock::now();
    const auto tokens = model.tokenize(p.prompt);
    auto result = generate(model, schedule, p.prompt, visor_layout(p, tokens), mode, config, p.seed);
    run.seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    run.images[i] = tensor_to_image(result.image);
    if (keep_history) run.histories[i] = std::move(result.history);
    samples[i] = {detect(run.images[i]), p.subject, p.object, p.relation,
                  {{p.subject, p.subject_box}, {p.object, p.object_box}}};
  });
  run.report = visor_evaluate(samples);
  return run;
}

double in_box_attention(const std::vector<CrossAttnRecord>& history, const std::vector<ResolvedTarget>& targets,
                        std::span<const LayerId> layers, int steps, int last_steps) {
  const std::size_t per_step = kAllLayers.size();
  if (history.size() != per_step * static_cast<std::size_t>(steps))
    throw std::invalid_argument("attention history does not hold " + std::to_string(steps) + " steps");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = per_step * static_cast<std::size_t>(steps - last_steps); i < history.size(); ++i) {
    const auto& rec = history[i];
    if (std::find(layers.begin(), layers.end(), rec.layer) == layers.end()) continue;
    const std::size_t n = rec.map.dim(1);
    auto a = rec.map.values();
    for (const auto& t : targets) {
      const auto mask = rasterize_box(t.box, rec.grid_h, rec.grid_w);
      double frac = 0.0;
      for (auto tok : t.tokens) {
        double in = 0.0, all = 0.0;
        for (std::size_t u = 0; u < rec.map.dim(0); ++u) all += a[u * n + tok];
        for (auto u : mask) in += a[u * n + tok];
        frac += all > 0.0 ? in / all : 0.0;
      }
      total += frac / static_cast<double>(t.tokens.size());
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

std::vector<std::vector<LayerId>> ablation_layer_sets() {
  using L = LayerId;
  return {{L::Down1, L::Down2, L::Down3}, {L::Down1}, {L::Down2}, {L::Down3}, {L::Mid1}, {L::Mid1, L::Up1},
          {L::Mid1, L::Up2}, {L::Mid1, L::Up3}, {L::Up1, L::Up2, L::Up3}, {L::Up1}, {L::Up2}, {L::Up3}};
}

std::vector<double> ablation_etas() { return {5, 10, 20, 30, 50, 100, 200, 500}; }

}  // namespace tinylayout
