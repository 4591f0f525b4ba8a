#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tinylayout/model.hpp"
#include "tinylayout/tensor.hpp"

namespace tinylayout {

// Timesteps are 1..T; t = 0 denotes the clean signal (alpha_bar = 1).
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;      // betas[t - 1]
  std::vector<double> alpha_bar;  // alpha_bar[t - 1]

  double alpha_bar_at(int t) const;
  double sigma(int t) const { return sigma_from_alpha_bar(alpha_bar_at(t)); }
  static double sigma_from_alpha_bar(double alpha_bar);
};

NoiseSchedule build_schedule(int T = 500, double beta_start = 0.00085, double beta_end = 0.012);

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

// Descending timesteps visited by an n-step sampler: T, T - T/n, ..., T/n.
std::vector<int> inference_timesteps(const NoiseSchedule& schedule, int steps);

// ---- training ------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t total_steps = 3000;
  double dropout = 0.1;
  std::size_t checkpoint_every = 500;
  std::size_t warmup_steps = 100;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  std::size_t jobs = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainExample {
  Tensor image;  // [3, H, W] in [-1, 1]
  std::string caption;
};

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates `values` in place from `grad`; `key` identifies the moment buffers.
  void update(const std::string& key, std::span<double> values, std::span<const double> grad, double lr);
  void advance() { ++t_; }
  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>& moments() { return moments_; }
  const std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>& moments() const {
    return moments_;
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Per-sample randomness of one objective evaluation.
struct NoiseDraw {
  int t = 1;
  Tensor eps;
  bool drop_caption = false;
};

NoiseDraw draw_noise(std::mt19937_64& rng, const Shape& shape, const NoiseSchedule& schedule, double dropout);

// Random stream for (seed, step, index), independent of evaluation order.
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t index);

// Mean squared epsilon error for one example; differentiable under an active tape.
Tensor diffusion_loss(const Model& model, const TrainExample& example, const NoiseDraw& draw,
                      const NoiseSchedule& schedule, const Tensor* context_override = nullptr);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  bool rejected = false;
  std::string message;
};

// Loss and parameter gradients summed over the batch in index order
// (deterministic for any job count). `grads` maps parameter name -> gradient.
struct BatchGradients {
  double loss = 0.0;
  std::map<std::string, std::vector<double>> grads;
};
BatchGradients batch_gradients(const Model& model, const std::vector<const TrainExample*>& batch,
                               const std::vector<NoiseDraw>& draws, const NoiseSchedule& schedule,
                               const std::vector<std::string>& trainable, std::size_t jobs);

class Trainer {
 public:
  Trainer(Model& model, const NoiseSchedule& schedule, TrainConfig config);

  StepResult train_step(const std::vector<const TrainExample*>& batch);
  // Batch selection for the current step, drawn from derived_rng.
  std::vector<std::size_t> batch_indices(std::size_t dataset_size) const;

  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  Adam& optimizer() { return adam_; }
  const Adam& optimizer() const { return adam_; }
  const TrainConfig& config() const { return config_; }
  double learning_rate() const;

 private:
  Model& model_;
  const NoiseSchedule& schedule_;
  TrainConfig config_;
  Adam adam_;
  std::size_t step_ = 0;
};

// ---- sampling ------------------------------------------------------------------------

struct SamplerConfig {
  int steps = 50;
  double cfg_scale = 7.5;
  std::uint64_t seed = 0;
  bool keep_history = true;

  void validate(const NoiseSchedule& schedule) const;
};

class GuidanceHooks {
 public:
  virtual ~GuidanceHooks() = default;
  // Runs before the denoiser evaluations of inference step `step` (0-based).
  virtual Tensor pre_update(int step, int timestep, const Tensor& z, const Tensor& context) {
    (void)step, (void)timestep, (void)context;
    return z;
  }
  // Intervention for the conditional pass of `step`, or null.
  virtual const AttnIntervention* intervention(int step) {
    (void)step;
    return nullptr;
  }
};

struct SampleResult {
  Tensor image;  // [3, H, W] clamped to [-1, 1]
  std::vector<CrossAttnRecord> history;  // conditional pass, steps x 7
};

Tensor initial_latent(const ModelConfig& config, std::uint64_t seed);

SampleResult sample(const Model& model, const NoiseSchedule& schedule, const Tensor& context,
                    const SamplerConfig& config, GuidanceHooks* hooks = nullptr);
SampleResult sample(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                    const SamplerConfig& config, GuidanceHooks* hooks = nullptr);

// Runs `fn(i)` for i in [0, n) over `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace tinylayout
