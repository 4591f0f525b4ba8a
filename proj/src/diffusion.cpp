#include "tinylayout/diffusion.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace tinylayout {

// ---- schedule ------------------------------------------------------------------------

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::sigma_from_alpha_bar(double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw std::invalid_argument("alpha_bar must lie in (0, 1]");
  return std::sqrt((1.0 - alpha_bar) / alpha_bar);
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw std::invalid_argument("schedule needs 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(T - 1);
    const double b = i == T - 1 ? beta_end : beta_start + (beta_end - beta_start) * frac;
    s.betas[static_cast<std::size_t>(i)] = b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(i)] = prod;
  }
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape())
    throw ShapeError("q_sample: " + shape_str(z0.shape()) + " vs noise " + shape_str(eps.shape()));
  const double ab = schedule.alpha_bar_at(t);
  return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
  // u + w (c - u) is exact at w = 0 and when c == u; w = 1 is special-cased to be exact too.
  if (w == 1.0) return eps_cond.clone();
  return add(eps_uncond, scale(sub(eps_cond, eps_uncond), w));
}

std::vector<int> inference_timesteps(const NoiseSchedule& schedule, int steps) {
  if (steps < 1 || steps > schedule.T)
    throw std::invalid_argument("inference steps must lie in [1, " + std::to_string(schedule.T) + "]");
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    ts[static_cast<std::size_t>(k)] = static_cast<int>(std::lround(schedule.T * static_cast<double>(steps - k) / steps));
  return ts;
}

// ---- optimization --------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (jobs == 0) throw std::invalid_argument("jobs must be >= 1");
}

void Adam::update(const std::string& key, std::span<double> values, std::span<const double> grad, double lr) {
  if (values.size() != grad.size()) throw ShapeError("Adam: gradient size mismatch for " + key);
  auto& [m, v] = moments_[key];
  if (m.empty()) {
    m.assign(values.size(), 0.0);
    v.assign(values.size(), 0.0);
  }
  const double t = static_cast<double>(std::max<std::uint64_t>(t_, 1));
  const double c1 = 1.0 - std::pow(beta1_, t), c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < values.size(); ++i) {
    m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
    v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
    values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
  }
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

NoiseDraw draw_noise(std::mt19937_64& rng, const Shape& shape, const NoiseSchedule& schedule, double dropout) {
  NoiseDraw d;
  d.t = std::uniform_int_distribution<int>(1, schedule.T)(rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> e(numel(shape));
  for (auto& x : e) x = nd(rng);
  d.eps = Tensor(shape, std::move(e));
  d.drop_caption = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < dropout;
  return d;
}

Tensor diffusion_loss(const Model& model, const TrainExample& example, const NoiseDraw& draw,
                      const NoiseSchedule& schedule, const Tensor* context_override) {
  Tensor context = context_override ? *context_override
                                    : model.encode_text(model.tokenize(draw.drop_caption ? "" : example.caption));
  Tensor zt = q_sample(example.image, draw.t, draw.eps, schedule);
  Tensor eps_hat = model.denoise(zt, draw.t, context).eps;
  return mean(square(sub(eps_hat, draw.eps)));
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

BatchGradients batch_gradients(const Model& model, const std::vector<const TrainExample*>& batch,
                               const std::vector<NoiseDraw>& draws, const NoiseSchedule& schedule,
                               const std::vector<std::string>& trainable, std::size_t jobs) {
  if (batch.empty() || batch.size() != draws.size()) throw std::invalid_argument("batch and noise draws mismatch");
  struct PerSample {
    double loss = 0.0;
    std::vector<std::vector<double>> grads;
  };
  std::vector<PerSample> out(batch.size());
  parallel_for(batch.size(), jobs, [&](std::size_t i) {
    GradTape tape;
    Tensor loss;
    {
      auto rec = tape.record();
      loss = diffusion_loss(model, *batch[i], draws[i], schedule);
    }
    auto g = tape.backward(loss);
    out[i].loss = loss.item();
    for (const auto& name : trainable) {
      const Tensor& p = model.params().get(name);
      if (g.contains(p)) {
        auto v = g[p].values();
        out[i].grads.emplace_back(v.begin(), v.end());
      } else {
        out[i].grads.emplace_back(p.size(), 0.0);
      }
    }
  });
  BatchGradients result;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    std::vector<double> acc(out[0].grads[k].size(), 0.0);
    for (const auto& s : out)
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += s.grads[k][j] * inv_b;
    result.grads.emplace(trainable[k], std::move(acc));
  }
  for (const auto& s : out) result.loss += s.loss * inv_b;
  return result;
}

Trainer::Trainer(Model& model, const NoiseSchedule& schedule, TrainConfig config)
    : model_(model), schedule_(schedule), config_(config) {
  config_.validate();
}

double Trainer::learning_rate() const {
  if (config_.warmup_steps == 0 || step_ >= config_.warmup_steps) return config_.learning_rate;
  return config_.learning_rate * static_cast<double>(step_ + 1) / static_cast<double>(config_.warmup_steps);
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t dataset_size) const {
  if (dataset_size == 0) throw std::invalid_argument("empty training set");
  auto rng = derived_rng(config_.seed, step_, 0xba7c4);
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> idx(config_.batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

StepResult Trainer::train_step(const std::vector<const TrainExample*>& batch) {
  std::vector<NoiseDraw> draws;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto rng = derived_rng(config_.seed, step_, i);
    draws.push_back(draw_noise(rng, batch[i]->image.shape(), schedule_, config_.dropout));
  }
  std::vector<std::string> names;
  for (const auto& [name, _] : model_.params().entries()) names.push_back(name);

  model_.params().set_requires_grad(true);
  StepResult r;
  BatchGradients bg;
  try {
    bg = batch_gradients(model_, batch, draws, schedule_, names, config_.jobs);
  } catch (const NonFiniteError& e) {
    model_.params().set_requires_grad(false);
    r.rejected = true;
    r.message = std::string("step ") + std::to_string(step_) + " rejected: " + e.what();
    return r;
  }
  model_.params().set_requires_grad(false);
  r.loss = bg.loss;
  double norm2 = 0.0;
  for (const auto& [_, g] : bg.grads)
    for (double x : g) norm2 += x * x;
  r.grad_norm = std::sqrt(norm2);
  if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) {
    r.rejected = true;
    r.message = "step " + std::to_string(step_) + " rejected: non-finite loss";
    return r;
  }
  const double clip = config_.grad_clip > 0.0 && r.grad_norm > config_.grad_clip ? config_.grad_clip / r.grad_norm : 1.0;
  adam_.advance();
  const double lr = learning_rate();
  for (auto& [name, t] : model_.params().entries()) {
    auto& g = bg.grads.at(name);
    if (clip != 1.0)
      for (double& x : g) x *= clip;
    adam_.update(name, t.mutable_values(), g, lr);
  }
  ++step_;
  return r;
}

// ---- sampling ------------------------------------------------------------------------

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (steps < 1 || steps > schedule.T)
    throw std::invalid_argument("inference steps must lie in [1, " + std::to_string(schedule.T) + "]");
  if (!(cfg_scale >= 0.0)) throw std::invalid_argument("cfg scale must be >= 0");
}

Tensor initial_latent(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(config.image_channels * config.image_size * config.image_size);
  for (auto& x : v) x = nd(rng);
  return Tensor({config.image_channels, config.image_size, config.image_size}, std::move(v));
}

SampleResult sample(const Model& model, const NoiseSchedule& schedule, const Tensor& context,
                    const SamplerConfig& config, GuidanceHooks* hooks) {
  config.validate(schedule);
  GradTape::Pause no_grad;
  const Tensor uncond = model.encode_text(model.tokenize(""));
  const auto ts = inference_timesteps(schedule, config.steps);
  Tensor z = initial_latent(model.config(), config.seed);
  SampleResult result;
  for (int k = 0; k < config.steps; ++k) {
    const int t = ts[static_cast<std::size_t>(k)];
    const int t_prev = k + 1 < config.steps ? ts[static_cast<std::size_t>(k + 1)] : 0;
    if (hooks) {
      z = hooks->pre_update(k, t, z, context);
      for (double v : z.values())
        if (!std::isfinite(v)) throw NonFiniteError("guidance produced a non-finite latent at step " + std::to_string(k));
    }
    DenoiseOptions opt;
    if (hooks) opt.intervention = hooks->intervention(k);
    auto cond = model.denoise(z, t, context, opt);
    auto unc = model.denoise(z, t, uncond);
    if (config.keep_history)
      for (auto& r : cond.records) result.history.push_back(std::move(r));
    Tensor eps = cfg_combine(unc.eps, cond.eps, config.cfg_scale);

    const double ab = schedule.alpha_bar_at(t), ab_prev = schedule.alpha_bar_at(t_prev);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    std::vector<double> x0(z.size()), next(z.size());
    auto zv = z.values();
    auto ev = eps.values();
    for (std::size_t i = 0; i < z.size(); ++i) x0[i] = std::clamp((zv[i] - sb * ev[i]) / sa, -1.0, 1.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double e = (zv[i] - sa * x0[i]) / sb;
      next[i] = std::sqrt(ab_prev) * x0[i] + std::sqrt(1.0 - ab_prev) * e;
    }
    z = Tensor(z.shape(), t_prev == 0 ? std::move(x0) : std::move(next));
  }
  std::vector<double> img(z.values().begin(), z.values().end());
  for (double& v : img) v = std::clamp(v, -1.0, 1.0);
  result.image = Tensor(z.shape(), std::move(img));
  return result;
}

SampleResult sample(const Model& model, const NoiseSchedule& schedule, const std::string& prompt,
                    const SamplerConfig& config, GuidanceHooks* hooks) {
  Tensor context;
  {
    GradTape::Pause no_grad;
    context = model.encode_text(model.tokenize(prompt));
  }
  return sample(model, schedule, context, config, hooks);
}

}  // namespace tinylayout
