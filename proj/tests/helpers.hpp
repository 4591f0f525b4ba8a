#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "tinylayout/model.hpp"
#include "tinylayout/tensor.hpp"

namespace tinylayout::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Small denoiser for tests that run many forward/backward passes.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.embed_dim = 16;
  c.widths = {8, 8, 16};
  c.norm_groups = 4;
  c.time_dim = 16;
  c.down_repeats = 1;
  c.up_repeats = 2;
  return c;
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out(count);
  for (auto& c : out) c = rng() % n;
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace tinylayout::testing
