#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xduct/errors.hpp"
#include "xduct/tensor.hpp"

namespace xduct {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  bool empty() const { return m.empty(); }

  static AdamState for_parameters(std::span<const Tensor> params) {
    AdamState s;
    for (const Tensor& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

// One bias-corrected Adam update from the gradients accumulated on `params`.
// Parameters without a gradient buffer are treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& s, double lr) {
  if (s.empty()) s = AdamState::for_parameters(std::span<const Tensor>(params.data(), params.size()));
  if (s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ShapeError("adam: state holds " + std::to_string(s.m.size()) + " buffers for " +
                     std::to_string(params.size()) + " parameters");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    auto& m = s.m[k];
    auto& v = s.v[k];
    if (m.size() != p.numel() || v.size() != p.numel()) {
      throw ShapeError("adam: moment buffer " + std::to_string(k) + " does not match parameter shape " +
                       shape_str(p.shape()));
    }
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
    }
  }
}

// Learning-rate control: halve whenever the development log-likelihood fails
// to strictly improve on the best seen so far; finished once the rate falls
// below the floor.
struct PlateauSchedule {
  double lr = 1e-3;
  double floor = 1e-5;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t halvings = 0;

  // Returns true when the dev score improved.
  bool observe(double dev_log_likelihood) {
    if (dev_log_likelihood > best) {
      best = dev_log_likelihood;
      return true;
    }
    lr *= 0.5;
    ++halvings;
    return false;
  }
  bool finished() const { return lr < floor; }
};

}  // namespace xduct
