// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

enum class WeightDecayMode {
  decoupled,  // theta -= lr * wd * theta, outside the moments (AdamW)
  l2,         // wd * theta added to the gradient before the moments
};

inline const char* to_string(WeightDecayMode mode) {
  return mode == WeightDecayMode::decoupled ? "decoupled" : "l2";
}

struct AdamConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  WeightDecayMode decay_mode = WeightDecayMode::decoupled;
};

// First and second moments per parameter, plus the shared step counter.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  void reset() {
    m.clear();
    v.clear();
    step = 0;
  }
};

inline void adam_step(std::span<Tensor> params, const AdamConfig& cfg, AdamState& state) {
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: optimizer state tracks a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw UsageError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != params[i].numel()) throw UsageError("adam_step: state size mismatch at parameter " + std::to_string(i));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].values();
    auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double grad = g[j];
      if (cfg.decay_mode == WeightDecayMode::l2) {
        grad += cfg.weight_decay * w[j];
      } else {
        w[j] -= cfg.lr * cfg.weight_decay * w[j];
      }
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

}  // namespace fftmoe
