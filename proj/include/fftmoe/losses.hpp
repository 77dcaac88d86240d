// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

enum class LayerReduction { mean, sum };

inline const char* to_string(LayerReduction r) { return r == LayerReduction::mean ? "mean" : "sum"; }

struct AuxLossConfig {
  double lambda = 1e-4;
  double theta_th = 0.3;
  LayerReduction reduction = LayerReduction::mean;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("aux.lambda must be a finite value >= 0");
    if (!(theta_th > 0.0 && theta_th <= 1.0)) throw ConfigError("aux.theta_th must lie in (0, 1]");
  }
};

// Uniform global target over M experts.
inline std::vector<double> uniform_target(std::size_t experts) {
  return std::vector<double>(experts, 1.0 / static_cast<double>(experts));
}

namespace detail {

inline void check_distribution(std::span<const double> p, const char* what) {
  double total = 0.0;
  for (double v : p) {
    if (!std::isfinite(v)) throw InputError(std::string(what) + " has a non-finite entry");
    if (v < 0.0) throw InputError(std::string(what) + " has a negative entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InputError(std::string(what) + " sums to " + std::to_string(total) + ", not 1");
}

inline void check_kl_inputs(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw DimensionError("kl_divergence: distributions differ in length");
  check_distribution(p, "kl_divergence: P");
  check_distribution(q, "kl_divergence: target");
  for (double v : q) {
    if (v <= 0.0) throw InputError("kl_divergence: target must be strictly positive");
  }
}

}  // namespace detail

// sum_m p_m log(p_m / q_m), with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  detail::check_kl_inputs(p, q);
  double kl = 0.0;
  for (std::size_t m = 0; m < p.size(); ++m) {
    if (p[m] > 0.0) kl += p[m] * std::log(p[m] / q[m]);
  }
  return std::max(kl, 0.0);
}

// Differentiable in p.
inline Tensor kl_divergence(const Tensor& p, std::span<const double> q) {
  detail::check_kl_inputs(p.values(), q);
  double kl = 0.0;
  for (std::size_t m = 0; m < q.size(); ++m) {
    if (p.at(m) > 0.0) kl += p.at(m) * std::log(p.at(m) / q[m]);
  }
  std::vector<double> target(q.begin(), q.end());
  return make_op({}, {kl}, {p}, [target = std::move(target)](detail::Node& self) {
    double* g = self.parent_grad(0);
    if (!g) return;
    const auto& pv = self.parents[0]->value;
    for (std::size_t m = 0; m < target.size(); ++m) {
      if (pv[m] > 0.0) g[m] += self.grad[0] * (std::log(pv[m] / target[m]) + 1.0);
    }
  });
}

// Activation level theta: the largest entry of the routing distribution.
inline double activation_level(std::span<const double> p) { return *std::max_element(p.begin(), p.end()); }

/// Thresholded load-balancing penalty for one layer: KL(P_l || uniform) when
/// the largest routing probability reaches theta_th, and exactly 0 otherwise.
inline double aux_loss_layer(std::span<const double> p_layer, const AuxLossConfig& cfg) {
  detail::check_distribution(p_layer, "aux_loss_layer: P_l");
  if (activation_level(p_layer) < cfg.theta_th) return 0.0;
  const auto target = uniform_target(p_layer.size());
  return kl_divergence(p_layer, target);
}

// Graph form; below threshold the result is a constant 0 with no path to the router.
inline Tensor aux_loss_layer(const Tensor& p_layer, const AuxLossConfig& cfg) {
  detail::check_distribution(p_layer.values(), "aux_loss_layer: P_l");
  if (activation_level(p_layer.values()) < cfg.theta_th) return Tensor::scalar(0.0);
  const auto target = uniform_target(p_layer.numel());
  return kl_divergence(p_layer, target);
}

inline Tensor reduce_layers(std::span<const Tensor> per_layer, LayerReduction reduction) {
  if (per_layer.empty()) return Tensor::scalar(0.0);
  Tensor acc = per_layer.front();
  for (std::size_t i = 1; i < per_layer.size(); ++i) acc = add(acc, per_layer[i]);
  return reduction == LayerReduction::mean ? scale(acc, 1.0 / static_cast<double>(per_layer.size())) : acc;
}

/// task + lambda * reduce(per-layer aux terms).
inline Tensor total_loss(const Tensor& task, std::span<const Tensor> per_layer_aux, const AuxLossConfig& cfg) {
  if (cfg.lambda < 0.0) throw ConfigError("total_loss: negative lambda");
  for (const Tensor& a : per_layer_aux) {
    if (a.item() < 0.0) throw InputError("total_loss: negative auxiliary term");
  }
  if (cfg.lambda == 0.0 || per_layer_aux.empty()) return task;
  return add(task, scale(reduce_layers(per_layer_aux, cfg.reduction), cfg.lambda));
}

inline Tensor total_loss(const Tensor& task, std::span<const double> per_layer_aux, const AuxLossConfig& cfg) {
  std::vector<Tensor> aux;
  for (double v : per_layer_aux) aux.push_back(Tensor::scalar(v));
  return total_loss(task, aux, cfg);
}

}  // namespace fftmoe
