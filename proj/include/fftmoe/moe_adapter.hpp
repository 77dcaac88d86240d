// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/rng.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

enum class Activation { linear, gelu };
enum class GatingMode {
  topk_softmax,  // softmax over the K largest router logits
  uniform_one,   // every expert active with weight exactly 1
};

inline const char* to_string(Activation a) { return a == Activation::linear ? "linear" : "gelu"; }
inline const char* to_string(GatingMode g) { return g == GatingMode::topk_softmax ? "topk_softmax" : "uniform_one"; }

/// Two-layer expert x -> up * act(down * x), mapping R^d to R^d through an
/// intermediate of width rank().
struct ExpertNetwork {
  Tensor down;  // [rank x d]
  Tensor up;    // [d x rank]
  Activation activation = Activation::gelu;

  std::size_t rank() const { return down.size(0); }
  std::size_t width() const { return down.size(1); }

  // x: [n x d] -> [n x d]
  Tensor forward(const Tensor& x) const {
    Tensor h = linear(x, down);
    if (activation == Activation::gelu) h = gelu(h);
    return linear(h, up);
  }
};

struct Router {
  Tensor weight;  // [M x d]
};

/// Per-expert selection counts and summed dense routing probabilities.
struct RoutingStats {
  std::vector<std::uint64_t> counts;
  std::vector<double> prob_sums;
  std::uint64_t tokens_seen = 0;

  RoutingStats() = default;
  explicit RoutingStats(std::size_t experts) : counts(experts, 0), prob_sums(experts, 0.0) {}

  std::size_t experts() const { return counts.size(); }

  // Batch-mean dense softmax of the router logits.
  std::vector<double> mean_probs() const {
    std::vector<double> out(prob_sums.size(), 0.0);
    if (tokens_seen == 0) return out;
    for (std::size_t m = 0; m < out.size(); ++m) out[m] = prob_sums[m] / static_cast<double>(tokens_seen);
    return out;
  }

  void merge(const RoutingStats& other) {
    if (other.experts() != experts()) throw DimensionError("RoutingStats::merge: expert count mismatch");
    for (std::size_t m = 0; m < counts.size(); ++m) {
      counts[m] += other.counts[m];
      prob_sums[m] += other.prob_sums[m];
    }
    tokens_seen += other.tokens_seen;
  }
};

struct Route {
  std::vector<double> weights;        // length M, zero outside `selected`
  std::vector<std::size_t> selected;  // ordered by descending logit
};

// Indices of the k largest values; equal values resolve to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> logits, std::size_t k) {
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
  idx.resize(k);
  return idx;
}

struct AdapterSpec {
  std::size_t width = 0;
  std::vector<std::size_t> ranks;  // one entry per expert
  std::size_t top_k = 1;
  Activation activation = Activation::gelu;
  GatingMode gating = GatingMode::topk_softmax;
  double init_std = 0.02;

  std::size_t experts() const { return ranks.size(); }

  void validate() const {
    if (width == 0) throw ConfigError("adapter width must be positive");
    if (ranks.empty()) throw ConfigError("adapter needs at least one expert");
    for (std::size_t r : ranks) {
      if (r == 0) throw ConfigError("expert rank must be positive");
    }
    if (top_k < 1 || top_k > ranks.size()) {
      throw ConfigError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(ranks.size()) + "]");
    }
    if (!(init_std >= 0.0)) throw ConfigError("adapter init_std must be non-negative");
  }
};

/// Sparse mixture-of-experts adapter: M experts plus a linear router.
///
/// Copies are deep; parameters() hands out the live tensors so an optimizer
/// can update them in place.
class MoEAdapter {
 public:
  struct Output {
    Tensor output;
    Tensor routing_probs;  // [M] batch-mean dense softmax; undefined in uniform_one mode
  };

  // Down-projections ~ N(0, init_std), up-projections and router at zero, so a
  // fresh adapter leaves the frozen path untouched.
  MoEAdapter(const AdapterSpec& spec, Rng& rng) : top_k_(spec.top_k), gating_(spec.gating), width_(spec.width) {
    spec.validate();
    std::normal_distribution<double> normal(0.0, spec.init_std);
    for (std::size_t r : spec.ranks) {
      std::vector<double> down(r * width_);
      for (double& v : down) v = spec.init_std > 0.0 ? normal(rng) : 0.0;
      experts_.push_back({Tensor::from({r, width_}, std::move(down), true), Tensor::zeros({width_, r}, true), spec.activation});
    }
    router_.weight = Tensor::zeros({spec.ranks.size(), width_}, true);
  }

  MoEAdapter(const MoEAdapter& other)
      : experts_(other.experts_), router_(other.router_), top_k_(other.top_k_), gating_(other.gating_), width_(other.width_) {
    for (ExpertNetwork& e : experts_) {
      e.down = e.down.clone();
      e.up = e.up.clone();
    }
    router_.weight = router_.weight.clone();
  }
  MoEAdapter& operator=(const MoEAdapter& other) {
    if (this != &other) {
      MoEAdapter tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  MoEAdapter(MoEAdapter&&) noexcept = default;
  MoEAdapter& operator=(MoEAdapter&&) noexcept = default;

  /// Splits LoRA factors A [r x d] and B [d x r] into linear experts: expert m
  /// takes the m-th row block of A and the m-th column block of B, and all
  /// experts fire with weight 1, so the summed delta is exactly B*A.
  static MoEAdapter from_lora(const Tensor& a, const Tensor& b, std::span<const std::size_t> ranks) {
    detail::require_2d(a, "from_lora");
    detail::require_2d(b, "from_lora");
    const std::size_t r = a.size(0), d = a.size(1);
    if (b.size(0) != d || b.size(1) != r) {
      throw DimensionError("from_lora: B " + shape_str(b.shape()) + " does not pair with A " + shape_str(a.shape()));
    }
    if (ranks.empty()) throw ConfigError("from_lora: empty rank list");
    const std::size_t total = std::accumulate(ranks.begin(), ranks.end(), std::size_t{0});
    if (total != r) throw ConfigError("from_lora: ranks sum to " + std::to_string(total) + ", LoRA rank is " + std::to_string(r));
    if (r > d) throw ConfigError("from_lora: rank " + std::to_string(r) + " exceeds width " + std::to_string(d));

    MoEAdapter out;
    out.width_ = d;
    out.gating_ = GatingMode::uniform_one;
    out.top_k_ = ranks.size();
    std::size_t offset = 0;
    for (std::size_t rm : ranks) {
      if (rm == 0) throw ConfigError("from_lora: zero rank in split");
      std::vector<double> down(rm * d), up(d * rm);
      for (std::size_t i = 0; i < rm; ++i) {
        for (std::size_t j = 0; j < d; ++j) down[i * d + j] = a.at(offset + i, j);
      }
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < rm; ++j) up[i * rm + j] = b.at(i, offset + j);
      }
      out.experts_.push_back({Tensor::from({rm, d}, std::move(down), true), Tensor::from({d, rm}, std::move(up), true),
                              Activation::linear});
      offset += rm;
    }
    out.router_.weight = Tensor::zeros({ranks.size(), d}, true);
    return out;
  }

  std::size_t num_experts() const { return experts_.size(); }
  std::size_t width() const { return width_; }
  std::size_t top_k() const { return top_k_; }
  GatingMode gating() const { return gating_; }
  const std::vector<ExpertNetwork>& experts() const { return experts_; }
  const Router& router() const { return router_; }

  std::vector<std::size_t> ranks() const {
    std::vector<std::size_t> out;
    for (const ExpertNetwork& e : experts_) out.push_back(e.rank());
    return out;
  }

  void set_top_k(std::size_t k) {
    if (k < 1 || k > experts_.size()) {
      throw ConfigError("top_k " + std::to_string(k) + " outside [1, " + std::to_string(experts_.size()) + "]");
    }
    top_k_ = k;
  }

  /// Routing weights for one token. In top-k mode the K largest logits are
  /// kept and softmaxed; every other weight is exactly 0.
  Route route(std::span<const double> x) const {
    if (x.size() != width_) {
      throw DimensionError("route: token width " + std::to_string(x.size()) + ", adapter width " + std::to_string(width_));
    }
    for (double v : x) {
      if (!std::isfinite(v)) throw InputError("route: non-finite token");
    }
    const std::size_t m_count = experts_.size();
    Route out;
    out.weights.assign(m_count, 0.0);
    if (gating_ == GatingMode::uniform_one) {
      std::fill(out.weights.begin(), out.weights.end(), 1.0);
      out.selected.resize(m_count);
      std::iota(out.selected.begin(), out.selected.end(), std::size_t{0});
      return out;
    }
    std::vector<double> logits(m_count, 0.0);
    const auto w = router_.weight.values();
    for (std::size_t m = 0; m < m_count; ++m) {
      for (std::size_t j = 0; j < width_; ++j) logits[m] += w[m * width_ + j] * x[j];
    }
    out.selected = top_k_indices(logits, top_k_);
    const double mx = logits[out.selected.front()];
    double z = 0.0;
    for (std::size_t m : out.selected) z += (out.weights[m] = std::exp(logits[m] - mx));
    for (std::size_t m : out.selected) out.weights[m] /= z;
    return out;
  }

  /// backbone_out + sum over selected experts of weight_m * E_m(x), for a
  /// batch of tokens x [n x d] (or a single token [d]).
  Output forward(const Tensor& backbone_out, const Tensor& x, RoutingStats* stats = nullptr) const {
    if (x.dim() == 1) {
      Output o = forward(reshape(backbone_out, {1, backbone_out.numel()}), reshape(x, {1, x.numel()}), stats);
      o.output = reshape(o.output, {width_});
      return o;
    }
    detail::require_2d(x, "adapter forward");
    if (x.size(1) != width_ || backbone_out.shape() != x.shape()) {
      throw DimensionError("adapter forward: input " + shape_str(x.shape()) + ", backbone output " +
                           shape_str(backbone_out.shape()) + ", adapter width " + std::to_string(width_));
    }
    const std::size_t n = x.size(0), m_count = experts_.size();
    Output result;
    Tensor out = backbone_out;

    if (gating_ == GatingMode::uniform_one) {
      for (const ExpertNetwork& e : experts_) out = add(out, e.forward(x));
      if (stats) {
        for (std::size_t m = 0; m < m_count; ++m) {
          stats->counts[m] += n;
          stats->prob_sums[m] += static_cast<double>(n) / static_cast<double>(m_count);
        }
        stats->tokens_seen += n;
      }
      result.output = out;
      return result;
    }

    Tensor logits = linear(x, router_.weight);
    std::vector<std::uint8_t> mask(n * m_count, 0);
    std::vector<std::vector<std::size_t>> rows_for(m_count);
    for (std::size_t t = 0; t < n; ++t) {
      auto row = logits.values().subspan(t * m_count, m_count);
      for (std::size_t m : top_k_indices(row, top_k_)) {
        mask[t * m_count + m] = 1;
        rows_for[m].push_back(t);
      }
    }
    Tensor probs = softmax(logits);
    result.routing_probs = mean_rows(probs);
    Tensor gates = masked_softmax(logits, std::move(mask));

    for (std::size_t m = 0; m < m_count; ++m) {
      if (rows_for[m].empty()) continue;
      Tensor y = experts_[m].forward(gather_rows(x, rows_for[m]));
      y = scale_rows(y, take_column(gates, rows_for[m], m));
      out = index_add_rows(out, y, rows_for[m]);
    }

    if (stats) {
      if (stats->experts() != m_count) throw DimensionError("adapter forward: stats sized for a different expert count");
      const auto p = probs.values();
      for (std::size_t m = 0; m < m_count; ++m) stats->counts[m] += rows_for[m].size();
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t m = 0; m < m_count; ++m) stats->prob_sums[m] += p[t * m_count + m];
      }
      stats->tokens_seen += n;
    }
    result.output = out;
    return result;
  }

  // Deterministic order: for each expert its down then up projection; router last.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const ExpertNetwork& e : experts_) {
      out.push_back(e.down);
      out.push_back(e.up);
    }
    out.push_back(router_.weight);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t m = 0; m < experts_.size(); ++m) {
      out.push_back("expert" + std::to_string(m) + ".down");
      out.push_back("expert" + std::to_string(m) + ".up");
    }
    out.push_back("router");
    return out;
  }

  // Copies values in; the adapter keeps its own tensors.
  void load_parameters(std::span<const Tensor> values) {
    std::vector<Tensor> mine = parameters();
    if (values.size() != mine.size()) {
      throw CompatibilityError("load_parameters: expected " + std::to_string(mine.size()) + " tensors, got " +
                               std::to_string(values.size()));
    }
    const auto names = parameter_names();
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (values[i].shape() != mine[i].shape()) {
        throw CompatibilityError("load_parameters: position " + std::to_string(i) + " (" + names[i] + ") expects " +
                                 shape_str(mine[i].shape()) + ", got " + shape_str(values[i].shape()));
      }
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
      auto src = values[i].values();
      std::copy(src.begin(), src.end(), mine[i].values().begin());
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = router_.weight.numel();
    for (const ExpertNetwork& e : experts_) n += e.down.numel() + e.up.numel();
    return n;
  }

  // Expert weights only, excluding the router: sum_m 2 * d * r_m.
  std::size_t expert_parameter_count() const { return parameter_count() - router_.weight.numel(); }

 private:
  MoEAdapter() = default;

  std::vector<ExpertNetwork> experts_;
  Router router_;
  std::size_t top_k_ = 1;
  GatingMode gating_ = GatingMode::topk_softmax;
  std::size_t width_ = 0;
};

inline MoEAdapter from_lora(const Tensor& a, const Tensor& b, std::span<const std::size_t> ranks) {
  return MoEAdapter::from_lora(a, b, ranks);
}

}  // namespace fftmoe
