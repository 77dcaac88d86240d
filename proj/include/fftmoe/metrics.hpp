// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/backbone.hpp"
#include "fftmoe/data.hpp"
#include "fftmoe/error.hpp"
#include "fftmoe/losses.hpp"
#include "fftmoe/moe_adapter.hpp"

namespace fftmoe {

// printf-style formatting for CSV cells; identical inputs give identical bytes.
inline std::string format_real(double v, int precision = 12) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

/// Expert activation counts, one row per layer and one column per expert.
struct LoadMatrix {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::vector<std::uint64_t> counts;  // row-major [layers x experts]

  LoadMatrix() = default;
  LoadMatrix(std::size_t l, std::size_t m) : layers(l), experts(m), counts(l * m, 0) {}

  static LoadMatrix from_stats(std::span<const RoutingStats> stats) {
    LoadMatrix out(stats.size(), stats.empty() ? 0 : stats.front().experts());
    for (std::size_t l = 0; l < stats.size(); ++l) {
      if (stats[l].experts() != out.experts) throw DimensionError("LoadMatrix: layers disagree on expert count");
      std::copy(stats[l].counts.begin(), stats[l].counts.end(), out.counts.begin() + static_cast<std::ptrdiff_t>(l * out.experts));
    }
    return out;
  }

  std::uint64_t& at(std::size_t l, std::size_t m) { return counts.at(l * experts + m); }
  std::uint64_t at(std::size_t l, std::size_t m) const { return counts.at(l * experts + m); }

  std::uint64_t row_total(std::size_t l) const {
    std::uint64_t t = 0;
    for (std::size_t m = 0; m < experts; ++m) t += at(l, m);
    return t;
  }

  // Normalized view of one layer; all zeros when the layer saw no tokens.
  std::vector<double> frequencies(std::size_t l) const {
    std::vector<double> out(experts, 0.0);
    const std::uint64_t total = row_total(l);
    if (total == 0) return out;
    for (std::size_t m = 0; m < experts; ++m) out[m] = static_cast<double>(at(l, m)) / static_cast<double>(total);
    return out;
  }

  void merge(const LoadMatrix& other) {
    if (other.layers != layers || other.experts != experts) throw DimensionError("LoadMatrix::merge: shape mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

struct UtilizationReport {
  std::vector<std::optional<double>> per_layer;  // empty optional for layers with no traffic
  double mean = 0.0;
  std::vector<std::string> warnings;
};

/// KL between each layer's normalized load and the uniform distribution,
/// averaged over the layers that recorded traffic.
inline UtilizationReport utilization_kl(const LoadMatrix& load) {
  UtilizationReport out;
  if (load.experts == 0) return out;
  const auto target = uniform_target(load.experts);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < load.layers; ++l) {
    if (load.row_total(l) == 0) {
      out.per_layer.emplace_back(std::nullopt);
      out.warnings.push_back("layer " + std::to_string(l) + " recorded no tokens; excluded from mean");
      continue;
    }
    const double kl = kl_divergence(load.frequencies(l), target);
    out.per_layer.emplace_back(kl);
    total += kl;
    ++used;
  }
  out.mean = used ? total / static_cast<double>(used) : 0.0;
  return out;
}

// `layer,expert,count,frequency`, sorted by (layer, expert).
inline void export_heatmap_csv(const LoadMatrix& load, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write heatmap CSV '" + path + "'");
  out << "layer,expert,count,frequency\n";
  for (std::size_t l = 0; l < load.layers; ++l) {
    const auto freq = load.frequencies(l);
    for (std::size_t m = 0; m < load.experts; ++m) {
      out << l << ',' << m << ',' << load.at(l, m) << ',' << format_real(freq[m], 17) << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

// `layer,expert,mean_prob`: the batch-mean dense routing distribution per layer.
inline void export_routing_probs_csv(std::span<const std::vector<double>> probs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write routing CSV '" + path + "'");
  out << "layer,expert,mean_prob\n";
  for (std::size_t l = 0; l < probs.size(); ++l) {
    for (std::size_t m = 0; m < probs[l].size(); ++m) out << l << ',' << m << ',' << format_real(probs[l][m], 17) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

// Row argmax with ties to the lowest class index.
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  detail::require_2d(logits, "argmax_rows");
  const std::size_t c = logits.size(1);
  std::vector<std::size_t> out(logits.size(0));
  const auto v = logits.values();
  for (std::size_t r = 0; r < out.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[r * c + j] > v[r * c + best]) best = j;
    }
    out[r] = best;
  }
  return out;
}

inline std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return correct;
}

struct Evaluation {
  double accuracy = 0.0;
  double task_loss = 0.0;
  double aux_loss = 0.0;  // aux penalty of the whole-set routing distribution, layers reduced
  LoadMatrix load;
  std::vector<std::vector<double>> mean_probs;  // per layer
  UtilizationReport utilization;
};

/// Accuracy of `model` on `test`, evaluated in fixed-order batches without
/// recording a graph, while collecting per-layer routing statistics.
inline Evaluation evaluate_accuracy(const Backbone& model, const LabeledDataset& test, const AuxLossConfig& aux,
                                    std::size_t batch_size = 256) {
  if (test.size() == 0) throw ConfigError("evaluate_accuracy: empty test set");
  if (batch_size == 0) batch_size = test.size();
  NoGradGuard no_grad;
  auto stats = model.make_stats();
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += batch_size) {
    idx.resize(std::min(batch_size, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = test.batch_labels(idx);
    Backbone::Output out = model.forward(test.batch(idx), &stats);
    correct += count_correct(out.logits, labels);
    loss_sum += cross_entropy(out.logits, labels).item() * static_cast<double>(idx.size());
  }
  Evaluation ev;
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  ev.task_loss = loss_sum / static_cast<double>(test.size());
  ev.load = LoadMatrix::from_stats(stats);
  ev.utilization = utilization_kl(ev.load);
  std::vector<double> aux_terms;
  for (const RoutingStats& s : stats) {
    ev.mean_probs.push_back(s.mean_probs());
    if (model.adapters().front().gating() == GatingMode::topk_softmax) aux_terms.push_back(aux_loss_layer(ev.mean_probs.back(), aux));
  }
  if (!aux_terms.empty()) {
    const double s = std::accumulate(aux_terms.begin(), aux_terms.end(), 0.0);
    ev.aux_loss = aux.reduction == LayerReduction::mean ? s / static_cast<double>(aux_terms.size()) : s;
  }
  return ev;
}

}  // namespace fftmoe
