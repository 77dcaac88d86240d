// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/rng.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

/// Examples of shape [seq x input_dim] with integer class labels.
struct LabeledDataset {
  Tensor features;  // [n x seq x input_dim]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t seq_len() const { return features.size(1); }
  std::size_t input_dim() const { return features.size(2); }

  Tensor batch(std::span<const std::size_t> idx) const {
    const std::size_t per = seq_len() * input_dim();
    std::vector<double> out(idx.size() * per);
    const auto src = features.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw DimensionError("dataset index " + std::to_string(idx[i]) + " out of range");
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per, out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return Tensor::from({idx.size(), seq_len(), input_dim()}, std::move(out));
  }

  std::vector<std::size_t> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels.at(i));
    return out;
  }

  LabeledDataset subset(std::span<const std::size_t> idx) const {
    return {batch(idx), batch_labels(idx), classes};
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out(classes, 0);
    for (std::size_t y : labels) ++out[y];
    return out;
  }
};

/// Gaussian clusters: each class gets a random unit-norm mean direction in
/// R^input_dim shared by all of its tokens; each token adds N(0, 1) noise
/// scaled by 1/separation. Labels cycle through the classes, so class counts
/// differ by at most one, and the example order is then shuffled.
inline LabeledDataset synth_dataset(std::size_t n, std::size_t classes, std::size_t seq, std::size_t input_dim,
                                    double separation, std::uint64_t seed) {
  if (n == 0 || classes == 0 || seq == 0 || input_dim == 0) throw ConfigError("synth_dataset: sizes must be positive");
  if (!(separation > 0.0)) throw ConfigError("synth_dataset: separation must be positive");
  if (n < classes) throw ConfigError("synth_dataset: need at least one example per class");
  Rng rng(derive_seed({seed, 0xda7aULL}));
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> means(classes * input_dim);
  for (std::size_t c = 0; c < classes; ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < input_dim; ++j) {
      means[c * input_dim + j] = normal(rng);
      norm += means[c * input_dim + j] * means[c * input_dim + j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < input_dim; ++j) means[c * input_dim + j] /= norm;
  }

  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  const double noise = 1.0 / separation;
  std::vector<double> feats(n * seq * input_dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t j = 0; j < input_dim; ++j) {
        feats[(i * seq + t) * input_dim + j] = means[labels[i] * input_dim + j] + noise * normal(rng);
      }
    }
  }
  return {Tensor::from({n, seq, input_dim}, std::move(feats)), std::move(labels), classes};
}

/// Reads a feature matrix: one header row, then rows of seq*input_dim reals
/// followed by an integer class label in the last column. `classes` of 0
/// infers the class count from the largest label.
inline LabeledDataset load_csv(const std::string& path, std::size_t seq, std::size_t input_dim, std::size_t classes = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset CSV '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset CSV '" + path + "' is empty");
  const std::size_t per = seq * input_dim;
  std::vector<double> feats;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != per + 1) {
      throw InputError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(per + 1) + " columns, got " +
                       std::to_string(cells.size()));
    }
    try {
      for (std::size_t j = 0; j < per; ++j) {
        std::size_t used = 0;
        const double v = std::stod(cells[j], &used);
        if (!std::isfinite(v)) throw InputError("non-finite");
        feats.push_back(v);
      }
      const long long y = std::stoll(cells[per]);
      if (y < 0) throw InputError("negative label");
      labels.push_back(static_cast<std::size_t>(y));
    } catch (const std::exception& e) {
      throw InputError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (labels.empty()) throw InputError("dataset CSV '" + path + "' has no data rows");
  const std::size_t max_label = *std::max_element(labels.begin(), labels.end());
  if (classes == 0) classes = max_label + 1;
  if (max_label >= classes) throw InputError("dataset CSV '" + path + "': label " + std::to_string(max_label) + " >= class count");
  const std::size_t n = labels.size();
  return {Tensor::from({n, seq, input_dim}, std::move(feats)), std::move(labels), classes};
}

// Seeded split into (train, test); test gets round(fraction * n) examples.
inline std::pair<LabeledDataset, LabeledDataset> train_test_split(const LabeledDataset& ds, double test_fraction,
                                                                   std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0, 1)");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x5917ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ds.size())));
  if (n_test == 0 || n_test >= ds.size()) throw ConfigError("test fraction leaves an empty train or test set");
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  return {ds.subset(train), ds.subset(test)};
}

enum class PartitionScheme { dirichlet, one_label, iid };

inline const char* to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::dirichlet: return "dirichlet";
    case PartitionScheme::one_label: return "one_label";
    case PartitionScheme::iid: return "iid";
  }
  return "?";
}

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::dirichlet;
  std::size_t clients = 4;
  double alpha = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (clients == 0) throw ConfigError("partition needs at least one client");
    if (scheme == PartitionScheme::dirichlet && !(alpha > 0.0)) throw ConfigError("dirichlet alpha must be positive");
  }
};

namespace detail {

inline void split_evenly(const std::vector<std::size_t>& items, std::span<const std::size_t> owners,
                         std::vector<std::vector<std::size_t>>& parts) {
  const std::size_t k = owners.size();
  for (std::size_t i = 0; i < items.size(); ++i) parts[owners[i * k / items.size()]].push_back(items[i]);
}

}  // namespace detail

/// Disjoint cover of the dataset indices by `clients` shards.
///
/// dirichlet: per class, client proportions ~ Dir(alpha * 1_N).
/// one_label: client n holds only class (n mod C); clients sharing a class
///   split it evenly. With fewer clients than classes, class c goes to client
///   (c mod N).
/// iid: shuffled near-equal split.
/// Any client left empty then takes one random example from the largest shard.
inline std::vector<std::vector<std::size_t>> partition(std::span<const std::size_t> labels, std::size_t classes,
                                                       const PartitionSpec& spec) {
  spec.validate();
  const std::size_t n_clients = spec.clients;
  Rng rng(derive_seed({spec.seed, 0x9a27ULL}));
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw InputError("partition: label out of range");
    by_class[labels[i]].push_back(i);
  }
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);

  std::vector<std::vector<std::size_t>> parts(n_clients);
  switch (spec.scheme) {
    case PartitionScheme::iid: {
      std::vector<std::size_t> all(labels.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::shuffle(all.begin(), all.end(), rng);
      std::vector<std::size_t> owners(n_clients);
      std::iota(owners.begin(), owners.end(), std::size_t{0});
      if (!all.empty()) detail::split_evenly(all, owners, parts);
      break;
    }
    case PartitionScheme::one_label: {
      for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> owners;
        if (n_clients >= classes) {
          for (std::size_t k = c; k < n_clients; k += classes) owners.push_back(k);
        } else {
          owners.push_back(c % n_clients);
        }
        if (!by_class[c].empty()) detail::split_evenly(by_class[c], owners, parts);
      }
      break;
    }
    case PartitionScheme::dirichlet: {
      std::gamma_distribution<double> gamma(spec.alpha, 1.0);
      std::uniform_int_distribution<std::size_t> pick(0, n_clients - 1);
      for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> p(n_clients);
        double total = 0.0;
        for (double& v : p) total += (v = gamma(rng));
        if (!(total > 0.0)) {
          // every draw underflowed; put all mass on one client
          std::fill(p.begin(), p.end(), 0.0);
          p[pick(rng)] = 1.0;
          total = 1.0;
        }
        const std::size_t nc = by_class[c].size();
        double cum = 0.0;
        std::size_t begin = 0;
        for (std::size_t k = 0; k < n_clients; ++k) {
          cum += p[k] / total;
          const std::size_t end =
              k + 1 == n_clients ? nc : std::min(nc, static_cast<std::size_t>(std::llround(cum * static_cast<double>(nc))));
          for (std::size_t i = begin; i < std::max(begin, end); ++i) parts[k].push_back(by_class[c][i]);
          begin = std::max(begin, end);
        }
      }
      break;
    }
  }

  for (std::size_t k = 0; k < n_clients; ++k) {
    if (!parts[k].empty()) continue;
    auto largest = std::max_element(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (largest->size() <= 1) continue;  // not enough data to give every client an example
    std::uniform_int_distribution<std::size_t> pick(0, largest->size() - 1);
    const std::size_t at = pick(rng);
    parts[k].push_back((*largest)[at]);
    largest->erase(largest->begin() + static_cast<std::ptrdiff_t>(at));
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

inline std::vector<std::vector<std::size_t>> partition(const LabeledDataset& ds, const PartitionSpec& spec) {
  return partition(ds.labels, ds.classes, spec);
}

// Shannon entropy (nats) of the label histogram of one shard.
inline double label_entropy(std::span<const std::size_t> shard, std::span<const std::size_t> labels, std::size_t classes) {
  if (shard.empty()) return 0.0;
  std::vector<double> counts(classes, 0.0);
  for (std::size_t i : shard) counts[labels[i]] += 1.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / static_cast<double>(shard.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

// `index,client_id` rows sorted by index.
inline void export_partition_csv(const std::vector<std::vector<std::size_t>>& parts, const std::string& path) {
  std::vector<std::pair<std::size_t, std::size_t>> rows;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i : parts[k]) rows.emplace_back(i, k);
  }
  std::sort(rows.begin(), rows.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write partition CSV '" + path + "'");
  out << "index,client_id\n";
  for (const auto& [i, k] : rows) out << i << ',' << k << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace fftmoe
