// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <future>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/backbone.hpp"
#include "fftmoe/data.hpp"
#include "fftmoe/error.hpp"
#include "fftmoe/losses.hpp"
#include "fftmoe/metrics.hpp"
#include "fftmoe/optim.hpp"
#include "fftmoe/rng.hpp"

namespace fftmoe {

enum class Capability { high, low };

inline const char* to_string(Capability c) { return c == Capability::high ? "high" : "low"; }

struct ClientState {
  std::size_t client_id = 0;
  std::vector<std::size_t> shard;  // indices into the training set
  std::size_t top_k = 1;
  Capability capability = Capability::high;
  Backbone model;  // frozen body shared, adapters owned
  AdamState optimizer;

  std::vector<Tensor> adapter_params() const { return model.trainable_parameters(); }
};

struct ClientReport {
  std::size_t client_id = 0;
  std::size_t top_k = 0;
  std::size_t steps = 0;
  double task_loss = 0.0;  // mean over local steps
  double aux_loss = 0.0;   // mean over local steps, unweighted by lambda
  double accuracy = 0.0;   // on the batches seen during training
  double first_batch_loss = 0.0;
  double last_batch_loss = 0.0;
  LoadMatrix load;
  double util_kl = 0.0;
};

struct RoundReport {
  std::size_t round_index = 0;
  std::vector<ClientReport> clients;
  double test_task_loss = 0.0;
  double test_aux_loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::optional<double>> layer_kl;
  double mean_util_kl = 0.0;
  LoadMatrix load;
  std::vector<std::vector<double>> mean_probs;
};

struct ServerState {
  std::vector<Tensor> global_params;
  std::size_t round_index = 0;
  std::vector<RoundReport> history;
};

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 128;
  AdamConfig adam;
  AuxLossConfig aux;
  bool reset_optimizer = false;  // clear Adam moments at the start of every round
  std::size_t threads = 1;       // client workers per round
};

struct SparsityPolicy {
  enum class Kind { fixed, capability } kind = Kind::fixed;
  std::size_t k = 2;
  std::size_t k_high = 4;
  std::size_t k_low = 1;
};

/// Sets each client's K_n from the policy; every value must lie in [1, experts].
inline void assign_sparsity(std::span<ClientState> clients, const SparsityPolicy& policy, std::size_t experts) {
  auto check = [experts](std::size_t k, const char* what) {
    if (k < 1 || k > experts) {
      throw ConfigError(std::string(what) + " = " + std::to_string(k) + " outside [1, " + std::to_string(experts) + "]");
    }
  };
  if (policy.kind == SparsityPolicy::Kind::fixed) {
    check(policy.k, "sparsity.k");
  } else {
    check(policy.k_high, "sparsity.k_high");
    check(policy.k_low, "sparsity.k_low");
  }
  for (ClientState& c : clients) {
    if (policy.kind == SparsityPolicy::Kind::fixed) {
      c.top_k = policy.k;
    } else {
      c.top_k = c.capability == Capability::high ? policy.k_high : policy.k_low;
    }
    c.model.set_top_k(c.top_k);
  }
}

// Each client independently draws high capability with probability `high_fraction`.
inline std::vector<Capability> draw_capabilities(std::size_t clients, double high_fraction, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0xca9aULL}));
  std::bernoulli_distribution high(high_fraction);
  std::vector<Capability> out;
  for (std::size_t i = 0; i < clients; ++i) out.push_back(high(rng) ? Capability::high : Capability::low);
  return out;
}

/// Copies the global parameters into every client (values, not handles).
inline void broadcast(const ServerState& server, std::span<ClientState> clients) {
  for (ClientState& c : clients) {
    try {
      c.model.load_trainable(server.global_params);
    } catch (const CompatibilityError& e) {
      throw CompatibilityError("broadcast to client " + std::to_string(c.client_id) + ": " + e.what());
    }
  }
}

/// Local fine-tuning: `epochs` passes over the shard in shuffled batches, each
/// step minimizing task + lambda * aux with Adam. Only adapter parameters move.
inline ClientReport local_train(ClientState& client, const LabeledDataset& train, const TrainConfig& cfg, std::uint64_t seed) {
  if (client.shard.empty()) throw ConfigError("client " + std::to_string(client.client_id) + " has an empty shard");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  cfg.aux.validate();
  client.model.set_top_k(client.top_k);
  std::vector<Tensor> params = client.model.trainable_parameters();
  const bool routed = client.model.adapters().front().gating() == GatingMode::topk_softmax;

  ClientReport rep;
  rep.client_id = client.client_id;
  rep.top_k = client.top_k;
  auto stats = client.model.make_stats();
  Rng rng(seed);
  std::vector<std::size_t> order = client.shard;
  std::size_t seen = 0, correct = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto labels = train.batch_labels(idx);
      Backbone::Output out = client.model.forward(train.batch(idx), &stats);
      Tensor task = cross_entropy(out.logits, labels);
      std::vector<Tensor> aux;
      if (routed) {
        for (const Tensor& p : out.routing_probs) aux.push_back(aux_loss_layer(p, cfg.aux));
      }
      Tensor loss = total_loss(task, aux, cfg.aux);
      for (Tensor& p : params) p.zero_grad();
      backward(loss);
      adam_step(params, cfg.adam, client.optimizer);

      const double aux_value = aux.empty() ? 0.0 : reduce_layers(aux, cfg.aux.reduction).item();
      if (rep.steps == 0) rep.first_batch_loss = task.item();
      rep.last_batch_loss = task.item();
      rep.task_loss += task.item();
      rep.aux_loss += aux_value;
      ++rep.steps;
      correct += count_correct(out.logits, labels);
      seen += idx.size();
    }
  }
  rep.task_loss /= static_cast<double>(rep.steps);
  rep.aux_loss /= static_cast<double>(rep.steps);
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  rep.load = LoadMatrix::from_stats(stats);
  rep.util_kl = utilization_kl(rep.load).mean;
  return rep;
}

struct Upload {
  std::span<const Tensor> params;
  std::size_t shard_size = 0;
  std::size_t client_id = 0;
};

/// Shard-size weighted average of the uploaded parameter lists.
///
/// Computed as p_0 + sum_n w_n (p_n - p_0), which equals the plain weighted sum
/// algebraically and returns the common value exactly when all uploads agree.
inline std::vector<Tensor> aggregate(std::span<const Upload> uploads) {
  if (uploads.empty()) throw UsageError("aggregate: no uploads");
  const Upload& ref = uploads.front();
  std::size_t total = 0;
  for (const Upload& u : uploads) {
    if (u.shard_size == 0) throw ConfigError("aggregate: client " + std::to_string(u.client_id) + " has shard size 0");
    if (u.params.size() != ref.params.size()) {
      throw CompatibilityError("aggregate: client " + std::to_string(u.client_id) + " uploaded " +
                               std::to_string(u.params.size()) + " tensors, expected " + std::to_string(ref.params.size()));
    }
    for (std::size_t i = 0; i < u.params.size(); ++i) {
      if (u.params[i].shape() != ref.params[i].shape()) {
        throw CompatibilityError("aggregate: client " + std::to_string(u.client_id) + " tensor " + std::to_string(i) + " has shape " +
                                 shape_str(u.params[i].shape()) + ", expected " + shape_str(ref.params[i].shape()));
      }
    }
    total += u.shard_size;
  }
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < ref.params.size(); ++i) {
    std::vector<double> acc(ref.params[i].values().begin(), ref.params[i].values().end());
    const std::vector<double> base = acc;
    for (std::size_t n = 1; n < uploads.size(); ++n) {
      const double w = static_cast<double>(uploads[n].shard_size) / static_cast<double>(total);
      const auto v = uploads[n].params[i].values();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * (v[j] - base[j]);
    }
    out.push_back(Tensor::from(ref.params[i].shape(), std::move(acc)));
  }
  return out;
}

inline std::vector<double> aggregation_weights(std::span<const std::size_t> shard_sizes) {
  const double total = static_cast<double>(std::accumulate(shard_sizes.begin(), shard_sizes.end(), std::size_t{0}));
  std::vector<double> w;
  for (std::size_t s : shard_sizes) w.push_back(static_cast<double>(s) / total);
  return w;
}

// Deep copy of a parameter list, detached from any live model.
inline std::vector<Tensor> snapshot(std::span<const Tensor> params) {
  std::vector<Tensor> out;
  for (const Tensor& p : params) out.push_back(p.detach());
  return out;
}

/// Builds one client per shard from a template model; adapters are deep copies.
inline std::vector<ClientState> make_clients(const Backbone& model_template, const std::vector<std::vector<std::size_t>>& shards,
                                             std::span<const Capability> capabilities) {
  std::vector<ClientState> clients;
  for (std::size_t n = 0; n < shards.size(); ++n) {
    clients.push_back(ClientState{n, shards[n], model_template.adapters().front().top_k(),
                                  n < capabilities.size() ? capabilities[n] : Capability::high, model_template, {}});
  }
  return clients;
}

/// One synchronous round: broadcast, local training on every client, weighted
/// aggregation into the server, then evaluation of the global model.
inline RoundReport run_round(ServerState& server, std::span<ClientState> clients, Backbone& global_model,
                             const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& cfg,
                             std::uint64_t run_seed) {
  if (clients.empty()) throw ConfigError("run_round: no clients");
  const std::size_t round = server.round_index + 1;
  broadcast(server, clients);
  if (cfg.reset_optimizer) {
    for (ClientState& c : clients) c.optimizer.reset();
  }

  RoundReport rep;
  rep.round_index = round;
  rep.clients.resize(clients.size());
  auto train_one = [&](std::size_t n) {
    rep.clients[n] = local_train(clients[n], train, cfg, derive_seed({run_seed, round, clients[n].client_id}));
  };
  const std::size_t workers = std::max<std::size_t>(1, cfg.threads);
  for (std::size_t start = 0; start < clients.size(); start += workers) {
    const std::size_t end = std::min(clients.size(), start + workers);
    if (workers == 1) {
      train_one(start);
      continue;
    }
    std::vector<std::future<void>> jobs;
    for (std::size_t n = start; n < end; ++n) jobs.push_back(std::async(std::launch::async, train_one, n));
    for (auto& j : jobs) j.get();
  }

  std::vector<std::vector<Tensor>> params;
  for (const ClientState& c : clients) params.push_back(c.adapter_params());
  std::vector<Upload> uploads;
  for (std::size_t n = 0; n < clients.size(); ++n) uploads.push_back({params[n], clients[n].shard.size(), clients[n].client_id});
  server.global_params = aggregate(uploads);
  server.round_index = round;

  global_model.load_trainable(server.global_params);
  Evaluation ev = evaluate_accuracy(global_model, test, cfg.aux);
  rep.accuracy = ev.accuracy;
  rep.test_task_loss = ev.task_loss;
  rep.test_aux_loss = ev.aux_loss;
  rep.layer_kl = ev.utilization.per_layer;
  rep.mean_util_kl = ev.utilization.mean;
  rep.load = std::move(ev.load);
  rep.mean_probs = std::move(ev.mean_probs);
  server.history.push_back(rep);
  return rep;
}

}  // namespace fftmoe
