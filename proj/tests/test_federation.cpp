// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "fftmoe/federation.hpp"
#include "support.hpp"

using namespace fftmoe;
using fftmoe::testing::random_tensor;

namespace {

struct World {
  LabeledDataset train;
  LabeledDataset test;
  Backbone model;
  std::vector<std::vector<std::size_t>> shards;
};

World make_world(std::size_t clients, PartitionScheme scheme = PartitionScheme::iid, std::size_t experts = 4, std::size_t k = 2) {
  BackboneConfig bc;
  bc.layers = 2;
  bc.width = 8;
  bc.heads = 2;
  bc.seq_len = 4;
  bc.classes = 4;
  bc.input_dim = 6;
  bc.ffn_mult = 2;
  bc.frozen_seed = 5;
  AdapterSpec as;
  as.width = 8;
  as.ranks.assign(experts, 2);
  as.top_k = k;
  auto ds = synth_dataset(240, 4, 4, 6, 3.0, 9);
  auto [train, test] = train_test_split(ds, 0.25, 9);
  auto shards = partition(train, PartitionSpec{scheme, clients, 1.0, 9});
  return {std::move(train), std::move(test), build_backbone(bc, as, 3), std::move(shards)};
}

TrainConfig fast_config(double lr = 1e-2) {
  TrainConfig t;
  t.batch_size = 16;
  t.adam.lr = lr;
  return t;
}

std::vector<double> flat(std::span<const Tensor> params) {
  std::vector<double> out;
  for (const Tensor& p : params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

std::vector<Tensor> scalar_list(double v) { return {Tensor::scalar(v)}; }

}  // namespace

TEST(Broadcast, ClientsReceiveIndependentCopies) {
  World s = make_world(3);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  std::mt19937_64 rng(1);
  for (const Tensor& p : s.model.trainable_parameters()) server.global_params.push_back(random_tensor(p.shape(), rng));
  broadcast(server, clients);
  for (const ClientState& c : clients) EXPECT_EQ(flat(c.adapter_params()), flat(server.global_params));
  const auto server_before = flat(server.global_params);
  const auto sibling_before = flat(clients[1].adapter_params());
  clients[0].adapter_params()[0].values()[0] += 1.0;
  EXPECT_EQ(flat(server.global_params), server_before);
  EXPECT_EQ(flat(clients[1].adapter_params()), sibling_before);
}

TEST(Broadcast, NoClientsIsNoOp) {
  ServerState server;
  std::vector<ClientState> none;
  EXPECT_NO_THROW(broadcast(server, none));
}

TEST(Broadcast, ShapeMismatchIsCompatibilityError) {
  World s = make_world(2);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  server.global_params = scalar_list(1.0);
  EXPECT_THROW(broadcast(server, clients), CompatibilityError);
}

TEST(LocalTrain, ZeroLearningRateLeavesParameters) {
  World s = make_world(2);
  auto clients = make_clients(s.model, s.shards, {});
  const auto before = flat(clients[0].adapter_params());
  local_train(clients[0], s.train, fast_config(0.0), 1);
  EXPECT_EQ(flat(clients[0].adapter_params()), before);
}

TEST(LocalTrain, SeparableShardLossDecreases) {
  World s = make_world(1);
  const LabeledDataset shard = synth_dataset(960, 4, 4, 6, 10.0, 4);
  std::vector<std::size_t> all(shard.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  ClientState client{0, all, 2, Capability::high, s.model, {}};
  TrainConfig cfg = fast_config(1e-2);
  cfg.batch_size = 32;
  const ClientReport r = local_train(client, shard, cfg, 2);
  EXPECT_GT(r.steps, 5u);
  EXPECT_LT(r.last_batch_loss, r.first_batch_loss);
}

TEST(LocalTrain, FrozenWeightsUntouched) {
  World s = make_world(2);
  auto clients = make_clients(s.model, s.shards, {});
  const auto before = clients[0].model.frozen_checksum();
  local_train(clients[0], s.train, fast_config(), 3);
  EXPECT_EQ(clients[0].model.frozen_checksum(), before);
}

TEST(LocalTrain, EmptyShardIsConfigError) {
  World s = make_world(2);
  auto clients = make_clients(s.model, s.shards, {});
  clients[0].shard.clear();
  EXPECT_THROW(local_train(clients[0], s.train, fast_config(), 1), ConfigError);
}

TEST(LocalTrain, ShuffleIsDeterministicInSeed) {
  World s = make_world(2);
  auto a = make_clients(s.model, s.shards, {});
  auto b = make_clients(s.model, s.shards, {});
  const ClientReport ra = local_train(a[0], s.train, fast_config(), 42);
  const ClientReport rb = local_train(b[0], s.train, fast_config(), 42);
  EXPECT_EQ(ra.task_loss, rb.task_loss);
  EXPECT_EQ(flat(a[0].adapter_params()), flat(b[0].adapter_params()));
}

TEST(Aggregate, SingleClientIsExact) {
  std::mt19937_64 rng(2);
  const std::vector<Tensor> p{random_tensor({3, 2}, rng), random_tensor({4}, rng)};
  const std::vector<Upload> ups{{p, 17, 0}};
  EXPECT_EQ(flat(aggregate(ups)), flat(p));
}

TEST(Aggregate, OppositeEqualSizedUploadsCancel) {
  std::mt19937_64 rng(3);
  const Tensor v = random_tensor({5}, rng);
  const std::vector<Tensor> a{v}, b{scale(v, -1.0)};
  const std::vector<Upload> ups{{a, 4, 0}, {b, 4, 1}};
  for (double x : flat(aggregate(ups))) EXPECT_NEAR(x, 0.0, 1e-15);
}

TEST(Aggregate, WeightedByShardSize) {
  const auto a = scalar_list(0.0), b = scalar_list(4.0);
  const std::vector<Upload> ups{{a, 1, 0}, {b, 3, 1}};
  EXPECT_NEAR(aggregate(ups)[0].item(), 3.0, 1e-12);
}

TEST(Aggregate, ConsensusIsReturnedExactly) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> size(1, 500);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<Tensor> p{random_tensor({7}, rng, -1e3, 1e3), random_tensor({2, 3}, rng)};
    std::vector<Upload> ups;
    for (std::size_t n = 0; n < 5; ++n) ups.push_back({p, size(rng), n});
    EXPECT_EQ(flat(aggregate(ups)), flat(p));
  }
}

TEST(Aggregate, LinearInUploads) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> alpha(-3.0, 3.0);
  std::uniform_int_distribution<std::size_t> size(1, 100);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<Tensor>> params, scaled;
    std::vector<std::size_t> sizes;
    const double a = alpha(rng);
    for (std::size_t n = 0; n < 4; ++n) {
      params.push_back({random_tensor({6}, rng)});
      scaled.push_back({scale(params.back()[0], a)});
      sizes.push_back(size(rng));
    }
    std::vector<Upload> u1, u2;
    for (std::size_t n = 0; n < 4; ++n) {
      u1.push_back({params[n], sizes[n], n});
      u2.push_back({scaled[n], sizes[n], n});
    }
    const auto base = flat(aggregate(u1));
    const auto out = flat(aggregate(u2));
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(out[i], a * base[i], 1e-12);
  }
}

TEST(Aggregate, WeightsSumToOne) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> size(1, 100000);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> sizes(1 + trial % 17);
    for (auto& s : sizes) s = size(rng);
    const auto w = aggregation_weights(sizes);
    double total = 0.0;
    for (double x : w) total += x;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Aggregate, MismatchNamesClient) {
  const std::vector<Tensor> a{Tensor::zeros({2, 3})}, b{Tensor::zeros({3, 2})};
  const std::vector<Upload> ups{{a, 1, 0}, {b, 1, 7}};
  try {
    aggregate(ups);
    FAIL() << "expected CompatibilityError";
  } catch (const CompatibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("client 7"), std::string::npos) << e.what();
  }
}

TEST(AssignSparsity, FixedAndCapabilityPolicies) {
  World s = make_world(4, PartitionScheme::iid, 4, 1);
  const std::vector<Capability> caps{Capability::high, Capability::low, Capability::low, Capability::high};
  auto clients = make_clients(s.model, s.shards, caps);
  assign_sparsity(clients, {SparsityPolicy::Kind::fixed, 2, 4, 1}, 4);
  for (const ClientState& c : clients) EXPECT_EQ(c.top_k, 2u);
  assign_sparsity(clients, {SparsityPolicy::Kind::capability, 2, 4, 1}, 4);
  EXPECT_EQ(clients[0].top_k, 4u);
  EXPECT_EQ(clients[1].top_k, 1u);
  EXPECT_EQ(clients[2].model.adapters()[0].top_k(), 1u);
  EXPECT_EQ(clients[3].model.adapters()[1].top_k(), 4u);
  EXPECT_THROW(assign_sparsity(clients, {SparsityPolicy::Kind::fixed, 5, 4, 1}, 4), ConfigError);
  EXPECT_THROW(assign_sparsity(clients, {SparsityPolicy::Kind::capability, 2, 4, 0}, 4), ConfigError);
}

TEST(RunRound, HeterogeneousKStillAggregates) {
  World s = make_world(4);
  const std::vector<Capability> caps{Capability::high, Capability::low, Capability::high, Capability::low};
  auto clients = make_clients(s.model, s.shards, caps);
  assign_sparsity(clients, {SparsityPolicy::Kind::capability, 2, 4, 1}, 4);
  ServerState server;
  server.global_params = snapshot(s.model.trainable_parameters());
  Backbone global = s.model;
  global.set_top_k(4);
  const RoundReport r = run_round(server, clients, global, s.train, s.test, fast_config(), 1);
  ASSERT_EQ(server.global_params.size(), s.model.trainable_parameters().size());
  for (const ClientState& c : clients) {
    const auto mine = c.adapter_params();
    for (std::size_t i = 0; i < mine.size(); ++i) EXPECT_EQ(mine[i].shape(), server.global_params[i].shape());
  }
  EXPECT_EQ(r.clients[0].top_k, 4u);
  EXPECT_EQ(r.clients[1].top_k, 1u);
}

TEST(RunRound, ZeroLearningRateIsFixedPoint) {
  World s = make_world(3);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  server.global_params = snapshot(s.model.trainable_parameters());
  const auto init = flat(server.global_params);
  Backbone global = s.model;
  const RoundReport r1 = run_round(server, clients, global, s.train, s.test, fast_config(0.0), 1);
  const RoundReport r2 = run_round(server, clients, global, s.train, s.test, fast_config(0.0), 1);
  EXPECT_EQ(flat(server.global_params), init);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
  EXPECT_EQ(server.round_index, 2u);
  EXPECT_EQ(server.history.size(), 2u);
}

TEST(RunRound, SingleClientEqualsCentralizedTraining) {
  World s = make_world(1);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  server.global_params = snapshot(s.model.trainable_parameters());
  Backbone global = s.model;
  const TrainConfig cfg = fast_config();
  run_round(server, clients, global, s.train, s.test, cfg, 77);

  ClientState solo{0, s.shards[0], 2, Capability::high, s.model, {}};
  local_train(solo, s.train, cfg, derive_seed({77, 1, 0}));
  EXPECT_EQ(flat(server.global_params), flat(solo.adapter_params()));
}

TEST(RunRound, ReplayIsBitIdentical) {
  auto run = [](std::size_t threads) {
    World s = make_world(3, PartitionScheme::dirichlet);
    auto clients = make_clients(s.model, s.shards, {});
    ServerState server;
    server.global_params = snapshot(s.model.trainable_parameters());
    Backbone global = s.model;
    TrainConfig cfg = fast_config();
    cfg.threads = threads;
    std::vector<RoundReport> out;
    for (int r = 0; r < 2; ++r) out.push_back(run_round(server, clients, global, s.train, s.test, cfg, 5));
    return std::make_pair(out, flat(server.global_params));
  };
  const auto [a, pa] = run(1);
  const auto [b, pb] = run(1);
  const auto [c, pc] = run(3);
  EXPECT_EQ(pa, pb);
  EXPECT_EQ(pa, pc);
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].accuracy, b[r].accuracy);
    EXPECT_EQ(a[r].mean_util_kl, c[r].mean_util_kl);
    EXPECT_EQ(a[r].load.counts, c[r].load.counts);
    for (std::size_t n = 0; n < a[r].clients.size(); ++n) {
      EXPECT_EQ(a[r].clients[n].task_loss, b[r].clients[n].task_loss);
      EXPECT_EQ(a[r].clients[n].aux_loss, c[r].clients[n].aux_loss);
    }
  }
}

TEST(RunRound, OptimizerStatePersistsUnlessReset) {
  World s = make_world(2);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  server.global_params = snapshot(s.model.trainable_parameters());
  Backbone global = s.model;
  TrainConfig cfg = fast_config();
  run_round(server, clients, global, s.train, s.test, cfg, 1);
  const auto steps = clients[0].optimizer.step;
  run_round(server, clients, global, s.train, s.test, cfg, 1);
  EXPECT_EQ(clients[0].optimizer.step, 2 * steps);
  cfg.reset_optimizer = true;
  run_round(server, clients, global, s.train, s.test, cfg, 1);
  EXPECT_EQ(clients[0].optimizer.step, steps);
}

TEST(RunRound, ReportFieldsInRange) {
  World s = make_world(2, PartitionScheme::one_label);
  auto clients = make_clients(s.model, s.shards, {});
  ServerState server;
  server.global_params = snapshot(s.model.trainable_parameters());
  Backbone global = s.model;
  const RoundReport r = run_round(server, clients, global, s.train, s.test, fast_config(), 1);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  EXPECT_GE(r.mean_util_kl, 0.0);
  EXPECT_EQ(r.load.layers, 2u);
  EXPECT_EQ(r.load.experts, 4u);
  for (const auto& kl : r.layer_kl) {
    ASSERT_TRUE(kl.has_value());
    EXPECT_GE(*kl, 0.0);
  }
}

TEST(Capabilities, DrawIsDeterministic) {
  EXPECT_EQ(draw_capabilities(20, 0.5, 3), draw_capabilities(20, 0.5, 3));
  for (Capability c : draw_capabilities(10, 1.0, 3)) EXPECT_EQ(c, Capability::high);
  for (Capability c : draw_capabilities(10, 0.0, 3)) EXPECT_EQ(c, Capability::low);
}
