// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "fftmoe/moe_adapter.hpp"
#include "support.hpp"

using namespace fftmoe;
using fftmoe::testing::max_rel_err;
using fftmoe::testing::numeric_grad;
using fftmoe::testing::random_tensor;

namespace {

AdapterSpec spec_of(std::size_t d, std::vector<std::size_t> ranks, std::size_t k, Activation act = Activation::gelu) {
  AdapterSpec s;
  s.width = d;
  s.ranks = std::move(ranks);
  s.top_k = k;
  s.activation = act;
  return s;
}

// Randomizes every parameter, including the zero-initialized ones.
void randomize(MoEAdapter& a, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  for (Tensor& p : a.parameters()) {
    for (double& v : p.values()) v = n(rng);
  }
}

void set_router(MoEAdapter& a, const std::vector<double>& w) {
  auto dst = a.parameters().back().values();
  std::copy(w.begin(), w.end(), dst.begin());
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Route, EqualLogitsFullActivationAreUniform) {
  Rng rng(1);
  MoEAdapter a(spec_of(3, {1, 1, 1, 1}, 4), rng);
  const std::vector<double> x{0.3, -0.2, 0.9};
  const Route r = a.route(x);
  for (double w : r.weights) EXPECT_EQ(w, 0.25);
}

TEST(Route, SingleExpertIsOneHotAtArgmax) {
  Rng rng(1);
  MoEAdapter a(spec_of(1, {1, 1, 1, 1}, 1), rng);
  set_router(a, {0.1, 3.0, -1.0, 0.0});
  const std::vector<double> x{1.0};
  const Route r = a.route(x);
  EXPECT_EQ(r.weights, (std::vector<double>{0.0, 1.0, 0.0, 0.0}));
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{1}));
}

TEST(Route, TwoOfFourReference) {
  Rng rng(1);
  MoEAdapter a(spec_of(1, {1, 1, 1, 1}, 2), rng);
  set_router(a, {2.0, 1.0, 0.0, -1.0});
  const std::vector<double> x{1.0};
  const Route r = a.route(x);
  EXPECT_NEAR(r.weights[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(r.weights[1], 0.2689414213699951, 1e-12);
  EXPECT_EQ(r.weights[2], 0.0);
  EXPECT_EQ(r.weights[3], 0.0);
}

TEST(Route, TiesBreakToLowestIndex) {
  const std::vector<double> logits{1.0, 2.0, 2.0, 2.0, 0.0};
  EXPECT_EQ(top_k_indices(logits, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k_indices(logits, 1), (std::vector<std::size_t>{1}));
}

TEST(Route, SparsityProperty) {
  std::mt19937_64 rng(4);
  Rng init(4);
  for (std::size_t k : {1u, 2u, 3u, 5u}) {
    MoEAdapter a(spec_of(6, {2, 2, 2, 2, 2}, k), init);
    randomize(a, rng);
    for (int t = 0; t < 200; ++t) {
      const Tensor x = random_tensor({6}, rng);
      const Route r = a.route(x.values());
      std::size_t nonzero = 0;
      double total = 0.0;
      for (double w : r.weights) {
        nonzero += w != 0.0;
        total += w;
      }
      EXPECT_EQ(nonzero, k);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Route, KOutOfRangeIsConfigError) {
  Rng rng(1);
  EXPECT_THROW(MoEAdapter(spec_of(4, {1, 1}, 3), rng), ConfigError);
  MoEAdapter a(spec_of(4, {1, 1}, 2), rng);
  EXPECT_THROW(a.set_top_k(0), ConfigError);
}

TEST(AdapterForward, FreshAdapterIsIdentityPerturbation) {
  std::mt19937_64 rng(2);
  Rng init(2);
  MoEAdapter a(spec_of(5, {2, 2, 2}, 2), init);
  const Tensor base = random_tensor({7, 5}, rng);
  const Tensor x = random_tensor({7, 5}, rng);
  EXPECT_EQ(values_of(a.forward(base, x).output), values_of(base));
}

TEST(AdapterForward, HandComputedTwoExpertCase) {
  Rng init(3);
  MoEAdapter a(spec_of(2, {1, 1}, 1, Activation::linear), init);
  auto p = a.parameters();
  const std::vector<std::vector<double>> vals{{1, 0}, {1, 2}, {0, 1}, {3, 3}, {1, 0, 0, 1}};
  for (std::size_t i = 0; i < p.size(); ++i) std::copy(vals[i].begin(), vals[i].end(), p[i].values().begin());
  // logits [2, 1] select expert 0 with weight 1; E0(x) = [1, 2] * (x0) = [2, 4].
  const Tensor out = a.forward(Tensor::from({2}, {0.5, -0.5}), Tensor::from({2}, {2.0, 1.0})).output;
  EXPECT_NEAR(out.at(0), 2.5, 1e-12);
  EXPECT_NEAR(out.at(1), 3.5, 1e-12);
}

TEST(AdapterForward, DimensionMismatchRejected) {
  Rng init(3);
  MoEAdapter a(spec_of(4, {1, 1}, 1), init);
  EXPECT_THROW(a.forward(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  EXPECT_THROW(a.forward(Tensor::zeros({2, 4}), Tensor::zeros({3, 4})), DimensionError);
}

TEST(AdapterForward, FullActivationWithEqualLogitsAveragesExperts) {
  std::mt19937_64 rng(5);
  Rng init(5);
  MoEAdapter a(spec_of(4, {2, 3, 1}, 3), init);
  randomize(a, rng);
  set_router(a, std::vector<double>(12, 0.0));
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor out = a.forward(Tensor::zeros({3, 4}), x).output;
  std::vector<double> expect(12, 0.0);
  for (const ExpertNetwork& e : a.experts()) {
    const auto y = values_of(e.forward(x));
    for (std::size_t i = 0; i < 12; ++i) expect[i] += y[i] / 3.0;
  }
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out.at(i), expect[i], 1e-12);
}

TEST(AdapterForward, PermutingExpertsAndRouterRowsLeavesOutput) {
  std::mt19937_64 rng(6);
  Rng init(6);
  const std::size_t d = 4, m = 4;
  MoEAdapter a(spec_of(d, {2, 2, 2, 2}, 2), init);
  randomize(a, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  MoEAdapter b = a;
  const auto src = a.parameters();
  std::vector<Tensor> permuted;
  for (std::size_t j = 0; j < m; ++j) {
    permuted.push_back(src[2 * perm[j]].detach());
    permuted.push_back(src[2 * perm[j] + 1].detach());
  }
  std::vector<double> router(m * d);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t c = 0; c < d; ++c) router[j * d + c] = src.back().at(perm[j] * d + c);
  }
  permuted.push_back(Tensor::from({m, d}, router));
  b.load_parameters(permuted);
  for (int t = 0; t < 50; ++t) {
    const Tensor x = random_tensor({d}, rng);
    const Route ra = a.route(x.values());
    const Route rb = b.route(x.values());
    for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(rb.weights[j], ra.weights[perm[j]], 1e-12);
    const Tensor base = random_tensor({d}, rng);
    const auto ya = values_of(a.forward(base, x).output);
    const auto yb = values_of(b.forward(base, x).output);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(ya[i], yb[i], 1e-12);
  }
}

TEST(AdapterForward, StatsConserveCountsAndProbabilities) {
  std::mt19937_64 rng(7);
  Rng init(7);
  MoEAdapter a(spec_of(5, {1, 1, 1, 1, 1, 1}, 2), init);
  randomize(a, rng);
  RoutingStats stats(6);
  a.forward(Tensor::zeros({20, 5}), random_tensor({20, 5}, rng), &stats);
  EXPECT_EQ(stats.tokens_seen, 20u);
  EXPECT_EQ(std::accumulate(stats.counts.begin(), stats.counts.end(), std::uint64_t{0}), 40u);
  const auto p = stats.mean_probs();
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
}

TEST(AdapterForward, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Rng init(8);
  const std::size_t d = 4;
  MoEAdapter a(spec_of(d, {2, 1, 3}, 2), init);
  randomize(a, rng);
  const Tensor x = random_tensor({6, d}, rng);
  const Tensor base = random_tensor({6, d}, rng);
  const Tensor head = random_tensor({3, d}, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 2, 1, 0};
  auto loss = [&] { return cross_entropy(linear(a.forward(base, x).output, head), labels); };
  auto params = a.parameters();
  backward(loss());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<double> analytic(params[i].grad().begin(), params[i].grad().end());
    const auto numeric = numeric_grad(params[i], [&] {
      NoGradGuard ng;
      return loss().item();
    });
    EXPECT_LT(max_rel_err(analytic, numeric), 1e-4) << a.parameter_names()[i];
  }
}

TEST(AdapterForward, NeverRoutedExpertsGetZeroGradient) {
  std::mt19937_64 rng(9);
  Rng init(9);
  const std::size_t d = 3;
  MoEAdapter a(spec_of(d, {1, 1, 1, 1}, 2), init);
  randomize(a, rng);
  set_router(a, {1, 1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1});
  const Tensor x = random_tensor({8, d}, rng, 0.1, 1.0);
  backward(sum(a.forward(Tensor::zeros({8, d}), x).output));
  const auto params = a.parameters();
  for (std::size_t i = 4; i < 8; ++i) {
    for (double g : params[i].grad()) EXPECT_EQ(g, 0.0) << a.parameter_names()[i];
  }
  double used = 0.0;
  for (double g : params[0].grad()) used += std::abs(g);
  EXPECT_GT(used, 0.0);
}

TEST(FromLora, SingleExpertKeepsFactors) {
  std::mt19937_64 rng(10);
  const Tensor a = random_tensor({3, 6}, rng);
  const Tensor b = random_tensor({6, 3}, rng);
  const std::vector<std::size_t> ranks{3};
  const MoEAdapter m = from_lora(a, b, ranks);
  EXPECT_EQ(values_of(m.experts()[0].down), values_of(a));
  EXPECT_EQ(values_of(m.experts()[0].up), values_of(b));
  EXPECT_EQ(m.gating(), GatingMode::uniform_one);
}

TEST(FromLora, BlockProductsSumToDenseProduct) {
  std::mt19937_64 rng(11);
  const std::size_t d = 6, r = 4;
  const Tensor a = random_tensor({r, d}, rng);
  const Tensor b = random_tensor({d, r}, rng);
  const std::vector<std::size_t> ranks{2, 2};
  const MoEAdapter m = from_lora(a, b, ranks);
  std::vector<double> acc(d * d, 0.0);
  for (const ExpertNetwork& e : m.experts()) {
    const auto p = values_of(matmul(e.up, e.down));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
  }
  const auto dense = values_of(matmul(b, a));
  for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc[i], dense[i], 1e-12);
}

TEST(FromLora, ForwardEqualsLowRankUpdate) {
  std::mt19937_64 rng(12);
  const std::size_t d = 8, r = 4;
  const Tensor a = random_tensor({r, d}, rng);
  const Tensor b = random_tensor({d, r}, rng);
  const std::vector<std::size_t> ranks{1, 3};
  const MoEAdapter m = from_lora(a, b, ranks);
  const Tensor x = random_tensor({10, d}, rng);
  const Tensor base = random_tensor({10, d}, rng);
  const auto out = values_of(m.forward(base, x).output);
  const auto delta = values_of(linear(linear(x, a), b));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], base.at(i) + delta[i], 1e-9);
}

TEST(FromLora, ZeroDownFactorGivesZeroMap) {
  std::mt19937_64 rng(13);
  const std::vector<std::size_t> ranks{2, 1};
  const MoEAdapter m = from_lora(Tensor::zeros({3, 5}), random_tensor({5, 3}, rng), ranks);
  const Tensor base = random_tensor({4, 5}, rng);
  EXPECT_EQ(values_of(m.forward(base, random_tensor({4, 5}, rng)).output), values_of(base));
}

TEST(FromLora, BadRankSplitIsConfigError) {
  const std::vector<std::size_t> ranks{2, 1};
  EXPECT_THROW(from_lora(Tensor::zeros({4, 6}), Tensor::zeros({6, 4}), ranks), ConfigError);
}

TEST(Parameters, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(14);
  Rng init(14);
  MoEAdapter a(spec_of(4, {1, 2, 3}, 2), init);
  randomize(a, rng);
  MoEAdapter b(spec_of(4, {1, 2, 3}, 2), init);
  b.load_parameters(a.parameters());
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), 7u);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(values_of(pa[i]), values_of(pb[i]));
    EXPECT_FALSE(pa[i].same_storage(pb[i]));
  }
  EXPECT_EQ(a.parameter_names().back(), "router");
}

TEST(Parameters, TransposedTensorNamesPosition) {
  Rng init(15);
  MoEAdapter a(spec_of(4, {2, 2}, 1), init);
  auto params = a.parameters();
  std::vector<Tensor> bad;
  for (const Tensor& p : params) bad.push_back(p.detach());
  bad[3] = Tensor::zeros({2, 4});
  try {
    a.load_parameters(bad);
    FAIL() << "expected CompatibilityError";
  } catch (const CompatibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("position 3"), std::string::npos) << e.what();
  }
}

TEST(Parameters, DifferentKInteroperate) {
  std::mt19937_64 rng(16);
  Rng init(16);
  MoEAdapter wide(spec_of(4, {2, 2, 2, 2}, 4), init);
  MoEAdapter narrow(spec_of(4, {2, 2, 2, 2}, 1), init);
  randomize(wide, rng);
  narrow.load_parameters(wide.parameters());
  const Tensor x = random_tensor({5, 4}, rng);
  EXPECT_TRUE(narrow.forward(Tensor::zeros({5, 4}), x).output.all_finite());
  wide.load_parameters(narrow.parameters());
  EXPECT_TRUE(wide.forward(Tensor::zeros({5, 4}), x).output.all_finite());
}

TEST(Parameters, CountsMatchRankAccounting) {
  Rng init(17);
  MoEAdapter a(spec_of(8, {1, 2, 5}, 2), init);
  EXPECT_EQ(a.expert_parameter_count(), (1u + 2u + 5u) * 2u * 8u);
  EXPECT_EQ(a.parameter_count(), a.expert_parameter_count() + 3u * 8u);
}

TEST(Parameters, InitializationScheme) {
  Rng init(18);
  AdapterSpec s = spec_of(16, std::vector<std::size_t>(4, 8), 2);
  MoEAdapter a(s, init);
  double sq = 0.0;
  std::size_t n = 0;
  for (const ExpertNetwork& e : a.experts()) {
    for (double v : e.up.values()) EXPECT_EQ(v, 0.0);
    for (double v : e.down.values()) {
      sq += v * v;
      ++n;
    }
  }
  for (double v : a.router().weight.values()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n)), 0.02, 0.003);
}
