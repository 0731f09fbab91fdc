// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moce/mixture.hpp"
#include "moce/model.hpp"
#include "moce/verify.hpp"
#include "test_support.hpp"

using namespace moce;
using namespace moce::mixture;
using T = ad::Tensor<double>;

namespace {

/// A router whose noise-free mu equals `mu` exactly: x_hat is zero, the task
/// vector is the scalar 1 and w_mu2 holds mu.
RouterParams<double> router_with_mu(const std::vector<double>& mu, std::size_t k_s,
                                    std::size_t k_t) {
  RouterParams<double> r;
  const std::size_t m = mu.size();
  r.w_mu1 = T::zeros({1, m});
  r.w_mu2 = T::from({1, m}, mu);
  r.w_sigma1 = T::zeros({1, m});
  r.w_sigma2 = T::zeros({1, m});
  r.k_s = k_s;
  r.k_t = k_t;
  r.num_experts = m;
  return r;
}

RouteResult<double> route_mu(const std::vector<double>& mu, std::size_t k_s,
                             const NoiseFn& noise = {}) {
  return route(T::zeros({1, 1}), T::from({1, 1}, {1.0}), router_with_mu(mu, k_s, mu.size()), noise);
}

std::vector<double> row(const T& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(GammaMask, Examples) {
  const std::vector<double> v{3, 1, 2};
  EXPECT_EQ(gamma_mask(std::span<const double>(v), 2), (std::vector<double>{3, 1, 2}));
  EXPECT_EQ(gamma_mask(std::span<const double>(v), 1), (std::vector<double>{3, 1, 1}));
  EXPECT_EQ(gamma_mask(std::span<const double>(v), 3), v);
  EXPECT_THROW(gamma_mask(std::span<const double>(v), 0), BadK);
  EXPECT_THROW(gamma_mask(std::span<const double>(v), 4), BadK);
}

TEST(Route, ZeroWeightsTieBreakToLowerIndices) {
  const auto r = route_mu({0, 0, 0, 0, 0}, 2);
  EXPECT_EQ(row(r.gates), (std::vector<double>{0.5, 0.5, 0, 0, 0}));
  EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1}));
}

TEST(Route, GatesFromScores) {
  const std::vector<double> h{0.5, 0.3, 0.1};
  const auto g = gates_from_scores(h, 2);
  EXPECT_NEAR(g[0], 0.549834, 1e-6);
  EXPECT_NEAR(g[1], 0.450166, 1e-6);
  EXPECT_EQ(g[2], 0.0);
  const auto r = route_mu(h, 2);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.gates[j], g[j], 1e-15);
}

TEST(Route, ChooseProbabilityIsHalfAtThreshold) {
  // With k_s = 1, expert 0's threshold is the largest of the others, which
  // equals its own mu.
  const auto r = route_mu({1.0, 1.0, 0.0}, 1);
  EXPECT_EQ(r.p_choose[0], 0.5);
  EXPECT_EQ(r.p_choose[1], 0.5);
  EXPECT_LT(r.p_choose[2], 0.5);
}

TEST(Route, NoiseIsDeterministicPerKey) {
  auto noise = [](std::size_t i, std::size_t j) { return counter_normal(42, 7, i, j); };
  const auto a = route_mu({0.1, 0.4, -0.2, 0.3}, 2, noise);
  const auto b = route_mu({0.1, 0.4, -0.2, 0.3}, 2, noise);
  EXPECT_EQ(row(a.h), row(b.h));
  EXPECT_EQ(row(a.gates), row(b.gates));
  EXPECT_NE(row(a.h), row(a.mu));
}

// Routing property suite over random (m, k_s, k_t, v).
TEST(Route, InvariantsOnRandomCases) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0, 2);
  for (int trial = 0; trial < 1500; ++trial) {
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
    const std::size_t k_t = std::uniform_int_distribution<std::size_t>(1, m)(rng);
    const std::size_t k_s = std::uniform_int_distribution<std::size_t>(1, k_t)(rng);
    std::vector<double> v(m);
    for (auto& x : v) x = n(rng);

    const auto r = route_mu(v, k_s);
    std::size_t positive = 0;
    double total = 0;
    for (std::size_t j = 0; j < m; ++j) {
      positive += r.gates[j] > 0;
      total += r.gates[j];
      EXPECT_GE(r.p_choose[j], 0.0);
      EXPECT_LE(r.p_choose[j], 1.0);
    }
    ASSERT_EQ(positive, k_s);
    ASSERT_NEAR(total, 1.0, 1e-12);
    const auto top = top_k_indices(std::span<const double>(v), k_s);
    EXPECT_EQ(std::vector<std::size_t>(r.selected.begin(), r.selected.end()), top);

    const std::span<const double> vs(v);
    EXPECT_EQ(gamma_mask(vs, m), v);
    const auto g = gamma_mask(vs, k_t);
    EXPECT_EQ(std::max_element(g.begin(), g.end()) - g.begin(),
              std::max_element(v.begin(), v.end()) - v.begin());

    const double c = n(rng) * 5;
    std::vector<double> shifted(v);
    for (auto& x : shifted) x += c;
    const auto rs = route_mu(shifted, k_s);
    for (std::size_t j = 0; j < m; ++j) ASSERT_NEAR(rs.gates[j], r.gates[j], 1e-12);
  }
}

namespace {

struct OneGraph {
  mol::FeaturizedGraph g;
  nn::GraphBatch<double> b;
  explicit OneGraph(const std::string& s)
      : g(mol::featurize(mol::parse_smiles(s))), b(nn::batch_graphs<double>({&g})) {}
};

ExpertParams<double> expert(std::vector<double> theta, double kappa) {
  nn::ParamStore<double> ps(0);
  auto e = ExpertParams<double>::create(ps, "e", theta.size(), kappa);
  const std::size_t d = theta.size();
  e.theta = T::from({d, 1}, std::move(theta));
  return e;
}

}  // namespace

TEST(SagProject, ZeroAttentionGivesZeroVector) {
  OneGraph og("CCO");
  const auto x = T::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const auto p = sag_project(x, og.b, expert({0, 0}, 1.0));
  for (double v : p.values()) EXPECT_EQ(v, 0.0);
}

TEST(SagProject, SelectsCeilKappaN) {
  EXPECT_EQ(pooled_node_count(0.5, 4), 2u);
  EXPECT_EQ(pooled_node_count(0.5, 3), 2u);
  EXPECT_EQ(pooled_node_count(0.01, 3), 1u);
  EXPECT_EQ(pooled_node_count(1.0, 7), 7u);
  // Only the two top-scoring nodes contribute: perturbing a dropped node's
  // features changes nothing.
  OneGraph og("CCCC");
  const auto e = expert({1.0}, 0.5);
  const auto base = sag_project(T::from({4, 1}, {3, 2, -1, -2}), og.b, e).item();
  const auto scores = sag_scores(T::from({4, 1}, {3, 2, -1, -2}), og.b, e.theta);
  std::size_t low = 0;
  for (std::size_t v = 1; v < 4; ++v)
    if (scores[v] < scores[low]) low = v;
  std::vector<double> moved{3, 2, -1, -2};
  moved[low] -= 0.5;  // stays the lowest
  EXPECT_EQ(sag_project(T::from({4, 1}, moved), og.b, e).item(), base);
}

TEST(SagProject, SingleNodeHandEvaluation) {
  OneGraph og("N");
  const std::vector<double> x{0.3, -0.8, 0.5}, th{0.7, 0.2, -0.4};
  const auto out = sag_project(T::from({1, 3}, x), og.b, expert(th, 0.5));
  double z = 0;
  for (int i = 0; i < 3; ++i) z += x[i] * th[i];
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(out[i], std::tanh(z) * x[i], 1e-15);
}

TEST(SagPool, UniformScoresGiveScaledMean) {
  OneGraph og("CCOC");
  const auto x = T::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 9});
  const auto scores = T::full({4, 1}, 0.7);
  const PoolPair pair{0, 0};
  const double kappa = 1.0;
  const auto out = sag_pool(x, scores, og.b, std::span<const PoolPair>(&pair, 1),
                            std::span<const double>(&kappa, 1));
  const auto mean = encoder::global_mean_pool(x);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[c], 0.7 * mean[c], 1e-15);
}

namespace {

struct LayerFixture {
  std::vector<DatasetRecord> records;
  TaskTable tasks = fixtures::two_tasks(4);
  nn::ParamStore<double> ps{3};
  std::vector<ExpertParams<double>> experts;
  RouterParams<double> router;
  nn::GraphBatch<double> batch;
  T nodes;

  LayerFixture(std::size_t m, std::size_t k_s, std::size_t k_t) {
    records = fixtures::records_of({"CC(=O)O", "c1ccccc1N", "CCN", "C1CCOC1Cl"});
    batch = make_batch<double>(fixtures::pointers(records), tasks);
    for (std::size_t j = 0; j < m; ++j)
      experts.push_back(ExpertParams<double>::create(ps, "x" + std::to_string(j), 5, 0.5));
    router = RouterParams<double>::create(ps, "r", 5, 4, m, k_s, k_t);
    std::vector<double> v(batch.num_nodes * 5);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(0.37 * double(i));
    nodes = T::from({batch.num_nodes, 5}, v);
  }
};

}  // namespace

TEST(LayerForward, OutputIsGateWeightedVote) {
  LayerFixture fx(6, 3, 4);
  const auto out = layer_forward(fx.batch, fx.nodes, fx.experts, fx.router);
  for (std::size_t i = 0; i < fx.batch.num_graphs; ++i) {
    double y = 0;
    for (std::size_t s = 0; s < 3; ++s)
      y += out.route.gates.at(i, out.route.selected[i * 3 + s]) * out.pair_logits[i * 3 + s];
    EXPECT_NEAR(out.output[i], y, 1e-14);
  }
}

TEST(LayerForward, GroupOfOneReturnsThatExpertsLogit) {
  LayerFixture fx(4, 1, 2);
  const auto out = layer_forward(fx.batch, fx.nodes, fx.experts, fx.router);
  for (std::size_t i = 0; i < fx.batch.num_graphs; ++i)
    EXPECT_DOUBLE_EQ(out.output[i], out.pair_logits[i]);
}

TEST(LayerForward, PairLogitsMatchPerSampleProjection) {
  LayerFixture fx(5, 2, 3);
  const auto out = layer_forward(fx.batch, fx.nodes, fx.experts, fx.router);
  for (std::size_t i = 0; i < fx.batch.num_graphs; ++i) {
    const auto one = make_batch<double>({&fx.records[i]}, fx.tasks);
    const std::size_t off = fx.batch.node_offset[i], n = fx.batch.graph_size(i);
    std::vector<std::size_t> rows(n);
    for (std::size_t v = 0; v < n; ++v) rows[v] = off + v;
    const auto x = ad::gather_rows(fx.nodes, std::span<const std::size_t>(rows));
    for (std::size_t s = 0; s < 2; ++s) {
      const auto& e = fx.experts[out.route.selected[i * 2 + s]];
      EXPECT_NEAR(e.predict(sag_project(x, one, e)).item(), out.pair_logits[i * 2 + s], 1e-13);
    }
  }
}

TEST(Integrate, Examples) {
  IntegratorParams<double> p{T::zeros({2, 3}), T::zeros({3})};
  const auto o = T::from({1, 3}, {1.0, 2.0, 6.0});
  const auto t = T::from({1, 2}, {0.3, -0.9});
  EXPECT_NEAR(integrate_outputs(o, t, p).logits.item(), 3.0, 1e-15);

  IntegratorParams<double> one{T::from({2, 1}, {5, -3}), T::from({1}, {2})};
  EXPECT_EQ(integrate_outputs(T::from({1, 1}, {1.7}), t, one).logits.item(), 1.7);

  IntegratorParams<double> w{T::zeros({2, 2}), T::from({2}, {std::log(0.25), std::log(0.75)})};
  EXPECT_NEAR(integrate_outputs(T::from({1, 2}, {0.0, 4.0}), t, w).logits.item(), 3.0, 1e-14);
}

TEST(Integrate, WeightsAreProbabilities) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> wv(6), bv(3), tv(4);
    for (auto& x : wv) x = n(rng);
    for (auto& x : bv) x = n(rng);
    for (auto& x : tv) x = n(rng);
    IntegratorParams<double> p{T::from({2, 3}, wv), T::from({3}, bv)};
    const auto r = integrate_outputs(T::zeros({2, 3}), T::from({2, 2}, tv), p);
    for (std::size_t i = 0; i < 2; ++i) {
      double s = 0;
      for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_GE(r.weights.at(i, l), 0.0);
        s += r.weights.at(i, l);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Model, ComposedGradientCheckTwoSamples) {
  auto cfg = verify::default_check_model();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto rep = verify::check_model(cfg, 2, seed);
    EXPECT_TRUE(rep.pass) << "seed " << seed << " err " << rep.max_rel_error;
  }
}

TEST(Model, DegenerateSingleExpertGradientCheck) {
  auto cfg = verify::default_check_model();
  cfg.num_experts = cfg.k_s = cfg.k_t = 1;
  const auto rep = verify::check_model(cfg, 4, 5);
  EXPECT_TRUE(rep.pass) << rep.max_rel_error;
}

TEST(Model, RejectsBadRouting) {
  ModelConfig cfg = verify::default_check_model();
  cfg.k_s = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = verify::default_check_model();
  cfg.pool_ratio = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
