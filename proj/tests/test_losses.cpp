// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moce/losses.hpp"
#include "moce/model.hpp"
#include "moce/verify.hpp"
#include "test_support.hpp"

using namespace moce;
using namespace moce::losses;
using T = ad::Tensor<double>;

TEST(Bce, Examples) {
  EXPECT_NEAR(bce(0.0, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce(100.0, 1), 0.0, 1e-40);
  EXPECT_NEAR(bce(-2.0, 0), std::log1p(std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(bce(-2.0, 0), 0.126928, 1e-6);
  EXPECT_TRUE(std::isfinite(bce(-800.0, 1)));
}

TEST(AttentionCosine, ClosedForms) {
  auto pair = [](std::vector<double> a, std::vector<double> b) {
    // thetas is (d x M): column j is expert j.
    return attention_cosine_loss(T::from({2, 2}, {a[0], b[0], a[1], b[1]})).item();
  };
  EXPECT_NEAR(pair({1, 2}, {1, 2}), 1.0, 1e-12);
  EXPECT_NEAR(pair({3, 0}, {0, -0.5}), 0.5, 1e-12);
  EXPECT_NEAR(pair({1, 2}, {-1, -2}), 0.0, 1e-12);
}

TEST(AttentionCosine, ScaleInvariantAndBounded) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(4 * 5);
    for (auto& x : v) x = n(rng);
    const double a = attention_cosine_loss(T::from({4, 5}, v)).item();
    EXPECT_GE(a, -1.0);
    EXPECT_LE(a, 1.0 + 1e-12);
    for (std::size_t r = 0; r < 4; ++r) v[r * 5 + 2] *= 7.5;
    EXPECT_NEAR(attention_cosine_loss(T::from({4, 5}, v)).item(), a, 1e-13);
  }
}

TEST(AttentionCosine, ZeroVectorReplacedWithWarning) {
  std::vector<std::string> warnings;
  const double a =
      attention_cosine_loss(T::from({2, 2}, {0, 1, 0, 0}), &warnings).item();  // e_1 and 0
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NEAR(a, 1.0, 1e-12);  // both become e_1
}

TEST(ExpertSpecific, Examples) {
  EXPECT_EQ(expert_specific_loss(T::zeros({0, 1}), T::zeros({0, 1})).item(), 0.0);
  EXPECT_NEAR(expert_specific_loss(T::from({1, 1}, {0.0}), T::from({1, 1}, {1.0})).item(),
              std::log(2.0), 1e-15);
  const std::vector<double> z{0.3, -1.2, 2.0, 0.1};
  const std::vector<int> y{1, 0, 0, 1};
  double brute = 0;
  for (int i = 0; i < 4; ++i) brute += bce(z[i], y[i]);
  EXPECT_NEAR(expert_specific_loss(T::column(z), T::column({1, 0, 0, 1})).item(), brute, 1e-15);
}

// Random 4-expert x 8-sample assignment matrices against direct
// accumulation over the indicator.
TEST(ExpertSpecific, MatchesBruteForceOnRandomAssignments) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 2);
  for (int t = 0; t < 200; ++t) {
    double logits[4][8];
    bool assigned[4][8];
    int labels[8];
    for (int s = 0; s < 8; ++s) labels[s] = int(rng() % 2);
    for (int e = 0; e < 4; ++e)
      for (int s = 0; s < 8; ++s) {
        logits[e][s] = n(rng);
        assigned[e][s] = rng() % 2;
      }
    std::vector<double> pz, py;
    double brute = 0;
    for (int s = 0; s < 8; ++s)
      for (int e = 0; e < 4; ++e)
        if (assigned[e][s]) {
          pz.push_back(logits[e][s]);
          py.push_back(labels[s]);
          brute += bce(logits[e][s], labels[s]);
        }
    const double got = pz.empty() ? 0.0
                                  : expert_specific_loss(T::column(pz), T::column(py)).item();
    EXPECT_EQ(got, brute);
    if (!pz.empty()) {
      EXPECT_NEAR(expert_specific_loss(T::column(pz), T::column(py), true).item(),
                  brute / double(pz.size()), 1e-14);
    }
  }
}

TEST(ExpertSpecific, AddingAPairNeverDecreases) {
  std::vector<double> z{0.2}, y{1};
  double prev = expert_specific_loss(T::column(z), T::column(y)).item();
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 3);
  for (int i = 0; i < 50; ++i) {
    z.push_back(n(rng));
    y.push_back(double(rng() % 2));
    const double now = expert_specific_loss(T::column(z), T::column(y)).item();
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(Importance, Examples) {
  EXPECT_EQ(importance_loss(T::full({3, 4}, 0.25)).item(), 0.0);
  EXPECT_NEAR(importance_loss(T::from({1, 2}, {2, 0})).item(), 1.0, 1e-9);
  EXPECT_NEAR(importance_loss(T::from({1, 2}, {2, 0}), 0.3).item(), 0.3, 1e-9);
  EXPECT_EQ(importance_loss(T::from({3, 1}, {1, 1, 1})).item(), 0.0);
}

TEST(Load, Examples) {
  EXPECT_EQ(load_loss(T::full({5, 3}, 0.4)).item(), 0.0);
  EXPECT_EQ(load_loss(T::full({5, 3}, 0.5)).item(), 0.0);
  EXPECT_NEAR(load_loss(T::from({1, 2}, {1.5, 0.5})).item(), 0.5, 1e-9);
  EXPECT_NEAR(load_loss(T::from({1, 2}, {1.5, 0.5}), 0.2).item(), 0.1, 1e-9);
}

TEST(Load, GateResultOverloadsAgree) {
  std::vector<mixture::GateResult> g(2);
  g[0].gates = {0.5, 0.5, 0};
  g[1].gates = {0.7, 0, 0.3};
  g[0].p_choose = {0.9, 0.6, 0.1};
  g[1].p_choose = {0.8, 0.2, 0.5};
  EXPECT_DOUBLE_EQ(losses::importance_loss(std::span<const mixture::GateResult>(g)),
                   importance_loss(T::from({2, 3}, {0.5, 0.5, 0, 0.7, 0, 0.3})).item());
  EXPECT_DOUBLE_EQ(losses::load_loss(std::span<const mixture::GateResult>(g)),
                   load_loss(T::from({2, 3}, {0.9, 0.6, 0.1, 0.8, 0.2, 0.5})).item());
}

TEST(Overall, ComposesAndScalesLinearly) {
  LossTerms<double> t{T::scalar(0.7), T::scalar(0.2), T::scalar(3.0), T::scalar(0.05),
                      T::scalar(0.4)};
  const auto [o1, b1] = overall_loss(t, 0.5);
  EXPECT_NEAR(b1.col, 0.2 + 3.0 + 0.05 + 0.4, 1e-15);
  EXPECT_NEAR(b1.overall - b1.base, 0.5 * b1.col, 1e-12);
  EXPECT_EQ(o1.item(), b1.overall);
  LossTerms<double> zero{T::scalar(0.7), T::scalar(0.0), T::scalar(0.0), T::scalar(0.0),
                         T::scalar(0.0)};
  EXPECT_EQ(overall_loss(zero, 0.1).second.overall, 0.7);
  EXPECT_THROW(overall_loss(t, 0.0), BadBeta);
  EXPECT_THROW(overall_loss(t, 1.5), BadBeta);
  EXPECT_NO_THROW(overall_loss(t, 1.0));
}

// The composed model loss recomputed term by term from the forward outputs.
TEST(Overall, MatchesIndependentRecomposition) {
  auto records = fixtures::records_of({"CC(=O)O", "c1ccccc1N", "CCN", "C1CCOC1Cl", "CC#N"});
  const auto tasks = fixtures::two_tasks(4);
  ModelConfig cfg = verify::default_check_model();
  cfg.task_dim = 4;
  GnnMoce<double> model(cfg, 9);
  const auto batch = make_batch<double>(fixtures::pointers(records), tasks);
  const auto out = model.forward(batch);
  const LossConfig lc;
  const auto [loss, b] = overall_loss(compute_losses(out, batch, lc), lc.beta);

  double base = 0;
  for (std::size_t i = 0; i < records.size(); ++i) base += bce(out.logits()[i], records[i].label);
  base /= double(records.size());
  double att = 0, exp = 0, imp = 0, lod = 0;
  for (const auto& layer : out.layers) {
    const std::size_t m = layer.thetas.cols(), d = layer.thetas.rows();
    double cos_sum = 0;
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t c = 0; c < m; ++c) {
        double dot = 0, na = 0, nc = 0;
        for (std::size_t r = 0; r < d; ++r) {
          dot += layer.thetas.at(r, a) * layer.thetas.at(r, c);
          na += layer.thetas.at(r, a) * layer.thetas.at(r, a);
          nc += layer.thetas.at(r, c) * layer.thetas.at(r, c);
        }
        cos_sum += dot / std::sqrt(na * nc);
      }
    att += cos_sum / double(m * m);
    const std::size_t k = layer.route.k_s;
    for (std::size_t i = 0; i < records.size(); ++i)
      for (std::size_t s = 0; s < k; ++s) exp += bce(layer.pair_logits[i * k + s], records[i].label);
    std::vector<double> imp_v(m, 0), lod_v(m, 0);
    for (std::size_t i = 0; i < records.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) {
        imp_v[j] += layer.route.gates.at(i, j);
        lod_v[j] += layer.route.p_choose.at(i, j);
      }
    auto cv = [](const std::vector<double>& v) {
      double mu = 0, var = 0;
      for (double x : v) mu += x;
      mu /= double(v.size());
      for (double x : v) var += (x - mu) * (x - mu);
      return std::sqrt(var / double(v.size())) / (mu + kCvMeanEps);
    };
    imp += cv(imp_v) * cv(imp_v);
    lod += cv(lod_v);
  }
  EXPECT_NEAR(b.base, base, 1e-12);
  EXPECT_NEAR(b.att, att, 1e-12);
  EXPECT_NEAR(b.exp, exp, 1e-11);
  EXPECT_NEAR(b.imp, imp, 1e-12);
  EXPECT_NEAR(b.lod, lod, 1e-12);
  EXPECT_NEAR(b.overall, base + lc.beta * (att + exp + imp + lod), 1e-11);
  EXPECT_EQ(loss.item(), b.overall);
}

TEST(Overall, DisabledTermsAreZero) {
  auto records = fixtures::records_of({"CCO", "c1ccccc1"});
  const auto tasks = fixtures::two_tasks(8);
  GnnMoce<double> model(verify::default_check_model(), 1);
  const auto batch = make_batch<double>(fixtures::pointers(records), tasks);
  LossConfig lc;
  lc.use_att = lc.use_exp = lc.use_imp = lc.use_lod = false;
  const auto b = overall_loss(compute_losses(model.forward(batch), batch, lc), lc.beta).second;
  EXPECT_EQ(b.col, 0.0);
  EXPECT_EQ(b.overall, b.base);
}
