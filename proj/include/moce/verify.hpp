// SPDX-License-Identifier: Apache-2.0
//
// Gradient-check suite over every differentiable op family and the composed
// model, shared by the CLI `gradcheck` command and the test binaries.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "moce/gradcheck.hpp"
#include "moce/model.hpp"
#include "moce/synthetic.hpp"
#include "moce/tasks.hpp"

namespace moce::verify {

using ad::Tensor;
using T = Tensor<double>;

struct FamilyResult {
  std::string family;
  std::size_t trials = 0;
  std::size_t failures = 0;
  ad::GradCheckReport worst;
};

/// A check instance: the scalar function and the leaves it depends on. The
/// function may capture state through `keep` to extend lifetimes.
struct Case {
  std::function<T()> f;
  std::vector<T> inputs;
};

using CaseFactory = std::function<Case(std::mt19937_64&)>;

namespace detail {

inline T random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo, double hi,
                       bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = u(rng);
  return T::from(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 4) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Contracts `y` with fixed random weights so every output coordinate
/// carries a distinct sensitivity.
inline T contract(const T& y, const T& w) { return ad::sum(ad::mul(y, w)); }

inline Case unary_case(std::mt19937_64& rng, T (*op)(const T&), double lo, double hi) {
  const std::size_t r = dim(rng), c = dim(rng);
  auto x = random_tensor(rng, {r, c}, lo, hi);
  auto w = random_tensor(rng, {r, c}, -1, 1, false);
  return {[=] { return contract(op(x), w); }, {x}};
}

inline Case binary_case(std::mt19937_64& rng, T (*op)(const T&, const T&), double lo_b,
                        double hi_b) {
  const std::size_t r = dim(rng), c = dim(rng);
  auto a = random_tensor(rng, {r, c}, -2, 2);
  // Exercise the broadcast forms too: equal shapes, column, scalar.
  const int form = std::uniform_int_distribution<int>(0, 2)(rng);
  ad::Shape bs = form == 0 ? ad::Shape{r, c} : form == 1 ? ad::Shape{r, 1} : ad::Shape{1};
  auto b = random_tensor(rng, bs, lo_b, hi_b);
  auto w = random_tensor(rng, {r, c}, -1, 1, false);
  return {[=] { return contract(op(a, b), w); }, {a, b}};
}

}  // namespace detail

/// Every differentiable op family, keyed by name.
inline std::vector<std::pair<std::string, CaseFactory>> op_families() {
  using namespace detail;
  std::vector<std::pair<std::string, CaseFactory>> f;
  f.emplace_back("add", [](auto& g) { return binary_case(g, &ad::add<double>, -2, 2); });
  f.emplace_back("sub", [](auto& g) { return binary_case(g, &ad::sub<double>, -2, 2); });
  f.emplace_back("mul", [](auto& g) { return binary_case(g, &ad::mul<double>, -2, 2); });
  f.emplace_back("div", [](auto& g) { return binary_case(g, &ad::div<double>, 0.5, 2); });
  f.emplace_back("negate", [](auto& g) { return unary_case(g, &ad::negate<double>, -2, 2); });
  f.emplace_back("relu", [](auto& g) { return unary_case(g, &ad::relu<double>, -2, 2); });
  f.emplace_back("tanh", [](auto& g) { return unary_case(g, &ad::tanh<double>, -2, 2); });
  f.emplace_back("sigmoid", [](auto& g) { return unary_case(g, &ad::sigmoid<double>, -3, 3); });
  f.emplace_back("softplus", [](auto& g) { return unary_case(g, &ad::softplus<double>, -3, 3); });
  f.emplace_back("log", [](auto& g) { return unary_case(g, &ad::log<double>, 0.3, 3); });
  f.emplace_back("exp", [](auto& g) { return unary_case(g, &ad::exp<double>, -2, 2); });
  f.emplace_back("sqrt", [](auto& g) { return unary_case(g, &ad::sqrt<double>, 0.3, 3); });
  f.emplace_back("normal_cdf",
                 [](auto& g) { return unary_case(g, &ad::normal_cdf<double>, -3, 3); });
  f.emplace_back("matmul", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), k = dim(g), m = dim(g);
    auto a = random_tensor(g, {n, k}, -1, 1);
    auto b = random_tensor(g, {k, m}, -1, 1);
    auto w = random_tensor(g, {n, m}, -1, 1, false);
    return Case{[=] { return contract(ad::matmul(a, b), w); }, {a, b}};
  });
  f.emplace_back("add_bias", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), m = dim(g);
    auto x = random_tensor(g, {n, m}, -1, 1);
    auto b = random_tensor(g, {m}, -1, 1);
    auto w = random_tensor(g, {n, m}, -1, 1, false);
    return Case{[=] { return contract(ad::add_bias(x, b), w); }, {x, b}};
  });
  f.emplace_back("softmax", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), m = dim(g, 2, 5);
    auto x = random_tensor(g, {n, m}, -2, 2);
    auto w = random_tensor(g, {n, m}, -1, 1, false);
    return Case{[=] { return contract(ad::softmax(x), w); }, {x}};
  });
  f.emplace_back("softmax_masked", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), m = dim(g, 2, 5);
    auto x = random_tensor(g, {n, m}, -2, 2);
    // Mask a random subset of each row, never the whole row.
    auto v = x.mutable_values();
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t keep = std::uniform_int_distribution<std::size_t>(0, m - 1)(g);
      for (std::size_t c = 0; c < m; ++c)
        if (c != keep && std::uniform_int_distribution<int>(0, 1)(g)) v[r * m + c] = ad::kMasked<double>;
    }
    auto w = random_tensor(g, {n, m}, -1, 1, false);
    return Case{[=] { return contract(ad::softmax(x), w); }, {x}};
  });
  for (auto [name, op] : {std::pair{"reduce_sum", ad::Reduce::kSum},
                          std::pair{"reduce_mean", ad::Reduce::kMean},
                          std::pair{"reduce_max", ad::Reduce::kMax}}) {
    f.emplace_back(name, [op](std::mt19937_64& g) {
      const std::size_t n = dim(g), m = dim(g);
      const int axis = std::uniform_int_distribution<int>(-1, 1)(g);
      auto x = random_tensor(g, {n, m}, -2, 2);
      const std::size_t out = axis == ad::kAllAxes ? 1 : axis == 0 ? m : n;
      auto w = random_tensor(g, axis == 0 ? ad::Shape{1, out} : axis == 1 ? ad::Shape{out, 1}
                                                                           : ad::Shape{1},
                             -1, 1, false);
      return Case{[=] { return contract(ad::reduce(op, x, axis), w); }, {x}};
    });
  }
  f.emplace_back("gather_rows", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), d = dim(g), k = dim(g, 1, 6);
    auto x = random_tensor(g, {n, d}, -1, 1);
    auto idx = std::make_shared<std::vector<std::size_t>>(k);
    for (auto& i : *idx) i = std::uniform_int_distribution<std::size_t>(0, n - 1)(g);
    auto w = random_tensor(g, {k, d}, -1, 1, false);
    return Case{[=] { return contract(ad::gather_rows(x, std::span<const std::size_t>(*idx)), w); },
                {x}};
  });
  f.emplace_back("scatter_segment_sum", [](std::mt19937_64& g) {
    const std::size_t n = dim(g, 1, 6), d = dim(g), s = dim(g);
    auto x = random_tensor(g, {n, d}, -1, 1);
    auto ids = std::make_shared<std::vector<std::size_t>>(n);
    for (auto& i : *ids) i = std::uniform_int_distribution<std::size_t>(0, s - 1)(g);
    auto w = random_tensor(g, {s, d}, -1, 1, false);
    return Case{[=] {
                  return contract(
                      ad::scatter_segment_sum(x, std::span<const std::size_t>(*ids), s), w);
                },
                {x}};
  });
  f.emplace_back("take", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), m = dim(g), k = dim(g, 1, 6);
    auto x = random_tensor(g, {n, m}, -1, 1);
    auto idx = std::make_shared<std::vector<std::size_t>>(k);
    for (auto& i : *idx) i = std::uniform_int_distribution<std::size_t>(0, n * m - 1)(g);
    auto w = random_tensor(g, {k, 1}, -1, 1, false);
    return Case{[=] { return contract(ad::take(x, std::span<const std::size_t>(*idx), {k, 1}), w); },
                {x}};
  });
  f.emplace_back("concat", [](std::mt19937_64& g) {
    const std::size_t n = dim(g), a = dim(g), b = dim(g);
    auto x = random_tensor(g, {n, a}, -1, 1);
    auto y = random_tensor(g, {n, b}, -1, 1);
    auto w1 = random_tensor(g, {n, a + b}, -1, 1, false);
    auto w2 = random_tensor(g, {2 * n, a}, -1, 1, false);
    return Case{[=] {
                  return ad::add(contract(ad::concat_cols<double>({x, y}), w1),
                                 contract(ad::concat_rows<double>({x, x}), w2));
                },
                {x, y}};
  });
  f.emplace_back("sparse_matmul", [](std::mt19937_64& g) {
    const std::size_t n = dim(g, 2, 5), d = dim(g);
    auto s = std::make_shared<ad::SparseMatrix<double>>();
    s->rows = s->cols = n;
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i == j || u(g) > 0.3) s->add(i, j, u(g));
    std::shared_ptr<const ad::SparseMatrix<double>> cs = s;
    auto x = random_tensor(g, {n, d}, -1, 1);
    auto w = random_tensor(g, {n, d}, -1, 1, false);
    return Case{[=] { return contract(ad::sparse_matmul(cs, x), w); }, {x}};
  });
  f.emplace_back("bce_with_logits", [](std::mt19937_64& g) {
    const std::size_t n = dim(g, 1, 6);
    auto z = random_tensor(g, {n, 1}, -4, 4);
    std::vector<double> y(n);
    for (auto& v : y) v = std::uniform_int_distribution<int>(0, 1)(g);
    auto labels = T::column(std::move(y));
    return Case{[=] { return ad::sum(ad::bce_with_logits(z, labels)); }, {z}};
  });
  return f;
}

/// Small molecules with random labels and two tasks, for model-level checks.
struct ModelFixture {
  std::vector<DatasetRecord> records;
  TaskTable tasks;
};

inline ModelFixture model_fixture(std::size_t molecules, std::size_t task_dim, std::uint64_t seed) {
  ModelFixture fx;
  const auto mols = synth::generate_molecules(std::max<std::size_t>(molecules, 4), seed);
  for (const char* id : {"task_a", "task_b"})
    fx.tasks.add({id, id, fallback_task_embedding(std::string(id) + std::to_string(seed), task_dim)});
  for (std::size_t i = 0; i < molecules; ++i)
    fx.records.push_back(
        make_record(mols[i].smiles, mols[i].carbonyl ? 1 : 0, i % 2 ? "task_b" : "task_a"));
  return fx;
}

/// Full forward plus overall loss (every term on, noise off) as a function of
/// every model parameter.
inline ad::GradCheckReport check_model(const ModelConfig& cfg, std::size_t molecules,
                                       std::uint64_t seed, const ad::GradCheckOptions& opt = {}) {
  auto fx = std::make_shared<ModelFixture>(model_fixture(molecules, cfg.task_dim, seed));
  auto model = std::make_shared<GnnMoce<double>>(cfg, seed);
  std::vector<const DatasetRecord*> recs;
  for (const auto& r : fx->records) recs.push_back(&r);
  auto batch = std::make_shared<nn::GraphBatch<double>>(make_batch<double>(recs, fx->tasks));
  losses::LossConfig lc;
  auto f = [model, batch, lc, fx] {
    auto out = model->forward(*batch);
    return losses::overall_loss(compute_losses(out, *batch, lc), lc.beta).first;
  };
  std::vector<T> inputs;
  for (const auto& [_, t] : model->params().params()) inputs.push_back(t);
  return ad::finite_diff_check(f, inputs, opt);
}

/// The configuration the CLI checks by default.
inline ModelConfig default_check_model() {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_gnn_layers = 2;
  c.num_processing_layers = 2;
  c.num_experts = 8;
  c.k_s = 2;
  c.k_t = 4;
  c.task_dim = 8;
  return c;
}

/// Runs `trials` random instances of every op family and `trials` model
/// checks on batches of `molecules` molecules.
inline std::vector<FamilyResult> run_suite(std::size_t trials, std::uint64_t seed,
                                           const ModelConfig& model_cfg,
                                           std::size_t molecules = 4,
                                           const ad::GradCheckOptions& opt = {}) {
  std::vector<FamilyResult> out;
  auto record = [](FamilyResult& fr, const ad::GradCheckReport& rep) {
    ++fr.trials;
    if (!rep.pass) ++fr.failures;
    // Keep the worst report, preferring failures.
    if ((!rep.pass && fr.worst.pass) ||
        (rep.pass == fr.worst.pass && rep.max_rel_error >= fr.worst.max_rel_error))
      fr.worst = rep;
  };
  for (const auto& [name, factory] : op_families()) {
    FamilyResult fr{name, 0, 0, {}};
    std::mt19937_64 rng(hash_combine(seed, fnv1a(name)));
    for (std::size_t t = 0; t < trials; ++t) {
      Case c = factory(rng);
      record(fr, ad::finite_diff_check(c.f, c.inputs, opt));
    }
    out.push_back(fr);
  }
  FamilyResult fr{"model", 0, 0, {}};
  for (std::size_t t = 0; t < trials; ++t) record(fr, check_model(model_cfg, molecules, hash_combine(seed, t), opt));
  out.push_back(fr);
  return out;
}

}  // namespace moce::verify
