// SPDX-License-Identifier: Apache-2.0
//
// Mixture of Collaborative Experts predictor.
//
// Routing, per sample i over m experts:
//   mu    = Gamma(W_mu1^T x_i) + W_mu2^T t_i
//   sigma = softplus(Gamma(W_s1^T x_i) + W_s2^T t_i) + sigma_floor
//   h     = mu + sigma * z   (z ~ N(0,1) in training, 0 otherwise)
//   gates = softmax over the k_s largest h, zero elsewhere
//   P_j   = Phi((mu_j - kth_excluding_j(h)) / sigma_j)
// where Gamma keeps the top k_t entries and fills the rest with the row min.
//
// Each expert reads the graph through its own self-attention pooling vector
// theta: Z = tanh(D^-1/2 (A+I) D^-1/2 X theta), keep the top ceil(kappa N)
// nodes, output the mean of their rows each scaled by its score.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moce/common.hpp"
#include "moce/encoder.hpp"
#include "moce/nn.hpp"
#include "moce/tensor.hpp"

namespace moce::mixture {

using ad::Tensor;
using nn::GraphBatch;

class BadK : public Error {
 public:
  using Error::Error;
};

/// Indices of the k largest entries, largest first; ties go to the lower index.
template <class Real>
std::vector<std::size_t> top_k_indices(std::span<const Real> v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

/// For each position, the index whose value Gamma places there: itself when
/// ranked in the top k_t, otherwise the (first) argmin.
template <class Real>
std::vector<std::size_t> gamma_sources(std::span<const Real> v, std::size_t k_t) {
  if (k_t < 1 || k_t > v.size())
    throw BadK("gamma_mask: k_t=" + std::to_string(k_t) + " outside [1, " +
               std::to_string(v.size()) + "]");
  const auto keep = top_k_indices(v, k_t);
  const std::size_t argmin =
      static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
  std::vector<std::size_t> src(v.size(), argmin);
  for (std::size_t j : keep) src[j] = j;
  return src;
}

template <class Real>
std::vector<Real> gamma_mask(std::span<const Real> v, std::size_t k_t) {
  const auto src = gamma_sources(v, k_t);
  std::vector<Real> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[src[j]];
  return out;
}

/// Row-wise Gamma on a (B x m) tensor as a differentiable gather.
template <class Real>
Tensor<Real> gamma_mask(const Tensor<Real>& scores, std::size_t k_t) {
  const std::size_t b = scores.rows(), m = scores.cols();
  std::vector<std::size_t> flat(b * m);
  for (std::size_t i = 0; i < b; ++i) {
    const auto src = gamma_sources(scores.values().subspan(i * m, m), k_t);
    for (std::size_t j = 0; j < m; ++j) flat[i * m + j] = i * m + src[j];
  }
  return ad::take(scores, std::span<const std::size_t>(flat), scores.shape());
}

template <class Real>
struct RouterParams {
  Tensor<Real> w_mu1, w_mu2, w_sigma1, w_sigma2;
  std::size_t k_s = 4;
  std::size_t k_t = 12;
  std::size_t num_experts = 60;
  double sigma_floor = 1e-3;

  static RouterParams create(nn::ParamStore<Real>& ps, const std::string& prefix,
                             std::size_t feat_dim, std::size_t task_dim, std::size_t m,
                             std::size_t k_s, std::size_t k_t) {
    if (!(1 <= k_s && k_s <= k_t && k_t <= m))
      throw BadK("router requires 1 <= k_s <= k_t <= m");
    RouterParams r;
    r.w_mu1 = ps.xavier(prefix + ".w_mu1", feat_dim, m);
    r.w_mu2 = ps.xavier(prefix + ".w_mu2", task_dim, m);
    r.w_sigma1 = ps.xavier(prefix + ".w_sigma1", feat_dim, m);
    r.w_sigma2 = ps.xavier(prefix + ".w_sigma2", task_dim, m);
    r.k_s = k_s;
    r.k_t = k_t;
    r.num_experts = m;
    return r;
  }
};

/// Per-sample routing record.
struct GateResult {
  std::vector<double> mu, sigma, h;
  std::vector<double> gates;          // m entries, exactly k_s nonzero
  std::vector<std::size_t> selected;  // k_s indices, highest h first
  std::vector<double> p_choose;
};

/// z(sample, expert); an empty function means noise off.
using NoiseFn = std::function<double(std::size_t, std::size_t)>;

template <class Real>
struct RouteResult {
  Tensor<Real> mu, sigma, h;     // B x m
  Tensor<Real> selected_gates;   // B x k_s, row i ordered like selected
  Tensor<Real> gates;            // B x m
  Tensor<Real> p_choose;         // B x m
  std::vector<std::size_t> selected;  // B x k_s expert indices
  std::size_t k_s = 0;

  std::size_t batch() const { return mu.rows(); }
  std::size_t experts() const { return mu.cols(); }
};

/// Flat indices of the k-th largest entry of each row excluding position j;
/// npos when fewer than k other entries exist.
inline std::vector<std::size_t> kth_excluding_indices(std::span<const std::size_t> order_row,
                                                      std::size_t m, std::size_t k,
                                                      std::size_t row_base) {
  std::vector<std::size_t> rank(m);
  for (std::size_t r = 0; r < m; ++r) rank[order_row[r]] = r;
  std::vector<std::size_t> out(m, static_cast<std::size_t>(-1));
  for (std::size_t j = 0; j < m; ++j) {
    // Among the others, the k-th largest sits at overall rank k-1 if j ranks
    // below it, otherwise at rank k.
    const std::size_t r = rank[j] < k ? k : k - 1;
    if (r < m) out[j] = row_base + order_row[r];
  }
  return out;
}

template <class Real>
RouteResult<Real> route(const Tensor<Real>& x_hat, const Tensor<Real>& t,
                        const RouterParams<Real>& r, const NoiseFn& noise = {}) {
  const std::size_t b = x_hat.rows();
  const std::size_t m = r.num_experts;
  const std::size_t k = r.k_s;
  if (t.rows() != b)
    throw ShapeMismatch("route: " + std::to_string(b) + " samples but " +
                        std::to_string(t.rows()) + " task rows");
  RouteResult<Real> out;
  out.k_s = k;
  out.mu = ad::add(gamma_mask(ad::matmul(x_hat, r.w_mu1), r.k_t), ad::matmul(t, r.w_mu2));
  out.sigma = ad::add_scalar(
      ad::softplus(ad::add(gamma_mask(ad::matmul(x_hat, r.w_sigma1), r.k_t), ad::matmul(t, r.w_sigma2))),
      static_cast<Real>(r.sigma_floor));
  if (noise) {
    std::vector<Real> z(b * m);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < m; ++j) z[i * m + j] = static_cast<Real>(noise(i, j));
    out.h = ad::add(out.mu, ad::mul(out.sigma, Tensor<Real>::from({b, m}, std::move(z))));
  } else {
    out.h = out.mu;
  }

  const auto hv = out.h.values();
  std::vector<std::size_t> sel_flat(b * k), thr_flat;
  thr_flat.reserve(b * m);
  out.selected.resize(b * k);
  bool have_threshold = true;
  for (std::size_t i = 0; i < b; ++i) {
    const auto order = top_k_indices(hv.subspan(i * m, m), m);
    for (std::size_t s = 0; s < k; ++s) {
      out.selected[i * k + s] = order[s];
      sel_flat[i * k + s] = i * m + order[s];
    }
    const auto thr = kth_excluding_indices(order, m, k, i * m);
    for (std::size_t x : thr) have_threshold = have_threshold && x != static_cast<std::size_t>(-1);
    thr_flat.insert(thr_flat.end(), thr.begin(), thr.end());
  }
  out.selected_gates = ad::softmax(ad::take(out.h, std::span<const std::size_t>(sel_flat), {b, k}));
  out.gates = ad::reshape(
      ad::scatter_segment_sum(ad::reshape(out.selected_gates, {b * k, 1}),
                              std::span<const std::size_t>(sel_flat), b * m),
      {b, m});
  if (have_threshold) {
    auto thr = ad::take(out.h, std::span<const std::size_t>(thr_flat), {b, m});
    out.p_choose = ad::normal_cdf(ad::div(ad::sub(out.mu, thr), out.sigma));
  } else {
    // k_s == m: every expert is always chosen.
    out.p_choose = Tensor<Real>::full({b, m}, Real(1));
  }
  return out;
}

template <class Real>
std::vector<GateResult> gate_results(const RouteResult<Real>& r) {
  const std::size_t b = r.batch(), m = r.experts(), k = r.k_s;
  std::vector<GateResult> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    auto row = [&](const Tensor<Real>& t) {
      return std::vector<double>(t.values().begin() + i * m, t.values().begin() + (i + 1) * m);
    };
    out[i].mu = row(r.mu);
    out[i].sigma = row(r.sigma);
    out[i].h = row(r.h);
    out[i].gates = row(r.gates);
    out[i].p_choose = row(r.p_choose);
    out[i].selected.assign(r.selected.begin() + i * k, r.selected.begin() + (i + 1) * k);
  }
  return out;
}

/// Gate vector for fixed scores h: softmax over the k largest, zeros elsewhere.
inline std::vector<double> gates_from_scores(std::span<const double> h, std::size_t k) {
  const auto sel = top_k_indices(h, k);
  std::vector<double> picked;
  for (std::size_t j : sel) picked.push_back(h[j]);
  auto sm = ad::softmax(Tensor<double>::from({1, sel.size()}, picked));
  std::vector<double> g(h.size(), 0.0);
  for (std::size_t s = 0; s < sel.size(); ++s) g[sel[s]] = sm[s];
  return g;
}

// ---------------------------------------------------------------------------
// Experts

template <class Real>
struct ExpertParams {
  Tensor<Real> theta;  // d x 1 attention vector
  Tensor<Real> w1, b1, w2, b2;
  double pool_ratio = 0.5;

  static ExpertParams create(nn::ParamStore<Real>& ps, const std::string& prefix,
                             std::size_t dim, double pool_ratio) {
    if (!(pool_ratio > 0.0 && pool_ratio <= 1.0))
      throw Error("pool ratio kappa must lie in (0, 1]");
    ExpertParams e;
    e.theta = ps.uniform(prefix + ".theta", {dim, 1}, std::sqrt(6.0 / double(dim + 1)));
    e.w1 = ps.xavier(prefix + ".w1", dim, dim);
    e.b1 = ps.zeros(prefix + ".b1", {dim});
    e.w2 = ps.xavier(prefix + ".w2", dim, 1);
    e.b2 = ps.zeros(prefix + ".b2", {1});
    e.pool_ratio = pool_ratio;
    return e;
  }

  /// d -> d -> 1 perceptron producing a logit per input row.
  Tensor<Real> predict(const Tensor<Real>& x) const {
    auto hidden = ad::relu(ad::add_bias(ad::matmul(x, w1), b1));
    return ad::add_bias(ad::matmul(hidden, w2), b2);
  }
};

inline std::size_t pooled_node_count(double kappa, std::size_t n) {
  const auto c = static_cast<std::size_t>(std::ceil(kappa * double(n) - 1e-9));
  return std::clamp<std::size_t>(c, 1, n);
}

/// Smoothed attention scores for every node under every expert: (N x m).
template <class Real>
Tensor<Real> sag_scores(const Tensor<Real>& nodes, const GraphBatch<Real>& batch,
                        const Tensor<Real>& thetas) {
  return ad::tanh(ad::sparse_matmul(batch.norm_adj, ad::matmul(nodes, thetas)));
}

struct PoolPair {
  std::size_t graph;
  std::size_t expert;
};

/// Score-weighted mean over the top ceil(kappa N) nodes for each (graph,
/// expert) pair; `scores` comes from sag_scores. Returns (pairs x d).
template <class Real>
Tensor<Real> sag_pool(const Tensor<Real>& nodes, const Tensor<Real>& scores,
                      const GraphBatch<Real>& batch, std::span<const PoolPair> pairs,
                      std::span<const double> pool_ratio_of_expert) {
  const std::size_t m = scores.cols();
  std::vector<std::size_t> node_idx, score_idx, pair_id;
  std::vector<Real> weight;
  std::vector<Real> col;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [g, j] = pairs[p];
    const std::size_t off = batch.node_offset[g], n = batch.graph_size(g);
    col.resize(n);
    for (std::size_t v = 0; v < n; ++v) col[v] = scores.at(off + v, j);
    const std::size_t keep = pooled_node_count(pool_ratio_of_expert[j], n);
    for (std::size_t v : top_k_indices(std::span<const Real>(col), keep)) {
      node_idx.push_back(off + v);
      score_idx.push_back((off + v) * m + j);
      pair_id.push_back(p);
      weight.push_back(Real(1) / Real(keep));
    }
  }
  const std::size_t q = node_idx.size();
  auto picked = ad::gather_rows(nodes, std::span<const std::size_t>(node_idx));
  auto s = ad::take(scores, std::span<const std::size_t>(score_idx), {q, 1});
  auto scaled = ad::mul(picked, ad::mul(s, Tensor<Real>::column(std::move(weight))));
  return ad::scatter_segment_sum(scaled, std::span<const std::size_t>(pair_id), pairs.size());
}

/// Projection of a single graph (batch of one) through one expert: (1 x d).
template <class Real>
Tensor<Real> sag_project(const Tensor<Real>& nodes, const GraphBatch<Real>& graph,
                         const ExpertParams<Real>& expert) {
  if (graph.num_graphs != 1 || nodes.rows() == 0)
    throw encoder::EmptyGraph("sag_project expects exactly one non-empty graph");
  auto scores = sag_scores(nodes, graph, expert.theta);
  const PoolPair pair{0, 0};
  const double kappa = expert.pool_ratio;
  return sag_pool(nodes, scores, graph, std::span<const PoolPair>(&pair, 1),
                  std::span<const double>(&kappa, 1));
}

template <class Real>
struct LayerOutput {
  RouteResult<Real> route;
  Tensor<Real> pair_logits;  // (B * k_s) x 1, sample-major like route.selected
  Tensor<Real> output;       // B x 1 weighted vote
  Tensor<Real> thetas;       // d x m
};

/// One processing layer's predictor: route on the mean-pooled graph, project
/// each sample through its selected experts and take the gate-weighted vote.
template <class Real>
LayerOutput<Real> layer_forward(const GraphBatch<Real>& batch, const Tensor<Real>& nodes,
                                const std::vector<ExpertParams<Real>>& experts,
                                const RouterParams<Real>& router, const NoiseFn& noise = {}) {
  if (experts.size() != router.num_experts)
    throw ShapeMismatch("layer_forward: " + std::to_string(experts.size()) +
                        " experts for a router over " + std::to_string(router.num_experts));
  LayerOutput<Real> out;
  const std::size_t b = batch.num_graphs, k = router.k_s, m = experts.size();
  auto x_hat = encoder::global_mean_pool(nodes, batch);
  out.route = route(x_hat, batch.task_embedding, router, noise);

  std::vector<Tensor<Real>> cols;
  std::vector<double> kappa;
  for (const auto& e : experts) {
    cols.push_back(e.theta);
    kappa.push_back(e.pool_ratio);
  }
  out.thetas = ad::concat_cols(cols);
  auto scores = sag_scores(nodes, batch, out.thetas);

  std::vector<PoolPair> pairs(b * k);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < k; ++s) pairs[i * k + s] = {i, out.route.selected[i * k + s]};
  auto pooled = sag_pool(nodes, scores, batch, std::span<const PoolPair>(pairs),
                         std::span<const double>(kappa));

  // Run each expert once on all of its rows, then restore sample-major order.
  std::vector<Tensor<Real>> chunks;
  std::vector<std::size_t> position(pairs.size());
  std::size_t placed = 0;
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < pairs.size(); ++p)
      if (pairs[p].expert == j) rows.push_back(p);
    if (rows.empty()) continue;
    chunks.push_back(experts[j].predict(ad::gather_rows(pooled, std::span<const std::size_t>(rows))));
    for (std::size_t p : rows) position[p] = placed++;
  }
  out.pair_logits = ad::gather_rows(ad::concat_rows(chunks), std::span<const std::size_t>(position));
  out.output = ad::sum(ad::mul(out.route.selected_gates, ad::reshape(out.pair_logits, {b, k})), 1);
  return out;
}

// ---------------------------------------------------------------------------
// Output integration

template <class Real>
struct IntegratorParams {
  Tensor<Real> w;  // e_t x L
  Tensor<Real> b;  // L

  static IntegratorParams create(nn::ParamStore<Real>& ps, const std::string& prefix,
                                 std::size_t task_dim, std::size_t layers) {
    IntegratorParams p;
    p.w = ps.zeros(prefix + ".w", {task_dim, layers});
    p.b = ps.zeros(prefix + ".b", {layers});
    return p;
  }
};

template <class Real>
struct Integrated {
  Tensor<Real> logits;   // B x 1
  Tensor<Real> weights;  // B x L
};

/// weights = softmax(t W + b) over layers; logit = sum_l weights_l * o_l.
template <class Real>
Integrated<Real> integrate_outputs(const Tensor<Real>& per_layer, const Tensor<Real>& t,
                                   const IntegratorParams<Real>& p) {
  if (per_layer.cols() != p.b.numel() || per_layer.rows() != t.rows())
    throw ShapeMismatch("integrate_outputs: outputs " + ad::shape_str(per_layer.shape()) +
                        " vs weights over " + std::to_string(p.b.numel()) + " layers");
  Integrated<Real> out;
  out.weights = ad::softmax(ad::add_bias(ad::matmul(t, p.w), p.b));
  out.logits = ad::sum(ad::mul(out.weights, per_layer), 1);
  return out;
}

}  // namespace moce::mixture
