// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: base BCE on the integrated logit plus the collaborative
// terms (attention cosine, expert-specific, importance and load balance).

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "moce/common.hpp"
#include "moce/mixture.hpp"
#include "moce/tensor.hpp"

namespace moce::losses {

using ad::Tensor;

class BadBeta : public Error {
 public:
  using Error::Error;
};

inline constexpr double kCvMeanEps = 1e-10;

/// Scalar stable BCE from a logit.
inline double bce(double logit, int label) {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

/// Mean pairwise dot product of the unit-normalized attention vectors, the
/// diagonal included: (1/M^2) sum_i sum_j u_i.u_j = |sum_i u_i|^2 / M^2.
/// `thetas` is (d x M), one column per expert. A zero column is replaced by
/// the first basis vector and reported in `warnings`.
template <class Real>
Tensor<Real> attention_cosine_loss(const Tensor<Real>& thetas,
                                   std::vector<std::string>* warnings = nullptr) {
  const std::size_t d = thetas.rows(), m = thetas.cols();
  auto norms = ad::sqrt(ad::sum(ad::mul(thetas, thetas), 0));  // 1 x M
  std::vector<std::size_t> zero_cols;
  for (std::size_t j = 0; j < m; ++j)
    if (norms[j] == Real(0)) zero_cols.push_back(j);
  // Work on the (M x d) row layout so norms broadcast as a column.
  std::vector<std::size_t> transpose(d * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t r = 0; r < d; ++r) transpose[j * d + r] = r * m + j;
  auto rows = ad::take(thetas, std::span<const std::size_t>(transpose), {m, d});
  auto row_norms = ad::reshape(norms, {m, 1});
  Tensor<Real> unit;
  if (zero_cols.empty()) {
    unit = ad::div(rows, row_norms);
  } else {
    std::vector<Real> fix(m, Real(0)), basis(m * d, Real(0));
    for (std::size_t j : zero_cols) {
      fix[j] = Real(1);
      basis[j * d] = Real(1);
      if (warnings)
        warnings->push_back("expert " + std::to_string(j) +
                            " has a zero attention vector; using a basis vector");
    }
    auto guarded = ad::add(row_norms, Tensor<Real>::column(std::move(fix)));
    unit = ad::add(ad::div(rows, guarded), Tensor<Real>::from({m, d}, std::move(basis)));
  }
  auto total = ad::sum(unit, 0);  // 1 x d
  return ad::scale(ad::sum(ad::mul(total, total)), Real(1) / Real(m * m));
}

/// Sum over assigned (expert, sample) pairs of BCE(expert logit, label).
/// `pair_labels` aligns with `pair_logits`; both are (P x 1).
template <class Real>
Tensor<Real> expert_specific_loss(const Tensor<Real>& pair_logits, const Tensor<Real>& pair_labels,
                                  bool mean_normalize = false) {
  if (pair_logits.numel() == 0) return Tensor<Real>::scalar(Real(0));
  auto total = ad::sum(ad::bce_with_logits(pair_logits, pair_labels));
  return mean_normalize ? ad::scale(total, Real(1) / Real(pair_logits.numel())) : total;
}

/// Coefficient of variation (population std over eps-guarded mean) of a
/// (1 x m) row.
template <class Real>
Tensor<Real> coefficient_of_variation(const Tensor<Real>& v, bool squared) {
  auto mu = ad::mean(v);
  auto dev = ad::sub(v, mu);
  auto var = ad::mean(ad::mul(dev, dev));
  auto denom = ad::add_scalar(mu, static_cast<Real>(kCvMeanEps));
  if (squared) return ad::div(var, ad::mul(denom, denom));
  return ad::div(ad::sqrt(var), denom);
}

/// CV^2 of per-expert gate mass summed over the batch; `gates` is (B x m).
template <class Real>
Tensor<Real> importance_loss(const Tensor<Real>& gates, Real beta_scale = Real(1)) {
  return ad::scale(coefficient_of_variation(ad::sum(gates, 0), true), beta_scale);
}

/// CV of per-expert selection probability summed over the batch; (B x m).
template <class Real>
Tensor<Real> load_loss(const Tensor<Real>& p_choose, Real beta_scale = Real(1)) {
  return ad::scale(coefficient_of_variation(ad::sum(p_choose, 0), false), beta_scale);
}

namespace detail {
inline Tensor<double> stack_rows(std::span<const mixture::GateResult> gates, bool use_p) {
  if (gates.empty()) throw Error("empty gate batch");
  const std::size_t m = gates[0].gates.size();
  std::vector<double> v;
  for (const auto& g : gates) {
    const auto& src = use_p ? g.p_choose : g.gates;
    if (src.size() != m) throw ShapeMismatch("ragged gate batch");
    v.insert(v.end(), src.begin(), src.end());
  }
  return Tensor<double>::from({gates.size(), m}, std::move(v));
}
}  // namespace detail

inline double importance_loss(std::span<const mixture::GateResult> gates, double beta_scale = 1.0) {
  return importance_loss(detail::stack_rows(gates, false), beta_scale).item();
}

inline double load_loss(std::span<const mixture::GateResult> gates, double beta_scale = 1.0) {
  return load_loss(detail::stack_rows(gates, true), beta_scale).item();
}

struct LossConfig {
  double beta = 0.1;
  bool use_att = true;
  bool use_exp = true;
  bool use_imp = true;
  bool use_lod = true;
  bool exp_mean = false;
};

inline void check_beta(double beta) {
  if (!(beta > 0.0 && beta <= 1.0))
    throw BadBeta("beta must lie in (0, 1], got " + std::to_string(beta));
}

struct LossBreakdown {
  double base = 0, att = 0, exp = 0, imp = 0, lod = 0, col = 0, overall = 0, beta = 0;
};

template <class Real>
struct LossTerms {
  Tensor<Real> base, att, exp, imp, lod;
};

/// overall = base + beta * (att + exp + imp + lod).
template <class Real>
std::pair<Tensor<Real>, LossBreakdown> overall_loss(const LossTerms<Real>& t, double beta) {
  check_beta(beta);
  auto col = ad::add(ad::add(t.att, t.exp), ad::add(t.imp, t.lod));
  auto overall = ad::add(t.base, ad::scale(col, static_cast<Real>(beta)));
  LossBreakdown b;
  b.base = t.base.item();
  b.att = t.att.item();
  b.exp = t.exp.item();
  b.imp = t.imp.item();
  b.lod = t.lod.item();
  b.col = col.item();
  b.overall = overall.item();
  b.beta = beta;
  return {overall, b};
}

}  // namespace moce::losses
