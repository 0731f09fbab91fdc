// SPDX-License-Identifier: Apache-2.0
//
// Joint multi-task training: AdamW with cosine annealing, rank-based AUC-ROC,
// per-epoch metrics and the delimited metrics log.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <cstdio>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moce/common.hpp"
#include "moce/dataset.hpp"
#include "moce/losses.hpp"
#include "moce/model.hpp"
#include "moce/tasks.hpp"

namespace moce::train {

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
  double lr = 0.01;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update over every parameter that holds a gradient:
///   p <- p - lr*wd*p;  p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws NonFiniteGradient before touching any state if a gradient entry is
/// NaN or infinite.
template <class Real>
void adamw_step(nn::ParamStore<Real>& store, OptimizerState& st) {
  auto& params = store.params();
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NonFiniteGradient("non-finite gradient in " + name);
  }
  if (st.m.size() != params.size()) {
    st.m.assign(params.size(), {});
    st.v.assign(params.size(), {});
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = params[k].second;
    auto vals = t.mutable_values();
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != vals.size()) {
      m.assign(vals.size(), 0.0);
      v.assign(vals.size(), 0.0);
    }
    const auto grad = t.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = t.has_grad() ? static_cast<double>(grad[i]) : 0.0;
      double p = static_cast<double>(vals[i]);
      p -= st.lr * st.weight_decay * p;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      p -= st.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
      vals[i] = static_cast<Real>(p);
    }
  }
}

struct ScheduleConfig {
  std::uint64_t total_steps = 1;
  double min_lr_fraction = 0.0;
};

inline double cosine_lr(std::uint64_t step, const ScheduleConfig& s, double base_lr) {
  const double total = double(std::max<std::uint64_t>(s.total_steps, 1));
  const double t = std::min(double(step), total);
  const double lo = base_lr * s.min_lr_fraction;
  return lo + 0.5 * (base_lr - lo) * (1.0 + std::cos(std::numbers::pi * t / total));
}

// ---------------------------------------------------------------------------
// AUC

/// Mann-Whitney AUC with average ranks for ties. Empty when either class is
/// absent.
inline std::optional<double> auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeMismatch("auc_roc: score/label length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (pos_rank_sum - double(n_pos) * double(n_pos + 1) / 2.0) /
         (double(n_pos) * double(n_neg));
}

// ---------------------------------------------------------------------------
// Configuration and metrics

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::size_t num_experts = 60;
  std::size_t k_s = 4;
  std::size_t k_t = 12;
  std::size_t embed_dim = 300;
  std::size_t num_gnn_layers = 6;
  std::size_t num_processing_layers = 2;
  std::size_t task_dim = 64;
  double pool_ratio = 0.5;
  double sigma_floor = 1e-3;
  double beta = 0.1;
  double lr = 0.01;
  double weight_decay = 0.01;
  double min_lr_fraction = 0.0;
  bool use_att = true;
  bool use_exp = true;
  bool use_imp = true;
  bool use_lod = true;
  bool exp_mean = false;
  std::string precision = "float64";

  ModelConfig model() const {
    ModelConfig m;
    m.embed_dim = embed_dim;
    m.num_gnn_layers = num_gnn_layers;
    m.num_processing_layers = num_processing_layers;
    m.num_experts = num_experts;
    m.k_s = k_s;
    m.k_t = k_t;
    m.task_dim = task_dim;
    m.pool_ratio = pool_ratio;
    m.sigma_floor = sigma_floor;
    return m;
  }

  losses::LossConfig loss() const {
    return {beta, use_att, use_exp, use_imp, use_lod, exp_mean};
  }

  void validate() const {
    model().validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (min_lr_fraction < 0.0 || min_lr_fraction > 1.0)
      throw ConfigError("min_lr_fraction must lie in [0, 1]");
    if (precision != "float64" && precision != "float32")
      throw ConfigError("precision must be float64 or float32");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  std::map<std::string, std::optional<double>> task_auc;
  std::optional<double> mean_auc;
  losses::LossBreakdown loss;  // batch averages
  double max_gate_share = 0.0;  // mean over samples and layers
  double importance_cv = 0.0;   // mean over layers, unsquared
  double load_cv = 0.0;
  std::size_t samples = 0;
  std::size_t skipped_batches = 0;
};

inline void write_metrics_header(std::ostream& out) {
  out << "epoch,task_id,split,auc,base,att,exp,imp,lod,max_gate_share\n";
}

/// One row per task plus a `mean` row; an undefined AUC is written as NA.
inline void write_metrics_rows(std::ostream& out, const EpochMetrics& m) {
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  auto row = [&](const std::string& task, const std::optional<double>& auc) {
    out << m.epoch << ',' << task << ',' << m.split << ',' << fmt(auc) << ','
        << fmt(m.loss.base) << ',' << fmt(m.loss.att) << ',' << fmt(m.loss.exp) << ','
        << fmt(m.loss.imp) << ',' << fmt(m.loss.lod) << ',' << fmt(m.max_gate_share) << '\n';
  };
  for (const auto& [task, auc] : m.task_auc) row(task, auc);
  row("mean", m.mean_auc);
}

// ---------------------------------------------------------------------------
// Trainer

struct Prediction {
  double logit = 0.0;
  double probability = 0.0;
};

template <class Real>
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), model_((cfg.validate(), cfg.model()), cfg.seed) {
    opt_.lr = cfg.lr;
    opt_.weight_decay = cfg.weight_decay;
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  GnnMoce<Real>& model() noexcept { return model_; }
  const GnnMoce<Real>& model() const noexcept { return model_; }
  OptimizerState& optimizer() noexcept { return opt_; }
  const OptimizerState& optimizer() const noexcept { return opt_; }
  std::size_t epochs_done() const noexcept { return epochs_done_; }
  void set_epochs_done(std::size_t e) noexcept { epochs_done_ = e; }

  std::uint64_t steps_per_epoch(std::size_t n_train) const {
    return (n_train + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  /// One pass over `train` in a seed- and epoch-determined order, noise on.
  /// The returned metrics carry averaged losses and gate statistics; AUC is
  /// computed on the training scores of that pass.
  EpochMetrics train_epoch(const std::vector<const DatasetRecord*>& train, const TaskTable& tasks,
                           std::size_t total_epochs) {
    EpochMetrics em;
    em.epoch = epochs_done_ + 1;
    em.split = "train";
    if (train.empty()) throw Error("train_epoch: no training records");
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(hash_combine(cfg_.seed, epochs_done_));
    std::shuffle(order.begin(), order.end(), rng);

    ScheduleConfig sched{std::max<std::uint64_t>(1, steps_per_epoch(train.size()) * total_epochs),
                         cfg_.min_lr_fraction};
    Accumulator acc;
    const auto loss_cfg = cfg_.loss();
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      std::vector<const DatasetRecord*> recs;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg_.batch_size); ++i)
        recs.push_back(train[order[i]]);
      auto batch = make_batch<Real>(recs, tasks);
      const std::uint64_t step = opt_.step;
      const std::uint64_t seed = cfg_.seed;
      LayerNoise noise = [seed, step](std::size_t l, std::size_t i, std::size_t j) {
        return counter_normal(hash_combine(seed, l), step, i, j);
      };
      model_.params().zero_grad();
      ad::Tape<Real> tape;
      auto out = model_.forward(batch, noise);
      auto terms = compute_losses(out, batch, loss_cfg);
      auto [loss, breakdown] = losses::overall_loss(terms, loss_cfg.beta);
      tape.backward(loss);
      opt_.lr = cosine_lr(opt_.step, sched, cfg_.lr);
      try {
        adamw_step(model_.params(), opt_);
      } catch (const NonFiniteGradient&) {
        ++em.skipped_batches;
      }
      acc.add(out, batch, recs, breakdown);
    }
    model_.params().zero_grad();
    ++epochs_done_;
    acc.finish(em);
    return em;
  }

  /// Noise-off scoring of `records`; per-task AUC and gate statistics.
  EpochMetrics evaluate(const std::vector<const DatasetRecord*>& records, const TaskTable& tasks,
                        const std::string& split = "valid") const {
    EpochMetrics em;
    em.epoch = epochs_done_;
    em.split = split;
    Accumulator acc;
    const auto loss_cfg = cfg_.loss();
    for (std::size_t start = 0; start < records.size(); start += cfg_.batch_size) {
      std::vector<const DatasetRecord*> recs(
          records.begin() + static_cast<std::ptrdiff_t>(start),
          records.begin() + static_cast<std::ptrdiff_t>(std::min(records.size(), start + cfg_.batch_size)));
      auto batch = make_batch<Real>(recs, tasks);
      auto out = model_.forward(batch);
      auto terms = compute_losses(out, batch, loss_cfg);
      acc.add(out, batch, recs, losses::overall_loss(terms, loss_cfg.beta).second);
    }
    acc.finish(em);
    return em;
  }

  std::vector<Prediction> predict(const std::vector<const DatasetRecord*>& records,
                                  const TaskTable& tasks) const {
    std::vector<Prediction> out;
    for (std::size_t start = 0; start < records.size(); start += cfg_.batch_size) {
      std::vector<const DatasetRecord*> recs(
          records.begin() + static_cast<std::ptrdiff_t>(start),
          records.begin() + static_cast<std::ptrdiff_t>(std::min(records.size(), start + cfg_.batch_size)));
      auto batch = make_batch<Real>(recs, tasks);
      const auto res = model_.forward(batch);
      for (Real z : res.logits().values()) {
        const double l = static_cast<double>(z);
        out.push_back({l, 1.0 / (1.0 + std::exp(-l))});
      }
    }
    return out;
  }

 private:
  struct Accumulator {
    std::map<std::string, std::vector<double>> scores;
    std::map<std::string, std::vector<int>> labels;
    losses::LossBreakdown sum;
    std::size_t batches = 0, samples = 0, gate_rows = 0, layer_batches = 0;
    double gate_share = 0.0, imp_cv = 0.0, lod_cv = 0.0;

    void add(const ModelOutput<Real>& out, const nn::GraphBatch<Real>& batch,
             const std::vector<const DatasetRecord*>& recs, const losses::LossBreakdown& b) {
      const auto logits = out.logits().values();
      for (std::size_t i = 0; i < recs.size(); ++i) {
        scores[recs[i]->task_id].push_back(static_cast<double>(logits[i]));
        labels[recs[i]->task_id].push_back(batch.label_values[i]);
      }
      for (const auto& layer : out.layers) {
        const auto& g = layer.route.gates;
        const std::size_t m = g.cols();
        for (std::size_t i = 0; i < g.rows(); ++i) {
          Real best = 0;
          for (std::size_t j = 0; j < m; ++j) best = std::max(best, g.at(i, j));
          gate_share += static_cast<double>(best);
          ++gate_rows;
        }
        imp_cv += std::sqrt(static_cast<double>(
            losses::importance_loss(layer.route.gates).item()));
        lod_cv += static_cast<double>(losses::load_loss(layer.route.p_choose).item());
        ++layer_batches;
      }
      sum.base += b.base;
      sum.att += b.att;
      sum.exp += b.exp;
      sum.imp += b.imp;
      sum.lod += b.lod;
      sum.col += b.col;
      sum.overall += b.overall;
      sum.beta = b.beta;
      ++batches;
      samples += recs.size();
    }

    void finish(EpochMetrics& em) const {
      double auc_sum = 0.0;
      std::size_t auc_n = 0;
      for (const auto& [task, s] : scores) {
        const auto a = auc_roc(s, labels.at(task));
        em.task_auc[task] = a;
        if (a) {
          auc_sum += *a;
          ++auc_n;
        }
      }
      if (auc_n) em.mean_auc = auc_sum / double(auc_n);
      if (batches) {
        const double n = double(batches);
        em.loss = {sum.base / n, sum.att / n, sum.exp / n, sum.imp / n,
                   sum.lod / n,  sum.col / n, sum.overall / n, sum.beta};
      }
      if (gate_rows) em.max_gate_share = gate_share / double(gate_rows);
      if (layer_batches) {
        em.importance_cv = imp_cv / double(layer_batches);
        em.load_cv = lod_cv / double(layer_batches);
      }
      em.samples = samples;
    }
  };

  TrainConfig cfg_;
  GnnMoce<Real> model_;
  OptimizerState opt_;
  std::size_t epochs_done_ = 0;
};

}  // namespace moce::train
