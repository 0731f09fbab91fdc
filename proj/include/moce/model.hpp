// SPDX-License-Identifier: Apache-2.0
//
// GNN-MoCE: L stacked processing layers, each a GIN encoder followed by a
// mixture-of-experts predictor, with task-weighted integration of the
// per-layer logits.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moce/common.hpp"
#include "moce/dataset.hpp"
#include "moce/encoder.hpp"
#include "moce/losses.hpp"
#include "moce/mixture.hpp"
#include "moce/nn.hpp"
#include "moce/tasks.hpp"
#include "moce/tensor.hpp"

namespace moce {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  std::size_t embed_dim = 300;
  std::size_t num_gnn_layers = 6;
  std::size_t num_processing_layers = 2;
  std::size_t num_experts = 60;
  std::size_t k_s = 4;
  std::size_t k_t = 12;
  std::size_t task_dim = 64;
  double pool_ratio = 0.5;
  double sigma_floor = 1e-3;

  void validate() const {
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (num_gnn_layers < 1) throw ConfigError("num_gnn_layers must be >= 1");
    if (num_processing_layers < 1) throw ConfigError("num_processing_layers must be >= 1");
    if (task_dim < 1) throw ConfigError("task_dim must be >= 1");
    if (!(1 <= k_s && k_s <= k_t && k_t <= num_experts))
      throw ConfigError("routing requires 1 <= k_s <= k_t <= num_experts (got k_s=" +
                        std::to_string(k_s) + ", k_t=" + std::to_string(k_t) +
                        ", num_experts=" + std::to_string(num_experts) + ")");
    if (!(pool_ratio > 0.0 && pool_ratio <= 1.0))
      throw ConfigError("pool_ratio kappa must lie in (0, 1]");
    if (!(sigma_floor > 0.0)) throw ConfigError("sigma_floor must be positive");
  }
};

/// z(layer, sample, expert); empty means noise off.
using LayerNoise = std::function<double(std::size_t, std::size_t, std::size_t)>;

template <class Real>
struct ProcessingLayer {
  std::vector<encoder::GinLayer<Real>> gnn;
  std::vector<mixture::ExpertParams<Real>> experts;
  mixture::RouterParams<Real> router;
};

template <class Real>
struct ModelOutput {
  std::vector<mixture::LayerOutput<Real>> layers;
  mixture::Integrated<Real> integrated;

  const ad::Tensor<Real>& logits() const { return integrated.logits; }
};

template <class Real>
class GnnMoce {
 public:
  GnnMoce(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    embedder_ = encoder::NodeEmbedder<Real>::create(params_, "embed", d);
    for (std::size_t l = 0; l < cfg_.num_processing_layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      ProcessingLayer<Real> layer;
      for (std::size_t g = 0; g < cfg_.num_gnn_layers; ++g)
        layer.gnn.push_back(
            encoder::GinLayer<Real>::create(params_, p + ".gin" + std::to_string(g), d));
      for (std::size_t j = 0; j < cfg_.num_experts; ++j)
        layer.experts.push_back(mixture::ExpertParams<Real>::create(
            params_, p + ".expert" + std::to_string(j), d, cfg_.pool_ratio));
      layer.router = mixture::RouterParams<Real>::create(params_, p + ".router", d, cfg_.task_dim,
                                                         cfg_.num_experts, cfg_.k_s, cfg_.k_t);
      layer.router.sigma_floor = cfg_.sigma_floor;
      layers_.push_back(std::move(layer));
    }
    integrator_ = mixture::IntegratorParams<Real>::create(params_, "integrate", cfg_.task_dim,
                                                          cfg_.num_processing_layers);
  }

  // Parameters are shared tensor handles; a copy would alias them.
  GnnMoce(const GnnMoce&) = delete;
  GnnMoce& operator=(const GnnMoce&) = delete;
  GnnMoce(GnnMoce&&) noexcept = default;
  GnnMoce& operator=(GnnMoce&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  nn::ParamStore<Real>& params() noexcept { return params_; }
  const nn::ParamStore<Real>& params() const noexcept { return params_; }
  const std::vector<ProcessingLayer<Real>>& layers() const noexcept { return layers_; }
  const mixture::IntegratorParams<Real>& integrator() const noexcept { return integrator_; }

  ModelOutput<Real> forward(const nn::GraphBatch<Real>& batch, const LayerNoise& noise = {}) const {
    if (!batch.task_embedding.defined() || batch.task_embedding.cols() != cfg_.task_dim)
      throw ShapeMismatch("forward: batch task embeddings must have dimension " +
                          std::to_string(cfg_.task_dim));
    ModelOutput<Real> out;
    auto h = encoder::embed_nodes(batch, embedder_);
    std::vector<ad::Tensor<Real>> per_layer;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      h = encoder::encode(batch, h, layer.gnn).back();
      mixture::NoiseFn fn;
      if (noise) fn = [&noise, l](std::size_t i, std::size_t j) { return noise(l, i, j); };
      out.layers.push_back(mixture::layer_forward(batch, h, layer.experts, layer.router, fn));
      per_layer.push_back(out.layers.back().output);
    }
    out.integrated =
        mixture::integrate_outputs(ad::concat_cols(per_layer), batch.task_embedding, integrator_);
    return out;
  }

 private:
  ModelConfig cfg_;
  nn::ParamStore<Real> params_;
  encoder::NodeEmbedder<Real> embedder_;
  std::vector<ProcessingLayer<Real>> layers_;
  mixture::IntegratorParams<Real> integrator_;
};

/// Batches records, attaching each record's task embedding and label.
template <class Real>
nn::GraphBatch<Real> make_batch(const std::vector<const DatasetRecord*>& records,
                                const TaskTable& tasks) {
  std::vector<const mol::FeaturizedGraph*> graphs;
  graphs.reserve(records.size());
  for (const auto* r : records) graphs.push_back(&r->graph);
  auto batch = nn::batch_graphs<Real>(graphs);
  const std::size_t e = tasks.dim();
  std::vector<Real> t;
  std::vector<Real> y;
  t.reserve(records.size() * e);
  for (const auto* r : records) {
    const auto& emb = tasks.get(r->task_id).embedding;
    for (double v : emb) t.push_back(static_cast<Real>(v));
    y.push_back(static_cast<Real>(r->label));
    batch.label_values.push_back(r->label);
  }
  batch.task_embedding = ad::Tensor<Real>::from({records.size(), e}, std::move(t));
  batch.labels = ad::Tensor<Real>::column(std::move(y));
  return batch;
}

/// Every loss term for one forward pass, summed over processing layers.
/// Disabled terms are constant zeros.
template <class Real>
losses::LossTerms<Real> compute_losses(const ModelOutput<Real>& out,
                                       const nn::GraphBatch<Real>& batch,
                                       const losses::LossConfig& cfg,
                                       std::vector<std::string>* warnings = nullptr) {
  using T = ad::Tensor<Real>;
  if (!batch.labels.defined()) throw Error("compute_losses: batch has no labels");
  losses::LossTerms<Real> t;
  t.base = ad::mean(ad::bce_with_logits(out.logits(), batch.labels));
  auto accumulate = [](T& acc, const T& v) { acc = acc.defined() ? ad::add(acc, v) : v; };
  for (const auto& layer : out.layers) {
    if (cfg.use_att) accumulate(t.att, losses::attention_cosine_loss(layer.thetas, warnings));
    if (cfg.use_exp) {
      const std::size_t k = layer.route.k_s;
      std::vector<Real> pair_labels;
      pair_labels.reserve(batch.num_graphs * k);
      for (std::size_t i = 0; i < batch.num_graphs; ++i)
        pair_labels.insert(pair_labels.end(), k, static_cast<Real>(batch.label_values[i]));
      accumulate(t.exp, losses::expert_specific_loss(layer.pair_logits,
                                                     T::column(std::move(pair_labels)),
                                                     cfg.exp_mean));
    }
    if (cfg.use_imp) accumulate(t.imp, losses::importance_loss(layer.route.gates));
    if (cfg.use_lod) accumulate(t.lod, losses::load_loss(layer.route.p_choose));
  }
  for (T* term : {&t.att, &t.exp, &t.imp, &t.lod})
    if (!term->defined()) *term = T::scalar(Real(0));
  return t;
}

}  // namespace moce
