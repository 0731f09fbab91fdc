// SPDX-License-Identifier: Apache-2.0
//
// Named parameter storage, deterministic initialization and block-diagonal
// graph batching shared by the encoder and the expert predictor.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "moce/common.hpp"
#include "moce/molgraph.hpp"
#include "moce/tensor.hpp"

namespace moce::nn {

using ad::Shape;
using ad::Tensor;

struct Parameter {
  std::string name;
  ad::Shape shape;
};

/// Owns every learnable tensor of a model in creation order. Names are unique
/// and double as checkpoint section keys.
template <class Real>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Uniform(-bound, bound) initialization, counter-based so that a
  /// parameter's values depend only on (seed, name, index).
  Tensor<Real> uniform(const std::string& name, Shape shape, double bound) {
    const std::uint64_t key = hash_combine(mix64(seed_), fnv1a(name));
    std::vector<Real> v(ad::shape_numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<Real>((2.0 * unit_open(mix64(hash_combine(key, i))) - 1.0) * bound);
    return add(name, Tensor<Real>::from(std::move(shape), std::move(v), true));
  }

  /// Glorot/Xavier uniform for a (fan_in x fan_out) matrix.
  Tensor<Real> xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    return uniform(name, {fan_in, fan_out}, std::sqrt(6.0 / double(fan_in + fan_out)));
  }

  Tensor<Real> zeros(const std::string& name, Shape shape) {
    return add(name, Tensor<Real>::zeros(std::move(shape), true));
  }

  Tensor<Real> add(const std::string& name, Tensor<Real> t) {
    for (const auto& [n, _] : params_)
      if (n == name) throw Error("duplicate parameter name " + name);
    params_.emplace_back(name, t);
    return t;
  }

  std::vector<std::pair<std::string, Tensor<Real>>>& params() noexcept { return params_; }
  const std::vector<std::pair<std::string, Tensor<Real>>>& params() const noexcept {
    return params_;
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<Real>>> params_;
};

/// Block-diagonal batch of featurized graphs with per-graph task embeddings
/// and labels. Node/edge indices are global across the batch.
template <class Real>
struct GraphBatch {
  std::size_t num_graphs = 0;
  std::size_t num_nodes = 0;
  std::vector<std::size_t> node_offset;  // num_graphs + 1
  std::vector<std::size_t> graph_of_node;
  std::array<std::vector<std::size_t>, mol::kNodeFeatureCount> node_cols;
  std::vector<std::size_t> edge_src;
  std::vector<std::size_t> edge_dst;
  std::array<std::vector<std::size_t>, mol::kEdgeFeatureCount> edge_cols;
  // D^-1/2 (A + I) D^-1/2 over the whole batch; constant.
  std::shared_ptr<const ad::SparseMatrix<Real>> norm_adj;
  Tensor<Real> inv_node_count;  // num_graphs x 1
  Tensor<Real> task_embedding;  // num_graphs x e_t (may be undefined)
  Tensor<Real> labels;          // num_graphs x 1 (may be undefined)
  std::vector<int> label_values;

  std::size_t graph_size(std::size_t g) const { return node_offset[g + 1] - node_offset[g]; }
};

template <class Real>
GraphBatch<Real> batch_graphs(const std::vector<const mol::FeaturizedGraph*>& graphs) {
  GraphBatch<Real> b;
  b.num_graphs = graphs.size();
  b.node_offset.push_back(0);
  auto adj = std::make_shared<ad::SparseMatrix<Real>>();
  std::vector<Real> inv;
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const auto& g = *graphs[gi];
    if (g.num_nodes == 0) throw Error("batch_graphs: graph " + std::to_string(gi) + " is empty");
    const std::size_t off = b.num_nodes;
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
      b.graph_of_node.push_back(gi);
      for (std::size_t c = 0; c < mol::kNodeFeatureCount; ++c) {
        const auto f = g.node_feature(v, c);
        if (f < 0 || static_cast<std::size_t>(f) >= mol::kNodeVocab[c])
          throw IndexOutOfRange("node feature " + std::to_string(c) + " out of vocabulary");
        b.node_cols[c].push_back(static_cast<std::size_t>(f));
      }
    }
    std::vector<std::size_t> deg(g.num_nodes, 0);
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      b.edge_src.push_back(off + g.edge_src[e]);
      b.edge_dst.push_back(off + g.edge_dst[e]);
      ++deg[g.edge_dst[e]];
      for (std::size_t c = 0; c < mol::kEdgeFeatureCount; ++c) {
        const auto f = g.edge_feature(e, c);
        if (f < 0 || static_cast<std::size_t>(f) >= mol::kEdgeVocab[c])
          throw IndexOutOfRange("edge feature " + std::to_string(c) + " out of vocabulary");
        b.edge_cols[c].push_back(static_cast<std::size_t>(f));
      }
    }
    for (std::size_t v = 0; v < g.num_nodes; ++v)
      adj->add(off + v, off + v, Real(1) / Real(deg[v] + 1));
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      const std::size_t s = g.edge_src[e], d = g.edge_dst[e];
      adj->add(off + d, off + s,
               static_cast<Real>(1.0 / std::sqrt(double(deg[s] + 1) * double(deg[d] + 1))));
    }
    b.num_nodes += g.num_nodes;
    b.node_offset.push_back(b.num_nodes);
    inv.push_back(Real(1) / Real(g.num_nodes));
  }
  adj->rows = adj->cols = b.num_nodes;
  b.norm_adj = std::move(adj);
  b.inv_node_count = Tensor<Real>::column(std::move(inv));
  return b;
}

}  // namespace moce::nn
