// SPDX-License-Identifier: Apache-2.0
//
// GIN message-passing encoder with edge features.
//
//   m_v  = sum_{w in N(v)} relu(p_w + e_vw)
//   p'_v = MLP((1 + eps) * p_v + m_v),   MLP = Linear -> ReLU -> Linear

#pragma once

#include <array>
#include <string>
#include <vector>

#include "moce/molgraph.hpp"
#include "moce/nn.hpp"
#include "moce/tensor.hpp"

namespace moce::encoder {

using ad::Tensor;
using nn::GraphBatch;

class EmptyGraph : public Error {
 public:
  using Error::Error;
};

struct EncoderConfig {
  std::size_t num_gnn_layers = 6;
  std::size_t embed_dim = 300;
};

/// One lookup table per node feature column; a node's embedding is the sum
/// of its column lookups.
template <class Real>
struct NodeEmbedder {
  std::array<Tensor<Real>, mol::kNodeFeatureCount> tables;

  static NodeEmbedder create(nn::ParamStore<Real>& ps, const std::string& prefix,
                             std::size_t dim) {
    NodeEmbedder e;
    for (std::size_t c = 0; c < mol::kNodeFeatureCount; ++c)
      e.tables[c] = ps.xavier(prefix + ".node_table" + std::to_string(c), mol::kNodeVocab[c], dim);
    return e;
  }
};

template <class Real>
struct GinLayer {
  Tensor<Real> epsilon;  // scalar
  Tensor<Real> w1, b1, w2, b2;
  std::array<Tensor<Real>, mol::kEdgeFeatureCount> edge_tables;

  std::size_t dim() const { return w1.rows(); }

  static GinLayer create(nn::ParamStore<Real>& ps, const std::string& prefix, std::size_t dim) {
    GinLayer l;
    l.epsilon = ps.zeros(prefix + ".eps", {1});
    l.w1 = ps.xavier(prefix + ".w1", dim, dim);
    l.b1 = ps.zeros(prefix + ".b1", {dim});
    l.w2 = ps.xavier(prefix + ".w2", dim, dim);
    l.b2 = ps.zeros(prefix + ".b2", {dim});
    for (std::size_t c = 0; c < mol::kEdgeFeatureCount; ++c)
      l.edge_tables[c] = ps.xavier(prefix + ".edge_table" + std::to_string(c), mol::kEdgeVocab[c], dim);
    return l;
  }
};

/// Sum of per-column table lookups; returns (nodes x d, directed edges x d).
/// The edge matrix is undefined when `edge_tables` is null.
template <class Real>
Tensor<Real> embed_nodes(const GraphBatch<Real>& batch, const NodeEmbedder<Real>& emb) {
  Tensor<Real> out;
  for (std::size_t c = 0; c < mol::kNodeFeatureCount; ++c) {
    auto part = ad::gather_rows(emb.tables[c], std::span<const std::size_t>(batch.node_cols[c]));
    out = out.defined() ? ad::add(out, part) : part;
  }
  return out;
}

template <class Real>
Tensor<Real> embed_edges(const GraphBatch<Real>& batch,
                         const std::array<Tensor<Real>, mol::kEdgeFeatureCount>& tables) {
  Tensor<Real> out;
  for (std::size_t c = 0; c < mol::kEdgeFeatureCount; ++c) {
    auto part = ad::gather_rows(tables[c], std::span<const std::size_t>(batch.edge_cols[c]));
    out = out.defined() ? ad::add(out, part) : part;
  }
  return out;
}

template <class Real>
Tensor<Real> gin_forward(const GinLayer<Real>& layer, const Tensor<Real>& nodes,
                         const Tensor<Real>& edges, const GraphBatch<Real>& batch) {
  const std::size_t d = layer.dim();
  if (nodes.rank() != 2 || nodes.cols() != d || nodes.rows() != batch.num_nodes)
    throw ShapeMismatch("gin_forward: node matrix " + ad::shape_str(nodes.shape()));
  Tensor<Real> agg;
  if (!batch.edge_src.empty()) {
    if (edges.rows() != batch.edge_src.size() || edges.cols() != d)
      throw ShapeMismatch("gin_forward: edge matrix " + ad::shape_str(edges.shape()));
    auto msg = ad::relu(ad::add(ad::gather_rows(nodes, std::span<const std::size_t>(batch.edge_src)), edges));
    agg = ad::scatter_segment_sum(msg, std::span<const std::size_t>(batch.edge_dst), batch.num_nodes);
  }
  auto self = ad::add(nodes, ad::mul(nodes, layer.epsilon));
  auto combined = agg.defined() ? ad::add(self, agg) : self;
  auto hidden = ad::relu(ad::add_bias(ad::matmul(combined, layer.w1), layer.b1));
  return ad::add_bias(ad::matmul(hidden, layer.w2), layer.b2);
}

/// Applies `layers` in sequence starting from `input`; returns every layer's
/// output (one matrix per GIN layer).
template <class Real>
std::vector<Tensor<Real>> encode(const GraphBatch<Real>& batch, const Tensor<Real>& input,
                                 const std::vector<GinLayer<Real>>& layers) {
  if (layers.empty()) throw Error("encode: at least one GIN layer required");
  std::vector<Tensor<Real>> out;
  out.reserve(layers.size());
  Tensor<Real> h = input;
  for (const auto& layer : layers) {
    Tensor<Real> edges;
    if (!batch.edge_src.empty()) edges = embed_edges(batch, layer.edge_tables);
    h = gin_forward(layer, h, edges, batch);
    out.push_back(h);
  }
  return out;
}

/// Per-graph column mean of node rows: (num_graphs x d).
template <class Real>
Tensor<Real> global_mean_pool(const Tensor<Real>& nodes, const GraphBatch<Real>& batch) {
  if (batch.num_graphs == 0 || nodes.rows() == 0) throw EmptyGraph("global_mean_pool: no nodes");
  auto sums = ad::scatter_segment_sum(nodes, std::span<const std::size_t>(batch.graph_of_node),
                                      batch.num_graphs);
  return ad::mul(sums, batch.inv_node_count);
}

/// Column mean of a single graph's node matrix: (1 x d).
template <class Real>
Tensor<Real> global_mean_pool(const Tensor<Real>& nodes) {
  if (nodes.rows() == 0) throw EmptyGraph("global_mean_pool: no nodes");
  return ad::mean(nodes, 0);
}

}  // namespace moce::encoder
