#pragma once

#include <string>
#include <vector>

#include "gnn3d/graph.hpp"
#include "gnn3d/mlp.hpp"
#include "gnn3d/pointcloud.hpp"
#include "gnn3d/tensor.hpp"

namespace gnn3d {

struct GnnConfig {
  std::size_t features = 64;
  std::size_t layers = 3;
  std::size_t attention_hidden = 64;
  std::size_t mapping_hidden = 64;
  /// One attention weight per edge instead of one per channel.
  bool scalar_attention = false;

  void validate() const {
    if (features == 0 || attention_hidden == 0 || mapping_hidden == 0)
      throw ConfigError("GNN widths must be positive");
    if (layers < 1 || layers > 8) throw ConfigError("GNN layer count must be in 1..8");
  }

  MlpSpec embed_spec() const {
    MlpSpec s;
    s.widths = {4, features};
    s.activation = {Activation::relu};
    s.batchnorm = {true};
    return s;
  }
  /// M: feature mapping whose differences drive attention; no output bias
  /// since only differences are used.
  MlpSpec mapping_spec() const {
    MlpSpec s = MlpSpec::relu_hidden({features, mapping_hidden, features});
    s.output_bias = false;
    return s;
  }
  /// No output bias: the neighborhood softmax is invariant to it.
  MlpSpec attention_spec() const {
    MlpSpec s = MlpSpec::relu_hidden({3 + features, attention_hidden, scalar_attention ? std::size_t{1} : features});
    s.output_bias = false;
    return s;
  }

  static std::string layer_prefix(std::size_t k) { return "gnn.layer" + std::to_string(k); }
};

inline void init_gnn(ParamStore& store, const GnnConfig& cfg, Rng& rng) {
  cfg.validate();
  init_mlp(store, "gnn.embed", cfg.embed_spec(), rng);
  for (std::size_t k = 1; k <= cfg.layers; ++k) {
    const std::string p = GnnConfig::layer_prefix(k);
    init_mlp(store, p + ".mapping", cfg.mapping_spec(), rng);
    init_mlp(store, p + ".attention", cfg.attention_spec(), rng);
    store.add(p + ".transform", glorot_uniform(cfg.features, cfg.features, rng));
  }
}

/// Index arrays derived once per graph and shared by every layer.
struct GraphIndex {
  const Graph* graph = nullptr;
  std::vector<std::size_t> sources;    // u per edge
  std::vector<std::size_t> targets;    // v per edge
  Tensor deltas;                       // [E x 3], empty when E == 0
  Offsets embed_offsets;               // self + neighbors per vertex
  std::vector<std::size_t> embed_rows; // vertex supplying reflectance per embedding row

  explicit GraphIndex(const Graph& g) : graph(&g), sources(g.sources()), targets(g.neighbors) {
    if (g.edge_count() > 0) {
      deltas = Tensor({g.edge_count(), 3});
      for (std::size_t e = 0; e < g.edge_count(); ++e)
        for (std::size_t c = 0; c < 3; ++c) deltas[e * 3 + c] = g.deltas[e][c];
    }
    embed_offsets.push_back(0);
    for (std::size_t u = 0; u < g.vertex_count; ++u) {
      embed_rows.push_back(u);
      for (auto v : g.neighbors_of(u)) embed_rows.push_back(v);
      embed_offsets.push_back(embed_rows.size());
    }
  }

  bool has_edges() const { return !sources.empty(); }
};

/// s_u^0: per (u, v) in {u} + N(u), [reflectance_v, x_v - x_u] through
/// linear -> batch-norm -> ReLU, then a channel-wise max over the set.
inline Var embed_initial(Tape& tape, ParamStore& store, const GnnConfig& cfg, const PointCloud& cloud,
                         const GraphIndex& idx, Mode mode) {
  const Graph& g = *idx.graph;
  if (cloud.size() != g.vertex_count || g.vertex_count == 0)
    throw DimensionError("graph does not match cloud");
  Tensor rows({idx.embed_rows.size(), 4});
  std::size_t r = 0;
  for (std::size_t u = 0; u < g.vertex_count; ++u) {
    rows[r * 4] = cloud.points[u].reflectance;
    ++r;
    for (std::size_t e = g.offsets[u]; e < g.offsets[u + 1]; ++e, ++r) {
      rows[r * 4] = cloud.points[g.neighbors[e]].reflectance;
      for (std::size_t c = 0; c < 3; ++c) rows[r * 4 + 1 + c] = g.deltas[e][c];
    }
  }
  Var h = mlp_forward(cfg.embed_spec(), store, "gnn.embed", tape.constant(std::move(rows)), mode);
  return segment_max(h, idx.embed_offsets);
}

/// e_uv = MLP(dx_uv || M(s_v) - M(s_u)) for every edge, [E x F] (or [E x 1]
/// with scalar attention). Requires at least one edge.
inline Var attention_coefficients(Tape& tape, ParamStore& store, const GnnConfig& cfg, std::size_t k, Var states,
                                  const GraphIndex& idx, Mode mode) {
  const std::string p = GnnConfig::layer_prefix(k);
  Var mapped = mlp_forward(cfg.mapping_spec(), store, p + ".mapping", states, mode);
  Var ds = sub(gather_rows(mapped, idx.targets), gather_rows(mapped, idx.sources));
  Var input = concat(tape.constant(idx.deltas), ds);
  return mlp_forward(cfg.attention_spec(), store, p + ".attention", input, mode);
}

/// Softmax over each vertex's neighbors, independently per channel.
inline Var attention_weights(Var coefficients, const GraphIndex& idx) {
  return segment_softmax(coefficients, idx.graph->offsets);
}

/// s_u^k = sum_v alpha_uv * (W_k s_v^{k-1}) + s_u^{k-1}.
inline Var gnn_layer(Tape& tape, ParamStore& store, const GnnConfig& cfg, std::size_t k, Var states,
                     const GraphIndex& idx, Mode mode) {
  if (!idx.has_edges()) return states;
  Var alpha = attention_weights(attention_coefficients(tape, store, cfg, k, states, idx, mode), idx);
  if (cfg.scalar_attention) alpha = tile_cols(alpha, cfg.features);
  Var transformed = matmul(states, tape.parameter(store, GnnConfig::layer_prefix(k) + ".transform"));
  Var messages = elementwise_mul(alpha, gather_rows(transformed, idx.targets));
  return add(segment_sum(messages, idx.graph->offsets), states);
}

/// Embedding followed by cfg.layers attention layers.
inline Var gnn_forward(Tape& tape, ParamStore& store, const GnnConfig& cfg, const PointCloud& cloud,
                       const GraphIndex& idx, Mode mode) {
  Var s = embed_initial(tape, store, cfg, cloud, idx, mode);
  for (std::size_t k = 1; k <= cfg.layers; ++k) s = gnn_layer(tape, store, cfg, k, s, idx, mode);
  return s;
}

}  // namespace gnn3d
