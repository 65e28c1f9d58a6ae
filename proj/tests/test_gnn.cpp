#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gnn3d/gnn.hpp"
#include "test_util.hpp"

using namespace gnn3d;

namespace {

using Rows = std::vector<std::vector<double>>;

PointCloud random_cloud(std::uint64_t seed, std::size_t n, double extent) {
  Rng rng(seed);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-1, 1), rng.uniform()});
  return c;
}

GnnConfig small_config(std::size_t layers = 2, bool scalar = false) {
  GnnConfig cfg;
  cfg.features = 6;
  cfg.layers = layers;
  cfg.attention_hidden = 5;
  cfg.mapping_hidden = 4;
  cfg.scalar_attention = scalar;
  return cfg;
}

ParamStore make_store(const GnnConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  init_gnn(store, cfg, rng);
  // Non-trivial running statistics and affine terms for eval mode.
  for (auto& e : store.entries()) {
    if (e.name.ends_with("bn_mean") || e.name.ends_with("bn_beta"))
      for (auto& v : e.value.storage()) v = rng.uniform(-0.3, 0.3);
    if (e.name.ends_with("bn_var") || e.name.ends_with("bn_gamma"))
      for (auto& v : e.value.storage()) v = rng.uniform(0.5, 1.5);
    if (e.name.ends_with("bias"))
      for (auto& v : e.value.storage()) v = rng.uniform(-0.2, 0.2);
  }
  return store;
}

/// Eval-mode MLP with plain loops over the stored parameters.
Rows mlp_loops(const MlpSpec& spec, const ParamStore& store, const std::string& prefix, Rows x) {
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const Tensor& w = store.get(mlp_param(prefix, l, "weight")).value;
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    Rows y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t j = 0; j < out; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.at(i, j);
        if (spec.has_bias(l)) s += store.get(mlp_param(prefix, l, "bias")).value[j];
        if (spec.batchnorm[l]) {
          const double m = store.get(mlp_param(prefix, l, "bn_mean")).value[j];
          const double v = store.get(mlp_param(prefix, l, "bn_var")).value[j];
          s = store.get(mlp_param(prefix, l, "bn_gamma")).value[j] * (s - m) / std::sqrt(v + 1e-5) +
              store.get(mlp_param(prefix, l, "bn_beta")).value[j];
        }
        if (spec.activation[l] == Activation::relu) s = std::max(0.0, s);
        y[r][j] = s;
      }
    x = std::move(y);
  }
  return x;
}

/// Whole network per vertex with explicit neighbor loops.
Rows gnn_loops(const GnnConfig& cfg, const ParamStore& store, const PointCloud& c, const Graph& g) {
  const std::size_t n = c.size(), f = cfg.features;
  Rows s(n, std::vector<double>(f, -1e300));
  for (std::size_t u = 0; u < n; ++u) {
    Rows in{{c.points[u].reflectance, 0, 0, 0}};
    for (auto v : g.neighbors_of(u))
      in.push_back({c.points[v].reflectance, c.points[v].x - c.points[u].x, c.points[v].y - c.points[u].y,
                    c.points[v].z - c.points[u].z});
    for (const auto& row : mlp_loops(cfg.embed_spec(), store, "gnn.embed", in))
      for (std::size_t j = 0; j < f; ++j) s[u][j] = std::max(s[u][j], row[j]);
  }
  for (std::size_t k = 1; k <= cfg.layers; ++k) {
    const std::string p = GnnConfig::layer_prefix(k);
    const Rows mapped = mlp_loops(cfg.mapping_spec(), store, p + ".mapping", s);
    const Tensor& w = store.get(p + ".transform").value;
    Rows next = s;
    for (std::size_t u = 0; u < n; ++u) {
      const auto nb = g.neighbors_of(u);
      if (nb.empty()) continue;
      Rows e_in;
      for (auto v : nb) {
        std::vector<double> row{c.points[v].x - c.points[u].x, c.points[v].y - c.points[u].y,
                                c.points[v].z - c.points[u].z};
        for (std::size_t j = 0; j < f; ++j) row.push_back(mapped[v][j] - mapped[u][j]);
        e_in.push_back(row);
      }
      const Rows e = mlp_loops(cfg.attention_spec(), store, p + ".attention", e_in);
      for (std::size_t j = 0; j < f; ++j) {
        const std::size_t col = cfg.scalar_attention ? 0 : j;
        double mx = -1e300, z = 0;
        for (const auto& r : e) mx = std::max(mx, r[col]);
        for (const auto& r : e) z += std::exp(r[col] - mx);
        double acc = 0;
        for (std::size_t i = 0; i < nb.size(); ++i) {
          double ws = 0;
          for (std::size_t q = 0; q < f; ++q) ws += s[nb[i]][q] * w.at(q, j);
          acc += std::exp(e[i][col] - mx) / z * ws;
        }
        next[u][j] += acc;
      }
    }
    s = std::move(next);
  }
  return s;
}

Tensor forward(const GnnConfig& cfg, ParamStore& store, const PointCloud& c, const Graph& g, Mode mode) {
  Tape tape;
  const GraphIndex idx(g);
  return gnn_forward(tape, store, cfg, c, idx, mode).value();
}

}  // namespace

TEST(Gnn, MatchesPerVertexLoops) {
  for (bool scalar : {false, true}) {
    const GnnConfig cfg = small_config(3, scalar);
    ParamStore store = make_store(cfg, 5);
    const PointCloud c = random_cloud(6, 40, 2);
    const Graph g = build_graph(c, 1.0, 8);
    const Tensor out = forward(cfg, store, c, g, Mode::eval);
    const Rows expect = gnn_loops(cfg, store, c, g);
    for (std::size_t u = 0; u < c.size(); ++u)
      for (std::size_t j = 0; j < cfg.features; ++j) EXPECT_NEAR(out.at(u, j), expect[u][j], 1e-10);
  }
}

TEST(Gnn, AttentionSumsToOnePerVertexAndChannel) {
  for (bool scalar : {false, true}) {
    const GnnConfig cfg = small_config(1, scalar);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      ParamStore store = make_store(cfg, seed);
      const PointCloud c = random_cloud(seed + 50, 60, 2);
      const Graph g = build_graph(c, 0.9, 12);
      const GraphIndex idx(g);
      Tape tape;
      Var s = embed_initial(tape, store, cfg, c, idx, Mode::train);
      const Tensor a = attention_weights(attention_coefficients(tape, store, cfg, 1, s, idx, Mode::train), idx).value();
      for (std::size_t u = 0; u < g.vertex_count; ++u) {
        if (g.degree(u) == 0) continue;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          double sum = 0;
          for (std::size_t e = g.offsets[u]; e < g.offsets[u + 1]; ++e) {
            EXPECT_GT(a.at(e, j), 0.0);
            sum += a.at(e, j);
          }
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(Gnn, IsolatedVertexKeepsItsEmbedding) {
  const GnnConfig cfg = small_config(3);
  ParamStore store = make_store(cfg, 2);
  PointCloud c;
  c.points = {{0, 0, 0, 0.5}, {0.3, 0, 0, 0.2}, {10, 10, 0, 0.7}};
  const Graph g = build_graph(c, 1.0, 8);
  const GraphIndex idx(g);
  Tape tape;
  const Tensor s0 = embed_initial(tape, store, cfg, c, idx, Mode::eval).value();
  const Tensor out = forward(cfg, store, c, g, Mode::eval);
  for (std::size_t j = 0; j < cfg.features; ++j) EXPECT_EQ(out.at(2, j), s0.at(2, j));
}

TEST(Gnn, GraphWithoutEdgesReturnsEmbedding) {
  const GnnConfig cfg = small_config(2);
  ParamStore store = make_store(cfg, 3);
  PointCloud c;
  c.points = {{0, 0, 0, 0.5}, {5, 0, 0, 0.2}};
  const Graph g = build_graph(c, 1.0, 8);
  const Tensor out = forward(cfg, store, c, g, Mode::eval);
  const Rows expect = gnn_loops(cfg, store, c, g);
  for (std::size_t j = 0; j < cfg.features; ++j) EXPECT_NEAR(out.at(1, j), expect[1][j], 1e-12);
}

TEST(Gnn, TranslationInvariant) {
  const GnnConfig cfg = small_config(3);
  ParamStore store = make_store(cfg, 8);
  PointCloud c = random_cloud(9, 50, 2);
  const Graph g = build_graph(c, 1.0, 16);
  const Tensor a = forward(cfg, store, c, g, Mode::eval);
  for (auto& p : c.points) {
    p.x += 17.25;
    p.y -= 3.5;
    p.z += 0.75;
  }
  const Tensor b = forward(cfg, store, c, build_graph(c, 1.0, 16), Mode::eval);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(Gnn, PermutationEquivariant) {
  const GnnConfig cfg = small_config(2);
  for (Mode mode : {Mode::eval, Mode::train}) {
    ParamStore store = make_store(cfg, 10);
    const PointCloud c = random_cloud(11, 45, 2);
    std::vector<std::size_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(12);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    PointCloud shuffled;
    for (auto i : perm) shuffled.points.push_back(c.points[i]);
    const Tensor a = forward(cfg, store, c, build_graph(c, 1.0, kUnlimitedNeighbors), mode);
    const Tensor b = forward(cfg, store, shuffled, build_graph(shuffled, 1.0, kUnlimitedNeighbors), mode);
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (std::size_t j = 0; j < cfg.features; ++j) EXPECT_NEAR(b.at(r, j), a.at(perm[r], j), 1e-9);
  }
}

TEST(Gnn, ParameterGradientsMatchFiniteDifferences) {
  const GnnConfig cfg = small_config(2);
  ParamStore store = make_store(cfg, 20);
  const PointCloud c = random_cloud(21, 14, 1);
  const Graph g = build_graph(c, 1.0, 6);
  const GraphIndex idx(g);
  auto loss = [&](bool grad) {
    Tape tape;
    Var out = gnn3d::testing::weighted_sum(tape, gnn_forward(tape, store, cfg, c, idx, Mode::eval), 99);
    if (grad) tape.backward(out);
    return out.value()[0];
  };
  store.zero_grad();
  loss(true);
  const double h = 1e-6;
  double worst = 0;
  for (auto& e : store.entries()) {
    if (!e.trainable) continue;
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const double orig = e.value[k];
      e.value[k] = orig + h;
      const double up = loss(false);
      e.value[k] = orig - h;
      const double down = loss(false);
      e.value[k] = orig;
      const double num = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(num - e.grad[k]) / std::max({std::abs(num), std::abs(e.grad[k]), 1.0}));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Gnn, CloudGraphMismatchIsRejected) {
  const GnnConfig cfg = small_config(1);
  ParamStore store = make_store(cfg, 1);
  const PointCloud c = random_cloud(2, 10, 1);
  const Graph g = build_graph(random_cloud(3, 12, 1), 1.0, 4);
  EXPECT_THROW(forward(cfg, store, c, g, Mode::eval), DimensionError);
}

TEST(Gnn, InvalidConfigIsRejected) {
  GnnConfig cfg = small_config(0);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config(9);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config(2);
  cfg.features = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
