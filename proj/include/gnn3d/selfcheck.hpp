#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "gnn3d/checkpoint.hpp"
#include "gnn3d/oracles.hpp"

namespace gnn3d {

// ---------------------------------------------------------------------------
// Random instances shared by the oracle suites

inline PointCloud random_cloud(Rng& rng, std::size_t n, double extent) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-0.25 * extent, 0.25 * extent),
                        rng.uniform()});
  return c;
}

inline Box3D random_box(Rng& rng, double spread) {
  return {rng.uniform(-spread, spread),
          rng.uniform(-spread, spread),
          rng.uniform(-0.5 * spread, 0.5 * spread),
          rng.uniform(0.5, 5.0),
          rng.uniform(0.4, 2.5),
          rng.uniform(0.5, 2.0),
          rng.uniform(-std::numbers::pi, std::numbers::pi)};
}

/// Largest |sum_v alpha_uv - 1| over vertices with neighbors and channels,
/// for a freshly initialized layer 1 on a random graph.
inline double attention_sum_error(Rng& rng, std::size_t n, double extent, const GnnConfig& cfg) {
  const PointCloud cloud = random_cloud(rng, n, extent);
  const Graph g = build_graph(cloud, 1.8, kUnlimitedNeighbors);
  if (g.edge_count() == 0) return 0.0;
  const GraphIndex idx(g);
  ParamStore store;
  init_gnn(store, cfg, rng);
  Tape tape;
  Var s = embed_initial(tape, store, cfg, cloud, idx, Mode::train);
  const Tensor& a = attention_weights(attention_coefficients(tape, store, cfg, 1, s, idx, Mode::train), idx).value();
  double worst = 0.0;
  for (std::size_t u = 0; u < g.vertex_count; ++u) {
    if (g.degree(u) == 0) continue;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      double sum = 0.0;
      for (std::size_t e = g.offsets[u]; e < g.offsets[u + 1]; ++e) sum += a.at(e, c);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
  }
  return worst;
}

/// Random (gt, anchor) pair with |heading difference| < pi/2.
inline std::pair<Box3D, Anchor> random_codec_pair(Rng& rng, const AnchorTemplate& t) {
  const std::size_t variant = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(t.headings.size()) - 1));
  const Anchor a = place_anchor(t, variant, rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-3, 1));
  Box3D gt{a.box.x + rng.uniform(-2, 2),
           a.box.y + rng.uniform(-2, 2),
           a.box.z + rng.uniform(-1, 1),
           t.l * rng.uniform(0.5, 1.5),
           t.w * rng.uniform(0.5, 1.5),
           t.h * rng.uniform(0.5, 1.5),
           normalize_angle(a.box.heading + rng.uniform(-0.999, 0.999) * std::numbers::pi / 2)};
  return {gt, a};
}

inline double codec_roundtrip_error(const Box3D& gt, const Anchor& a, ZNorm z) {
  const Box3D back = decode(encode(gt, a, z), a, z);
  return std::max({std::abs(back.x - gt.x), std::abs(back.y - gt.y), std::abs(back.z - gt.z), std::abs(back.l - gt.l),
                   std::abs(back.w - gt.w), std::abs(back.h - gt.h), std::abs(normalize_angle(back.heading - gt.heading))});
}

/// Random detections clustered so that suppression actually happens.
inline DetectionSet random_detections(Rng& rng, std::size_t n) {
  DetectionSet d;
  for (std::size_t i = 0; i < n; ++i) {
    Box3D b = random_box(rng, 6.0);
    d.push_back({kAllClasses[static_cast<std::size_t>(rng.uniform_int(0, 2))], rng.uniform(), b});
  }
  return d;
}

inline bool same_detections(const DetectionSet& a, const DetectionSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].cls != b[i].cls || a[i].score != b[i].score || !(a[i].box == b[i].box)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Suites

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

inline CheckResult check_gradient(std::uint64_t seed) {
  const auto r = oracle::gradient_check_detector(2, 4, seed);
  return {"gradient", r.max_relative_error < 1e-4,
          fmt("max relative error %.3g over %.0f parameters", r.max_relative_error, static_cast<double>(r.checked)) +
              " (worst " + r.worst_parameter + ")"};
}

inline CheckResult check_graph(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 1));
  std::size_t edges = 0;
  for (int i = 0; i < 3; ++i) {
    const PointCloud c = random_cloud(rng, 300, 6.0);
    for (std::size_t cap : {kUnlimitedNeighbors, std::size_t{8}}) {
      const Graph g = build_graph(c, 1.8, cap);
      edges += g.edge_count();
      if (oracle::edge_pairs(g) != oracle::brute_force_edges(c, 1.8, cap))
        return {"graph", false, "edge set differs from brute force on cloud " + std::to_string(i)};
    }
  }
  return {"graph", true, std::to_string(edges) + " edges match brute force"};
}

inline CheckResult check_attention(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 2));
  GnnConfig cfg;
  cfg.features = cfg.attention_hidden = cfg.mapping_hidden = 8;
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) worst = std::max(worst, attention_sum_error(rng, 80, 4.0, cfg));
  return {"attention", worst <= 1e-9, fmt("max |sum - 1| = %.3g", worst)};
}

inline CheckResult check_codec(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 3));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto [gt, a] = random_codec_pair(rng, default_anchor(ObjectClass::car));
    worst = std::max(worst, codec_roundtrip_error(gt, a, ZNorm::da));
  }
  return {"codec", worst <= 1e-9, fmt("max round-trip error %.3g", worst)};
}

inline CheckResult check_iou(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 4));
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Box3D a = random_box(rng, 1.0), b = random_box(rng, 1.0);
    for (IouKind k : {IouKind::bev, IouKind::iou3d})
      worst = std::max(worst, std::abs(iou(a, b, k) - oracle::monte_carlo_iou(a, b, k, 200000, rng)));
  }
  return {"iou", worst <= 1e-2, fmt("max |IoU - Monte Carlo| = %.3g", worst)};
}

inline CheckResult check_nms(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 5));
  const std::array<double, 3> thr = {0.7, 0.6, 0.6};
  for (int i = 0; i < 5; ++i) {
    const DetectionSet d = random_detections(rng, 60);
    for (IouKind k : {IouKind::bev, IouKind::iou3d})
      if (!same_detections(nms(d, thr, k), oracle::naive_nms(d, thr, k)))
        return {"nms", false, "differs from the naive reference on set " + std::to_string(i)};
  }
  return {"nms", true, "matches the naive reference"};
}

inline CheckResult check_checkpoint(std::uint64_t seed) {
  ModelConfig m;
  m.gnn.features = m.gnn.attention_hidden = m.gnn.mapping_hidden = m.head_hidden = 4;
  m.gnn.layers = 1;
  ParamStore store;
  init_model(store, m, seed);
  std::vector<std::uint8_t> bytes = save_model(m, store);
  if (save_model(load_model(bytes).config, load_model(bytes).store) != bytes)
    return {"checkpoint", false, "round trip changed the bytes"};
  bytes[0] = 'X';
  try {
    load_model(bytes);
  } catch (const FormatError& e) {
    return {"checkpoint", true, std::string("corrupted magic rejected: ") + e.what()};
  }
  return {"checkpoint", false, "corrupted magic was accepted"};
}

inline std::vector<CheckResult> run_selfcheck(std::uint64_t seed = 1) {
  return {check_gradient(seed), check_graph(seed), check_attention(seed), check_codec(seed),
          check_iou(seed),      check_nms(seed),   check_checkpoint(seed)};
}

inline std::string format_selfcheck(const std::vector<CheckResult>& results) {
  std::string out;
  for (const auto& r : results) out += std::string(r.pass ? "PASS" : "FAIL") + "\t" + r.name + "\t" + r.detail + "\n";
  return out;
}

}  // namespace gnn3d
