#pragma once

// Slow reference implementations used to cross-check the fast paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "gnn3d/boxes.hpp"
#include "gnn3d/detector.hpp"
#include "gnn3d/graph.hpp"
#include "gnn3d/loss.hpp"
#include "gnn3d/random.hpp"
#include "gnn3d/train.hpp"

namespace gnn3d::oracle {

/// All-pairs radius graph as sorted (u, v) pairs, with the same nearest-k cap rule.
inline std::vector<std::pair<std::size_t, std::size_t>> brute_force_edges(const PointCloud& cloud, double radius,
                                                                          std::size_t max_neighbors) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  const double r2 = radius * radius;
  for (std::size_t u = 0; u < cloud.size(); ++u) {
    std::vector<std::pair<double, std::size_t>> near;
    for (std::size_t v = 0; v < cloud.size(); ++v) {
      if (v == u) continue;
      const Point &a = cloud.points[u], &b = cloud.points[v];
      const double dx = b.x - a.x, dy = b.y - a.y, dz = b.z - a.z;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 <= r2) near.push_back({d2, v});
    }
    std::sort(near.begin(), near.end());
    if (near.size() > max_neighbors) near.resize(max_neighbors);
    for (const auto& [d2, v] : near) edges.push_back({u, v});
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

inline std::vector<std::pair<std::size_t, std::size_t>> edge_pairs(const Graph& g) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t u = 0; u < g.vertex_count; ++u)
    for (auto v : g.neighbors_of(u)) edges.push_back({u, v});
  std::sort(edges.begin(), edges.end());
  return edges;
}

/// Repeatedly keep the best remaining box (score, then lower index) and
/// discard everything of its class overlapping it beyond the threshold.
inline DetectionSet naive_nms(const DetectionSet& dets, const std::array<double, 3>& thr, IouKind kind) {
  std::vector<bool> alive(dets.size(), true);
  DetectionSet kept;
  for (;;) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (best == dets.size() || dets[i].score > dets[best].score)) best = i;
    if (best == dets.size()) break;
    alive[best] = false;
    kept.push_back(dets[best]);
    for (std::size_t j = 0; j < dets.size(); ++j)
      if (alive[j] && dets[j].cls == dets[best].cls &&
          iou(dets[best].box, dets[j].box, kind) > thr[static_cast<std::size_t>(dets[j].cls)])
        alive[j] = false;
  }
  return kept;
}

/// IoU estimated from uniform samples inside `a`: |a ∩ b| = V_a * (fraction in b).
inline double monte_carlo_iou(const Box3D& a, const Box3D& b, IouKind kind, std::size_t samples, Rng& rng) {
  const double c = std::cos(a.heading), s = std::sin(a.heading);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double u = rng.uniform(-0.5, 0.5) * a.l, v = rng.uniform(-0.5, 0.5) * a.w, w = rng.uniform(-0.5, 0.5) * a.h;
    const double x = a.x + c * u - s * v, y = a.y + s * u + c * v;
    if (kind == IouKind::bev) {
      Box3D flat = b;
      flat.z = a.z;
      flat.h = a.h * 2;
      hits += contains(flat, x, y, a.z);
    } else {
      hits += contains(b, x, y, a.z + w);
    }
  }
  const double frac = static_cast<double>(hits) / static_cast<double>(samples);
  const double va = kind == IouKind::bev ? a.l * a.w : a.volume();
  const double vb = kind == IouKind::bev ? b.l * b.w : b.volume();
  const double inter = va * frac;
  return inter / (va + vb - inter);
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of `loss` against every trainable scalar of `store`,
/// compared with the analytic gradient left in the store by `gradient`.
/// The floor is `floor_scale` times the largest analytic component, so
/// exactly-zero gradients (dead units, cancelling biases) are compared at
/// round-off level instead of 0/0. A component that fails at `step` is
/// retried at step/10 and step/100: a ReLU or max kink inside the stencil
/// only spoils the larger steps, while a wrong gradient fails at all of them.
inline GradCheckResult finite_difference_check(ParamStore& store, const std::function<double()>& loss,
                                               const std::function<void()>& gradient, double tolerance = 1e-4,
                                               double step = 1e-5, double floor_scale = 1e-6) {
  store.zero_grad();
  gradient();
  double gmax = 0.0;
  for (const auto& e : store.entries())
    if (e.trainable)
      for (double g : e.grad.storage()) gmax = std::max(gmax, std::abs(g));
  const double floor = std::max(floor_scale * gmax, std::numeric_limits<double>::min());
  GradCheckResult r;
  for (auto& e : store.entries()) {
    if (!e.trainable) continue;
    auto& w = e.value.storage();
    const auto analytic = e.grad.storage();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      double err = std::numeric_limits<double>::infinity();
      for (double h = step; h >= step / 100 * 0.999 && err >= tolerance; h /= 10) {
        w[k] = orig + h;
        const double up = loss();
        w[k] = orig - h;
        const double down = loss();
        w[k] = orig;
        err = std::min(err, relative_error(analytic[k], (up - down) / (2 * h), floor));
      }
      ++r.checked;
      if (err > r.max_relative_error) {
        r.max_relative_error = err;
        r.worst_parameter = e.name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return r;
}

/// A car box with 20 interior returns and 10 returns around it.
inline LabeledScene gradcheck_scene(std::uint64_t seed, std::size_t inside = 20, std::size_t outside = 10) {
  Rng rng(Rng::mix(seed, 0x6c));
  LabeledScene s;
  s.id = "gradcheck";
  const Box3D car{10.0, 2.0, -0.98, 3.9, 1.6, 1.5, 0.3};
  s.objects.push_back({ObjectClass::car, car, std::nullopt});
  const double c = std::cos(car.heading), sn = std::sin(car.heading);
  for (std::size_t i = 0; i < inside + outside; ++i) {
    const bool in = i < inside;
    const double k = in ? 0.45 : 1.2;
    double u = rng.uniform(-k, k) * car.l, v = rng.uniform(-k, k) * car.w, w = rng.uniform(-k, k) * car.h;
    if (!in && std::abs(u) < 0.6 * car.l && std::abs(v) < 0.6 * car.w) u += (u < 0 ? -0.6 : 0.6) * car.l;
    s.cloud.points.push_back({static_cast<float>(car.x + c * u - sn * v), static_cast<float>(car.y + sn * u + c * v),
                              static_cast<float>(car.z + w), static_cast<float>(rng.uniform())});
  }
  return s;
}

/// Full training loss of a small detector on the gradient-check scene,
/// checked by central differences over every parameter.
inline GradCheckResult gradient_check_detector(std::size_t layers, std::size_t width, std::uint64_t seed,
                                               double tolerance = 1e-4) {
  const LabeledScene scene = gradcheck_scene(seed);
  ModelConfig model;
  model.gnn.features = model.gnn.attention_hidden = model.gnn.mapping_hidden = width;
  model.gnn.layers = layers;
  model.head_hidden = width;
  const Graph graph = build_graph(scene.cloud, 1.8, kUnlimitedNeighbors);
  const GraphIndex idx(graph);
  const AssignmentResult assign = assign_targets(scene.cloud, scene.objects, model);
  ParamStore store;
  init_model(store, model, seed);
  const LossWeights weights;
  auto build = [&](Tape& tape) {
    const Prediction p = predict(tape, store, model, scene.cloud, idx, Mode::train);
    return total_loss(regression_loss(p.residuals, assign.targets), classification_loss(p.probs, assign.targets.label),
                      localization_loss(p.residuals, assign.targets), weights);
  };
  auto loss = [&] {
    Tape tape;
    return build(tape).value()[0];
  };
  auto gradient = [&] {
    Tape tape;
    tape.backward(build(tape));
  };
  return finite_difference_check(store, loss, gradient, tolerance);
}

}  // namespace gnn3d::oracle
