#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gnn3d/boxes.hpp"
#include "gnn3d/detector.hpp"
#include "gnn3d/eval.hpp"
#include "gnn3d/loss.hpp"
#include "gnn3d/random.hpp"
#include "gnn3d/scene.hpp"

namespace gnn3d {

// ---------------------------------------------------------------------------
// Target assignment

struct AssignmentResult {
  VertexTargets targets;
  std::vector<std::size_t> matched_per_object;  // aligned with scene.objects
};

/// Equivalent heading for the same footprint within (reference - pi/2, reference + pi/2].
inline double fold_heading(double heading, double reference) {
  double d = normalize_angle(heading - reference);
  if (d > std::numbers::pi / 2) d -= std::numbers::pi;
  else if (d <= -std::numbers::pi / 2) d += std::numbers::pi;
  return normalize_angle(reference + d);
}

/// A vertex is positive when it lies inside a box of the trained class
/// (nearest center wins when boxes share it). Its anchor is the heading
/// variant, placed at the vertex, with the higher BEV IoU against that box;
/// the target heading is folded onto that anchor's half-turn so the
/// arcsin decode recovers the same footprint.
inline AssignmentResult assign_targets(const PointCloud& vertices, const std::vector<LabeledObject>& objects,
                                       const ModelConfig& model) {
  AssignmentResult res;
  res.targets = VertexTargets::background(vertices.size());
  res.matched_per_object.assign(objects.size(), 0);
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const Point& p = vertices.points[i];
    std::size_t best = objects.size();
    double best_d = 0.0;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      if (objects[o].cls != model.cls || !contains(objects[o].box, p)) continue;
      const Box3D& b = objects[o].box;
      const double d = std::hypot(p.x - b.x, p.y - b.y, p.z - b.z);
      if (best == objects.size() || d < best_d) {
        best = o;
        best_d = d;
      }
    }
    if (best == objects.size()) continue;
    const Box3D& gt = objects[best].box;
    std::size_t variant = 0;
    double best_iou = -1.0;
    for (std::size_t v = 0; v < model.variants(); ++v) {
      const double q = iou_bev(place_anchor(model.anchor, v, p.x, p.y, p.z).box, gt);
      if (q > best_iou) {
        best_iou = q;
        variant = v;
      }
    }
    const Anchor a = place_anchor(model.anchor, variant, p.x, p.y, p.z);
    Box3D folded = gt;
    folded.heading = fold_heading(gt.heading, a.box.heading);
    res.targets.label[i] = 1 + variant;
    res.targets.anchor[i] = static_cast<int>(variant);
    res.targets.residual[i] = encode(folded, a, model.z_norm);
    ++res.matched_per_object[best];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentToggles {
  bool rotate = false;  // global yaw in [-pi/4, pi/4]
  bool flip = false;    // mirror across the forward (x) axis, with probability 1/2
  bool jitter = false;  // per-object translation, sigma 0.25 m per axis
};

inline void rotate_scene(LabeledScene& s, double angle) {
  const double c = std::cos(angle), sn = std::sin(angle);
  for (auto& p : s.cloud.points) {
    const double x = c * p.x - sn * p.y, y = sn * p.x + c * p.y;
    p.x = x;
    p.y = y;
  }
  for (auto& o : s.objects) {
    const double x = c * o.box.x - sn * o.box.y, y = sn * o.box.x + c * o.box.y;
    o.box.x = x;
    o.box.y = y;
    o.box.heading = normalize_angle(o.box.heading + angle);
  }
}

inline void flip_scene(LabeledScene& s) {
  for (auto& p : s.cloud.points) p.y = -p.y;
  for (auto& o : s.objects) {
    o.box.y = -o.box.y;
    o.box.heading = normalize_angle(-o.box.heading);
  }
}

/// Deterministic per seed. Jitter moves each object's box and the points
/// inside it; a move that makes the box touch another object is undone.
inline LabeledScene augment(const LabeledScene& scene, std::uint64_t seed, const AugmentToggles& t) {
  LabeledScene s = scene;
  Rng rng(Rng::mix(seed, 0xa06));
  if (t.jitter) {
    for (std::size_t o = 0; o < s.objects.size(); ++o) {
      const double dx = rng.normal(0, 0.25), dy = rng.normal(0, 0.25), dz = rng.normal(0, 0.25);
      Box3D moved = s.objects[o].box;
      moved.x += dx;
      moved.y += dy;
      moved.z += dz;
      bool collide = false;
      for (std::size_t q = 0; q < s.objects.size() && !collide; ++q)
        collide = q != o && bev_intersection_area(moved, s.objects[q].box) > 0.0;
      if (collide) continue;
      for (auto& p : s.cloud.points)
        if (contains(s.objects[o].box, p, 0.01)) {
          p.x += dx;
          p.y += dy;
          p.z += dz;
        }
      s.objects[o].box = moved;
    }
  }
  if (t.flip && rng.uniform() < 0.5) flip_scene(s);
  if (t.rotate) rotate_scene(s, rng.uniform(-std::numbers::pi / 4, std::numbers::pi / 4));
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::size_t skipped = 0;
  std::vector<Tensor> m, v;  // aligned with ParamStore entries
};

/// One bias-corrected Adam update of every trainable entry. A step with a
/// non-finite gradient is skipped and counted; returns false in that case.
inline bool adam_step(ParamStore& store, AdamState& st, double lr) {
  auto& entries = store.entries();
  for (const auto& e : entries)
    if (e.trainable && !e.grad.all_finite()) {
      ++st.skipped;
      return false;
    }
  if (st.m.empty())
    for (const auto& e : entries) {
      st.m.emplace_back(e.value.shape());
      st.v.emplace_back(e.value.shape());
    }
  if (st.m.size() != entries.size()) throw DimensionError("optimizer state does not match parameters");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable) continue;
    if (e.grad.shape() != e.value.shape() || st.m[i].shape() != e.value.shape())
      throw DimensionError("gradient shape mismatch for " + e.name);
    auto& w = e.value.storage();
    const auto& g = e.grad.storage();
    auto& m = st.m[i].storage();
    auto& v = st.v[i].storage();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + st.epsilon);
    }
  }
  return true;
}

/// lr0 * decay^floor(step / interval).
inline double learning_rate(double lr0, double decay, std::size_t interval, std::size_t step) {
  return lr0 * std::pow(decay, static_cast<double>(step / interval));
}

// ---------------------------------------------------------------------------
// Training loop

/// Desk-scale defaults: 5k steps, batch 2, lr 0.001 halved every 2k steps.
/// Full-scale schedules (1400K/1000K steps): car lr 0.125 decay 0.1 every
/// 400K; pedestrian 0.25 / 0.25 / 400K; cyclist 0.32 / 0.25 / 400K.
struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 2;
  double learning_rate = 0.001;
  double decay = 0.5;
  std::size_t decay_interval = 2000;
  std::uint64_t seed = 7;
  AugmentToggles augment{true, true, false};
  LossWeights weights;
  LossOptions loss;
  /// Validation every this many steps (0: only after the last step).
  std::size_t eval_interval = 0;
  std::size_t log_interval = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (!(decay > 0 && decay <= 1)) throw ConfigError("decay factor must be in (0, 1]");
    if (decay_interval < 1) throw ConfigError("decay interval must be positive");
    weights.validate();
  }
};

struct StepLog {
  std::size_t step = 0;
  double cls = 0, loc = 0, reg = 0, total = 0, lr = 0;
};

inline std::string format_step_log(const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", s.step, s.cls, s.loc, s.reg, s.total, s.lr);
  return buf;
}

struct ValidationLog {
  std::size_t step = 0;
  std::optional<double> ap_3d;
  std::optional<double> ap_bev;
};

struct TrainResult {
  ParamStore store;
  std::vector<StepLog> history;
  std::vector<ValidationLog> validation;
  std::size_t skipped_steps = 0;
};

struct SceneLoss {
  double cls = 0, loc = 0, reg = 0, total = 0;
};

/// Forward + backward on one scene; gradients are added into the store
/// scaled by `grad_scale`.
inline SceneLoss scene_gradient(ParamStore& store, const ModelConfig& model, const PreprocessConfig& pre,
                                const TrainConfig& cfg, const LabeledScene& scene, double grad_scale) {
  if (scene.cloud.empty()) return {};
  const Prepared prep = prepare(scene.cloud, pre);
  const AssignmentResult assign = assign_targets(prep.vertices, scene.objects, model);
  const GraphIndex idx(prep.graph);
  Tape tape;
  const Prediction pred = predict(tape, store, model, prep.vertices, idx, Mode::train);
  Var cls = classification_loss(pred.probs, assign.targets.label);
  Var loc = localization_loss(pred.residuals, assign.targets, cfg.loss.huber_delta);
  Var reg = regression_loss(pred.residuals, assign.targets, cfg.loss.smooth_l1_beta);
  Var total = total_loss(reg, cls, loc, cfg.weights);
  tape.backward(scale(total, grad_scale));
  return {cls.value()[0], loc.value()[0], reg.value()[0], total.value()[0]};
}

inline std::vector<EvalItem> run_inference(ParamStore& store, const ModelConfig& model, const PreprocessConfig& pre,
                                           const InferenceConfig& inf, const std::vector<LabeledScene>& scenes) {
  std::vector<EvalItem> items;
  for (const auto& s : scenes) items.push_back({infer(store, model, pre, inf, s.cloud), s.objects});
  return items;
}

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(const ValidationLog&)> on_validation;
};

/// Deterministic for a fixed seed: scene order is a seeded shuffle per
/// epoch, augmentation is seeded per (step, slot), and batch gradients are
/// summed in slot order.
inline TrainResult train_loop(const ModelConfig& model, const PreprocessConfig& pre, const TrainConfig& cfg,
                              const InferenceConfig& inf, const EvalConfig& eval_cfg,
                              const std::vector<LabeledScene>& train_set, const std::vector<LabeledScene>& val_set,
                              const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training dataset is empty");
  TrainResult res;
  init_model(res.store, model, cfg.seed);
  AdamState adam;
  Rng order_rng(Rng::mix(cfg.seed, 0x0de4));
  std::vector<std::size_t> order(train_set.size());
  std::size_t cursor = order.size();

  auto validate = [&](std::size_t step) {
    if (val_set.empty()) return;
    const auto items = run_inference(res.store, model, pre, inf, val_set);
    ValidationLog v{step, evaluate_class(items, model.cls, eval_cfg, IouKind::iou3d).ap,
                    evaluate_class(items, model.cls, eval_cfg, IouKind::bev).ap};
    res.validation.push_back(v);
    if (hooks.on_validation) hooks.on_validation(v);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = learning_rate(cfg.learning_rate, cfg.decay, cfg.decay_interval, step);
    res.store.zero_grad();
    StepLog log{step, 0, 0, 0, 0, lr};
    for (std::size_t slot = 0; slot < cfg.batch_size; ++slot) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i-- > 1;)
          std::swap(order[i], order[static_cast<std::size_t>(order_rng.next() % (i + 1))]);
        cursor = 0;
      }
      const LabeledScene& base = train_set[order[cursor++]];
      const LabeledScene scene = augment(base, Rng::mix(cfg.seed, step * 64 + slot), cfg.augment);
      const SceneLoss l = scene_gradient(res.store, model, pre, cfg, scene, 1.0 / static_cast<double>(cfg.batch_size));
      const double k = 1.0 / static_cast<double>(cfg.batch_size);
      log.cls += k * l.cls;
      log.loc += k * l.loc;
      log.reg += k * l.reg;
      log.total += k * l.total;
    }
    if (!adam_step(res.store, adam, lr)) ++res.skipped_steps;
    res.history.push_back(log);
    if (hooks.on_step && (step % cfg.log_interval == 0 || step + 1 == cfg.steps)) hooks.on_step(log);
    if (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && step + 1 != cfg.steps) validate(step + 1);
  }
  validate(cfg.steps);
  return res;
}

}  // namespace gnn3d
