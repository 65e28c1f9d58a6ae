#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "gnn3d/boxes.hpp"
#include "gnn3d/kitti.hpp"
#include "gnn3d/scene.hpp"

namespace gnn3d {

enum class Interpolation { eleven_point, forty_point };

struct EvalConfig {
  /// Car 0.7, pedestrian 0.5, cyclist 0.5.
  std::array<double, 3> iou_threshold = {0.7, 0.5, 0.5};
  Interpolation interpolation = Interpolation::eleven_point;
  IouKind kind = IouKind::iou3d;
};

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct MatchResult {
  std::vector<bool> true_positive;  // per detection
  std::vector<bool> gt_matched;     // per ground truth
  std::vector<int> matched_gt;      // per detection, -1 when unmatched
};

/// Greedy matching in detection order: each detection takes the unmatched
/// ground truth with the highest IoU at or above the threshold.
inline MatchResult match_detections(const DetectionSet& dets, const std::vector<Box3D>& gts, double threshold,
                                    IouKind kind) {
  for (std::size_t i = 1; i < dets.size(); ++i)
    if (dets[i].score > dets[i - 1].score) throw ParameterError("detections must be sorted by descending score");
  MatchResult m{std::vector<bool>(dets.size(), false), std::vector<bool>(gts.size(), false),
                std::vector<int>(dets.size(), -1)};
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_matched[g]) continue;
      const double v = iou(dets[d].box, gts[g], kind);
      if (v >= threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      m.true_positive[d] = true;
      m.gt_matched[best_g] = true;
      m.matched_gt[d] = static_cast<int>(best_g);
    }
  }
  return m;
}

/// Precision/recall after each detection, in order.
inline std::vector<PRPoint> pr_curve(const std::vector<bool>& tp_flags, std::size_t num_gt) {
  std::vector<PRPoint> curve;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    tp += tp_flags[i];
    curve.push_back({static_cast<double>(tp) / static_cast<double>(num_gt),
                     static_cast<double>(tp) / static_cast<double>(i + 1)});
  }
  return curve;
}

/// Interpolated AP from per-detection TP flags in descending score order.
/// 11-point samples recall {0, 0.1, ..., 1}; 40-point samples {1/40, ..., 1}.
/// Absent when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<bool>& tp_flags, std::size_t num_gt,
                                               Interpolation interp) {
  if (num_gt == 0) return std::nullopt;
  const auto curve = pr_curve(tp_flags, num_gt);
  std::vector<double> levels;
  if (interp == Interpolation::eleven_point)
    for (int i = 0; i <= 10; ++i) levels.push_back(i / 10.0);
  else
    for (int i = 1; i <= 40; ++i) levels.push_back(i / 40.0);
  double sum = 0.0;
  for (double r : levels) {
    double best = 0.0;
    for (const auto& p : curve)
      if (p.recall >= r - 1e-12) best = std::max(best, p.precision);
    sum += best;
  }
  return sum / static_cast<double>(levels.size());
}

/// Scene-level inputs for dataset evaluation.
struct EvalItem {
  DetectionSet detections;
  std::vector<LabeledObject> ground_truth;
};

struct ClassResult {
  ObjectClass cls = ObjectClass::car;
  IouKind kind = IouKind::iou3d;
  std::optional<Difficulty> difficulty;
  std::size_t num_gt = 0;
  std::optional<double> ap;
  std::vector<PRPoint> curve;
};

namespace detail {

/// KITTI buckets are cumulative: moderate includes easy, hard includes both.
inline bool in_bucket(const std::optional<Difficulty>& object, const std::optional<Difficulty>& bucket) {
  if (!bucket) return true;
  return object && static_cast<int>(*object) <= static_cast<int>(*bucket);
}

}  // namespace detail

/// AP for one class over many scenes. Detections matched to ground truth
/// outside the difficulty bucket are ignored (neither TP nor FP).
inline ClassResult evaluate_class(const std::vector<EvalItem>& items, ObjectClass cls, const EvalConfig& cfg,
                                  IouKind kind, std::optional<Difficulty> bucket = std::nullopt) {
  struct Scored {
    double score;
    std::size_t order;
    bool tp;
  };
  std::vector<Scored> all;
  ClassResult res;
  res.cls = cls;
  res.kind = kind;
  res.difficulty = bucket;
  const double thr = cfg.iou_threshold[static_cast<std::size_t>(cls)];
  for (const auto& item : items) {
    DetectionSet dets;
    for (const auto& d : item.detections)
      if (d.cls == cls) dets.push_back(d);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Box3D> gts;
    std::vector<bool> counted;
    for (const auto& o : item.ground_truth)
      if (o.cls == cls) {
        gts.push_back(o.box);
        counted.push_back(detail::in_bucket(o.difficulty, bucket));
      }
    const MatchResult m = match_detections(dets, gts, thr, kind);
    for (bool c : counted) res.num_gt += c;
    for (std::size_t d = 0; d < dets.size(); ++d) {
      const bool ignored = m.matched_gt[d] >= 0 && !counted[static_cast<std::size_t>(m.matched_gt[d])];
      if (!ignored) all.push_back({dets[d].score, all.size(), m.true_positive[d]});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<bool> flags;
  for (const auto& s : all) flags.push_back(s.tp);
  res.ap = average_precision(flags, res.num_gt, cfg.interpolation);
  if (res.num_gt > 0) res.curve = pr_curve(flags, res.num_gt);
  return res;
}

inline const char* iou_kind_name(IouKind k) { return k == IouKind::bev ? "bev" : "3d"; }

/// Tab-separated report. "ap" rows: class, kind, difficulty, num_gt, AP (or
/// "absent"); "pr" rows follow with recall and precision per detection.
inline std::string format_report(const std::vector<ClassResult>& results) {
  std::string out = "#type\tclass\tkind\tdifficulty\tvalues\n";
  char buf[256];
  for (const auto& r : results) {
    const char* diff = r.difficulty ? difficulty_name(*r.difficulty) : "all";
    if (r.ap)
      std::snprintf(buf, sizeof buf, "ap\t%s\t%s\t%s\t%zu\t%.6f\n", class_name(r.cls), iou_kind_name(r.kind), diff,
                    r.num_gt, *r.ap);
    else
      std::snprintf(buf, sizeof buf, "ap\t%s\t%s\t%s\t%zu\tabsent\n", class_name(r.cls), iou_kind_name(r.kind), diff,
                    r.num_gt);
    out += buf;
    for (const auto& p : r.curve) {
      std::snprintf(buf, sizeof buf, "pr\t%s\t%s\t%s\t%.6f\t%.6f\n", class_name(r.cls), iou_kind_name(r.kind), diff,
                    p.recall, p.precision);
      out += buf;
    }
  }
  return out;
}

}  // namespace gnn3d
