#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gnn3d/error.hpp"
#include "gnn3d/pointcloud.hpp"

namespace gnn3d {

/// Wrap an angle into (-pi, pi].
inline double normalize_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

/// Oriented box in the LiDAR frame. Length runs along the heading, which is
/// measured counter-clockwise about +z from +x.
struct Box3D {
  double x = 0.0, y = 0.0, z = 0.0;
  double l = 1.0, w = 1.0, h = 1.0;
  double heading = 0.0;

  bool valid() const { return l > 0.0 && w > 0.0 && h > 0.0 && std::isfinite(x + y + z + l + w + h + heading); }
  double volume() const { return l * w * h; }
  double bottom() const { return z - 0.5 * h; }
  double top() const { return z + 0.5 * h; }

  bool operator==(const Box3D&) const = default;
};

/// True when (px, py, pz) lies inside the box, boundary included within tol.
inline bool contains(const Box3D& b, double px, double py, double pz, double tol = 0.0) {
  const double dx = px - b.x, dy = py - b.y;
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double along = c * dx + s * dy;
  const double across = -s * dx + c * dy;
  return std::abs(along) <= 0.5 * b.l + tol && std::abs(across) <= 0.5 * b.w + tol &&
         std::abs(pz - b.z) <= 0.5 * b.h + tol;
}

inline bool contains(const Box3D& b, const Point& p, double tol = 0.0) { return contains(b, p.x, p.y, p.z, tol); }

// ---------------------------------------------------------------------------
// Anchors and the residual codec

/// Per-class anchor template. Anchors are placed at a vertex position with one
/// of the heading variants.
struct AnchorTemplate {
  double l = 3.9, w = 1.6, h = 1.5;
  std::vector<double> headings = {0.0, std::numbers::pi / 2};
};

/// Default anchor sizes (width, length, height): car (1.6, 3.9, 1.5),
/// pedestrian (0.6, 0.8, 1.73), cyclist (0.6, 1.76, 1.73); rotations 0 and 90 deg.
inline AnchorTemplate default_anchor(ObjectClass c) {
  switch (c) {
    case ObjectClass::car: return {3.9, 1.6, 1.5, {0.0, std::numbers::pi / 2}};
    case ObjectClass::pedestrian: return {0.8, 0.6, 1.73, {0.0, std::numbers::pi / 2}};
    case ObjectClass::cyclist: return {1.76, 0.6, 1.73, {0.0, std::numbers::pi / 2}};
  }
  return {};
}

struct Anchor {
  Box3D box;

  /// Diagonal of the anchor footprint.
  double da() const { return std::sqrt(box.w * box.w + box.l * box.l); }
};

inline Anchor place_anchor(const AnchorTemplate& t, std::size_t variant, double x, double y, double z) {
  return Anchor{Box3D{x, y, z, t.l, t.w, t.h, t.headings.at(variant)}};
}

struct BoxResidual {
  double dx = 0, dy = 0, dz = 0, dl = 0, dw = 0, dh = 0, dtheta = 0;

  std::array<double, 7> to_array() const { return {dx, dy, dz, dl, dw, dh, dtheta}; }
  static BoxResidual from(const double* v) { return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]}; }
};

/// Divisor for the vertical offset: the footprint diagonal (as x and y use),
/// or the anchor height.
enum class ZNorm { da, ha };

inline BoxResidual encode(const Box3D& gt, const Anchor& anchor, ZNorm z_norm = ZNorm::da) {
  const Box3D& a = anchor.box;
  const double d = anchor.da();
  return {(gt.x - a.x) / d,
          (gt.y - a.y) / d,
          (gt.z - a.z) / (z_norm == ZNorm::da ? d : a.h),
          std::log(gt.l / a.l),
          std::log(gt.w / a.w),
          std::log(gt.h / a.h),
          std::sin(gt.heading - a.heading)};
}

/// Inverse of encode on the principal arcsin branch. |dtheta| beyond 1 is
/// clamped and reported through `clamped`.
inline Box3D decode(const BoxResidual& r, const Anchor& anchor, ZNorm z_norm = ZNorm::da, bool* clamped = nullptr) {
  for (double v : r.to_array())
    if (!std::isfinite(v)) throw NumericError("non-finite box residual");
  const Box3D& a = anchor.box;
  const double d = anchor.da();
  double s = r.dtheta;
  if (clamped) *clamped = std::abs(s) > 1.0;
  s = std::clamp(s, -1.0, 1.0);
  return {a.x + r.dx * d,
          a.y + r.dy * d,
          a.z + r.dz * (z_norm == ZNorm::da ? d : a.h),
          a.l * std::exp(r.dl),
          a.w * std::exp(r.dw),
          a.h * std::exp(r.dh),
          normalize_angle(a.heading + std::asin(s))};
}

// ---------------------------------------------------------------------------
// Rotated intersection-over-union

struct Vec2 {
  double x, y;
};

inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  // Counter-clockwise.
  const std::array<Vec2, 4> local = {{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = {b.x + c * local[i].x - s * local[i].y, b.y + s * local[i].x + c * local[i].y};
  return out;
}

inline double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

namespace detail {

inline double cross(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

}  // namespace detail

/// Sutherland-Hodgman clip of a convex polygon against a convex CCW clip
/// polygon. Points within eps of a clip edge count as inside.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip, double eps = 1e-9) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2& p = subject[i];
      const Vec2& q = subject[(i + 1) % subject.size()];
      const double cp = detail::cross(a, b, p), cq = detail::cross(a, b, q);
      const bool pin = cp >= -eps, qin = cq >= -eps;
      if (pin) out.push_back(p);
      if (pin != qin) {
        const double t = cp / (cp - cq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  // Cheap reject on circumscribed circles.
  const double ra = 0.5 * std::hypot(a.l, a.w), rb = 0.5 * std::hypot(b.l, b.w);
  if (std::hypot(a.x - b.x, a.y - b.y) >= ra + rb) return 0.0;
  const auto poly = clip_convex({ca.begin(), ca.end()}, cb);
  if (poly.size() < 3) return 0.0;
  const double area = polygon_area(poly);
  return area < 1e-9 ? 0.0 : area;
}

inline double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.l * a.w + b.l * b.w - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou_3d(const Box3D& a, const Box3D& b) {
  const double zo = std::min(a.top(), b.top()) - std::max(a.bottom(), b.bottom());
  if (zo <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * zo;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

enum class IouKind { bev, iou3d };

inline double iou(const Box3D& a, const Box3D& b, IouKind kind) {
  return kind == IouKind::bev ? iou_bev(a, b) : iou_3d(a, b);
}

// ---------------------------------------------------------------------------
// Detections and non-maximum suppression

struct Detection {
  ObjectClass cls = ObjectClass::car;
  double score = 0.0;
  Box3D box;
};

using DetectionSet = std::vector<Detection>;

/// Weighted mean of boxes; headings are first folded to within pi/2 of the
/// first box, since a box turned by pi has the same extent.
inline Box3D weighted_mean_box(const std::vector<Box3D>& boxes, const std::vector<double>& weights) {
  const double ref = boxes.front().heading;
  double wsum = 0, x = 0, y = 0, z = 0, l = 0, w = 0, h = 0, c = 0, s = 0;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box3D& b = boxes[i];
    const double k = weights[i];
    const double th = ref + 0.5 * normalize_angle(2.0 * (b.heading - ref));
    wsum += k;
    x += k * b.x;
    y += k * b.y;
    z += k * b.z;
    l += k * b.l;
    w += k * b.w;
    h += k * b.h;
    c += k * std::cos(th);
    s += k * std::sin(th);
  }
  if (!(wsum > 0.0)) return boxes.front();
  return {x / wsum, y / wsum, z / wsum, l / wsum, w / wsum, h / wsum, normalize_angle(std::atan2(s, c))};
}

namespace detail {

inline DetectionSet greedy_suppress(const DetectionSet& dets, const std::array<double, 3>& threshold_per_class,
                                    IouKind kind, bool merge) {
  for (const auto& d : dets)
    if (!std::isfinite(d.score)) throw NumericError("non-finite detection score");
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> removed(dets.size(), false);
  DetectionSet kept;
  std::vector<Box3D> cluster;
  std::vector<double> weights;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    cluster.assign(1, dets[i].box);
    weights.assign(1, dets[i].score);
    const double thr = threshold_per_class[static_cast<std::size_t>(dets[i].cls)];
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (removed[j] || dets[j].cls != dets[i].cls) continue;
      if (iou(dets[i].box, dets[j].box, kind) > thr) {
        removed[j] = true;
        cluster.push_back(dets[j].box);
        weights.push_back(dets[j].score);
      }
    }
    kept.push_back(dets[i]);
    if (merge) kept.back().box = weighted_mean_box(cluster, weights);
  }
  return kept;
}

}  // namespace detail

/// Greedy per-class suppression: highest score first (ties keep the lower
/// input index first); drops boxes whose IoU with a kept box exceeds the
/// threshold for their class. Output is in kept order.
inline DetectionSet nms(const DetectionSet& dets, const std::array<double, 3>& threshold_per_class, IouKind kind) {
  return detail::greedy_suppress(dets, threshold_per_class, kind, false);
}

/// Same selection as nms, but each kept box becomes the score-weighted mean
/// of itself and the boxes it suppressed. Scores are unchanged.
inline DetectionSet nms_merge(const DetectionSet& dets, const std::array<double, 3>& threshold_per_class,
                              IouKind kind) {
  return detail::greedy_suppress(dets, threshold_per_class, kind, true);
}

inline DetectionSet nms(const DetectionSet& dets, double threshold, IouKind kind) {
  return nms(dets, {threshold, threshold, threshold}, kind);
}

// ---------------------------------------------------------------------------
// Detection files: one "class score x y z l w h theta" line per detection.

inline std::string format_detections(const DetectionSet& dets) {
  std::string out;
  char line[512];
  for (const auto& d : dets) {
    std::snprintf(line, sizeof line, "%s %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n", class_name(d.cls), d.score,
                  d.box.x, d.box.y, d.box.z, d.box.l, d.box.w, d.box.h, d.box.heading);
    out += line;
  }
  return out;
}

inline DetectionSet parse_detections(const std::string& text) {
  DetectionSet out;
  std::istringstream in(text);
  std::string line;
  long long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string name;
    Detection d;
    if (!(ls >> name >> d.score >> d.box.x >> d.box.y >> d.box.z >> d.box.l >> d.box.w >> d.box.h >> d.box.heading))
      throw FormatError("expected 'class score x y z l w h theta'", lineno);
    auto c = parse_class(name);
    if (!c) throw FormatError("unknown class " + name, lineno);
    d.cls = *c;
    out.push_back(d);
  }
  return out;
}

}  // namespace gnn3d
