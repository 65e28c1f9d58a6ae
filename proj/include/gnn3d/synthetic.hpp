#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "gnn3d/boxes.hpp"
#include "gnn3d/random.hpp"
#include "gnn3d/scene.hpp"

namespace gnn3d {

/// Parameters for synthetic LiDAR scenes. The sensor sits at the origin,
/// `sensor_height` above a flat ground plane.
struct SceneSpec {
  int min_objects = 1;
  int max_objects = 3;
  /// Relative sampling weight per class (car, pedestrian, cyclist).
  std::array<double, 3> class_mix = {1.0, 0.0, 0.0};
  /// Object dimensions are the class anchor size scaled by U(1 - j, 1 + j).
  double size_jitter = 0.08;
  double range_min = 5.0;
  double range_max = 40.0;
  double azimuth_min = -std::numbers::pi / 4;
  double azimuth_max = std::numbers::pi / 4;
  double sensor_range = 60.0;
  double sensor_height = 1.73;
  /// Surface returns per square meter of face at 1 m, falling off with 1/r^2.
  double density = 2500.0;
  int min_points_per_object = 12;
  int max_points_per_object = 600;
  int ground_points = 300;
  int clutter_clusters = 4;
  int clutter_points = 60;
  /// Minimum footprint gap between objects (meters).
  double separation = 0.5;
  int max_retries = 200;
};

namespace detail {

struct Face {
  std::array<double, 3> center;
  std::array<double, 3> normal;
  std::array<double, 3> u, v;  // half-extent edge vectors
};

inline std::vector<Face> box_faces(const Box3D& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  const std::array<double, 3> ax = {c, s, 0.0}, ay = {-s, c, 0.0}, az = {0.0, 0.0, 1.0};
  const double hl = 0.5 * b.l, hw = 0.5 * b.w, hh = 0.5 * b.h;
  auto scaled = [](const std::array<double, 3>& a, double k) { return std::array<double, 3>{a[0] * k, a[1] * k, a[2] * k}; };
  auto offset = [&](const std::array<double, 3>& a, double k) {
    return std::array<double, 3>{b.x + a[0] * k, b.y + a[1] * k, b.z + a[2] * k};
  };
  std::vector<Face> faces;
  faces.push_back({offset(ax, hl), ax, scaled(ay, hw), scaled(az, hh)});
  faces.push_back({offset(ax, -hl), scaled(ax, -1), scaled(ay, hw), scaled(az, hh)});
  faces.push_back({offset(ay, hw), ay, scaled(ax, hl), scaled(az, hh)});
  faces.push_back({offset(ay, -hw), scaled(ay, -1), scaled(ax, hl), scaled(az, hh)});
  faces.push_back({offset(az, hh), az, scaled(ax, hl), scaled(ay, hw)});
  return faces;
}

/// Points on the faces of `box` that face the origin. Count follows
/// density * area * cos(incidence) / range^2 unless `fixed_count` > 0.
/// Samples are inset 1 cm into the box so they test as contained.
inline std::vector<Point> sample_surface(const Box3D& box, double density, int min_points, int max_points,
                                         int fixed_count, double refl_lo, double refl_hi, Rng& rng) {
  constexpr double kInset = 0.01;
  const auto faces = box_faces(box);
  std::vector<double> weight(faces.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto& f = faces[i];
    const double r = std::sqrt(f.center[0] * f.center[0] + f.center[1] * f.center[1] + f.center[2] * f.center[2]);
    const double dot = (f.normal[0] * f.center[0] + f.normal[1] * f.center[1] + f.normal[2] * f.center[2]) / r;
    if (dot >= 0.0) continue;  // faces away from the sensor
    const double area = 4.0 * std::hypot(f.u[0], f.u[1], f.u[2]) * std::hypot(f.v[0], f.v[1], f.v[2]);
    weight[i] = density * area * (-dot) / (r * r);
    total += weight[i];
  }
  std::vector<Point> out;
  if (total <= 0.0) return out;
  int count = fixed_count > 0 ? fixed_count : static_cast<int>(std::lround(total));
  if (fixed_count <= 0) count = std::clamp(count, min_points, max_points);
  for (int k = 0; k < count; ++k) {
    double pick = rng.uniform() * total;
    std::size_t i = 0, last = 0;
    for (; i < faces.size(); ++i) {
      if (weight[i] == 0.0) continue;
      last = i;
      if (pick < weight[i]) break;
      pick -= weight[i];
    }
    if (i == faces.size()) i = last;
    const auto& f = faces[i];
    const double lu = std::hypot(f.u[0], f.u[1], f.u[2]), lv = std::hypot(f.v[0], f.v[1], f.v[2]);
    const double a = rng.uniform(-1.0, 1.0) * std::max(0.0, lu - kInset) / lu;
    const double bcoef = rng.uniform(-1.0, 1.0) * std::max(0.0, lv - kInset) / lv;
    Point p;
    p.x = f.center[0] + a * f.u[0] + bcoef * f.v[0] - kInset * f.normal[0];
    p.y = f.center[1] + a * f.u[1] + bcoef * f.v[1] - kInset * f.normal[1];
    p.z = f.center[2] + a * f.u[2] + bcoef * f.v[2] - kInset * f.normal[2];
    p.reflectance = rng.uniform(refl_lo, refl_hi);
    out.push_back(p);
  }
  return out;
}

inline Box3D inflate(const Box3D& b, double margin) {
  Box3D o = b;
  o.l += 2 * margin;
  o.w += 2 * margin;
  return o;
}

}  // namespace detail

/// Deterministic labeled scene for a seed.
inline LabeledScene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects || spec.range_min < 0 ||
      spec.range_max < spec.range_min || spec.range_max > spec.sensor_range || spec.density <= 0)
    throw ParameterError("inconsistent scene spec");
  Rng rng(Rng::mix(seed, 0x5ce7e));
  LabeledScene scene;
  scene.id = "synthetic_" + std::to_string(seed);
  const double ground = -spec.sensor_height;

  double mix_total = spec.class_mix[0] + spec.class_mix[1] + spec.class_mix[2];
  if (!(mix_total > 0)) throw ParameterError("class mix is all zero");

  const int wanted = rng.uniform_int(spec.min_objects, spec.max_objects);
  std::vector<Box3D> occupied;
  auto collides = [&](const Box3D& b) {
    for (const auto& o : occupied)
      if (bev_intersection_area(detail::inflate(b, 0.5 * spec.separation), detail::inflate(o, 0.5 * spec.separation)) > 0)
        return true;
    return false;
  };

  for (int n = 0; n < wanted; ++n) {
    double pick = rng.uniform() * mix_total;
    std::size_t ci = 0;
    while (ci < 2 && pick >= spec.class_mix[ci]) pick -= spec.class_mix[ci++];
    const ObjectClass cls = kAllClasses[ci];
    const AnchorTemplate t = default_anchor(cls);
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      Box3D b;
      b.l = t.l * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter);
      b.w = t.w * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter);
      b.h = t.h * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter);
      const double r = rng.uniform(spec.range_min, spec.range_max);
      const double az = rng.uniform(spec.azimuth_min, spec.azimuth_max);
      b.x = r * std::cos(az);
      b.y = r * std::sin(az);
      b.z = ground + 0.5 * b.h;
      b.heading = normalize_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
      const double reach = std::hypot(b.x, b.y) + 0.5 * std::hypot(b.l, b.w);
      if (reach > spec.sensor_range || collides(b)) continue;
      occupied.push_back(b);
      scene.objects.push_back({cls, b, std::nullopt});
      auto pts = detail::sample_surface(b, spec.density, spec.min_points_per_object, spec.max_points_per_object, 0,
                                        0.2, 0.9, rng);
      scene.cloud.points.insert(scene.cloud.points.end(), pts.begin(), pts.end());
      placed = true;
    }
    if (!placed) {
      if (n < spec.min_objects)
        throw GenerationError("could not place mandatory object " + std::to_string(n + 1) + " after " +
                              std::to_string(spec.max_retries) + " tries");
      break;
    }
  }

  // Clutter: small free-standing structures (poles, bushes) with a fixed
  // number of returns each.
  for (int c = 0; c < spec.clutter_clusters; ++c) {
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
      Box3D b;
      b.l = rng.uniform(0.2, 1.0);
      b.w = rng.uniform(0.2, 1.0);
      b.h = rng.uniform(0.4, 2.2);
      const double r = rng.uniform(spec.range_min, spec.range_max);
      const double az = rng.uniform(spec.azimuth_min, spec.azimuth_max);
      b.x = r * std::cos(az);
      b.y = r * std::sin(az);
      b.z = ground + 0.5 * b.h;
      b.heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
      if (collides(b)) continue;
      occupied.push_back(b);
      const int per = spec.clutter_points / std::max(1, spec.clutter_clusters);
      auto pts = detail::sample_surface(b, spec.density, 1, per, per, 0.0, 1.0, rng);
      scene.cloud.points.insert(scene.cloud.points.end(), pts.begin(), pts.end());
      break;
    }
  }

  // Ground returns, uniform in range and azimuth (areal density ~ 1/r), none
  // under object footprints.
  const double ground_near = std::max(1.0, 0.5 * spec.range_min);
  const double ground_far = std::min(spec.sensor_range, spec.range_max + 5.0);
  for (int g = 0; g < spec.ground_points; ++g) {
    const double r = rng.uniform(ground_near, ground_far);
    const double az = rng.uniform(spec.azimuth_min, spec.azimuth_max);
    Point p{r * std::cos(az), r * std::sin(az), ground + rng.uniform(-0.02, 0.02), rng.uniform(0.0, 0.3)};
    bool under = false;
    for (const auto& o : scene.objects) under = under || contains(detail::inflate(o.box, 0.1), p.x, p.y, o.box.z, 0.0);
    if (!under) scene.cloud.points.push_back(p);
  }
  return scene;
}

}  // namespace gnn3d
