#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gnn3d/error.hpp"

namespace gnn3d {

/// LiDAR return in the sensor frame: x forward, y left, z up (meters).
struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double reflectance = 0.0;

  bool operator==(const Point&) const = default;
};

struct PointCloud {
  std::vector<Point> points;
  std::string frame_id = "velodyne";

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

using Vec3 = std::array<double, 3>;

inline double horizontal_range(const Point& p) { return std::hypot(p.x, p.y); }

enum class ObjectClass { car, pedestrian, cyclist };

inline constexpr std::array<ObjectClass, 3> kAllClasses = {ObjectClass::car, ObjectClass::pedestrian,
                                                          ObjectClass::cyclist};

inline const char* class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::car: return "Car";
    case ObjectClass::pedestrian: return "Pedestrian";
    case ObjectClass::cyclist: return "Cyclist";
  }
  return "?";
}

inline std::optional<ObjectClass> parse_class(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "car") return ObjectClass::car;
  if (lower == "pedestrian") return ObjectClass::pedestrian;
  if (lower == "cyclist") return ObjectClass::cyclist;
  return std::nullopt;
}

inline ObjectClass require_class(const std::string& s) {
  auto c = parse_class(s);
  if (!c) throw ConfigError("unknown class '" + s + "'");
  return *c;
}

}  // namespace gnn3d
