#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gnn3d/error.hpp"
#include "gnn3d/pointcloud.hpp"

namespace gnn3d {

struct VoxelKey {
  std::int64_t ix = 0, iy = 0, iz = 0;
  int band = 0;

  auto operator<=>(const VoxelKey&) const = default;
};

inline VoxelKey voxel_of(const Point& p, double edge, int band = 0) {
  return {static_cast<std::int64_t>(std::floor(p.x / edge)), static_cast<std::int64_t>(std::floor(p.y / edge)),
          static_cast<std::int64_t>(std::floor(p.z / edge)), band};
}

/// Distance bands: a point with horizontal range r belongs to the first band
/// with r < max_range. The last band's max_range is infinite.
struct BandSpec {
  struct Band {
    double max_range;
    double edge;
  };
  std::vector<Band> bands;

  void validate() const {
    if (bands.empty()) throw ParameterError("band spec is empty");
    for (std::size_t i = 0; i < bands.size(); ++i) {
      if (!(bands[i].edge > 0.0)) throw ParameterError("voxel edge must be positive");
      if (i > 0 && !(bands[i].max_range > bands[i - 1].max_range))
        throw ParameterError("band thresholds must be strictly increasing");
      if (i > 0 && bands[i].edge > bands[i - 1].edge)
        throw ParameterError("voxel edges must not grow with range");
    }
    if (!std::isinf(bands.back().max_range)) throw ParameterError("last band must extend to inf");
  }

  int band_of(double range) const {
    for (std::size_t i = 0; i < bands.size(); ++i)
      if (range < bands[i].max_range) return static_cast<int>(i);
    return static_cast<int>(bands.size()) - 1;
  }

  double lower(int band) const { return band == 0 ? 0.0 : bands[band - 1].max_range; }

  /// Near bands coarse, far bands fine: [0, 20) 0.8 m, [20, 40) 0.65 m, beyond 0.5 m.
  static BandSpec defaults() { return {{{20.0, 0.8}, {40.0, 0.65}, {std::numeric_limits<double>::infinity(), 0.5}}}; }

  /// "20:0.8,40:0.65,inf:0.5"
  static BandSpec parse(const std::string& text) {
    BandSpec spec;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ParameterError("band '" + item + "' is not range:edge");
      try {
        const std::string r = item.substr(0, colon);
        const double range = (r == "inf") ? std::numeric_limits<double>::infinity() : std::stod(r);
        spec.bands.push_back({range, std::stod(item.substr(colon + 1))});
      } catch (const std::logic_error&) {
        throw ParameterError("band '" + item + "' is not range:edge");
      }
    }
    spec.validate();
    return spec;
  }

  std::string to_string() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < bands.size(); ++i) {
      if (i) out << ',';
      if (std::isinf(bands[i].max_range)) out << "inf";
      else out << bands[i].max_range;
      out << ':' << bands[i].edge;
    }
    return out.str();
  }
};

/// Downsampled cloud with the voxel each representative came from.
struct Downsampled {
  PointCloud cloud;
  std::vector<VoxelKey> keys;
};

namespace detail {

struct VoxelAccum {
  double x = 0, y = 0, z = 0, r = 0;
  std::size_t n = 0;
};

inline void emit(const std::map<VoxelKey, VoxelAccum>& voxels, Downsampled& out) {
  for (const auto& [key, acc] : voxels) {
    const double inv = 1.0 / static_cast<double>(acc.n);
    out.cloud.points.push_back({acc.x * inv, acc.y * inv, acc.z * inv, acc.r * inv});
    out.keys.push_back(key);
  }
}

}  // namespace detail

/// Centroid (and mean reflectance) per occupied voxel, in ascending key order.
inline Downsampled downsample_uniform_keyed(const PointCloud& cloud, double edge) {
  if (!(edge > 0.0)) throw ParameterError("voxel edge must be positive");
  std::map<VoxelKey, detail::VoxelAccum> voxels;
  for (const auto& p : cloud.points) {
    auto& a = voxels[voxel_of(p, edge)];
    a.x += p.x;
    a.y += p.y;
    a.z += p.z;
    a.r += p.reflectance;
    ++a.n;
  }
  Downsampled out;
  out.cloud.frame_id = cloud.frame_id;
  detail::emit(voxels, out);
  return out;
}

inline PointCloud downsample_uniform(const PointCloud& cloud, double edge) {
  return downsample_uniform_keyed(cloud, edge).cloud;
}

/// Per-band uniform downsampling with that band's edge; output is band-major,
/// then key order.
inline Downsampled downsample_distance_aware_keyed(const PointCloud& cloud, const BandSpec& bands) {
  bands.validate();
  std::map<VoxelKey, detail::VoxelAccum> voxels;  // band is the key's last field
  for (const auto& p : cloud.points) {
    const int b = bands.band_of(horizontal_range(p));
    VoxelKey k = voxel_of(p, bands.bands[b].edge, b);
    auto& a = voxels[k];
    a.x += p.x;
    a.y += p.y;
    a.z += p.z;
    a.r += p.reflectance;
    ++a.n;
  }
  // Re-key band-first for output ordering.
  std::map<std::tuple<int, std::int64_t, std::int64_t, std::int64_t>, VoxelKey> order;
  for (const auto& [k, a] : voxels) order.emplace(std::make_tuple(k.band, k.ix, k.iy, k.iz), k);
  Downsampled out;
  out.cloud.frame_id = cloud.frame_id;
  for (const auto& [_, k] : order) {
    const auto& a = voxels.at(k);
    const double inv = 1.0 / static_cast<double>(a.n);
    out.cloud.points.push_back({a.x * inv, a.y * inv, a.z * inv, a.r * inv});
    out.keys.push_back(k);
  }
  return out;
}

inline PointCloud downsample_distance_aware(const PointCloud& cloud, const BandSpec& bands) {
  return downsample_distance_aware_keyed(cloud, bands).cloud;
}

}  // namespace gnn3d
