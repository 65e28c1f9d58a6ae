#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnn3d/error.hpp"
#include "gnn3d/pointcloud.hpp"

namespace gnn3d {

/// Directed neighbor lists in CSR form. The edges of vertex u occupy
/// [offsets[u], offsets[u + 1]), sorted by neighbor index; deltas[e] is
/// x_v - x_u for edge e = (u, v).
struct Graph {
  std::size_t vertex_count = 0;
  double radius = 0.0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> neighbors;
  std::vector<Vec3> deltas;

  std::size_t edge_count() const { return neighbors.size(); }
  std::size_t degree(std::size_t u) const { return offsets[u + 1] - offsets[u]; }
  std::span<const std::size_t> neighbors_of(std::size_t u) const {
    return {neighbors.data() + offsets[u], degree(u)};
  }
  /// Source vertex of every edge, aligned with `neighbors`.
  std::vector<std::size_t> sources() const {
    std::vector<std::size_t> s(edge_count());
    for (std::size_t u = 0; u < vertex_count; ++u)
      for (std::size_t e = offsets[u]; e < offsets[u + 1]; ++e) s[e] = u;
    return s;
  }
};

/// Uniform hash grid with cell edge equal to the query radius, so a radius
/// query touches the 27 cells around the query cell.
class SpatialHash {
 public:
  SpatialHash(const PointCloud& cloud, double cell) : cell_(cell) {
    for (std::size_t i = 0; i < cloud.points.size(); ++i) cells_[key(cloud.points[i])].push_back(i);
  }

  double cell() const { return cell_; }

  template <typename Fn>
  void for_each_candidate(const Point& p, Fn&& fn) const {
    const Key c = key(p);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == cells_.end()) continue;
          for (std::size_t idx : it->second) fn(idx);
        }
  }

 private:
  using Key = std::array<std::int64_t, 3>;
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return static_cast<std::size_t>(k[0] * 73856093LL ^ k[1] * 19349669LL ^ k[2] * 83492791LL);
    }
  };
  Key key(const Point& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x / cell_)), static_cast<std::int64_t>(std::floor(p.y / cell_)),
            static_cast<std::int64_t>(std::floor(p.z / cell_))};
  }

  double cell_;
  std::unordered_map<Key, std::vector<std::size_t>, KeyHash> cells_;
};

inline constexpr std::size_t kUnlimitedNeighbors = std::numeric_limits<std::size_t>::max();

/// Radius graph with a nearest-k cap per vertex (ties by lower index). The
/// seed is accepted for interface stability; the construction is
/// deterministic without it.
inline Graph build_graph(const PointCloud& cloud, double radius, std::size_t max_neighbors,
                         std::uint64_t /*seed*/ = 0) {
  if (!(radius > 0.0)) throw ParameterError("graph radius must be positive");
  if (max_neighbors == 0) throw ParameterError("max_neighbors must be at least 1");
  Graph g;
  g.vertex_count = cloud.size();
  g.radius = radius;
  g.offsets.assign(1, 0);
  const SpatialHash hash(cloud, radius);
  const double r2 = radius * radius;
  struct Cand {
    double d2;
    std::size_t idx;
  };
  std::vector<Cand> cand;
  for (std::size_t u = 0; u < cloud.size(); ++u) {
    const Point& pu = cloud.points[u];
    cand.clear();
    hash.for_each_candidate(pu, [&](std::size_t v) {
      if (v == u) return;
      const Point& pv = cloud.points[v];
      const double dx = pv.x - pu.x, dy = pv.y - pu.y, dz = pv.z - pu.z;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 <= r2) cand.push_back({d2, v});
    });
    if (cand.size() > max_neighbors) {
      std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(max_neighbors), cand.end(),
                       [](const Cand& a, const Cand& b) { return a.d2 < b.d2 || (a.d2 == b.d2 && a.idx < b.idx); });
      cand.resize(max_neighbors);
    }
    std::sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.idx < b.idx; });
    for (const auto& c : cand) {
      const Point& pv = cloud.points[c.idx];
      g.neighbors.push_back(c.idx);
      g.deltas.push_back({pv.x - pu.x, pv.y - pu.y, pv.z - pu.z});
    }
    g.offsets.push_back(g.neighbors.size());
  }
  return g;
}

/// Text dump: vertex count on the first line, then "u v dx dy dz" per edge.
inline std::string format_edge_list(const Graph& g) {
  std::string out = std::to_string(g.vertex_count) + "\n";
  char buf[160];
  for (std::size_t u = 0; u < g.vertex_count; ++u)
    for (std::size_t e = g.offsets[u]; e < g.offsets[u + 1]; ++e) {
      std::snprintf(buf, sizeof buf, "%zu %zu %.6f %.6f %.6f\n", u, g.neighbors[e], g.deltas[e][0], g.deltas[e][1],
                    g.deltas[e][2]);
      out += buf;
    }
  return out;
}

}  // namespace gnn3d
