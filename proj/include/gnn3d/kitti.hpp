#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gnn3d/boxes.hpp"
#include "gnn3d/checkpoint.hpp"
#include "gnn3d/error.hpp"
#include "gnn3d/pointcloud.hpp"

namespace gnn3d {

// ---------------------------------------------------------------------------
// Velodyne scans: little-endian float32 x, y, z, reflectance per point.

struct VelodyneScan {
  PointCloud cloud;
  std::size_t skipped_nan = 0;
};

inline VelodyneScan read_velodyne(const std::vector<std::uint8_t>& data) {
  constexpr std::size_t kRecord = 16;
  if (data.size() % kRecord != 0)
    throw FormatError("trailing partial velodyne record", static_cast<long long>(data.size() / kRecord * kRecord));
  VelodyneScan scan;
  scan.cloud.points.reserve(data.size() / kRecord);
  bytes::Reader in(data);
  while (!in.done()) {
    const float x = in.get<float>(), y = in.get<float>(), z = in.get<float>(), r = in.get<float>();
    if (std::isnan(x) || std::isnan(y) || std::isnan(z)) {
      ++scan.skipped_nan;
      continue;
    }
    scan.cloud.points.push_back({x, y, z, std::clamp(static_cast<double>(r), 0.0, 1.0)});
  }
  return scan;
}

/// Points are narrowed to float32.
inline std::vector<std::uint8_t> write_velodyne(const PointCloud& cloud) {
  std::vector<std::uint8_t> out;
  out.reserve(cloud.size() * 16);
  for (const auto& p : cloud.points) {
    bytes::put<float>(out, static_cast<float>(p.x));
    bytes::put<float>(out, static_cast<float>(p.y));
    bytes::put<float>(out, static_cast<float>(p.z));
    bytes::put<float>(out, static_cast<float>(p.reflectance));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calibration

using Mat34 = Eigen::Matrix<double, 3, 4, Eigen::RowMajor>;
using Mat3 = Eigen::Matrix3d;

struct Calibration {
  Mat34 projection = Mat34::Zero();       // P2, rectified camera to image
  Mat3 rectification = Mat3::Identity();  // R0_rect
  Mat34 lidar_to_camera = Mat34::Zero();  // Tr_velo_to_cam

  /// Every "key: values" line in file order, for faithful re-serialization.
  std::vector<std::pair<std::string, std::vector<double>>> entries;

  static Calibration identity() {
    Calibration c;
    c.projection.block<3, 3>(0, 0) = Mat3::Identity();
    c.lidar_to_camera.block<3, 3>(0, 0) = Mat3::Identity();
    return c;
  }

  /// LiDAR point to rectified camera coordinates.
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p) const {
    return rectification * (lidar_to_camera.block<3, 3>(0, 0) * p + lidar_to_camera.col(3));
  }

  Eigen::Vector3d to_lidar(const Eigen::Vector3d& cam) const {
    const Eigen::Vector3d unrect = rectification.inverse() * cam;
    return lidar_to_camera.block<3, 3>(0, 0).inverse() * (unrect - lidar_to_camera.col(3));
  }

  /// Direction vectors ignore the translation.
  Eigen::Vector3d direction_to_lidar(const Eigen::Vector3d& cam) const {
    return lidar_to_camera.block<3, 3>(0, 0).inverse() * (rectification.inverse() * cam);
  }
  Eigen::Vector3d direction_to_camera(const Eigen::Vector3d& p) const {
    return rectification * (lidar_to_camera.block<3, 3>(0, 0) * p);
  }
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline double parse_real(const std::string& s, long long lineno) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("not a number: '" + s + "'", lineno);
  }
  if (used != s.size()) throw FormatError("not a number: '" + s + "'", lineno);
  return v;
}

}  // namespace detail

inline Calibration read_calib(const std::string& text) {
  Calibration calib;
  std::istringstream in(text);
  std::string line;
  long long lineno = 0;
  bool have_p2 = false, have_r0 = false, have_tr = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw FormatError("expected 'key: values'", lineno);
    std::string key = line.substr(0, colon);
    std::vector<double> values;
    for (const auto& tok : detail::split_ws(line.substr(colon + 1))) values.push_back(detail::parse_real(tok, lineno));
    auto expect = [&](std::size_t n) {
      if (values.size() != n)
        throw FormatError(key + " needs " + std::to_string(n) + " values, got " + std::to_string(values.size()), lineno);
    };
    if (key == "P2") {
      expect(12);
      for (int i = 0; i < 12; ++i) calib.projection(i / 4, i % 4) = values[i];
      have_p2 = true;
    } else if (key == "R0_rect" || key == "R_rect") {
      expect(9);
      for (int i = 0; i < 9; ++i) calib.rectification(i / 3, i % 3) = values[i];
      have_r0 = true;
    } else if (key == "Tr_velo_to_cam" || key == "Tr_velo_cam") {
      expect(12);
      for (int i = 0; i < 12; ++i) calib.lidar_to_camera(i / 4, i % 4) = values[i];
      have_tr = true;
    }
    calib.entries.emplace_back(std::move(key), std::move(values));
  }
  if (!have_p2 || !have_r0 || !have_tr) throw FormatError("calibration lacks P2, R0_rect or Tr_velo_to_cam", lineno);
  if (!calib.projection.allFinite() || !calib.rectification.allFinite() || !calib.lidar_to_camera.allFinite())
    throw FormatError("non-finite calibration matrix", lineno);
  return calib;
}

/// Writes every stored entry as "key: v v v" with %.12e values.
inline std::string write_calib(const Calibration& calib) {
  std::string out;
  char buf[64];
  for (const auto& [key, values] : calib.entries) {
    out += key + ":";
    for (double v : values) {
      std::snprintf(buf, sizeof buf, " %.12e", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels

enum class Difficulty { easy, moderate, hard };

/// One label_2 line in camera coordinates.
struct KittiLabel {
  std::string type;
  double truncation = 0.0;
  int occlusion = 0;
  double alpha = 0.0;
  std::array<double, 4> bbox{};  // left, top, right, bottom (pixels)
  double h = 0.0, w = 0.0, l = 0.0;
  double x = 0.0, y = 0.0, z = 0.0;  // bottom center, rectified camera frame
  double rotation_y = 0.0;
  std::optional<double> score;
};

inline std::vector<KittiLabel> parse_label_records(const std::string& text) {
  std::vector<KittiLabel> out;
  std::istringstream in(text);
  std::string line;
  long long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto tok = detail::split_ws(line);
    if (tok.size() != 15 && tok.size() != 16)
      throw FormatError("label line has " + std::to_string(tok.size()) + " fields, expected 15 or 16", lineno);
    KittiLabel r;
    r.type = tok[0];
    std::vector<double> v;
    for (std::size_t i = 1; i < tok.size(); ++i) v.push_back(detail::parse_real(tok[i], lineno));
    r.truncation = v[0];
    r.occlusion = static_cast<int>(v[1]);
    r.alpha = v[2];
    r.bbox = {v[3], v[4], v[5], v[6]};
    r.h = v[7];
    r.w = v[8];
    r.l = v[9];
    r.x = v[10];
    r.y = v[11];
    r.z = v[12];
    r.rotation_y = v[13];
    if (v.size() == 15) r.score = v[14];
    out.push_back(r);
  }
  return out;
}

/// KITTI devkit layout: %.2f throughout, occlusion as an integer.
inline std::string format_label_records(const std::vector<KittiLabel>& records) {
  std::string out;
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f", r.type.c_str(),
                  r.truncation, r.occlusion, r.alpha, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3], r.h, r.w, r.l, r.x,
                  r.y, r.z, r.rotation_y);
    out += buf;
    if (r.score) {
      std::snprintf(buf, sizeof buf, " %.2f", *r.score);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

/// KITTI benchmark difficulty from 2D box height, occlusion and truncation.
inline std::optional<Difficulty> kitti_difficulty(const KittiLabel& r) {
  const double height = r.bbox[3] - r.bbox[1];
  if (height >= 40 && r.occlusion <= 0 && r.truncation <= 0.15) return Difficulty::easy;
  if (height >= 25 && r.occlusion <= 1 && r.truncation <= 0.30) return Difficulty::moderate;
  if (height >= 25 && r.occlusion <= 2 && r.truncation <= 0.50) return Difficulty::hard;
  return std::nullopt;
}

inline Box3D label_to_box(const KittiLabel& r, const Calibration& calib) {
  const Eigen::Vector3d center_cam(r.x, r.y - 0.5 * r.h, r.z);
  const Eigen::Vector3d c = calib.to_lidar(center_cam);
  const Eigen::Vector3d dir_cam(std::cos(r.rotation_y), 0.0, -std::sin(r.rotation_y));
  const Eigen::Vector3d d = calib.direction_to_lidar(dir_cam);
  return {c.x(), c.y(), c.z(), r.l, r.w, r.h, normalize_angle(std::atan2(d.y(), d.x()))};
}

inline KittiLabel box_to_label(ObjectClass cls, const Box3D& b, const Calibration& calib) {
  KittiLabel r;
  r.type = class_name(cls);
  r.h = b.h;
  r.w = b.w;
  r.l = b.l;
  const Eigen::Vector3d c = calib.to_camera(Eigen::Vector3d(b.x, b.y, b.z));
  r.x = c.x();
  r.y = c.y() + 0.5 * b.h;
  r.z = c.z();
  const Eigen::Vector3d d = calib.direction_to_camera(Eigen::Vector3d(std::cos(b.heading), std::sin(b.heading), 0.0));
  r.rotation_y = normalize_angle(std::atan2(-d.z(), d.x()));
  r.alpha = normalize_angle(r.rotation_y - std::atan2(r.x, r.z));
  return r;
}

struct LabeledObject {
  ObjectClass cls = ObjectClass::car;
  Box3D box;
  std::optional<Difficulty> difficulty;
};

/// Car, Pedestrian and Cyclist lines become LiDAR-frame boxes; DontCare and
/// other KITTI types are dropped.
inline std::vector<LabeledObject> read_labels(const std::string& text, const Calibration& calib) {
  std::vector<LabeledObject> out;
  for (const auto& r : parse_label_records(text)) {
    auto cls = parse_class(r.type);
    if (!cls) continue;
    out.push_back({*cls, label_to_box(r, calib), kitti_difficulty(r)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frustum crop

/// Keeps points in front of the camera whose image projection falls inside
/// [0, width) x [0, height). Order is preserved.
inline PointCloud crop_to_frustum(const PointCloud& cloud, const Calibration& calib, double width, double height) {
  PointCloud out;
  out.frame_id = cloud.frame_id;
  for (const auto& p : cloud.points) {
    const Eigen::Vector3d cam = calib.to_camera(Eigen::Vector3d(p.x, p.y, p.z));
    if (!(cam.z() > 0.0)) continue;
    const Eigen::Vector3d pix = calib.projection.block<3, 3>(0, 0) * cam + calib.projection.col(3);
    if (!(pix.z() > 0.0)) continue;
    const double u = pix.x() / pix.z(), v = pix.y() / pix.z();
    if (u >= 0.0 && u < width && v >= 0.0 && v < height) out.points.push_back(p);
  }
  return out;
}

}  // namespace gnn3d
