#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnn3d/boxes.hpp"
#include "gnn3d/kitti.hpp"
#include "gnn3d/pointcloud.hpp"

namespace gnn3d {

struct LabeledScene {
  std::string id;
  PointCloud cloud;
  std::vector<LabeledObject> objects;
};

inline const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::moderate: return "moderate";
    case Difficulty::hard: return "hard";
  }
  return "?";
}

/// Scene files are JSON with a fixed key order:
///   {"format": "gnn3d-scene", "version": 1, "id", "frame_id",
///    "points": [[x, y, z, reflectance], ...],
///    "objects": [{"class", "box": {x, y, z, l, w, h, heading}, "difficulty"}]}
/// "difficulty" is null when unknown.
inline std::string scene_to_json(const LabeledScene& scene) {
  using json = nlohmann::ordered_json;
  json j;
  j["format"] = "gnn3d-scene";
  j["version"] = 1;
  j["id"] = scene.id;
  j["frame_id"] = scene.cloud.frame_id;
  json pts = json::array();
  for (const auto& p : scene.cloud.points) pts.push_back(json::array({p.x, p.y, p.z, p.reflectance}));
  j["points"] = std::move(pts);
  json objs = json::array();
  for (const auto& o : scene.objects) {
    json jo;
    jo["class"] = class_name(o.cls);
    jo["box"] = {{"x", o.box.x}, {"y", o.box.y}, {"z", o.box.z}, {"l", o.box.l},
                 {"w", o.box.w}, {"h", o.box.h}, {"heading", o.box.heading}};
    jo["difficulty"] = o.difficulty ? json(difficulty_name(*o.difficulty)) : json(nullptr);
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  return j.dump(1) + "\n";
}

inline LabeledScene scene_from_json(const std::string& text) {
  using json = nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("scene json: ") + e.what(), static_cast<long long>(e.byte));
  }
  try {
    if (j.at("format") != "gnn3d-scene") throw FormatError("not a gnn3d scene file", 0);
    if (j.at("version") != 1) throw FormatError("unsupported scene version", 0);
    LabeledScene s;
    s.id = j.at("id").get<std::string>();
    s.cloud.frame_id = j.at("frame_id").get<std::string>();
    for (const auto& p : j.at("points")) {
      if (p.size() != 4) throw FormatError("point needs 4 values", 0);
      s.cloud.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                                std::clamp(p[3].get<double>(), 0.0, 1.0)});
    }
    for (const auto& o : j.at("objects")) {
      LabeledObject lo;
      auto c = parse_class(o.at("class").get<std::string>());
      if (!c) throw FormatError("unknown class in scene", 0);
      lo.cls = *c;
      const auto& b = o.at("box");
      lo.box = {b.at("x").get<double>(), b.at("y").get<double>(), b.at("z").get<double>(), b.at("l").get<double>(),
                b.at("w").get<double>(), b.at("h").get<double>(), b.at("heading").get<double>()};
      if (!lo.box.valid()) throw FormatError("object box must have positive dimensions", 0);
      const auto& d = o.at("difficulty");
      if (!d.is_null()) {
        const auto name = d.get<std::string>();
        if (name == "easy") lo.difficulty = Difficulty::easy;
        else if (name == "moderate") lo.difficulty = Difficulty::moderate;
        else if (name == "hard") lo.difficulty = Difficulty::hard;
        else throw FormatError("unknown difficulty " + name, 0);
      }
      s.objects.push_back(lo);
    }
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("scene json: ") + e.what(), 0);
  }
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::data, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::data, "cannot write " + path);
  out << text;
}

}  // namespace gnn3d
