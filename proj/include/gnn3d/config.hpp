#pragma once

#include <array>
#include <string>

#include <nlohmann/json.hpp>

#include "gnn3d/detector.hpp"
#include "gnn3d/eval.hpp"
#include "gnn3d/synthetic.hpp"
#include "gnn3d/train.hpp"

namespace gnn3d {

/// Where training and validation scenes come from. Empty directories mean
/// synthetic scenes generated from `synthetic`.
struct DataConfig {
  std::string train_dir;
  std::string val_dir;
  std::size_t train_scenes = 200;
  std::size_t val_scenes = 50;
  std::uint64_t train_seed = 1000;
  std::uint64_t val_seed = 900000;
  SceneSpec synthetic;
  /// Camera image size for frustum cropping of KITTI inputs.
  double image_width = 1242;
  double image_height = 375;
};

/// Every tunable of the pipeline. The JSON form produced by to_json() with
/// default values doubles as the schema: a config file may override any
/// subset of it, and any key not present there is rejected.
struct PipelineConfig {
  ObjectClass cls = ObjectClass::car;
  PreprocessConfig preprocess;
  GnnConfig gnn;
  std::size_t head_hidden = 64;
  std::array<AnchorTemplate, 3> anchors = {default_anchor(ObjectClass::car), default_anchor(ObjectClass::pedestrian),
                                           default_anchor(ObjectClass::cyclist)};
  ZNorm z_norm = ZNorm::da;
  InferenceConfig inference;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;

  ModelConfig model() const {
    ModelConfig m;
    m.cls = cls;
    m.gnn = gnn;
    m.head_hidden = head_hidden;
    m.anchor = anchors[static_cast<std::size_t>(cls)];
    m.z_norm = z_norm;
    return m;
  }

  void validate() const {
    gnn.validate();
    train.validate();
    preprocess.bands.validate();
    if (!(preprocess.radius > 0)) throw ConfigError("preprocess.radius must be positive");
    if (!(preprocess.uniform_edge > 0)) throw ConfigError("preprocess.uniform_edge must be positive");
    if (preprocess.max_neighbors < 1) throw ConfigError("preprocess.max_neighbors must be at least 1");
    if (head_hidden < 1) throw ConfigError("head_hidden must be positive");
    for (const auto& a : anchors) {
      if (!(a.l > 0 && a.w > 0 && a.h > 0)) throw ConfigError("anchor dimensions must be positive");
      if (a.headings.empty()) throw ConfigError("anchor headings must not be empty");
    }
    for (double t : inference.nms_threshold)
      if (!(t > 0 && t <= 1)) throw ConfigError("NMS thresholds must be in (0, 1]");
    for (double t : eval.iou_threshold)
      if (!(t > 0 && t <= 1)) throw ConfigError("eval IoU thresholds must be in (0, 1]");
    if (!(inference.score_threshold >= 0 && inference.score_threshold <= 1))
      throw ConfigError("inference.score_threshold must be in [0, 1]");
    if (train.log_interval < 1) throw ConfigError("train.log_interval must be at least 1");
    const SceneSpec& s = data.synthetic;
    if (s.min_objects < 0 || s.max_objects < s.min_objects) throw ConfigError("synthetic object counts are inconsistent");
    if (!(s.range_min > 0 && s.range_max > s.range_min)) throw ConfigError("synthetic range is inconsistent");
    if (!(s.density > 0)) throw ConfigError("synthetic density must be positive");
  }

  nlohmann::ordered_json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& overrides);
};

namespace detail {

template <class T>
nlohmann::ordered_json per_class(const std::array<T, 3>& v) {
  return {{"Car", v[0]}, {"Pedestrian", v[1]}, {"Cyclist", v[2]}};
}

template <class T>
std::array<T, 3> per_class_from(const nlohmann::json& j) {
  return {j.at("Car").get<T>(), j.at("Pedestrian").get<T>(), j.at("Cyclist").get<T>()};
}

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() || a.is_number_unsigned()) || !b.is_number_float();
  return a.type() == b.type();
}

/// Overlays `over` onto `base`, rejecting keys and types the base lacks.
inline void merge_strict(nlohmann::ordered_json& base, const nlohmann::json& over, const std::string& path) {
  if (!over.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + " must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else if (slot.is_array()) {
      if (!it.value().is_array()) throw ConfigError(key + " must be an array");
      slot = it.value();
    } else {
      if (!same_kind(slot, it.value())) throw ConfigError(key + " has the wrong type (expected " + slot.type_name() + ")");
      if (slot.is_number_unsigned() && it.value().is_number_integer() && !it.value().is_number_unsigned())
        throw ConfigError(key + " must be non-negative");
      slot = it.value();
    }
  }
}

inline Interpolation parse_interpolation(const std::string& s) {
  if (s == "11") return Interpolation::eleven_point;
  if (s == "40") return Interpolation::forty_point;
  throw ConfigError("interpolation must be \"11\" or \"40\"");
}

inline IouKind parse_iou_kind(const std::string& s) {
  if (s == "3d") return IouKind::iou3d;
  if (s == "bev") return IouKind::bev;
  throw ConfigError("IoU kind must be \"3d\" or \"bev\"");
}

}  // namespace detail

inline nlohmann::ordered_json PipelineConfig::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["class"] = class_name(cls);
  j["preprocess"] = {{"distance_aware", preprocess.distance_aware},
                     {"bands", preprocess.bands.to_string()},
                     {"uniform_edge", preprocess.uniform_edge},
                     {"radius", preprocess.radius},
                     {"max_neighbors", preprocess.max_neighbors}};
  j["gnn"] = {{"features", gnn.features},
              {"layers", gnn.layers},
              {"attention_hidden", gnn.attention_hidden},
              {"mapping_hidden", gnn.mapping_hidden},
              {"scalar_attention", gnn.scalar_attention}};
  j["head_hidden"] = head_hidden;
  ordered_json anchors_json;
  for (ObjectClass c : kAllClasses) {
    const auto& a = anchors[static_cast<std::size_t>(c)];
    anchors_json[class_name(c)] = {{"l", a.l}, {"w", a.w}, {"h", a.h}, {"headings", a.headings}};
  }
  j["anchors"] = anchors_json;
  j["z_norm"] = z_norm == ZNorm::da ? "da" : "ha";
  j["loss"] = {{"alpha", train.weights.alpha},
               {"beta", train.weights.beta},
               {"gamma", train.weights.gamma},
               {"huber_delta", train.loss.huber_delta},
               {"smooth_l1_beta", train.loss.smooth_l1_beta}};
  j["inference"] = {{"score_threshold", inference.score_threshold},
                    {"nms_threshold", detail::per_class(inference.nms_threshold)},
                    {"nms_kind", iou_kind_name(inference.nms_kind)},
                    {"merge", inference.merge}};
  j["train"] = {{"steps", train.steps},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"decay", train.decay},
                {"decay_interval", train.decay_interval},
                {"seed", train.seed},
                {"augment", {{"rotate", train.augment.rotate}, {"flip", train.augment.flip}, {"jitter", train.augment.jitter}}},
                {"eval_interval", train.eval_interval},
                {"log_interval", train.log_interval}};
  j["eval"] = {{"iou_threshold", detail::per_class(eval.iou_threshold)},
               {"interpolation", eval.interpolation == Interpolation::eleven_point ? "11" : "40"},
               {"kind", iou_kind_name(eval.kind)}};
  const SceneSpec& s = data.synthetic;
  j["data"] = {{"train_dir", data.train_dir},
               {"val_dir", data.val_dir},
               {"train_scenes", data.train_scenes},
               {"val_scenes", data.val_scenes},
               {"train_seed", data.train_seed},
               {"val_seed", data.val_seed},
               {"image_width", data.image_width},
               {"image_height", data.image_height},
               {"synthetic",
                {{"min_objects", s.min_objects},
                 {"max_objects", s.max_objects},
                 {"class_mix", detail::per_class(s.class_mix)},
                 {"size_jitter", s.size_jitter},
                 {"range_min", s.range_min},
                 {"range_max", s.range_max},
                 {"azimuth_min", s.azimuth_min},
                 {"azimuth_max", s.azimuth_max},
                 {"sensor_range", s.sensor_range},
                 {"sensor_height", s.sensor_height},
                 {"density", s.density},
                 {"min_points_per_object", s.min_points_per_object},
                 {"max_points_per_object", s.max_points_per_object},
                 {"ground_points", s.ground_points},
                 {"clutter_clusters", s.clutter_clusters},
                 {"clutter_points", s.clutter_points},
                 {"separation", s.separation},
                 {"max_retries", s.max_retries}}}};
  return j;
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& overrides) {
  nlohmann::ordered_json j = PipelineConfig{}.to_json();
  detail::merge_strict(j, overrides, "");
  PipelineConfig c;
  try {
    c.cls = require_class(j.at("class").get<std::string>());
    const auto& p = j.at("preprocess");
    c.preprocess.distance_aware = p.at("distance_aware");
    c.preprocess.bands = BandSpec::parse(p.at("bands").get<std::string>());
    c.preprocess.uniform_edge = p.at("uniform_edge");
    c.preprocess.radius = p.at("radius");
    c.preprocess.max_neighbors = p.at("max_neighbors");
    const auto& g = j.at("gnn");
    c.gnn.features = g.at("features");
    c.gnn.layers = g.at("layers");
    c.gnn.attention_hidden = g.at("attention_hidden");
    c.gnn.mapping_hidden = g.at("mapping_hidden");
    c.gnn.scalar_attention = g.at("scalar_attention");
    c.head_hidden = j.at("head_hidden");
    for (ObjectClass cl : kAllClasses) {
      const auto& a = j.at("anchors").at(class_name(cl));
      c.anchors[static_cast<std::size_t>(cl)] = {a.at("l"), a.at("w"), a.at("h"),
                                                 a.at("headings").get<std::vector<double>>()};
    }
    const std::string zn = j.at("z_norm");
    if (zn != "da" && zn != "ha") throw ConfigError("z_norm must be \"da\" or \"ha\"");
    c.z_norm = zn == "ha" ? ZNorm::ha : ZNorm::da;
    const auto& l = j.at("loss");
    c.train.weights = {l.at("alpha"), l.at("beta"), l.at("gamma")};
    c.train.loss = {l.at("huber_delta"), l.at("smooth_l1_beta")};
    const auto& inf = j.at("inference");
    c.inference.score_threshold = inf.at("score_threshold");
    c.inference.nms_threshold = detail::per_class_from<double>(inf.at("nms_threshold"));
    c.inference.nms_kind = detail::parse_iou_kind(inf.at("nms_kind"));
    c.inference.merge = inf.at("merge");
    const auto& t = j.at("train");
    c.train.steps = t.at("steps");
    c.train.batch_size = t.at("batch_size");
    c.train.learning_rate = t.at("learning_rate");
    c.train.decay = t.at("decay");
    c.train.decay_interval = t.at("decay_interval");
    c.train.seed = t.at("seed");
    c.train.augment = {t.at("augment").at("rotate"), t.at("augment").at("flip"), t.at("augment").at("jitter")};
    c.train.eval_interval = t.at("eval_interval");
    c.train.log_interval = t.at("log_interval");
    const auto& e = j.at("eval");
    c.eval.iou_threshold = detail::per_class_from<double>(e.at("iou_threshold"));
    c.eval.interpolation = detail::parse_interpolation(e.at("interpolation"));
    c.eval.kind = detail::parse_iou_kind(e.at("kind"));
    const auto& d = j.at("data");
    c.data.train_dir = d.at("train_dir");
    c.data.val_dir = d.at("val_dir");
    c.data.train_scenes = d.at("train_scenes");
    c.data.val_scenes = d.at("val_scenes");
    c.data.train_seed = d.at("train_seed");
    c.data.val_seed = d.at("val_seed");
    c.data.image_width = d.at("image_width");
    c.data.image_height = d.at("image_height");
    const auto& s = d.at("synthetic");
    SceneSpec& sp = c.data.synthetic;
    sp.min_objects = s.at("min_objects");
    sp.max_objects = s.at("max_objects");
    sp.class_mix = detail::per_class_from<double>(s.at("class_mix"));
    sp.size_jitter = s.at("size_jitter");
    sp.range_min = s.at("range_min");
    sp.range_max = s.at("range_max");
    sp.azimuth_min = s.at("azimuth_min");
    sp.azimuth_max = s.at("azimuth_max");
    sp.sensor_range = s.at("sensor_range");
    sp.sensor_height = s.at("sensor_height");
    sp.density = s.at("density");
    sp.min_points_per_object = s.at("min_points_per_object");
    sp.max_points_per_object = s.at("max_points_per_object");
    sp.ground_points = s.at("ground_points");
    sp.clutter_clusters = s.at("clutter_clusters");
    sp.clutter_points = s.at("clutter_points");
    sp.separation = s.at("separation");
    sp.max_retries = s.at("max_retries");
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

/// Parses config text (empty text gives the defaults).
inline PipelineConfig parse_config(const std::string& text) {
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return PipelineConfig::from_json(nlohmann::json::object());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return PipelineConfig::from_json(j);
}

}  // namespace gnn3d
