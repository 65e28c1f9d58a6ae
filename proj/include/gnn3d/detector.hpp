#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnn3d/boxes.hpp"
#include "gnn3d/checkpoint.hpp"
#include "gnn3d/downsample.hpp"
#include "gnn3d/gnn.hpp"
#include "gnn3d/graph.hpp"
#include "gnn3d/mlp.hpp"

namespace gnn3d {

/// Point-cloud to graph stage shared by training and inference.
struct PreprocessConfig {
  bool distance_aware = true;
  BandSpec bands = BandSpec::defaults();
  double uniform_edge = 0.8;
  double radius = 1.8;
  std::size_t max_neighbors = 256;
};

struct Prepared {
  PointCloud vertices;
  Graph graph;
};

inline Prepared prepare(const PointCloud& cloud, const PreprocessConfig& cfg) {
  Prepared p;
  p.vertices = cfg.distance_aware ? downsample_distance_aware(cloud, cfg.bands) : downsample_uniform(cloud, cfg.uniform_edge);
  p.graph = build_graph(p.vertices, cfg.radius, cfg.max_neighbors);
  return p;
}

/// One trained class per model. The classifier predicts background or one
/// of the anchor heading variants; the regressor emits a residual block of
/// 7 values per variant.
struct ModelConfig {
  ObjectClass cls = ObjectClass::car;
  GnnConfig gnn;
  std::size_t head_hidden = 64;
  AnchorTemplate anchor = default_anchor(ObjectClass::car);
  ZNorm z_norm = ZNorm::da;

  std::size_t variants() const { return anchor.headings.size(); }
  MlpSpec cls_spec() const { return MlpSpec::relu_hidden({gnn.features, head_hidden, 1 + variants()}); }
  MlpSpec reg_spec() const { return MlpSpec::relu_hidden({gnn.features, head_hidden, 7 * variants()}); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["class"] = class_name(cls);
    j["features"] = gnn.features;
    j["layers"] = gnn.layers;
    j["attention_hidden"] = gnn.attention_hidden;
    j["mapping_hidden"] = gnn.mapping_hidden;
    j["scalar_attention"] = gnn.scalar_attention;
    j["head_hidden"] = head_hidden;
    j["anchor"] = {{"l", anchor.l}, {"w", anchor.w}, {"h", anchor.h}, {"headings", anchor.headings}};
    j["z_norm"] = z_norm == ZNorm::da ? "da" : "ha";
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.cls = require_class(j.at("class").get<std::string>());
    m.gnn.features = j.at("features");
    m.gnn.layers = j.at("layers");
    m.gnn.attention_hidden = j.at("attention_hidden");
    m.gnn.mapping_hidden = j.at("mapping_hidden");
    m.gnn.scalar_attention = j.at("scalar_attention");
    m.head_hidden = j.at("head_hidden");
    const auto& a = j.at("anchor");
    m.anchor = {a.at("l"), a.at("w"), a.at("h"), a.at("headings").get<std::vector<double>>()};
    m.z_norm = j.at("z_norm") == "ha" ? ZNorm::ha : ZNorm::da;
    return m;
  }
};

inline void init_model(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x1417));
  init_gnn(store, cfg.gnn, rng);
  init_mlp(store, "head.cls", cfg.cls_spec(), rng);
  init_mlp(store, "head.reg", cfg.reg_spec(), rng);
}

struct Prediction {
  Var probs;      // [N x (1 + variants)]
  Var residuals;  // [N x 7 variants]
};

inline Prediction predict(Tape& tape, ParamStore& store, const ModelConfig& cfg, const PointCloud& vertices,
                          const GraphIndex& idx, Mode mode) {
  Var features = gnn_forward(tape, store, cfg.gnn, vertices, idx, mode);
  Var logits = mlp_forward(cfg.cls_spec(), store, "head.cls", features, mode);
  return {softmax(logits, 1), mlp_forward(cfg.reg_spec(), store, "head.reg", features, mode)};
}

/// Per-vertex candidates: score = 1 - p(background), anchor = most likely
/// variant placed at the vertex.
inline DetectionSet decode_vertices(const PointCloud& vertices, const Tensor& probs, const Tensor& residuals,
                                    const ModelConfig& cfg, double score_threshold) {
  DetectionSet out;
  const std::size_t m = probs.cols();
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const double score = 1.0 - probs.at(i, 0);
    if (score < score_threshold) continue;
    std::size_t best = 1;
    for (std::size_t c = 2; c < m; ++c)
      if (probs.at(i, c) > probs.at(i, best)) best = c;
    const std::size_t variant = best - 1;
    const Point& p = vertices.points[i];
    const Anchor a = place_anchor(cfg.anchor, variant, p.x, p.y, p.z);
    const BoxResidual r = BoxResidual::from(&residuals.storage()[i * residuals.cols() + 7 * variant]);
    out.push_back({cfg.cls, score, decode(r, a, cfg.z_norm)});
  }
  return out;
}

struct InferenceConfig {
  double score_threshold = 0.3;
  /// NMS IoU thresholds: car 0.7, pedestrian 0.6, cyclist 0.6.
  std::array<double, 3> nms_threshold = {0.7, 0.6, 0.6};
  IouKind nms_kind = IouKind::bev;
  /// Replace each kept box by the score-weighted mean of its suppressed set.
  bool merge = false;
};

/// downsample -> graph -> forward -> decode -> score threshold -> NMS.
inline DetectionSet infer(ParamStore& store, const ModelConfig& model, const PreprocessConfig& pre,
                          const InferenceConfig& inf, const PointCloud& cloud) {
  if (cloud.empty()) return {};
  const Prepared prep = prepare(cloud, pre);
  const GraphIndex idx(prep.graph);
  Tape tape;
  const Prediction pred = predict(tape, store, model, prep.vertices, idx, Mode::eval);
  const DetectionSet candidates =
      decode_vertices(prep.vertices, pred.probs.value(), pred.residuals.value(), model, inf.score_threshold);
  return inf.merge ? nms_merge(candidates, inf.nms_threshold, inf.nms_kind)
                   : nms(candidates, inf.nms_threshold, inf.nms_kind);
}

/// Checkpoint metadata carries the model description.
inline std::vector<std::uint8_t> save_model(const ModelConfig& cfg, const ParamStore& store) {
  return encode_checkpoint(cfg.to_json().dump(), store);
}

struct LoadedModel {
  ModelConfig config;
  ParamStore store;
};

inline LoadedModel load_model(const std::vector<std::uint8_t>& data) {
  Checkpoint ck = decode_checkpoint(data);
  LoadedModel m;
  try {
    m.config = ModelConfig::from_json(nlohmann::json::parse(ck.metadata));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what(), 12);
  }
  init_model(m.store, m.config, 0);
  load_into(ck.store, m.store);
  return m;
}

/// Rejects a checkpoint whose architecture differs from the requested one.
inline void require_compatible(const ModelConfig& checkpoint, const GnnConfig& requested, std::size_t head_hidden) {
  auto mismatch = [](const std::string& what, std::size_t a, std::size_t b) {
    throw Error(ErrorKind::data, "checkpoint v" + std::to_string(kCheckpointVersion) + " mismatch: " + what + " is " +
                                     std::to_string(a) + " in checkpoint, " + std::to_string(b) + " in config");
  };
  const GnnConfig& c = checkpoint.gnn;
  if (c.features != requested.features) mismatch("features", c.features, requested.features);
  if (c.layers != requested.layers) mismatch("layers", c.layers, requested.layers);
  if (c.attention_hidden != requested.attention_hidden)
    mismatch("attention_hidden", c.attention_hidden, requested.attention_hidden);
  if (c.mapping_hidden != requested.mapping_hidden) mismatch("mapping_hidden", c.mapping_hidden, requested.mapping_hidden);
  if (c.scalar_attention != requested.scalar_attention)
    mismatch("scalar_attention", c.scalar_attention, requested.scalar_attention);
  if (checkpoint.head_hidden != head_hidden) mismatch("head_hidden", checkpoint.head_hidden, head_hidden);
}

}  // namespace gnn3d
