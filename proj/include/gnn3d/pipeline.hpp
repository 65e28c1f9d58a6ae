#pragma once

// End-to-end wiring shared by the CLI and the benchmark.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "gnn3d/config.hpp"
#include "gnn3d/kitti.hpp"
#include "gnn3d/scene.hpp"
#include "gnn3d/synthetic.hpp"
#include "gnn3d/train.hpp"

namespace gnn3d {

/// Regular files in `dir` with the given extension, sorted by name.
inline std::vector<std::filesystem::path> list_files(const std::string& dir, const std::string& ext) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorKind::data, "not a directory: " + dir);
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<LabeledScene> load_scene_dir(const std::string& dir) {
  std::vector<LabeledScene> out;
  for (const auto& p : list_files(dir, ".json")) out.push_back(scene_from_json(read_text(p.string())));
  return out;
}

inline std::vector<LabeledScene> synthetic_scenes(const SceneSpec& spec, std::uint64_t first_seed, std::size_t count) {
  std::vector<LabeledScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(first_seed + i, spec));
  return out;
}

inline std::vector<LabeledScene> training_scenes(const DataConfig& d) {
  return d.train_dir.empty() ? synthetic_scenes(d.synthetic, d.train_seed, d.train_scenes) : load_scene_dir(d.train_dir);
}

inline std::vector<LabeledScene> validation_scenes(const DataConfig& d) {
  return d.val_dir.empty() ? synthetic_scenes(d.synthetic, d.val_seed, d.val_scenes) : load_scene_dir(d.val_dir);
}

inline TrainResult train_pipeline(const PipelineConfig& c, const std::vector<LabeledScene>& train_set,
                                  const std::vector<LabeledScene>& val_set, const TrainHooks& hooks = {}) {
  c.validate();
  return train_loop(c.model(), c.preprocess, c.train, c.inference, c.eval, train_set, val_set, hooks);
}

/// AP of the configured class and IoU kind over all difficulties.
inline std::optional<double> pipeline_ap(const PipelineConfig& c, const std::vector<EvalItem>& items, IouKind kind) {
  return evaluate_class(items, c.cls, c.eval, kind).ap;
}

}  // namespace gnn3d
