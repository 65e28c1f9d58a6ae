// gnn3d command-line front end.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gnn3d/pipeline.hpp"
#include "gnn3d/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace gnn3d;

namespace {

struct Options {
  std::string config_path;
  std::string input, output;
  std::string bands;
  double uniform_edge = 0.0;
  double radius = 0.0;
  long long max_neighbors = -1;
  std::string checkpoint;
  std::string calib_dir;
  std::string log_path;
  std::string pred_dir, gt_dir;
  std::uint64_t seed = 1;
  std::size_t count = 0;
  double tamper = 0.0;
};

PipelineConfig load_config(const Options& o) {
  return parse_config(o.config_path.empty() ? std::string() : read_text(o.config_path));
}

void echo_config(const PipelineConfig& c) { std::cerr << "# config " << c.to_json().dump() << "\n"; }

/// A velodyne .bin or a scene .json file.
PointCloud read_cloud(const std::string& path) {
  if (fs::path(path).extension() == ".json") return scene_from_json(read_text(path)).cloud;
  return read_velodyne(bytes::read_file(path)).cloud;
}

std::optional<Calibration> calib_for(const Options& o, const std::string& id) {
  if (o.calib_dir.empty()) return std::nullopt;
  return read_calib(read_text((fs::path(o.calib_dir) / (id + ".txt")).string()));
}

int cmd_downsample(const Options& o) {
  PipelineConfig c = load_config(o);
  if (!o.bands.empty()) c.preprocess.bands = BandSpec::parse(o.bands);
  if (o.uniform_edge > 0) {
    c.preprocess.distance_aware = false;
    c.preprocess.uniform_edge = o.uniform_edge;
  }
  c.validate();
  echo_config(c);
  const PointCloud in = read_cloud(o.input);
  const PointCloud out = c.preprocess.distance_aware ? downsample_distance_aware(in, c.preprocess.bands)
                                                     : downsample_uniform(in, c.preprocess.uniform_edge);
  bytes::write_file(o.output, write_velodyne(out));
  std::cerr << "# points " << in.size() << " -> " << out.size() << "\n";
  return 0;
}

int cmd_graph(const Options& o) {
  PipelineConfig c = load_config(o);
  if (o.radius > 0) c.preprocess.radius = o.radius;
  if (o.max_neighbors >= 0) c.preprocess.max_neighbors = static_cast<std::size_t>(o.max_neighbors);
  c.validate();
  echo_config(c);
  const Graph g = build_graph(read_cloud(o.input), c.preprocess.radius, c.preprocess.max_neighbors);
  write_text(o.output, format_edge_list(g));
  std::cerr << "# vertices " << g.vertex_count << " edges " << g.edge_count() << "\n";
  return 0;
}

int cmd_generate(const Options& o) {
  PipelineConfig c = load_config(o);
  c.validate();
  echo_config(c);
  fs::create_directories(o.output);
  const std::size_t n = o.count ? o.count : c.data.train_scenes;
  for (std::size_t i = 0; i < n; ++i) {
    const LabeledScene s = generate_scene(o.seed + i, c.data.synthetic);
    write_text((fs::path(o.output) / (s.id + ".json")).string(), scene_to_json(s));
  }
  std::cerr << "# wrote " << n << " scenes\n";
  return 0;
}

int cmd_train(const Options& o) {
  const PipelineConfig c = load_config(o);
  c.validate();
  echo_config(c);
  std::ofstream log_file;
  if (!o.log_path.empty()) {
    log_file.open(o.log_path);
    if (!log_file) throw Error(ErrorKind::data, "cannot write " + o.log_path);
  }
  std::ostream& log = o.log_path.empty() ? std::cout : log_file;
  log << "#step\tcls\tloc\treg\ttotal\tlr\n";
  const auto train_set = training_scenes(c.data);
  const auto val_set = validation_scenes(c.data);
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) { log << format_step_log(s) << "\n" << std::flush; };
  hooks.on_validation = [&](const ValidationLog& v) {
    auto ap = [](const std::optional<double>& a) { return a ? std::to_string(*a) : std::string("absent"); };
    log << "#val\t" << v.step << "\tap_3d\t" << ap(v.ap_3d) << "\tap_bev\t" << ap(v.ap_bev) << "\n" << std::flush;
  };
  const TrainResult r = train_pipeline(c, train_set, val_set, hooks);
  bytes::write_file(o.output, save_model(c.model(), r.store));
  if (r.skipped_steps) std::cerr << "# skipped " << r.skipped_steps << " steps with non-finite gradients\n";
  return 0;
}

int cmd_infer(const Options& o) {
  const PipelineConfig c = load_config(o);
  c.validate();
  echo_config(c);
  LoadedModel m = load_model(bytes::read_file(o.checkpoint));
  require_compatible(m.config, c.gnn, c.head_hidden);
  fs::create_directories(o.output);
  std::vector<fs::path> inputs = list_files(o.input, ".json");
  for (const auto& p : list_files(o.input, ".bin")) inputs.push_back(p);
  for (const auto& p : inputs) {
    const std::string id = p.stem().string();
    PointCloud cloud = read_cloud(p.string());
    if (const auto calib = calib_for(o, id)) cloud = crop_to_frustum(cloud, *calib, c.data.image_width, c.data.image_height);
    const DetectionSet d = infer(m.store, m.config, c.preprocess, c.inference, cloud);
    write_text((fs::path(o.output) / (id + ".txt")).string(), format_detections(d));
  }
  std::cerr << "# scenes " << inputs.size() << "\n";
  return 0;
}

/// Ground truth for one scene: `<id>.json` scene file or `<id>.txt` KITTI labels.
std::vector<LabeledObject> ground_truth(const Options& o, const std::string& id) {
  const fs::path json = fs::path(o.gt_dir) / (id + ".json");
  if (fs::exists(json)) return scene_from_json(read_text(json.string())).objects;
  const fs::path txt = fs::path(o.gt_dir) / (id + ".txt");
  if (!fs::exists(txt)) throw Error(ErrorKind::data, "no ground truth for " + id);
  return read_labels(read_text(txt.string()), calib_for(o, id).value_or(Calibration::identity()));
}

int cmd_eval(const Options& o) {
  const PipelineConfig c = load_config(o);
  c.validate();
  echo_config(c);
  std::vector<EvalItem> items;
  for (const auto& p : list_files(o.pred_dir, ".txt"))
    items.push_back({parse_detections(read_text(p.string())), ground_truth(o, p.stem().string())});
  std::vector<ClassResult> results;
  for (ObjectClass cls : kAllClasses)
    for (IouKind kind : {IouKind::iou3d, IouKind::bev}) {
      results.push_back(evaluate_class(items, cls, c.eval, kind));
      for (Difficulty d : {Difficulty::easy, Difficulty::moderate, Difficulty::hard})
        results.push_back(evaluate_class(items, cls, c.eval, kind, d));
    }
  const std::string report = format_report(results);
  if (o.output.empty()) std::cout << report;
  else write_text(o.output, report);
  return 0;
}

int cmd_selfcheck(const Options& o) {
  const PipelineConfig c = load_config(o);
  c.validate();
  echo_config(c);
  test_hooks::gradient_tamper = o.tamper;
  const auto results = run_selfcheck(o.seed);
  std::cout << format_selfcheck(results);
  for (const auto& r : results)
    if (!r.pass) return static_cast<int>(ErrorKind::numeric);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention GNN 3D detector for LiDAR point clouds"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "JSON config overriding the defaults")->check(CLI::ExistingFile);

  auto* ds = app.add_subcommand("downsample", "Voxel-downsample a point cloud");
  ds->add_option("--in", o.input, "Velodyne .bin or scene .json")->required()->check(CLI::ExistingFile);
  ds->add_option("--out", o.output, "Output velodyne .bin")->required();
  ds->add_option("--bands", o.bands, "Distance bands, e.g. 20:0.8,40:0.65,inf:0.5");
  ds->add_option("--uniform", o.uniform_edge, "Use a uniform grid with this edge instead");

  auto* gr = app.add_subcommand("graph", "Build the radius graph and write an edge list");
  gr->add_option("--in", o.input, "Velodyne .bin or scene .json")->required()->check(CLI::ExistingFile);
  gr->add_option("--out", o.output, "Output edge list")->required();
  gr->add_option("--radius", o.radius, "Neighbor radius in meters");
  gr->add_option("--max-neighbors", o.max_neighbors, "Neighbor cap per vertex");

  auto* ge = app.add_subcommand("generate", "Write synthetic scenes as scene files");
  ge->add_option("--out", o.output, "Output directory")->required();
  ge->add_option("--seed", o.seed, "First scene seed");
  ge->add_option("--count", o.count, "Number of scenes (default data.train_scenes)");

  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--out", o.output, "Output checkpoint")->required();
  tr->add_option("--log", o.log_path, "Training log (default stdout)");

  auto* in = app.add_subcommand("infer", "Detect objects in a directory of scenes");
  in->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  in->add_option("--scenes", o.input, "Directory of scene .json or velodyne .bin files")->required();
  in->add_option("--out", o.output, "Output directory for detection files")->required();
  in->add_option("--calib", o.calib_dir, "KITTI calib directory; enables frustum cropping");

  auto* ev = app.add_subcommand("eval", "Average precision of detection files");
  ev->add_option("--pred", o.pred_dir, "Directory of detection files")->required();
  ev->add_option("--gt", o.gt_dir, "Directory of scene .json or KITTI label .txt files")->required();
  ev->add_option("--calib", o.calib_dir, "KITTI calib directory for label files");
  ev->add_option("--out", o.output, "Report file (default stdout)");

  auto* sc = app.add_subcommand("selfcheck", "Run the reduced oracle suites");
  sc->add_option("--seed", o.seed, "Seed for the random instances");
  sc->add_option("--tamper-gradient", o.tamper, "Scale every parameter gradient by 1 + this (fault injection)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::usage);
  }

  try {
    if (*ds) return cmd_downsample(o);
    if (*gr) return cmd_graph(o);
    if (*ge) return cmd_generate(o);
    if (*tr) return cmd_train(o);
    if (*in) return cmd_infer(o);
    if (*ev) return cmd_eval(o);
    if (*sc) return cmd_selfcheck(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return static_cast<int>(ErrorKind::usage);
}
