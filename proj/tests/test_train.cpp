#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gnn3d/synthetic.hpp"
#include "gnn3d/train.hpp"

using namespace gnn3d;

namespace {

constexpr double kPi = std::numbers::pi;

ModelConfig tiny_model(std::size_t layers = 1) {
  ModelConfig m;
  m.gnn.features = 8;
  m.gnn.layers = layers;
  m.gnn.attention_hidden = 8;
  m.gnn.mapping_hidden = 8;
  m.head_hidden = 8;
  return m;
}

SceneSpec small_spec() {
  SceneSpec s;
  s.min_objects = 1;
  s.max_objects = 2;
  s.range_max = 20;
  s.ground_points = 60;
  s.clutter_clusters = 1;
  s.clutter_points = 20;
  return s;
}

TrainConfig short_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 2;
  t.learning_rate = 0.01;
  t.augment = {true, true, true};
  return t;
}

std::vector<LabeledScene> scenes(std::uint64_t first, std::size_t n) {
  std::vector<LabeledScene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(first + i, small_spec()));
  return out;
}

LabeledObject car(const Box3D& b) { return {ObjectClass::car, b, std::nullopt}; }

}  // namespace

TEST(FoldHeading, StaysWithinQuarterTurnAndKeepsFootprint) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double h = rng.uniform(-kPi, kPi), ref = rng.uniform(-kPi, kPi);
    const double f = fold_heading(h, ref);
    const double d = normalize_angle(f - ref);
    EXPECT_GT(d, -kPi / 2 - 1e-12);
    EXPECT_LE(d, kPi / 2 + 1e-12);
    const double turns = normalize_angle(f - h) / kPi;
    EXPECT_NEAR(turns, std::round(turns), 1e-9);
  }
  EXPECT_NEAR(fold_heading(kPi - 0.1, 0.0), -0.1, 1e-12);
  EXPECT_NEAR(fold_heading(0.3, 0.0), 0.3, 1e-12);
}

TEST(AssignTargets, InsideVerticesArePositive) {
  const ModelConfig m = tiny_model();
  const std::vector<LabeledObject> objs = {car({10, 0, -1, 4, 2, 1.5, 0})};
  PointCloud v;
  v.points = {{10, 0, -1, 0}, {11.5, 0.5, -1.5, 0}, {13, 0, -1, 0}, {10, 0, 0.5, 0}};
  const AssignmentResult a = assign_targets(v, objs, m);
  EXPECT_TRUE(a.targets.positive(0));
  EXPECT_TRUE(a.targets.positive(1));
  EXPECT_FALSE(a.targets.positive(2));
  EXPECT_FALSE(a.targets.positive(3));
  EXPECT_EQ(a.targets.label[2], 0u);
  EXPECT_EQ(a.matched_per_object[0], 2u);
}

TEST(AssignTargets, OtherClassesAreBackground) {
  const ModelConfig m = tiny_model();
  const std::vector<LabeledObject> objs = {{ObjectClass::pedestrian, {0, 0, 0, 1, 1, 2, 0}, std::nullopt}};
  PointCloud v;
  v.points = {{0, 0, 0, 0}};
  EXPECT_FALSE(assign_targets(v, objs, m).targets.positive(0));
}

TEST(AssignTargets, NearestCenterWinsInOverlap) {
  const ModelConfig m = tiny_model();
  const std::vector<LabeledObject> objs = {car({0, 0, 0, 4, 2, 2, 0}), car({1.5, 0, 0, 4, 2, 2, 0})};
  PointCloud v;
  v.points = {{1.0, 0, 0, 0}, {0.5, 0, 0, 0}};
  const AssignmentResult a = assign_targets(v, objs, m);
  EXPECT_NEAR(a.targets.residual[0].dx * place_anchor(m.anchor, 0, 0, 0, 0).da(), 0.5, 1e-12);
  EXPECT_NEAR(a.targets.residual[1].dx * place_anchor(m.anchor, 0, 0, 0, 0).da(), -0.5, 1e-12);
}

TEST(AssignTargets, VariantFollowsHeadingAndResidualDecodesToBox) {
  const ModelConfig m = tiny_model();
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Box3D gt{rng.uniform(5, 30), rng.uniform(-10, 10), -1, 3.9, 1.6, 1.5, rng.uniform(-kPi, kPi)};
    PointCloud v;
    v.points = {{gt.x + 0.3 * std::cos(gt.heading), gt.y + 0.3 * std::sin(gt.heading), gt.z, 0}};
    const AssignmentResult a = assign_targets(v, {car(gt)}, m);
    ASSERT_TRUE(a.targets.positive(0));
    const double off_axis = std::abs(std::sin(gt.heading));
    if (off_axis < 0.5) {
      EXPECT_EQ(a.targets.anchor[0], 0);
    }
    if (off_axis > 0.9) {
      EXPECT_EQ(a.targets.anchor[0], 1);
    }
    EXPECT_EQ(a.targets.label[0], 1u + static_cast<std::size_t>(a.targets.anchor[0]));
    const Point& p = v.points[0];
    const Anchor an = place_anchor(m.anchor, static_cast<std::size_t>(a.targets.anchor[0]), p.x, p.y, p.z);
    const Box3D back = decode(a.targets.residual[0], an, m.z_norm);
    EXPECT_NEAR(iou_3d(back, gt), 1.0, 1e-9);
  }
}

TEST(Augment, NoTogglesIsIdentity) {
  const LabeledScene s = generate_scene(3, small_spec());
  EXPECT_EQ(scene_to_json(augment(s, 5, {})), scene_to_json(s));
}

TEST(Augment, DeterministicPerSeed) {
  const LabeledScene s = generate_scene(4, small_spec());
  const AugmentToggles all{true, true, true};
  EXPECT_EQ(scene_to_json(augment(s, 9, all)), scene_to_json(augment(s, 9, all)));
  EXPECT_NE(scene_to_json(augment(s, 9, all)), scene_to_json(augment(s, 10, all)));
}

TEST(Augment, PointsStayInsideTheirBoxes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const LabeledScene s = generate_scene(seed, small_spec());
    const LabeledScene t = augment(s, seed * 31, {true, true, true});
    ASSERT_EQ(s.objects.size(), t.objects.size());
    for (std::size_t o = 0; o < s.objects.size(); ++o) {
      int before = 0, after = 0;
      for (const auto& p : s.cloud.points) before += contains(s.objects[o].box, p);
      for (const auto& p : t.cloud.points) after += contains(t.objects[o].box, p, 1e-9);
      EXPECT_GE(after, before);
    }
  }
}

TEST(Augment, RotationAndFlipPreserveGeometry) {
  const LabeledScene s = generate_scene(6, small_spec());
  LabeledScene t = s;
  rotate_scene(t, 0.4);
  for (std::size_t i = 0; i < s.cloud.size(); ++i)
    EXPECT_NEAR(horizontal_range(t.cloud.points[i]), horizontal_range(s.cloud.points[i]), 1e-12);
  rotate_scene(t, -0.4);
  flip_scene(t);
  flip_scene(t);
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    EXPECT_NEAR(t.cloud.points[i].x, s.cloud.points[i].x, 1e-12);
    EXPECT_NEAR(t.cloud.points[i].y, s.cloud.points[i].y, 1e-12);
  }
  for (std::size_t o = 0; o < s.objects.size(); ++o)
    EXPECT_NEAR(normalize_angle(t.objects[o].box.heading - s.objects[o].box.heading), 0.0, 1e-12);
}

TEST(Adam, FirstStepMovesBySignedLearningRate) {
  ParamStore store;
  auto& e = store.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
  e.grad = Tensor({3}, {0.3, -4.0, 0.0});
  AdamState st;
  ASSERT_TRUE(adam_step(store, st, 0.1));
  EXPECT_NEAR(e.value[0], 0.9, 1e-7);
  EXPECT_NEAR(e.value[1], -1.9, 1e-7);
  EXPECT_EQ(e.value[2], 0.5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  ParamStore store;
  auto& e = store.add("w", Tensor({1}, {0.0}));
  AdamState st;
  e.grad = Tensor({1}, {1.0});
  adam_step(store, st, 0.01);
  e.grad = Tensor({1}, {-0.5});
  adam_step(store, st, 0.01);
  const double m = 0.9 * 0.1 + 0.1 * -0.5, v = 0.999 * 0.001 + 0.001 * 0.25;
  const double expect = -0.01 / (1 + 1e-8) - 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(e.value[0], expect, 1e-15);
}

TEST(Adam, NonFiniteGradientSkipsTheStep) {
  ParamStore store;
  auto& e = store.add("w", Tensor({2}, {1.0, 2.0}));
  e.grad = Tensor({2}, {std::nan(""), 1.0});
  AdamState st;
  EXPECT_FALSE(adam_step(store, st, 0.1));
  EXPECT_EQ(e.value[0], 1.0);
  EXPECT_EQ(e.value[1], 2.0);
  EXPECT_EQ(st.skipped, 1u);
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, BuffersAreNotUpdated) {
  ParamStore store;
  auto& e = store.add("bn_mean", Tensor({1}, {0.25}), false);
  e.grad = Tensor({1}, {1.0});
  AdamState st;
  adam_step(store, st, 0.1);
  EXPECT_EQ(e.value[0], 0.25);
}

TEST(Schedule, StepDecay) {
  EXPECT_DOUBLE_EQ(learning_rate(0.001, 0.5, 2000, 0), 0.001);
  EXPECT_DOUBLE_EQ(learning_rate(0.001, 0.5, 2000, 1999), 0.001);
  EXPECT_DOUBLE_EQ(learning_rate(0.001, 0.5, 2000, 2000), 0.0005);
  EXPECT_DOUBLE_EQ(learning_rate(0.001, 0.5, 2000, 4999), 0.00025);
  EXPECT_DOUBLE_EQ(learning_rate(0.125, 0.1, 400000, 800000), 0.125 * 0.1 * 0.1);
}

TEST(TrainConfigCheck, InvalidValuesAreRejected) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.decay = 1.5;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(SceneGradient, ScalesLinearly) {
  const ModelConfig m = tiny_model();
  const LabeledScene s = generate_scene(7, small_spec());
  ParamStore a, b;
  init_model(a, m, 1);
  init_model(b, m, 1);
  a.zero_grad();
  b.zero_grad();
  scene_gradient(a, m, PreprocessConfig{}, TrainConfig{}, s, 1.0);
  scene_gradient(b, m, PreprocessConfig{}, TrainConfig{}, s, 0.25);
  for (std::size_t i = 0; i < a.entries().size(); ++i)
    for (std::size_t k = 0; k < a.entries()[i].grad.size(); ++k)
      EXPECT_NEAR(0.25 * a.entries()[i].grad[k], b.entries()[i].grad[k], 1e-12);
}

TEST(TrainLoop, ZeroStepsReturnsInitialization) {
  const ModelConfig m = tiny_model();
  TrainConfig t = short_train(0);
  const TrainResult r = train_loop(m, PreprocessConfig{}, t, InferenceConfig{}, EvalConfig{}, scenes(0, 2), {});
  ParamStore init;
  init_model(init, m, t.seed);
  EXPECT_EQ(save_model(m, r.store), save_model(m, init));
  EXPECT_TRUE(r.history.empty());
}

TEST(TrainLoop, SameSeedGivesIdenticalBytes) {
  const ModelConfig m = tiny_model(2);
  const auto train = scenes(10, 4), val = scenes(100, 2);
  const TrainConfig t = short_train(6);
  const TrainResult a = train_loop(m, PreprocessConfig{}, t, InferenceConfig{}, EvalConfig{}, train, val);
  const TrainResult b = train_loop(m, PreprocessConfig{}, t, InferenceConfig{}, EvalConfig{}, train, val);
  EXPECT_EQ(save_model(m, a.store), save_model(m, b.store));
  TrainConfig other = t;
  other.seed = t.seed + 1;
  const TrainResult c = train_loop(m, PreprocessConfig{}, other, InferenceConfig{}, EvalConfig{}, train, val);
  EXPECT_NE(save_model(m, a.store), save_model(m, c.store));
}

TEST(TrainLoop, LossDropsWhenOverfittingOneScene) {
  const ModelConfig m = tiny_model();
  TrainConfig t = short_train(80);
  t.batch_size = 1;
  t.augment = {};
  t.weights = {1.0, 1.0, 0.0005};
  const TrainResult r = train_loop(m, PreprocessConfig{}, t, InferenceConfig{}, EvalConfig{}, scenes(20, 1), {});
  ASSERT_EQ(r.history.size(), 80u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += r.history[i].total;
    last += r.history[70 + i].total;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(TrainLoop, HooksFollowIntervals) {
  const ModelConfig m = tiny_model();
  TrainConfig t = short_train(6);
  t.log_interval = 4;
  t.eval_interval = 3;
  std::vector<std::size_t> logged, validated;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) { logged.push_back(s.step); };
  hooks.on_validation = [&](const ValidationLog& v) { validated.push_back(v.step); };
  const TrainResult r =
      train_loop(m, PreprocessConfig{}, t, InferenceConfig{}, EvalConfig{}, scenes(30, 2), scenes(200, 1), hooks);
  EXPECT_EQ(logged, (std::vector<std::size_t>{0, 4, 5}));
  EXPECT_EQ(validated, (std::vector<std::size_t>{3, 6}));
  EXPECT_EQ(r.validation.size(), 2u);
}

TEST(TrainLoop, EmptyTrainingSetIsRejected) {
  EXPECT_THROW(train_loop(tiny_model(), PreprocessConfig{}, short_train(1), InferenceConfig{}, EvalConfig{}, {}, {}),
               ConfigError);
}

TEST(Checkpoint, ModelRoundTripAndCompatibility) {
  const ModelConfig m = tiny_model(2);
  ParamStore store;
  init_model(store, m, 3);
  const auto bytes = save_model(m, store);
  LoadedModel back = load_model(bytes);
  EXPECT_EQ(save_model(back.config, back.store), bytes);
  EXPECT_NO_THROW(require_compatible(back.config, m.gnn, m.head_hidden));
  GnnConfig other = m.gnn;
  other.layers = 3;
  try {
    require_compatible(back.config, other, m.head_hidden);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("layers"), std::string::npos);
  }
}
