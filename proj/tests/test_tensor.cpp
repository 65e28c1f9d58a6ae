#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gnn3d/checkpoint.hpp"
#include "gnn3d/mlp.hpp"
#include "test_util.hpp"

using namespace gnn3d;
using gnn3d::testing::op_gradient_error;
using gnn3d::testing::random_tensor;
using gnn3d::testing::weighted_sum;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) out.at(i, j) += a.at(i, k) * b.at(k, j);
  return out;
}

Tensor scale_copy(Tensor t, double k) {
  for (auto& v : t.storage()) v *= k;
  return t;
}

void expect_near(const Tensor& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "entry " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  Tape t;
  Var y = matmul(t.constant(Tensor::identity(2)), t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})));
  expect_near(y.value(), {1, 2, 3, 4}, 0);
}

TEST(Matmul, ZeroRightOperand) {
  Tape t;
  Var y = matmul(t.constant(Tensor::identity(2)), t.constant(Tensor({2, 3})));
  EXPECT_EQ(y.value().shape(), (Shape{2, 3}));
  expect_near(y.value(), std::vector<double>(6, 0.0), 0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
  Tape t;
  Var y = matmul(t.constant(a), t.constant(b));
  expect_near(y.value(), naive_matmul(a, b).storage(), 1e-12);
}

TEST(Matmul, InnerMismatchIsDimensionError) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(Softmax, Examples) {
  Tape t;
  expect_near(softmax(t.constant(Tensor::vector({0, 0})), 0).value(), {0.5, 0.5}, 1e-15);
  const double e = std::exp(1.0);
  expect_near(softmax(t.constant(Tensor::vector({1, 0})), 0).value(), {e / (e + 1), 1 / (e + 1)}, 1e-15);
  const Tensor big = softmax(t.constant(Tensor::vector({1000, 0})), 0).value();
  EXPECT_TRUE(big.all_finite());
  expect_near(big, {1.0, 0.0}, 1e-12);
}

TEST(Softmax, SumsToOneAndIgnoresShift) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {4, 7}, -20, 20);
    Tensor shifted = x;
    const double c = rng.uniform(-100, 100);
    for (auto& v : shifted.storage()) v += c;
    Tape t;
    const Tensor p = softmax(t.constant(x), 1).value();
    const Tensor q = softmax(t.constant(shifted), 1).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) {
        s += p.at(r, k);
        EXPECT_GT(p.at(r, k), 0.0);
        EXPECT_NEAR(p.at(r, k), q.at(r, k), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Elementwise, Examples) {
  Tape t;
  expect_near(relu(t.constant(Tensor::vector({-1, 2}))).value(), {0, 2}, 0);
  expect_near(concat(t.constant(Tensor::vector({1})), t.constant(Tensor::vector({2, 3}))).value(), {1, 2, 3}, 0);
  expect_near(elementwise_mul(t.constant(Tensor::vector({2, 3})), t.constant(Tensor::vector({4, 5}))).value(), {8, 15},
              0);
  EXPECT_THROW(add(t.constant(Tensor::vector({1, 2})), t.constant(Tensor::vector({1}))), DimensionError);
}

TEST(Elementwise, LogOfNonPositiveIsError) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::vector({1.0, 0.0}))), NumericError);
  EXPECT_THROW(log(t.constant(Tensor::vector({-2.0}))), NumericError);
}

TEST(Backward, SumGivesOnes) {
  ParamStore s;
  s.add("x", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Tape t;
  t.backward(reduce_sum(t.parameter(s, "x")));
  expect_near(s.get("x").grad, {1, 1, 1, 1}, 0);
}

TEST(Backward, SquareGivesTwiceInput) {
  ParamStore s;
  s.add("x", Tensor::vector({1, 2}));
  Tape t;
  Var x = t.parameter(s, "x");
  t.backward(reduce_sum(elementwise_mul(x, x)));
  expect_near(s.get("x").grad, {2, 4}, 0);
}

TEST(Backward, NonScalarLossIsError) {
  ParamStore s;
  s.add("x", Tensor::vector({1, 2}));
  Tape t;
  EXPECT_THROW(t.backward(t.parameter(s, "x")), DimensionError);
}

TEST(Backward, UnreachableParameterHasZeroGradient) {
  ParamStore s;
  s.add("x", Tensor::vector({1, 2}));
  s.add("unused", Tensor::vector({3}));
  Tape t;
  Var x = t.parameter(s, "x");
  t.parameter(s, "unused");
  t.backward(reduce_sum(x));
  expect_near(s.get("unused").grad, {0}, 0);
}

// Every differentiable op against central differences.
TEST(OpGradients, MatchFiniteDifferences) {
  Rng rng(3);
  const double tol = 1e-5;
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2}), c = random_tensor(rng, {3, 4});
  const Tensor bias = random_tensor(rng, {4}), d = random_tensor(rng, {3, 2});
  Tensor pos = random_tensor(rng, {3, 4}, 0.5, 2.0);
  using V = std::vector<Var>;
  EXPECT_LT(op_gradient_error({a, b}, [](Tape& t, V& v) { return weighted_sum(t, matmul(v[0], v[1]), 1); }), tol);
  EXPECT_LT(op_gradient_error({a, c}, [](Tape& t, V& v) { return weighted_sum(t, add(v[0], v[1]), 2); }), tol);
  EXPECT_LT(op_gradient_error({a, c}, [](Tape& t, V& v) { return weighted_sum(t, sub(v[0], v[1]), 3); }), tol);
  EXPECT_LT(op_gradient_error({a, c}, [](Tape& t, V& v) { return weighted_sum(t, elementwise_mul(v[0], v[1]), 4); }),
            tol);
  EXPECT_LT(op_gradient_error({a, bias}, [](Tape& t, V& v) { return weighted_sum(t, add_bias(v[0], v[1]), 5); }), tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, scale(v[0], -2.5), 6); }), tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, relu(v[0]), 7); }), tol);
  EXPECT_LT(op_gradient_error({a, d}, [](Tape& t, V& v) { return weighted_sum(t, concat(v[0], v[1]), 8); }), tol);
  EXPECT_LT(op_gradient_error({pos}, [](Tape& t, V& v) { return weighted_sum(t, log(v[0]), 9); }), tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, clamp_min(v[0], 0.1), 10); }), tol);
  EXPECT_LT(op_gradient_error({scale_copy(a, 3.0)},
                              [](Tape& t, V& v) { return weighted_sum(t, huber_elem(v[0], 1.0), 11); }),
            tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, softmax(v[0], 1), 12); }), tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, softmax(v[0], 0), 13); }), tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, gather_rows(v[0], {2, 0, 2}), 14); }),
            tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) {
              return weighted_sum(t, gather_row_blocks(v[0], {1, 0}, {1, 2}, 2), 15);
            }),
            tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape& t, V& v) { return weighted_sum(t, pick(v[0], {3, 0, 1}), 16); }), tol);
  EXPECT_LT(op_gradient_error({random_tensor(rng, {3, 1})},
                              [](Tape& t, V& v) { return weighted_sum(t, tile_cols(v[0], 4), 17); }),
            tol);
  const Tensor rows = random_tensor(rng, {6, 3});
  const Offsets seg = {0, 2, 2, 6};
  EXPECT_LT(op_gradient_error({rows}, [&](Tape& t, V& v) { return weighted_sum(t, segment_sum(v[0], seg), 18); }), tol);
  EXPECT_LT(op_gradient_error({rows}, [&](Tape& t, V& v) { return weighted_sum(t, segment_max(v[0], seg), 19); }), tol);
  EXPECT_LT(op_gradient_error({rows}, [&](Tape& t, V& v) { return weighted_sum(t, segment_softmax(v[0], seg), 20); }),
            tol);
  EXPECT_LT(op_gradient_error({a}, [](Tape&, V& v) { return mean(v[0]); }), tol);
}

TEST(OpGradients, BatchNormTrainAndEval) {
  Rng rng(8);
  const Tensor x = random_tensor(rng, {5, 3}), g = random_tensor(rng, {3}, 0.5, 1.5), b = random_tensor(rng, {3});
  for (Mode mode : {Mode::train, Mode::eval}) {
    Tensor rm({3}, 0.1), rv({3}, 0.7);
    EXPECT_LT(op_gradient_error({x, g, b},
                                [&](Tape& t, std::vector<Var>& v) {
                                  Tensor m = rm, s = rv;
                                  return weighted_sum(t, batchnorm(v[0], v[1], v[2], m, s, mode), 21);
                                }),
              1e-5);
  }
}

TEST(Segments, SoftmaxColumnsSumToOne) {
  Rng rng(4);
  const Offsets seg = {0, 1, 4, 4, 11};
  Tape t;
  const Tensor p = segment_softmax(t.constant(random_tensor(rng, {11, 5}, -30, 30)), seg).value();
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    if (seg[s] == seg[s + 1]) continue;
    for (std::size_t c = 0; c < 5; ++c) {
      double sum = 0;
      for (std::size_t r = seg[s]; r < seg[s + 1]; ++r) sum += p.at(r, c);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Segments, MaxAndSumMatchLoops) {
  Rng rng(6);
  const Offsets seg = {0, 3, 3, 7};
  const Tensor x = random_tensor(rng, {7, 2});
  Tape t;
  const Tensor mx = segment_max(t.constant(x), seg).value();
  const Tensor sm = segment_sum(t.constant(x), seg).value();
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = seg[s] == seg[s + 1] ? 0.0 : -1e300, sum = 0;
      for (std::size_t r = seg[s]; r < seg[s + 1]; ++r) {
        m = std::max(m, x.at(r, c));
        sum += x.at(r, c);
      }
      EXPECT_EQ(mx.at(s, c), m);
      EXPECT_NEAR(sm.at(s, c), sum, 1e-15);
    }
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  Tensor x = Tensor::matrix(4, 1, {-1, -1, 1, 1});  // mean 0, var 1
  Tensor rm({1}), rv({1}, 1.0);
  Tape t;
  const Tensor y = batchnorm(t.constant(x), t.constant(Tensor::vector({1})), t.constant(Tensor::vector({0})), rm, rv,
                             Mode::train)
                       .value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, ConstantColumnGivesZeros) {
  Tensor rm({2}), rv({2}, 1.0);
  Tape t;
  const Tensor y = batchnorm(t.constant(Tensor::matrix(3, 2, {5, 1, 5, 2, 5, 3})),
                             t.constant(Tensor::vector({1, 1})), t.constant(Tensor::vector({0, 0})), rm, rv,
                             Mode::train)
                       .value();
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(y.at(r, 0), 0.0);
  EXPECT_TRUE(y.all_finite());
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  const Tensor x = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  Tensor rm = Tensor::vector({0.5, -1}), rv = Tensor::vector({2, 0.25});
  const std::vector<double> gamma = {1.5, -0.5}, beta = {0.1, 0.2};
  Tape t;
  const Tensor y = batchnorm(t.constant(x), t.constant(Tensor::vector(gamma)), t.constant(Tensor::vector(beta)), rm,
                             rv, Mode::eval)
                       .value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_NEAR(y.at(r, c), (x.at(r, c) - rm[c]) / std::sqrt(rv[c] + 1e-5) * gamma[c] + beta[c], 1e-14);
}

TEST(BatchNorm, TrainUpdatesRunningStatistics) {
  Tensor rm({1}), rv({1}, 1.0);
  Tape t;
  batchnorm(t.constant(Tensor::matrix(2, 1, {1, 3})), t.constant(Tensor::vector({1})),
            t.constant(Tensor::vector({0})), rm, rv, Mode::train);
  EXPECT_NEAR(rm[0], 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(rv[0], 0.99 + 0.01 * 1.0, 1e-15);
}

TEST(Mlp, IdentityLayerPassesInput) {
  MlpSpec spec{{2, 2}, {Activation::none}, {false}};
  ParamStore s;
  Rng rng(1);
  init_mlp(s, "m", spec, rng);
  s.get("m.l0.weight").value = Tensor::identity(2);
  Tape t;
  expect_near(mlp_forward(spec, s, "m", t.constant(Tensor::matrix(1, 2, {3, -4})), Mode::eval).value(), {3, -4}, 0);
}

TEST(Mlp, NegatedIdentityWithReluGivesZeros) {
  MlpSpec spec{{2, 2}, {Activation::relu}, {false}};
  ParamStore s;
  Rng rng(1);
  init_mlp(s, "m", spec, rng);
  Tensor w = Tensor::identity(2);
  for (auto& v : w.storage()) v = -v;
  s.get("m.l0.weight").value = w;
  Tape t;
  expect_near(mlp_forward(spec, s, "m", t.constant(Tensor::matrix(1, 2, {3, 4})), Mode::eval).value(), {0, 0}, 0);
}

TEST(Mlp, TwoLayersMatchManualEvaluation) {
  MlpSpec spec = MlpSpec::relu_hidden({3, 4, 2});
  ParamStore s;
  Rng rng(9);
  init_mlp(s, "m", spec, rng);
  for (auto& e : s.entries()) e.value = random_tensor(rng, e.value.shape());
  const Tensor x = random_tensor(rng, {5, 3});
  Tape t;
  const Tensor y = mlp_forward(spec, s, "m", t.constant(x), Mode::eval).value();
  const Tensor& w0 = s.get("m.l0.weight").value;
  const Tensor& b0 = s.get("m.l0.bias").value;
  const Tensor& w1 = s.get("m.l1.weight").value;
  const Tensor& b1 = s.get("m.l1.bias").value;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t o = 0; o < 2; ++o) {
      double out = b1[o];
      for (std::size_t h = 0; h < 4; ++h) {
        double hidden = b0[h];
        for (std::size_t i = 0; i < 3; ++i) hidden += x.at(r, i) * w0.at(i, h);
        out += std::max(hidden, 0.0) * w1.at(h, o);
      }
      EXPECT_NEAR(y.at(r, o), out, 1e-12);
    }
}

TEST(Mlp, WidthMismatchIsDimensionError) {
  MlpSpec spec = MlpSpec::relu_hidden({3, 4, 2});
  ParamStore s;
  Rng rng(9);
  init_mlp(s, "m", spec, rng);
  Tape t;
  EXPECT_THROW(mlp_forward(spec, s, "m", t.constant(Tensor({2, 2})), Mode::eval), DimensionError);
}

TEST(Determinism, SameSeedSameBits) {
  auto run = [] {
    MlpSpec spec = MlpSpec::relu_hidden({3, 8, 2});
    ParamStore s;
    Rng rng(77);
    init_mlp(s, "m", spec, rng);
    Tape t;
    Var y = mlp_forward(spec, s, "m", t.constant(random_tensor(rng, {4, 3})), Mode::train);
    t.backward(reduce_sum(y));
    return encode_checkpoint("x", s);
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParamStore s;
  Rng rng(2);
  s.add("a.weight", random_tensor(rng, {3, 2}, -1e10, 1e10));
  s.add("a.bn_mean", random_tensor(rng, {2}), false);
  s.add("b", Tensor::vector({0.1, -0.0, 5e-324}));
  const auto bytes = encode_checkpoint("meta", s);
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.metadata, "meta");
  EXPECT_EQ(encode_checkpoint(ck.metadata, ck.store), bytes);
  EXPECT_EQ(std::memcmp(bytes.data(), "GDCK", 4), 0);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  ParamStore s;
  s.add("w", Tensor::vector({1, 2}));
  auto bytes = encode_checkpoint("", s);
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
