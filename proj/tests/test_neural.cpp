#include <gtest/gtest.h>

#include <sstream>

#include "festa/gradcheck.hpp"
#include "festa/neural.hpp"
#include "oracles.hpp"

using namespace festa;
using namespace festa::nn;

namespace {

constexpr double kGradTol = 1e-4;

Matrix rm(const oracle::Dense& d) { return d; }

ParameterStore small_mlp(std::initializer_list<Index> widths, Index in, std::uint64_t seed) {
  ParameterStore s;
  Rng rng(seed);
  init_mlp(s, "m", in, widths, rng);
  // Non-zero biases so ReLU kinks are away from the origin.
  for (auto& p : s)
    for (Index j = 0; j < p.bias.size(); ++j) p.bias[j] = uniform(rng, -0.3, 0.3);
  return s;
}

void expect_grad_ok(const GradCheckResult& r) {
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, kGradTol) << "worst " << r.worst;
}

}  // namespace

TEST(SharedMlp, ZeroWeightsGiveZero) {
  ParameterStore s;
  s.add("z.0", Matrix::Zero(3, 4), RowVector::Zero(4));
  s.add("z.1", Matrix::Zero(4, 2), RowVector::Zero(2));
  auto f = shared_mlp_forward(s, "z", rm(oracle::random_matrix(5, 3, 1)));
  EXPECT_TRUE(f.value().isZero(0.0));
  EXPECT_EQ(f.value().rows(), 5);
  EXPECT_EQ(f.value().cols(), 2);
}

TEST(SharedMlp, IdentityLayerThenReluEqualsRelu) {
  // Identity hidden layer followed by an identity output layer: ReLU(x).
  ParameterStore s;
  s.add("i.0", Matrix::Identity(4, 4), RowVector::Zero(4));
  s.add("i.1", Matrix::Identity(4, 4), RowVector::Zero(4));
  Matrix x = rm(oracle::random_matrix(6, 4, 2));
  auto f = shared_mlp_forward(s, "i", x);
  EXPECT_EQ(f.value(), Matrix(x.cwiseMax(0.0)));
}

TEST(SharedMlp, MatchesDenseOracle) {
  ParameterStore s = small_mlp({8, 16}, 3, 4);
  Matrix x = rm(oracle::random_matrix(5, 3, 5));
  auto f = shared_mlp_forward(s, "m", x);
  std::vector<oracle::Layer> layers;
  for (const auto& p : s) layers.push_back({oracle::Dense(p.weight), Eigen::RowVectorXd(p.bias)});
  oracle::Dense want = oracle::mlp(oracle::Dense(x), layers);
  EXPECT_LT((oracle::Dense(f.value()) - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SharedMlp, WidthMismatchIsShapeError) {
  ParameterStore s = small_mlp({4}, 3, 1);
  EXPECT_THROW(shared_mlp_forward(s, "m", Matrix::Zero(2, 5)), ShapeError);
}

TEST(SharedMlp, RowsAreIndependent) {
  ParameterStore s = small_mlp({8, 6}, 3, 7);
  Matrix x = rm(oracle::random_matrix(5, 3, 8));
  auto base = shared_mlp_forward(s, "m", x);
  Matrix y = x;
  y.row(2) *= 3.0;
  auto moved = shared_mlp_forward(s, "m", y);
  for (Index i = 0; i < 5; ++i) {
    if (i == 2) continue;
    EXPECT_EQ(Matrix(base.value().row(i)), Matrix(moved.value().row(i)));
  }
}

TEST(MaxPool, Examples) {
  Matrix one(1, 3);
  one << 1, -2, 3;
  EXPECT_EQ(Matrix(max_pool_rows(one).pooled), one);
  Matrix two(2, 2);
  two << 1, 5, 3, 2;
  auto r = max_pool_rows(two);
  EXPECT_EQ(r.pooled[0], 3);
  EXPECT_EQ(r.pooled[1], 5);
  EXPECT_EQ(r.argmax, (std::vector<Index>{1, 0}));
  Matrix swapped(2, 2);
  swapped << 3, 2, 1, 5;
  EXPECT_EQ(max_pool_rows(swapped).pooled, r.pooled);
  Matrix tie(2, 1);
  tie << 4, 4;
  EXPECT_EQ(max_pool_rows(tie).argmax[0], 0);
  EXPECT_THROW(max_pool_rows(Matrix(0, 3)), InvalidArgument);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  ParameterStore s = small_mlp({4, 2}, 3, 1);
  Tape t(&s);
  Var x = t.variable(rm(oracle::random_matrix(4, 3, 2)));
  Var y = shared_mlp(x, "m");
  t.backward(y, Matrix::Zero(4, 2));
  for (const auto& p : s) {
    EXPECT_TRUE(p.weight_grad.isZero(0.0));
    EXPECT_TRUE(p.bias_grad.isZero(0.0));
  }
  EXPECT_TRUE(t.grad(x).isZero(0.0));
}

TEST(Backward, LinearScalarGradientIsInput) {
  ParameterStore s;
  s.add("w", Matrix::Constant(3, 1, 0.5), RowVector::Zero(1));
  Tape t(&s);
  Matrix x(1, 3);
  x << 1.5, -2.0, 4.0;
  Var y = linear(t.constant(x), "w");
  t.backward(y);
  EXPECT_EQ(Matrix(s.at("w").weight_grad.transpose()), x);
}

TEST(Backward, VisitsEachRecordedOpOnce) {
  ParameterStore s = small_mlp({4, 2}, 3, 1);
  Tape t(&s);
  Var x = t.variable(rm(oracle::random_matrix(4, 3, 2)));
  Var y = shared_mlp(x, "m");  // linear, relu, linear
  Var l = weighted_sum(y, Matrix::Ones(4, 2));
  t.backward(l);
  EXPECT_EQ(t.backward_visits(), 4u);
}

TEST(Backward, ParameterShapeChangeIsStateError) {
  ParameterStore s = small_mlp({2}, 3, 1);
  Tape t(&s);
  Var y = shared_mlp(t.constant(Matrix::Ones(2, 3)), "m");
  s.at("m.0").weight = Matrix::Zero(4, 2);
  EXPECT_THROW(t.backward(y, Matrix::Ones(2, 2)), StateError);
}

TEST(Backward, UnknownParameterIsStateError) {
  ParameterStore s;
  Tape t(&s);
  EXPECT_THROW(linear(t.constant(Matrix::Ones(1, 1)), "missing"), StateError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks of every primitive op

TEST(GradCheck, SharedMlp) {
  ParameterStore s = small_mlp({6, 5, 4}, 3, 11);
  auto r = check_gradients(s, {rm(oracle::random_matrix(7, 3, 12))},
                           [](Tape&, std::span<const Var> in) { return shared_mlp(in[0], "m"); });
  expect_grad_ok(r);
}

TEST(GradCheck, SegmentMaxPool) {
  ParameterStore s = small_mlp({5}, 3, 13);
  std::vector<std::size_t> off{0, 3, 4, 9};
  auto r = check_gradients(s, {rm(oracle::random_matrix(9, 3, 14))}, [&](Tape&, std::span<const Var> in) {
    return segment_max(shared_mlp(in[0], "m"), off);
  });
  expect_grad_ok(r);
}

TEST(GradCheck, SoftmaxRowDotScaleSum) {
  ParameterStore s;
  std::vector<std::size_t> off{0, 2, 6};
  auto r = check_gradients(s, {rm(oracle::random_matrix(6, 4, 1)), rm(oracle::random_matrix(6, 4, 2)),
                               rm(oracle::random_matrix(6, 3, 3))},
                           [&](Tape&, std::span<const Var> in) {
                             Var w = segment_softmax(row_dot(in[0], in[1]), off);
                             return segment_sum(scale_rows(in[2], w), off);
                           });
  expect_grad_ok(r);
}

TEST(GradCheck, GatherConcatSubSigmoid) {
  ParameterStore s;
  auto r = check_gradients(s, {rm(oracle::random_matrix(4, 2, 5)), rm(oracle::random_matrix(3, 2, 6))},
                           [&](Tape&, std::span<const Var> in) {
                             Var a = gather_rows(in[0], {0, 2, 2, 3, 1});
                             Var b = gather_rows(in[1], {1, 1, 0, 2, 0});
                             return sigmoid(concat_cols({sub(a, b), add(a, scale(b, 0.5))}));
                           });
  expect_grad_ok(r);
}

TEST(GradCheck, Losses) {
  ParameterStore s;
  Matrix target = rm(oracle::random_matrix(5, 3, 7));
  std::vector<double> y{1, 0, 1, 1, 0};
  std::vector<int> labels{0, 2, 1, 2, 0};
  auto r = check_gradients(s, {rm(oracle::random_matrix(5, 3, 8)), rm(oracle::random_matrix(5, 1, 9, 3.0))},
                           [&](Tape&, std::span<const Var> in) {
                             Var a = mean_squared_error(in[0], target);
                             Var b = bce_with_logits(in[1], y);
                             Var c = softmax_cross_entropy(in[0], labels);
                             return add(add(scale(a, 0.3), scale(b, 0.7)), c);
                           });
  expect_grad_ok(r);
}

TEST(GradCheck, KinksAreSkippedNotFailed) {
  // A zero-bias ReLU evaluated exactly at 0 is non-differentiable.
  ParameterStore s;
  s.add("k.0", Matrix::Identity(2, 2), RowVector::Zero(2));
  s.add("k.1", Matrix::Identity(2, 2), RowVector::Zero(2));
  Matrix x(1, 2);
  x << 0.0, 1.0;
  auto r = check_gradients(s, {x}, [](Tape&, std::span<const Var> in) { return shared_mlp(in[0], "k"); });
  EXPECT_GT(r.skipped, 0u);
  expect_grad_ok(r);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientsLeaveParameters) {
  ParameterStore s = small_mlp({3}, 2, 1);
  ParameterStore before = s;
  adam_step(s);
  EXPECT_TRUE(s.same_values(before));
  EXPECT_EQ(s.at("m.0").step, 1);
}

TEST(Adam, FirstStepIsMinusLr) {
  ParameterStore s;
  s.add("p", Matrix::Zero(1, 1), RowVector::Zero(1));
  s.at("p").weight_grad(0, 0) = 1.0;
  adam_step(s, {0.1, 0.9, 0.999, 1e-8});
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
  EXPECT_NEAR(s.at("p").weight(0, 0), -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(s.at("p").weight_grad(0, 0), 0.0);
}

TEST(Adam, DescendsConvexQuadratic) {
  // f(w) = |w - c|^2, gradient 2 (w - c).
  ParameterStore s;
  s.add("p", Matrix::Zero(1, 3), RowVector::Zero(3));
  Matrix c(1, 3);
  c << 1.0, -2.0, 0.5;
  std::vector<double> losses;
  for (int it = 0; it < 400; ++it) {
    Matrix d = s.at("p").weight - c;
    losses.push_back(d.squaredNorm());
    s.at("p").weight_grad = 2.0 * d;
    adam_step(s, {0.01, 0.9, 0.999, 1e-8});
  }
  for (std::size_t i = 51; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1] + 1e-12) << i;
  EXPECT_LT(losses.back(), 1e-3 * losses.front());
}

TEST(Adam, NonFiniteGradientThrowsWithoutUpdate) {
  ParameterStore s = small_mlp({2}, 2, 3);
  ParameterStore before = s;
  s.at("m.0").weight_grad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(s), TrainingDivergence);
  EXPECT_TRUE(s.same_values(before));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripExact) {
  ParameterStore s = small_mlp({4, 3}, 5, 9);
  std::stringstream ss;
  write_checkpoint(ss, s, {{"task", "flow"}, {"note", "a=b\nc"}});
  Checkpoint ck = read_checkpoint(ss);
  EXPECT_TRUE(ck.params.same_values(s));
  ASSERT_NE(ck.find("note"), nullptr);
  EXPECT_EQ(*ck.find("note"), "a=b\nc");
}

TEST(Checkpoint, LittleEndianLayout) {
  ParameterStore s;
  s.add("ab", Matrix::Constant(1, 1, 1.0), RowVector::Constant(1, 2.0));
  std::stringstream ss;
  write_checkpoint(ss, s);
  const std::string b = ss.str();
  ASSERT_EQ(b.substr(0, 8), "FESTACKP");
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);  // version, low byte first
  EXPECT_EQ(b[9], 0);
  // 1.0 = 0x3FF0000000000000, stored low byte first.
  const std::size_t w = 8 + 4 + 4 + 4 + 4 + 2 + 4 + 4;
  EXPECT_EQ(static_cast<unsigned char>(b[w + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(b[w + 6]), 0xF0);
  EXPECT_EQ(b.size(), w + 8 + 4 + 8);
}

TEST(Checkpoint, MalformedInputsAreFormatErrors) {
  ParameterStore s = small_mlp({2}, 2, 1);
  std::stringstream ss;
  write_checkpoint(ss, s);
  const std::string good = ss.str();
  auto read = [](const std::string& bytes) {
    std::stringstream in(bytes);
    return read_checkpoint(in);
  };
  EXPECT_THROW(read("NOTACKPT"), FormatError);
  std::string bad_version = good;
  bad_version[8] = 7;
  EXPECT_THROW(read(bad_version), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    EXPECT_THROW(read(good.substr(0, cut)), FormatError) << cut;
  }
}
