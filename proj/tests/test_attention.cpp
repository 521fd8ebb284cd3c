#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "festa/attention.hpp"
#include "festa/gradcheck.hpp"
#include "festa/synthdata.hpp"
#include "oracles.hpp"

using namespace festa;
using nn::Matrix;
using nn::ParameterStore;
using nn::Tape;
using nn::Var;

namespace {

Sa2Config small_sa2() { return Sa2Config{"sa", {8, 12}, {8, 10}}; }

ParameterStore sa2_store(const Sa2Config& cfg, nn::Index in_width, std::uint64_t seed) {
  ParameterStore s;
  Rng rng(seed);
  init_sa2(s, cfg, in_width, rng);
  for (auto& p : s)
    for (nn::Index j = 0; j < p.bias.size(); ++j) p.bias[j] = uniform(rng, -0.2, 0.2);
  return s;
}

bool contains(std::span<const std::size_t> g, std::size_t i) { return std::find(g.begin(), g.end(), i) != g.end(); }

}  // namespace

// ---------------------------------------------------------------------------
// Attentive pooling

TEST(AggregatePool, EqualLogitsGiveCentroid) {
  std::vector<Vec3> g{{0, 0, 0}, {2, 0, 0}, {0, 4, 0}, {2, 4, 2}};
  Matrix d = Matrix::Ones(4, 3);
  auto out = aggregate_pool(g, d, nn::RowVector::Ones(3));
  EXPECT_NEAR((out.point - Vec3(1, 2, 0.5)).norm(), 0.0, 1e-12);
  for (double w : out.weights) EXPECT_NEAR(w, 0.25, 1e-12);
}

TEST(AggregatePool, SinglePointIsItself) {
  std::vector<Vec3> g{{0.3, -1.2, 7}};
  auto out = aggregate_pool(g, Matrix::Constant(1, 2, 5.0), nn::RowVector::Constant(2, -3.0));
  EXPECT_EQ(out.point, g[0]);
  EXPECT_DOUBLE_EQ(out.weights[0], 1.0);
}

TEST(AggregatePool, LogLogitsGivePowerOfTwoWeights) {
  std::vector<Vec3> g{{7, 0, 0}, {0, 7, 0}, {0, 0, 7}};
  Matrix d(3, 1);
  d << 0.0, std::log(2.0), std::log(4.0);
  auto out = aggregate_pool(g, d, nn::RowVector::Ones(1));
  EXPECT_NEAR(out.weights[0], 1.0 / 7, 1e-12);
  EXPECT_NEAR(out.weights[1], 2.0 / 7, 1e-12);
  EXPECT_NEAR(out.weights[2], 4.0 / 7, 1e-12);
  EXPECT_NEAR((out.point - Vec3(1, 2, 4)).norm(), 0.0, 1e-12);
}

TEST(AggregatePool, OutputInsideConvexHullBox) {
  auto pts = oracle::random_cloud(20, 3);
  auto out = aggregate_pool(pts, oracle::random_matrix(20, 6, 4, 3.0), oracle::random_matrix(1, 6, 5, 3.0).row(0));
  double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
  EXPECT_NEAR(total, 1.0, 1e-12);
  for (int a = 0; a < 3; ++a) {
    double lo = 1e9, hi = -1e9;
    for (const auto& p : pts) lo = std::min(lo, p[a]), hi = std::max(hi, p[a]);
    EXPECT_GE(out.point[a], lo - 1e-12);
    EXPECT_LE(out.point[a], hi + 1e-12);
  }
}

TEST(AggregatePool, RejectsBadShapesAndValues) {
  std::vector<Vec3> g{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(aggregate_pool(g, Matrix::Ones(3, 2), nn::RowVector::Ones(2)), ShapeError);
  EXPECT_THROW(aggregate_pool(g, Matrix::Ones(2, 2), nn::RowVector::Ones(3)), ShapeError);
  Matrix bad = Matrix::Ones(2, 2);
  bad(1, 0) = std::nan("");
  EXPECT_THROW(aggregate_pool(g, bad, nn::RowVector::Ones(2)), InvalidInput);
  EXPECT_THROW(aggregate_pool(std::span<const Vec3>{}, Matrix(0, 2), nn::RowVector::Ones(2)), InvalidArgument);
}

TEST(AggregatePool, TapeMatchesValueLevel) {
  auto pts = oracle::random_cloud(9, 6);
  Matrix descs = oracle::random_matrix(9, 4, 7);
  std::vector<Vec3> centers{pts[0], pts[5]};
  Grouping g = knn_group(centers, std::span<const Vec3>(pts), 4);
  Tape t;
  std::vector<Vec3> members;
  for (std::size_t i : g.members()) members.push_back(pts[i]);
  Matrix gd(static_cast<nn::Index>(g.members().size()), 4);
  for (std::size_t r = 0; r < g.members().size(); ++r) gd.row(static_cast<nn::Index>(r)) = descs.row(g.members()[r]);
  Var out = aggregate_pool(t.constant(to_matrix(members)), t.constant(gd), g);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<Vec3> grp;
    for (std::size_t i : g.group(c)) grp.push_back(pts[i]);
    Matrix d(4, 4);
    for (int r = 0; r < 4; ++r) d.row(r) = descs.row(g.group(c)[r]);
    auto ref = aggregate_pool(grp, d, d.colwise().maxCoeff());
    EXPECT_NEAR((out.value().row(c).transpose() - ref.point).norm(), 0.0, 1e-12);
  }
}

TEST(GradCheck, AggregatePool) {
  ParameterStore s;
  std::vector<Vec3> centers{{0, 0, 0}, {0.5, 0.5, 0}};
  auto pts = oracle::random_cloud(10, 8);
  Grouping g = knn_group(centers, std::span<const Vec3>(pts), 5);
  const auto n = static_cast<nn::Index>(g.members().size());
  auto r = nn::check_gradients(s, {oracle::random_matrix(n, 3, 9), oracle::random_matrix(n, 5, 10)},
                               [&](Tape&, std::span<const Var> in) { return aggregate_pool(in[0], in[1], g); });
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

// Spread of a synthesized point across resamplings of a smooth patch shrinks
// as the sampling density grows.
TEST(AggregatePool, SynthesizedPointConvergesWithDensity) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 0, 11);
  std::vector<double> log_n, log_sd;
  for (std::size_t n : {256u, 512u, 1024u, 2048u}) {
    std::vector<Vec3> syn;
    for (int t = 0; t < 50; ++t) {
      Rng g(split_seed(9, n, t));
      std::vector<Vec3> pts;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = uniform(g, -1, 1), y = uniform(g, -1, 1);
        pts.emplace_back(x, y, 0.3 * (x * x + y * y));
      }
      std::vector<Vec3> c{Vec3::Zero()};
      Grouping grp = knn_group(c, std::span<const Vec3>(pts), n / 8);
      std::vector<Vec3> members;
      for (std::size_t i : grp.group(0)) members.push_back(pts[i]);
      syn.push_back(synthesize_point(members, Vec3::Zero(), store, cfg.prefix + ".ap").point);
    }
    Vec3 mean = Vec3::Zero();
    for (const auto& p : syn) mean += p;
    mean /= static_cast<double>(syn.size());
    double var = 0;
    for (const auto& p : syn) var += (p - mean).squaredNorm();
    log_n.push_back(std::log(static_cast<double>(n)));
    log_sd.push_back(0.5 * std::log(var / static_cast<double>(syn.size() - 1)));
  }
  const double mx = std::accumulate(log_n.begin(), log_n.end(), 0.0) / 4;
  const double my = std::accumulate(log_sd.begin(), log_sd.end(), 0.0) / 4;
  double num = 0, den = 0;
  for (int i = 0; i < 4; ++i) num += (log_n[i] - mx) * (log_sd[i] - my), den += (log_n[i] - mx) * (log_n[i] - mx);
  EXPECT_LE(num / den, 0.0);
}

// ---------------------------------------------------------------------------
// SA2

TEST(Sa2, TightClusterLandsInsideItsBox) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 0, 12);
  auto pts = oracle::random_cloud(30, 13, 0.01);
  for (auto& p : pts) p += Vec3(5, -2, 1);
  auto out = sa2_layer(PointCloud{pts, {}}, std::nullopt, 1, 30, store, cfg, 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.width(), 10);
  for (int a = 0; a < 3; ++a) {
    double lo = 1e9, hi = -1e9;
    for (const auto& p : pts) lo = std::min(lo, p[a]), hi = std::max(hi, p[a]);
    EXPECT_GE(out.points[0][a], lo - 1e-12);
    EXPECT_LE(out.points[0][a], hi + 1e-12);
  }
}

TEST(Sa2, ShapesAndKind) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 4, 14);
  auto pts = oracle::random_cloud(64, 15);
  FeatureSet f{pts, oracle::random_matrix(64, 4, 16), FeatureKind::pointwise};
  Sa2Trace trace;
  auto out = sa2_layer(PointCloud{pts, {}}, f, 8, 6, store, cfg, 3, &trace);
  EXPECT_EQ(out.size(), 8u);
  EXPECT_EQ(out.width(), 10);
  EXPECT_EQ(out.kind, FeatureKind::spatial);
  EXPECT_EQ(trace.fps.size(), 8u);
  EXPECT_EQ(trace.first.size(), 8u);
  EXPECT_EQ(trace.regroup.size(), 8u);
  for (const auto& w : trace.weights) {
    EXPECT_EQ(w.size(), 6u);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Sa2, PermutationInvariant) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 0, 17);
  auto pts = oracle::random_cloud(200, 18);
  auto shuffled = pts;
  std::mt19937 gen(5);
  std::shuffle(shuffled.begin(), shuffled.end(), gen);
  auto a = sa2_layer(PointCloud{pts, {}}, std::nullopt, 16, 8, store, cfg, 42);
  auto b = sa2_layer(PointCloud{shuffled, {}}, std::nullopt, 16, 8, store, cfg, 42);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR((a.points[i] - b.points[i]).norm(), 0.0, 1e-6);
  EXPECT_NEAR((a.descriptors - b.descriptors).cwiseAbs().maxCoeff(), 0.0, 1e-6);
}

TEST(Sa2, RejectsTooManyCenters) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 0, 19);
  auto pts = oracle::random_cloud(10, 20);
  EXPECT_THROW(sa2_layer(PointCloud{pts, {}}, std::nullopt, 11, 4, store, cfg, 0), InvalidArgument);
  EXPECT_THROW(sa2_layer(PointCloud{pts, {}}, std::nullopt, 0, 4, store, cfg, 0), InvalidArgument);
  EXPECT_THROW(sa2_layer(PointCloud{pts, {}}, std::nullopt, 3, 0, store, cfg, 0), InvalidArgument);
}

TEST(Sa2, MoreStableThanFpsUnderResampling) {
  Sa2Config cfg{"s", {32, 64}, {32, 64}};
  ParameterStore store;
  Rng rng(5);
  init_sa2(store, cfg, 0, rng);
  Scene scene = generate_scene(SceneSpec{}, 100);
  const std::size_t n = 2048, m = 64, k = 8 * n / m;
  std::vector<std::vector<Vec3>> fps_sets, sa2_sets;
  for (int t = 0; t < 6; ++t) {
    Rng g(split_seed(31, t));
    std::vector<std::size_t> idx(scene.cloud.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), g);
    std::vector<Vec3> sub;
    for (std::size_t i = 0; i < n; ++i) sub.push_back(scene.cloud.points[idx[i]]);
    std::vector<Vec3> f;
    for (std::size_t i : farthest_point_sample(std::span<const Vec3>(sub), m, 0)) f.push_back(sub[i]);
    fps_sets.push_back(f);
    sa2_sets.push_back(sa2_points(sub, m, k, store, cfg, 0));
  }
  auto spread = [](const std::vector<std::vector<Vec3>>& s) {
    double sum = 0;
    int c = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j) sum += oracle::chamfer(s[i], s[j]), ++c;
    return sum / c;
  };
  EXPECT_LT(spread(sa2_sets), spread(fps_sets));
}

TEST(GradCheck, Sa2Layer) {
  Sa2Config cfg = small_sa2();
  ParameterStore store = sa2_store(cfg, 2, 21);
  nn::GradCheckOptions opt;
  opt.max_coords_per_tensor = 24;
  auto r = nn::check_gradients(store, {oracle::random_matrix(24, 3, 22), oracle::random_matrix(24, 2, 23)},
                               [&](Tape&, std::span<const Var> in) {
                                 FeatureVars f{in[0], in[1], FeatureKind::pointwise};
                                 FeatureVars out = sa2_layer(f, 4, 6, cfg, 7);
                                 return nn::concat_cols({out.points, *out.descriptors});
                               },
                               opt);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

// ---------------------------------------------------------------------------
// TA2

namespace {

ParameterStore ta2_store(const Ta2Config& cfg, nn::Index w1, nn::Index w2, std::uint64_t seed) {
  ParameterStore s;
  Rng rng(seed);
  init_ta2(s, cfg, w1, w2, rng);
  return s;
}

FeatureSet features(std::vector<Vec3> pts, nn::Index w, std::uint64_t seed) {
  const auto n = static_cast<nn::Index>(pts.size());
  return FeatureSet{std::move(pts), oracle::random_matrix(n, w, seed), FeatureKind::pointwise};
}

}  // namespace

TEST(Ta2, IdenticalCloudsGroupTheTwin) {
  Ta2Config cfg{"t", {6, 8}};
  ParameterStore store = ta2_store(cfg, 3, 3, 30);
  auto pts = oracle::random_cloud(50, 31);
  auto f = features(pts, 3, 32);
  Grouping g;
  auto out = ta2_layer(f, f, std::nullopt, 0.3, 8, store, cfg, &g);
  EXPECT_EQ(out.size(), 50u);
  EXPECT_EQ(out.width(), 8);
  EXPECT_EQ(out.kind, FeatureKind::temporal);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_TRUE(contains(g.group(i), i)) << i;
}

TEST(Ta2, InitialFlowRecentersOnCorrespondent) {
  Ta2Config cfg{"t", {6, 8}};
  ParameterStore store = ta2_store(cfg, 0, 0, 33);
  auto pts = oracle::random_cloud(40, 34);
  const Vec3 shift(3, 0, 0);
  std::vector<Vec3> moved;
  for (const auto& p : pts) moved.push_back(p + shift);
  FeatureSet a{pts, Matrix(40, 0), FeatureKind::pointwise}, b{moved, Matrix(40, 0), FeatureKind::pointwise};
  Grouping g;
  ta2_layer(a, b, std::vector<Vec3>(40, shift), 0.2, 8, store, cfg, &g);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_TRUE(contains(g.group(i), i)) << i;
    EXPECT_FALSE(g.used_fallback(i));
  }
}

TEST(Ta2, SmallerRadiusGroupsAreSubsets) {
  Ta2Config cfg{"t", {6, 8}};
  ParameterStore store = ta2_store(cfg, 0, 0, 35);
  FeatureSet a{oracle::random_cloud(60, 36), Matrix(60, 0), FeatureKind::pointwise};
  FeatureSet b{oracle::random_cloud(80, 37), Matrix(80, 0), FeatureKind::pointwise};
  Grouping g1, g2;
  ta2_layer(a, b, std::nullopt, 0.8, 16, store, cfg, &g1);
  ta2_layer(a, b, std::nullopt, 0.4, 16, store, cfg, &g2);
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t j : g2.group(i)) EXPECT_TRUE(contains(g1.group(i), j)) << i << " " << j;
}

TEST(Ta2, TranslationEquivariant) {
  Ta2Config cfg{"t", {6, 8}};
  ParameterStore store = ta2_store(cfg, 2, 2, 38);
  auto a = features(oracle::random_cloud(30, 39), 2, 40);
  auto b = features(oracle::random_cloud(35, 41), 2, 42);
  auto base = ta2_layer(a, b, std::nullopt, 0.7, 8, store, cfg);
  const Vec3 t(10.25, -4.5, 2.0);
  for (auto& p : a.points) p += t;
  for (auto& p : b.points) p += t;
  auto moved = ta2_layer(a, b, std::nullopt, 0.7, 8, store, cfg);
  EXPECT_NEAR((base.descriptors - moved.descriptors).cwiseAbs().maxCoeff(), 0.0, 1e-9);
}

TEST(Ta2, RejectsFlowLengthMismatch) {
  Ta2Config cfg{"t", {6, 8}};
  ParameterStore store = ta2_store(cfg, 0, 0, 43);
  FeatureSet a{oracle::random_cloud(5, 44), Matrix(5, 0), FeatureKind::pointwise};
  EXPECT_THROW(ta2_layer(a, a, std::vector<Vec3>(4, Vec3::Zero()), 0.5, 4, store, cfg), InvalidArgument);
}

TEST(GradCheck, Ta2Layer) {
  Ta2Config cfg{"t", {6, 5}};
  ParameterStore store = ta2_store(cfg, 2, 3, 45);
  std::vector<Vec3> flow(12, Vec3(0.1, 0, 0));
  nn::GradCheckOptions opt;
  opt.max_coords_per_tensor = 24;
  auto r = nn::check_gradients(
      store,
      {oracle::random_matrix(12, 3, 46), oracle::random_matrix(12, 2, 47), oracle::random_matrix(15, 3, 48),
       oracle::random_matrix(15, 3, 49)},
      [&](Tape&, std::span<const Var> in) {
        FeatureVars a{in[0], in[1], FeatureKind::spatial}, b{in[2], in[3], FeatureKind::spatial};
        return *ta2_layer(a, b, &flow, 0.9, 6, cfg).descriptors;
      },
      opt);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

// ---------------------------------------------------------------------------
// Flow interpolation

TEST(FlowInterpolate, ExactAtSourceWithOneNeighbor) {
  auto src = oracle::random_cloud(20, 50);
  std::vector<Vec3> flow;
  for (std::size_t i = 0; i < 20; ++i) flow.emplace_back(double(i), 0, -double(i));
  auto out = flow_interpolate(src, flow, src, 1);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(out[i], flow[i]);
}

TEST(FlowInterpolate, MeanOfThreeNearest) {
  std::vector<Vec3> src{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {10, 10, 10}};
  std::vector<Vec3> flow{{3, 0, 0}, {0, 3, 0}, {0, 0, 3}, {100, 100, 100}};
  std::vector<Vec3> q{{0.2, 0.2, 0}};
  auto out = flow_interpolate(src, flow, q);
  EXPECT_NEAR((out[0] - Vec3(1, 1, 1)).norm(), 0.0, 1e-12);
}

TEST(FlowInterpolate, ConstantFlowStaysConstant) {
  auto src = oracle::random_cloud(30, 51);
  std::vector<Vec3> flow(30, Vec3(0.5, -0.25, 2));
  for (const auto& v : flow_interpolate(src, flow, oracle::random_cloud(40, 52, 3.0))) EXPECT_EQ(v, flow[0]);
}

TEST(FlowInterpolate, RejectsBadInputs) {
  auto src = oracle::random_cloud(5, 53);
  std::vector<Vec3> q{{0, 0, 0}};
  EXPECT_THROW(flow_interpolate(src, std::vector<Vec3>(4), q), InvalidArgument);
  EXPECT_THROW(flow_interpolate(std::span<const Vec3>{}, std::span<const Vec3>{}, q), InvalidArgument);
  EXPECT_THROW(flow_interpolate(src, std::vector<Vec3>(5, Vec3::Zero()), q, 0), InvalidArgument);
}
