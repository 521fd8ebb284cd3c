#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "festa/errors.hpp"
#include "festa/geometry.hpp"
#include "festa/neural.hpp"
#include "festa/random.hpp"

namespace festa {

using nn::Index;
using nn::Matrix;
using nn::Tape;
using nn::Var;

enum class FeatureKind { spatial, temporal, pointwise };

inline const char* to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::spatial: return "spatial";
    case FeatureKind::temporal: return "temporal";
    case FeatureKind::pointwise: return "pointwise";
  }
  return "?";
}

/// Representative points with one descriptor row each (width may be 0).
struct FeatureSet {
  std::vector<Vec3> points;
  Matrix descriptors;
  FeatureKind kind = FeatureKind::pointwise;

  std::size_t size() const noexcept { return points.size(); }
  Index width() const noexcept { return descriptors.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(descriptors.rows()) != points.size() && descriptors.size() != 0) {
      throw ShapeError("feature set: " + std::to_string(descriptors.rows()) + " descriptor rows for " +
                       std::to_string(points.size()) + " points");
    }
  }
};

/// Same data on a tape: points (n x 3) and optional descriptors (n x D).
struct FeatureVars {
  Var points;
  std::optional<Var> descriptors;
  FeatureKind kind = FeatureKind::pointwise;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  Index width() const { return descriptors ? descriptors->cols() : 0; }
};

inline Matrix to_matrix(std::span<const Vec3> pts) {
  Matrix m(static_cast<Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Index>(i)) = pts[i].transpose();
  return m;
}

inline std::vector<Vec3> to_points(const Matrix& m) {
  if (m.cols() != 3) throw ShapeError("expected an n x 3 matrix, got " + nn::shape_str(m.rows(), m.cols()));
  std::vector<Vec3> pts(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) pts[static_cast<std::size_t>(i)] = m.row(i).transpose();
  return pts;
}

inline FeatureVars constant_features(Tape& tape, const FeatureSet& f) {
  f.validate();
  FeatureVars v;
  v.points = tape.constant(to_matrix(f.points));
  if (f.width() > 0) v.descriptors = tape.constant(f.descriptors);
  v.kind = f.kind;
  return v;
}

inline FeatureSet to_feature_set(const FeatureVars& v) {
  FeatureSet f;
  f.points = to_points(v.points.value());
  f.descriptors = v.descriptors ? v.descriptors->value() : Matrix(static_cast<Index>(f.points.size()), 0);
  f.kind = v.kind;
  return f;
}

namespace detail {

inline std::vector<std::size_t> as_vector(std::span<const std::size_t> s) { return {s.begin(), s.end()}; }

inline void note_indices(Tape& t, std::span<const std::size_t> idx) {
  std::uint64_t h = idx.size();
  for (std::size_t i : idx) h = h * 0x100000001b3ULL + i;
  t.note_discrete(h);
}

inline void note_grouping(Tape& t, const Grouping& g) {
  std::uint64_t h = g.members().size();
  for (std::size_t m : g.members()) h = h * 0x100000001b3ULL + m;
  t.note_discrete(h);
}

// Members of every group minus their group's center, stacked: the local frame
// each shared PointNet sees.
inline Var local_coordinates(Var cloud, Var centers, const Grouping& g) {
  Var members = nn::gather_rows(cloud, as_vector(g.members()));
  Var origin = nn::gather_rows(centers, g.segment_ids());
  return nn::sub(members, origin);
}

inline Var with_descriptors(Var local, const std::optional<Var>& desc, const Grouping& g) {
  if (!desc) return local;
  return nn::concat_cols({local, nn::gather_rows(*desc, as_vector(g.members()))});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Aggregate Pooling

struct ApOutput {
  Vec3 point;
  std::vector<double> weights;
};

/// w_i = softmax_i(f_i . f_g), output = sum_i w_i s_i.
inline ApOutput aggregate_pool(std::span<const Vec3> group, const Matrix& point_descs,
                               const Eigen::Ref<const nn::RowVector>& group_desc) {
  if (group.empty()) throw InvalidArgument("aggregate_pool: empty group");
  if (static_cast<std::size_t>(point_descs.rows()) != group.size()) {
    throw ShapeError("aggregate_pool: " + std::to_string(point_descs.rows()) + " descriptors for " +
                     std::to_string(group.size()) + " points");
  }
  if (point_descs.cols() != group_desc.size()) {
    throw ShapeError("aggregate_pool: descriptor width " + std::to_string(point_descs.cols()) +
                     " vs group descriptor width " + std::to_string(group_desc.size()));
  }
  if (!point_descs.allFinite() || !group_desc.allFinite()) throw InvalidInput("aggregate_pool: non-finite descriptor");
  Eigen::VectorXd logits = point_descs * group_desc.transpose();
  const double mx = logits.maxCoeff();
  Eigen::VectorXd w = (logits.array() - mx).exp();
  w /= w.sum();
  ApOutput out;
  out.point = Vec3::Zero();
  out.weights.assign(w.data(), w.data() + w.size());
  for (std::size_t i = 0; i < group.size(); ++i) out.point += w[static_cast<Index>(i)] * group[i];
  return out;
}

/// Tape form over many groups at once. `members` holds the absolute member
/// points stacked group by group; `point_descs` the matching f_i rows.
inline Var aggregate_pool(Var members, Var point_descs, const Grouping& g) {
  Var f_g = nn::segment_max(point_descs, g.offsets());
  Var logits = nn::row_dot(point_descs, nn::gather_rows(f_g, g.segment_ids()));
  Var w = nn::segment_softmax(logits, g.offsets());
  return nn::segment_sum(nn::scale_rows(members, w), g.offsets());
}

/// AP on one group with frozen parameters: f_i from the shared MLP `prefix`
/// on coordinates local to `center`, f_g their max-pool.
inline ApOutput synthesize_point(std::span<const Vec3> group, const Vec3& center, nn::ParameterStore& store,
                                 const std::string& prefix) {
  if (group.empty()) throw InvalidArgument("synthesize_point: empty group");
  Matrix local(static_cast<Index>(group.size()), 3);
  for (std::size_t i = 0; i < group.size(); ++i) local.row(static_cast<Index>(i)) = (group[i] - center).transpose();
  auto f = nn::shared_mlp_forward(store, prefix, local);
  return aggregate_pool(group, f.value(), nn::max_pool_rows(f.value()).pooled);
}

// ---------------------------------------------------------------------------
// SA2: FPS -> kNN -> AP -> regroup around synthesized points -> PointNet

struct Sa2Config {
  std::string prefix = "sa2";
  std::vector<Index> ap_widths{32, 64};
  std::vector<Index> widths{32, 64};
};

inline void init_sa2(nn::ParameterStore& store, const Sa2Config& cfg, Index in_width, Rng& rng) {
  nn::init_mlp(store, cfg.prefix + ".ap", 3 + in_width, cfg.ap_widths, rng);
  nn::init_mlp(store, cfg.prefix + ".mlp", 3 + in_width, cfg.widths, rng);
}

struct Sa2Trace {
  std::vector<std::size_t> fps;  // canonical indices
  Grouping first;
  Grouping regroup;
  std::vector<std::vector<double>> weights;
};

namespace detail {

struct Canonical {
  std::vector<std::size_t> order;
  Var points;
  std::optional<Var> descriptors;
  std::vector<Vec3> values;
};

inline Canonical canonicalize(const FeatureVars& in) {
  Canonical c;
  const std::vector<Vec3> raw = to_points(in.points.value());
  validate_points(raw);
  c.order = canonical_order(raw);
  note_indices(*in.points.tape(), c.order);
  c.points = nn::gather_rows(in.points, c.order);
  if (in.descriptors) c.descriptors = nn::gather_rows(*in.descriptors, c.order);
  c.values.reserve(raw.size());
  for (std::size_t i : c.order) c.values.push_back(raw[i]);
  return c;
}

}  // namespace detail

struct Sa2Synthesis {
  detail::Canonical cloud;
  NeighborIndex index;
  std::vector<std::size_t> fps;
  Grouping first;
  Var synthesized;  // m x 3
  Var weights;      // flat, one per member row
};

/// The AP half of SA2: synthesized representative points only.
inline Sa2Synthesis sa2_synthesize(const FeatureVars& in, std::size_t m, std::size_t k, const Sa2Config& cfg,
                                   std::uint64_t seed) {
  const std::size_t n = in.size();
  if (m == 0 || m > n) {
    throw InvalidArgument("sa2: m=" + std::to_string(m) + " with " + std::to_string(n) + " points");
  }
  if (k == 0) throw InvalidArgument("sa2: k must be positive");
  Tape& t = *in.points.tape();
  detail::Canonical c = detail::canonicalize(in);
  NeighborIndex index(c.values);
  std::vector<std::size_t> fps = farthest_point_sample(c.values, m, seed);
  detail::note_indices(t, fps);
  std::vector<Vec3> centers;
  centers.reserve(m);
  for (std::size_t i : fps) centers.push_back(c.values[i]);
  Grouping first = knn_group(centers, index, k);
  detail::note_grouping(t, first);

  Var center_var = nn::gather_rows(c.points, fps);
  Var local = detail::local_coordinates(c.points, center_var, first);
  Var f_i = nn::shared_mlp(detail::with_descriptors(local, c.descriptors, first), cfg.prefix + ".ap");
  Var members = nn::gather_rows(c.points, detail::as_vector(first.members()));
  Var f_g = nn::segment_max(f_i, first.offsets());
  Var logits = nn::row_dot(f_i, nn::gather_rows(f_g, first.segment_ids()));
  Var w = nn::segment_softmax(logits, first.offsets());
  Var synth = nn::segment_sum(nn::scale_rows(members, w), first.offsets());
  return Sa2Synthesis{std::move(c), std::move(index), std::move(fps), std::move(first), synth, w};
}

inline FeatureVars sa2_layer(const FeatureVars& in, std::size_t m, std::size_t k, const Sa2Config& cfg,
                             std::uint64_t seed, Sa2Trace* trace = nullptr) {
  Tape& t = *in.points.tape();
  Sa2Synthesis s = sa2_synthesize(in, m, k, cfg, seed);
  const std::vector<Vec3> centers = to_points(s.synthesized.value());
  Grouping regroup = knn_group(centers, s.index, k);
  detail::note_grouping(t, regroup);
  Var local = detail::local_coordinates(s.cloud.points, s.synthesized, regroup);
  Var h = nn::shared_mlp(detail::with_descriptors(local, s.cloud.descriptors, regroup), cfg.prefix + ".mlp");
  FeatureVars out;
  out.points = s.synthesized;
  out.descriptors = nn::segment_max(h, regroup.offsets());
  out.kind = FeatureKind::spatial;
  if (trace) {
    trace->fps = s.fps;
    trace->weights.clear();
    const Matrix& w = s.weights.value();
    for (std::size_t g = 0; g < s.first.size(); ++g) {
      trace->weights.emplace_back(w.data() + s.first.offsets()[g], w.data() + s.first.offsets()[g + 1]);
    }
    trace->first = std::move(s.first);
    trace->regroup = std::move(regroup);
  }
  return out;
}

/// Value-level convenience: SA2 over a plain cloud with frozen parameters.
inline FeatureSet sa2_layer(const PointCloud& cloud, const std::optional<FeatureSet>& in_features, std::size_t m,
                            std::size_t k, nn::ParameterStore& store, const Sa2Config& cfg, std::uint64_t seed,
                            Sa2Trace* trace = nullptr) {
  if (m > cloud.size()) {
    throw InvalidArgument("sa2: m=" + std::to_string(m) + " with " + std::to_string(cloud.size()) + " points");
  }
  Tape tape(&store);
  FeatureVars in;
  in.points = tape.constant(to_matrix(cloud.points));
  if (in_features && in_features->width() > 0) {
    if (in_features->size() != cloud.size()) throw ShapeError("sa2: feature rows do not match the cloud");
    in.descriptors = tape.constant(in_features->descriptors);
  }
  return to_feature_set(sa2_layer(in, m, k, cfg, seed, trace));
}

/// Synthesized points of SA2's AP stage for a plain point list.
inline std::vector<Vec3> sa2_points(std::span<const Vec3> cloud, std::size_t m, std::size_t k,
                                    nn::ParameterStore& store, const Sa2Config& cfg, std::uint64_t seed) {
  Tape tape(&store);
  FeatureVars in;
  in.points = tape.constant(to_matrix(cloud));
  return to_points(sa2_synthesize(in, m, k, cfg, seed).synthesized.value());
}

// ---------------------------------------------------------------------------
// TA2: radius grouping in the second cloud, centered at A or at A + flow

struct Ta2Config {
  std::string prefix = "ta2";
  std::vector<Index> widths{64, 128};
};

inline void init_ta2(nn::ParameterStore& store, const Ta2Config& cfg, Index width1, Index width2, Rng& rng) {
  nn::init_mlp(store, cfg.prefix + ".mlp", 3 + width2 + width1, cfg.widths, rng);
}

inline FeatureVars ta2_layer(const FeatureVars& feat1, const FeatureVars& feat2, const std::vector<Vec3>* initial_flow,
                             double radius, std::size_t cap, const Ta2Config& cfg, Grouping* trace = nullptr) {
  Tape& t = *feat1.points.tape();
  std::vector<Vec3> centers = to_points(feat1.points.value());
  if (initial_flow) {
    if (initial_flow->size() != centers.size()) {
      throw InvalidArgument("ta2: " + std::to_string(initial_flow->size()) + " flow vectors for " +
                            std::to_string(centers.size()) + " points");
    }
    for (std::size_t i = 0; i < centers.size(); ++i) centers[i] += (*initial_flow)[i];
  }
  const std::vector<Vec3> pts2 = to_points(feat2.points.value());
  Grouping g = radius_group(centers, std::span<const Vec3>(pts2), radius, cap);
  detail::note_grouping(t, g);
  std::vector<Var> parts{detail::local_coordinates(feat2.points, feat1.points, g)};
  if (feat2.descriptors) parts.push_back(nn::gather_rows(*feat2.descriptors, detail::as_vector(g.members())));
  if (feat1.descriptors) parts.push_back(nn::gather_rows(*feat1.descriptors, g.segment_ids()));
  Var h = nn::shared_mlp(nn::concat_cols(parts), cfg.prefix + ".mlp");
  FeatureVars out;
  out.points = feat1.points;
  out.descriptors = nn::segment_max(h, g.offsets());
  out.kind = FeatureKind::temporal;
  if (trace) *trace = std::move(g);
  return out;
}

inline FeatureSet ta2_layer(const FeatureSet& feat1, const FeatureSet& feat2,
                            const std::optional<std::vector<Vec3>>& initial_flow, double radius, std::size_t cap,
                            nn::ParameterStore& store, const Ta2Config& cfg, Grouping* trace = nullptr) {
  Tape tape(&store);
  FeatureVars a = constant_features(tape, feat1);
  FeatureVars b = constant_features(tape, feat2);
  return to_feature_set(ta2_layer(a, b, initial_flow ? &*initial_flow : nullptr, radius, cap, cfg, trace));
}

// ---------------------------------------------------------------------------

/// Unweighted mean of the flow at each query's k nearest source points.
inline std::vector<Vec3> flow_interpolate(std::span<const Vec3> source_points, std::span<const Vec3> source_flow,
                                          std::span<const Vec3> query_points, std::size_t k = 3) {
  if (source_points.empty()) throw InvalidArgument("flow_interpolate: empty source");
  if (source_flow.size() != source_points.size()) {
    throw InvalidArgument("flow_interpolate: " + std::to_string(source_flow.size()) + " flow vectors for " +
                          std::to_string(source_points.size()) + " points");
  }
  if (k == 0) throw InvalidArgument("flow_interpolate: k must be positive");
  NeighborIndex index(source_points);
  std::vector<Vec3> out;
  out.reserve(query_points.size());
  std::vector<std::size_t> nn;
  for (const auto& q : query_points) {
    nn.clear();
    index.knn(q, k, nn);
    Vec3 sum = Vec3::Zero();
    for (std::size_t i : nn) sum += source_flow[i];
    out.push_back(sum / static_cast<double>(nn.size()));
  }
  return out;
}

}  // namespace festa
