#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "festa/attention.hpp"
#include "festa/errors.hpp"
#include "festa/geometry.hpp"
#include "festa/kv.hpp"
#include "festa/neural.hpp"
#include "festa/random.hpp"

namespace festa {

struct NetworkConfig {
  std::size_t num_points = 2048;
  // Down-sampling: spatial layer n/8, then /2, then /4.
  std::size_t ratio_spatial = 8;
  std::size_t ratio_down1 = 2;
  std::size_t ratio_down2 = 4;
  std::size_t spatial_k = 64;
  std::size_t down_k = 16;
  std::size_t upconv_k = 3;
  std::size_t interp_k = 3;
  double radius1 = 2.0;
  double radius2 = 0.75;
  std::size_t group_cap = 16;
  double mu = 0.8;
  double lambda = 0.7;
  std::size_t iterations = 2;
  bool use_sa2 = true;
  bool use_ta2_second_pass = true;
  bool use_mask_head = true;

  std::vector<Index> ap_widths{32, 64};
  std::vector<Index> spatial_widths{32, 64};
  std::vector<Index> temporal_widths{64, 128};
  std::vector<Index> down1_widths{128, 128};
  std::vector<Index> down2_widths{128, 256};
  std::vector<Index> up1_widths{128};
  std::vector<Index> up2_widths{128};
  std::vector<Index> up3_widths{64};
  std::vector<Index> head_widths{64};
  std::size_t seg_classes = 5;

  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  std::size_t passes() const { return (iterations == 2 && use_ta2_second_pass) ? 2 : 1; }

  void validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(mu) || !in01(lambda)) throw InvalidArgument("config: mu and lambda must lie in [0, 1]");
    if (iterations != 1 && iterations != 2) throw InvalidArgument("config: iterations must be 1 or 2");
    if (ratio_spatial == 0 || ratio_down1 == 0 || ratio_down2 == 0) throw InvalidArgument("config: zero ratio");
    if (num_points / ratio_spatial / ratio_down1 / ratio_down2 == 0) {
      throw InvalidArgument("config: num_points " + std::to_string(num_points) + " too small for the ratios");
    }
    if (spatial_k == 0 || down_k == 0 || upconv_k == 0 || interp_k == 0 || group_cap == 0) {
      throw InvalidArgument("config: k values and group_cap must be positive");
    }
    if (!(radius1 > 0.0) || !(radius2 > 0.0)) throw InvalidArgument("config: radii must be positive");
    if (seg_classes < 2) throw InvalidArgument("config: seg_classes must be at least 2");
    if (batch_size == 0) throw InvalidArgument("config: batch_size must be positive");
    for (const auto* w : {&ap_widths, &spatial_widths, &temporal_widths, &down1_widths, &down2_widths, &up1_widths,
                          &up2_widths, &up3_widths, &head_widths}) {
      if (w->empty()) throw InvalidArgument("config: empty width list");
      for (Index x : *w)
        if (x <= 0) throw InvalidArgument("config: widths must be positive");
    }
  }

  /// Applies one key; false when the key is not a network setting.
  bool apply(const KeyValue& kv) {
    auto widths = [&](std::vector<Index>& dst) { dst = parse_list<Index>(kv); };
    const std::string& k = kv.key;
    if (k == "num_points") num_points = parse_unsigned(kv);
    else if (k == "ratio_spatial") ratio_spatial = parse_unsigned(kv);
    else if (k == "ratio_down1") ratio_down1 = parse_unsigned(kv);
    else if (k == "ratio_down2") ratio_down2 = parse_unsigned(kv);
    else if (k == "spatial_k") spatial_k = parse_unsigned(kv);
    else if (k == "down_k") down_k = parse_unsigned(kv);
    else if (k == "upconv_k") upconv_k = parse_unsigned(kv);
    else if (k == "interp_k") interp_k = parse_unsigned(kv);
    else if (k == "radius1") radius1 = parse_real(kv);
    else if (k == "radius2") radius2 = parse_real(kv);
    else if (k == "group_cap") group_cap = parse_unsigned(kv);
    else if (k == "mu") mu = parse_real(kv);
    else if (k == "lambda") lambda = parse_real(kv);
    else if (k == "iterations") iterations = parse_unsigned(kv);
    else if (k == "use_sa2") use_sa2 = parse_bool(kv);
    else if (k == "use_ta2_second_pass") use_ta2_second_pass = parse_bool(kv);
    else if (k == "use_mask_head") use_mask_head = parse_bool(kv);
    else if (k == "ap_widths") widths(ap_widths);
    else if (k == "spatial_widths") widths(spatial_widths);
    else if (k == "temporal_widths") widths(temporal_widths);
    else if (k == "down1_widths") widths(down1_widths);
    else if (k == "down2_widths") widths(down2_widths);
    else if (k == "up1_widths") widths(up1_widths);
    else if (k == "up2_widths") widths(up2_widths);
    else if (k == "up3_widths") widths(up3_widths);
    else if (k == "head_widths") widths(head_widths);
    else if (k == "seg_classes") seg_classes = parse_unsigned(kv);
    else if (k == "epochs") epochs = parse_unsigned(kv);
    else if (k == "batch_size") batch_size = parse_unsigned(kv);
    else if (k == "learning_rate") learning_rate = parse_real(kv);
    else if (k == "beta1") beta1 = parse_real(kv);
    else if (k == "beta2") beta2 = parse_real(kv);
    else if (k == "epsilon") epsilon = parse_real(kv);
    else return false;
    return true;
  }

  std::vector<std::pair<std::string, std::string>> entries() const {
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    auto u = [](std::size_t v) { return std::to_string(v); };
    return {
        {"num_points", u(num_points)},
        {"ratio_spatial", u(ratio_spatial)},
        {"ratio_down1", u(ratio_down1)},
        {"ratio_down2", u(ratio_down2)},
        {"spatial_k", u(spatial_k)},
        {"down_k", u(down_k)},
        {"upconv_k", u(upconv_k)},
        {"interp_k", u(interp_k)},
        {"radius1", format_real(radius1)},
        {"radius2", format_real(radius2)},
        {"group_cap", u(group_cap)},
        {"mu", format_real(mu)},
        {"lambda", format_real(lambda)},
        {"iterations", u(iterations)},
        {"use_sa2", b(use_sa2)},
        {"use_ta2_second_pass", b(use_ta2_second_pass)},
        {"use_mask_head", b(use_mask_head)},
        {"ap_widths", join_list(ap_widths)},
        {"spatial_widths", join_list(spatial_widths)},
        {"temporal_widths", join_list(temporal_widths)},
        {"down1_widths", join_list(down1_widths)},
        {"down2_widths", join_list(down2_widths)},
        {"up1_widths", join_list(up1_widths)},
        {"up2_widths", join_list(up2_widths)},
        {"up3_widths", join_list(up3_widths)},
        {"head_widths", join_list(head_widths)},
        {"seg_classes", u(seg_classes)},
        {"epochs", u(epochs)},
        {"batch_size", u(batch_size)},
        {"learning_rate", format_real(learning_rate)},
        {"beta1", format_real(beta1)},
        {"beta2", format_real(beta2)},
        {"epsilon", format_real(epsilon)},
    };
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : entries()) s += k + "=" + v + "\n";
    return s;
  }

  static NetworkConfig from_text(const std::string& text) {
    std::istringstream in(text);
    NetworkConfig c;
    for (const auto& kv : parse_key_values(in)) {
      if (!c.apply(kv)) throw FormatError(kv.line, "unknown config key '" + kv.key + "'");
    }
    return c;
  }

  nn::AdamOptions adam() const { return {learning_rate, beta1, beta2, epsilon}; }
};

// ---------------------------------------------------------------------------
// Backbone layers

/// FPS centers -> kNN -> center-subtracted shared PointNet -> max-pool.
inline FeatureVars set_abstraction(const FeatureVars& in, std::size_t m, std::size_t k, const std::string& prefix,
                                   std::uint64_t seed) {
  const std::size_t n = in.size();
  if (m == 0 || m > n) {
    throw InvalidArgument("set_abstraction: m=" + std::to_string(m) + " with " + std::to_string(n) + " points");
  }
  Tape& t = *in.points.tape();
  detail::Canonical c = detail::canonicalize(in);
  NeighborIndex index(c.values);
  std::vector<std::size_t> fps = farthest_point_sample(c.values, m, seed);
  detail::note_indices(t, fps);
  std::vector<Vec3> centers;
  for (std::size_t i : fps) centers.push_back(c.values[i]);
  Grouping g = knn_group(centers, index, k);
  detail::note_grouping(t, g);
  Var center_var = nn::gather_rows(c.points, fps);
  Var rows = detail::with_descriptors(detail::local_coordinates(c.points, center_var, g), c.descriptors, g);
  FeatureVars out;
  out.points = center_var;
  out.descriptors = nn::segment_max(nn::shared_mlp(rows, prefix), g.offsets());
  out.kind = FeatureKind::spatial;
  return out;
}

/// Each fine point pools its k nearest coarse features; the skip descriptor
/// (if any) is appended.
inline FeatureVars set_upconv(const FeatureVars& coarse, Var fine_points, const std::optional<Var>& skip,
                              std::size_t k, const std::string& prefix) {
  if (coarse.size() == 0) throw InvalidArgument("set_upconv: empty coarse set");
  if (skip && skip->rows() != fine_points.rows()) {
    throw ShapeError("set_upconv: skip has " + std::to_string(skip->rows()) + " rows for " +
                     std::to_string(fine_points.rows()) + " fine points");
  }
  Tape& t = *fine_points.tape();
  const std::vector<Vec3> coarse_pts = to_points(coarse.points.value());
  const std::vector<Vec3> fine = to_points(fine_points.value());
  Grouping g = knn_group(fine, std::span<const Vec3>(coarse_pts), k);
  detail::note_grouping(t, g);
  Var rows = detail::with_descriptors(detail::local_coordinates(coarse.points, fine_points, g), coarse.descriptors, g);
  Var pooled = nn::segment_max(nn::shared_mlp(rows, prefix), g.offsets());
  FeatureVars out;
  out.points = fine_points;
  out.descriptors = skip ? nn::concat_cols({pooled, *skip}) : pooled;
  out.kind = FeatureKind::pointwise;
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

inline Sa2Config spatial_config(const NetworkConfig& c, const std::string& prefix = "spatial") {
  return Sa2Config{prefix, c.ap_widths, c.spatial_widths};
}

inline Ta2Config temporal_config(const NetworkConfig& c) { return Ta2Config{"temporal", c.temporal_widths}; }

inline void init_spatial(nn::ParameterStore& store, const NetworkConfig& c, const std::string& prefix, Index in_width,
                         const std::vector<Index>& widths, Rng& rng) {
  if (c.use_sa2) nn::init_mlp(store, prefix + ".ap", 3 + in_width, c.ap_widths, rng);
  nn::init_mlp(store, prefix + ".mlp", 3 + in_width, widths, rng);
}

inline nn::ParameterStore init_festa(const NetworkConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(split_seed(seed, 0x1417));
  nn::ParameterStore s;
  const Index ws = c.spatial_widths.back();
  init_spatial(s, c, "spatial", 0, c.spatial_widths, rng);
  nn::init_mlp(s, "temporal.mlp", 3 + ws + ws, c.temporal_widths, rng);
  const Index wt = c.temporal_widths.back();
  nn::init_mlp(s, "down1", 3 + wt, c.down1_widths, rng);
  const Index w1 = c.down1_widths.back();
  nn::init_mlp(s, "down2", 3 + w1, c.down2_widths, rng);
  const Index w2 = c.down2_widths.back();
  nn::init_mlp(s, "up1", 3 + w2, c.up1_widths, rng);
  const Index u1 = c.up1_widths.back() + w1;
  nn::init_mlp(s, "up2", 3 + u1, c.up2_widths, rng);
  const Index u2 = c.up2_widths.back() + wt;
  nn::init_mlp(s, "up3", 3 + u2, c.up3_widths, rng);
  const Index u3 = c.up3_widths.back();
  std::vector<Index> flow_head = c.head_widths;
  flow_head.push_back(3);
  nn::init_mlp(s, "head.flow", u3, flow_head, rng);
  if (c.use_mask_head) {
    std::vector<Index> mask_head = c.head_widths;
    mask_head.push_back(1);
    nn::init_mlp(s, "head.mask", u3, mask_head, rng);
  }
  return s;
}

inline nn::ParameterStore init_segmentation(const NetworkConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(split_seed(seed, 0x5e6));
  nn::ParameterStore s;
  const Index w1 = c.spatial_widths.back();
  init_spatial(s, c, "spatial1", 0, c.spatial_widths, rng);
  init_spatial(s, c, "spatial2", w1, c.down1_widths, rng);
  const Index w2 = c.down1_widths.back();
  nn::init_mlp(s, "up1", 3 + w2, c.up1_widths, rng);
  const Index u1 = c.up1_widths.back() + w1;
  nn::init_mlp(s, "up2", 3 + u1, c.up3_widths, rng);
  std::vector<Index> head = c.head_widths;
  head.push_back(static_cast<Index>(c.seg_classes));
  nn::init_mlp(s, "head.cls", c.up3_widths.back(), head, rng);
  return s;
}

/// Fails with a state error when `store` was not built for `c`.
inline void check_store(const nn::ParameterStore& store, const nn::ParameterStore& expected) {
  if (store.size() != expected.size()) {
    throw StateError("parameter store has " + std::to_string(store.size()) + " entries, config expects " +
                     std::to_string(expected.size()));
  }
  for (const auto& p : expected) {
    if (!store.contains(p.name)) throw StateError("parameter store lacks " + p.name);
    const auto& q = store.at(p.name);
    if (q.in() != p.in() || q.out() != p.out()) {
      throw StateError("parameter " + p.name + " is " + nn::shape_str(q.in(), q.out()) + ", config expects " +
                       nn::shape_str(p.in(), p.out()));
    }
  }
}

// ---------------------------------------------------------------------------
// Flow network

struct FlowField {
  std::vector<Vec3> flow;
  std::vector<double> existence;
};

struct IterationVars {
  Var flow;                        // n x 3
  std::optional<Var> mask_logits;  // n x 1
  FeatureVars temporal;
  Grouping temporal_groups;
  std::vector<Vec3> initial_flow;  // empty on the first pass
};

struct ForwardVars {
  FeatureVars spatial1, spatial2;
  std::vector<IterationVars> iterations;
};

namespace detail {

inline FeatureVars spatial_stage(const FeatureVars& in, std::size_t m, std::size_t k, const NetworkConfig& c,
                                 const std::string& prefix, std::uint64_t seed) {
  if (c.use_sa2) return sa2_layer(in, m, k, Sa2Config{prefix, c.ap_widths, {}}, seed);
  return set_abstraction(in, m, k, prefix + ".mlp", seed);
}

}  // namespace detail

inline ForwardVars festa_forward(Tape& tape, std::span<const Vec3> cloud1, std::span<const Vec3> cloud2,
                                 const NetworkConfig& c, std::uint64_t seed) {
  c.validate();
  if (cloud1.empty() || cloud2.empty()) throw InvalidArgument("festa_forward: empty cloud");
  const std::size_t n = cloud1.size();
  const std::size_t m0 = std::max<std::size_t>(1, n / c.ratio_spatial);
  const std::size_t m2 = std::max<std::size_t>(1, cloud2.size() / c.ratio_spatial);
  const std::size_t m1 = std::max<std::size_t>(1, m0 / c.ratio_down1);
  const std::size_t mm = std::max<std::size_t>(1, m1 / c.ratio_down2);

  ForwardVars out;
  FeatureVars in1, in2;
  in1.points = tape.constant(to_matrix(cloud1));
  in2.points = tape.constant(to_matrix(cloud2));
  out.spatial1 = detail::spatial_stage(in1, m0, c.spatial_k, c, "spatial", split_seed(seed, 1));
  out.spatial2 = detail::spatial_stage(in2, m2, c.spatial_k, c, "spatial", split_seed(seed, 2));

  const Ta2Config tc = temporal_config(c);
  for (std::size_t pass = 0; pass < c.passes(); ++pass) {
    IterationVars it;
    const std::vector<Vec3>* shift = nullptr;
    double radius = c.radius1;
    if (pass > 0) {
      const std::vector<Vec3> prev = to_points(out.iterations.back().flow.value());
      const std::vector<Vec3> anchors = to_points(out.spatial1.points.value());
      it.initial_flow = flow_interpolate(cloud1, prev, anchors, c.interp_k);
      shift = &it.initial_flow;
      radius = c.radius2;
    }
    it.temporal = ta2_layer(out.spatial1, out.spatial2, shift, radius, c.group_cap, tc, &it.temporal_groups);
    FeatureVars d1 = set_abstraction(it.temporal, m1, c.down_k, "down1", split_seed(seed, 3));
    FeatureVars d2 = set_abstraction(d1, mm, c.down_k, "down2", split_seed(seed, 4));
    FeatureVars u1 = set_upconv(d2, d1.points, d1.descriptors, c.upconv_k, "up1");
    FeatureVars u2 = set_upconv(u1, it.temporal.points, it.temporal.descriptors, c.upconv_k, "up2");
    FeatureVars u3 = set_upconv(u2, in1.points, std::nullopt, c.upconv_k, "up3");
    Var h = nn::relu(*u3.descriptors);
    it.flow = nn::shared_mlp(h, "head.flow");
    if (c.use_mask_head) it.mask_logits = nn::shared_mlp(h, "head.mask");
    out.iterations.push_back(std::move(it));
  }
  return out;
}

inline FlowField to_flow_field(const IterationVars& it) {
  FlowField f;
  f.flow = to_points(it.flow.value());
  if (it.mask_logits) {
    const Matrix& z = it.mask_logits->value();
    for (Index i = 0; i < z.rows(); ++i) {
      const double v = z(i, 0);
      f.existence.push_back(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
    }
  } else {
    f.existence.assign(f.flow.size(), 1.0);
  }
  return f;
}

/// Frozen-parameter inference: one FlowField per pass.
inline std::vector<FlowField> festa_forward(const PointCloud& cloud1, const PointCloud& cloud2,
                                            nn::ParameterStore& store, const NetworkConfig& c, std::uint64_t seed) {
  check_store(store, init_festa(c, 0));
  Tape tape(&store);
  ForwardVars fv = festa_forward(tape, cloud1.points, cloud2.points, c, seed);
  std::vector<FlowField> out;
  for (const auto& it : fv.iterations) out.push_back(to_flow_field(it));
  return out;
}

// ---------------------------------------------------------------------------
// Loss

struct LossBreakdown {
  std::vector<double> flow;  // L_F per iteration
  std::vector<double> mask;  // L_M per iteration
  std::vector<double> iteration;
  double total = 0.0;
};

inline void check_weights(double mu, double lambda) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw InvalidArgument("loss: mu must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("loss: lambda must lie in [0, 1]");
}

/// L = mu L_F + (1 - mu) L_M.
inline double iteration_loss(double flow_loss, double mask_loss, double mu) {
  check_weights(mu, 0.0);
  return mu * flow_loss + (1.0 - mu) * mask_loss;
}

/// L_tot = (1 - lambda) L1 + lambda L2, or L1 alone for a single pass.
inline double total_loss(double l1, std::optional<double> l2, double lambda) {
  check_weights(0.0, lambda);
  return l2 ? (1.0 - lambda) * l1 + lambda * *l2 : l1;
}

inline LossBreakdown combine_losses(std::vector<double> flow, std::vector<double> mask, double mu, double lambda) {
  check_weights(mu, lambda);
  if (flow.empty() || flow.size() > 2 || mask.size() != flow.size()) {
    throw InvalidArgument("loss: need one or two iterations with a mask term each");
  }
  LossBreakdown b;
  b.flow = std::move(flow);
  b.mask = std::move(mask);
  for (std::size_t i = 0; i < b.flow.size(); ++i) b.iteration.push_back(iteration_loss(b.flow[i], b.mask[i], mu));
  b.total = total_loss(b.iteration[0], b.iteration.size() == 2 ? std::optional<double>(b.iteration[1]) : std::nullopt,
                       lambda);
  return b;
}

namespace detail {

inline double mean_squared_flow_error(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - gt[i]).squaredNorm();
  return pred.empty() ? 0.0 : s / static_cast<double>(pred.size());
}

inline double mean_bce(std::span<const double> p, std::span<const std::uint8_t> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-12, 1.0 - 1e-12);
    s -= y[i] ? std::log(q) : std::log(1.0 - q);
  }
  return p.empty() ? 0.0 : s / static_cast<double>(p.size());
}

}  // namespace detail

/// Value form over predicted fields (existence as probabilities).
inline LossBreakdown festa_loss(const std::vector<FlowField>& pred, std::span<const Vec3> gt_flow,
                                std::span<const std::uint8_t> gt_mask, double mu, double lambda) {
  std::vector<double> lf, lm;
  for (const auto& f : pred) {
    if (f.flow.size() != gt_flow.size() || f.existence.size() != gt_mask.size() || gt_mask.size() != gt_flow.size()) {
      throw ShapeError("loss: prediction and ground truth lengths differ");
    }
    lf.push_back(detail::mean_squared_flow_error(f.flow, gt_flow));
    lm.push_back(detail::mean_bce(f.existence, gt_mask));
  }
  return combine_losses(std::move(lf), std::move(lm), mu, lambda);
}

/// Tape form; the mask term is dropped when the mask head is disabled.
inline Var festa_loss(const ForwardVars& fv, const Matrix& gt_flow, const std::vector<double>& gt_mask, double mu,
                      double lambda, LossBreakdown* parts = nullptr) {
  check_weights(mu, lambda);
  std::vector<Var> per;
  std::vector<double> lf, lm;
  for (const auto& it : fv.iterations) {
    Var f = nn::mean_squared_error(it.flow, gt_flow);
    lf.push_back(f.value()(0, 0));
    if (it.mask_logits) {
      Var m = nn::bce_with_logits(*it.mask_logits, gt_mask);
      lm.push_back(m.value()(0, 0));
      per.push_back(nn::add(nn::scale(f, mu), nn::scale(m, 1.0 - mu)));
    } else {
      lm.push_back(0.0);
      per.push_back(nn::scale(f, mu));
    }
  }
  Var total = per.size() == 2 ? nn::add(nn::scale(per[0], 1.0 - lambda), nn::scale(per[1], lambda)) : per[0];
  if (parts) {
    *parts = LossBreakdown{};
    parts->flow = lf;
    parts->mask = lm;
    for (const auto& p : per) parts->iteration.push_back(p.value()(0, 0));
    parts->total = total.value()(0, 0);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Segmentation network

inline Var seg_forward(Tape& tape, std::span<const Vec3> cloud, const NetworkConfig& c, std::uint64_t seed) {
  c.validate();
  const std::size_t n = cloud.size();
  if (n == 0) throw InvalidArgument("seg_forward: empty cloud");
  const std::size_t m1 = std::max<std::size_t>(1, n / c.ratio_spatial);
  const std::size_t m2 = std::max<std::size_t>(1, m1 / c.ratio_down2);
  FeatureVars in;
  in.points = tape.constant(to_matrix(cloud));
  FeatureVars s1 = detail::spatial_stage(in, m1, c.spatial_k, c, "spatial1", split_seed(seed, 1));
  FeatureVars s2 = detail::spatial_stage(s1, m2, c.down_k, c, "spatial2", split_seed(seed, 2));
  FeatureVars u1 = set_upconv(s2, s1.points, s1.descriptors, c.upconv_k, "up1");
  FeatureVars u2 = set_upconv(u1, in.points, std::nullopt, c.upconv_k, "up2");
  return nn::shared_mlp(nn::relu(*u2.descriptors), "head.cls");
}

/// Per-point class scores (n x seg_classes) with frozen parameters.
inline Matrix seg_forward(const PointCloud& cloud, nn::ParameterStore& store, const NetworkConfig& c,
                          std::uint64_t seed) {
  check_store(store, init_segmentation(c, 0));
  Tape tape(&store);
  return seg_forward(tape, cloud.points, c, seed).value();
}

inline std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct FlowSample {
  std::vector<Vec3> cloud1, cloud2, gt_flow;
  std::vector<std::uint8_t> gt_mask;
};

struct SegSample {
  std::vector<Vec3> points;
  std::vector<int> labels;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  // EPE of the final pass (flow) or accuracy in percent (segmentation).
  double val_metric = 0.0;
};

struct TrainResult {
  nn::ParameterStore params;
  std::vector<EpochRecord> log;
};

/// Divergence during training; `last_good` holds the parameters before the
/// failing step.
class TrainingAborted : public TrainingDivergence {
 public:
  TrainingAborted(const std::string& what, nn::ParameterStore last_good, std::vector<EpochRecord> log)
      : TrainingDivergence(what),
        last_good_(std::make_shared<nn::ParameterStore>(std::move(last_good))),
        log_(std::move(log)) {}

  const nn::ParameterStore& last_good() const { return *last_good_; }
  const std::vector<EpochRecord>& log() const { return log_; }

 private:
  std::shared_ptr<nn::ParameterStore> last_good_;
  std::vector<EpochRecord> log_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline std::string format_epoch(const EpochRecord& r, const char* metric) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %zu train_loss %.9g val_loss %.9g %s %.9g", r.epoch, r.train_loss,
                r.val_loss, metric, r.val_metric);
  return buf;
}

namespace detail {

inline std::vector<double> mask_targets(const std::vector<std::uint8_t>& m) {
  return std::vector<double>(m.begin(), m.end());
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

// Shared minibatch loop: `step` runs forward+backward for one sample with the
// given loss scale and returns the unscaled loss.
template <typename Step, typename Validate>
std::vector<EpochRecord> run_epochs(nn::ParameterStore& store, const NetworkConfig& c, std::size_t n_train,
                                    std::uint64_t seed, Step&& step, Validate&& validate,
                                    const EpochCallback& on_epoch) {
  if (n_train == 0) throw InvalidArgument("train: empty dataset");
  std::vector<EpochRecord> log;
  auto record = [&](std::size_t epoch, double train_loss) {
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = train_loss;
    std::tie(r.val_loss, r.val_metric) = validate();
    log.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    const auto order = shuffled(n_train, split_seed(seed, 0xe0c, epoch));
    double sum = 0.0;
    for (std::size_t b = 0; b < n_train; b += c.batch_size) {
      const std::size_t e = std::min(n_train, b + c.batch_size);
      const double scale = 1.0 / static_cast<double>(e - b);
      nn::ParameterStore before = store;
      store.zero_grad();
      for (std::size_t i = b; i < e; ++i) {
        const double loss = step(order[i], scale, split_seed(seed, 0xf95, epoch, order[i]));
        if (!std::isfinite(loss)) {
          throw TrainingAborted("non-finite loss at epoch " + std::to_string(epoch), std::move(before), log);
        }
        sum += loss;
      }
      try {
        nn::adam_step(store, c.adam());
      } catch (const TrainingDivergence& e) {
        throw TrainingAborted(e.what(), std::move(before), log);
      }
    }
    record(epoch, sum / static_cast<double>(n_train));
  }
  return log;
}

}  // namespace detail

inline double flow_sample_loss(nn::ParameterStore& store, const FlowSample& s, const NetworkConfig& c,
                               std::uint64_t seed, double* epe = nullptr) {
  Tape tape(&store);
  ForwardVars fv = festa_forward(tape, s.cloud1, s.cloud2, c, seed);
  Var loss = festa_loss(fv, to_matrix(s.gt_flow), detail::mask_targets(s.gt_mask), c.mu, c.lambda);
  if (epe) {
    const Matrix d = fv.iterations.back().flow.value() - to_matrix(s.gt_flow);
    *epe = d.rowwise().norm().mean();
  }
  return loss.value()(0, 0);
}

/// Deterministic minibatch Adam training of the flow network. Validation uses
/// a fixed seed so epochs are comparable.
inline TrainResult train_flow(const NetworkConfig& c, const std::vector<FlowSample>& train,
                              const std::vector<FlowSample>& val, std::uint64_t seed,
                              const EpochCallback& on_epoch = {}) {
  TrainResult r;
  r.params = init_festa(c, seed);
  auto step = [&](std::size_t i, double scale, std::uint64_t s) {
    const FlowSample& x = train[i];
    Tape tape(&r.params);
    ForwardVars fv = festa_forward(tape, x.cloud1, x.cloud2, c, s);
    Var loss = festa_loss(fv, to_matrix(x.gt_flow), detail::mask_targets(x.gt_mask), c.mu, c.lambda);
    const double v = loss.value()(0, 0);
    if (std::isfinite(v)) tape.backward(loss, Matrix::Constant(1, 1, scale));
    return v;
  };
  auto validate = [&]() {
    if (val.empty()) return std::pair<double, double>(0.0, 0.0);
    double loss = 0.0, epe = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      double e = 0.0;
      loss += flow_sample_loss(r.params, val[i], c, split_seed(seed, 0x7a1, i), &e);
      epe += e;
    }
    r.params.zero_grad();
    const double n = static_cast<double>(val.size());
    return std::pair<double, double>(loss / n, epe / n);
  };
  r.log = detail::run_epochs(r.params, c, train.size(), seed, step, validate, on_epoch);
  return r;
}

inline double seg_accuracy(nn::ParameterStore& store, const SegSample& s, const NetworkConfig& c, std::uint64_t seed,
                           double* loss = nullptr) {
  Tape tape(&store);
  Var scores = seg_forward(tape, s.points, c, seed);
  if (loss) *loss = nn::softmax_cross_entropy(scores, s.labels).value()(0, 0);
  const auto pred = argmax_rows(scores.value());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == s.labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(std::max<std::size_t>(pred.size(), 1));
}

inline TrainResult train_segmentation(const NetworkConfig& c, const std::vector<SegSample>& train,
                                      const std::vector<SegSample>& val, std::uint64_t seed,
                                      const EpochCallback& on_epoch = {}) {
  TrainResult r;
  r.params = init_segmentation(c, seed);
  auto step = [&](std::size_t i, double scale, std::uint64_t s) {
    Tape tape(&r.params);
    Var scores = seg_forward(tape, train[i].points, c, s);
    Var loss = nn::softmax_cross_entropy(scores, train[i].labels);
    const double v = loss.value()(0, 0);
    if (std::isfinite(v)) tape.backward(loss, Matrix::Constant(1, 1, scale));
    return v;
  };
  auto validate = [&]() {
    if (val.empty()) return std::pair<double, double>(0.0, 0.0);
    double loss = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      double l = 0.0;
      acc += seg_accuracy(r.params, val[i], c, split_seed(seed, 0x7a1, i), &l);
      loss += l;
    }
    const double n = static_cast<double>(val.size());
    return std::pair<double, double>(loss / n, acc / n);
  };
  r.log = detail::run_epochs(r.params, c, train.size(), seed, step, validate, on_epoch);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints with the resolved config

inline nn::Metadata checkpoint_metadata(const NetworkConfig& c, const std::string& task, std::uint64_t seed) {
  return {
      {"task", task},
      {"seed", std::to_string(seed)},
      {"config", c.to_text()},
      {"temporal_fusion", "relative_xyz(p2-A),desc2,desc1"},
      {"skips", task == "flow" ? "up1<-down1,up2<-temporal,up3<-none" : "up1<-spatial1,up2<-none"},
  };
}

inline void save_network(const std::string& path, const nn::ParameterStore& store, const NetworkConfig& c,
                         const std::string& task, std::uint64_t seed) {
  nn::save_checkpoint(path, store, checkpoint_metadata(c, task, seed));
}

struct LoadedNetwork {
  nn::ParameterStore params;
  NetworkConfig config;
  std::string task;
};

inline LoadedNetwork load_network(const std::string& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  LoadedNetwork out;
  const std::string* cfg = ck.find("config");
  const std::string* task = ck.find("task");
  if (!cfg || !task) throw FormatError("checkpoint " + path + " lacks a config block");
  out.config = NetworkConfig::from_text(*cfg);
  out.task = *task;
  out.params = std::move(ck.params);
  check_store(out.params, out.task == "flow" ? init_festa(out.config, 0) : init_segmentation(out.config, 0));
  return out;
}

}  // namespace festa
