#pragma once

// Finite-difference checks over every trainable operation at tiny sizes.

#include <string>
#include <utility>
#include <vector>

#include "festa/attention.hpp"
#include "festa/gradcheck.hpp"
#include "festa/network.hpp"

namespace festa {

struct GradSuiteEntry {
  std::string name;
  nn::GradCheckResult result;
};

namespace detail {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = uniform(rng, -scale, scale);
  return m;
}

inline std::vector<Vec3> random_points(std::size_t n, Rng& rng) {
  std::vector<Vec3> out(n);
  for (auto& p : out) p = Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
  return out;
}

// Non-zero biases keep ReLU kinks away from zero inputs.
inline void jitter_biases(nn::ParameterStore& s, Rng& rng) {
  for (auto& p : s)
    for (Index j = 0; j < p.bias.size(); ++j) p.bias[j] = uniform(rng, -0.2, 0.2);
}

}  // namespace detail

/// Tiny network settings used by the suite: 64-point clouds, width-8 layers.
inline NetworkConfig gradsuite_config() {
  NetworkConfig c;
  c.num_points = 64;
  c.ratio_spatial = 4;
  c.ratio_down1 = 2;
  c.ratio_down2 = 2;
  c.spatial_k = 8;
  c.down_k = 4;
  c.radius1 = 1.0;
  c.radius2 = 0.5;
  c.group_cap = 6;
  for (auto* w : {&c.ap_widths, &c.spatial_widths, &c.temporal_widths, &c.down1_widths, &c.down2_widths,
                  &c.up1_widths, &c.up2_widths, &c.up3_widths, &c.head_widths}) {
    *w = {8};
  }
  return c;
}

inline std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, const nn::GradCheckOptions& base = {}) {
  using nn::check_gradients;
  using nn::ParameterStore;
  Rng rng(split_seed(seed, 0x9c));
  std::vector<GradSuiteEntry> out;
  nn::GradCheckOptions opt = base;
  opt.seed = split_seed(seed, 1);
  auto run = [&](const std::string& name, ParameterStore& store, std::vector<Matrix> inputs,
                 const nn::GraphBuilder& build, std::size_t max_coords = 0) {
    nn::GradCheckOptions o = opt;
    if (max_coords) o.max_coords_per_tensor = max_coords;
    out.push_back({name, check_gradients(store, std::move(inputs), build, o)});
  };

  {
    ParameterStore s;
    nn::init_mlp(s, "m", 3, {8, 6}, rng);
    detail::jitter_biases(s, rng);
    run("shared_mlp", s, {detail::random_matrix(7, 3, rng)},
        [](Tape&, std::span<const Var> in) { return nn::shared_mlp(in[0], "m"); });
  }
  {
    ParameterStore s;
    nn::init_mlp(s, "m", 3, {5}, rng);
    detail::jitter_biases(s, rng);
    const std::vector<std::size_t> off{0, 3, 4, 9};
    run("max_pool", s, {detail::random_matrix(9, 3, rng)},
        [off](Tape&, std::span<const Var> in) { return nn::segment_max(nn::shared_mlp(in[0], "m"), off); });
  }
  {
    ParameterStore s;
    const auto pts = detail::random_points(10, rng);
    const std::vector<Vec3> centers{pts[0], pts[7]};
    Grouping g = knn_group(centers, std::span<const Vec3>(pts), 5);
    const auto n = static_cast<Index>(g.members().size());
    run("aggregate_pool", s, {detail::random_matrix(n, 3, rng), detail::random_matrix(n, 5, rng)},
        [g](Tape&, std::span<const Var> in) { return aggregate_pool(in[0], in[1], g); });
  }
  {
    ParameterStore s;
    Sa2Config cfg{"sa", {8, 12}, {8, 10}};
    init_sa2(s, cfg, 2, rng);
    detail::jitter_biases(s, rng);
    run(
        "sa2", s, {detail::random_matrix(24, 3, rng), detail::random_matrix(24, 2, rng)},
        [cfg](Tape&, std::span<const Var> in) {
          FeatureVars out = sa2_layer(FeatureVars{in[0], in[1], FeatureKind::pointwise}, 4, 6, cfg, 7);
          return nn::concat_cols({out.points, *out.descriptors});
        },
        24);
  }
  {
    ParameterStore s;
    Ta2Config cfg{"t", {6, 5}};
    init_ta2(s, cfg, 2, 3, rng);
    detail::jitter_biases(s, rng);
    const std::vector<Vec3> flow(12, Vec3(0.1, 0.0, 0.0));
    run(
        "ta2", s,
        {detail::random_matrix(12, 3, rng), detail::random_matrix(12, 2, rng), detail::random_matrix(15, 3, rng),
         detail::random_matrix(15, 3, rng)},
        [cfg, flow](Tape&, std::span<const Var> in) {
          FeatureVars a{in[0], in[1], FeatureKind::spatial}, b{in[2], in[3], FeatureKind::spatial};
          return *ta2_layer(a, b, &flow, 0.9, 6, cfg).descriptors;
        },
        24);
  }
  {
    ParameterStore s;
    nn::init_mlp(s, "sa", 5, {6, 5}, rng);
    detail::jitter_biases(s, rng);
    run("set_abstraction", s, {detail::random_matrix(20, 3, rng), detail::random_matrix(20, 2, rng)},
        [](Tape&, std::span<const Var> in) {
          return *set_abstraction(FeatureVars{in[0], in[1], FeatureKind::pointwise}, 5, 4, "sa", 3).descriptors;
        });
  }
  {
    ParameterStore s;
    nn::init_mlp(s, "up", 6, {6, 4}, rng);
    detail::jitter_biases(s, rng);
    run("set_upconv", s,
        {detail::random_matrix(6, 3, rng), detail::random_matrix(6, 3, rng), detail::random_matrix(15, 3, rng),
         detail::random_matrix(15, 2, rng)},
        [](Tape&, std::span<const Var> in) {
          return *set_upconv(FeatureVars{in[0], in[1], FeatureKind::spatial}, in[2], in[3], 3, "up").descriptors;
        });
  }

  const NetworkConfig c = gradsuite_config();
  const auto cloud1 = detail::random_points(64, rng);
  std::vector<Vec3> cloud2;
  for (const auto& p : cloud1) cloud2.push_back(p + Vec3(0.1, -0.05, 0.02));
  const Matrix gt = to_matrix(std::vector<Vec3>(64, Vec3(0.1, -0.05, 0.02)));
  std::vector<double> mask(64, 1.0);
  mask[0] = mask[5] = 0.0;
  {
    ParameterStore s = init_festa(c, split_seed(seed, 2));
    run(
        "heads", s, {},
        [&](Tape& t, std::span<const Var>) {
          ForwardVars fv = festa_forward(t, cloud1, cloud2, c, 3);
          return nn::concat_cols({fv.iterations[1].flow, *fv.iterations[1].mask_logits});
        },
        6);
  }
  {
    ParameterStore s = init_festa(c, split_seed(seed, 3));
    run(
        "festa_loss", s, {},
        [&](Tape& t, std::span<const Var>) {
          return festa_loss(festa_forward(t, cloud1, cloud2, c, 2), gt, mask, c.mu, c.lambda);
        },
        6);
  }
  {
    ParameterStore s = init_segmentation(c, split_seed(seed, 4));
    std::vector<int> labels(64);
    for (std::size_t i = 0; i < 64; ++i) labels[i] = static_cast<int>(i % c.seg_classes);
    run(
        "segmentation", s, {},
        [&](Tape& t, std::span<const Var>) { return nn::softmax_cross_entropy(seg_forward(t, cloud1, c, 1), labels); },
        6);
  }
  return out;
}

}  // namespace festa
