#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "festa/attention.hpp"
#include "festa/errors.hpp"
#include "festa/geometry.hpp"
#include "festa/neural.hpp"
#include "festa/random.hpp"

namespace festa {

inline constexpr const char* kToolVersion = "festa 0.1.0";
inline constexpr double kRelativeGuard = 1e-9;

// ---------------------------------------------------------------------------
// Flow metrics

struct FlowMetrics {
  double epe = 0.0;
  double acc_strict = 0.0;  // percent
  double acc_relax = 0.0;   // percent
  std::size_t count = 0;
  // Restricted to mask-true points; empty when no point is masked in.
  std::optional<double> masked_epe, masked_acc_strict, masked_acc_relax;
  std::size_t masked_count = 0;
};

inline double relative_flow_error(const Vec3& pred, const Vec3& gt) {
  return (pred - gt).norm() / (gt.norm() + kRelativeGuard);
}

/// Mean end-point error and the percentage of points whose error is under
/// 0.05 (strict) / 0.1 (relax) or whose relative error is under 5% / 10%.
inline FlowMetrics flow_metrics(std::span<const Vec3> pred, std::span<const Vec3> gt,
                                std::span<const std::uint8_t> mask = {}) {
  if (pred.size() != gt.size()) {
    throw InvalidArgument("flow_metrics: " + std::to_string(pred.size()) + " predictions for " +
                          std::to_string(gt.size()) + " ground-truth vectors");
  }
  if (!mask.empty() && mask.size() != gt.size()) {
    throw InvalidArgument("flow_metrics: mask has " + std::to_string(mask.size()) + " entries for " +
                          std::to_string(gt.size()) + " points");
  }
  FlowMetrics m;
  double epe = 0.0, strict = 0.0, relax = 0.0;
  double mepe = 0.0, mstrict = 0.0, mrelax = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double e = (pred[i] - gt[i]).norm();
    const double rel = e / (gt[i].norm() + kRelativeGuard);
    const double s = (e < 0.05 || rel < 0.05) ? 1.0 : 0.0;
    const double r = (e < 0.1 || rel < 0.1) ? 1.0 : 0.0;
    epe += e;
    strict += s;
    relax += r;
    if (!mask.empty() && mask[i]) {
      mepe += e;
      mstrict += s;
      mrelax += r;
      ++m.masked_count;
    }
  }
  m.count = gt.size();
  if (m.count > 0) {
    const double n = static_cast<double>(m.count);
    m.epe = epe / n;
    m.acc_strict = 100.0 * strict / n;
    m.acc_relax = 100.0 * relax / n;
  }
  if (m.masked_count > 0) {
    const double n = static_cast<double>(m.masked_count);
    m.masked_epe = mepe / n;
    m.masked_acc_strict = 100.0 * mstrict / n;
    m.masked_acc_relax = 100.0 * mrelax / n;
  }
  return m;
}

/// Point-weighted mean of per-pair metrics.
inline FlowMetrics pool_metrics(std::span<const FlowMetrics> parts) {
  FlowMetrics out;
  double e = 0, s = 0, r = 0, me = 0, ms = 0, mr = 0;
  for (const auto& p : parts) {
    const double n = static_cast<double>(p.count);
    e += p.epe * n;
    s += p.acc_strict * n;
    r += p.acc_relax * n;
    out.count += p.count;
    if (p.masked_epe) {
      const double k = static_cast<double>(p.masked_count);
      me += *p.masked_epe * k;
      ms += *p.masked_acc_strict * k;
      mr += *p.masked_acc_relax * k;
      out.masked_count += p.masked_count;
    }
  }
  if (out.count > 0) {
    const double n = static_cast<double>(out.count);
    out.epe = e / n;
    out.acc_strict = s / n;
    out.acc_relax = r / n;
  }
  if (out.masked_count > 0) {
    const double n = static_cast<double>(out.masked_count);
    out.masked_epe = me / n;
    out.masked_acc_strict = ms / n;
    out.masked_acc_relax = mr / n;
  }
  return out;
}

inline nlohmann::json to_json(const FlowMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epe", m.epe},
          {"acc_strict", m.acc_strict},
          {"acc_relax", m.acc_relax},
          {"count", m.count},
          {"masked_epe", opt(m.masked_epe)},
          {"masked_acc_strict", opt(m.masked_acc_strict)},
          {"masked_acc_relax", opt(m.masked_acc_relax)},
          {"masked_count", m.masked_count}};
}

inline FlowMetrics flow_metrics_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) { return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>()); };
  FlowMetrics m;
  m.epe = j.at("epe").get<double>();
  m.acc_strict = j.at("acc_strict").get<double>();
  m.acc_relax = j.at("acc_relax").get<double>();
  m.count = j.at("count").get<std::size_t>();
  m.masked_epe = opt("masked_epe");
  m.masked_acc_strict = opt("masked_acc_strict");
  m.masked_acc_relax = opt("masked_acc_relax");
  m.masked_count = j.at("masked_count").get<std::size_t>();
  return m;
}

// ---------------------------------------------------------------------------
// Magnitude-binned relative error

struct BinStat {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_relative_error;  // empty bin: no value
};

/// Buckets points by |gt| into [e0, e1), [e1, e2), ..., [e_{k-1}, e_k].
/// Points outside [e0, e_k] are ignored.
inline std::vector<BinStat> magnitude_binned_error(std::span<const Vec3> pred, std::span<const Vec3> gt,
                                                   std::span<const double> edges) {
  if (pred.size() != gt.size()) throw InvalidArgument("magnitude_binned_error: length mismatch");
  if (edges.size() < 2) throw InvalidArgument("magnitude_binned_error: need at least one bin (two edges)");
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    if (!(edges[i] < edges[i + 1])) throw InvalidArgument("magnitude_binned_error: edges must be strictly ascending");
  }
  const std::size_t bins = edges.size() - 1;
  std::vector<BinStat> out(bins);
  std::vector<double> sum(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = edges[b];
    out[b].hi = edges[b + 1];
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double mag = gt[i].norm();
    if (mag < edges.front() || mag > edges.back()) continue;
    auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), mag) - edges.begin());
    b = std::min(b, bins) - 1;
    sum[b] += relative_flow_error(pred[i], gt[i]);
    ++out[b].count;
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (out[b].count > 0) out[b].mean_relative_error = sum[b] / static_cast<double>(out[b].count);
  }
  return out;
}

/// Merges per-pair bins (same edges) weighted by population.
inline std::vector<BinStat> merge_bins(const std::vector<std::vector<BinStat>>& parts) {
  if (parts.empty()) return {};
  std::vector<BinStat> out = parts.front();
  std::vector<double> sum(out.size(), 0.0);
  for (auto& b : out) b.count = 0;
  for (const auto& p : parts) {
    if (p.size() != out.size()) throw InvalidArgument("merge_bins: bin layouts differ");
    for (std::size_t b = 0; b < p.size(); ++b) {
      if (p[b].mean_relative_error) sum[b] += *p[b].mean_relative_error * static_cast<double>(p[b].count);
      out[b].count += p[b].count;
    }
  }
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b].mean_relative_error =
        out[b].count ? std::optional<double>(sum[b] / static_cast<double>(out[b].count)) : std::nullopt;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Down-sampling stability

enum class StabilityMethod { fps, sa2 };

inline const char* to_string(StabilityMethod m) { return m == StabilityMethod::fps ? "fps" : "sa2"; }

struct StabilityOptions {
  std::vector<std::size_t> n_grid{256, 512, 1024, 2048};
  std::size_t resamples = 100;
  std::size_t down_to = 64;
  // SA2 group size k = group_ratio * n / down_to.
  std::size_t group_ratio = 8;
  // Reuse one draw (subset and FPS seed) for every resample.
  bool reuse_draw_seed = false;
  std::uint64_t seed = 0;
};

/// Frozen SA2 parameters used for the sa2 method.
struct Sa2Model {
  nn::ParameterStore* params = nullptr;
  Sa2Config config;
};

struct StabilityCurve {
  StabilityMethod method = StabilityMethod::fps;
  // Per n; empty when undefined (fewer than two resamples).
  std::vector<std::optional<double>> mean_cd;
};

struct StabilityReport {
  std::vector<std::size_t> n_grid;
  std::size_t resamples = 0;
  std::size_t scene_count = 0;
  std::size_t down_to = 0;
  std::size_t group_ratio = 0;
  std::uint64_t seed = 0;
  std::string source;  // "frozen-random" or a checkpoint path
  std::vector<StabilityCurve> curves;

  const StabilityCurve* curve(StabilityMethod m) const {
    for (const auto& c : curves)
      if (c.method == m) return &c;
    return nullptr;
  }
};

inline std::size_t sa2_group_size(std::size_t n, const StabilityOptions& o) {
  const double k = std::round(static_cast<double>(o.group_ratio) * static_cast<double>(n) /
                              static_cast<double>(o.down_to));
  return std::clamp<std::size_t>(static_cast<std::size_t>(k), 1, n);
}

/// Indices of n points drawn without replacement from `total`.
inline std::vector<std::size_t> draw_subset_indices(std::size_t total, std::size_t n, std::uint64_t seed) {
  if (n > total) throw InvalidArgument("draw_subset: n exceeds the scene size");
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(uniform_index(rng, total - i))]);
  idx.resize(n);
  return idx;
}

inline std::vector<Vec3> draw_subset(std::span<const Vec3> scene, std::size_t n, std::uint64_t seed) {
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i : draw_subset_indices(scene.size(), n, seed)) out.push_back(scene[i]);
  return out;
}

inline double mean_pairwise_chamfer(const std::vector<std::vector<Vec3>>& sets) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < sets.size(); ++a)
    for (std::size_t b = a + 1; b < sets.size(); ++b) {
      sum += chamfer_distance(sets[a], sets[b]);
      ++pairs;
    }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

/// For every scene and n: draw `resamples` n-subsets, down-sample each to
/// `down_to` points, average the Chamfer distance over all unordered pairs,
/// then average over scenes. Both methods see the same subsets.
inline StabilityReport stability_benchmark(const std::vector<std::vector<Vec3>>& scenes, const StabilityOptions& o,
                                           std::span<const StabilityMethod> methods, const Sa2Model* sa2 = nullptr) {
  if (scenes.empty()) throw InvalidArgument("stability: no scenes");
  if (o.n_grid.empty()) throw InvalidArgument("stability: empty n grid");
  if (o.resamples == 0 || o.down_to == 0 || o.group_ratio == 0) {
    throw InvalidArgument("stability: resamples, down_to and group_ratio must be positive");
  }
  for (std::size_t i = 0; i < o.n_grid.size(); ++i) {
    const std::size_t n = o.n_grid[i];
    if (n < o.down_to) throw InvalidArgument("stability: n=" + std::to_string(n) + " is below down_to");
    if (i > 0 && n <= o.n_grid[i - 1]) throw InvalidArgument("stability: n grid must be strictly ascending");
    for (const auto& s : scenes) {
      if (n > s.size()) {
        throw InvalidArgument("stability: n=" + std::to_string(n) + " exceeds a scene of " +
                              std::to_string(s.size()) + " points");
      }
    }
  }
  for (auto m : methods) {
    if (m == StabilityMethod::sa2 && (sa2 == nullptr || sa2->params == nullptr)) {
      throw InvalidArgument("stability: sa2 method needs parameters");
    }
  }
  StabilityReport rep;
  rep.n_grid = o.n_grid;
  rep.resamples = o.resamples;
  rep.scene_count = scenes.size();
  rep.down_to = o.down_to;
  rep.group_ratio = o.group_ratio;
  rep.seed = o.seed;
  for (auto m : methods) rep.curves.push_back({m, {}});

  for (std::size_t ni = 0; ni < o.n_grid.size(); ++ni) {
    const std::size_t n = o.n_grid[ni];
    std::vector<double> total(methods.size(), 0.0);
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      std::vector<std::vector<std::vector<Vec3>>> down(methods.size());
      for (std::size_t r = 0; r < o.resamples; ++r) {
        const std::size_t draw = o.reuse_draw_seed ? 0 : r;
        const auto subset = draw_subset(scenes[s], n, split_seed(o.seed, s, n, draw));
        const std::uint64_t fps_seed = split_seed(o.seed, s, n, draw, 0xf);
        for (std::size_t mi = 0; mi < methods.size(); ++mi) {
          if (methods[mi] == StabilityMethod::fps) {
            std::vector<Vec3> pts;
            for (std::size_t i : farthest_point_sample(subset, o.down_to, fps_seed)) pts.push_back(subset[i]);
            down[mi].push_back(std::move(pts));
          } else {
            down[mi].push_back(
                sa2_points(subset, o.down_to, sa2_group_size(n, o), *sa2->params, sa2->config, fps_seed));
          }
        }
      }
      for (std::size_t mi = 0; mi < methods.size(); ++mi) total[mi] += mean_pairwise_chamfer(down[mi]);
    }
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      rep.curves[mi].mean_cd.push_back(o.resamples < 2 ? std::nullopt
                                                       : std::optional<double>(total[mi] / static_cast<double>(scenes.size())));
    }
  }
  return rep;
}

inline nlohmann::json to_json(const StabilityReport& r) {
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& c : r.curves) {
    nlohmann::json cd = nlohmann::json::array();
    for (const auto& v : c.mean_cd) cd.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    curves.push_back({{"method", to_string(c.method)}, {"mean_chamfer", cd}});
  }
  return {{"chamfer_convention", "mean squared nearest-neighbour distance, summed over both directions"},
          {"n_grid", r.n_grid},
          {"resamples", r.resamples},
          {"scene_count", r.scene_count},
          {"down_to", r.down_to},
          {"group_ratio", r.group_ratio},
          {"seed", r.seed},
          {"source", r.source},
          {"curves", curves}};
}

inline StabilityReport stability_from_json(const nlohmann::json& j) {
  StabilityReport r;
  r.n_grid = j.at("n_grid").get<std::vector<std::size_t>>();
  r.resamples = j.at("resamples").get<std::size_t>();
  r.scene_count = j.at("scene_count").get<std::size_t>();
  r.down_to = j.at("down_to").get<std::size_t>();
  r.group_ratio = j.at("group_ratio").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.source = j.at("source").get<std::string>();
  for (const auto& c : j.at("curves")) {
    StabilityCurve curve;
    const auto name = c.at("method").get<std::string>();
    if (name != "fps" && name != "sa2") throw FormatError("unknown stability method '" + name + "'");
    curve.method = name == "fps" ? StabilityMethod::fps : StabilityMethod::sa2;
    for (const auto& v : c.at("mean_chamfer")) {
      curve.mean_cd.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
    r.curves.push_back(std::move(curve));
  }
  return r;
}

inline std::string csv_real(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

inline void write_stability_csv(std::ostream& os, const StabilityReport& r) {
  os << "n,method,mean_chamfer\n";
  for (std::size_t i = 0; i < r.n_grid.size(); ++i)
    for (const auto& c : r.curves) os << r.n_grid[i] << ',' << to_string(c.method) << ',' << csv_real(c.mean_cd[i]) << '\n';
}

inline nlohmann::json to_json(const std::vector<BinStat>& bins) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : bins) {
    out.push_back({{"lo", b.lo},
                   {"hi", b.hi},
                   {"count", b.count},
                   {"mean_relative_error", b.mean_relative_error ? nlohmann::json(*b.mean_relative_error)
                                                                 : nlohmann::json(nullptr)}});
  }
  return out;
}

inline std::vector<BinStat> bins_from_json(const nlohmann::json& j) {
  std::vector<BinStat> out;
  for (const auto& b : j) {
    BinStat s;
    s.lo = b.at("lo").get<double>();
    s.hi = b.at("hi").get<double>();
    s.count = b.at("count").get<std::size_t>();
    if (!b.at("mean_relative_error").is_null()) s.mean_relative_error = b.at("mean_relative_error").get<double>();
    out.push_back(s);
  }
  return out;
}

/// Envelope shared by every report file.
inline nlohmann::json make_report(const std::string& kind, const nlohmann::json& config, const nlohmann::json& seeds,
                                  const nlohmann::json& metrics) {
  return {{"tool_version", kToolVersion}, {"report", kind}, {"config", config}, {"seeds", seeds}, {"metrics", metrics}};
}

}  // namespace festa
