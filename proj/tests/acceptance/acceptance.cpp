// Acceptance run: one PASS/FAIL line per criterion. Tolerances and budgets
// are pinned below. Usage: acceptance --work <dir> [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "festa/festa.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace festa;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSec = 120.0;
constexpr double kOracleRealTol = 1e-12;
constexpr double kOracleBudgetSec = 60.0;
constexpr double kStabilityRatioMax = 0.70;
constexpr double kSegBudgetSec = 30.0 * 60.0;
constexpr double kFlowBudgetSec = 2.0 * 3600.0;
constexpr double kLossTol = 1e-15;
// Full-path checks pass through the BCE clamp at 1e-12.
constexpr double kLossPathTol = 1e-12;
constexpr double kRoundTripTol = 1e-6;

// Desk-scale training sizes.
constexpr std::size_t kSegPoints = 1024;
constexpr std::size_t kSegTrainScenes = 160;
constexpr std::size_t kSegTestScenes = 40;
constexpr std::size_t kSegEpochs = 20;
constexpr std::size_t kFlowPoints = 1024;
constexpr std::size_t kFlowTrainPairs = 180;
constexpr std::size_t kFlowValPairs = 20;
constexpr std::size_t kFlowTestPairs = 40;
constexpr std::size_t kFlowEpochs = 25;
constexpr std::uint64_t kSeed = 2024;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite(kSeed);
  const double sec = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  bool ok = true;
  for (const auto& e : entries) {
    if (e.result.max_rel_error >= worst) worst = e.result.max_rel_error, worst_op = e.name;
    ok = ok && e.result.passed(kGradTolerance);
  }
  ok = ok && sec < kGradBudgetSec && entries.size() >= 10;
  return {ok, fmt("%zu ops, max relative error %.3e (%s) < %.0e, %.1f s < %.0f s", entries.size(), worst,
                  worst_op.c_str(), kGradTolerance, sec, kGradBudgetSec)};
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  std::size_t checks = 0, failures = 0;
  auto expect = [&](bool c) { ++checks, failures += !c; };
  for (std::size_t n : {16u, 64u, 255u, 256u, 512u}) {
    const auto pts = oracle::random_cloud(n, 100 + n, 2.0);
    const auto other = oracle::random_cloud(n / 2 + 1, 200 + n, 2.0);
    const std::span<const Vec3> span(pts);

    const std::size_t m = std::min<std::size_t>(n, 48);
    expect(oracle::fps_is_max_min(pts, farthest_point_sample(span, m, n)));

    const std::vector<Vec3> centers(other.begin(), other.begin() + std::min<std::size_t>(other.size(), 20));
    Grouping g = knn_group(centers, span, 9);
    for (std::size_t c = 0; c < centers.size(); ++c) expect(oracle::to_vec(g.group(c)) == oracle::knn(pts, centers[c], 9));
    Grouping b = radius_group(centers, span, 0.9, 12);
    for (std::size_t c = 0; c < centers.size(); ++c) {
      auto want = oracle::ball(pts, centers[c], 0.9, 12);
      if (want.empty()) want = oracle::knn(pts, centers[c], 1);
      expect(oracle::to_vec(b.group(c)) == want);
    }

    expect(std::abs(chamfer_distance(span, other) - oracle::chamfer(pts, other)) <= kOracleRealTol);

    std::vector<Vec3> gt(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = i % 7 == 0 ? Vec3::Zero() : Vec3(pts[i] * 0.1);
      pred[i] = gt[i] + Vec3(other[i % other.size()] * 0.03 * static_cast<double>(i % 4));
    }
    const FlowMetrics fm = flow_metrics(pred, gt);
    const auto om = oracle::flow_metrics(pred, gt);
    expect(std::abs(fm.epe - om.epe) <= kOracleRealTol);
    expect(std::abs(fm.acc_strict - om.strict) <= kOracleRealTol);
    expect(std::abs(fm.acc_relax - om.relax) <= kOracleRealTol);
  }
  const double sec = seconds_since(t0);
  return {failures == 0 && sec < kOracleBudgetSec,
          fmt("%zu/%zu oracle checks agree (reals within %.0e), %.2f s < %.0f s", checks - failures, checks,
              kOracleRealTol, sec, kOracleBudgetSec)};
}

// ---------------------------------------------------------------------------
// Segmentation models shared by criteria 3 and 5

struct SegRun {
  nn::ParameterStore params;
  NetworkConfig config;
  double accuracy = 0.0;
  double seconds = 0.0;
};

NetworkConfig seg_config(bool use_sa2) {
  NetworkConfig c;
  c.num_points = kSegPoints;
  c.use_sa2 = use_sa2;
  c.epochs = kSegEpochs;
  return c;
}

std::vector<SegSample> seg_samples(std::size_t count, std::uint64_t seed) {
  SceneSpec spec;
  spec.object_radius = 1.5;
  spec.points = kSegPoints;
  std::vector<SegSample> out;
  for (std::size_t i = 0; out.size() < count; ++i) {
    try {
      Scene s = generate_scene(spec, split_seed(seed, i));
      out.push_back({s.cloud.points, s.kind_labels()});
    } catch (const GenerationError&) {
    }
  }
  return out;
}

class SegModels {
 public:
  const SegRun& get(bool use_sa2) {
    if (!ready_) train_all();
    return use_sa2 ? sa2_ : fps_;
  }

 private:
  void train_all() {
    const auto train = seg_samples(kSegTrainScenes, split_seed(kSeed, 0x5e9));
    const auto test = seg_samples(kSegTestScenes, split_seed(kSeed, 0x7e57));
    for (bool sa2 : {true, false}) {
      SegRun& run = sa2 ? sa2_ : fps_;
      run.config = seg_config(sa2);
      const auto t0 = Clock::now();
      run.params = train_segmentation(run.config, train, {}, split_seed(kSeed, 0x5e6)).params;
      run.seconds = seconds_since(t0);
      double acc = 0.0;
      for (std::size_t i = 0; i < test.size(); ++i)
        acc += seg_accuracy(run.params, test[i], run.config, split_seed(kSeed, 0xacc, i));
      run.accuracy = acc / static_cast<double>(test.size());
      std::fprintf(stderr, "  segmentation %s: %.2f%% held-out accuracy, trained in %.0f s\n", sa2 ? "sa2" : "fps",
                   run.accuracy, run.seconds);
    }
    ready_ = true;
  }

  bool ready_ = false;
  SegRun sa2_, fps_;
};

// ---------------------------------------------------------------------------
// 3. Stability

Outcome stability(SegModels& models) {
  const SegRun& run = models.get(true);
  std::vector<std::vector<Vec3>> scenes;
  SceneSpec spec;
  for (std::size_t i = 0; i < 30; ++i) scenes.push_back(generate_scene(spec, split_seed(kSeed, 0x57a, i)).cloud.points);
  StabilityOptions o;
  o.seed = kSeed;
  nn::ParameterStore params = run.params;
  Sa2Model model{&params, Sa2Config{"spatial1", run.config.ap_widths, run.config.spatial_widths}};
  const std::vector<StabilityMethod> methods{StabilityMethod::fps, StabilityMethod::sa2};
  const auto t0 = Clock::now();
  const StabilityReport rep = stability_benchmark(scenes, o, methods, &model);
  const double sec = seconds_since(t0);
  const auto& fps = *rep.curve(StabilityMethod::fps);
  const auto& sa2 = *rep.curve(StabilityMethod::sa2);
  bool ok = run.seconds <= kSegBudgetSec;
  std::string detail;
  for (std::size_t i = 0; i < rep.n_grid.size(); ++i) {
    const std::size_t n = rep.n_grid[i];
    const double ratio = *sa2.mean_cd[i] / *fps.mean_cd[i];
    ok = ok && (n >= 1024 ? ratio <= kStabilityRatioMax : ratio < 1.0);
    detail += fmt("n=%zu sa2/fps %.4f/%.4f=%.2f; ", n, *sa2.mean_cd[i], *fps.mean_cd[i], ratio);
  }
  detail += fmt("need <= %.2f at n>=1024 and < 1 below; seg training %.0f s, benchmark %.0f s", kStabilityRatioMax,
                run.seconds, sec);
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 4. Convergence of the synthesized point

Outcome convergence() {
  Sa2Config cfg{"conv", {32, 64}, {}};
  nn::ParameterStore store;
  Rng rng(split_seed(kSeed, 0xc0));
  init_sa2(store, cfg, 0, rng);
  std::vector<double> log_n, log_sd;
  std::string detail;
  for (std::size_t n : {256u, 512u, 1024u, 2048u}) {
    std::vector<Vec3> syn;
    for (std::size_t t = 0; t < 50; ++t) {
      Rng g(split_seed(kSeed, 0xc1, n, t));
      std::vector<Vec3> pts;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = uniform(g, -1, 1), y = uniform(g, -1, 1);
        pts.emplace_back(x, y, 0.3 * (x * x + y * y));
      }
      const std::vector<Vec3> c{Vec3::Zero()};
      Grouping grp = knn_group(c, std::span<const Vec3>(pts), n / 8);
      std::vector<Vec3> members;
      for (std::size_t i : grp.group(0)) members.push_back(pts[i]);
      syn.push_back(synthesize_point(members, Vec3::Zero(), store, cfg.prefix + ".ap").point);
    }
    Vec3 mean = Vec3::Zero();
    for (const auto& p : syn) mean += p;
    mean /= static_cast<double>(syn.size());
    double var = 0.0;
    for (const auto& p : syn) var += (p - mean).squaredNorm();
    // Per-coordinate standard deviation, averaged over the three axes.
    const double sd = std::sqrt(var / (3.0 * static_cast<double>(syn.size() - 1)));
    log_n.push_back(std::log(static_cast<double>(n)));
    log_sd.push_back(std::log(sd));
    detail += fmt("sd(%zu)=%.3e ", n, sd);
  }
  const double mx = std::accumulate(log_n.begin(), log_n.end(), 0.0) / 4.0;
  const double my = std::accumulate(log_sd.begin(), log_sd.end(), 0.0) / 4.0;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < 4; ++i) num += (log_n[i] - mx) * (log_sd[i] - my), den += (log_n[i] - mx) * (log_n[i] - mx);
  const double slope = num / den;
  return {slope <= 0.0, detail + fmt("log-log slope %.3f <= 0", slope)};
}

// ---------------------------------------------------------------------------
// 5. Segmentation direction

Outcome segmentation(SegModels& models) {
  const SegRun& sa2 = models.get(true);
  const SegRun& fps = models.get(false);
  const bool ok = sa2.accuracy >= fps.accuracy && sa2.seconds <= kSegBudgetSec && fps.seconds <= kSegBudgetSec;
  return {ok, fmt("r=1.5 held-out accuracy sa2 %.2f%% vs fps %.2f%% (%zu scenes); training %.0f s / %.0f s <= %.0f s",
                  sa2.accuracy, fps.accuracy, kSegTestScenes, sa2.seconds, fps.seconds, kSegBudgetSec)};
}

// ---------------------------------------------------------------------------
// Flow ablation shared by criteria 6 and 7

struct FlowRun {
  std::string name;
  double epe = 0.0;
  std::vector<BinStat> bins;
  double seconds = 0.0;
};

std::vector<FlowSample> flow_samples(std::size_t count, std::uint64_t seed) {
  SceneSpec spec;
  spec.points = kFlowPoints;
  PairOptions opt;
  std::vector<FlowSample> out;
  for (std::size_t i = 0; out.size() < count; ++i) {
    try {
      Scene s = generate_scene(spec, split_seed(seed, i, 0));
      ScenePair p = generate_pair(s, opt, split_seed(seed, i, 1));
      out.push_back({p.cloud1.points, p.cloud2.points, p.gt_flow, p.gt_mask});
    } catch (const GenerationError&) {
    }
  }
  return out;
}

// Quintile edges of the held-out ground-truth magnitudes: bottom and top bins
// each hold a fifth of the points.
std::vector<double> quintile_edges(const std::vector<FlowSample>& test) {
  std::vector<double> mags;
  for (const auto& s : test)
    for (const auto& f : s.gt_flow) mags.push_back(f.norm());
  std::sort(mags.begin(), mags.end());
  std::vector<double> edges{mags.front()};
  for (int q = 1; q < 5; ++q) edges.push_back(mags[mags.size() * static_cast<std::size_t>(q) / 5]);
  edges.push_back(mags.back());
  return edges;
}

class FlowAblation {
 public:
  const std::map<std::string, FlowRun>& runs() {
    if (runs_.empty()) train_all();
    return runs_;
  }
  double total_seconds() {
    double s = 0.0;
    for (const auto& [k, r] : runs()) s += r.seconds;
    return s;
  }

 private:
  void train_all() {
    const auto all = flow_samples(kFlowTrainPairs + kFlowValPairs, split_seed(kSeed, 0xf10));
    const std::vector<FlowSample> train(all.begin(), all.begin() + kFlowTrainPairs);
    const std::vector<FlowSample> val(all.begin() + kFlowTrainPairs, all.end());
    const auto test = flow_samples(kFlowTestPairs, split_seed(kSeed, 0x7e5));
    const auto edges = quintile_edges(test);
    auto variant = [](const char* name) {
      NetworkConfig c;
      c.num_points = kFlowPoints;
      c.epochs = kFlowEpochs;
      const std::string n = name;
      if (n == "no_ta2") c.use_ta2_second_pass = false;
      if (n == "no_sa2") c.use_sa2 = false;
      if (n == "no_mask") c.use_mask_head = false;
      return c;
    };
    for (const char* name : {"full", "no_ta2", "no_sa2", "no_mask"}) {
      const NetworkConfig c = variant(name);
      FlowRun r;
      r.name = name;
      const auto t0 = Clock::now();
      TrainResult tr = train_flow(c, train, val, split_seed(kSeed, 0xf11), [&](const EpochRecord& e) {
        if (e.epoch % 5 == 0) std::fprintf(stderr, "  %s %s\n", name, format_epoch(e, "val_epe").c_str());
      });
      r.seconds = seconds_since(t0);
      std::vector<FlowMetrics> parts;
      std::vector<std::vector<BinStat>> bins;
      for (std::size_t i = 0; i < test.size(); ++i) {
        PointCloud a{test[i].cloud1, {}}, b{test[i].cloud2, {}};
        const auto out = festa_forward(a, b, tr.params, c, split_seed(kSeed, 0xe7, i));
        parts.push_back(flow_metrics(out.back().flow, test[i].gt_flow));
        bins.push_back(magnitude_binned_error(out.back().flow, test[i].gt_flow, edges));
      }
      r.epe = pool_metrics(parts).epe;
      r.bins = merge_bins(bins);
      std::fprintf(stderr, "  flow %s: held-out EPE %.4f, trained in %.0f s\n", name, r.epe, r.seconds);
      runs_[name] = std::move(r);
    }
  }

  std::map<std::string, FlowRun> runs_;
};

// ---------------------------------------------------------------------------
// 6. Ablation ordering

Outcome ablation(FlowAblation& flow) {
  const auto& r = flow.runs();
  const double full = r.at("full").epe, no_ta2 = r.at("no_ta2").epe, no_sa2 = r.at("no_sa2").epe,
               no_mask = r.at("no_mask").epe;
  const double sec = flow.total_seconds();
  const bool ok = full < no_ta2 && full < no_sa2 && no_mask >= full && sec <= kFlowBudgetSec;
  return {ok, fmt("EPE full %.4f, no-TA2 %.4f, no-SA2 %.4f, no-mask %.4f over %zu held-out pairs; training %.0f s <= %.0f s",
                  full, no_ta2, no_sa2, no_mask, kFlowTestPairs, sec, kFlowBudgetSec)};
}

// ---------------------------------------------------------------------------
// 7. Error by flow magnitude

Outcome magnitude_bins(FlowAblation& flow) {
  const auto& r = flow.runs();
  const auto& full = r.at("full").bins;
  const auto& no_ta2 = r.at("no_ta2").bins;
  const auto& no_sa2 = r.at("no_sa2").bins;
  const double top_full = *full.back().mean_relative_error, top_no_ta2 = *no_ta2.back().mean_relative_error;
  const double low_full = *full.front().mean_relative_error, low_no_sa2 = *no_sa2.front().mean_relative_error;
  const bool ok = top_full < top_no_ta2 && low_full < low_no_sa2;
  return {ok, fmt("top bin [%.3f, %.3f]: full %.4f vs no-TA2 %.4f; bottom bin [%.3f, %.3f]: full %.4f vs no-SA2 %.4f",
                  full.back().lo, full.back().hi, top_full, top_no_ta2, full.front().lo, full.front().hi, low_full,
                  low_no_sa2)};
}

// ---------------------------------------------------------------------------
// 8. Loss arithmetic

Outcome loss_arithmetic() {
  std::vector<std::string> bad;
  auto near = [&](const char* what, double got, double want, double tol = kLossTol) {
    if (!(std::abs(got - want) <= tol)) bad.push_back(fmt("%s=%.17g want %.17g", what, got, want));
  };
  near("L(i) from L_F=1 L_M=0.5", iteration_loss(1.0, 0.5, 0.8), 0.9);
  near("L_tot from L1=1 L2=0", total_loss(1.0, 0.0, 0.7), 0.3);
  near("L_tot single iteration", total_loss(0.25, std::nullopt, 0.7), 0.25);
  {
    const std::vector<Vec3> gt{{1, 0, 0}, {0, 2, 0}};
    const std::vector<std::uint8_t> mask{1, 0};
    const FlowField f{gt, {1.0, 0.0}};
    near("perfect prediction", festa_loss({f, f}, gt, mask, 0.8, 0.7).total, 0.0, kLossPathTol);
  }
  {
    // L_F = 1 (squared errors 2 and 0), L_M = 0.5 (probabilities e^-1 and 1).
    const std::vector<Vec3> gt{{1, 1, 0}, {0, 0, 0}};
    const std::vector<std::uint8_t> mask{1, 1};
    const FlowField f1{{{0, 0, 0}, {0, 0, 0}}, {std::exp(-1.0), 1.0}};
    const FlowField f2{gt, {1.0, 1.0}};
    const LossBreakdown b = festa_loss({f1, f2}, gt, mask, 0.8, 0.7);
    near("festa_loss L(1)", b.iteration[0], 0.9, kLossPathTol);
    near("festa_loss L_tot", b.total, 0.3 * 0.9, kLossPathTol);
  }
  std::string detail = fmt("hand-derived values within %.0e, through festa_loss within %.0e", kLossTol, kLossPathTol);
  for (const auto& s : bad) detail += "; " + s;
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// 9. Determinism through the command line

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + FESTA_CLI_PATH + "\" " + args + " >> \"" + log.string() + "\" 2>&1";
  if (std::system(cmd.c_str()) != 0) throw InvalidInput("command failed: " + cmd);
}

Outcome determinism(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path log = root / "cli.log";
  const std::string small =
      "--set num_points=256 --set pair_count=12 --set epochs=2 --set batch_size=4 --set scene_count=3 "
      "--set resamples=4 --set n_grid=128,256 --set scene_points=512";
  run_cli("gen-pairs --seed 5 " + small + " --out \"" + (root / "data").string() + "\"", log);
  const std::string manifest = (root / "data" / "pairs.manifest").string();
  std::vector<std::string> mismatched;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    run_cli("train --task flow --seed 9 " + small + " --data \"" + manifest + "\" --out \"" + (out / "train").string() + "\"", log);
    run_cli("stability --seed 9 " + small + " --out \"" + (out / "stability").string() + "\"", log);
  }
  const std::vector<std::string> files{"train/train_report.json", "train/train_log.csv", "train/checkpoint.fckp",
                                       "stability/stability.json", "stability/stability.csv"};
  for (const auto& f : files)
    if (slurp(root / "a" / f) != slurp(root / "b" / f)) mismatched.push_back(f);
  std::string detail = fmt("%zu/%zu artifacts byte-identical across two runs", files.size() - mismatched.size(), files.size());
  for (const auto& f : mismatched) detail += "; differs: " + f;
  return {mismatched.empty(), detail};
}

// ---------------------------------------------------------------------------
// 10. FPCP/1 robustness

Outcome format_robustness() {
  std::size_t checks = 0;
  std::vector<std::string> bad;
  auto serialize = [](const ScenePair& p) {
    std::ostringstream os;
    write_pair(os, p);
    return os.str();
  };

  SceneSpec spec;
  spec.points = 400;
  const ScenePair p = generate_pair(generate_scene(spec, 77), 0.5, 78);
  const std::string good = serialize(p);
  {
    std::istringstream in(good);
    const ScenePair q = read_pair(in);
    double worst = 0.0;
    for (std::size_t i = 0; i < p.cloud1.size(); ++i) {
      worst = std::max(worst, (q.cloud1.points[i] - p.cloud1.points[i]).cwiseAbs().maxCoeff());
      worst = std::max(worst, (q.gt_flow[i] - p.gt_flow[i]).cwiseAbs().maxCoeff());
    }
    for (std::size_t i = 0; i < p.cloud2.size(); ++i)
      worst = std::max(worst, (q.cloud2.points[i] - p.cloud2.points[i]).cwiseAbs().maxCoeff());
    ++checks;
    const bool exact = q.seed == p.seed && q.gt_mask == p.gt_mask && *q.cloud1.labels == *p.cloud1.labels &&
                       *q.cloud2.labels == *p.cloud2.labels && q.kinds == p.kinds;
    if (!(worst <= kRoundTripTol) || !exact) bad.push_back(fmt("round-trip error %.3e", worst));
  }

  std::vector<std::string> lines;
  {
    std::istringstream in(good);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  auto join = [&](std::vector<std::string> l, std::size_t count) {
    std::string s;
    for (std::size_t i = 0; i < count && i < l.size(); ++i) s += l[i] + "\n";
    return s;
  };
  auto edit = [&](std::size_t i, const std::string& s) {
    auto l = lines;
    l[i] = s;
    return join(l, l.size());
  };
  // Expect a FormatError at `line` whose message contains every needle.
  auto expect = [&](const char* name, const std::string& text, std::size_t line, std::vector<std::string> needles = {}) {
    ++checks;
    std::istringstream in(text);
    try {
      read_pair(in);
      bad.push_back(std::string(name) + ": accepted");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      bool ok = e.line() == line;
      for (const auto& n : needles) ok = ok && msg.find(n) != std::string::npos;
      if (!ok) bad.push_back(fmt("%s: line %zu, message '%s'", name, e.line(), msg.c_str()));
    } catch (const std::exception& e) {
      bad.push_back(std::string(name) + ": wrong error type: " + e.what());
    }
  };

  const std::size_t header = 4 + p.transforms.size();
  const std::size_t first_point = header + 1;
  std::size_t flow_at = 0;
  for (std::size_t i = 0; i < lines.size(); ++i)
    if (lines[i] == "flow " + std::to_string(p.cloud1.size())) flow_at = i;
  const std::string n1 = std::to_string(p.cloud1.size()), n1m = std::to_string(p.cloud1.size() - 1);

  expect("empty file", "", 1);
  expect("wrong magic", "PLY\n", 1);
  expect("wrong version", "FPCP/2\n", 1);
  expect("header only", join(lines, header), header + 1, {"missing section 'cloud1'"});
  expect("flow count mismatch", edit(flow_at, "flow " + n1m), flow_at + 1, {n1m, n1});
  const std::size_t cut = first_point + p.cloud1.size() + 3;
  expect("truncated cloud2", join(lines, cut), cut + 1, {"truncated section 'cloud2'"});
  expect("non-numeric real", edit(first_point, "1 2 x 0"), first_point + 1);
  expect("non-finite real", edit(first_point, "1 2 nan 0"), first_point + 1);
  expect("label out of range", edit(first_point, "1 2 3 99"), first_point + 1);
  expect("short record", edit(first_point, "1 2 3"), first_point + 1);
  expect("bad mask value", edit(lines.size() - 2, "7"), lines.size() - 1);
  expect("missing end", join(lines, lines.size() - 1), lines.size());
  expect("negative seed", edit(1, "seed -4"), 2);
  expect("counts mismatch", edit(3, "counts cloud1=3 cloud2=4"), 4);

  std::string detail = fmt("%zu/%zu checks (round-trip within %.0e, malformed cases raise FormatError at the right line)",
                           checks - bad.size(), checks, kRoundTripTol);
  for (const auto& s : bad) detail += "; " + s;
  return {bad.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FESTA acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  SegModels seg;
  FlowAblation flow;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"down-sampling stability", [&] { return stability(seg); }},
      {"synthesized point convergence", convergence},
      {"segmentation direction", [&] { return segmentation(seg); }},
      {"ablation ordering", [&] { return ablation(flow); }},
      {"error by flow magnitude", [&] { return magnitude_bins(flow); }},
      {"loss arithmetic", loss_arithmetic},
      {"determinism", [&] { return determinism(work); }},
      {"format robustness", format_robustness},
  };
  std::size_t failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("%s %2d %-30s %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
