// Command-line entry points: data generation, training, evaluation and the
// stability benchmark. Exit codes: 0 success, 1 validation failure, 2 usage.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "festa/festa.hpp"

namespace fs = std::filesystem;
using namespace festa;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every tunable read from --config and --set.
struct Settings {
  NetworkConfig net;
  SceneSpec scene;
  PairOptions pair;
  StabilityOptions stability;
  std::size_t scene_count = 30;
  std::size_t pair_count = 200;
  double val_fraction = 0.1;
  std::vector<double> bin_edges{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.75, 1.0, 1.5};

  void apply(const KeyValue& kv) {
    if (net.apply(kv) || scene.apply(kv)) return;
    const std::string& k = kv.key;
    if (k == "motion_scale") pair.motion_scale = parse_real(kv);
    else if (k == "max_rotation_deg") pair.max_rotation_deg = parse_real(kv);
    else if (k == "dropout") pair.dropout = parse_real(kv);
    else if (k == "n_grid") stability.n_grid = parse_list<std::size_t>(kv);
    else if (k == "resamples") stability.resamples = parse_unsigned(kv);
    else if (k == "down_to") stability.down_to = parse_unsigned(kv);
    else if (k == "group_ratio") stability.group_ratio = parse_unsigned(kv);
    else if (k == "scene_count") scene_count = parse_unsigned(kv);
    else if (k == "pair_count") pair_count = parse_unsigned(kv);
    else if (k == "val_fraction") val_fraction = parse_real(kv);
    else if (k == "bin_edges") bin_edges = parse_list<double>(kv);
    else throw FormatError(kv.line, "unknown config key '" + k + "'");
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : net.entries()) j[k] = v;
    for (const auto& tok : detail::split_ws(scene.echo())) {
      const auto eq = tok.find('=');
      j[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    j["motion_scale"] = format_real(pair.motion_scale);
    j["max_rotation_deg"] = format_real(pair.max_rotation_deg);
    j["dropout"] = format_real(pair.dropout);
    j["n_grid"] = join_list(stability.n_grid);
    j["resamples"] = std::to_string(stability.resamples);
    j["down_to"] = std::to_string(stability.down_to);
    j["group_ratio"] = std::to_string(stability.group_ratio);
    j["scene_count"] = std::to_string(scene_count);
    j["pair_count"] = std::to_string(pair_count);
    j["val_fraction"] = format_real(val_fraction);
    j["bin_edges"] = join_list(bin_edges);
    return j;
  }
};

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::vector<std::string> overrides;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "key=value settings file");
  cmd->add_option("--set", c.overrides, "Extra key=value setting (repeatable)");
  cmd->add_option("--out", c.out, "Output directory");
}

Settings load_settings(const Common& c) {
  Settings s;
  if (!c.config.empty()) {
    for (const auto& kv : read_key_values(c.config)) s.apply(kv);
  }
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
    try {
      s.apply(KeyValue{o.substr(0, eq), o.substr(eq + 1), 0});
    } catch (const FormatError& e) {
      throw UsageError("--set " + o + ": " + std::string(e.what()).substr(std::string("line 0: ").size()));
    }
  }
  s.net.validate();
  s.scene.validate();
  return s;
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<ManifestEntry> load_manifest(const std::string& path, const std::string& key) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path);
  auto entries = read_manifest(in, key);
  if (entries.empty()) throw InvalidInput("manifest " + path + " lists no " + key + " files");
  const fs::path base = fs::path(path).parent_path();
  for (auto& e : entries)
    if (fs::path(e.path).is_relative()) e.path = (base / e.path).string();
  return entries;
}

std::vector<ScenePair> load_pairs(const std::string& manifest) {
  std::vector<ScenePair> out;
  for (const auto& e : load_manifest(manifest, "pair")) out.push_back(load_pair(e.path));
  return out;
}

FlowSample to_sample(const ScenePair& p) {
  return FlowSample{p.cloud1.points, p.cloud2.points, p.gt_flow, p.gt_mask};
}

std::string csv_row(std::initializer_list<std::string> cells) {
  std::string s;
  bool first = true;
  for (const auto& c : cells) {
    if (!first) s += ',';
    s += c;
    first = false;
  }
  return s + "\n";
}

// ---------------------------------------------------------------------------

int cmd_gen_scenes(const Common& c) {
  const Settings s = load_settings(c);
  const fs::path out = out_dir(c);
  fs::create_directories(out / "scenes");
  std::ostringstream manifest;
  manifest << "# scenes, seed " << c.seed << "\n";
  for (std::size_t i = 0; i < s.scene_count; ++i) {
    const std::uint64_t seed = split_seed(c.seed, i);
    Scene scene = generate_scene(s.scene, seed);
    char name[32];
    std::snprintf(name, sizeof name, "scenes/scene_%04zu.fpcs", i);
    save_scene((out / name).string(), scene);
    write_manifest_line(manifest, "scene", name,
                        {{"seed", std::to_string(seed)}, {"objects", std::to_string(scene.objects.size())}});
  }
  write_text(out / "scenes.manifest", manifest.str());
  std::cout << "wrote " << s.scene_count << " scenes to " << (out / "scenes.manifest").string() << "\n";
  return 0;
}

int cmd_gen_pairs(const Common& c) {
  Settings s = load_settings(c);
  s.scene.points = s.net.num_points;
  const fs::path out = out_dir(c);
  fs::create_directories(out / "pairs");
  std::ostringstream manifest;
  manifest << "# flow pairs, seed " << c.seed << "\n";
  for (std::size_t i = 0; i < s.pair_count; ++i) {
    ScenePair pair;
    bool ok = false;
    for (std::size_t attempt = 0; attempt < 16 && !ok; ++attempt) {
      try {
        Scene scene = generate_scene(s.scene, split_seed(c.seed, i, attempt, 0));
        pair = generate_pair(scene, s.pair, split_seed(c.seed, i, attempt, 1));
        ok = true;
      } catch (const GenerationError&) {
      }
    }
    if (!ok) throw GenerationError("pair " + std::to_string(i) + ": no valid pair after 16 attempts");
    char name[32];
    std::snprintf(name, sizeof name, "pairs/pair_%04zu.fpcp", i);
    save_pair((out / name).string(), pair);
    write_manifest_line(manifest, "pair", name,
                        {{"seed", std::to_string(pair.seed)}, {"motion_scale", format_real(s.pair.motion_scale)},
                         {"object_radius", format_real(s.scene.object_radius)}});
  }
  write_text(out / "pairs.manifest", manifest.str());
  std::cout << "wrote " << s.pair_count << " pairs to " << (out / "pairs.manifest").string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string task = "flow";
  std::string data;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const Settings s = load_settings(c);
  if (a.task != "flow" && a.task != "segmentation") throw UsageError("--task must be flow or segmentation");
  if (!(s.val_fraction >= 0.0 && s.val_fraction < 1.0)) throw InvalidArgument("val_fraction must lie in [0, 1)");
  const fs::path out = out_dir(c);
  std::string log_csv = csv_row({"epoch", "train_loss", "val_loss", a.task == "flow" ? "val_epe" : "val_accuracy"});
  json epochs = json::array();
  const char* metric = a.task == "flow" ? "val_epe" : "val_accuracy";
  auto on_epoch = [&](const EpochRecord& r) {
    std::cerr << format_epoch(r, metric) << "\n";
    log_csv += csv_row({std::to_string(r.epoch), csv_real(r.train_loss), csv_real(r.val_loss), csv_real(r.val_metric)});
    epochs.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {metric, r.val_metric}});
  };
  TrainResult result;
  std::size_t n_train = 0, n_val = 0;
  if (a.task == "flow") {
    std::vector<FlowSample> all;
    for (const auto& p : load_pairs(a.data)) all.push_back(to_sample(p));
    n_val = static_cast<std::size_t>(s.val_fraction * static_cast<double>(all.size()));
    n_train = all.size() - n_val;
    if (n_train == 0) throw InvalidInput("no training pairs left after the validation split");
    std::vector<FlowSample> train(all.begin(), all.begin() + static_cast<long>(n_train));
    std::vector<FlowSample> val(all.begin() + static_cast<long>(n_train), all.end());
    result = train_flow(s.net, train, val, c.seed, on_epoch);
  } else {
    std::vector<SegSample> all;
    std::size_t i = 0;
    for (const auto& e : load_manifest(a.data, "scene")) {
      Scene scene = load_scene(e.path);
      const auto kinds = scene.kind_labels();
      SegSample sample;
      const std::size_t n = std::min(s.net.num_points, scene.cloud.size());
      for (std::size_t j : draw_subset_indices(scene.cloud.size(), n, split_seed(c.seed, 0x5ab, i++))) {
        sample.points.push_back(scene.cloud.points[j]);
        sample.labels.push_back(kinds[j]);
      }
      all.push_back(std::move(sample));
    }
    n_val = static_cast<std::size_t>(s.val_fraction * static_cast<double>(all.size()));
    n_train = all.size() - n_val;
    if (n_train == 0) throw InvalidInput("no training scenes left after the validation split");
    std::vector<SegSample> train(all.begin(), all.begin() + static_cast<long>(n_train));
    std::vector<SegSample> val(all.begin() + static_cast<long>(n_train), all.end());
    result = train_segmentation(s.net, train, val, c.seed, on_epoch);
  }
  save_network((out / "checkpoint.fckp").string(), result.params, s.net, a.task, c.seed);
  write_text(out / "train_log.csv", log_csv);
  write_json(out / "train_report.json",
             make_report("train", s.to_json(), {{"seed", c.seed}},
                         {{"task", a.task}, {"data", a.data}, {"train_count", n_train}, {"val_count", n_val},
                          {"epochs", epochs}}));
  std::cout << "trained " << a.task << " for " << s.net.epochs << " epochs; checkpoint "
            << (out / "checkpoint.fckp").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, oracle;
};

// Per pair, one predicted flow field per pass.
std::vector<std::vector<FlowField>> predict(const EvalArgs& a, const std::vector<ScenePair>& pairs,
                                            std::uint64_t seed, json& source) {
  if (a.checkpoint.empty() == a.oracle.empty()) throw UsageError("give exactly one of --checkpoint or --oracle");
  std::vector<std::vector<FlowField>> out;
  if (!a.oracle.empty()) {
    if (a.oracle != "zero") throw UsageError("unknown oracle '" + a.oracle + "' (expected zero)");
    source = {{"oracle", "zero"}};
    for (const auto& p : pairs)
      out.push_back({FlowField{std::vector<Vec3>(p.cloud1.size(), Vec3::Zero()), std::vector<double>(p.cloud1.size(), 1.0)}});
    return out;
  }
  LoadedNetwork net = load_network(a.checkpoint);
  if (net.task != "flow") throw InvalidInput("checkpoint " + a.checkpoint + " is a " + net.task + " model");
  source = {{"checkpoint", a.checkpoint}, {"network", json::object()}};
  for (const auto& [k, v] : net.config.entries()) source["network"][k] = v;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out.push_back(festa_forward(pairs[i].cloud1, pairs[i].cloud2, net.params, net.config, split_seed(seed, 0xe7, i)));
  return out;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
  const Settings s = load_settings(c);
  const auto pairs = load_pairs(a.data);
  json source;
  const auto preds = predict(a, pairs, c.seed, source);
  const std::size_t passes = preds.front().size();
  json per_pass = json::array();
  std::string csv = csv_row({"pass", "epe", "acc_strict", "acc_relax", "masked_epe", "masked_acc_strict",
                             "masked_acc_relax", "existence_accuracy"});
  for (std::size_t k = 0; k < passes; ++k) {
    std::vector<FlowMetrics> parts;
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const FlowField& f = preds[i][std::min(k, preds[i].size() - 1)];
      parts.push_back(flow_metrics(f.flow, pairs[i].gt_flow, pairs[i].gt_mask));
      for (std::size_t j = 0; j < f.existence.size(); ++j) hit += (f.existence[j] >= 0.5) == (pairs[i].gt_mask[j] != 0);
      total += f.existence.size();
    }
    const FlowMetrics m = pool_metrics(parts);
    const double exist = total ? 100.0 * static_cast<double>(hit) / static_cast<double>(total) : 0.0;
    json j = to_json(m);
    j["pass"] = k + 1;
    j["existence_accuracy"] = exist;
    per_pass.push_back(j);
    csv += csv_row({std::to_string(k + 1), csv_real(m.epe), csv_real(m.acc_strict), csv_real(m.acc_relax),
                    csv_real(m.masked_epe), csv_real(m.masked_acc_strict), csv_real(m.masked_acc_relax),
                    csv_real(exist)});
  }
  const fs::path out = out_dir(c);
  json metrics = {{"source", source}, {"data", a.data}, {"pair_count", pairs.size()}, {"passes", per_pass},
                  {"final", per_pass.back()}};
  write_json(out / "eval_report.json", make_report("eval", s.to_json(), {{"seed", c.seed}}, metrics));
  write_text(out / "eval_metrics.csv", csv);
  const json& f = per_pass.back();
  std::printf("EPE %.6f AccS %.2f AccR %.2f over %zu pairs\n", f["epe"].get<double>(), f["acc_strict"].get<double>(),
              f["acc_relax"].get<double>(), pairs.size());
  return 0;
}

int cmd_flow_curve(const Common& c, const EvalArgs& a) {
  const Settings s = load_settings(c);
  const auto pairs = load_pairs(a.data);
  json source;
  const auto preds = predict(a, pairs, c.seed, source);
  std::vector<std::vector<BinStat>> parts;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    parts.push_back(magnitude_binned_error(preds[i].back().flow, pairs[i].gt_flow, s.bin_edges));
  const auto bins = merge_bins(parts);
  std::string csv = csv_row({"bin_lo", "bin_hi", "count", "mean_relative_error"});
  for (const auto& b : bins)
    csv += csv_row({csv_real(b.lo), csv_real(b.hi), std::to_string(b.count), csv_real(b.mean_relative_error)});
  const fs::path out = out_dir(c);
  write_json(out / "flow_curve.json",
             make_report("flow-curve", s.to_json(), {{"seed", c.seed}},
                         {{"source", source}, {"data", a.data}, {"bins", to_json(bins)}}));
  write_text(out / "flow_curve.csv", csv);
  std::cout << csv;
  return 0;
}

struct StabilityArgs {
  std::string scenes, checkpoint;
};

int cmd_stability(const Common& c, const StabilityArgs& a) {
  const Settings s = load_settings(c);
  std::vector<std::vector<Vec3>> clouds;
  if (!a.scenes.empty()) {
    for (const auto& e : load_manifest(a.scenes, "scene")) clouds.push_back(load_scene(e.path).cloud.points);
  } else {
    for (std::size_t i = 0; i < s.scene_count; ++i) clouds.push_back(generate_scene(s.scene, split_seed(c.seed, i)).cloud.points);
  }
  nn::ParameterStore params;
  Sa2Config cfg{"spatial1", s.net.ap_widths, s.net.spatial_widths};
  std::string source = "frozen-random";
  if (!a.checkpoint.empty()) {
    LoadedNetwork net = load_network(a.checkpoint);
    if (!net.config.use_sa2) throw InvalidInput("checkpoint " + a.checkpoint + " has no SA2 layers");
    cfg = Sa2Config{net.task == "flow" ? "spatial" : "spatial1", net.config.ap_widths, net.config.spatial_widths};
    params = std::move(net.params);
    source = a.checkpoint;
  } else {
    Rng rng(split_seed(c.seed, 0x5a2));
    init_sa2(params, cfg, 0, rng);
  }
  StabilityOptions o = s.stability;
  o.seed = c.seed;
  const std::vector<StabilityMethod> methods{StabilityMethod::fps, StabilityMethod::sa2};
  Sa2Model model{&params, cfg};
  StabilityReport rep = stability_benchmark(clouds, o, methods, &model);
  rep.source = source;
  const fs::path out = out_dir(c);
  write_json(out / "stability.json", make_report("stability", s.to_json(), {{"seed", c.seed}}, to_json(rep)));
  std::ostringstream csv;
  write_stability_csv(csv, rep);
  write_text(out / "stability.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_gradcheck(const Common& c) {
  load_settings(c);
  const auto entries = run_gradient_suite(c.seed);
  const double tol = nn::GradCheckOptions{}.tolerance;
  double worst = 0.0;
  bool ok = true;
  json j = json::array();
  for (const auto& e : entries) {
    std::printf("%-16s max_rel_error %.3e checked %zu skipped %zu\n", e.name.c_str(), e.result.max_rel_error,
                e.result.checked, e.result.skipped);
    worst = std::max(worst, e.result.max_rel_error);
    ok = ok && e.result.passed(tol);
    j.push_back({{"op", e.name}, {"max_rel_error", e.result.max_rel_error}, {"checked", e.result.checked},
                 {"skipped", e.result.skipped}});
  }
  std::printf("max relative gradient error %.3e (tolerance %.0e): %s\n", worst, tol, ok ? "ok" : "FAILED");
  if (c.out != ".") {
    write_json(out_dir(c) / "gradcheck.json",
               make_report("gradcheck", json::object(), {{"seed", c.seed}},
                           {{"max_rel_error", worst}, {"tolerance", tol}, {"ops", j}}));
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"festa: scene flow with attentive spatial and temporal abstraction"};
  app.require_subcommand(1);
  Common common;
  TrainArgs train;
  EvalArgs eval;
  StabilityArgs stab;

  auto* gen_scenes = app.add_subcommand("gen-scenes", "Generate labeled multi-object scenes (FPCS/1)");
  auto* gen_pairs = app.add_subcommand("gen-pairs", "Generate rigid-motion flow pairs (FPCP/1)");
  auto* train_cmd = app.add_subcommand("train", "Train the flow or segmentation network");
  auto* eval_cmd = app.add_subcommand("eval", "Flow metrics on a pair manifest");
  auto* stab_cmd = app.add_subcommand("stability", "Down-sampling stability benchmark, FPS vs SA2");
  auto* curve_cmd = app.add_subcommand("flow-curve", "Relative error by ground-truth flow magnitude");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every trainable operation");
  for (auto* cmd : {gen_scenes, gen_pairs, train_cmd, eval_cmd, stab_cmd, curve_cmd, grad_cmd}) add_common(cmd, common);

  train_cmd->add_option("--task", train.task, "flow or segmentation")->check(CLI::IsMember({"flow", "segmentation"}));
  train_cmd->add_option("--data", train.data, "Pair manifest (flow) or scene manifest (segmentation)")->required();
  for (auto* cmd : {eval_cmd, curve_cmd}) {
    cmd->add_option("--data", eval.data, "Pair manifest")->required();
    cmd->add_option("--checkpoint", eval.checkpoint, "Flow checkpoint");
    cmd->add_option("--oracle", eval.oracle, "Reference predictor instead of a checkpoint (zero)");
  }
  stab_cmd->add_option("--scenes", stab.scenes, "Scene manifest (default: generate scene_count scenes)");
  stab_cmd->add_option("--checkpoint", stab.checkpoint, "Checkpoint providing SA2 parameters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_scenes) return cmd_gen_scenes(common);
    if (*gen_pairs) return cmd_gen_pairs(common);
    if (*train_cmd) return cmd_train(common, train);
    if (*eval_cmd) return cmd_eval(common, eval);
    if (*curve_cmd) return cmd_flow_curve(common, eval);
    if (*stab_cmd) return cmd_stability(common, stab);
    if (*grad_cmd) return cmd_gradcheck(common);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const festa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
