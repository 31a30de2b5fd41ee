#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "lgaf/checkpoint.hpp"
#include "lgaf/config.hpp"
#include "lgaf/dataset_io.hpp"
#include "lgaf/degradation.hpp"
#include "lgaf/gradcheck_suite.hpp"
#include "lgaf/tensor.hpp"
#include "lgaf/train_eval.hpp"

using namespace lgaf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// LGAF_WORKERS, or 0 when unset.
int env_workers() {
  const char* v = std::getenv("LGAF_WORKERS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw std::invalid_argument(std::string("LGAF_WORKERS must be in [1, 256], got '") + v + "'");
  return static_cast<int>(n);
}

std::vector<double> parse_levels(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != field.size()) throw std::invalid_argument("bad level '" + field + "' in '" + text + "'");
    out.push_back(v);
  }
  return out;
}

json stats_json(const std::vector<double>& v) {
  if (v.empty()) return json::object();
  double mean = 0.0, lo = v.front(), hi = v.front();
  for (double x : v) {
    mean += x;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {{"mean", mean}, {"std", std::sqrt(var / static_cast<double>(v.size()))}, {"min", lo}, {"max", hi}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string config;
  std::string out_dir;
  std::string fusion_mode;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg;
  try {
    cfg = load_run_config(args.config);
    if (args.seed) {
      cfg.seed = *args.seed;
      cfg.train.seed = *args.seed;
    }
    if (!args.fusion_mode.empty()) cfg.model.fusion_mode = parse_fusion_mode(args.fusion_mode);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (const int w = env_workers()) cfg.train.workers = w;
    cfg.validate();
  } catch (const ConfigError& e) {
    std::cerr << "lgaf train: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "lgaf train: " << args.config << ": " << e.what() << '\n';
    return kExitUsage;
  }

  Dataset data;
  if (cfg.data_manifest.empty()) {
    data = gen_synthetic_faces(cfg.data_ids, cfg.data_per_id, cfg.model.backbone.input_height,
                               cfg.model.backbone.input_width, cfg.data_seed);
  } else {
    fs::path manifest(cfg.data_manifest);
    if (manifest.is_relative()) manifest = fs::path(args.config).parent_path() / manifest;
    data = load_dataset(read_image_manifest(manifest), cfg.model.backbone.input_height,
                        cfg.model.backbone.input_width);
  }
  cfg.model.n_classes = data.n_classes;

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_text(out / "config.toml", to_toml(cfg));

  std::cout << "training " << to_string(cfg.model.fusion_mode) << " on " << data.size() << " images, "
            << data.n_classes << " identities, " << cfg.train.epochs << " epochs, workers " << cfg.train.workers
            << '\n';
  Model<float> model(cfg.model, cfg.seed);
  auto result = train(model, data, cfg.train, [&](const EpochMetrics& m) {
    std::printf("epoch %3d  loss %.4f  acc %.4f  lr %.4g  Zl %.3f  Zg %.3f  gamma_l %.3f\n", m.epoch + 1, m.loss,
                m.train_acc, m.lr, m.mean_zl, m.mean_zg, m.mean_gamma_l);
    std::fflush(stdout);
  });
  write_metrics_csv(result.metrics, out / "metrics.csv");

  CheckpointInfo info;
  info.epoch = cfg.train.epochs;
  info.dataset_seed = cfg.data_seed;
  info.extra["resolved_config"] = to_toml(cfg);
  info.extra["workers"] = cfg.train.workers;
  info.extra["steps"] = result.steps;
  save_checkpoint(model, out / "checkpoint", info);
  std::cout << "wrote " << (out / "checkpoint").string() << ".{json,bin}, metrics.csv, config.toml\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string mode = "verify";
  std::string pairs;
  std::string gallery;
  std::string probes;
  std::string ranks = "1,3,5";
  int folds = 10;
  std::string out_dir = ".";
};

int cmd_eval(const EvalArgs& args) {
  auto ck = load_checkpoint(args.checkpoint);
  Model<float>& model = ck.model;
  const int h = model.config().backbone.input_height, w = model.config().backbone.input_width;
  json report;
  report["mode"] = args.mode;
  report["fusion_mode"] = to_string(model.config().fusion_mode);
  report["checkpoint"] = fs::path(args.checkpoint).filename().string();

  std::vector<double> gl, gg;
  if (args.mode == "verify") {
    if (args.pairs.empty()) throw std::invalid_argument("verify needs --pairs");
    auto rows = read_pairs(args.pairs);
    std::map<fs::path, std::size_t> index;
    std::vector<Image> images;
    auto slot = [&](const fs::path& p) {
      auto [it, fresh] = index.emplace(p, images.size());
      if (fresh) images.push_back(load_image(p, h, w));
      return it->second;
    };
    std::vector<Pair> pairs;
    for (const auto& r : rows) {
      const auto a = slot(r.a);
      const auto b = slot(r.b);
      pairs.push_back({a, b, r.same});
    }
    auto emb = embed_dataset(model, images);
    gl = emb.gamma_local;
    gg = emb.gamma_global;
    report["accuracy"] = verify(pairs, emb.kappa_hat, emb.dim, args.folds);
    report["pairs"] = pairs.size();
    report["folds"] = args.folds;
    report["images"] = images.size();
  } else if (args.mode == "identify") {
    if (args.gallery.empty() || args.probes.empty()) throw std::invalid_argument("identify needs --gallery and --probes");
    auto load = [&](const std::string& csv, std::vector<Image>& images, std::vector<int>& ids) {
      for (const auto& e : read_image_manifest(csv)) {
        images.push_back(load_image(e.path, h, w));
        ids.push_back(e.identity);
      }
    };
    std::vector<Image> g_images, p_images;
    std::vector<int> g_ids, p_ids;
    load(args.gallery, g_images, g_ids);
    load(args.probes, p_images, p_ids);
    std::vector<int> ks;
    for (double k : parse_levels(args.ranks)) {
      if (k < 1 || k != std::floor(k)) throw std::invalid_argument("ranks must be positive integers");
      ks.push_back(static_cast<int>(k));
    }
    auto ge = embed_dataset(model, g_images);
    auto pe = embed_dataset(model, p_images);
    auto rates = identify(ge.kappa_hat, g_ids, pe.kappa_hat, p_ids, ge.dim, ks);
    json r = json::object();
    for (std::size_t i = 0; i < ks.size(); ++i) r["rank_" + std::to_string(ks[i])] = rates[i];
    report["rates"] = r;
    report["gallery"] = g_images.size();
    report["probes"] = p_images.size();
    gl = pe.gamma_local;
    gg = pe.gamma_global;
  } else {
    throw std::invalid_argument("unknown eval mode '" + args.mode + "' (expected verify or identify)");
  }
  report["gamma_local"] = stats_json(gl);
  report["gamma_global"] = stats_json(gg);
  if (const int wk = env_workers()) report["workers"] = wk;

  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  write_text(fs::path(args.out_dir) / ("eval_" + args.mode + ".json"), text);
  return 0;
}

struct NormArgs {
  std::string checkpoint;
  std::string kind = "blur";
  std::string levels;
  std::string probes;
  int n_probes = 100;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
};

int cmd_analyze_norms(const NormArgs& args) {
  auto ck = load_checkpoint(args.checkpoint);
  Model<float>& model = ck.model;
  const int h = model.config().backbone.input_height, w = model.config().backbone.input_width;
  DegradationSpec spec;
  spec.kind = parse_degradation_kind(args.kind);
  if (!args.levels.empty()) {
    spec.levels = parse_levels(args.levels);
  } else if (spec.kind == DegradationKind::occlusion) {
    spec.levels = {0.0, 0.15, 0.3, 0.45};
  } else if (spec.kind == DegradationKind::deformation) {
    spec.levels = {0.0, 2.0, 4.0, 6.0};
  }
  spec.validate();

  std::vector<Image> probes;
  if (!args.probes.empty()) {
    for (const auto& e : read_image_manifest(args.probes)) probes.push_back(load_image(e.path, h, w));
  } else {
    // Unseen synthetic identities, five images each.
    const int ids = std::max(1, (args.n_probes + 4) / 5);
    auto data = gen_synthetic_faces(ids, 5, h, w, 7000 + args.seed);
    probes.assign(data.images.begin(), data.images.begin() + std::min<std::size_t>(data.size(), args.n_probes));
  }

  auto report = norm_correlation(model, probes, spec, args.seed);
  const fs::path out(args.out_dir);
  fs::create_directories(out);
  const auto stem = "norms_" + to_string(spec.kind);
  write_correlation_csv(report, out / (stem + ".csv"));
  write_correlation_summary(report, out / (stem + ".json"));

  std::printf("%s on %zu probes (%s)\n", to_string(spec.kind).c_str(), report.n,
              to_string(model.config().fusion_mode).c_str());
  for (const auto& l : report.levels)
    std::printf("  level %-6g  Zl %8.4f +- %-8.4f  Zg %8.4f +- %.4f\n", l.level, l.mean_zl, l.std_zl, l.mean_zg,
                l.std_zg);
  if (report.r_local) std::printf("  r_local  %+.4f\n", *report.r_local);
  if (report.r_global) std::printf("  r_global %+.4f\n", *report.r_global);
  return 0;
}

int cmd_gradcheck(int seeds, const std::string& corrupt) {
  GradSuiteOptions opts;
  opts.seeds = seeds;
  if (!corrupt.empty()) {
    const auto& ops = differentiable_ops();
    if (std::find(ops.begin(), ops.end(), corrupt) == ops.end())
      throw std::invalid_argument("--corrupt: unknown op '" + corrupt + "'");
    set_gradient_fault(corrupt);
  }
  auto report = run_gradcheck_suite(opts);
  set_gradient_fault("");
  std::printf("%-30s %14s  %s\n", "check", "max rel error", "status");
  for (const auto& e : report.entries)
    std::printf("%-30s %14.3e  %s\n", e.name.c_str(), e.max_rel_error, e.passed ? "ok" : "FAIL");
  if (report.passed()) {
    std::printf("all %zu checks within %.0e over %d seeds\n", report.entries.size(), report.tolerance, seeds);
    return 0;
  }
  std::string names;
  for (const auto& n : report.failures()) names += (names.empty() ? "" : ", ") + n;
  std::fprintf(stderr, "gradcheck failed: %s\n", names.c_str());
  return kExitFailure;
}

struct GenArgs {
  std::string out_dir;
  int ids = 20;
  int per_id = 50;
  int height = 32;
  int width = 32;
  std::uint64_t seed = 1;
  std::size_t pairs = 200;
};

int cmd_gen_data(const GenArgs& args) {
  auto data = gen_synthetic_faces(args.ids, args.per_id, args.height, args.width, args.seed);
  auto g = write_dataset(data, args.out_dir, args.pairs, args.seed);
  std::printf("wrote %zu images and %zu pairs to %s\n", g.images, g.pair_count, args.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LGAF face representation: training, evaluation and feature-norm analysis"};
  app.require_subcommand(1);

  TrainArgs train_args;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a TOML run config");
  train_cmd->add_option("--config", train_args.config, "Run config (TOML)")->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "Output directory (overrides out_dir)");
  auto* seed_opt = train_cmd->add_option("--seed", train_seed, "Seed (overrides seed)");
  train_cmd->add_option("--fusion-mode", train_args.fusion_mode, "local_only, global_only, direct_add or lgf");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Verification or closed-set identification report");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint stem")->required();
  eval_cmd->add_option("--mode", eval_args.mode, "verify or identify")->capture_default_str();
  eval_cmd->add_option("--pairs", eval_args.pairs, "Pairs CSV (pathA,pathB,same)");
  eval_cmd->add_option("--gallery", eval_args.gallery, "Gallery manifest CSV (path,identity)");
  eval_cmd->add_option("--probes", eval_args.probes, "Probe manifest CSV (path,identity)");
  eval_cmd->add_option("--ranks", eval_args.ranks, "Ranks to report")->capture_default_str();
  eval_cmd->add_option("--folds", eval_args.folds, "Verification folds")->capture_default_str();
  eval_cmd->add_option("--out-dir", eval_args.out_dir, "Report directory")->capture_default_str();

  NormArgs norm_args;
  auto* norm_cmd = app.add_subcommand("analyze-norms", "Correlate branch feature norms with a degradation ladder");
  norm_cmd->add_option("--checkpoint", norm_args.checkpoint, "Checkpoint stem")->required();
  norm_cmd->add_option("--kind", norm_args.kind, "occlusion, deformation or blur")->capture_default_str();
  norm_cmd->add_option("--levels", norm_args.levels, "Comma-separated ascending levels");
  norm_cmd->add_option("--probes", norm_args.probes, "Probe manifest CSV; synthetic faces when omitted");
  norm_cmd->add_option("--n-probes", norm_args.n_probes, "Synthetic probe count")->capture_default_str();
  norm_cmd->add_option("--seed", norm_args.seed, "Seed")->capture_default_str();
  norm_cmd->add_option("--out-dir", norm_args.out_dir, "Report directory")->capture_default_str();

  int gc_seeds = 5;
  std::string gc_corrupt;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc_cmd->add_option("--seeds", gc_seeds, "Seeds per check")->capture_default_str();
  gc_cmd->add_option("--corrupt", gc_corrupt, "Scale one op's backward (negative control)")->group("");

  GenArgs gen_args;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic face set with manifests and pairs");
  gen_cmd->add_option("--out-dir", gen_args.out_dir, "Output directory")->required();
  gen_cmd->add_option("--ids", gen_args.ids, "Identities")->capture_default_str();
  gen_cmd->add_option("--per-id", gen_args.per_id, "Images per identity")->capture_default_str();
  gen_cmd->add_option("--height", gen_args.height, "Image height")->capture_default_str();
  gen_cmd->add_option("--width", gen_args.width, "Image width")->capture_default_str();
  gen_cmd->add_option("--seed", gen_args.seed, "Seed")->capture_default_str();
  gen_cmd->add_option("--pairs", gen_args.pairs, "Verification pairs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) {
      if (*seed_opt) train_args.seed = train_seed;
      return cmd_train(train_args);
    }
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*norm_cmd) return cmd_analyze_norms(norm_args);
    if (*gc_cmd) return cmd_gradcheck(gc_seeds, gc_corrupt);
    if (*gen_cmd) return cmd_gen_data(gen_args);
  } catch (const std::exception& e) {
    std::cerr << "lgaf " << app.get_subcommands().front()->get_name() << ": " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
