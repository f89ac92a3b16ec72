#pragma once

// Command-line front end: init, calibrate, analyze, run, sweep, bench.
// run_cli() is the whole program minus process setup, so tests can drive it
// in-process.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "algm/algm.hpp"
#include "algm/run_config.hpp"

namespace algm::cli {

struct Options {
  std::string config;
  std::string weights;
  std::string out;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string mode;
  std::optional<double> tau_clap;
  std::optional<double> tau_gbm;
  std::string merge_op;
  std::string calibration;
  std::string taus;
  std::string windows;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> warmup;
};

namespace detail {

namespace fs = std::filesystem;

inline fs::path out_dir(const Options& o) {
  const fs::path p = o.out.empty() ? fs::path(".") : fs::path(o.out);
  if (!fs::is_directory(p)) throw IoError("output directory '" + p.string() + "' does not exist");
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::vector<double> parse_double_list(const std::string& s, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ArgumentError(std::string(flag) + ": empty list");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const char* flag) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(s, flag)) {
    if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw ArgumentError(std::string(flag) + ": expected positive integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

// Config file plus command-line overrides.
inline RunConfig load(const Options& o) {
  if (o.config.empty()) throw ArgumentError("--config is required");
  RunConfig rc = load_run_config(o.config);
  if (!o.weights.empty()) rc.weights.path = o.weights;
  if (o.seed) rc.weights.seed = *o.seed;
  if (!o.mode.empty()) rc.mode = parse_mode(o.mode);
  if (o.tau_clap) rc.model.tau_clap = *o.tau_clap;
  if (o.tau_gbm) rc.model.tau_gbm = *o.tau_gbm;
  if (!o.merge_op.empty()) rc.model.merge_op = parse_merge_op(o.merge_op);
  if (!o.calibration.empty()) rc.calibration = o.calibration;
  if (!o.taus.empty()) {
    rc.taus = parse_double_list(o.taus, "--taus");
    for (std::size_t i = 1; i < rc.taus.size(); ++i)
      if (rc.taus[i] > rc.taus[i - 1]) throw ArgumentError("--taus: values must be descending");
  }
  if (!o.windows.empty()) rc.window_sizes = parse_size_list(o.windows, "--windows");
  if (o.batch) {
    if (*o.batch == 0) throw ArgumentError("--batch must be positive");
    rc.batch = *o.batch;
  }
  if (o.warmup) rc.warmup = *o.warmup;
  rc.model.validate("/model");
  return rc;
}

inline std::uint64_t forward_seed(const Options& o) { return o.seed.value_or(0); }

// Explicit --tau flags beat a calibration file, which beats the config.
// AUTO thresholds without a calibration file are calibrated on the data.
inline Thresholds resolve_thresholds(const Options& o, const RunConfig& rc, const WeightBundle& w,
                                     const std::vector<Image>& images, std::ostream& err) {
  const auto& cfg = rc.model;
  Thresholds t;
  const bool needs_auto = (cfg.use_clap && !cfg.tau_clap) || (!cfg.gbm_layers.empty() && !cfg.tau_gbm);
  if (!rc.calibration.empty()) {
    t = load_calibration(rc.calibration).thresholds(cfg);
  } else if (needs_auto) {
    err << "note: calibrating thresholds on " << images.size() << " image(s)\n";
    t = calibrate_threshold(cfg, w, images, rc.scope).thresholds(cfg);
    if (cfg.tau_clap) t.clap = *cfg.tau_clap;
    if (cfg.tau_gbm) std::fill(t.gbm.begin(), t.gbm.end(), *cfg.tau_gbm);
  } else {
    t = thresholds_from_config(cfg);
  }
  if (o.tau_clap) t.clap = *o.tau_clap;
  if (o.tau_gbm) std::fill(t.gbm.begin(), t.gbm.end(), *o.tau_gbm);
  return t;
}

inline nlohmann::json to_json(const TokenSchedule& s) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& c : s.sites)
    sites.push_back({{"site", site_name(c.site)}, {"layer", c.layer}, {"before", c.before}, {"after", c.after}});
  return {{"initial", s.initial}, {"attention", s.attention}, {"mlp", s.mlp}, {"sites", std::move(sites)},
          {"n", s.initial},       {"n_prime", s.n_prime()},   {"n_dprime", s.n_dprime()}};
}

inline std::string schedule_line(const TokenSchedule& s) {
  return std::to_string(s.initial) + " -> " + std::to_string(s.n_prime()) + " -> " + std::to_string(s.n_dprime());
}

inline std::string cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(line.find_first_not_of(' ', colon + 1));
    }
  }
  return "unknown";
}

inline nlohmann::json bench_json(const BenchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.per_image)
    rows.push_back({{"image_id", row.image_id}, {"im_per_sec", row.images_per_sec}, {"n_prime", row.n_prime},
                    {"n_dprime", row.n_dprime}});
  return {{"im_per_sec", r.images_per_sec}, {"batch", r.batch},   {"warmup_iters", r.warmup_iters},
          {"wall_seconds", r.wall_seconds}, {"threads", r.threads}, {"per_image", std::move(rows)}};
}

}  // namespace detail

inline void cmd_init(const Options& o, std::ostream& out) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  const auto w = init_random(rc.model, rc.weights.seed);
  const auto path = dir / "model.tmw1";
  save_weights(w, path);
  std::size_t params = 0;
  for (const auto& e : w.entries()) {
    out << e.name << " " << dims_string(e.dims) << "\n";
    params += e.values.size();
  }
  out << "layers: " << rc.model.depth << ", tensors: " << w.entries().size() << ", parameters: " << params << "\n";
  out << "wrote " << path.string() << "\n";
}

inline void cmd_calibrate(const Options& o, std::ostream& out) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  const auto w = resolve_weights(rc);
  const auto images = images_of(resolve_data(rc));
  const auto res = calibrate_threshold(rc.model, w, images, rc.scope);
  detail::write_json(dir / "calibration.json", to_json(res));
  for (const auto& s : res.sites)
    out << site_name(s.site) << " layer " << s.layer << ": mu " << fmt9(s.stats.mean()) << ", sigma "
        << fmt9(s.stats.stddev()) << ", tau " << fmt9(s.tau) << " (" << s.stats.count() << " pairs)\n";
  if (res.subsampled) out << "note: large token sets were subsampled\n";
  out << "wrote " << (dir / "calibration.json").string() << "\n";
}

inline void cmd_analyze(const Options& o, std::ostream& out, std::ostream& err) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  if (!rc.data.synthetic) throw ConfigError("/data: analyze needs per-pixel labels; use the synthetic source");
  const auto w = resolve_weights(rc);
  const auto data = resolve_data(rc);
  const auto local = local_similarity_stats(rc.model, w, data, rc.window_sizes);
  const auto global = global_similarity_stats(rc.model, w, data);
  for (const auto& m : local.warnings) err << "warning: " << m << "\n";
  detail::write_text(dir / "local_similarity.csv", to_csv(local));
  detail::write_text(dir / "global_similarity.csv", to_csv(global));
  for (std::size_t i = 0; i < local.x.size(); ++i) {
    const auto g = local.gap(i);
    out << "k=" << local.x[i] << " intra-inter gap " << (g ? fmt9(*g) : std::string("n/a")) << "\n";
  }
  out << "wrote " << (dir / "local_similarity.csv").string() << " and " << (dir / "global_similarity.csv").string()
      << "\n";
}

inline void cmd_run(const Options& o, std::ostream& out, std::ostream& err) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  const auto w = resolve_weights(rc);
  const auto images = images_of(resolve_data(rc));
  ForwardOptions opt;
  opt.mode = rc.mode;
  opt.seed = detail::forward_seed(o);
  if (rc.mode == Mode::algm && rc.model.has_merging())
    opt.thresholds = detail::resolve_thresholds(o, rc, w, images, err);

  std::string labels;
  nlohmann::json schedules = nlohmann::json::array();
  nlohmann::json reports = nlohmann::json::array();
  double gflops = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto p = predict(images[i], rc.model, w, opt);
    const auto& m = p.scores;
    for (std::size_t y = 0; y < m.height; ++y)
      for (std::size_t x = 0; x < m.width; ++x) {
        std::uint16_t best = 0;
        for (std::size_t c = 1; c < m.classes; ++c)
          if (m.at(c, y, x) > m.at(best, y, x)) best = static_cast<std::uint16_t>(c);
        labels.push_back(static_cast<char>(best & 0xFF));
        labels.push_back(static_cast<char>(best >> 8));
      }
    auto sj = detail::to_json(p.schedule);
    sj["image_id"] = i;
    schedules.push_back(std::move(sj));
    const auto f = flops_encoder(rc.model, p.schedule);
    auto fj = to_json(f);
    fj["image_id"] = i;
    reports.push_back(std::move(fj));
    gflops += f.gflops();
    out << "image " << i << ": " << detail::schedule_line(p.schedule) << " tokens, " << fmt9(f.gflops())
        << " GFLOPs\n";
  }
  detail::write_text(dir / "prediction.bin", labels);
  detail::write_json(dir / "schedule.json",
                     {{"mode", std::string(to_string(rc.mode))}, {"merge_op", std::string(to_string(rc.model.merge_op))},
                      {"images", std::move(schedules)}});
  detail::write_json(dir / "flops.json",
                     {{"mean_total_gflops", gflops / static_cast<double>(images.size())}, {"images", std::move(reports)}});
  out << "wrote prediction.bin, schedule.json and flops.json to " << dir.string() << "\n";
}

inline void cmd_sweep(const Options& o, std::ostream& out) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  const auto w = resolve_weights(rc);
  const auto images = images_of(resolve_data(rc));
  SweepOptions so;
  so.fidelity_floor = rc.fidelity_floor;
  so.seed = detail::forward_seed(o);
  const auto res = fidelity_sweep(rc.model, w, images, rc.taus, so);
  detail::write_text(dir / "sweep.csv", sweep_csv(res));
  out << "baseline " << fmt9(res.baseline_gflops) << " GFLOPs\n";
  for (const auto& r : res.rows)
    out << "tau " << fmt9(r.tau) << ": fidelity_proxy " << fmt9(r.fidelity) << ", " << fmt9(r.gflops) << " GFLOPs\n";
  if (res.best_tau)
    out << "best tau at fidelity_proxy >= " << fmt9(res.fidelity_floor) << ": " << fmt9(*res.best_tau) << "\n";
  else
    out << "no tau keeps fidelity_proxy >= " << fmt9(res.fidelity_floor) << "\n";
  out << "wrote " << (dir / "sweep.csv").string() << "\n";
}

inline void cmd_bench(const Options& o, std::ostream& out, std::ostream& err) {
  const auto rc = detail::load(o);
  const auto dir = detail::out_dir(o);
  const auto w = resolve_weights(rc);
  const auto images = images_of(resolve_data(rc));
  BenchOptions bo;
  bo.batch = rc.batch;
  bo.warmup = rc.warmup;
  bo.seed = detail::forward_seed(o);
  bo.mode = Mode::baseline;
  const auto base = throughput_bench(rc.model, w, images, bo);
  nlohmann::json j;
  j["hardware"] = {{"cpu", detail::cpu_model()},
                   {"hardware_concurrency", std::thread::hardware_concurrency()},
                   {"threads", threads()},
                   {"compiler", __VERSION__}};
  j["baseline"] = detail::bench_json(base);
  const BenchReport* primary = &base;
  BenchReport merged;
  if (rc.mode == Mode::algm) {
    bo.mode = Mode::algm;
    if (rc.model.has_merging()) bo.thresholds = detail::resolve_thresholds(o, rc, w, images, err);
    merged = throughput_bench(rc.model, w, images, bo);
    j["algm"] = detail::bench_json(merged);
    j["speedup"] = merged.images_per_sec / base.images_per_sec;
    primary = &merged;
  }
  detail::write_text(dir / "bench.csv", bench_csv(*primary));
  detail::write_json(dir / "bench.json", j);
  out << "baseline: " << fmt9(base.images_per_sec) << " im/s\n";
  if (rc.mode == Mode::algm)
    out << "algm: " << fmt9(merged.images_per_sec) << " im/s (x" << fmt9(merged.images_per_sec / base.images_per_sec)
        << ")\n";
  out << "wrote " << (dir / "bench.csv").string() << " and bench.json\n";
}

// Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Adaptive local-then-global token merging for a plain ViT encoder"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Run configuration JSON");
  app.add_option("--weights", o.weights, "TMW1 weight file (overrides the config)");
  app.add_option("--out", o.out, "Existing output directory");
  app.add_option("--seed", o.seed, "Seed for random weights and random_pick merging");
  app.add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* init = app.add_subcommand("init", "Write randomly initialized weights");
  auto* calibrate = app.add_subcommand("calibrate", "Compute merge thresholds from similarity statistics");
  auto* analyze = app.add_subcommand("analyze", "Intra- vs inter-class similarity curves");
  auto* run = app.add_subcommand("run", "Forward pass with predictions, schedule and FLOPs");
  auto* sweep = app.add_subcommand("sweep", "Fidelity and cost over a list of thresholds");
  auto* bench = app.add_subcommand("bench", "Throughput of baseline and merged passes");

  for (auto* sc : {run, bench}) {
    sc->add_option("--mode", o.mode, "baseline or algm");
    sc->add_option("--tau-clap", o.tau_clap, "CLAP threshold");
    sc->add_option("--tau-gbm", o.tau_gbm, "GBM threshold for every GBM layer");
    sc->add_option("--merge-op", o.merge_op, "average, random_pick or replicate");
    sc->add_option("--calibration", o.calibration, "Calibration JSON with per-site thresholds");
  }
  sweep->add_option("--taus", o.taus, "Comma-separated thresholds, descending");
  sweep->add_option("--merge-op", o.merge_op, "average, random_pick or replicate");
  analyze->add_option("--windows", o.windows, "Comma-separated window sizes");
  bench->add_option("--batch", o.batch, "Copies per timed batch");
  bench->add_option("--warmup", o.warmup, "Untimed warmup batches");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    set_threads(o.threads);
    if (init->parsed()) cmd_init(o, out);
    else if (calibrate->parsed()) cmd_calibrate(o, out);
    else if (analyze->parsed()) cmd_analyze(o, out, err);
    else if (run->parsed()) cmd_run(o, out, err);
    else if (sweep->parsed()) cmd_sweep(o, out);
    else if (bench->parsed()) cmd_bench(o, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace algm::cli
