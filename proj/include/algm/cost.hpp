#pragma once

// Cost accounting. FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP,
// the fvcore convention). Softmax, layer norm and GELU are not counted. The
// similarity computations of the merge modules are a separate line item and
// are not part of total().

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/format.hpp"
#include "algm/image.hpp"
#include "algm/numkernel.hpp"
#include "algm/token_set.hpp"
#include "algm/vit.hpp"
#include "algm/weights.hpp"

namespace algm {

struct FlopsReport {
  std::vector<std::uint64_t> attention;  // per layer
  std::vector<std::uint64_t> mlp;        // per layer
  std::uint64_t patch_embed = 0;
  std::uint64_t decoder = 0;
  std::uint64_t merge_overhead = 0;

  std::uint64_t layer_total(std::size_t i) const { return attention[i] + mlp[i]; }

  std::uint64_t encoder_total() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < attention.size(); ++i) t += layer_total(i);
    return t;
  }

  std::uint64_t total() const { return patch_embed + encoder_total() + decoder; }
  std::uint64_t total_with_overhead() const { return total() + merge_overhead; }
  double gflops() const { return static_cast<double>(total()) / 1e9; }
};

// MACs of one MHSA block over n tokens: qkv + proj (4nd^2) and the two
// attention products (2n^2 d).
inline std::uint64_t attention_macs(std::uint64_t n, std::uint64_t d) { return 4 * n * d * d + 2 * n * n * d; }

inline std::uint64_t mlp_macs(std::uint64_t n, std::uint64_t d, std::uint64_t hidden) { return 2 * n * d * hidden; }

inline FlopsReport flops_encoder(const EncoderConfig& cfg, const TokenSchedule& schedule) {
  if (schedule.depth() != cfg.depth || schedule.attention.size() != cfg.depth) {
    throw ShapeError("flops_encoder: schedule has " + std::to_string(schedule.depth()) + " layers, config has " +
                     std::to_string(cfg.depth));
  }
  const std::uint64_t d = cfg.dim;
  const std::uint64_t n = schedule.initial;
  FlopsReport r;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    r.attention.push_back(attention_macs(schedule.attention[l], d));
    r.mlp.push_back(mlp_macs(schedule.mlp[l], d, cfg.mlp_hidden()));
  }
  r.patch_embed = n * d * cfg.patch_dim();
  r.decoder = n * d * cfg.num_classes;
  for (const auto& s : schedule.sites) {
    const std::uint64_t before = s.before;
    if (s.site == MergeSite::clap) {
      const std::uint64_t area = cfg.clap_window.area();
      r.merge_overhead += (before / area) * (area * (area - 1) / 2) * d;
    } else {
      r.merge_overhead += ((before + 1) / 2) * (before / 2) * d;
    }
  }
  return r;
}

inline nlohmann::json to_json(const FlopsReport& r) {
  return {{"convention", "1 multiply-accumulate = 1 FLOP"},
          {"excluded", "softmax, layer norm, GELU"},
          {"per_layer_attention", r.attention},
          {"per_layer_mlp", r.mlp},
          {"patch_embed", r.patch_embed},
          {"decoder", r.decoder},
          {"merge_overhead", r.merge_overhead},
          {"total", r.total()},
          {"total_gflops", r.gflops()},
          {"total_with_overhead", r.total_with_overhead()}};
}

struct BenchOptions {
  std::size_t batch = 32;
  std::size_t warmup = 50;
  Mode mode = Mode::algm;
  std::optional<Thresholds> thresholds{};
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t image_id = 0;
  double images_per_sec = 0.0;
  std::size_t n_prime = 0;
  std::size_t n_dprime = 0;
  TokenSchedule schedule;
};

struct BenchReport {
  double images_per_sec = 0.0;
  std::size_t batch = 0;
  std::size_t warmup_iters = 0;
  double wall_seconds = 0.0;
  unsigned threads = 1;
  std::vector<BenchRow> per_image;
};

namespace detail {

// One batch of duplicates; with several threads the copies are split across
// workers. Returns the schedule of the first copy (all copies match).
inline TokenSchedule run_duplicate_batch(const Image& image, const EncoderConfig& cfg, const WeightBundle& w,
                                         const ForwardOptions& opt, std::size_t batch) {
  const unsigned n_threads = std::min<std::size_t>(threads(), batch);
  TokenSchedule first;
  if (n_threads <= 1) {
    for (std::size_t b = 0; b < batch; ++b) {
      auto r = encoder_forward(image, cfg, w, opt);
      if (b == 0) first = std::move(r.schedule);
    }
    return first;
  }
  std::vector<TokenSchedule> schedules(n_threads);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      WorkerScope scope;
      for (std::size_t b = t; b < batch; b += n_threads) {
        auto r = encoder_forward(image, cfg, w, opt);
        if (b == t) schedules[t] = std::move(r.schedule);
      }
    });
  }
  for (auto& th : pool) th.join();
  return schedules.front();
}

}  // namespace detail

// Batches of `batch` duplicates of each image (so merged counts agree within
// a batch), timed after `warmup` untimed batches; im/sec is averaged over
// images.
inline BenchReport throughput_bench(const EncoderConfig& cfg, const WeightBundle& w, std::span<const Image> images,
                                    const BenchOptions& bo = {}) {
  if (images.empty()) throw ArgumentError("throughput_bench: no images");
  if (bo.batch == 0) throw ArgumentError("throughput_bench: batch must be positive");
  ForwardOptions opt;
  opt.mode = bo.mode;
  opt.thresholds = bo.thresholds;
  opt.seed = bo.seed;
  BenchReport rep;
  rep.batch = bo.batch;
  rep.warmup_iters = bo.warmup;
  rep.threads = threads();
  for (std::size_t i = 0; i < bo.warmup; ++i) detail::run_duplicate_batch(images[i % images.size()], cfg, w, opt, bo.batch);
  using clock = std::chrono::steady_clock;
  double sum_rate = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto t0 = clock::now();
    auto schedule = detail::run_duplicate_batch(images[i], cfg, w, opt, bo.batch);
    const double secs = std::max(std::chrono::duration<double>(clock::now() - t0).count(), 1e-9);
    rep.wall_seconds += secs;
    BenchRow row;
    row.image_id = i;
    row.images_per_sec = static_cast<double>(bo.batch) / secs;
    row.n_prime = schedule.n_prime();
    row.n_dprime = schedule.n_dprime();
    row.schedule = std::move(schedule);
    sum_rate += row.images_per_sec;
    rep.per_image.push_back(std::move(row));
  }
  rep.images_per_sec = sum_rate / static_cast<double>(images.size());
  return rep;
}

struct SweepRow {
  double tau = 0.0;
  double fidelity = 0.0;
  double mse = 0.0;
  double gflops = 0.0;
  double tokens_final = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double baseline_gflops = 0.0;
  // Smallest tau whose fidelity stays at or above the floor.
  std::optional<double> best_tau;
  double fidelity_floor = 0.0;
};

struct SweepOptions {
  double fidelity_floor = 0.99;
  std::uint64_t seed = 0;
};

struct Fidelity {
  double cosine = 1.0;
  double mse = 0.0;
};

// Mean per-row cosine and mean squared element difference.
inline Fidelity compare_tokens(const Matrix& reduced_unmerged, const Matrix& reference) {
  if (reduced_unmerged.rows() != reference.rows() || reduced_unmerged.cols() != reference.cols())
    throw ShapeError("compare_tokens: " + reduced_unmerged.shape() + " vs " + reference.shape());
  Fidelity f{0.0, 0.0};
  for (std::size_t i = 0; i < reference.rows(); ++i) {
    f.cosine += cosine_sim(reduced_unmerged.row(i), reference.row(i));
    for (std::size_t j = 0; j < reference.cols(); ++j) {
      const double diff = static_cast<double>(reduced_unmerged(i, j)) - reference(i, j);
      f.mse += diff * diff;
    }
  }
  f.cosine /= static_cast<double>(reference.rows());
  f.mse /= static_cast<double>(reference.size());
  return f;
}

// For every tau (applied at all merge sites) compares the unmerged final
// tokens of an ALGM pass against the no-merge pass.
inline SweepResult fidelity_sweep(const EncoderConfig& cfg, const WeightBundle& w, std::span<const Image> images,
                                  std::span<const double> taus, const SweepOptions& so = {}) {
  if (images.empty()) throw ArgumentError("fidelity_sweep: no images");
  if (taus.empty()) throw ArgumentError("fidelity_sweep: no thresholds");
  for (std::size_t i = 1; i < taus.size(); ++i)
    if (taus[i] > taus[i - 1]) throw ArgumentError("fidelity_sweep: thresholds must be sorted in descending order");

  SweepResult res;
  res.fidelity_floor = so.fidelity_floor;
  std::vector<Matrix> reference;
  for (const auto& img : images) {
    ForwardOptions base;
    base.mode = Mode::baseline;
    auto r = encoder_forward(img, cfg, w, base);
    res.baseline_gflops += flops_encoder(cfg, r.schedule).gflops();
    reference.push_back(std::move(r.tokens.tokens));
  }
  const auto n_img = static_cast<double>(images.size());
  res.baseline_gflops /= n_img;

  for (double tau : taus) {
    SweepRow row{tau, 0.0, 0.0, 0.0, 0.0};
    ForwardOptions opt;
    opt.mode = Mode::algm;
    opt.seed = so.seed;
    opt.thresholds = Thresholds{tau, std::vector<double>(cfg.gbm_layers.size(), tau)};
    for (std::size_t i = 0; i < images.size(); ++i) {
      auto r = encoder_forward(images[i], cfg, w, opt);
      const auto f = compare_tokens(unmerge(r.tokens), reference[i]);
      row.fidelity += f.cosine;
      row.mse += f.mse;
      row.gflops += flops_encoder(cfg, r.schedule).gflops();
      row.tokens_final += static_cast<double>(r.tokens.count());
    }
    row.fidelity /= n_img;
    row.mse /= n_img;
    row.gflops /= n_img;
    row.tokens_final /= n_img;
    if (row.fidelity >= so.fidelity_floor && (!res.best_tau || tau < *res.best_tau)) res.best_tau = tau;
    res.rows.push_back(row);
  }
  return res;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::string s = "tau,fidelity,mse,gflops,tokens_final\n";
  for (const auto& row : r.rows) {
    s += fmt9(row.tau) + "," + fmt9(row.fidelity) + "," + fmt9(row.mse) + "," +
         fmt9(row.gflops) + "," + fmt9(row.tokens_final) + "\n";
  }
  return s;
}

inline std::string bench_csv(const BenchReport& r) {
  std::string s = "image_id,im_per_sec,n_prime,n_dprime\n";
  for (const auto& row : r.per_image) {
    s += std::to_string(row.image_id) + "," + fmt9(row.images_per_sec) + "," + std::to_string(row.n_prime) +
         "," + std::to_string(row.n_dprime) + "\n";
  }
  return s;
}

}  // namespace algm
