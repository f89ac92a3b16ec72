#pragma once

// Automatic threshold calibration: tau = mean + std of cosine similarities
// gathered after MHSA on a no-merge forward pass.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/merge.hpp"
#include "algm/numkernel.hpp"
#include "algm/token_set.hpp"
#include "algm/vit.hpp"
#include "algm/weights.hpp"

namespace algm {

inline constexpr std::size_t kHistogramBins = 64;

// Single-pass mean/variance (Welford, merged with Chan's update) plus a
// 64-bin histogram over [-1, 1]. Variance uses the population convention.
class SimilarityStats {
 public:
  void add(double x) {
    ++count_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (x - mean_);
    ++histogram_[bin(x)];
  }

  void merge(const SimilarityStats& o) {
    if (o.count_ == 0) return;
    if (count_ == 0) {
      *this = o;
      return;
    }
    const auto n = static_cast<double>(count_ + o.count_);
    const double delta = o.mean_ - mean_;
    mean_ += delta * static_cast<double>(o.count_) / n;
    m2_ += o.m2_ + delta * delta * static_cast<double>(count_) * static_cast<double>(o.count_) / n;
    count_ += o.count_;
    for (std::size_t i = 0; i < kHistogramBins; ++i) histogram_[i] += o.histogram_[i];
  }

  std::uint64_t count() const noexcept { return count_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept { return count_ == 0 ? 0.0 : std::max(0.0, m2_ / static_cast<double>(count_)); }
  double stddev() const noexcept { return std::sqrt(variance()); }
  const std::array<std::uint64_t, kHistogramBins>& histogram() const noexcept { return histogram_; }

  // mean + std, clamped to [-1, 1].
  double threshold() const { return std::clamp(mean() + stddev(), -1.0, 1.0); }

  static std::size_t bin(double x) {
    const double t = (std::clamp(x, -1.0, 1.0) + 1.0) / 2.0 * static_cast<double>(kHistogramBins);
    return std::min(kHistogramBins - 1, static_cast<std::size_t>(t));
  }

 private:
  std::uint64_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
  std::array<std::uint64_t, kHistogramBins> histogram_{};
};

// Within-window pairs for every k-window of a full-resolution grid.
inline void add_window_pairs(const Matrix& tokens, std::size_t grid_h, std::size_t grid_w, Window k,
                             SimilarityStats& stats) {
  if (tokens.rows() != grid_h * grid_w) throw ShapeError("add_window_pairs: token count does not match the grid");
  const WindowTiling tiling{grid_h, grid_w, k};
  const auto norms = row_norms(tokens);
  for (std::size_t w = 0; w < tiling.count(); ++w) {
    const auto m = tiling.members(w);
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = i + 1; j < m.size(); ++j)
        stats.add(cosine_from_parts(dot(tokens.row(m[i]), tokens.row(m[j])), norms[m[i]], norms[m[j]]));
  }
}

struct PairSampling {
  // Token sets larger than this are subsampled.
  std::size_t full_pairs_up_to_tokens = 4096;
  std::uint64_t sampled_pairs = std::uint64_t{1} << 22;
  std::uint64_t seed = 0x5EED;
};

// All unordered pairs, or a uniform sample of pairs for very large sets.
// Returns true when the population was subsampled.
inline bool add_all_pairs(const Matrix& tokens, SimilarityStats& stats, const PairSampling& sampling = {}) {
  const std::size_t n = tokens.rows();
  const auto norms = row_norms(tokens);
  if (n <= sampling.full_pairs_up_to_tokens) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        stats.add(cosine_from_parts(dot(tokens.row(i), tokens.row(j)), norms[i], norms[j]));
    return false;
  }
  Rng rng(sampling.seed);
  for (std::uint64_t s = 0; s < sampling.sampled_pairs; ++s) {
    const std::size_t i = rng.index(n);
    std::size_t j = rng.index(n - 1);
    if (j >= i) ++j;
    stats.add(cosine_from_parts(dot(tokens.row(i), tokens.row(j)), norms[i], norms[j]));
  }
  return true;
}

enum class CalibrationScope { per_site, global };

inline CalibrationScope parse_scope(std::string_view s) {
  if (s == "per_site") return CalibrationScope::per_site;
  if (s == "global") return CalibrationScope::global;
  throw ConfigError("unknown calibration scope '" + std::string(s) + "' (expected per_site or global)");
}

struct SiteCalibration {
  MergeSite site = MergeSite::clap;
  std::size_t layer = 0;
  SimilarityStats stats;
  double tau = 1.0;
};

struct CalibrationResult {
  CalibrationScope scope = CalibrationScope::per_site;
  std::vector<SiteCalibration> sites;
  SimilarityStats pooled;
  bool subsampled = false;
  std::size_t images = 0;

  Thresholds thresholds(const EncoderConfig& cfg) const {
    Thresholds t;
    for (const auto& s : sites)
      if (s.site == MergeSite::clap) t.clap = s.tau;
    for (auto l : cfg.gbm_layers) {
      const auto it = std::find_if(sites.begin(), sites.end(),
                                   [&](const SiteCalibration& s) { return s.site == MergeSite::gbm && s.layer == l; });
      if (it == sites.end()) throw ConfigError("calibration has no entry for GBM layer " + std::to_string(l));
      t.gbm.push_back(it->tau);
    }
    if (cfg.use_clap && std::none_of(sites.begin(), sites.end(), [](const SiteCalibration& s) { return s.site == MergeSite::clap; }))
      throw ConfigError("calibration has no CLAP entry");
    return t;
  }
};

// Runs no-merge forward passes over `images` and gathers similarity
// statistics at every merge site: within-window pairs of T'_clap for CLAP,
// all pairs of T'_m for each GBM layer m.
inline CalibrationResult calibrate_threshold(const EncoderConfig& cfg, const WeightBundle& w, std::span<const Image> images,
                                             CalibrationScope scope = CalibrationScope::per_site,
                                             const PairSampling& sampling = {}) {
  if (images.empty()) throw ArgumentError("calibrate_threshold: calibration set is empty");
  CalibrationResult res;
  res.scope = scope;
  res.images = images.size();
  if (cfg.use_clap) res.sites.push_back({MergeSite::clap, cfg.clap_layer, {}, 1.0});
  for (auto l : cfg.gbm_layers) res.sites.push_back({MergeSite::gbm, l, {}, 1.0});
  if (res.sites.empty()) throw ConfigError("calibrate_threshold: config has no merge sites");
  std::size_t deepest = 0;
  for (const auto& s : res.sites) deepest = std::max(deepest, s.layer);

  for (const auto& image : images) {
    ForwardOptions opt;
    opt.mode = Mode::baseline;
    opt.max_layers = deepest;
    opt.observer = [&](std::size_t layer, const TokenSet& ts) {
      for (auto& s : res.sites) {
        if (s.layer != layer) continue;
        if (s.site == MergeSite::clap) {
          add_window_pairs(ts.tokens, ts.grid_h, ts.grid_w, cfg.clap_window, s.stats);
        } else {
          res.subsampled |= add_all_pairs(ts.tokens, s.stats, sampling);
        }
      }
    };
    encoder_forward(image, cfg, w, opt);
  }
  for (const auto& s : res.sites) res.pooled.merge(s.stats);
  for (auto& s : res.sites) s.tau = scope == CalibrationScope::global ? res.pooled.threshold() : s.stats.threshold();
  return res;
}

inline nlohmann::json to_json(const SimilarityStats& s) {
  return {{"count", s.count()}, {"mu", s.mean()}, {"sigma", s.stddev()}, {"histogram", s.histogram()}};
}

inline nlohmann::json to_json(const CalibrationResult& r) {
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& s : r.sites) {
    auto j = to_json(s.stats);
    j["site"] = site_name(s.site);
    j["layer"] = s.layer;
    j["tau"] = s.tau;
    sites.push_back(std::move(j));
  }
  auto pooled = to_json(r.pooled);
  pooled["tau"] = r.pooled.threshold();
  return {{"scope", r.scope == CalibrationScope::global ? "global" : "per_site"},
          {"images", r.images},
          {"subsampled", r.subsampled},
          {"histogram_range", {-1.0, 1.0}},
          {"sites", std::move(sites)},
          {"pooled", std::move(pooled)}};
}

// Reads the per-site taus back from a calibration JSON document.
inline CalibrationResult calibration_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("sites") || !j["sites"].is_array())
    throw ConfigError("calibration: expected an object with a 'sites' array");
  CalibrationResult r;
  r.scope = parse_scope(j.value("scope", std::string("per_site")));
  for (std::size_t i = 0; i < j["sites"].size(); ++i) {
    const auto& s = j["sites"][i];
    const std::string p = "/sites/" + std::to_string(i);
    if (!s.contains("site") || !s.contains("layer") || !s.contains("tau") || !s["tau"].is_number())
      throw ConfigError("calibration" + p + ": needs site, layer and numeric tau");
    const auto name = s["site"].get<std::string>();
    if (name != "clap" && name != "gbm") throw ConfigError("calibration" + p + "/site: unknown site '" + name + "'");
    SiteCalibration sc;
    sc.site = name == "clap" ? MergeSite::clap : MergeSite::gbm;
    sc.layer = s["layer"].get<std::size_t>();
    sc.tau = s["tau"].get<double>();
    r.sites.push_back(std::move(sc));
  }
  return r;
}

inline CalibrationResult load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open calibration file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return calibration_from_json(j);
}

}  // namespace algm
