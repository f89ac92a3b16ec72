#pragma once

// Intra-class vs inter-class token similarity, locally within k x k windows
// of the first layer and globally per layer, plus a seeded labeled-image
// generator so the analysis runs without external datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/format.hpp"
#include "algm/image.hpp"
#include "algm/merge.hpp"
#include "algm/numkernel.hpp"
#include "algm/vit.hpp"
#include "algm/weights.hpp"

namespace algm {

struct LabeledImage {
  Image image;
  // height x width class ids, row-major.
  std::vector<std::uint32_t> labels;

  bool operator==(const LabeledImage&) const = default;
};

// Modal pixel label of every p x p patch; ties go to the lowest class id.
inline std::vector<std::uint32_t> token_label(std::span<const std::uint32_t> labels, std::size_t height, std::size_t width,
                                              std::size_t p) {
  if (p == 0 || height % p != 0 || width % p != 0 || labels.size() != height * width) {
    throw ShapeError("token_label: " + std::to_string(height) + "x" + std::to_string(width) +
                     " label map is not divisible into " + std::to_string(p) + "-pixel patches");
  }
  const std::size_t gh = height / p;
  const std::size_t gw = width / p;
  std::vector<std::uint32_t> out(gh * gw);
  std::vector<std::uint32_t> patch;
  for (std::size_t ty = 0; ty < gh; ++ty) {
    for (std::size_t tx = 0; tx < gw; ++tx) {
      patch.clear();
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) patch.push_back(labels[(ty * p + y) * width + tx * p + x]);
      std::sort(patch.begin(), patch.end());
      std::uint32_t best = patch.front();
      std::size_t best_run = 0;
      for (std::size_t i = 0; i < patch.size();) {
        std::size_t j = i;
        while (j < patch.size() && patch[j] == patch[i]) ++j;
        if (j - i > best_run) {
          best_run = j - i;
          best = patch[i];
        }
        i = j;
      }
      out[ty * gw + tx] = best;
    }
  }
  return out;
}

struct SimCurve {
  // Window sizes (local) or layer indices (global).
  std::vector<std::size_t> x;
  std::vector<std::optional<double>> intra_mean;
  std::vector<std::optional<double>> inter_mean;
  std::vector<std::uint64_t> intra_count;
  std::vector<std::uint64_t> inter_count;
  std::vector<std::string> warnings;

  std::optional<double> gap(std::size_t i) const {
    if (!intra_mean[i] || !inter_mean[i]) return std::nullopt;
    return *intra_mean[i] - *inter_mean[i];
  }

  bool operator==(const SimCurve&) const = default;
};

namespace detail {

struct PairAccumulator {
  double intra_sum = 0.0;
  double inter_sum = 0.0;
  std::uint64_t intra = 0;
  std::uint64_t inter = 0;

  void add(double sim, bool same) {
    if (same) {
      intra_sum += sim;
      ++intra;
    } else {
      inter_sum += sim;
      ++inter;
    }
  }

  void append_to(SimCurve& c, std::size_t x) const {
    c.x.push_back(x);
    c.intra_mean.push_back(intra ? std::optional<double>(intra_sum / static_cast<double>(intra)) : std::nullopt);
    c.inter_mean.push_back(inter ? std::optional<double>(inter_sum / static_cast<double>(inter)) : std::nullopt);
    c.intra_count.push_back(intra);
    c.inter_count.push_back(inter);
  }
};

inline void add_pair(PairAccumulator& acc, const Matrix& t, std::span<const double> norms,
                     std::span<const std::uint32_t> cls, std::size_t i, std::size_t j) {
  acc.add(cosine_from_parts(dot(t.row(i), t.row(j)), norms[i], norms[j]), cls[i] == cls[j]);
}

}  // namespace detail

// For each k, every unordered token pair inside each k x k window of T'_1 is
// classified intra/inter by token label. Windows tile the grid from the
// top-left; partial windows at the border are ignored.
inline SimCurve local_similarity_stats(const EncoderConfig& cfg, const WeightBundle& w, std::span<const LabeledImage> data,
                                       std::span<const std::size_t> window_sizes) {
  if (data.empty()) throw ArgumentError("local_similarity_stats: no data");
  std::vector<detail::PairAccumulator> acc(window_sizes.size());
  for (const auto& item : data) {
    const auto cls = token_label(item.labels, item.image.height, item.image.width, cfg.patch_size);
    ForwardOptions opt;
    opt.mode = Mode::baseline;
    opt.max_layers = 1;
    opt.observer = [&](std::size_t, const TokenSet& ts) {
      const auto norms = row_norms(ts.tokens);
      for (std::size_t wi = 0; wi < window_sizes.size(); ++wi) {
        const std::size_t k = window_sizes[wi];
        if (k == 0 || k > ts.grid_h || k > ts.grid_w) continue;
        const WindowTiling tiling{ts.grid_h, ts.grid_w, {k, k}};
        for (std::size_t win = 0; win < tiling.count(); ++win) {
          const auto m = tiling.members(win);
          for (std::size_t a = 0; a < m.size(); ++a)
            for (std::size_t b = a + 1; b < m.size(); ++b) detail::add_pair(acc[wi], ts.tokens, norms, cls, m[a], m[b]);
        }
      }
    };
    encoder_forward(item.image, cfg, w, opt);
  }
  SimCurve curve;
  for (std::size_t wi = 0; wi < window_sizes.size(); ++wi) {
    const std::size_t k = window_sizes[wi];
    if (k == 0 || k > cfg.grid_h() || k > cfg.grid_w()) {
      curve.warnings.push_back("window " + std::to_string(k) + " skipped: larger than the " + std::to_string(cfg.grid_h()) +
                               "x" + std::to_string(cfg.grid_w()) + " token grid");
      continue;
    }
    if (cfg.grid_h() % k != 0 || cfg.grid_w() % k != 0) {
      curve.warnings.push_back("window " + std::to_string(k) + " does not tile the grid; border tokens ignored");
    }
    acc[wi].append_to(curve, k);
  }
  return curve;
}

// All token pairs of T'_l per image, one point per layer 1..L.
inline SimCurve global_similarity_stats(const EncoderConfig& cfg, const WeightBundle& w, std::span<const LabeledImage> data) {
  if (data.empty()) throw ArgumentError("global_similarity_stats: no data");
  std::vector<detail::PairAccumulator> acc(cfg.depth);
  for (const auto& item : data) {
    const auto cls = token_label(item.labels, item.image.height, item.image.width, cfg.patch_size);
    ForwardOptions opt;
    opt.mode = Mode::baseline;
    opt.observer = [&](std::size_t layer, const TokenSet& ts) {
      const auto norms = row_norms(ts.tokens);
      for (std::size_t i = 0; i < ts.count(); ++i)
        for (std::size_t j = i + 1; j < ts.count(); ++j) detail::add_pair(acc[layer - 1], ts.tokens, norms, cls, i, j);
    };
    encoder_forward(item.image, cfg, w, opt);
  }
  SimCurve curve;
  for (std::size_t l = 0; l < cfg.depth; ++l) acc[l].append_to(curve, l + 1);
  return curve;
}

enum class SynthStructure { blocky, striped };

inline SynthStructure parse_structure(std::string_view s) {
  if (s == "blocky") return SynthStructure::blocky;
  if (s == "striped") return SynthStructure::striped;
  throw ConfigError("unknown synthetic structure '" + std::string(s) + "' (expected blocky or striped)");
}

struct SynthParams {
  std::uint64_t seed = 0;
  std::size_t n_images = 4;
  std::size_t classes = 2;
  SynthStructure structure = SynthStructure::blocky;
  // Std of per-pixel Gaussian noise around the class color.
  double noise = 0.1;
  std::size_t height = 128;
  std::size_t width = 128;
  // Region size in pixels (block side, or mean stripe width).
  std::size_t block = 24;
  // Amplitude of a smooth per-class color field, so distant pixels of one
  // class look less alike than nearby ones.
  double shading = 0.25;
  // Region boundaries fall on multiples of this many pixels (1 = anywhere).
  std::size_t align = 1;
};

namespace detail {

// Class colors 0.5 + 0.4 * u for unit directions u; the best of 64 random
// draws by largest pairwise cosine keeps classes distinguishable.
inline std::vector<std::array<double, 3>> class_colors(Rng& rng, std::size_t classes) {
  std::vector<std::array<double, 3>> best;
  double best_score = 2.0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<std::array<double, 3>> dirs(classes);
    for (auto& u : dirs) {
      double n = 0.0;
      while (n < 1e-6) {
        for (auto& v : u) v = rng.normal();
        n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      }
      for (auto& v : u) v /= n;
    }
    double worst = -1.0;
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t j = i + 1; j < classes; ++j)
        worst = std::max(worst, dirs[i][0] * dirs[j][0] + dirs[i][1] * dirs[j][1] + dirs[i][2] * dirs[j][2]);
    if (worst < best_score) {
      best_score = worst;
      best = std::move(dirs);
    }
  }
  for (auto& u : best)
    for (auto& v : u) v = 0.5 + 0.4 * v;
  return best;
}

}  // namespace detail

// Class colors are shared by the whole dataset; layout, shading and noise
// are drawn per image.
inline std::vector<LabeledImage> synth_dataset(const SynthParams& p) {
  if (!(p.noise >= 0.0)) throw ArgumentError("synth_dataset: noise must be non-negative");
  if (p.classes == 0 || p.block == 0 || p.height == 0 || p.width == 0)
    throw ArgumentError("synth_dataset: classes, block and image size must be positive");
  Rng rng(p.seed);
  const auto colors = detail::class_colors(rng, p.classes);

  std::vector<LabeledImage> out;
  out.reserve(p.n_images);
  for (std::size_t n = 0; n < p.n_images; ++n) {
    LabeledImage li{Image(p.height, p.width), std::vector<std::uint32_t>(p.height * p.width)};
    if (p.structure == SynthStructure::blocky) {
      const std::size_t align = std::max<std::size_t>(1, p.align);
      const std::size_t oy = rng.index(p.block) / align * align;
      const std::size_t ox = rng.index(p.block) / align * align;
      const std::size_t by = (p.height + oy) / p.block + 1;
      const std::size_t bx = (p.width + ox) / p.block + 1;
      std::vector<std::uint32_t> block_class(by * bx);
      for (auto& c : block_class) c = static_cast<std::uint32_t>(rng.index(p.classes));
      for (std::size_t y = 0; y < p.height; ++y)
        for (std::size_t x = 0; x < p.width; ++x)
          li.labels[y * p.width + x] = block_class[((y + oy) / p.block) * bx + (x + ox) / p.block];
    } else {
      std::size_t x = 0;
      while (x < p.width) {
        const auto cls = static_cast<std::uint32_t>(rng.index(p.classes));
        const std::size_t align = std::max<std::size_t>(1, p.align);
        const std::size_t width = std::max(align, (p.block / 2 + rng.index(p.block) + 1) / align * align);
        for (std::size_t xx = x; xx < std::min(p.width, x + width); ++xx)
          for (std::size_t y = 0; y < p.height; ++y) li.labels[y * p.width + xx] = cls;
        x += width;
      }
    }
    // Two low-frequency plane waves per class and channel; classes vary
    // independently of each other.
    std::vector<std::array<std::array<double, 6>, 3>> waves(p.classes);
    for (auto& cls_waves : waves) {
      for (auto& ch : cls_waves) {
        for (std::size_t k = 0; k < 2; ++k) {
          const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
          const double freq =
              rng.uniform(0.5, 1.5) * 2.0 * std::numbers::pi / static_cast<double>(std::max(p.height, p.width));
          ch[3 * k] = freq * std::cos(angle);
          ch[3 * k + 1] = freq * std::sin(angle);
          ch[3 * k + 2] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        }
      }
    }
    for (std::size_t y = 0; y < p.height; ++y) {
      for (std::size_t x = 0; x < p.width; ++x) {
        const auto cls = li.labels[y * p.width + x];
        for (std::size_t c = 0; c < 3; ++c) {
          const auto& wv = waves[cls][c];
          const auto fx = static_cast<double>(x);
          const auto fy = static_cast<double>(y);
          const double field =
              0.5 * p.shading * (std::sin(wv[0] * fx + wv[1] * fy + wv[2]) + std::sin(wv[3] * fx + wv[4] * fy + wv[5]));
          const double noise = p.noise > 0.0 ? p.noise * rng.normal() : 0.0;
          li.image.at(y, x, c) = static_cast<float>(colors[cls][c] + field + noise);
        }
      }
    }
    out.push_back(std::move(li));
  }
  return out;
}

// A bundle whose layers cluster tokens by appearance: the patch projection
// embeds each patch's mean color (centered at 0.5) through a random 3 x d map,
// positional encoding is zero, every attention head compares layer-normed
// tokens directly (Q = K = scaled identity, V = proj = identity) and the
// MLPs are zero. Each layer pulls same-class tokens closer together.
inline WeightBundle class_aligned_weights(const EncoderConfig& cfg, std::uint64_t seed, double sharpness = 24.0) {
  cfg.validate();
  WeightBundle w = WeightBundle::zeros(cfg);
  Rng rng(seed);
  const std::size_t d = cfg.dim;
  const std::size_t p2 = cfg.patch_size * cfg.patch_size;
  std::vector<std::array<double, 3>> proj(d);
  for (auto& col : proj)
    for (auto& v : col) v = rng.normal();
  auto& pw = w.get("patch.w");
  auto& pb = w.get("patch.b");
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t px = 0; px < p2; ++px)
      for (std::size_t c = 0; c < 3; ++c) pw(px * 3 + c, j) = static_cast<float>(proj[j][c] / static_cast<double>(p2));
    pb(0, j) = static_cast<float>(-0.5 * (proj[j][0] + proj[j][1] + proj[j][2]));
  }
  const double dh = static_cast<double>(cfg.head_dim());
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    for (const char* g : {"ln1.g", "ln2.g"}) {
      auto& m = w.get(layer_tensor(l, g));
      std::fill(m.values().begin(), m.values().end(), 1.0F);
    }
    // A layer-normed head slice has squared norm ~dh, so beta^2 = s / sqrt(dh)
    // makes the attention logits ~ s * cos.
    const double s = sharpness;
    const auto beta = static_cast<float>(std::sqrt(s / std::sqrt(dh)));
    auto& qkv = w.get(layer_tensor(l, "attn.qkv.w"));
    auto& pr = w.get(layer_tensor(l, "attn.proj.w"));
    for (std::size_t i = 0; i < d; ++i) {
      qkv(i, i) = beta;
      qkv(i, d + i) = beta;
      qkv(i, 2 * d + i) = 1.0F;
      pr(i, i) = 1.0F;
    }
  }
  auto& head = w.get("head.w");
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : head.values()) v = static_cast<float>(rng.uniform(-s, s));
  return w;
}

// CSV: window_size_or_layer,intra_mean,inter_mean,intra_count,inter_count.
// Absent means are written as empty fields.
inline std::string to_csv(const SimCurve& c) {
  std::string s = "window_size_or_layer,intra_mean,inter_mean,intra_count,inter_count\n";
  for (std::size_t i = 0; i < c.x.size(); ++i) {
    s += std::to_string(c.x[i]) + ",";
    s += (c.intra_mean[i] ? fmt9(*c.intra_mean[i]) : std::string()) + ",";
    s += (c.inter_mean[i] ? fmt9(*c.inter_mean[i]) : std::string()) + ",";
    s += std::to_string(c.intra_count[i]) + "," + std::to_string(c.inter_count[i]) + "\n";
  }
  return s;
}

}  // namespace algm
