#pragma once

// Plain pre-norm ViT encoder with merge hooks between MHSA and MLP, and a
// linear per-token class head as decoder.
//
// Layer l (1-based):  T'_l = T_{l-1} + MHSA(LN1(T_{l-1}))
//                     [CLAP / GBM on T'_l when l is a merge site]
//                     T_l  = T'_l + MLP(LN2(T'_l))

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/image.hpp"
#include "algm/merge.hpp"
#include "algm/numkernel.hpp"
#include "algm/token_set.hpp"
#include "algm/weights.hpp"

namespace algm {

enum class Mode { baseline, algm };

inline std::string_view to_string(Mode m) { return m == Mode::baseline ? "baseline" : "algm"; }

inline Mode parse_mode(std::string_view s) {
  if (s == "baseline") return Mode::baseline;
  if (s == "algm") return Mode::algm;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected baseline or algm)");
}

// Resolved similarity thresholds: one for CLAP, one per GBM layer.
struct Thresholds {
  double clap = 1.01;
  std::vector<double> gbm;
};

// Thresholds from the config; AUTO fields must be supplied by calibration.
inline Thresholds thresholds_from_config(const EncoderConfig& cfg) {
  Thresholds t;
  if (cfg.use_clap) {
    if (!cfg.tau_clap) throw ConfigError("/tau_clap: threshold is \"auto\"; supply a calibration file");
    t.clap = *cfg.tau_clap;
  }
  if (!cfg.gbm_layers.empty() && !cfg.tau_gbm) {
    throw ConfigError("/tau_gbm: threshold is \"auto\"; supply a calibration file");
  }
  t.gbm.assign(cfg.gbm_layers.size(), cfg.tau_gbm.value_or(1.01));
  return t;
}

struct SiteCount {
  MergeSite site = MergeSite::clap;
  std::size_t layer = 0;
  std::size_t before = 0;
  std::size_t after = 0;

  bool operator==(const SiteCount&) const = default;
};

// Tokens processed by each layer's MHSA and MLP blocks. A merge at layer l
// shows up as mlp[l-1] < attention[l-1].
struct TokenSchedule {
  std::size_t initial = 0;
  std::vector<std::size_t> attention;
  std::vector<std::size_t> mlp;
  std::vector<SiteCount> sites;

  // Same count through every block of `depth` layers; no merge sites.
  static TokenSchedule uniform(std::size_t tokens, std::size_t depth) {
    return {tokens, std::vector<std::size_t>(depth, tokens), std::vector<std::size_t>(depth, tokens), {}};
  }

  static TokenSchedule from_counts(std::size_t initial, std::span<const std::size_t> per_layer) {
    TokenSchedule s{initial, {}, {}, {}};
    std::size_t prev = initial;
    for (auto c : per_layer) {
      s.attention.push_back(prev);
      s.mlp.push_back(c);
      prev = c;
    }
    return s;
  }

  std::size_t depth() const noexcept { return mlp.size(); }
  std::size_t final_count() const noexcept { return mlp.empty() ? initial : mlp.back(); }

  // Tokens left after CLAP (N'), or the initial count when CLAP did not run.
  std::size_t n_prime() const {
    for (const auto& s : sites)
      if (s.site == MergeSite::clap) return s.after;
    return initial;
  }
  // Tokens left after the last GBM site (N''), or N' when GBM did not run.
  std::size_t n_dprime() const {
    std::size_t v = n_prime();
    for (const auto& s : sites)
      if (s.site == MergeSite::gbm) v = s.after;
    return v;
  }

  bool operator==(const TokenSchedule&) const = default;
};

// Called with T'_l (after MHSA, before any merge) for every layer.
using LayerObserver = std::function<void(std::size_t layer, const TokenSet& post_attention)>;

struct ForwardOptions {
  Mode mode = Mode::algm;
  // Overrides the config's thresholds (e.g. from calibration).
  std::optional<Thresholds> thresholds{};
  // Seeds random_pick merging.
  std::uint64_t seed = 0;
  LayerObserver observer{};
  // Stop after this many layers (0 = all); used by analyses of early layers.
  std::size_t max_layers = 0;
};

struct ForwardResult {
  TokenSet tokens;
  TokenSchedule schedule;
};

// Flattened p x p x 3 patches, (row, col, channel) order within a patch.
inline Matrix extract_patches(const Image& image, std::size_t p) {
  const std::size_t gh = image.height / p;
  const std::size_t gw = image.width / p;
  Matrix out(gh * gw, 3 * p * p);
  for (std::size_t ty = 0; ty < gh; ++ty) {
    for (std::size_t tx = 0; tx < gw; ++tx) {
      auto row = out.row(ty * gw + tx);
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c) row[k++] = image.at(ty * p + y, tx * p + x, c);
    }
  }
  return out;
}

inline TokenSet patchify(const Image& image, const EncoderConfig& cfg, const WeightBundle& w) {
  if (image.height != cfg.image_h || image.width != cfg.image_w || image.pixels.size() != image.height * image.width * 3) {
    throw ShapeError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", config expects " + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
  }
  Matrix tokens = matmul(extract_patches(image, cfg.patch_size), w.get("patch.w"), w.vec("patch.b"));
  add_inplace(tokens, w.get("pos"));
  return TokenSet::full(std::move(tokens), cfg.grid_h(), cfg.grid_w());
}

// T + MHSA(LN1(T)); token count, sizes and record pass through unchanged.
inline TokenSet mhsa_block(const TokenSet& ts, std::size_t layer, const WeightBundle& w, const EncoderConfig& cfg) {
  if (layer < 1 || layer > cfg.depth) throw ArgumentError("mhsa_block: layer " + std::to_string(layer) + " outside [1, depth]");
  const std::size_t n = ts.count();
  const std::size_t d = cfg.dim;
  const std::size_t dh = cfg.head_dim();
  const Matrix x = layer_norm(ts.tokens, w.layer(layer, "ln1.g").values(), w.layer(layer, "ln1.b").values());
  const Matrix qkv = matmul(x, w.layer(layer, "attn.qkv.w"), w.layer(layer, "attn.qkv.b").values());
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  Matrix heads(n, d);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Matrix q = slice(qkv, 0, n, h * dh, dh);
    const Matrix kt = transpose(slice(qkv, 0, n, d + h * dh, dh));
    const Matrix v = slice(qkv, 0, n, 2 * d + h * dh, dh);
    Matrix scores = matmul(q, kt);
    for (auto& s : scores.values()) s *= scale;
    for (std::size_t i = 0; i < n; ++i) softmax_inplace(scores.row(i));
    const Matrix o = matmul(scores, v);
    for (std::size_t i = 0; i < n; ++i) std::copy(o.row(i).begin(), o.row(i).end(), heads.row(i).begin() + static_cast<std::ptrdiff_t>(h * dh));
  }
  TokenSet out = ts;
  add_inplace(out.tokens, matmul(heads, w.layer(layer, "attn.proj.w"), w.layer(layer, "attn.proj.b").values()));
  return out;
}

// Pointwise per token: T + fc2(GELU(fc1(LN2(T)))).
inline Matrix mlp_apply(const Matrix& tokens, std::size_t layer, const WeightBundle& w) {
  const Matrix x = layer_norm(tokens, w.layer(layer, "ln2.g").values(), w.layer(layer, "ln2.b").values());
  Matrix hidden = matmul(x, w.layer(layer, "mlp.fc1.w"), w.layer(layer, "mlp.fc1.b").values());
  for (auto& v : hidden.values()) v = gelu(v);
  Matrix out = tokens;
  add_inplace(out, matmul(hidden, w.layer(layer, "mlp.fc2.w"), w.layer(layer, "mlp.fc2.b").values()));
  return out;
}

inline TokenSet mlp_block(const TokenSet& ts, std::size_t layer, const WeightBundle& w, const EncoderConfig& cfg) {
  if (layer < 1 || layer > cfg.depth) throw ArgumentError("mlp_block: layer " + std::to_string(layer) + " outside [1, depth]");
  TokenSet out = ts;
  out.tokens = mlp_apply(ts.tokens, layer, w);
  return out;
}

namespace detail {

inline MergeOptions site_options(const EncoderConfig& cfg, double tau, std::size_t layer, Rng& rng) {
  MergeOptions o;
  o.tau = tau;
  o.op = cfg.merge_op;
  o.rng = &rng;
  o.size_weighted = cfg.gbm_size_weighted;
  o.layer = layer;
  return o;
}

inline double gbm_threshold(const EncoderConfig& cfg, const Thresholds& t, std::size_t layer) {
  for (std::size_t i = 0; i < cfg.gbm_layers.size(); ++i)
    if (cfg.gbm_layers[i] == layer) {
      if (i >= t.gbm.size()) throw ConfigError("no GBM threshold for layer " + std::to_string(layer));
      return t.gbm[i];
    }
  throw ConfigError("layer " + std::to_string(layer) + " is not a GBM site");
}

}  // namespace detail

inline ForwardResult encoder_forward(const Image& image, const EncoderConfig& cfg, const WeightBundle& w,
                                     const ForwardOptions& opt = {}) {
  const bool merging = opt.mode == Mode::algm && cfg.has_merging();
  const Thresholds taus = !merging ? Thresholds{} : opt.thresholds ? *opt.thresholds : thresholds_from_config(cfg);
  Rng rng(opt.seed);
  ForwardResult r;
  r.tokens = patchify(image, cfg, w);
  r.schedule.initial = r.tokens.count();
  const std::size_t last = opt.max_layers == 0 ? cfg.depth : std::min(opt.max_layers, cfg.depth);
  for (std::size_t l = 1; l <= last; ++l) {
    r.tokens = mhsa_block(r.tokens, l, w, cfg);
    r.schedule.attention.push_back(r.tokens.count());
    if (opt.observer) opt.observer(l, r.tokens);
    if (merging && cfg.use_clap && l == cfg.clap_layer) {
      const auto before = r.tokens.count();
      r.tokens = clap_merge(r.tokens, cfg.clap_window, detail::site_options(cfg, taus.clap, l, rng)).result;
      r.schedule.sites.push_back({MergeSite::clap, l, before, r.tokens.count()});
    }
    if (merging && cfg.is_gbm_layer(l)) {
      const auto before = r.tokens.count();
      r.tokens = gbm_merge(r.tokens, detail::site_options(cfg, detail::gbm_threshold(cfg, taus, l), l, rng)).result;
      r.schedule.sites.push_back({MergeSite::gbm, l, before, r.tokens.count()});
    }
    r.tokens = mlp_block(r.tokens, l, w, cfg);
    r.schedule.mlp.push_back(r.tokens.count());
  }
  return r;
}

// Lockstep forward over a batch with the batch token-count policy: at every
// merge site each image keeps as many tokens as the image that merges least.
inline std::vector<ForwardResult> encoder_forward_batch(std::span<const Image> images, const EncoderConfig& cfg,
                                                        const WeightBundle& w, const ForwardOptions& opt = {}) {
  if (images.empty()) throw ArgumentError("encoder_forward_batch: empty batch");
  const bool merging = opt.mode == Mode::algm && cfg.has_merging();
  const Thresholds taus = !merging ? Thresholds{} : opt.thresholds ? *opt.thresholds : thresholds_from_config(cfg);
  std::vector<ForwardResult> rs(images.size());
  std::vector<Rng> rngs;
  for (std::size_t b = 0; b < images.size(); ++b) {
    rngs.emplace_back(opt.seed + b);
    rs[b].tokens = patchify(images[b], cfg, w);
    rs[b].schedule.initial = rs[b].tokens.count();
  }

  auto run_site = [&](MergeSite site, std::size_t layer, double tau) {
    std::vector<MergeOutcome> outs;
    std::vector<std::size_t> remaining;
    for (std::size_t b = 0; b < rs.size(); ++b) {
      auto o = detail::site_options(cfg, tau, layer, rngs[b]);
      outs.push_back(site == MergeSite::clap ? clap_merge(rs[b].tokens, cfg.clap_window, o)
                                             : gbm_merge(rs[b].tokens, o));
      remaining.push_back(outs.back().result.count());
    }
    const std::size_t keep = batch_merge_count(remaining);
    for (std::size_t b = 0; b < rs.size(); ++b) {
      const std::size_t before = rs[b].tokens.count();
      if (outs[b].result.count() < keep) {
        auto o = detail::site_options(cfg, tau, layer, rngs[b]);
        const std::size_t per_merge = site == MergeSite::clap ? cfg.clap_window.area() - 1 : 1;
        o.max_merges = (before - keep) / per_merge;
        outs[b] = site == MergeSite::clap ? clap_merge(rs[b].tokens, cfg.clap_window, o) : gbm_merge(rs[b].tokens, o);
      }
      rs[b].tokens = std::move(outs[b].result);
      rs[b].schedule.sites.push_back({site, layer, before, rs[b].tokens.count()});
    }
  };

  const std::size_t last = opt.max_layers == 0 ? cfg.depth : std::min(opt.max_layers, cfg.depth);
  for (std::size_t l = 1; l <= last; ++l) {
    for (auto& r : rs) {
      r.tokens = mhsa_block(r.tokens, l, w, cfg);
      r.schedule.attention.push_back(r.tokens.count());
      if (opt.observer) opt.observer(l, r.tokens);
    }
    if (merging && cfg.use_clap && l == cfg.clap_layer) run_site(MergeSite::clap, l, taus.clap);
    if (merging && cfg.is_gbm_layer(l)) run_site(MergeSite::gbm, l, detail::gbm_threshold(cfg, taus, l));
    for (auto& r : rs) {
      r.tokens = mlp_block(r.tokens, l, w, cfg);
      r.schedule.mlp.push_back(r.tokens.count());
    }
  }
  return rs;
}

// Per-pixel class scores, channel-major: data[(c * height + y) * width + x].
struct ClassMap {
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool operator==(const ClassMap&) const = default;
};

namespace detail {

inline ClassMap upsample_tokens(const Matrix& token_scores, const EncoderConfig& cfg) {
  ClassMap m{cfg.num_classes, cfg.image_h, cfg.image_w, std::vector<float>(cfg.num_classes * cfg.image_h * cfg.image_w)};
  const std::size_t p = cfg.patch_size;
  const std::size_t gw = cfg.grid_w();
  for (std::size_t c = 0; c < m.classes; ++c)
    for (std::size_t y = 0; y < m.height; ++y)
      for (std::size_t x = 0; x < m.width; ++x)
        m.data[(c * m.height + y) * m.width + x] = token_scores((y / p) * gw + x / p, c);
  return m;
}

}  // namespace detail

// token_head: class head on the merged tokens, then unmerge.
// spatial_head: unmerge to the full grid first, then the class head.
inline ClassMap decode(const TokenSet& ts, const EncoderConfig& cfg, const WeightBundle& w) {
  if (ts.grid_h != cfg.grid_h() || ts.grid_w != cfg.grid_w()) {
    throw IntegrityError("token grid " + std::to_string(ts.grid_h) + "x" + std::to_string(ts.grid_w) +
                         " does not match config grid " + std::to_string(cfg.grid_h()) + "x" + std::to_string(cfg.grid_w()));
  }
  ts.check();
  const Matrix& head = w.get("head.w");
  const auto bias = w.vec("head.b");
  Matrix scores;
  if (cfg.decoder_kind == DecoderKind::token_head) {
    scores = unmerge(matmul(ts.tokens, head, bias), ts.record);
  } else {
    scores = matmul(unmerge(ts.tokens, ts.record), head, bias);
  }
  return detail::upsample_tokens(scores, cfg);
}

struct Prediction {
  ClassMap scores;
  TokenSchedule schedule;
};

inline Prediction predict(const Image& image, const EncoderConfig& cfg, const WeightBundle& w, const ForwardOptions& opt = {}) {
  auto r = encoder_forward(image, cfg, w, opt);
  return {decode(r.tokens, cfg, w), std::move(r.schedule)};
}

}  // namespace algm
