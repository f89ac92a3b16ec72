#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "algm/errors.hpp"

namespace algm {

enum class MergeOp { average, random_pick, replicate };
enum class DecoderKind { token_head, spatial_head };

inline std::string_view to_string(MergeOp op) {
  switch (op) {
    case MergeOp::average: return "average";
    case MergeOp::random_pick: return "random_pick";
    case MergeOp::replicate: return "replicate";
  }
  return "?";
}

inline std::string_view to_string(DecoderKind k) {
  return k == DecoderKind::token_head ? "token_head" : "spatial_head";
}

inline MergeOp parse_merge_op(std::string_view s) {
  if (s == "average") return MergeOp::average;
  if (s == "random_pick") return MergeOp::random_pick;
  if (s == "replicate") return MergeOp::replicate;
  throw ConfigError("unknown merge_op '" + std::string(s) +
                    "' (expected average, random_pick or replicate)");
}

inline DecoderKind parse_decoder_kind(std::string_view s) {
  if (s == "token_head") return DecoderKind::token_head;
  if (s == "spatial_head") return DecoderKind::spatial_head;
  throw ConfigError("unknown decoder_kind '" + std::string(s) +
                    "' (expected token_head or spatial_head)");
}

// Window extent in tokens; square windows have rows == cols.
struct Window {
  std::size_t rows = 2;
  std::size_t cols = 2;

  std::size_t area() const noexcept { return rows * cols; }
  bool operator==(const Window&) const = default;
};

struct EncoderConfig {
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t patch_size = 16;
  std::size_t depth = 12;
  std::size_t dim = 384;
  std::size_t heads = 6;
  double mlp_ratio = 4.0;
  bool use_clap = true;
  std::size_t clap_layer = 1;
  Window clap_window{};
  std::vector<std::size_t> gbm_layers{};
  // nullopt means AUTO: the value must come from calibration.
  std::optional<double> tau_clap{};
  std::optional<double> tau_gbm{};
  MergeOp merge_op = MergeOp::average;
  // GBM averages weighted by cluster size; false selects the strict
  // unweighted mean of the current tokens.
  bool gbm_size_weighted = true;
  DecoderKind decoder_kind = DecoderKind::token_head;
  std::size_t num_classes = 2;

  std::size_t grid_h() const noexcept { return image_h / patch_size; }
  std::size_t grid_w() const noexcept { return image_w / patch_size; }
  std::size_t num_tokens() const noexcept { return grid_h() * grid_w(); }
  std::size_t head_dim() const noexcept { return dim / heads; }
  std::size_t mlp_hidden() const noexcept {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(dim) + 0.5);
  }
  std::size_t patch_dim() const noexcept { return 3 * patch_size * patch_size; }
  bool has_merging() const noexcept { return use_clap || !gbm_layers.empty(); }

  bool is_gbm_layer(std::size_t layer) const {
    return std::find(gbm_layers.begin(), gbm_layers.end(), layer) != gbm_layers.end();
  }

  // Throws ConfigError naming the offending field (prefixed by json_path).
  void validate(const std::string& json_path = "") const {
    auto fail = [&](const std::string& field, const std::string& msg) {
      throw ConfigError(json_path + "/" + field + ": " + msg);
    };
    if (patch_size == 0) fail("patch_size", "must be positive");
    if (image_h == 0 || image_h % patch_size != 0)
      fail("image_h", "must be a positive multiple of patch_size " + std::to_string(patch_size));
    if (image_w == 0 || image_w % patch_size != 0)
      fail("image_w", "must be a positive multiple of patch_size " + std::to_string(patch_size));
    if (depth == 0) fail("depth", "must be positive");
    if (dim == 0) fail("dim", "must be positive");
    if (heads == 0 || dim % heads != 0)
      fail("heads", "must divide dim " + std::to_string(dim));
    if (!(mlp_ratio > 0.0)) fail("mlp_ratio", "must be positive");
    if (std::abs(mlp_ratio * static_cast<double>(dim) - static_cast<double>(mlp_hidden())) > 1e-9)
      fail("mlp_ratio", "mlp_ratio * dim must be an integer");
    if (num_classes == 0) fail("num_classes", "must be positive");
    if (use_clap) {
      if (clap_layer < 1 || clap_layer > depth)
        fail("clap_layer", "must lie in [1, depth]");
      if (clap_window.rows == 0 || clap_window.cols == 0)
        fail("clap_window", "window extents must be positive");
      if (grid_h() % clap_window.rows != 0 || grid_w() % clap_window.cols != 0)
        fail("clap_window", "token grid " + std::to_string(grid_h()) + "x" +
                                std::to_string(grid_w()) + " is not divisible by the window");
    }
    for (std::size_t i = 0; i < gbm_layers.size(); ++i) {
      if (gbm_layers[i] < 1 || gbm_layers[i] > depth)
        fail("gbm_layers/" + std::to_string(i), "must lie in [1, depth]");
      if (i > 0 && gbm_layers[i] <= gbm_layers[i - 1])
        fail("gbm_layers/" + std::to_string(i), "layers must be strictly increasing");
    }
    if (use_clap && !gbm_layers.empty() && clap_layer >= gbm_layers.front())
      fail("clap_layer", "must be smaller than the first GBM layer");
    auto check_tau = [&](const std::optional<double>& t, const char* name) {
      if (t && !std::isfinite(*t)) fail(name, "threshold must be finite");
    };
    check_tau(tau_clap, "tau_clap");
    check_tau(tau_gbm, "tau_gbm");
  }
};

namespace detail {

inline std::size_t json_count(const nlohmann::json& j, const std::string& path, bool allow_zero = false) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < (allow_zero ? 0 : 1))
    throw ConfigError(path + ": expected " + (allow_zero ? "non-negative" : "positive") + " integer");
  return j.get<std::size_t>();
}

inline double json_number(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path + ": expected number");
  return j.get<double>();
}

inline std::optional<double> json_tau(const nlohmann::json& j, const std::string& path) {
  if (j.is_string()) {
    if (j.get<std::string>() == "auto") return std::nullopt;
    throw ConfigError(path + ": expected number or \"auto\"");
  }
  return json_number(j, path);
}

inline bool json_bool(const nlohmann::json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path + ": expected boolean");
  return j.get<bool>();
}

inline std::string json_string(const nlohmann::json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path + ": expected string");
  return j.get<std::string>();
}

}  // namespace detail

// Parses an EncoderConfig object; unknown keys are rejected. `path` is the
// JSON pointer of `j` inside the enclosing document, used in error messages.
inline EncoderConfig encoder_config_from_json(const nlohmann::json& j, const std::string& path = "") {
  using namespace detail;
  if (!j.is_object()) throw ConfigError(path + ": expected object");
  EncoderConfig c;
  for (const char* key : {"image_h", "image_w", "patch_size", "depth", "dim", "heads", "num_classes"}) {
    if (!j.contains(key)) throw ConfigError(path + "/" + key + ": required field missing");
  }
  for (const auto& [key, v] : j.items()) {
    const std::string p = path + "/" + key;
    if (key == "image_h") c.image_h = json_count(v, p);
    else if (key == "image_w") c.image_w = json_count(v, p);
    else if (key == "patch_size") c.patch_size = json_count(v, p);
    else if (key == "depth") c.depth = json_count(v, p);
    else if (key == "dim") c.dim = json_count(v, p);
    else if (key == "heads") c.heads = json_count(v, p);
    else if (key == "mlp_ratio") c.mlp_ratio = json_number(v, p);
    else if (key == "use_clap") c.use_clap = json_bool(v, p);
    else if (key == "clap_layer") c.clap_layer = json_count(v, p);
    else if (key == "clap_window") {
      if (v.is_array()) {
        if (v.size() != 2) throw ConfigError(p + ": expected k or [k_h, k_w]");
        c.clap_window = {json_count(v[0], p + "/0"), json_count(v[1], p + "/1")};
      } else {
        const auto k = json_count(v, p);
        c.clap_window = {k, k};
      }
    } else if (key == "gbm_layers") {
      if (!v.is_array()) throw ConfigError(p + ": expected array of layer indices");
      c.gbm_layers.clear();
      for (std::size_t i = 0; i < v.size(); ++i) c.gbm_layers.push_back(json_count(v[i], p + "/" + std::to_string(i)));
    } else if (key == "tau_clap") c.tau_clap = json_tau(v, p);
    else if (key == "tau_gbm") c.tau_gbm = json_tau(v, p);
    else if (key == "merge_op") {
      try {
        c.merge_op = parse_merge_op(json_string(v, p));
      } catch (const ConfigError& e) {
        if (v.is_string()) throw ConfigError(p + ": " + e.what());
        throw;
      }
    } else if (key == "gbm_size_weighted") c.gbm_size_weighted = json_bool(v, p);
    else if (key == "decoder_kind") {
      try {
        c.decoder_kind = parse_decoder_kind(json_string(v, p));
      } catch (const ConfigError& e) {
        if (v.is_string()) throw ConfigError(p + ": " + e.what());
        throw;
      }
    } else if (key == "num_classes") c.num_classes = json_count(v, p);
    else throw ConfigError(p + ": unknown key");
  }
  c.validate(path);
  return c;
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  nlohmann::json j;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["patch_size"] = c.patch_size;
  j["depth"] = c.depth;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["use_clap"] = c.use_clap;
  j["clap_layer"] = c.clap_layer;
  if (c.clap_window.rows == c.clap_window.cols) {
    j["clap_window"] = c.clap_window.rows;
  } else {
    j["clap_window"] = {c.clap_window.rows, c.clap_window.cols};
  }
  j["gbm_layers"] = c.gbm_layers;
  j["tau_clap"] = c.tau_clap ? nlohmann::json(*c.tau_clap) : nlohmann::json("auto");
  j["tau_gbm"] = c.tau_gbm ? nlohmann::json(*c.tau_gbm) : nlohmann::json("auto");
  j["merge_op"] = std::string(to_string(c.merge_op));
  j["gbm_size_weighted"] = c.gbm_size_weighted;
  j["decoder_kind"] = std::string(to_string(c.decoder_kind));
  j["num_classes"] = c.num_classes;
  return j;
}

}  // namespace algm
