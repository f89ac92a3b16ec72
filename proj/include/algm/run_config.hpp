#pragma once

// Run configuration document for the command-line tool:
//
//   {
//     "model":     { EncoderConfig },
//     "weights":   "file.tmw1" | {"random": true, "seed": 0},
//     "data":      {"synthetic": { SynthParams }} | {"ppm_dir": "dir"},
//     "calibrate": {"scope": "per_site" | "global"},
//     "analyze":   {"window_sizes": [2, 4, 8]},
//     "run":       {"mode": "algm" | "baseline", "calibration": "file.json"},
//     "sweep":     {"taus": [...], "fidelity_floor": 0.99},
//     "bench":     {"batch": 32, "warmup": 50}
//   }
//
// Everything except "model" is optional. The whole document is validated on
// load; the first problem is reported with its JSON path.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "algm/analysis.hpp"
#include "algm/calibrate.hpp"
#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/image.hpp"
#include "algm/vit.hpp"
#include "algm/weights.hpp"

namespace algm {

struct WeightSource {
  // Empty path means random initialization.
  std::filesystem::path path;
  std::uint64_t seed = 0;
};

struct DataSource {
  std::optional<SynthParams> synthetic = SynthParams{};
  std::filesystem::path ppm_dir;
};

struct RunConfig {
  EncoderConfig model;
  WeightSource weights;
  DataSource data;
  CalibrationScope scope = CalibrationScope::per_site;
  std::vector<std::size_t> window_sizes{1, 2, 4, 8};
  Mode mode = Mode::algm;
  std::filesystem::path calibration;
  std::vector<double> taus{1.01, 0.95, 0.9, 0.8, 0.6, 0.0, -1.0};
  double fidelity_floor = 0.99;
  std::size_t batch = 32;
  std::size_t warmup = 50;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path + ": expected object");
  for (const auto& [key, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(path + "/" + key + ": unknown key");
  }
}

inline std::uint64_t json_u64(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
    throw ConfigError(path + ": expected non-negative integer");
  return j.get<std::uint64_t>();
}

inline SynthParams synth_from_json(const nlohmann::json& j, const std::string& path, const EncoderConfig& model) {
  reject_unknown(j, path, {"seed", "n_images", "classes", "structure", "noise", "block", "shading", "align"});
  SynthParams p;
  p.height = model.image_h;
  p.width = model.image_w;
  p.align = model.patch_size;
  for (const auto& [key, v] : j.items()) {
    const std::string q = path + "/" + key;
    if (key == "seed") p.seed = json_u64(v, q);
    else if (key == "n_images") p.n_images = json_count(v, q);
    else if (key == "classes") p.classes = json_count(v, q);
    else if (key == "structure") {
      const auto s = json_string(v, q);
      try {
        p.structure = parse_structure(s);
      } catch (const ConfigError& e) {
        throw ConfigError(q + ": " + e.what());
      }
    } else if (key == "noise") {
      p.noise = json_number(v, q);
      if (!(p.noise >= 0.0)) throw ConfigError(q + ": must be non-negative");
    } else if (key == "block") p.block = json_count(v, q);
    else if (key == "shading") p.shading = json_number(v, q);
    else if (key == "align") p.align = json_count(v, q);
  }
  return p;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using namespace detail;
  reject_unknown(j, "", {"model", "weights", "data", "calibrate", "analyze", "run", "sweep", "bench"});
  if (!j.contains("model")) throw ConfigError("/model: required field missing");
  RunConfig rc;
  rc.model = encoder_config_from_json(j["model"], "/model");
  rc.data.synthetic = synth_from_json(nlohmann::json::object(), "/data/synthetic", rc.model);

  if (j.contains("weights")) {
    const auto& w = j["weights"];
    if (w.is_string()) {
      rc.weights.path = w.get<std::string>();
      if (rc.weights.path.empty()) throw ConfigError("/weights: empty path");
    } else {
      reject_unknown(w, "/weights", {"random", "seed"});
      if (!w.contains("random") || !json_bool(w["random"], "/weights/random"))
        throw ConfigError("/weights/random: must be true when no path is given");
      if (w.contains("seed")) rc.weights.seed = json_u64(w["seed"], "/weights/seed");
    }
  }

  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "/data", {"synthetic", "ppm_dir"});
    if (d.contains("synthetic") == d.contains("ppm_dir"))
      throw ConfigError("/data: give exactly one of 'synthetic' or 'ppm_dir'");
    if (d.contains("synthetic")) {
      rc.data.synthetic = synth_from_json(d["synthetic"], "/data/synthetic", rc.model);
    } else {
      rc.data.synthetic.reset();
      rc.data.ppm_dir = json_string(d["ppm_dir"], "/data/ppm_dir");
    }
  }

  if (j.contains("calibrate")) {
    const auto& c = j["calibrate"];
    reject_unknown(c, "/calibrate", {"scope"});
    if (c.contains("scope")) {
      try {
        rc.scope = parse_scope(json_string(c["scope"], "/calibrate/scope"));
      } catch (const ConfigError& e) {
        if (!c["scope"].is_string()) throw;
        throw ConfigError(std::string("/calibrate/scope: ") + e.what());
      }
    }
  }

  if (j.contains("analyze")) {
    const auto& a = j["analyze"];
    reject_unknown(a, "/analyze", {"window_sizes"});
    if (a.contains("window_sizes")) {
      const auto& ws = a["window_sizes"];
      if (!ws.is_array() || ws.empty()) throw ConfigError("/analyze/window_sizes: expected non-empty array");
      rc.window_sizes.clear();
      for (std::size_t i = 0; i < ws.size(); ++i)
        rc.window_sizes.push_back(json_count(ws[i], "/analyze/window_sizes/" + std::to_string(i)));
    }
  }

  if (j.contains("run")) {
    const auto& r = j["run"];
    reject_unknown(r, "/run", {"mode", "calibration"});
    if (r.contains("mode")) {
      try {
        rc.mode = parse_mode(json_string(r["mode"], "/run/mode"));
      } catch (const ConfigError& e) {
        if (!r["mode"].is_string()) throw;
        throw ConfigError(std::string("/run/mode: ") + e.what());
      }
    }
    if (r.contains("calibration")) rc.calibration = json_string(r["calibration"], "/run/calibration");
  }

  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    reject_unknown(s, "/sweep", {"taus", "fidelity_floor"});
    if (s.contains("taus")) {
      const auto& t = s["taus"];
      if (!t.is_array() || t.empty()) throw ConfigError("/sweep/taus: expected non-empty array");
      rc.taus.clear();
      for (std::size_t i = 0; i < t.size(); ++i) rc.taus.push_back(json_number(t[i], "/sweep/taus/" + std::to_string(i)));
      for (std::size_t i = 1; i < rc.taus.size(); ++i)
        if (rc.taus[i] > rc.taus[i - 1]) throw ConfigError("/sweep/taus/" + std::to_string(i) + ": taus must be descending");
    }
    if (s.contains("fidelity_floor")) rc.fidelity_floor = json_number(s["fidelity_floor"], "/sweep/fidelity_floor");
  }

  if (j.contains("bench")) {
    const auto& b = j["bench"];
    reject_unknown(b, "/bench", {"batch", "warmup"});
    if (b.contains("batch")) rc.batch = json_count(b["batch"], "/bench/batch");
    if (b.contains("warmup")) rc.warmup = json_count(b["warmup"], "/bench/warmup", true);
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline WeightBundle resolve_weights(const RunConfig& rc) {
  if (rc.weights.path.empty()) return init_random(rc.model, rc.weights.seed);
  return load_weights(rc.weights.path, rc.model);
}

// Labeled images for synthetic data; PPM files (sorted by name) carry no
// labels.
inline std::vector<LabeledImage> resolve_data(const RunConfig& rc) {
  if (rc.data.synthetic) return synth_dataset(*rc.data.synthetic);
  namespace fs = std::filesystem;
  if (!fs::is_directory(rc.data.ppm_dir)) throw IoError("image directory '" + rc.data.ppm_dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(rc.data.ppm_dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm files in '" + rc.data.ppm_dir.string() + "'");
  std::vector<LabeledImage> out;
  for (const auto& f : files) {
    auto img = read_ppm(f);
    if (img.height != rc.model.image_h || img.width != rc.model.image_w)
      throw ShapeError(f.string() + ": image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       ", model expects " + std::to_string(rc.model.image_h) + "x" + std::to_string(rc.model.image_w));
    out.push_back({std::move(img), {}});
  }
  return out;
}

inline std::vector<Image> images_of(const std::vector<LabeledImage>& data) {
  std::vector<Image> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back(d.image);
  return out;
}

}  // namespace algm
