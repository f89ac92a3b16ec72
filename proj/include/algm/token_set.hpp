#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "algm/errors.hpp"
#include "algm/numkernel.hpp"

namespace algm {

enum class MergeSite { clap, gbm };

inline std::string site_name(MergeSite s) { return s == MergeSite::clap ? "clap" : "gbm"; }

// One collapse: the tokens at `absorbed` (indices into the step's input
// ordering) were folded into the token at `kept`.
struct MergeEvent {
  MergeSite site = MergeSite::clap;
  std::size_t layer = 0;
  std::size_t kept = 0;
  std::vector<std::size_t> absorbed;

  bool operator==(const MergeEvent&) const = default;
};

// assignment[i] is the index of the current token that owns original
// position i. History is informational; unmerging reads only assignment.
struct MergeRecord {
  std::vector<std::size_t> assignment;
  std::vector<MergeEvent> history;

  static MergeRecord identity(std::size_t n) {
    MergeRecord r;
    r.assignment.resize(n);
    std::iota(r.assignment.begin(), r.assignment.end(), std::size_t{0});
    return r;
  }

  std::size_t original_count() const noexcept { return assignment.size(); }

  bool operator==(const MergeRecord&) const = default;

  // Every value in range and every current token owned at least once.
  void check(std::size_t current_count) const {
    std::vector<bool> seen(current_count, false);
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      const auto a = assignment[i];
      if (a >= current_count) {
        throw IntegrityError("merge record maps original index " + std::to_string(i) +
                             " to token " + std::to_string(a) + " but only " +
                             std::to_string(current_count) + " tokens exist");
      }
      seen[a] = true;
    }
    for (std::size_t j = 0; j < current_count; ++j) {
      if (!seen[j]) throw IntegrityError("token " + std::to_string(j) + " owns no original position");
    }
  }
};

// a then b: composed.assignment[i] == b.assignment[a.assignment[i]].
inline MergeRecord compose(const MergeRecord& a, const MergeRecord& b) {
  MergeRecord out;
  out.assignment.resize(a.assignment.size());
  for (std::size_t i = 0; i < a.assignment.size(); ++i) {
    const auto mid = a.assignment[i];
    if (mid >= b.assignment.size()) {
      throw IntegrityError("compose: index " + std::to_string(mid) + " outside second record of length " +
                           std::to_string(b.assignment.size()));
    }
    out.assignment[i] = b.assignment[mid];
  }
  out.history = a.history;
  out.history.insert(out.history.end(), b.history.begin(), b.history.end());
  return out;
}

struct TokenSet {
  Matrix tokens;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::size_t> cluster_sizes;
  MergeRecord record;

  static TokenSet full(Matrix tokens, std::size_t grid_h, std::size_t grid_w) {
    if (tokens.rows() != grid_h * grid_w) {
      throw ShapeError("token matrix " + tokens.shape() + " does not fill a " + std::to_string(grid_h) +
                       "x" + std::to_string(grid_w) + " grid");
    }
    TokenSet ts;
    ts.tokens = std::move(tokens);
    ts.grid_h = grid_h;
    ts.grid_w = grid_w;
    ts.cluster_sizes.assign(grid_h * grid_w, 1);
    ts.record = MergeRecord::identity(grid_h * grid_w);
    return ts;
  }

  std::size_t count() const noexcept { return tokens.rows(); }
  std::size_t original_count() const noexcept { return grid_h * grid_w; }
  std::size_t dim() const noexcept { return tokens.cols(); }

  bool at_full_resolution() const {
    return count() == original_count() &&
           std::all_of(cluster_sizes.begin(), cluster_sizes.end(), [](std::size_t s) { return s == 1; });
  }

  // Record covers the grid, every token is owned, and cluster sizes agree
  // with the ownership counts (which also makes them sum to grid_h*grid_w).
  void check() const {
    if (record.assignment.size() != original_count()) {
      throw IntegrityError("merge record covers " + std::to_string(record.assignment.size()) +
                           " positions, grid has " + std::to_string(original_count()));
    }
    if (cluster_sizes.size() != count()) {
      throw IntegrityError("cluster_sizes has " + std::to_string(cluster_sizes.size()) + " entries for " +
                           std::to_string(count()) + " tokens");
    }
    record.check(count());
    std::vector<std::size_t> owned(count(), 0);
    for (auto a : record.assignment) ++owned[a];
    for (std::size_t j = 0; j < count(); ++j) {
      // Replicate-mode steps keep sizes at 1 with an identity record, so the
      // two views always agree for valid sets.
      if (owned[j] != cluster_sizes[j]) {
        throw IntegrityError("token " + std::to_string(j) + " has cluster size " +
                             std::to_string(cluster_sizes[j]) + " but owns " + std::to_string(owned[j]) +
                             " positions");
      }
    }
  }
};

// Duplicates each current row back to every original position it owns.
inline Matrix unmerge(const Matrix& tokens, const MergeRecord& record) {
  record.check(tokens.rows());
  Matrix out(record.assignment.size(), tokens.cols());
  for (std::size_t i = 0; i < record.assignment.size(); ++i) {
    auto src = tokens.row(record.assignment[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline Matrix unmerge(const TokenSet& ts) {
  ts.check();
  return unmerge(ts.tokens, ts.record);
}

inline nlohmann::json to_json(const MergeRecord& r) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : r.history) {
    history.push_back({{"site", site_name(e.site)}, {"layer", e.layer}, {"kept", e.kept}, {"absorbed", e.absorbed}});
  }
  return {{"assignment", r.assignment}, {"history", std::move(history)}};
}

inline MergeRecord merge_record_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("assignment") || !j["assignment"].is_array())
    throw ConfigError("merge record: expected object with an 'assignment' array");
  MergeRecord r;
  r.assignment = j["assignment"].get<std::vector<std::size_t>>();
  if (j.contains("history")) {
    for (const auto& e : j["history"]) {
      MergeEvent ev;
      const auto site = e.at("site").get<std::string>();
      if (site != "clap" && site != "gbm") throw ConfigError("merge record: unknown site '" + site + "'");
      ev.site = site == "clap" ? MergeSite::clap : MergeSite::gbm;
      ev.layer = e.at("layer").get<std::size_t>();
      ev.kept = e.at("kept").get<std::size_t>();
      ev.absorbed = e.at("absorbed").get<std::vector<std::size_t>>();
      r.history.push_back(std::move(ev));
    }
  }
  return r;
}

}  // namespace algm
