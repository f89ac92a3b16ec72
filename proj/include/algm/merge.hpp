#pragma once

// Conditional local average pooling (CLAP), threshold-gated global bipartite
// merging (GBM) and the batch token-count policy. Unmerging and record
// composition live in token_set.hpp.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "algm/config.hpp"
#include "algm/errors.hpp"
#include "algm/numkernel.hpp"
#include "algm/token_set.hpp"

namespace algm {

struct MergeOptions {
  double tau = 1.01;
  MergeOp op = MergeOp::average;
  // Required for MergeOp::random_pick.
  Rng* rng = nullptr;
  // Caps the number of merges (windows for CLAP, A tokens for GBM); the most
  // similar candidates win. Used by the batch policy.
  std::optional<std::size_t> max_merges{};
  // GBM only: weight the average by cluster size.
  bool size_weighted = true;
  // Layer tag written into the merge history.
  std::size_t layer = 0;
};

// A retained GBM edge, in positions of the input ordering.
struct GbmEdge {
  std::size_t a = 0;
  std::size_t b = 0;
  double similarity = 0.0;

  bool operator==(const GbmEdge&) const = default;
};

struct MergeOutcome {
  TokenSet result;
  // Maps step-input token index to step-output token index.
  MergeRecord step;
  // Windows collapsed (CLAP) or A tokens absorbed (GBM).
  std::size_t merged_count = 0;
  std::vector<std::size_t> merged_windows;
  std::vector<GbmEdge> merged_edges;
};

namespace detail {

inline std::vector<std::size_t> top_candidates(std::vector<std::size_t> candidates, std::span<const double> score,
                                               std::optional<std::size_t> limit) {
  if (!limit || *limit >= candidates.size()) return candidates;
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });
  candidates.resize(*limit);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

// Mean of the rows in `members`, each weighted by `weights` (empty = 1).
inline std::vector<double> weighted_mean(const Matrix& t, std::span<const std::size_t> members,
                                         std::span<const std::size_t> weights) {
  std::vector<double> acc(t.cols(), 0.0);
  double total = 0.0;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[m]);
    auto r = t.row(members[m]);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += w * r[c];
    total += w;
  }
  for (auto& v : acc) v /= total;
  return acc;
}

inline void write_row(Matrix& t, std::size_t r, std::span<const double> v) {
  auto dst = t.row(r);
  for (std::size_t c = 0; c < v.size(); ++c) dst[c] = static_cast<float>(v[c]);
}

inline Rng& require_rng(const MergeOptions& opt, const char* who) {
  if (opt.rng == nullptr) throw ArgumentError(std::string(who) + ": random_pick needs an Rng");
  return *opt.rng;
}

}  // namespace detail

// Window ids for a grid tiled by `k`, in raster order of windows.
struct WindowTiling {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Window k{};

  std::size_t windows_per_row() const noexcept { return grid_w / k.cols; }
  std::size_t count() const noexcept { return (grid_h / k.rows) * windows_per_row(); }

  std::size_t window_of(std::size_t index) const noexcept {
    const std::size_t r = index / grid_w;
    const std::size_t c = index % grid_w;
    return (r / k.rows) * windows_per_row() + c / k.cols;
  }

  // Raster indices of window w's members, in raster order.
  std::vector<std::size_t> members(std::size_t w) const {
    const std::size_t r0 = (w / windows_per_row()) * k.rows;
    const std::size_t c0 = (w % windows_per_row()) * k.cols;
    std::vector<std::size_t> m;
    m.reserve(k.area());
    for (std::size_t r = 0; r < k.rows; ++r)
      for (std::size_t c = 0; c < k.cols; ++c) m.push_back((r0 + r) * grid_w + c0 + c);
    return m;
  }
};

// Mean cosine similarity over all unordered pairs of `members`; nullopt for
// single-token windows.
inline std::optional<double> window_mean_similarity(const Matrix& tokens, std::span<const std::size_t> members,
                                                    std::span<const double> norms) {
  if (members.size() < 2) return std::nullopt;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      const auto a = members[i];
      const auto b = members[j];
      sum += cosine_from_parts(dot(tokens.row(a), tokens.row(b)), norms[a], norms[b]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// Collapses every k-window whose mean pairwise cosine similarity exceeds tau.
// The merged token takes the window's first raster index; all other tokens
// keep raster order.
inline MergeOutcome clap_merge(const TokenSet& ts, Window k, const MergeOptions& opt) {
  if (k.rows == 0 || k.cols == 0 || ts.grid_h % k.rows != 0 || ts.grid_w % k.cols != 0) {
    throw ShapeError("clap_merge: token grid " + std::to_string(ts.grid_h) + "x" + std::to_string(ts.grid_w) +
                     " is not divisible by window " + std::to_string(k.rows) + "x" + std::to_string(k.cols));
  }
  if (!ts.at_full_resolution()) {
    throw PreconditionError("clap_merge: input must be at full grid resolution (all cluster sizes 1)");
  }
  const WindowTiling tiling{ts.grid_h, ts.grid_w, k};
  const auto norms = row_norms(ts.tokens);
  const std::size_t n_windows = tiling.count();

  std::vector<double> mu(n_windows, -2.0);
  std::vector<std::size_t> candidates;
  for (std::size_t w = 0; w < n_windows; ++w) {
    const auto members = tiling.members(w);
    const auto m = window_mean_similarity(ts.tokens, members, norms);
    if (!m) continue;
    mu[w] = *m;
    if (*m > opt.tau) candidates.push_back(w);
  }
  const auto chosen = detail::top_candidates(std::move(candidates), mu, opt.max_merges);
  std::vector<bool> merged(n_windows, false);
  for (auto w : chosen) merged[w] = true;

  MergeOutcome out;
  out.merged_count = chosen.size();
  out.merged_windows = chosen;
  const std::size_t n = ts.count();
  const std::size_t d = ts.dim();

  // Merged value and surviving source per chosen window.
  std::vector<std::vector<double>> values(n_windows);
  for (auto w : chosen) {
    const auto members = tiling.members(w);
    if (opt.op == MergeOp::random_pick) {
      auto& rng = detail::require_rng(opt, "clap_merge");
      const auto pick = members[rng.index(members.size())];
      auto r = ts.tokens.row(pick);
      values[w].assign(r.begin(), r.end());
    } else {
      values[w] = detail::weighted_mean(ts.tokens, members, {});
    }
    MergeEvent ev{MergeSite::clap, opt.layer, members.front(), {}};
    ev.absorbed.assign(members.begin() + 1, members.end());
    out.step.history.push_back(std::move(ev));
  }

  if (opt.op == MergeOp::replicate) {
    out.result = ts;
    for (auto w : chosen)
      for (auto i : tiling.members(w)) detail::write_row(out.result.tokens, i, values[w]);
    out.step.assignment = MergeRecord::identity(n).assignment;
    out.result.record.history.insert(out.result.record.history.end(), out.step.history.begin(),
                                      out.step.history.end());
    return out;
  }

  const std::size_t removed = chosen.size() * (k.area() - 1);
  Matrix tokens(n - removed, d);
  std::vector<std::size_t> sizes;
  sizes.reserve(n - removed);
  out.step.assignment.assign(n, 0);
  std::vector<std::size_t> window_slot(n_windows, 0);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto w = tiling.window_of(i);
    if (merged[w]) {
      const auto first = tiling.members(w).front();
      if (i == first) {
        detail::write_row(tokens, next, values[w]);
        sizes.push_back(k.area());
        window_slot[w] = next++;
      }
      // Window members after the first come later in raster order, so the
      // slot is already assigned when we reach them.
      out.step.assignment[i] = window_slot[w];
    } else {
      auto src = ts.tokens.row(i);
      std::copy(src.begin(), src.end(), tokens.row(next).begin());
      sizes.push_back(1);
      out.step.assignment[i] = next++;
    }
  }
  out.result.tokens = std::move(tokens);
  out.result.grid_h = ts.grid_h;
  out.result.grid_w = ts.grid_w;
  out.result.cluster_sizes = std::move(sizes);
  out.result.record = compose(ts.record, out.step);
  return out;
}

// Best B partner for every A token (A = even positions, B = odd positions).
// Ties go to the lowest B position.
inline std::vector<GbmEdge> gbm_best_edges(const Matrix& tokens) {
  const std::size_t n = tokens.rows();
  std::vector<GbmEdge> edges;
  if (n < 2) return edges;
  const auto norms = row_norms(tokens);
  edges.reserve((n + 1) / 2);
  for (std::size_t a = 0; a < n; a += 2) {
    GbmEdge best{a, 1, -3.0};
    for (std::size_t b = 1; b < n; b += 2) {
      const double s = cosine_from_parts(dot(tokens.row(a), tokens.row(b)), norms[a], norms[b]);
      if (s > best.similarity) best = {a, b, s};
    }
    edges.push_back(best);
  }
  return edges;
}

// Keeps each A token's best edge, drops edges at or below tau, and folds every
// remaining A token into its B partner. Several A tokens may share one B.
inline MergeOutcome gbm_merge(const TokenSet& ts, const MergeOptions& opt) {
  MergeOutcome out;
  const std::size_t n = ts.count();
  if (n < 2) {
    out.result = ts;
    out.step = MergeRecord::identity(n);
    return out;
  }
  const auto best = gbm_best_edges(ts.tokens);
  std::vector<std::size_t> candidates;
  std::vector<double> score(best.size());
  for (std::size_t e = 0; e < best.size(); ++e) {
    score[e] = best[e].similarity;
    if (best[e].similarity > opt.tau) candidates.push_back(e);
  }
  const auto chosen = detail::top_candidates(std::move(candidates), score, opt.max_merges);

  // B position -> absorbed A positions (ascending).
  std::vector<std::vector<std::size_t>> groups(n);
  std::vector<bool> absorbed(n, false);
  for (auto e : chosen) {
    groups[best[e].b].push_back(best[e].a);
    absorbed[best[e].a] = true;
    out.merged_edges.push_back(best[e]);
  }
  out.merged_count = chosen.size();

  std::vector<std::vector<double>> values(n);
  for (std::size_t b = 1; b < n; b += 2) {
    if (groups[b].empty()) continue;
    std::vector<std::size_t> members{b};
    members.insert(members.end(), groups[b].begin(), groups[b].end());
    if (opt.op == MergeOp::random_pick) {
      auto& rng = detail::require_rng(opt, "gbm_merge");
      auto r = ts.tokens.row(members[rng.index(members.size())]);
      values[b].assign(r.begin(), r.end());
    } else {
      std::vector<std::size_t> weights;
      if (opt.size_weighted)
        for (auto m : members) weights.push_back(ts.cluster_sizes[m]);
      values[b] = detail::weighted_mean(ts.tokens, members, weights);
    }
    out.step.history.push_back({MergeSite::gbm, opt.layer, b, groups[b]});
  }

  if (opt.op == MergeOp::replicate) {
    out.result = ts;
    for (std::size_t b = 1; b < n; b += 2) {
      if (groups[b].empty()) continue;
      detail::write_row(out.result.tokens, b, values[b]);
      for (auto a : groups[b]) detail::write_row(out.result.tokens, a, values[b]);
    }
    out.step.assignment = MergeRecord::identity(n).assignment;
    out.result.record.history.insert(out.result.record.history.end(), out.step.history.begin(),
                                     out.step.history.end());
    return out;
  }

  const std::size_t m = n - chosen.size();
  Matrix tokens(m, ts.dim());
  std::vector<std::size_t> sizes(m, 0);
  std::vector<std::size_t> new_index(n, 0);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (absorbed[i]) continue;
    new_index[i] = next;
    if (!values[i].empty()) {
      detail::write_row(tokens, next, values[i]);
    } else {
      auto src = ts.tokens.row(i);
      std::copy(src.begin(), src.end(), tokens.row(next).begin());
    }
    sizes[next] = ts.cluster_sizes[i];
    for (auto a : groups[i]) sizes[next] += ts.cluster_sizes[a];
    ++next;
  }
  out.step.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.step.assignment[i] = new_index[i];
  for (auto e : chosen) out.step.assignment[best[e].a] = new_index[best[e].b];

  out.result.tokens = std::move(tokens);
  out.result.grid_h = ts.grid_h;
  out.result.grid_w = ts.grid_w;
  out.result.cluster_sizes = std::move(sizes);
  out.result.record = compose(ts.record, out.step);
  return out;
}

// Batch policy: every image keeps as many tokens as the most demanding one.
inline std::size_t batch_merge_count(std::span<const std::size_t> remaining_per_image) {
  if (remaining_per_image.empty()) throw ArgumentError("batch_merge_count: empty batch");
  return *std::max_element(remaining_per_image.begin(), remaining_per_image.end());
}

}  // namespace algm
