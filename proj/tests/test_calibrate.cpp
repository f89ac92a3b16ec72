#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "algm/calibrate.hpp"
#include "oracles.hpp"

using namespace algm;

namespace {

EncoderConfig tiny() {
  EncoderConfig c;
  c.image_h = 32;
  c.image_w = 32;
  c.patch_size = 8;
  c.depth = 3;
  c.dim = 16;
  c.heads = 2;
  c.gbm_layers = {2};
  return c;
}

Image random_image(std::uint64_t seed, std::size_t side) {
  Rng rng(seed);
  Image img(side, side);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

Matrix random_tokens(Rng& rng, std::size_t n, std::size_t d) {
  Matrix m(n, d);
  for (auto& v : m.values()) v = static_cast<float>(rng.normal());
  return m;
}

std::vector<double> all_pair_cosines(const Matrix& t) {
  std::vector<double> out;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = i + 1; j < t.rows(); ++j) out.push_back(oracle::cosine(t, i, j));
  return out;
}

}  // namespace

TEST(SimilarityStats, StreamingMatchesTwoPass) {
  Rng rng(1);
  std::vector<double> xs(100000);
  for (auto& x : xs) x = std::tanh(rng.normal());
  SimilarityStats s;
  for (double x : xs) s.add(x);
  const auto [m, sd] = oracle::mean_std(xs);
  EXPECT_NEAR(s.mean(), m, 1e-12);
  EXPECT_NEAR(s.stddev(), sd, 1e-9);
  EXPECT_NEAR(s.threshold(), std::clamp(m + sd, -1.0, 1.0), 1e-9);
  EXPECT_EQ(s.count(), xs.size());
  const auto& h = s.histogram();
  EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::uint64_t{0}), xs.size());
}

TEST(SimilarityStats, MergeEqualsSequential) {
  Rng rng(2);
  SimilarityStats all;
  SimilarityStats a;
  SimilarityStats b;
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    all.add(x);
    (i < 300 ? a : b).add(x);
  }
  a.merge(b);
  EXPECT_EQ(a.count(), all.count());
  EXPECT_NEAR(a.mean(), all.mean(), 1e-12);
  EXPECT_NEAR(a.variance(), all.variance(), 1e-12);
  EXPECT_EQ(a.histogram(), all.histogram());
  SimilarityStats empty;
  empty.merge(a);
  EXPECT_EQ(empty.count(), a.count());
}

TEST(SimilarityStats, DuplicationInvariance) {
  Rng rng(3);
  SimilarityStats once;
  SimilarityStats twice;
  for (int i = 0; i < 500; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    once.add(x);
    twice.add(x);
  }
  twice.merge(once);
  EXPECT_NEAR(once.threshold(), twice.threshold(), 1e-12);
}

TEST(SimilarityStats, HistogramEdges) {
  EXPECT_EQ(SimilarityStats::bin(-1.0), 0U);
  EXPECT_EQ(SimilarityStats::bin(1.0), kHistogramBins - 1);
  EXPECT_EQ(SimilarityStats::bin(0.0), kHistogramBins / 2);
  EXPECT_EQ(SimilarityStats::bin(-5.0), 0U);
}

TEST(Calibration, IdenticalTokensGiveTauOne) {
  Matrix t(16, 4);
  for (std::size_t i = 0; i < 16; ++i) t(i, 0) = 2.0F;
  SimilarityStats s;
  add_window_pairs(t, 4, 4, {2, 2}, s);
  EXPECT_EQ(s.mean(), 1.0);
  EXPECT_EQ(s.stddev(), 0.0);
  EXPECT_EQ(s.threshold(), 1.0);
  MergeOptions o;
  o.tau = s.threshold();
  EXPECT_EQ(clap_merge(TokenSet::full(t, 4, 4), {2, 2}, o).merged_count, 0U);
}

TEST(Calibration, PooledHandTokensMatchBruteForce) {
  const auto a = Matrix::from_rows({{1, 0}, {1, 1}, {0, 1}, {-1, 2}});
  const auto b = Matrix::from_rows({{2, 1}, {-1, -1}, {3, 0.5F}});
  SimilarityStats s;
  add_all_pairs(a, s);
  add_all_pairs(b, s);
  auto pooled = all_pair_cosines(a);
  const auto more = all_pair_cosines(b);
  pooled.insert(pooled.end(), more.begin(), more.end());
  const auto [m, sd] = oracle::mean_std(pooled);
  EXPECT_EQ(s.count(), 6U + 3U);
  EXPECT_NEAR(s.threshold(), m + sd, 1e-12);
}

TEST(Calibration, WindowPairsMatchBruteForce) {
  Rng rng(4);
  const auto t = random_tokens(rng, 8 * 4, 5);
  SimilarityStats s;
  add_window_pairs(t, 8, 4, {2, 4}, s);
  std::vector<double> xs;
  for (const auto& w : oracle::windows(8, 4, 2, 4))
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = i + 1; j < w.size(); ++j) xs.push_back(oracle::cosine(t, w[i], w[j]));
  const auto [m, sd] = oracle::mean_std(xs);
  EXPECT_EQ(s.count(), xs.size());
  EXPECT_NEAR(s.mean(), m, 1e-12);
  EXPECT_NEAR(s.stddev(), sd, 1e-9);
}

TEST(Calibration, InvariantUnderPositiveRowScaling) {
  Rng rng(5);
  auto t = random_tokens(rng, 20, 6);
  SimilarityStats a;
  add_all_pairs(t, a);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const auto s = static_cast<float>(std::exp(rng.uniform(-3.0, 3.0)));
    for (auto& v : t.row(i)) v *= s;
  }
  SimilarityStats b;
  add_all_pairs(t, b);
  EXPECT_NEAR(a.threshold(), b.threshold(), 1e-6);
}

TEST(Calibration, LargeSetsAreSubsampled) {
  Rng rng(6);
  const auto t = random_tokens(rng, 200, 4);
  PairSampling ps;
  ps.full_pairs_up_to_tokens = 100;
  ps.sampled_pairs = 5000;
  SimilarityStats s;
  EXPECT_TRUE(add_all_pairs(t, s, ps));
  EXPECT_EQ(s.count(), 5000U);
  SimilarityStats full;
  EXPECT_FALSE(add_all_pairs(t, full));
  EXPECT_NEAR(s.mean(), full.mean(), 0.05);
}

TEST(Calibration, PerSiteAndGlobalScopes) {
  const auto cfg = tiny();
  const auto w = init_random(cfg, 7);
  const std::vector<Image> images{random_image(1, 32), random_image(2, 32)};
  const auto per = calibrate_threshold(cfg, w, images);
  ASSERT_EQ(per.sites.size(), 2U);
  EXPECT_EQ(per.sites[0].site, MergeSite::clap);
  EXPECT_EQ(per.sites[1].layer, 2U);
  EXPECT_EQ(per.sites[0].stats.count(), 2U * 4U * 6U);
  EXPECT_EQ(per.sites[1].stats.count(), 2U * (16U * 15U / 2U));
  const auto glob = calibrate_threshold(cfg, w, images, CalibrationScope::global);
  EXPECT_EQ(glob.sites[0].tau, glob.sites[1].tau);
  EXPECT_EQ(glob.sites[0].tau, glob.pooled.threshold());
  const auto t = per.thresholds(cfg);
  EXPECT_EQ(t.clap, per.sites[0].tau);
  EXPECT_EQ(t.gbm, (std::vector<double>{per.sites[1].tau}));
}

TEST(Calibration, MatchesBruteForceOverForwardPass) {
  const auto cfg = tiny();
  const auto w = init_random(cfg, 8);
  const std::vector<Image> images{random_image(3, 32)};
  std::vector<double> clap_xs;
  std::vector<double> gbm_xs;
  ForwardOptions opt;
  opt.mode = Mode::baseline;
  opt.observer = [&](std::size_t l, const TokenSet& ts) {
    if (l == 1)
      for (const auto& m : oracle::windows(4, 4, 2, 2))
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = i + 1; j < 4; ++j) clap_xs.push_back(oracle::cosine(ts.tokens, m[i], m[j]));
    if (l == 2) gbm_xs = all_pair_cosines(ts.tokens);
  };
  encoder_forward(images[0], cfg, w, opt);
  const auto res = calibrate_threshold(cfg, w, images);
  const auto [cm, cs] = oracle::mean_std(clap_xs);
  const auto [gm, gs] = oracle::mean_std(gbm_xs);
  EXPECT_NEAR(res.sites[0].tau, std::min(1.0, cm + cs), 1e-6);
  EXPECT_NEAR(res.sites[1].tau, std::min(1.0, gm + gs), 1e-6);
}

TEST(Calibration, HomogeneousDataGivesHigherTau) {
  auto cfg = tiny();
  cfg.gbm_layers.clear();
  const auto w = init_random(cfg, 9);
  std::vector<Image> flat;
  std::vector<Image> noisy;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(s);
    Image f(32, 32);
    const auto base = static_cast<float>(rng.uniform());
    for (auto& v : f.pixels) v = base + static_cast<float>(0.01 * rng.normal());
    flat.push_back(f);
    noisy.push_back(random_image(50 + s, 32));
  }
  const double homogeneous = calibrate_threshold(cfg, w, flat).sites[0].tau;
  const double heterogeneous = calibrate_threshold(cfg, w, noisy).sites[0].tau;
  EXPECT_GT(homogeneous, heterogeneous);
}

TEST(Calibration, JsonRoundTrip) {
  const auto cfg = tiny();
  const auto w = init_random(cfg, 10);
  const std::vector<Image> images{random_image(4, 32)};
  const auto res = calibrate_threshold(cfg, w, images);
  const auto back = calibration_from_json(to_json(res));
  const auto a = res.thresholds(cfg);
  const auto b = back.thresholds(cfg);
  EXPECT_EQ(a.clap, b.clap);
  EXPECT_EQ(a.gbm, b.gbm);
  EXPECT_EQ(to_json(res)["sites"][0]["histogram"].size(), kHistogramBins);
}

TEST(Calibration, Errors) {
  auto cfg = tiny();
  const auto w = init_random(cfg, 11);
  EXPECT_THROW(calibrate_threshold(cfg, w, std::vector<Image>{}), ArgumentError);
  auto none = cfg;
  none.use_clap = false;
  none.gbm_layers.clear();
  const std::vector<Image> images{random_image(5, 32)};
  EXPECT_THROW(calibrate_threshold(none, w, images), ConfigError);
  const auto res = calibrate_threshold(cfg, w, images);
  auto more = cfg;
  more.gbm_layers = {2, 3};
  EXPECT_THROW(res.thresholds(more), ConfigError);
  EXPECT_THROW(calibration_from_json(nlohmann::json{{"sites", 3}}), ConfigError);
  EXPECT_THROW(parse_scope("layer"), ConfigError);
  SimilarityStats s;
  EXPECT_THROW(add_window_pairs(Matrix(5, 2), 2, 2, {2, 2}, s), ShapeError);
}
