#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "pat/patching.hpp"
#include "pat/rng.hpp"

using pat::FusionConfig;
using pat::Matrix;

TEST_CASE("constant images crop into constant patches") {
  std::vector<double> img(64 * 64, 0.37);
  const pat::PatchGrid grid = pat::crop_patches(img, 64);
  for (const auto& patch : grid.patches) {
    REQUIRE(patch.size() == 64 * 64);
    for (double v : patch) REQUIRE(v == Catch::Approx(0.37).margin(1e-12));
  }
}

TEST_CASE("a glyph strictly inside the top-left quadrant leaves other patches empty") {
  std::vector<double> img(64 * 64, 0.0);
  for (int r = 5; r < 20; ++r)
    for (int c = 7; c < 22; ++c) img[r * 64 + c] = 0.8;
  const pat::PatchGrid grid = pat::crop_patches(img, 64);
  double tl = 0.0;
  for (double v : grid.patches[0]) tl += v;
  REQUIRE(tl > 0.0);
  for (int j = 1; j < 4; ++j)
    for (double v : grid.patches[j]) REQUIRE(v == 0.0);
}

TEST_CASE("patch corners equal the source quadrant corners") {
  pat::Rng rng(41);
  std::vector<double> img(64 * 64);
  for (double& v : img) v = rng.uniform();
  const pat::PatchGrid grid = pat::crop_patches(img, 64);
  for (int j = 0; j < 4; ++j) {
    const auto [r0, c0] = grid.origin[j];
    const auto& p = grid.patches[j];
    REQUIRE(p[0] == img[r0 * 64 + c0]);
    REQUIRE(p[63] == img[r0 * 64 + c0 + 31]);
    REQUIRE(p[63 * 64] == img[(r0 + 31) * 64 + c0]);
    REQUIRE(p[63 * 64 + 63] == img[(r0 + 31) * 64 + c0 + 31]);
  }
}

TEST_CASE("crop and resize agree with the reference resampler") {
  pat::Rng rng(42);
  std::vector<double> img(32 * 32);
  for (double& v : img) v = rng.uniform();
  const pat::PatchGrid grid = pat::crop_patches(img, 32);
  for (int j = 0; j < 4; ++j) {
    const std::vector<double> quad = pat::crop_quadrant(img, 32, j);
    const std::vector<double> ref = oracle::bilinear_corner(quad, 16, 32);
    for (std::size_t i = 0; i < ref.size(); ++i)
      REQUIRE(std::abs(grid.patches[j][i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("odd image sides are rejected") {
  std::vector<double> img(63 * 63, 0.0);
  REQUIRE_THROWS_AS(pat::crop_patches(img, 63), pat::ShapeError);
}

TEST_CASE("equal patch logits give uniform weights") {
  Matrix logits(4, 3, 1.7);
  const Matrix w = pat::patch_weights(logits, 1.0);
  for (double v : w.v) REQUIRE(v == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("two-patch softmax closed form") {
  Matrix logits(2, 1);
  logits(0, 0) = 2.0;
  logits(1, 0) = 0.0;
  const Matrix w = pat::patch_weights(logits, 1.0);
  REQUIRE(w(0, 0) == Catch::Approx(0.880797077977882).epsilon(1e-12));
  REQUIRE(w(1, 0) == Catch::Approx(0.119202922022118).epsilon(1e-12));
}

TEST_CASE("low temperature concentrates on the argmax patch") {
  pat::Rng rng(43);
  Matrix logits(4, 5);
  for (double& v : logits.v) v = rng.uniform(-1.0, 1.0);
  // force a clear winner per class
  for (std::size_t k = 0; k < 5; ++k) logits(k % 4, k) += 2.0;
  const Matrix w = pat::patch_weights(logits, 0.01);
  for (std::size_t k = 0; k < 5; ++k) REQUIRE(w(k % 4, k) > 1.0 - 1e-6);
}

TEST_CASE("weight columns sum to one and shift invariance holds") {
  pat::Rng rng(44);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix logits(4, 6);
    for (double& v : logits.v) v = rng.uniform(-4.0, 4.0);
    const double tau = rng.uniform(0.05, 5.0);
    const Matrix w = pat::patch_weights(logits, tau);
    for (std::size_t k = 0; k < 6; ++k) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) s += w(j, k);
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
    Matrix shifted = logits;
    std::vector<double> offs(6);
    for (std::size_t k = 0; k < 6; ++k) offs[k] = rng.uniform(-10.0, 10.0);
    for (int j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 6; ++k) shifted(j, k) += offs[k];
    const Matrix w2 = pat::patch_weights(shifted, tau);
    for (std::size_t i = 0; i < w.v.size(); ++i) REQUIRE(std::abs(w.v[i] - w2.v[i]) < 1e-9);
  }
}

TEST_CASE("temperature limits") {
  pat::Rng rng(45);
  Matrix logits(4, 3);
  for (double& v : logits.v) v = rng.uniform(-3.0, 3.0);
  const Matrix w_hot = pat::patch_weights(logits, 1e6);
  for (double v : w_hot.v) REQUIRE(std::abs(v - 0.25) < 1e-3);
}

TEST_CASE("aggregation behaves like a per-class convex combination") {
  pat::Rng rng(46);
  Matrix logits(4, 3);
  for (double& v : logits.v) v = rng.uniform(-2.0, 2.0);
  // one-hot weights pick out a patch
  Matrix w(4, 3, 0.0);
  w(2, 0) = 1.0;
  w(0, 1) = 1.0;
  w(3, 2) = 1.0;
  const std::vector<double> agg = pat::aggregate_patch_logits(logits, w);
  REQUIRE(agg[0] == logits(2, 0));
  REQUIRE(agg[1] == logits(0, 1));
  REQUIRE(agg[2] == logits(3, 2));
  // identical patch logits are a fixed point for any valid weights
  Matrix same(4, 3);
  for (int j = 0; j < 4; ++j)
    for (int k = 0; k < 3; ++k) same(j, k) = 0.3 * (k + 1);
  const Matrix wu = pat::patch_weights(same, 1.0);
  const std::vector<double> agg2 = pat::aggregate_patch_logits(same, wu);
  for (int k = 0; k < 3; ++k) REQUIRE(agg2[k] == Catch::Approx(0.3 * (k + 1)).margin(1e-12));
}

TEST_CASE("aggregation matches the double-loop oracle") {
  pat::Rng rng(47);
  Matrix logits(4, 7), w(4, 7);
  for (double& v : logits.v) v = rng.uniform(-2.0, 2.0);
  for (double& v : w.v) v = rng.uniform(0.0, 1.0);
  const std::vector<double> agg = pat::aggregate_patch_logits(logits, w);
  for (std::size_t k = 0; k < 7; ++k) {
    double ref = 0.0;
    for (int j = 0; j < 4; ++j) ref += w(j, k) * logits(j, k);
    REQUIRE(std::abs(agg[k] - ref) < 1e-12);
  }
}

TEST_CASE("tde fusion") {
  const std::vector<double> p = {0.0, 1.0, -2.0};
  const std::vector<double> q = {0.0, 0.5, 1.0};
  const std::vector<double> plain = pat::tde_fuse(p, q, 0.0);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(plain[k] == pat::sigmoid(p[k]));
  const std::vector<double> fused = pat::tde_fuse(p, q, 1.0);
  REQUIRE(fused[0] == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(fused[1] == Catch::Approx(0.8175744761936437).epsilon(1e-12));
  // strictly increasing in both operands for lambda > 0
  const std::vector<double> bigger_p = {0.1, 1.1, -1.9};
  const std::vector<double> f2 = pat::tde_fuse(bigger_p, q, 1.0);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(f2[k] > fused[k]);
  const std::vector<double> bigger_q = {0.1, 0.6, 1.1};
  const std::vector<double> f3 = pat::tde_fuse(p, bigger_q, 1.0);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(f3[k] > fused[k]);
}

TEST_CASE("pat-i inference on an all-zero model predicts one half everywhere") {
  pat::Rng rng(48);
  pat::ModelParams params = pat::make_shared_model(16, 8, 5, pat::ModelMode::Det, rng);
  pat::for_each_array(params, [](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
  std::vector<double> img(16 * 16);
  for (double& v : img) v = rng.uniform();
  const pat::LogitBundle b = pat_i_infer(params, img, FusionConfig{});
  for (double t : b.tde) REQUIRE(t == 0.5);
  for (std::size_t k = 0; k < 5; ++k) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += b.weights(j, k);
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("pat-i with lambda zero reduces to plain image prediction") {
  pat::Rng rng(49);
  pat::ModelParams params = pat::make_shared_model(16, 12, 4, pat::ModelMode::Det, rng);
  std::vector<double> img(16 * 16);
  for (double& v : img) v = rng.uniform();
  FusionConfig cfg;
  cfg.tde_lambda = 0.0;
  const pat::LogitBundle b = pat_i_infer(params, img, cfg);
  const std::vector<double> h = pat::backbone_forward(params, img);
  const std::vector<double> p = pat::head_forward(params.head_phi, h);
  for (std::size_t k = 0; k < 4; ++k) REQUIRE(b.tde[k] == pat::sigmoid(p[k]));
}

TEST_CASE("weights recomputed from the bundle satisfy the simplex invariant") {
  pat::Rng rng(50);
  pat::ModelParams params = pat::make_shared_model(16, 12, 4, pat::ModelMode::PatT, rng);
  std::vector<double> img(16 * 16);
  for (double& v : img) v = rng.uniform();
  const pat::LogitBundle b = pat_t_infer(params, img, FusionConfig{});
  const Matrix w = pat::patch_weights(b.weight_logits, 1.0);
  for (std::size_t i = 0; i < w.v.size(); ++i) REQUIRE(w.v[i] == b.weights.v[i]);
  for (std::size_t k = 0; k < 4; ++k) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += b.weights(j, k);
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
}
