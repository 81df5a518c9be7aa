#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/image.hpp"
#include "pat/losses.hpp"
#include "pat/model.hpp"

namespace pat {

inline constexpr int kNumPatches = 4;  // fixed 2x2 crop

enum class WeightSource : std::uint32_t { Shared = 0, PsiHead = 1, ThetaHead = 2 };

inline WeightSource weight_source_from_string(const std::string& s) {
  if (s == "shared") return WeightSource::Shared;
  if (s == "psi" || s == "psi_head") return WeightSource::PsiHead;
  if (s == "theta" || s == "theta_head") return WeightSource::ThetaHead;
  throw ConfigError("unknown weight source: " + s);
}

inline std::string to_string(WeightSource w) {
  switch (w) {
    case WeightSource::Shared: return "shared";
    case WeightSource::PsiHead: return "psi_head";
    case WeightSource::ThetaHead: return "theta_head";
  }
  return "?";
}

struct FusionConfig {
  double tau = 1.0;
  double tde_lambda = 1.0;
  WeightSource weight_source = WeightSource::ThetaHead;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("fusion.tau must be > 0");
    if (!(tde_lambda >= 0.0)) throw ConfigError("fusion.lambda must be >= 0");
  }
};

/// The four quadrant crops of an image, each resized back to full resolution.
struct PatchGrid {
  std::size_t side = 0;  // S; every patch is side x side
  std::array<std::vector<double>, kNumPatches> patches;
  // source quadrant corner (row, col) per patch, in original image coordinates
  std::array<std::pair<std::size_t, std::size_t>, kNumPatches> origin;
};

inline PatchGrid crop_patches(std::span<const double> image, std::size_t side) {
  require_shape(side % 2 == 0, "crop_patches: image side must be even");
  require_shape(image.size() == side * side, "crop_patches: bad image size");
  PatchGrid grid;
  grid.side = side;
  const std::size_t half = side / 2;
  for (int j = 0; j < kNumPatches; ++j) {
    const std::vector<double> quad = crop_quadrant(image, side, j);
    grid.patches[j] = bilinear_resize(quad, half, side);
    grid.origin[j] = {(j / 2) * half, (j % 2) * half};
  }
  return grid;
}

/// Per-class softmax over the patch axis: w_{jk} = exp(q_{jk}/tau) / sum_l exp(q_{lk}/tau).
/// Stabilized by subtracting the per-class maximum before exponentiation.
inline Matrix patch_weights(const Matrix& patch_logits, double tau) {
  if (!(tau > 0.0)) throw ConfigError("patch_weights: tau must be > 0");
  require_shape(all_finite(patch_logits.v), "patch_weights: non-finite logits");
  const std::size_t m = patch_logits.rows;
  const std::size_t q = patch_logits.cols;
  Matrix w(m, q);
  for (std::size_t k = 0; k < q; ++k) {
    double mx = patch_logits(0, k);
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, patch_logits(j, k));
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp((patch_logits(j, k) - mx) / tau);
      w(j, k) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < m; ++j) w(j, k) /= denom;
  }
  return w;
}

/// q_agg_k = sum_j w_{jk} * q_{jk}.
inline std::vector<double> aggregate_patch_logits(const Matrix& patch_logits, const Matrix& weights) {
  require_shape(patch_logits.rows == weights.rows && patch_logits.cols == weights.cols,
                "aggregate_patch_logits: shape mismatch");
  std::vector<double> agg(patch_logits.cols, 0.0);
  for (std::size_t j = 0; j < patch_logits.rows; ++j)
    for (std::size_t k = 0; k < patch_logits.cols; ++k) agg[k] += weights(j, k) * patch_logits(j, k);
  return agg;
}

/// Fused prediction sigma(p_k + lambda * q_agg_k). Fusion happens on logits;
/// converting to probabilities first would squash the patch evidence.
inline std::vector<double> tde_fuse(std::span<const double> image_logits,
                                    std::span<const double> agg_logits, double lambda) {
  require_shape(image_logits.size() == agg_logits.size(), "tde_fuse: length mismatch");
  if (!(lambda >= 0.0)) throw ConfigError("tde_fuse: lambda must be >= 0");
  std::vector<double> out(image_logits.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = sigmoid(image_logits[k] + lambda * agg_logits[k]);
  return out;
}

/// Everything one fused inference produces, kept around for auditing.
struct LogitBundle {
  std::vector<double> image_logits;            // p, length q
  Matrix patch_logits;                         // q_j, m x q
  Matrix weight_logits;                        // q^w_j, m x q
  Matrix weights;                              // w_j, m x q (columns sum to 1)
  std::vector<double> agg_logits;              // weighted patch logits, length q
  std::vector<double> tde;                     // fused probabilities, length q
};

namespace detail {

inline LogitBundle fuse_from_heads(const ModelParams& params, std::span<const double> image,
                                   const Linear& patch_head, const Linear* weight_head,
                                   const FusionConfig& cfg) {
  cfg.validate();
  require_shape(image.size() == params.input_dim(), "infer: image size mismatch");
  LogitBundle b;
  const std::vector<double> h = backbone_forward(params.l1, image);
  b.image_logits = head_forward(params.head_phi, h);
  const PatchGrid grid = crop_patches(image, params.side);
  const std::size_t q = params.classes;
  b.patch_logits = Matrix(kNumPatches, q);
  b.weight_logits = Matrix(kNumPatches, q);
  for (int j = 0; j < kNumPatches; ++j) {
    const std::vector<double> hj = backbone_forward(params.l1, grid.patches[j]);
    const std::vector<double> qj = head_forward(patch_head, hj);
    for (std::size_t k = 0; k < q; ++k) b.patch_logits(j, k) = qj[k];
    if (weight_head) {
      const std::vector<double> rj = head_forward(*weight_head, hj);
      for (std::size_t k = 0; k < q; ++k) b.weight_logits(j, k) = rj[k];
    }
  }
  if (!weight_head) b.weight_logits = b.patch_logits;
  b.weights = patch_weights(b.weight_logits, cfg.tau);
  b.agg_logits = aggregate_patch_logits(b.patch_logits, b.weights);
  b.tde = tde_fuse(b.image_logits, b.agg_logits, cfg.tde_lambda);
  return b;
}

}  // namespace detail

/// Patching-based inference on a single trained model: the image head scores
/// both the image and the patches, and the patch logits double as the weight
/// source.
inline LogitBundle pat_i_infer(const ModelParams& params, std::span<const double> image,
                               const FusionConfig& cfg) {
  if (params.mode == ModelMode::Int)
    throw ModelError("pat_i_infer: needs a q-output head; InT models are per-class");
  return detail::fuse_from_heads(params, image, params.head_phi, nullptr, cfg);
}

/// Fused inference for a model trained with decoupled heads: h_psi scores the
/// patches and h_theta (by default) supplies the weight logits.
inline LogitBundle pat_t_infer(const ModelParams& params, std::span<const double> image,
                               const FusionConfig& cfg) {
  if (params.mode != ModelMode::PatT) throw ModelError("pat_t_infer: model is not in pat-t mode");
  const Linear* wh = nullptr;
  switch (cfg.weight_source) {
    case WeightSource::Shared: wh = nullptr; break;
    case WeightSource::PsiHead: wh = &params.head_psi; break;
    case WeightSource::ThetaHead: wh = &params.head_theta; break;
  }
  return detail::fuse_from_heads(params, image, params.head_psi, wh, cfg);
}

}  // namespace pat
