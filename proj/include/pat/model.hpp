#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/losses.hpp"
#include "pat/rng.hpp"

namespace pat {

enum class ModelMode : std::uint32_t { Det = 0, Int = 1, PatT = 2 };

inline std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::Det: return "det";
    case ModelMode::Int: return "int";
    case ModelMode::PatT: return "pat-t";
  }
  return "?";
}

inline ModelMode model_mode_from_string(const std::string& s) {
  if (s == "det") return ModelMode::Det;
  if (s == "int") return ModelMode::Int;
  if (s == "pat-t" || s == "pat_t" || s == "patt") return ModelMode::PatT;
  throw ConfigError("unknown mode: " + s);
}

/// Affine map y = W x + b with W stored out x in.
struct Linear {
  Matrix w;
  std::vector<double> b;

  Linear() = default;
  Linear(std::size_t out, std::size_t in) : w(out, in), b(out, 0.0) {}
  std::size_t out_dim() const { return w.rows; }
  std::size_t in_dim() const { return w.cols; }
};

/// One independent binary model used in InT mode: its own backbone plus a
/// scalar head for a single class.
struct ClassModel {
  std::uint32_t class_index = 0;
  Linear l1;
  Linear head;  // 1 x hidden
};

/// Shared backbone g plus heads h_phi (image logits), h_psi (patch logits)
/// and h_theta (patch-weight logits). In InT mode the shared members stay
/// empty and `per_class` carries q independent (backbone, scalar head) pairs.
struct ModelParams {
  std::uint32_t side = 0;     // S; inputs are S*S flattened pixels
  std::uint32_t hidden = 0;   // H
  std::uint32_t classes = 0;  // q
  ModelMode mode = ModelMode::Det;

  Linear l1;
  Linear head_phi;
  Linear head_psi;
  Linear head_theta;

  std::vector<ClassModel> per_class;

  std::size_t input_dim() const { return static_cast<std::size_t>(side) * side; }
};

namespace detail {

template <typename Params, typename F>
void for_each_array_impl(Params& p, F&& f) {
  if (p.mode == ModelMode::Int) {
    for (auto& cm : p.per_class) {
      f(cm.l1.w.v);
      f(cm.l1.b);
      f(cm.head.w.v);
      f(cm.head.b);
    }
  } else {
    f(p.l1.w.v);
    f(p.l1.b);
    f(p.head_phi.w.v);
    f(p.head_phi.b);
    f(p.head_psi.w.v);
    f(p.head_psi.b);
    f(p.head_theta.w.v);
    f(p.head_theta.b);
  }
}

}  // namespace detail

/// Visits every parameter array in the declared (serialization) order.
template <typename F>
void for_each_array(ModelParams& p, F&& f) {
  detail::for_each_array_impl(p, std::forward<F>(f));
}

template <typename F>
void for_each_array(const ModelParams& p, F&& f) {
  detail::for_each_array_impl(p, std::forward<F>(f));
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t n = 0;
  for_each_array(p, [&](const std::vector<double>& a) { n += a.size(); });
  return n;
}

/// Gradient buffers shaped exactly like the parameters they belong to.
using ModelGrads = ModelParams;

inline ModelGrads zeros_like(const ModelParams& p) {
  ModelGrads g = p;
  for_each_array(g, [](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
  return g;
}

inline void init_linear(Linear& l, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_dim()));
  for (double& x : l.w.v) x = rng.uniform(-bound, bound);
  std::fill(l.b.begin(), l.b.end(), 0.0);
}

/// Fresh DeT / PAT-T model: one backbone, three q-way heads.
inline ModelParams make_shared_model(std::uint32_t side, std::uint32_t hidden, std::uint32_t classes,
                                     ModelMode mode, Rng& rng) {
  if (mode == ModelMode::Int) throw ModelError("make_shared_model: InT needs make_int_model");
  ModelParams p;
  p.side = side;
  p.hidden = hidden;
  p.classes = classes;
  p.mode = mode;
  const std::size_t d = p.input_dim();
  p.l1 = Linear(hidden, d);
  p.head_phi = Linear(classes, hidden);
  p.head_psi = Linear(classes, hidden);
  p.head_theta = Linear(classes, hidden);
  init_linear(p.l1, rng);
  init_linear(p.head_phi, rng);
  init_linear(p.head_psi, rng);
  init_linear(p.head_theta, rng);
  return p;
}

/// Fresh InT model holding the given per-class submodels.
inline ModelParams make_int_model(std::uint32_t side, std::uint32_t hidden, std::uint32_t classes,
                                  std::span<const std::uint32_t> class_indices, Rng& rng) {
  ModelParams p;
  p.side = side;
  p.hidden = hidden;
  p.classes = classes;
  p.mode = ModelMode::Int;
  const std::size_t d = p.input_dim();
  for (std::uint32_t k : class_indices) {
    ClassModel cm;
    cm.class_index = k;
    cm.l1 = Linear(hidden, d);
    cm.head = Linear(1, hidden);
    init_linear(cm.l1, rng);
    init_linear(cm.head, rng);
    p.per_class.push_back(std::move(cm));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Per-example forward ops.

inline std::vector<double> linear_apply(const Linear& l, std::span<const double> x) {
  require_shape(x.size() == l.in_dim(), "linear_apply: input length mismatch");
  std::vector<double> y(l.out_dim());
  for (std::size_t i = 0; i < l.out_dim(); ++i)
    y[i] = l.b[i] + dot(l.w.v.data() + i * l.w.cols, x.data(), l.in_dim());
  return y;
}

/// Rectifier backbone features for one flattened image.
inline std::vector<double> backbone_forward(const Linear& l1, std::span<const double> input) {
  require_shape(all_finite(input), "backbone_forward: non-finite input");
  std::vector<double> h = linear_apply(l1, input);
  for (double& x : h) x = x > 0.0 ? x : 0.0;
  return h;
}

inline std::vector<double> backbone_forward(const ModelParams& p, std::span<const double> input) {
  if (p.mode == ModelMode::Int) throw ModelError("backbone_forward: InT has per-class backbones");
  return backbone_forward(p.l1, input);
}

/// Head logits for precomputed backbone features. No output activation.
inline std::vector<double> head_forward(const Linear& head, std::span<const double> hidden) {
  return linear_apply(head, hidden);
}

// ---------------------------------------------------------------------------
// Batched layers used by the training loops. Rows are examples.

struct BackboneCache {
  Matrix pre;   // B x H, pre-activation
  Matrix act;   // B x H, rectified
};

inline void linear_forward_batch(const Linear& l, const Matrix& x, Matrix& y) {
  matmul_nt(x, l.w, y);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* yi = y.v.data() + i * y.cols;
    for (std::size_t j = 0; j < y.cols; ++j) yi[j] += l.b[j];
  }
}

inline void backbone_forward_batch(const Linear& l1, const Matrix& x, BackboneCache& cache) {
  linear_forward_batch(l1, x, cache.pre);
  cache.act = cache.pre;
  for (double& v : cache.act.v) v = v > 0.0 ? v : 0.0;
}

/// dY -> accumulate head gradients and return dHidden (B x H).
inline void head_backward_batch(const Linear& head, const Matrix& hidden, const Matrix& dy,
                                Linear& grad, Matrix& dhidden, bool accumulate_dhidden) {
  matmul_tn(dy, hidden, grad.w, /*accumulate=*/true);
  for (std::size_t i = 0; i < dy.rows; ++i)
    for (std::size_t j = 0; j < dy.cols; ++j) grad.b[j] += dy(i, j);
  Matrix dh;
  matmul_nn(dy, head.w, dh);
  if (accumulate_dhidden) {
    for (std::size_t i = 0; i < dh.v.size(); ++i) dhidden.v[i] += dh.v[i];
  } else {
    dhidden = std::move(dh);
  }
}

/// dHidden -> accumulate backbone gradients. Consumes dhidden in place.
inline void backbone_backward_batch(const Matrix& x, const BackboneCache& cache, Matrix& dhidden,
                                    Linear& grad) {
  for (std::size_t i = 0; i < dhidden.v.size(); ++i)
    if (cache.pre.v[i] <= 0.0) dhidden.v[i] = 0.0;
  matmul_tn(dhidden, x, grad.w, /*accumulate=*/true);
  for (std::size_t i = 0; i < dhidden.rows; ++i)
    for (std::size_t j = 0; j < dhidden.cols; ++j) grad.b[j] += dhidden(i, j);
}

/// Upstream logit gradients for one batch, one entry per head actually used.
struct HeadUpstream {
  const Matrix* d_phi = nullptr;    // B x q, w.r.t. image logits
  const Matrix* d_psi[4] = {};      // B x q each, w.r.t. patch logits
  const Matrix* d_theta[4] = {};    // B x q each, w.r.t. weight logits
};

/// Exact parameter gradients for the shared-backbone model given upstream
/// logit gradients; patches reuse the backbone so their contributions are
/// accumulated into the same l1 gradient.
inline void backward(const ModelParams& p, const Matrix& image_batch,
                     const Matrix* patch_batches[4], const BackboneCache& image_cache,
                     const BackboneCache patch_caches[4], const HeadUpstream& up,
                     ModelGrads& grads) {
  if (p.mode == ModelMode::Int) throw ModelError("backward: use class-model path for InT");
  Matrix dhidden;
  if (up.d_phi) {
    head_backward_batch(p.head_phi, image_cache.act, *up.d_phi, grads.head_phi, dhidden, false);
    backbone_backward_batch(image_batch, image_cache, dhidden, grads.l1);
  }
  for (int j = 0; j < 4; ++j) {
    if (!up.d_psi[j] && !up.d_theta[j]) continue;
    bool have = false;
    if (up.d_psi[j]) {
      head_backward_batch(p.head_psi, patch_caches[j].act, *up.d_psi[j], grads.head_psi, dhidden, false);
      have = true;
    }
    if (up.d_theta[j]) {
      head_backward_batch(p.head_theta, patch_caches[j].act, *up.d_theta[j], grads.head_theta, dhidden,
                          have);
    }
    backbone_backward_batch(*patch_batches[j], patch_caches[j], dhidden, grads.l1);
  }
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer and parameter averaging.

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const ModelParams& p) {
    AdamState s;
    for_each_array(p, [&](const std::vector<double>& a) {
      s.m.emplace_back(a.size(), 0.0);
      s.v.emplace_back(a.size(), 0.0);
    });
    return s;
  }
};

/// One bias-corrected adaptive-moment update. Throws on non-finite gradients.
inline void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw TrainError("adam_step: learning rate must be positive");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  std::size_t idx = 0;
  std::vector<std::vector<double>*> param_arrays;
  std::vector<const std::vector<double>*> grad_arrays;
  for_each_array(params, [&](std::vector<double>& a) { param_arrays.push_back(&a); });
  for_each_array(grads, [&](const std::vector<double>& a) { grad_arrays.push_back(&a); });
  if (param_arrays.size() != grad_arrays.size() || param_arrays.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state layouts disagree");
  for (; idx < param_arrays.size(); ++idx) {
    std::vector<double>& w = *param_arrays[idx];
    const std::vector<double>& g = *grad_arrays[idx];
    std::vector<double>& m = state.m[idx];
    std::vector<double>& v = state.v[idx];
    if (w.size() != g.size() || w.size() != m.size())
      throw ShapeError("adam_step: array size mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw TrainError("adam_step: non-finite gradient at step " + std::to_string(state.t));
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

/// avg <- decay*avg + (1-decay)*current, elementwise.
inline void ema_update(ModelParams& avg, const ModelParams& current, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw TrainError("ema_update: decay must be in [0,1)");
  std::vector<std::vector<double>*> dst;
  std::vector<const std::vector<double>*> src;
  for_each_array(avg, [&](std::vector<double>& a) { dst.push_back(&a); });
  for_each_array(current, [&](const std::vector<double>& a) { src.push_back(&a); });
  if (dst.size() != src.size()) throw ShapeError("ema_update: layout mismatch");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k]->size() != src[k]->size()) throw ShapeError("ema_update: array size mismatch");
    for (std::size_t i = 0; i < dst[k]->size(); ++i)
      (*dst[k])[i] = decay * (*dst[k])[i] + (1.0 - decay) * (*src[k])[i];
  }
}

// ---------------------------------------------------------------------------

/// Numeric training knobs shared by every mode.
struct TrainConfig {
  double lr = 1e-4;
  std::uint32_t epochs = 20;
  std::uint32_t batch = 16;
  std::uint64_t seed = 1;
  double ema_decay = 0.0;  // 0 disables averaging
  std::uint32_t warmup_steps = 0;
  std::uint32_t hidden = 256;
  std::uint32_t int_hidden = 64;  // backbone width of each per-class InT model
  std::uint32_t eval_every = 1;   // 0 = evaluate only after the final epoch
  LossConfig loss = LossConfig::asl_default();

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema must be in [0,1)");
  }
};

}  // namespace pat
