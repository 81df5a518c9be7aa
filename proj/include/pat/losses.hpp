#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pat/errors.hpp"

namespace pat {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

enum class LossKind : std::uint32_t { Bce = 0, Asl = 1 };

struct LossConfig {
  LossKind kind = LossKind::Bce;
  double gamma_pos = 0.0;   // positive focusing exponent
  double gamma_neg = 0.0;   // negative focusing exponent
  double clip = 0.0;        // probability margin subtracted on negatives
  double eps_log = 1e-12;   // floor for logs outside the stable forms

  static LossConfig bce() { return LossConfig{}; }
  /// Recommended asymmetric-loss setting from the loss's original authors.
  static LossConfig asl_default() { return LossConfig{LossKind::Asl, 0.0, 4.0, 0.05, 1e-12}; }
};

struct TermGrad {
  double value = 0.0;
  double dz = 0.0;
};

/// One class of binary cross entropy: y*softplus(-z) + (1-y)*softplus(z).
inline TermGrad bce_term(double z, bool positive) {
  if (positive) return {softplus(-z), sigmoid(z) - 1.0};
  return {softplus(z), sigmoid(z)};
}

/// One class of the asymmetric loss. Positive term (1-p)^g+ * (-log p);
/// negative term uses the shifted probability pm = max(p - clip, 0) and is
/// (pm)^g- * (-log(1-pm)), with gradient defined as 0 for p <= clip.
/// With g+ = g- = 0 and clip = 0 this reproduces bce_term bit for bit.
inline TermGrad asl_term(double z, bool positive, const LossConfig& cfg) {
  const double p = sigmoid(z);
  if (positive) {
    const double neg_log_p = softplus(-z);
    if (cfg.gamma_pos == 0.0) return {neg_log_p, p - 1.0};
    const double focus = std::pow(1.0 - p, cfg.gamma_pos);
    const double value = focus * neg_log_p;
    // d/dz [(1-p)^g * (-log p)] = g*(1-p)^g * p * log(p) - (1-p)^(g+1)
    const double dz = cfg.gamma_pos * focus * p * (-neg_log_p) - focus * (1.0 - p);
    return {value, dz};
  }
  if (cfg.clip == 0.0) {
    if (cfg.gamma_neg == 0.0) return {softplus(z), p};
    const double neg_log_1mp = softplus(z);
    const double focus = std::pow(p, cfg.gamma_neg);
    const double value = focus * neg_log_1mp;
    // d/dz [p^g * (-log(1-p))] = g*p^g*(1-p)*(-log(1-p)) + p^(g+1)
    const double dz = cfg.gamma_neg * focus * (1.0 - p) * neg_log_1mp + focus * p;
    return {value, dz};
  }
  const double pm = p - cfg.clip;
  if (pm <= 0.0) return {0.0, 0.0};
  const double one_m_pm = 1.0 - pm;  // >= clip > 0
  const double neg_log = -std::log(std::max(one_m_pm, cfg.eps_log));
  const double dp = p * (1.0 - p);
  if (cfg.gamma_neg == 0.0) return {neg_log, dp / one_m_pm};
  const double focus = std::pow(pm, cfg.gamma_neg);
  const double value = focus * neg_log;
  const double dvalue_dpm = cfg.gamma_neg * focus / pm * neg_log + focus / one_m_pm;
  return {value, dvalue_dpm * dp};
}

struct LossResult {
  double value = 0.0;
  std::vector<double> grad;  // d value / d logit, per class
};

inline LossResult bce_loss(std::span<const double> logits, std::span<const std::uint8_t> labels) {
  if (logits.size() != labels.size()) throw ShapeError("bce_loss: logits/labels length mismatch");
  LossResult r;
  r.grad.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const TermGrad t = bce_term(logits[k], labels[k] != 0);
    r.value += t.value;
    r.grad[k] = t.dz;
  }
  return r;
}

inline LossResult asl_loss(std::span<const double> logits, std::span<const std::uint8_t> labels,
                           const LossConfig& cfg) {
  if (logits.size() != labels.size()) throw ShapeError("asl_loss: logits/labels length mismatch");
  LossResult r;
  r.grad.resize(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const TermGrad t = asl_term(logits[k], labels[k] != 0, cfg);
    r.value += t.value;
    r.grad[k] = t.dz;
  }
  return r;
}

inline LossResult loss_eval(const LossConfig& cfg, std::span<const double> logits,
                            std::span<const std::uint8_t> labels) {
  switch (cfg.kind) {
    case LossKind::Bce:
      return bce_loss(logits, labels);
    case LossKind::Asl:
      return asl_loss(logits, labels, cfg);
  }
  throw ConfigError("loss_eval: unknown loss kind");
}

/// Gradient-only entry point used by the training loops.
inline std::vector<double> loss_gradient(const LossConfig& cfg, std::span<const double> logits,
                                         std::span<const std::uint8_t> labels) {
  return loss_eval(cfg, logits, labels).grad;
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "bce") return LossKind::Bce;
  if (s == "asl") return LossKind::Asl;
  throw ConfigError("unknown loss kind: " + s);
}

inline std::string to_string(LossKind k) { return k == LossKind::Bce ? "bce" : "asl"; }

}  // namespace pat
