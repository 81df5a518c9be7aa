#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pat/errors.hpp"
#include "pat/rng.hpp"

namespace pat {

/// Finite structural model over the four-node graph: image content split
/// into target X and co-occurring object Z, correlative features O as a
/// deterministic mediator of (X, Z), and per-class outcome Y depending on
/// (X, O) only. Index 1 means the factual value (x or z), index 0 the masked
/// one (x0 or z0).
struct DiscreteScm {
  std::array<std::array<double, 2>, 2> p_xz = {};  // p_xz[x][z], sums to 1
  std::array<std::array<int, 2>, 2> mediator = {}; // o(x, z), values in [0, n_mediator)
  int n_mediator = 0;
  // outcome[k][x][o] = P(Y^k = 1 | X=x, O=o)
  std::vector<std::array<std::vector<double>, 2>> outcome;

  std::size_t classes() const { return outcome.size(); }

  void validate() const {
    double total = 0.0;
    for (const auto& row : p_xz)
      for (double p : row) {
        if (!(p >= 0.0)) throw ModelError("scm: negative cell in P(X,Z)");
        total += p;
      }
    if (std::abs(total - 1.0) > 1e-9) throw ModelError("scm: P(X,Z) does not sum to 1");
    for (const auto& row : mediator)
      for (int o : row)
        if (o < 0 || o >= n_mediator) throw ModelError("scm: mediator value out of range");
    for (const auto& tables : outcome)
      for (const auto& t : tables) {
        if (static_cast<int>(t.size()) != n_mediator) throw ModelError("scm: outcome table size");
        for (double p : t)
          if (!(p >= 0.0 && p <= 1.0)) throw ModelError("scm: outcome probability out of [0,1]");
      }
  }

  /// P(Y^k=1 | X=x_idx, O=o): counterfactual lookup with the mediator forced.
  double outcome_prob(std::size_t k, int x_idx, int o) const {
    if (k >= outcome.size() || o < 0 || o >= n_mediator)
      throw ModelError("scm: missing outcome table entry");
    return outcome[k][x_idx][o];
  }
};

/// Total direct effect of the target object on class k: both terms keep the
/// mediator at its factual value o(x, z), the second masks the target.
inline double tde_exact(const DiscreteScm& scm, std::size_t k) {
  scm.validate();
  const int o_factual = scm.mediator[1][1];
  return scm.outcome_prob(k, 1, o_factual) - scm.outcome_prob(k, 0, o_factual);
}

/// Transformed form: factual term plus lambda times the complementary term
/// in which the co-occurring object is masked (mediator from (x, z0)).
inline double tde_transformed(const DiscreteScm& scm, std::size_t k, double lambda) {
  scm.validate();
  const double term1 = scm.outcome_prob(k, 1, scm.mediator[1][1]);
  const double term2 = scm.outcome_prob(k, 1, scm.mediator[1][0]);
  return term1 + lambda * term2;
}

/// Numeric audit of the derivation that turns the subtractive TDE into the
/// additive fused form.
struct TdeReport {
  double tde_eq2 = 0.0;
  double term1 = 0.0;            // P(Y_o=1 | X=x, Z=z)
  double term2 = 0.0;            // P(Y_o=1 | X=x, Z=z0)
  double alpha = 0.0;            // P(x,z) / P(x0,z)
  double beta = 0.0;             // P(x,z0) / P(x0,z)
  double lambda = 0.0;           // beta / (1 - alpha)
  double premise_residual = 0.0; // how far the total-probability premise is from holding
  double chain_residual = 0.0;   // |TDE - (1-alpha)(term1 + lambda*term2)|
  bool degenerate = false;       // alpha == 1, lambda undefined
};

/// Measures both the premise the derivation assumes and the algebraic chain
/// built on it. The premise generally does not hold for arbitrary models;
/// whenever it does hold exactly, the chain is exact algebra and its residual
/// must vanish.
inline TdeReport appendix_chain_check(const DiscreteScm& scm, std::size_t k) {
  scm.validate();
  const double p_xz = scm.p_xz[1][1];
  const double p_x0z = scm.p_xz[0][1];
  const double p_xz0 = scm.p_xz[1][0];
  if (!(p_x0z > 0.0)) throw ModelError("appendix_chain_check: needs P(x0, z) > 0");

  TdeReport r;
  const double t_xz = scm.outcome_prob(k, 1, scm.mediator[1][1]);
  const double t_x0z = scm.outcome_prob(k, 0, scm.mediator[1][1]);
  const double t_xz0 = scm.outcome_prob(k, 1, scm.mediator[1][0]);
  r.term1 = t_xz;
  r.term2 = t_xz0;
  r.tde_eq2 = t_xz - t_x0z;
  r.alpha = p_xz / p_x0z;
  r.beta = p_xz0 / p_x0z;
  r.premise_residual = std::abs(t_x0z * p_x0z - (t_xz * p_xz - t_xz0 * p_xz0));
  if (r.alpha == 1.0) {
    r.degenerate = true;
    r.lambda = std::nan("");
    r.chain_residual = std::nan("");
    return r;
  }
  r.lambda = r.beta / (1.0 - r.alpha);
  r.chain_residual = std::abs(r.tde_eq2 - (1.0 - r.alpha) * (r.term1 + r.lambda * r.term2));
  return r;
}

/// Random model with a (x,z)-distinct mediator map, no premise imposed.
inline DiscreteScm make_random_scm(Rng& rng, std::size_t classes = 1) {
  DiscreteScm scm;
  scm.n_mediator = 4;
  scm.mediator = {{{0, 1}, {2, 3}}};  // mediator[x][z]
  double total = 0.0;
  for (auto& row : scm.p_xz)
    for (double& p : row) {
      p = rng.uniform(0.01, 1.0);
      total += p;
    }
  for (auto& row : scm.p_xz)
    for (double& p : row) p /= total;
  scm.outcome.resize(classes);
  for (auto& tables : scm.outcome)
    for (auto& t : tables) {
      t.resize(scm.n_mediator);
      for (double& p : t) p = rng.uniform();
    }
  return scm;
}

/// Model constructed to satisfy the total-probability premise exactly for
/// class 0: P(Y|x0, o(x,z)) is solved from the other entries; draws falling
/// outside [0,1] are rejected and redrawn.
inline DiscreteScm make_premise_scm(Rng& rng) {
  for (;;) {
    DiscreteScm scm = make_random_scm(rng, 1);
    const double p_xz = scm.p_xz[1][1];
    const double p_x0z = scm.p_xz[0][1];
    const double p_xz0 = scm.p_xz[1][0];
    const double t_xz = scm.outcome[0][1][scm.mediator[1][1]];
    const double t_xz0 = scm.outcome[0][1][scm.mediator[1][0]];
    const double solved = (t_xz * p_xz - t_xz0 * p_xz0) / p_x0z;
    if (!(solved >= 0.0 && solved <= 1.0)) continue;
    scm.outcome[0][0][scm.mediator[1][1]] = solved;
    return scm;
  }
}

}  // namespace pat
