#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/losses.hpp"

namespace pat {

/// Scores plus ground truth for a test split. `scores_are_logits` records
/// whether thresholding must to go through the sigmoid first; ranking metrics
/// do not care either way.
struct PredictionSet {
  Matrix scores;                     // n x q
  std::vector<std::uint8_t> labels;  // n x q, row-major
  bool scores_are_logits = true;
  double threshold = 0.5;            // decision threshold on probabilities

  std::size_t n() const { return scores.rows; }
  std::size_t q() const { return scores.cols; }
  bool positive(std::size_t i, std::size_t k) const { return labels[i * scores.cols + k] != 0; }
  bool predicted(std::size_t i, std::size_t k) const {
    const double s = scores(i, k);
    const double p = scores_are_logits ? sigmoid(s) : s;
    return p > threshold;
  }
  void validate() const {
    require_shape(labels.size() == scores.rows * scores.cols, "PredictionSet: shape mismatch");
  }
};

/// Non-interpolated average precision. Ties are broken by ascending example
/// index so results are reproducible.
inline double average_precision(std::span<const double> scores,
                                std::span<const std::uint8_t> labels) {
  require_shape(scores.size() == labels.size(), "average_precision: length mismatch");
  std::size_t positives = 0;
  for (std::uint8_t y : labels) positives += y != 0;
  if (positives == 0) throw MetricError("average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] != 0) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

/// Unweighted mean of per-class AP. Classes without any positive example are
/// excluded (and reported through `excluded` when given); having no usable
/// class at all is an error.
inline double mean_average_precision(const PredictionSet& ps,
                                     std::vector<std::uint32_t>* excluded = nullptr) {
  ps.validate();
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> col(ps.n());
  std::vector<std::uint8_t> lab(ps.n());
  for (std::size_t k = 0; k < ps.q(); ++k) {
    bool any = false;
    for (std::size_t i = 0; i < ps.n(); ++i) {
      col[i] = ps.scores(i, k);
      lab[i] = ps.labels[i * ps.q() + k];
      any = any || lab[i];
    }
    if (!any) {
      if (excluded) excluded->push_back(static_cast<std::uint32_t>(k));
      continue;
    }
    sum += average_precision(col, lab);
    ++used;
  }
  if (used == 0) throw MetricError("mean_average_precision: every class lacks positives");
  return sum / static_cast<double>(used);
}

/// Thresholded precision/recall/F1, pooled (overall) and class-averaged.
struct PrF1Report {
  double op = 0.0, or_ = 0.0, of1 = 0.0;
  double cp = 0.0, cr = 0.0, cf1 = 0.0;
  // pooled confusion counts and per-class counts, kept so the report can be
  // recomputed from its own output
  std::size_t tp = 0, fp = 0, fn = 0;
  std::vector<std::size_t> class_tp, class_fp, class_fn;
  bool had_zero_denominator = false;
};

namespace detail {

inline double safe_div(std::size_t num, std::size_t den, bool& flag) {
  if (den == 0) {
    flag = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

inline double f1(double p, double r, bool& flag) {
  if (p + r == 0.0) {
    flag = true;
    return 0.0;
  }
  return 2.0 * p * r / (p + r);
}

}  // namespace detail

inline PrF1Report pr_f1_from_counts(std::span<const std::size_t> tp, std::span<const std::size_t> fp,
                                    std::span<const std::size_t> fn) {
  PrF1Report r;
  r.class_tp.assign(tp.begin(), tp.end());
  r.class_fp.assign(fp.begin(), fp.end());
  r.class_fn.assign(fn.begin(), fn.end());
  const std::size_t q = tp.size();
  double sum_p = 0.0, sum_r = 0.0;
  for (std::size_t k = 0; k < q; ++k) {
    r.tp += tp[k];
    r.fp += fp[k];
    r.fn += fn[k];
    sum_p += detail::safe_div(tp[k], tp[k] + fp[k], r.had_zero_denominator);
    sum_r += detail::safe_div(tp[k], tp[k] + fn[k], r.had_zero_denominator);
  }
  r.op = detail::safe_div(r.tp, r.tp + r.fp, r.had_zero_denominator);
  r.or_ = detail::safe_div(r.tp, r.tp + r.fn, r.had_zero_denominator);
  r.of1 = detail::f1(r.op, r.or_, r.had_zero_denominator);
  r.cp = sum_p / static_cast<double>(q);
  r.cr = sum_r / static_cast<double>(q);
  r.cf1 = detail::f1(r.cp, r.cr, r.had_zero_denominator);
  return r;
}

inline PrF1Report pr_f1_suite(const PredictionSet& ps) {
  ps.validate();
  const std::size_t q = ps.q();
  std::vector<std::size_t> tp(q, 0), fp(q, 0), fn(q, 0);
  for (std::size_t i = 0; i < ps.n(); ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      const bool truth = ps.positive(i, k);
      const bool pred = ps.predicted(i, k);
      if (pred && truth) ++tp[k];
      else if (pred && !truth) ++fp[k];
      else if (!pred && truth) ++fn[k];
    }
  }
  return pr_f1_from_counts(tp, fp, fn);
}

/// Conditional true/false positive ratios of class a given class b present.
struct PairRates {
  double ctpr = 0.0;       // P(pred a | a present, b present)
  double cfpr = 0.0;       // P(pred a | a absent, b present)
  std::size_t support_tp = 0;  // #(y_a=1 and y_b=1)
  std::size_t support_fp = 0;  // #(y_a=0 and y_b=1)
  bool ctpr_defined = false;
  bool cfpr_defined = false;
};

inline PairRates conditional_rates(const PredictionSet& ps, std::size_t a, std::size_t b) {
  ps.validate();
  require_shape(a < ps.q() && b < ps.q() && a != b, "conditional_rates: bad pair");
  PairRates r;
  std::size_t hit_tp = 0, hit_fp = 0;
  for (std::size_t i = 0; i < ps.n(); ++i) {
    if (!ps.positive(i, b)) continue;
    if (ps.positive(i, a)) {
      ++r.support_tp;
      if (ps.predicted(i, a)) ++hit_tp;
    } else {
      ++r.support_fp;
      if (ps.predicted(i, a)) ++hit_fp;
    }
  }
  if (r.support_tp > 0) {
    r.ctpr = static_cast<double>(hit_tp) / static_cast<double>(r.support_tp);
    r.ctpr_defined = true;
  }
  if (r.support_fp > 0) {
    r.cfpr = static_cast<double>(hit_fp) / static_cast<double>(r.support_fp);
    r.cfpr_defined = true;
  }
  return r;
}

struct PairReportRow {
  std::uint32_t a = 0;
  std::uint32_t b = 0;
  double p_b_given_a = 0.0;
  PairRates rates;
};

using PairConditionReport = std::vector<PairReportRow>;

/// Every ordered pair (a, b) whose empirical P(b | a) on the ground truth
/// exceeds the threshold, with the conditional rates of predicting a given b.
inline PairConditionReport pair_scan(const PredictionSet& ps, double co_threshold = 0.2) {
  ps.validate();
  const std::size_t q = ps.q();
  std::vector<std::size_t> count(q, 0);
  std::vector<std::vector<std::size_t>> joint(q, std::vector<std::size_t>(q, 0));
  for (std::size_t i = 0; i < ps.n(); ++i) {
    for (std::size_t a = 0; a < q; ++a) {
      if (!ps.positive(i, a)) continue;
      ++count[a];
      for (std::size_t b = 0; b < q; ++b)
        if (b != a && ps.positive(i, b)) ++joint[a][b];
    }
  }
  PairConditionReport report;
  for (std::size_t a = 0; a < q; ++a) {
    if (count[a] == 0) continue;
    for (std::size_t b = 0; b < q; ++b) {
      if (b == a) continue;
      const double p = static_cast<double>(joint[a][b]) / static_cast<double>(count[a]);
      if (p > co_threshold) {
        PairReportRow row;
        row.a = static_cast<std::uint32_t>(a);
        row.b = static_cast<std::uint32_t>(b);
        row.p_b_given_a = p;
        row.rates = conditional_rates(ps, a, b);
        report.push_back(row);
      }
    }
  }
  return report;
}

}  // namespace pat
