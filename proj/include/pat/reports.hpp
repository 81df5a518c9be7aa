#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/metrics.hpp"

namespace pat {

/// Shortest exact decimal for a double (round-trips through strtod).
inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Prediction CSV: image_index, p_1..p_q and, for fused runs, q_agg_1..q_agg_q
// and tde_1..tde_q. The p and q_agg columns are logits, tde are fused
// probabilities.

struct PredictionFile {
  bool fused = false;
  Matrix p;     // n x q logits
  Matrix qagg;  // n x q logits (fused only)
  Matrix tde;   // n x q probabilities (fused only)

  std::size_t n() const { return p.rows; }
  std::size_t q() const { return p.cols; }
};

inline void write_prediction_csv(const std::string& path, const Matrix& p, const Matrix* qagg,
                                 const Matrix* tde) {
  if ((qagg == nullptr) != (tde == nullptr))
    throw IoError("write_prediction_csv: q_agg and tde must come together");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  const std::size_t q = p.cols;
  os << "image_index";
  for (std::size_t k = 1; k <= q; ++k) os << ",p_" << k;
  if (qagg) {
    for (std::size_t k = 1; k <= q; ++k) os << ",q_agg_" << k;
    for (std::size_t k = 1; k <= q; ++k) os << ",tde_" << k;
  }
  os << "\n";
  for (std::size_t i = 0; i < p.rows; ++i) {
    os << i;
    for (std::size_t k = 0; k < q; ++k) os << "," << fmt_double(p(i, k));
    if (qagg) {
      for (std::size_t k = 0; k < q; ++k) os << "," << fmt_double((*qagg)(i, k));
      for (std::size_t k = 0; k < q; ++k) os << "," << fmt_double((*tde)(i, k));
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline PredictionFile read_prediction_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty prediction file: " + path);
  const std::vector<std::string> header = split_csv_line(line);
  if (header.empty() || header[0] != "image_index")
    throw IoError("prediction file missing image_index column: " + path);
  std::size_t q = 0;
  while (1 + q < header.size() && header[1 + q] == "p_" + std::to_string(q + 1)) ++q;
  if (q == 0) throw IoError("prediction file has no p_ columns: " + path);
  PredictionFile f;
  if (header.size() == 1 + q) {
    f.fused = false;
  } else if (header.size() == 1 + 3 * q) {
    for (std::size_t k = 0; k < q; ++k) {
      if (header[1 + q + k] != "q_agg_" + std::to_string(k + 1) ||
          header[1 + 2 * q + k] != "tde_" + std::to_string(k + 1))
        throw IoError("prediction file has unexpected columns: " + path);
    }
    f.fused = true;
  } else {
    throw IoError("prediction file has unexpected column count: " + path);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw IoError("prediction row width mismatch in " + path);
    std::vector<double> row(cells.size() - 1);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      char* end = nullptr;
      row[c - 1] = std::strtod(cells[c].c_str(), &end);
      if (end == cells[c].c_str()) throw IoError("bad number in " + path + ": " + cells[c]);
    }
    rows.push_back(std::move(row));
  }
  const std::size_t n = rows.size();
  f.p = Matrix(n, q);
  if (f.fused) {
    f.qagg = Matrix(n, q);
    f.tde = Matrix(n, q);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < q; ++k) f.p(i, k) = rows[i][k];
    if (f.fused)
      for (std::size_t k = 0; k < q; ++k) {
        f.qagg(i, k) = rows[i][q + k];
        f.tde(i, k) = rows[i][2 * q + k];
      }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Metrics report (plain key=value) and the pair CSV behind the conditional
// rate curves.

inline void write_metrics_report(const std::string& path, const PredictionSet& ps, double map,
                                 const PrF1Report& pr, const std::vector<std::uint32_t>& excluded,
                                 const std::string& score_column,
                                 const std::vector<double>& per_class_ap) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "n=" << ps.n() << "\n";
  os << "classes=" << ps.q() << "\n";
  os << "threshold=" << fmt_double(ps.threshold) << "\n";
  os << "score_column=" << score_column << "\n";
  os << "map=" << fmt_double(map) << "\n";
  os << "op=" << fmt_double(pr.op) << "\n";
  os << "or=" << fmt_double(pr.or_) << "\n";
  os << "of1=" << fmt_double(pr.of1) << "\n";
  os << "cp=" << fmt_double(pr.cp) << "\n";
  os << "cr=" << fmt_double(pr.cr) << "\n";
  os << "cf1=" << fmt_double(pr.cf1) << "\n";
  os << "zero_denominator=" << (pr.had_zero_denominator ? 1 : 0) << "\n";
  std::ostringstream ex;
  for (std::size_t i = 0; i < excluded.size(); ++i) ex << (i ? "," : "") << excluded[i];
  os << "excluded_classes=" << ex.str() << "\n";
  for (std::size_t k = 0; k < per_class_ap.size(); ++k)
    os << "ap_" << k << "=" << fmt_double(per_class_ap[k]) << "\n";
  for (std::size_t k = 0; k < ps.q(); ++k) {
    os << "tp_" << k << "=" << pr.class_tp[k] << "\n";
    os << "fp_" << k << "=" << pr.class_fp[k] << "\n";
    os << "fn_" << k << "=" << pr.class_fn[k] << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline void write_pairs_csv(const std::string& path, const PairConditionReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "a,b,p_b_given_a,ctpr,cfpr,support_tp,support_fp\n";
  for (const PairReportRow& row : report) {
    os << row.a << "," << row.b << "," << fmt_double(row.p_b_given_a) << ","
       << (row.rates.ctpr_defined ? fmt_double(row.rates.ctpr) : "nan") << ","
       << (row.rates.cfpr_defined ? fmt_double(row.rates.cfpr) : "nan") << ","
       << row.rates.support_tp << "," << row.rates.support_fp << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace pat
