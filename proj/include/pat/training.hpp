#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pat/array.hpp"
#include "pat/errors.hpp"
#include "pat/losses.hpp"
#include "pat/metrics.hpp"
#include "pat/model.hpp"
#include "pat/patching.hpp"
#include "pat/synthgen.hpp"

namespace pat {

struct TrainLogRow {
  std::uint32_t epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double loss_image = std::numeric_limits<double>::quiet_NaN();
  double loss_patch = std::numeric_limits<double>::quiet_NaN();
  double test_map = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsSnapshot {
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double test_map = std::numeric_limits<double>::quiet_NaN();
};

struct Checkpoint {
  ModelParams params;
  TrainConfig cfg;
  FusionConfig fusion;
  bool aux_weight_loss = false;
  std::uint32_t epoch = 0;
  MetricsSnapshot metrics;
  std::vector<TrainLogRow> log;  // in-memory only, the CLI persists it as CSV
};

// ---------------------------------------------------------------------------
// Batch assembly.

inline void fill_batch(const Dataset& ds, std::span<const std::size_t> idx, Matrix& x,
                       std::vector<std::uint8_t>& y) {
  const std::size_t d = static_cast<std::size_t>(ds.side) * ds.side;
  x.rows = idx.size();
  x.cols = d;
  x.v.resize(idx.size() * d);
  y.resize(idx.size() * ds.classes);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const SceneExample& ex = ds.examples[idx[i]];
    double* row = x.v.data() + i * d;
    for (std::size_t p = 0; p < d; ++p) row[p] = static_cast<double>(ex.image[p]);
    std::copy(ex.labels.begin(), ex.labels.end(), y.begin() + i * ds.classes);
  }
}

/// Crops+resizes every row of an image batch into the four patch batches.
inline void fill_patch_batches(const Matrix& x, std::size_t side, std::array<Matrix, 4>& u) {
  for (auto& m : u) {
    m.rows = x.rows;
    m.cols = x.cols;
    m.v.resize(x.v.size());
  }
  for (std::size_t i = 0; i < x.rows; ++i) {
    const PatchGrid grid = crop_patches(x.row(i), side);
    for (int j = 0; j < kNumPatches; ++j)
      std::copy(grid.patches[j].begin(), grid.patches[j].end(), u[j].v.begin() + i * x.cols);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers (batched; pure functions of frozen parameters).

inline Matrix det_logits(const ModelParams& params, const Dataset& ds, std::size_t batch = 256) {
  if (params.mode == ModelMode::Int) throw ModelError("det_logits: InT needs assemble_int_scores");
  Matrix scores(ds.size(), params.classes);
  Matrix x;
  std::vector<std::uint8_t> ybuf;
  BackboneCache cache;
  Matrix p;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t stop = std::min(ds.size(), start + batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    fill_batch(ds, idx, x, ybuf);
    backbone_forward_batch(params.l1, x, cache);
    linear_forward_batch(params.head_phi, cache.act, p);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < params.classes; ++k) scores(start + i, k) = p(i, k);
  }
  return scores;
}

/// Image logits, aggregated patch logits and fused probabilities for a whole
/// split. For pat-t models the psi/theta heads are used; for single-head
/// models the image head scores the patches and supplies the weights.
struct FusedScores {
  Matrix p;     // n x q image logits
  Matrix qagg;  // n x q aggregated patch logits
  Matrix tde;   // n x q fused probabilities
};

inline FusedScores fused_scores(const ModelParams& params, const Dataset& ds,
                                const FusionConfig& cfg, std::size_t batch = 128) {
  cfg.validate();
  if (params.mode == ModelMode::Int) throw ModelError("fused_scores: not defined for InT");
  const bool three_heads = params.mode == ModelMode::PatT;
  const Linear& patch_head = three_heads ? params.head_psi : params.head_phi;
  const Linear* weight_head = nullptr;
  if (three_heads) {
    switch (cfg.weight_source) {
      case WeightSource::Shared: weight_head = nullptr; break;
      case WeightSource::PsiHead: weight_head = &params.head_psi; break;
      case WeightSource::ThetaHead: weight_head = &params.head_theta; break;
    }
  }
  const std::size_t q = params.classes;
  FusedScores out;
  out.p = Matrix(ds.size(), q);
  out.qagg = Matrix(ds.size(), q);
  out.tde = Matrix(ds.size(), q);

  Matrix x;
  std::array<Matrix, 4> u;
  std::vector<std::uint8_t> ybuf;
  BackboneCache cache;
  Matrix p, qj[4], rj[4];
  std::vector<std::size_t> idx;
  Matrix plog(kNumPatches, q), wlog(kNumPatches, q);
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t stop = std::min(ds.size(), start + batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    fill_batch(ds, idx, x, ybuf);
    fill_patch_batches(x, params.side, u);
    backbone_forward_batch(params.l1, x, cache);
    linear_forward_batch(params.head_phi, cache.act, p);
    for (int j = 0; j < kNumPatches; ++j) {
      backbone_forward_batch(params.l1, u[j], cache);
      linear_forward_batch(patch_head, cache.act, qj[j]);
      if (weight_head)
        linear_forward_batch(*weight_head, cache.act, rj[j]);
      else
        rj[j] = qj[j];
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (int j = 0; j < kNumPatches; ++j)
        for (std::size_t k = 0; k < q; ++k) {
          plog(j, k) = qj[j](i, k);
          wlog(j, k) = rj[j](i, k);
        }
      const Matrix w = patch_weights(wlog, cfg.tau);
      const std::vector<double> agg = aggregate_patch_logits(plog, w);
      const std::vector<double> fused = tde_fuse(p.row(i), agg, cfg.tde_lambda);
      for (std::size_t k = 0; k < q; ++k) {
        out.p(start + i, k) = p(i, k);
        out.qagg(start + i, k) = agg[k];
        out.tde(start + i, k) = fused[k];
      }
    }
  }
  return out;
}

inline std::vector<std::uint8_t> dataset_labels(const Dataset& ds) {
  std::vector<std::uint8_t> y;
  y.reserve(ds.size() * ds.classes);
  for (const SceneExample& ex : ds.examples) y.insert(y.end(), ex.labels.begin(), ex.labels.end());
  return y;
}

/// Every-image-identical class-marginal predictor, the prior-only baseline.
inline Matrix marginal_baseline_scores(const Dataset& train, std::size_t n_rows) {
  const std::vector<double> m = label_marginals(train);
  Matrix s(n_rows, train.classes);
  for (std::size_t i = 0; i < n_rows; ++i)
    for (std::size_t k = 0; k < train.classes; ++k) s(i, k) = m[k];
  return s;
}

// ---------------------------------------------------------------------------
// DeT training (also the per-class engine behind InT).

namespace detail {

inline double warmup_lr(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.warmup_steps == 0) return cfg.lr;
  const double f = std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps);
  return cfg.lr * f;
}

/// Labels handed to the loop: either the full vector or one class of it.
struct LabelView {
  const Dataset* ds = nullptr;
  std::int64_t only_class = -1;  // -1 = all classes
  std::size_t width() const { return only_class < 0 ? ds->classes : 1; }
  void fetch(std::span<const std::size_t> idx, std::vector<std::uint8_t>& y) const {
    y.resize(idx.size() * width());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& lab = ds->examples[idx[i]].labels;
      if (only_class < 0)
        std::copy(lab.begin(), lab.end(), y.begin() + i * lab.size());
      else
        y[i] = lab[static_cast<std::size_t>(only_class)];
    }
  }
};

struct DetRunResult {
  ModelParams params;
  std::vector<TrainLogRow> log;
  MetricsSnapshot metrics;
};

inline DetRunResult run_det_like(const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                                 std::uint64_t root_seed, std::uint32_t hidden,
                                 const LabelView& labels) {
  cfg.validate();
  if (train.size() == 0) throw TrainError("train_det: empty dataset");
  const std::uint32_t q_out = static_cast<std::uint32_t>(labels.width());
  Rng rng_init(derive_seed(root_seed, "init"));
  Rng rng_shuffle(derive_seed(root_seed, "shuffle"));
  ModelParams params = make_shared_model(train.side, hidden, q_out, ModelMode::Det, rng_init);
  AdamState adam = AdamState::like(params);
  ModelGrads grads = zeros_like(params);
  ModelParams ema = params;
  const bool use_ema = cfg.ema_decay > 0.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Matrix x, p, dp;
  std::vector<std::uint8_t> ybuf;
  BackboneCache cache;
  DetRunResult res;
  std::uint64_t step = 0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng_shuffle.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train.size(); start += cfg.batch) {
      const std::size_t stop = std::min(train.size(), start + cfg.batch);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      fill_batch(train, idx, x, ybuf);
      labels.fetch(idx, ybuf);
      backbone_forward_batch(params.l1, x, cache);
      linear_forward_batch(params.head_phi, cache.act, p);
      dp.rows = p.rows;
      dp.cols = p.cols;
      dp.v.assign(p.v.size(), 0.0);
      double batch_loss = 0.0;
      const double inv_b = 1.0 / static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const LossResult lr = loss_eval(cfg.loss, p.row(i),
                                        std::span<const std::uint8_t>(ybuf.data() + i * q_out, q_out));
        batch_loss += lr.value;
        for (std::size_t k = 0; k < q_out; ++k) dp(i, k) = lr.grad[k] * inv_b;
      }
      if (!std::isfinite(batch_loss))
        throw TrainError("train: non-finite loss at step " + std::to_string(step));
      epoch_loss += batch_loss;
      for_each_array(grads, [](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
      HeadUpstream up;
      up.d_phi = &dp;
      backward(params, x, nullptr, cache, nullptr, up, grads);
      adam_step(params, grads, adam, warmup_lr(cfg, step));
      if (use_ema) ema_update(ema, params, cfg.ema_decay);
      ++step;
    }
    TrainLogRow row;
    row.epoch = epoch + 1;
    row.train_loss = epoch_loss / static_cast<double>(train.size());
    row.loss_image = row.train_loss;
    const bool last = epoch + 1 == cfg.epochs;
    if (test && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
      const ModelParams& eval_params = use_ema ? ema : params;
      PredictionSet ps;
      ps.scores = det_logits(eval_params, *test);
      if (labels.only_class >= 0) {
        // single-class run: score column vs that class's labels
        std::vector<std::uint8_t> lab(test->size());
        for (std::size_t i = 0; i < test->size(); ++i)
          lab[i] = test->examples[i].labels[static_cast<std::size_t>(labels.only_class)];
        std::vector<double> col(test->size());
        for (std::size_t i = 0; i < test->size(); ++i) col[i] = ps.scores(i, 0);
        bool any = false;
        for (std::uint8_t b : lab) any = any || b;
        row.test_map = any ? average_precision(col, lab) : std::numeric_limits<double>::quiet_NaN();
      } else {
        ps.labels = dataset_labels(*test);
        row.test_map = mean_average_precision(ps);
      }
    }
    res.log.push_back(row);
  }
  res.params = use_ema ? ema : params;
  res.metrics.final_train_loss = res.log.empty() ? 0.0 : res.log.back().train_loss;
  res.metrics.test_map = res.log.empty() ? std::numeric_limits<double>::quiet_NaN()
                                         : res.log.back().test_map;
  return res;
}

}  // namespace detail

inline Checkpoint train_det(const Dataset& train, const Dataset* test, const TrainConfig& cfg) {
  detail::LabelView labels{&train, -1};
  detail::DetRunResult run = detail::run_det_like(train, test, cfg, cfg.seed, cfg.hidden, labels);
  Checkpoint ck;
  ck.params = std::move(run.params);
  ck.cfg = cfg;
  ck.epoch = cfg.epochs;
  ck.metrics = run.metrics;
  ck.log = std::move(run.log);
  return ck;
}

/// One independent binary model per class, each with its own backbone and
/// scalar head, trained on all examples against that class's labels.
inline std::vector<Checkpoint> train_int(const Dataset& train, const Dataset* test,
                                         const TrainConfig& cfg) {
  std::vector<Checkpoint> out;
  for (std::uint32_t k = 0; k < train.classes; ++k) {
    detail::LabelView labels{&train, static_cast<std::int64_t>(k)};
    const std::uint64_t class_seed = derive_seed(cfg.seed, "int-class", k);
    detail::DetRunResult run =
        detail::run_det_like(train, test, cfg, class_seed, cfg.int_hidden, labels);
    Checkpoint ck;
    ck.cfg = cfg;
    ck.epoch = cfg.epochs;
    ck.metrics = run.metrics;
    ck.log = std::move(run.log);
    ck.params.side = train.side;
    ck.params.hidden = cfg.int_hidden;
    ck.params.classes = train.classes;
    ck.params.mode = ModelMode::Int;
    ClassModel cm;
    cm.class_index = k;
    cm.l1 = std::move(run.params.l1);
    cm.head = std::move(run.params.head_phi);
    ck.params.per_class.push_back(std::move(cm));
    out.push_back(std::move(ck));
  }
  return out;
}

/// Stitches per-class InT checkpoints into an n x q logit matrix.
inline Matrix assemble_int_scores(std::span<const Checkpoint> checkpoints, const Dataset& ds) {
  if (checkpoints.empty()) throw ModelError("assemble_int_scores: no checkpoints");
  const std::size_t q = checkpoints.front().params.classes;
  Matrix scores(ds.size(), q);
  std::vector<bool> filled(q, false);
  Matrix x, p;
  std::vector<std::uint8_t> ybuf;
  BackboneCache cache;
  std::vector<std::size_t> idx;
  for (const Checkpoint& ck : checkpoints) {
    if (ck.params.mode != ModelMode::Int || ck.params.per_class.size() != 1)
      throw ModelError("assemble_int_scores: expected single-class InT checkpoints");
    const ClassModel& cm = ck.params.per_class.front();
    if (cm.class_index >= q || filled[cm.class_index])
      throw ModelError("assemble_int_scores: duplicate or out-of-range class");
    filled[cm.class_index] = true;
    const std::size_t batch = 256;
    for (std::size_t start = 0; start < ds.size(); start += batch) {
      const std::size_t stop = std::min(ds.size(), start + batch);
      idx.resize(stop - start);
      std::iota(idx.begin(), idx.end(), start);
      fill_batch(ds, idx, x, ybuf);
      backbone_forward_batch(cm.l1, x, cache);
      linear_forward_batch(cm.head, cache.act, p);
      for (std::size_t i = 0; i < idx.size(); ++i) scores(start + i, cm.class_index) = p(i, 0);
    }
  }
  for (std::size_t k = 0; k < q; ++k)
    if (!filled[k]) throw ModelError("assemble_int_scores: missing class " + std::to_string(k));
  return scores;
}

// ---------------------------------------------------------------------------
// PAT-T.

struct PatTStepLoss {
  double total = 0.0;
  double image_term = 0.0;
  double patch_term = 0.0;
};

/// Forward and backward pass of the two-term patching loss on one batch.
/// Fills `grads` (zeroed first) with gradients of the batch-MEAN loss; the
/// returned terms are batch sums. The weight head receives gradient only
/// through the softmax weighting path unless the auxiliary loss is enabled.
inline PatTStepLoss pat_t_forward_backward(const ModelParams& params, const Matrix& x,
                                           const std::array<Matrix, 4>& u,
                                           std::span<const std::uint8_t> y, const LossConfig& loss,
                                           const FusionConfig& fusion, bool aux_weight_loss,
                                           ModelGrads& grads) {
  fusion.validate();
  const std::size_t b = x.rows;
  const std::size_t q = params.classes;
  require_shape(y.size() == b * q, "pat_t_forward_backward: label shape");

  BackboneCache cimg;
  std::array<BackboneCache, 4> cp;
  Matrix p, qj[4], rj[4];
  backbone_forward_batch(params.l1, x, cimg);
  linear_forward_batch(params.head_phi, cimg.act, p);
  for (int j = 0; j < kNumPatches; ++j) {
    backbone_forward_batch(params.l1, u[j], cp[j]);
    linear_forward_batch(params.head_psi, cp[j].act, qj[j]);
    linear_forward_batch(params.head_theta, cp[j].act, rj[j]);
  }

  // per-class softmax over the patch axis, from the weight-head logits
  Matrix w[4];
  for (auto& m : w) m = Matrix(b, q);
  Matrix qagg(b, q), qwagg(b, q);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      double mx = rj[0](i, k);
      for (int j = 1; j < kNumPatches; ++j) mx = std::max(mx, rj[j](i, k));
      double denom = 0.0;
      double e[4];
      for (int j = 0; j < kNumPatches; ++j) {
        e[j] = std::exp((rj[j](i, k) - mx) / fusion.tau);
        denom += e[j];
      }
      double agg = 0.0, wagg = 0.0;
      for (int j = 0; j < kNumPatches; ++j) {
        const double wjk = e[j] / denom;
        w[j](i, k) = wjk;
        agg += wjk * qj[j](i, k);
        wagg += wjk * rj[j](i, k);
      }
      qagg(i, k) = agg;
      qwagg(i, k) = wagg;
    }
  }

  PatTStepLoss out;
  Matrix dp(b, q), da(b, q), daw;
  if (aux_weight_loss) daw = Matrix(b, q);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::span<const std::uint8_t> yi(y.data() + i * q, q);
    const LossResult li = loss_eval(loss, p.row(i), yi);
    const LossResult lp = loss_eval(loss, qagg.row(i), yi);
    out.image_term += li.value;
    out.patch_term += lp.value;
    for (std::size_t k = 0; k < q; ++k) {
      dp(i, k) = li.grad[k] * inv_b;
      da(i, k) = lp.grad[k] * inv_b;
    }
    if (aux_weight_loss) {
      const LossResult lw = loss_eval(loss, qwagg.row(i), yi);
      out.patch_term += lw.value;
      for (std::size_t k = 0; k < q; ++k) daw(i, k) = lw.grad[k] * inv_b;
    }
  }
  out.total = out.image_term + out.patch_term;

  // chain through the aggregation and the weight softmax
  Matrix dpsi[4], dtheta[4];
  for (auto& m : dpsi) m = Matrix(b, q);
  for (auto& m : dtheta) m = Matrix(b, q);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      double e[4];
      double sum_e = 0.0;
      for (int j = 0; j < kNumPatches; ++j) {
        e[j] = da(i, k) * qj[j](i, k);
        if (aux_weight_loss) e[j] += daw(i, k) * rj[j](i, k);
        sum_e += w[j](i, k) * e[j];
      }
      for (int j = 0; j < kNumPatches; ++j) {
        const double wjk = w[j](i, k);
        dpsi[j](i, k) = da(i, k) * wjk;
        double dt = wjk * (e[j] - sum_e) / fusion.tau;
        if (aux_weight_loss) dt += daw(i, k) * wjk;
        dtheta[j](i, k) = dt;
      }
    }
  }

  for_each_array(grads, [](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
  HeadUpstream up;
  up.d_phi = &dp;
  const Matrix* patch_ptr[4];
  for (int j = 0; j < kNumPatches; ++j) {
    patch_ptr[j] = &u[j];
    up.d_psi[j] = &dpsi[j];
    up.d_theta[j] = &dtheta[j];
  }
  backward(params, x, patch_ptr, cimg, cp.data(), up, grads);
  return out;
}

/// One optimizer step of PAT-T on a batch of examples.
inline PatTStepLoss pat_t_step(ModelParams& params, const Matrix& x, const std::array<Matrix, 4>& u,
                               std::span<const std::uint8_t> y, const TrainConfig& cfg,
                               const FusionConfig& fusion, bool aux_weight_loss, AdamState& adam,
                               ModelGrads& grads, double lr) {
  const PatTStepLoss l =
      pat_t_forward_backward(params, x, u, y, cfg.loss, fusion, aux_weight_loss, grads);
  if (!std::isfinite(l.total))
    throw TrainError("pat_t_step: non-finite loss at step " + std::to_string(adam.t));
  adam_step(params, grads, adam, lr);
  return l;
}

inline Checkpoint pat_t_train(const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                              const FusionConfig& fusion, bool aux_weight_loss = false) {
  cfg.validate();
  fusion.validate();
  if (train.size() == 0) throw TrainError("pat_t_train: empty dataset");
  Rng rng_init(derive_seed(cfg.seed, "init"));
  Rng rng_shuffle(derive_seed(cfg.seed, "shuffle"));
  ModelParams params =
      make_shared_model(train.side, cfg.hidden, train.classes, ModelMode::PatT, rng_init);
  AdamState adam = AdamState::like(params);
  ModelGrads grads = zeros_like(params);
  ModelParams ema = params;
  const bool use_ema = cfg.ema_decay > 0.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Matrix x;
  std::array<Matrix, 4> u;
  std::vector<std::uint8_t> ybuf;
  Checkpoint ck;
  std::uint64_t step = 0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng_shuffle.shuffle(order);
    double epoch_total = 0.0, epoch_img = 0.0, epoch_patch = 0.0;
    for (std::size_t start = 0; start < train.size(); start += cfg.batch) {
      const std::size_t stop = std::min(train.size(), start + cfg.batch);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      fill_batch(train, idx, x, ybuf);
      fill_patch_batches(x, train.side, u);
      const PatTStepLoss l = pat_t_step(params, x, u, ybuf, cfg, fusion, aux_weight_loss, adam,
                                        grads, detail::warmup_lr(cfg, step));
      epoch_total += l.total;
      epoch_img += l.image_term;
      epoch_patch += l.patch_term;
      if (use_ema) ema_update(ema, params, cfg.ema_decay);
      ++step;
    }
    TrainLogRow row;
    row.epoch = epoch + 1;
    const double n = static_cast<double>(train.size());
    row.train_loss = epoch_total / n;
    row.loss_image = epoch_img / n;
    row.loss_patch = epoch_patch / n;
    const bool last = epoch + 1 == cfg.epochs;
    if (test && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
      const ModelParams& eval_params = use_ema ? ema : params;
      const FusedScores fs = fused_scores(eval_params, *test, fusion);
      PredictionSet ps;
      ps.scores = fs.tde;
      ps.scores_are_logits = false;
      ps.labels = dataset_labels(*test);
      row.test_map = mean_average_precision(ps);
    }
    ck.log.push_back(row);
  }
  ck.params = use_ema ? std::move(ema) : std::move(params);
  ck.cfg = cfg;
  ck.fusion = fusion;
  ck.aux_weight_loss = aux_weight_loss;
  ck.epoch = cfg.epochs;
  ck.metrics.final_train_loss = ck.log.back().train_loss;
  ck.metrics.test_map = ck.log.back().test_map;
  return ck;
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "PATC", version, dims (S, H, q, mode), parameter
// arrays as little-endian f64 in declared order, then the training
// configuration, epoch and metrics snapshot. Readers reject unknown versions.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("PATC", 4);
  write_u32(os, kCheckpointVersion);
  const ModelParams& p = ck.params;
  write_u32(os, p.side);
  write_u32(os, p.hidden);
  write_u32(os, p.classes);
  write_u32(os, static_cast<std::uint32_t>(p.mode));
  if (p.mode == ModelMode::Int) {
    write_u32(os, static_cast<std::uint32_t>(p.per_class.size()));
    for (const ClassModel& cm : p.per_class) write_u32(os, cm.class_index);
  }
  for_each_array(p, [&](const std::vector<double>& a) { write_f64_span(os, a); });
  const TrainConfig& c = ck.cfg;
  write_f64(os, c.lr);
  write_u32(os, c.epochs);
  write_u32(os, c.batch);
  write_u64(os, c.seed);
  write_f64(os, c.ema_decay);
  write_u32(os, c.warmup_steps);
  write_u32(os, c.hidden);
  write_u32(os, c.int_hidden);
  write_u32(os, c.eval_every);
  write_u32(os, static_cast<std::uint32_t>(c.loss.kind));
  write_f64(os, c.loss.gamma_pos);
  write_f64(os, c.loss.gamma_neg);
  write_f64(os, c.loss.clip);
  write_f64(os, c.loss.eps_log);
  write_f64(os, ck.fusion.tau);
  write_f64(os, ck.fusion.tde_lambda);
  write_u32(os, static_cast<std::uint32_t>(ck.fusion.weight_source));
  write_u32(os, ck.aux_weight_loss ? 1 : 0);
  write_u32(os, ck.epoch);
  write_f64(os, ck.metrics.final_train_loss);
  write_f64(os, ck.metrics.test_map);
  if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PATC") throw IoError("not a checkpoint file: " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  Checkpoint ck;
  ModelParams& p = ck.params;
  p.side = read_u32(is);
  p.hidden = read_u32(is);
  p.classes = read_u32(is);
  p.mode = static_cast<ModelMode>(read_u32(is));
  const std::size_t d = p.input_dim();
  if (p.mode == ModelMode::Int) {
    const std::uint32_t n_models = read_u32(is);
    p.per_class.resize(n_models);
    for (ClassModel& cm : p.per_class) {
      cm.class_index = read_u32(is);
      cm.l1 = Linear(p.hidden, d);
      cm.head = Linear(1, p.hidden);
    }
  } else {
    p.l1 = Linear(p.hidden, d);
    p.head_phi = Linear(p.classes, p.hidden);
    p.head_psi = Linear(p.classes, p.hidden);
    p.head_theta = Linear(p.classes, p.hidden);
  }
  for_each_array(p, [&](std::vector<double>& a) { read_f64_span(is, a); });
  TrainConfig& c = ck.cfg;
  c.lr = read_f64(is);
  c.epochs = read_u32(is);
  c.batch = read_u32(is);
  c.seed = read_u64(is);
  c.ema_decay = read_f64(is);
  c.warmup_steps = read_u32(is);
  c.hidden = read_u32(is);
  c.int_hidden = read_u32(is);
  c.eval_every = read_u32(is);
  c.loss.kind = static_cast<LossKind>(read_u32(is));
  c.loss.gamma_pos = read_f64(is);
  c.loss.gamma_neg = read_f64(is);
  c.loss.clip = read_f64(is);
  c.loss.eps_log = read_f64(is);
  ck.fusion.tau = read_f64(is);
  ck.fusion.tde_lambda = read_f64(is);
  ck.fusion.weight_source = static_cast<WeightSource>(read_u32(is));
  ck.aux_weight_loss = read_u32(is) != 0;
  ck.epoch = read_u32(is);
  ck.metrics.final_train_loss = read_f64(is);
  ck.metrics.test_map = read_f64(is);
  if (!is) throw IoError("truncated checkpoint: " + path);
  return ck;
}

}  // namespace pat
