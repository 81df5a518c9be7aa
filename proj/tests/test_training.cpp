#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "oracles.hpp"
#include "pat/training.hpp"

using pat::Dataset;
using pat::FusionConfig;
using pat::Matrix;
using pat::ModelParams;
using pat::TrainConfig;

namespace {

Dataset random_dataset(std::size_t n, std::uint32_t side, std::uint32_t classes,
                       std::uint64_t seed, double positive_rate = 0.5) {
  Dataset ds;
  ds.side = side;
  ds.classes = classes;
  ds.split = "synthetic";
  ds.seed = seed;
  ds.examples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    pat::Rng rng(pat::derive_seed(seed, "ex", i));
    auto& ex = ds.examples[i];
    ex.image.resize(static_cast<std::size_t>(side) * side);
    for (float& p : ex.image) p = static_cast<float>(rng.uniform());
    ex.labels.resize(classes);
    for (auto& b : ex.labels) b = rng.bernoulli(positive_rate);
  }
  return ds;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// batch-mean loss, the quantity the returned gradients differentiate
double pat_t_loss_value(const ModelParams& p, const Matrix& x, const std::array<Matrix, 4>& u,
                        std::span<const std::uint8_t> y, const pat::LossConfig& loss,
                        const FusionConfig& fusion, bool aux) {
  pat::ModelGrads scratch = pat::zeros_like(p);
  return pat_t_forward_backward(p, x, u, y, loss, fusion, aux, scratch).total /
         static_cast<double>(x.rows);
}

}  // namespace

TEST_CASE("constant images give uniform weights and aggregation equals any patch") {
  pat::Rng rng(81);
  ModelParams p = pat::make_shared_model(8, 16, 4, pat::ModelMode::PatT, rng);
  Matrix x(1, 64, 0.42);  // constant image -> identical patches
  std::array<Matrix, 4> u;
  pat::fill_patch_batches(x, 8, u);
  for (int j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < u[j].v.size(); ++i)
      REQUIRE(u[j].v[i] == Catch::Approx(0.42).margin(1e-12));
  const std::vector<std::uint8_t> y = {1, 0, 1, 0};
  pat::ModelGrads g = pat::zeros_like(p);
  // run the forward path via fused_scores on a one-image dataset
  Dataset ds;
  ds.side = 8;
  ds.classes = 4;
  ds.examples.resize(1);
  ds.examples[0].image.assign(64, 0.42f);
  ds.examples[0].labels = y;
  const pat::FusedScores fs = pat::fused_scores(p, ds, FusionConfig{});
  const std::vector<double> h = pat::backbone_forward(p.l1, u[0].row(0));
  const std::vector<double> q0 = pat::head_forward(p.head_psi, h);
  for (std::size_t k = 0; k < 4; ++k)
    REQUIRE(fs.qagg(0, k) == Catch::Approx(q0[k]).margin(1e-9));
}

TEST_CASE("zero-initialized heads start at twice q ln 2 under bce") {
  pat::Rng rng(82);
  ModelParams p = pat::make_shared_model(8, 16, 4, pat::ModelMode::PatT, rng);
  for (auto* head : {&p.head_phi, &p.head_psi, &p.head_theta}) {
    std::fill(head->w.v.begin(), head->w.v.end(), 0.0);
    std::fill(head->b.begin(), head->b.end(), 0.0);
  }
  const Dataset ds = random_dataset(3, 8, 4, 82);
  Matrix x;
  std::array<Matrix, 4> u;
  std::vector<std::uint8_t> y;
  const std::vector<std::size_t> idx = {0, 1, 2};
  pat::fill_batch(ds, idx, x, y);
  pat::fill_patch_batches(x, 8, u);
  pat::ModelGrads g = pat::zeros_like(p);
  const pat::PatTStepLoss l =
      pat_t_forward_backward(p, x, u, y, pat::LossConfig::bce(), FusionConfig{}, false, g);
  REQUIRE(l.total / 3.0 == Catch::Approx(2.0 * 4.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss decomposes exactly into image and patch terms") {
  pat::Rng rng(83);
  ModelParams p = pat::make_shared_model(8, 16, 4, pat::ModelMode::PatT, rng);
  const Dataset ds = random_dataset(5, 8, 4, 83);
  Matrix x;
  std::array<Matrix, 4> u;
  std::vector<std::uint8_t> y;
  const std::vector<std::size_t> idx = {0, 1, 2, 3, 4};
  pat::fill_batch(ds, idx, x, y);
  pat::fill_patch_batches(x, 8, u);
  pat::ModelGrads g = pat::zeros_like(p);
  const pat::PatTStepLoss l =
      pat_t_forward_backward(p, x, u, y, pat::LossConfig::asl_default(), FusionConfig{}, false, g);
  REQUIRE(l.total == l.image_term + l.patch_term);
  REQUIRE(l.image_term > 0.0);
  REQUIRE(l.patch_term > 0.0);
}

TEST_CASE("full patching loss gradients match finite differences, including the weight head") {
  pat::Rng rng(84);
  const double h_step = 1e-5;
  int done = 0;
  std::uint64_t seed = 900;
  while (done < 6) {
    pat::Rng init(seed++);
    ModelParams p = pat::make_shared_model(8, 16, 4, pat::ModelMode::PatT, init);
    const Dataset ds = random_dataset(2, 8, 4, seed);
    Matrix x;
    std::array<Matrix, 4> u;
    std::vector<std::uint8_t> y;
    const std::vector<std::size_t> idx = {0, 1};
    pat::fill_batch(ds, idx, x, y);
    pat::fill_patch_batches(x, 8, u);
    const bool aux = done == 5;  // one trial exercises the auxiliary weight loss
    const FusionConfig fusion{rng.uniform(0.5, 2.0), 1.0, pat::WeightSource::ThetaHead};

    // reject draws that sit on the rectifier kink
    pat::BackboneCache c;
    bool near = false;
    pat::backbone_forward_batch(p.l1, x, c);
    for (double v : c.pre.v) near = near || std::abs(v) < 1e-4;
    for (int j = 0; j < 4; ++j) {
      pat::backbone_forward_batch(p.l1, u[j], c);
      for (double v : c.pre.v) near = near || std::abs(v) < 1e-4;
    }
    if (near) continue;

    pat::ModelGrads grads = pat::zeros_like(p);
    pat_t_forward_backward(p, x, u, y, pat::LossConfig::bce(), fusion, aux, grads);

    std::vector<std::vector<double>*> params, analytic;
    pat::for_each_array(p, [&](std::vector<double>& a) { params.push_back(&a); });
    pat::for_each_array(grads, [&](std::vector<double>& a) { analytic.push_back(&a); });
    double worst = 0.0;
    for (std::size_t a = 0; a < params.size(); ++a) {
      // head_theta is the last pair of arrays; sample it densely, the rest sparsely
      const bool theta = a >= params.size() - 2;
      const std::size_t stride = theta ? 1 : 9;
      for (std::size_t i = 0; i < params[a]->size(); i += stride) {
        double& w = (*params[a])[i];
        const double fd = oracle::central_diff(
            [&] { return pat_t_loss_value(p, x, u, y, pat::LossConfig::bce(), fusion, aux); }, w,
            h_step);
        worst = std::max(worst, oracle::rel_err((*analytic[a])[i], fd));
      }
    }
    INFO("trial " << done << " worst rel err " << worst);
    REQUIRE(worst < 1e-4);
    ++done;
  }
}

TEST_CASE("det training reduces the loss and is reproducible bit for bit") {
  const Dataset train = random_dataset(32, 8, 3, 85);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 5;
  cfg.batch = 8;
  cfg.seed = 7;
  cfg.hidden = 16;
  cfg.eval_every = 0;
  cfg.loss = pat::LossConfig::bce();
  const pat::Checkpoint a = pat::train_det(train, nullptr, cfg);
  REQUIRE(a.log.size() == 5);
  REQUIRE(a.log.back().train_loss < a.log.front().train_loss);
  const pat::Checkpoint b = pat::train_det(train, nullptr, cfg);
  std::vector<const std::vector<double>*> aa, bb;
  pat::for_each_array(a.params, [&](const std::vector<double>& v) { aa.push_back(&v); });
  pat::for_each_array(b.params, [&](const std::vector<double>& v) { bb.push_back(&v); });
  for (std::size_t i = 0; i < aa.size(); ++i) REQUIRE(*aa[i] == *bb[i]);
}

TEST_CASE("eight examples overfit below 0.05 in 500 steps at lr 1e-2") {
  const Dataset train = random_dataset(8, 8, 4, 86);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 500;  // batch = dataset, so one step per epoch
  cfg.batch = 8;
  cfg.seed = 3;
  cfg.hidden = 32;
  cfg.eval_every = 0;
  cfg.loss = pat::LossConfig::bce();
  const pat::Checkpoint ck = pat::train_det(train, nullptr, cfg);
  REQUIRE(ck.metrics.final_train_loss < 0.05);
}

TEST_CASE("a class with no positive training labels predicts below one half everywhere") {
  Dataset train = random_dataset(40, 8, 3, 87);
  Dataset test = random_dataset(20, 8, 3, 88);
  for (auto& ex : train.examples) ex.labels[1] = 0;
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 20;
  cfg.batch = 8;
  cfg.seed = 4;
  cfg.int_hidden = 8;
  cfg.eval_every = 0;
  cfg.loss = pat::LossConfig::bce();
  const std::vector<pat::Checkpoint> cks = pat::train_int(train, nullptr, cfg);
  REQUIRE(cks.size() == 3);
  const Matrix scores = pat::assemble_int_scores(cks, test);
  REQUIRE(scores.rows == 20);
  REQUIRE(scores.cols == 3);  // same shape contract as DeT predictions
  for (std::size_t i = 0; i < 20; ++i) REQUIRE(pat::sigmoid(scores(i, 1)) < 0.5);
}

TEST_CASE("pat-t training runs, logs both loss terms, and lambda zero recovers the image head") {
  const Dataset train = random_dataset(24, 8, 3, 89);
  const Dataset test = random_dataset(12, 8, 3, 90);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 3;
  cfg.batch = 8;
  cfg.seed = 5;
  cfg.hidden = 16;
  cfg.eval_every = 0;
  cfg.loss = pat::LossConfig::bce();
  FusionConfig fusion;
  const pat::Checkpoint ck = pat::pat_t_train(train, &test, cfg, fusion);
  REQUIRE(ck.params.mode == pat::ModelMode::PatT);
  for (const auto& row : ck.log) {
    REQUIRE(std::abs(row.train_loss - (row.loss_image + row.loss_patch)) < 1e-12);
  }
  FusionConfig lam0 = fusion;
  lam0.tde_lambda = 0.0;
  const pat::FusedScores fs = pat::fused_scores(ck.params, test, lam0);
  const Matrix plain = pat::det_logits(ck.params, test);
  for (std::size_t i = 0; i < fs.tde.v.size(); ++i)
    REQUIRE(fs.tde.v[i] == pat::sigmoid(plain.v[i]));
}

TEST_CASE("batched fused scores agree with per-example inference") {
  pat::Rng rng(91);
  ModelParams p = pat::make_shared_model(8, 16, 3, pat::ModelMode::PatT, rng);
  const Dataset ds = random_dataset(7, 8, 3, 91);
  FusionConfig fusion;
  fusion.tau = 0.7;
  fusion.tde_lambda = 1.3;
  const pat::FusedScores fs = pat::fused_scores(p, ds, fusion);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> img(ds.examples[i].image.begin(), ds.examples[i].image.end());
    const pat::LogitBundle b = pat::pat_t_infer(p, img, fusion);
    for (std::size_t k = 0; k < 3; ++k) {
      REQUIRE(fs.p(i, k) == Catch::Approx(b.image_logits[k]).margin(1e-10));
      REQUIRE(fs.qagg(i, k) == Catch::Approx(b.agg_logits[k]).margin(1e-10));
      REQUIRE(fs.tde(i, k) == Catch::Approx(b.tde[k]).margin(1e-12));
    }
  }
}

TEST_CASE("checkpoints round-trip bit-exactly through the file format") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pat_ckpt_test";
  fs::create_directories(dir);
  const Dataset train = random_dataset(16, 8, 3, 92);
  TrainConfig cfg;
  cfg.lr = 2e-3;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = 6;
  cfg.hidden = 16;
  cfg.eval_every = 0;
  const pat::Checkpoint ck = pat::train_det(train, nullptr, cfg);
  const std::string p1 = (dir / "a.patc").string();
  const std::string p2 = (dir / "b.patc").string();
  pat::save_checkpoint(ck, p1);
  const pat::Checkpoint loaded = pat::load_checkpoint(p1);
  pat::save_checkpoint(loaded, p2);
  REQUIRE(slurp(p1) == slurp(p2));
  REQUIRE(loaded.cfg.lr == cfg.lr);
  REQUIRE(loaded.cfg.seed == cfg.seed);
  REQUIRE(loaded.params.mode == pat::ModelMode::Det);

  // InT checkpoints too
  TrainConfig icfg = cfg;
  icfg.int_hidden = 8;
  const std::vector<pat::Checkpoint> cks = pat::train_int(train, nullptr, icfg);
  const std::string p3 = (dir / "int.patc").string();
  const std::string p4 = (dir / "int2.patc").string();
  pat::save_checkpoint(cks[1], p3);
  pat::save_checkpoint(pat::load_checkpoint(p3), p4);
  REQUIRE(slurp(p3) == slurp(p4));
  const pat::Checkpoint li = pat::load_checkpoint(p3);
  REQUIRE(li.params.mode == pat::ModelMode::Int);
  REQUIRE(li.params.per_class.size() == 1);
  REQUIRE(li.params.per_class[0].class_index == 1);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint reader rejects other files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pat_ckpt_bad";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "junk.patc", std::ios::binary);
    os.write("JUNK", 4);
  }
  REQUIRE_THROWS_AS(pat::load_checkpoint((dir / "junk.patc").string()), pat::IoError);
  fs::remove_all(dir);
}

TEST_CASE("ema-enabled training evaluates and stores the averaged parameters") {
  const Dataset train = random_dataset(16, 8, 3, 93);
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = 8;
  cfg.hidden = 16;
  cfg.eval_every = 0;
  cfg.ema_decay = 0.999;  // heavy smoothing: stays close to the init
  const pat::Checkpoint ema_ck = pat::train_det(train, nullptr, cfg);
  cfg.ema_decay = 0.0;
  const pat::Checkpoint raw_ck = pat::train_det(train, nullptr, cfg);
  // same seed, same steps, different stored parameters
  bool differ = false;
  std::vector<const std::vector<double>*> aa, bb;
  pat::for_each_array(ema_ck.params, [&](const std::vector<double>& v) { aa.push_back(&v); });
  pat::for_each_array(raw_ck.params, [&](const std::vector<double>& v) { bb.push_back(&v); });
  for (std::size_t i = 0; i < aa.size(); ++i) differ = differ || (*aa[i] != *bb[i]);
  REQUIRE(differ);
}
