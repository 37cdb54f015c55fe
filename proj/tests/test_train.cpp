#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "brainmt/train.hpp"
#include "gradcheck.hpp"

using namespace brainmt;
using namespace brainmt::testing;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.H = c.W = c.D = 32;
  c.T = 2;
  c.C = 2;  // Z = 8
  c.mamba_layers = 1;
  c.transformer_layers = 1;
  c.epochs = 4;
  c.warmup_epochs = 1;
  c.patience = 2;
  return c;
}

std::vector<Subject> micro_dataset(int n, uint64_t seed, int T_total = 4) {
  SyntheticConfig sc;
  sc.n_subjects = n;
  sc.H = sc.W = sc.D = 32;
  sc.T_total = T_total;
  sc.seed = seed;
  auto subjects = generate_synthetic_dataset(sc);
  for (auto& s : subjects) s.volume = zscore_normalize(s.volume);
  return subjects;
}

}  // namespace

TEST_CASE("loss examples") {
  Graph g;
  Tensor pred = Tensor::scalar(1.37, true);
  Tensor l = mse_loss(g, pred, 1.37);
  CHECK(l.value() == 0.0);

  Tensor logit = Tensor::scalar(0.0, true);
  CHECK(bce_with_logit_loss(g, logit, 0.0).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_with_logit_loss(g, logit, 1.0).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));

  // BCE gradient wrt the logit is sigmoid(logit) - label.
  for (double x : {-3.0, -0.5, 0.0, 1.2, 8.0}) {
    for (double y : {0.0, 1.0}) {
      Tensor lg = Tensor::scalar(x, true);
      Graph gb;
      Tensor loss = bce_with_logit_loss(gb, lg, y);
      lg.zero_grad();
      gb.backward(loss);
      double sg = 1.0 / (1.0 + std::exp(-x));
      CHECK(lg.grad()[0] == doctest::Approx(sg - y).epsilon(1e-12));
    }
  }
  // and against finite differences
  Tensor lg = Tensor::scalar(0.37, true);
  auto res = grad_check(
      [](Graph& g2, std::vector<Tensor>& v) { return bce_with_logit_loss(g2, v[0], 1.0); },
      {lg});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("lr schedule anchors") {
  // 100 steps, 20 warmup, base 2e-4
  CHECK(lr_schedule(0, 100, 20, 2e-4) == 0.0);
  CHECK(lr_schedule(20, 100, 20, 2e-4) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_schedule(60, 100, 20, 2e-4) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_schedule(100, 100, 20, 2e-4) == 0.0);
  CHECK(lr_schedule(5000, 100, 20, 2e-4) == 0.0);  // clamp past the end
}

TEST_CASE("regression metric examples") {
  auto m = evaluate_regression({1, 2, 3}, {1, 2, 3});
  CHECK(m.mse == 0.0);
  CHECK(m.mae == 0.0);
  CHECK(m.r == doctest::Approx(1.0));

  auto anti = evaluate_regression({3, 2, 1}, {-3, -2, -1});
  CHECK(anti.r == doctest::Approx(-1.0));

  auto hand = evaluate_regression({0, 1, 2}, {0, 2, 4});
  CHECK(hand.mse == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  CHECK(hand.mae == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(hand.r == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("classification metric examples") {
  auto perfect = evaluate_classification({5, -4, 3, -2}, {1, 0, 1, 0});
  CHECK(perfect.acc == 1.0);
  CHECK(perfect.bacc == 1.0);
  CHECK(perfect.auroc == 1.0);

  // constant logit on a balanced set: all ties
  auto flat = evaluate_classification({0, 0, 0, 0}, {1, 0, 1, 0});
  CHECK(flat.bacc == 0.5);
  CHECK(flat.auroc == 0.5);

  auto ranked = evaluate_classification({3, 2, 1, 0}, {1, 0, 1, 0});
  CHECK(ranked.auroc == doctest::Approx(0.75));
}

TEST_CASE("AdamW weight decay changes parameter norms") {
  auto dataset = micro_dataset(4, 3);
  DatasetSplit split;
  for (const auto& s : dataset) split.train.push_back(s.id);

  auto run = [&](double wd) {
    ModelConfig cfg = micro_config();
    cfg.weight_decay = wd;
    cfg.lr = 1e-3;
    cfg.epochs = 5;
    TrainOptions opt;
    opt.max_steps = 10;
    TrainResult tr = train_model(dataset, split, cfg, opt);
    double norm = 0;
    for (const auto& t : tr.best_params)
      for (double v : t) norm += v * v;
    return std::sqrt(norm);
  };
  double n0 = run(0.0);
  double n5 = run(0.05);
  CHECK(n0 != n5);
  CHECK(n5 < n0);  // decay shrinks weights
}

TEST_CASE("training runs are deterministic under a fixed seed") {
  auto dataset = micro_dataset(4, 5);
  auto split = make_splits({dataset[0].id, dataset[1].id, dataset[2].id, dataset[3].id}, 0);
  ModelConfig cfg = micro_config();
  cfg.epochs = 2;
  TrainOptions opt;
  opt.run_seed = 17;
  TrainResult a = train_model(dataset, split, cfg, opt);
  TrainResult b = train_model(dataset, split, cfg, opt);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss == b.history[i].loss);
    CHECK(a.history[i].m3 == b.history[i].m3);
  }
  CHECK(a.best_params == b.best_params);
}

TEST_CASE("micro overfit: training loss shrinks substantially") {
  auto dataset = micro_dataset(2, 11);
  DatasetSplit split;
  split.train = {dataset[0].id, dataset[1].id};
  ModelConfig cfg = micro_config();
  cfg.epochs = 40;
  cfg.warmup_epochs = 2;
  cfg.lr = 3e-3;
  TrainOptions opt;
  opt.fixed_windows = true;
  TrainResult tr = train_model(dataset, split, cfg, opt);
  double first = tr.history.front().loss;
  double best = HUGE_VAL;
  for (const auto& row : tr.history)
    if (row.split == "train") best = std::min(best, row.loss);
  CHECK(best < 0.3 * first);
}

TEST_CASE("early stopping keeps the best-validation checkpoint") {
  auto dataset = micro_dataset(6, 13);
  std::vector<std::string> ids;
  for (const auto& s : dataset) ids.push_back(s.id);
  DatasetSplit split;
  split.train = {ids[0], ids[1], ids[2], ids[3]};
  split.val = {ids[4], ids[5]};
  ModelConfig cfg = micro_config();
  cfg.epochs = 6;
  cfg.patience = 2;
  TrainResult tr = train_model(dataset, split, cfg, {});
  CHECK(tr.best_epoch >= 0);
  CHECK(std::isfinite(tr.best_val_loss));
  // best val loss matches the minimum recorded val row
  double min_val = HUGE_VAL;
  for (const auto& row : tr.history)
    if (row.split == "val") min_val = std::min(min_val, row.loss);
  CHECK(tr.best_val_loss == doctest::Approx(min_val));
}

TEST_CASE("checkpoint round trip is bit-identical") {
  ModelConfig cfg = micro_config();
  cfg.seed = 99;
  BrainMT model(cfg);
  fs::path path = fs::temp_directory_path() / "brainmt_ckpt_test.bmt";
  save_checkpoint(path.string(), cfg, model.params());
  Checkpoint ck = load_checkpoint(path.string());
  CHECK(ck.cfg.to_json() == cfg.to_json());
  BrainMT back = model_from_checkpoint(ck);
  REQUIRE(back.params().size() == model.params().size());
  for (size_t i = 0; i < back.params().size(); ++i) {
    CHECK(back.params()[i].name == model.params()[i].name);
    CHECK(back.params()[i].tensor.data() == model.params()[i].tensor.data());
  }
  fs::remove(path);

  // corrupted magic is rejected
  fs::path bad = fs::temp_directory_path() / "brainmt_bad_ckpt.bmt";
  std::ofstream(bad.string()) << "garbage";
  CHECK_THROWS_AS(load_checkpoint(bad.string()), IoError);
  fs::remove(bad);
}

TEST_CASE("metrics csv layout") {
  fs::path path = fs::temp_directory_path() / "brainmt_metrics_test.csv";
  std::vector<MetricRow> rows{{0, "train", 0.5, 0, 0, 0}, {0, "val", 0.75, 0.7, 0.6, 0.1}};
  write_metrics_csv(path.string(), Task::regression, rows);
  std::ifstream f(path.string());
  std::string header;
  std::getline(f, header);
  CHECK(header == "epoch,split,loss,mse,mae,pearson_r");
  fs::remove(path);
}

TEST_CASE("cross-validation covers each subject once per repeat") {
  auto dataset = micro_dataset(6, 21);
  ModelConfig cfg = micro_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  TrainOptions opt;
  opt.max_steps = 2;
  CvResult cv = run_cv(dataset, cfg, 3, 2, opt);
  REQUIRE(cv.runs.size() == 6);

  // same seed -> identical aggregate
  CvResult cv2 = run_cv(dataset, cfg, 3, 2, opt);
  for (int k = 0; k < 4; ++k) {
    CHECK(cv.mean[k] == cv2.mean[k]);
    CHECK(cv.std_all[k] == cv2.std_all[k]);
  }

  // constant metric -> zero std
  CvResult fake;
  fake.task = Task::regression;
  for (int rep = 0; rep < 2; ++rep)
    for (int fold = 0; fold < 3; ++fold)
      fake.runs.push_back({rep, fold, 1.5, 2.5, 3.5, 0.5});
  // reuse the aggregation by writing it through run_cv's public pieces:
  // emulate by direct computation here
  double mu = 0;
  for (auto& r : fake.runs) mu += r.loss;
  mu /= fake.runs.size();
  double var = 0;
  for (auto& r : fake.runs) var += (r.loss - mu) * (r.loss - mu);
  CHECK(var == 0.0);
}

TEST_CASE("cv csv layout") {
  CvResult cv;
  cv.task = Task::regression;
  cv.runs.push_back({0, 0, 1.0, 1.0, 0.8, 0.3});
  cv.runs.push_back({0, 1, 1.2, 1.2, 0.9, 0.2});
  fs::path runs = fs::temp_directory_path() / "brainmt_cv_runs.csv";
  fs::path summary = fs::temp_directory_path() / "brainmt_cv_summary.csv";
  write_cv_csv(runs.string(), summary.string(), cv);
  std::ifstream f(runs.string());
  std::string header;
  std::getline(f, header);
  CHECK(header == "repeat,fold,loss,mse,mae,pearson_r");
  std::ifstream fs2(summary.string());
  std::getline(fs2, header);
  CHECK(header == "metric,mean,std_across_folds,std_across_runs");
  fs::remove(runs);
  fs::remove(summary);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  auto dataset = micro_dataset(2, 31);
  DatasetSplit split;
  split.train = {dataset[0].id, dataset[1].id};
  ModelConfig cfg = micro_config();
  cfg.lr = 1e18;  // force divergence
  cfg.epochs = 50;
  CHECK_THROWS_AS(train_model(dataset, split, cfg, {}), NumericError);
}
