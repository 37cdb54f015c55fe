// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Individual criteria can be selected by number on the
// command line, e.g. `acceptance 1 4 8`.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "brainmt/attribution.hpp"
#include "brainmt/bench.hpp"
#include "brainmt/train.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace brainmt;
using namespace brainmt::testing;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const char* name, bool pass, const std::string& detail,
            double seconds) {
  std::printf("[%s] criterion %2d: %-34s %s (%.1fs)\n", pass ? "PASS" : "FAIL",
              criterion, name, detail.c_str(), seconds);
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

template <class F>
void run(int criterion, const char* name, F&& body) {
  auto t0 = Clock::now();
  bool pass = false;
  std::string detail;
  try {
    detail = body(pass);
  } catch (const std::exception& e) {
    pass = false;
    detail = std::string("exception: ") + e.what();
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(criterion, name, pass, detail, secs);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

ModelConfig micro_config() {
  ModelConfig c;
  c.H = c.W = c.D = 32;
  c.T = 2;
  c.C = 4;
  c.mamba_layers = 1;
  c.transformer_layers = 1;
  c.seed = 7;
  return c;
}

std::vector<Subject> normalized_dataset(const SyntheticConfig& sc) {
  auto subjects = generate_synthetic_dataset(sc);
  for (auto& s : subjects) s.volume = zscore_normalize(s.volume);
  return subjects;
}

// --------------------------------------------------------------------------

std::string criterion1_scan_oracle(bool& pass) {
  Rng rng(101);
  double worst = 0.0;
  int instances = 0;
  for (int64_t L : {1, 2, 7, 64, 257})
    for (int64_t d : {2, 8})
      for (int rep = 0; rep < 2; ++rep) {
        int64_t N = 16;
        Tensor u = random_tensor({L, d}, rng, 1.0, false);
        Tensor delta({L, d}, 0.0, false);
        for (auto& v : delta.mutable_data()) v = 0.001 + std::abs(rng.normal()) * 0.2;
        Tensor B = random_tensor({L, N}, rng, 1.0, false);
        Tensor C = random_tensor({L, N}, rng, 1.0, false);
        Tensor A({d, N}, 0.0, false);
        for (int64_t c = 0; c < d; ++c)
          for (int64_t n = 0; n < N; ++n)
            A.mutable_data()[c * N + n] = -(n + 1.0) * (0.5 + rng.uniform());
        Graph g(false);
        Tensor y = g.selective_scan(u, delta, B, C, A);
        auto ref = sequential_scan_oracle(u.data(), delta.data(), B.data(), C.data(),
                                          A.data(), L, d, N);
        for (int64_t i = 0; i < y.numel(); ++i) {
          double denom = std::max(1e-12, std::abs(ref[i]));
          worst = std::max(worst, std::abs(y.data()[i] - ref[i]) / denom);
        }
        ++instances;
      }
  pass = worst < 1e-10 && instances == 20;
  return fmt("%d instances, worst rel err %.2e (< 1e-10)", instances, worst);
}

std::string criterion2_zoh(bool& pass) {
  double worst = 0.0;
  auto check = [&](double a, double b, double delta, double expect_a, double expect_b) {
    double abar, bbar;
    zoh_discretize(&a, &b, delta, 1, &abar, &bbar);
    worst = std::max(worst, std::abs(abar - expect_a));
    worst = std::max(worst, std::abs(bbar - expect_b));
  };
  // delta -> 0 limit; scalar closed forms
  check(-3.0, 2.5, 1e-10, std::exp(-3e-10), 1e-10 * 2.5);
  check(1.0, 1.0, std::log(2.0), 2.0, 1.0);
  check(-1.0, 1.0, 1.0, std::exp(-1.0), 1.0 - std::exp(-1.0));
  bool examples_ok = worst < 1e-12;

  // branch agreement at |delta a| = 1e-7 (exact route) vs the limit form
  double a = -1.0, b = 1.7, abar, bbar;
  zoh_discretize(&a, &b, 1e-7, 1, &abar, &bbar);
  double rel = std::abs(bbar - 1e-7 * b) / std::abs(bbar);
  pass = examples_ok && rel < 1e-6;
  return fmt("examples worst abs err %.2e (< 1e-12), branch rel gap %.2e (< 1e-6)",
             worst, rel);
}

std::string criterion3_gradients(bool& pass) {
  // Op-level sweeps for the ops the model's losses do not reach.
  Rng rng(31);
  double op_worst = 0.0;
  {
    Tensor x = random_tensor({3, 4}, rng);
    auto r1 = grad_check(
        [](Graph& g, std::vector<Tensor>& v) { return g.mean(g.mul(v[0], v[0])); }, {x});
    auto r2 = grad_check(
        [](Graph& g, std::vector<Tensor>& v) {
          return g.sum(g.mul(g.activation(v[0], Activation::exp), v[0]));
        },
        {x});
    op_worst = std::max({r1.max_rel_err, r2.max_rel_err});
  }

  // Full micro model: central differences over every parameter coordinate,
  // through both loss kinds (regression covers the forward path; the BCE
  // composition adds sub/scale/softplus on the loss side).
  ModelConfig cfg = micro_config();
  BrainMT model(cfg);
  Rng drng(33);
  Tensor vol({cfg.T, cfg.H, cfg.W, cfg.D}, 0.0, false);
  for (auto& v : vol.mutable_data()) v = drng.normal();

  auto loss_fn = [&](Graph& g) {
    Tensor pred = model.forward(g, vol);
    Tensor l_mse = mse_loss(g, pred, 0.37);
    Tensor l_bce = bce_with_logit_loss(g, pred, 1.0);
    return g.add(l_mse, l_bce);
  };
  Graph g(true);
  Tensor loss = loss_fn(g);
  double f_scale = loss.value();
  model.zero_grads();
  g.backward(loss);

  double model_worst = 0.0;
  std::string worst_name;
  int64_t checked = 0;
  const double h = 1e-5;
  for (auto& p : model.params()) {
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      double saved = p.tensor.data()[i];
      p.tensor.mutable_data()[i] = saved + h;
      Graph gp(false);
      double fp = loss_fn(gp).value();
      p.tensor.mutable_data()[i] = saved - h;
      Graph gm(false);
      double fm = loss_fn(gm).value();
      p.tensor.mutable_data()[i] = saved;
      double fd = (fp - fm) / (2.0 * h);
      double e = rel_err(fd, p.tensor.grad()[i], f_scale);
      if (e > model_worst) {
        model_worst = e;
        worst_name = p.name + "[" + std::to_string(i) + "]";
      }
      ++checked;
    }
  }
  pass = op_worst < 1e-4 && model_worst < 1e-4;
  return fmt("ops worst %.2e; %lld params swept, worst %.2e at %s (< 1e-4)", op_worst,
             static_cast<long long>(checked), model_worst, worst_name.c_str());
}

std::string criterion4_linear_memory(bool& pass) {
  ModelConfig cfg;  // desk preset
  double count_ratio = static_cast<double>(stack_activation_elems(cfg, 32)) /
                       static_cast<double>(stack_activation_elems(cfg, 16));
  auto rows = run_bench(cfg, {16, 32}, 5);
  double time_ratio = rows[1].forward_ms / rows[0].forward_ms;
  bool count_ok = count_ratio >= 1.95 && count_ratio <= 2.05;
  bool time_ok = time_ratio >= 1.6 && time_ratio <= 2.6;
  pass = count_ok && time_ok;
  return fmt("activation ratio %.4f in [1.95,2.05]; wall ratio %.2f in [1.6,2.6] "
             "(%.0fms -> %.0fms)",
             count_ratio, time_ratio, rows[0].forward_ms, rows[1].forward_ms);
}

struct ProbeSetup {
  std::vector<Subject> subjects;
  DatasetSplit split;
  ModelConfig cfg;
  TrainOptions opt;
};

ProbeSetup overfit_probe_setup() {
  ProbeSetup ps;
  SyntheticConfig sc;
  sc.n_subjects = 8;
  sc.T_total = 16;
  sc.seed = 2024;
  ps.subjects = normalized_dataset(sc);
  for (const auto& s : ps.subjects) ps.split.train.push_back(s.id);
  ps.cfg = ModelConfig::preset("desk");
  ps.cfg.epochs = 50;  // 4 steps/epoch * 50 = 200 optimizer steps
  ps.cfg.warmup_epochs = 5;
  ps.cfg.lr = 1e-3;
  ps.cfg.seed = 5;
  ps.opt.run_seed = 5;
  ps.opt.fixed_windows = true;
  ps.opt.max_steps = 200;
  return ps;
}

std::string criterion5_overfit(bool& pass) {
  ProbeSetup ps = overfit_probe_setup();
  TrainResult tr = train_model(ps.subjects, ps.split, ps.cfg, ps.opt);
  double final_mse = tr.final_train_loss;

  // determinism echo: the first 12 steps repeat bit-identically
  TrainOptions echo = ps.opt;
  echo.max_steps = 12;
  TrainResult e1 = train_model(ps.subjects, ps.split, ps.cfg, echo);
  TrainResult e2 = train_model(ps.subjects, ps.split, ps.cfg, echo);
  bool deterministic = e1.best_params == e2.best_params &&
                       e1.final_train_loss == e2.final_train_loss;
  pass = tr.steps <= 200 && final_mse < 0.01 && deterministic;
  return fmt("train MSE %.5f after %lld steps (< 0.01), deterministic=%s", final_mse,
             static_cast<long long>(tr.steps), deterministic ? "yes" : "no");
}

struct LearnabilityResults {
  double r_temporal = -2, r_shuffled = -2, r_t4 = -2;
  bool ready = false;
};
LearnabilityResults g_learn;

void ensure_learnability_runs() {
  if (g_learn.ready) return;
  SyntheticConfig sc;
  sc.n_subjects = 64;
  sc.T_total = 64;
  sc.seed = 77;
  sc.roi_amplitude = 3.0;
  auto subjects = normalized_dataset(sc);
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  DatasetSplit split = make_splits(ids, 77);

  auto run_one = [&](int T, bool shuffled) {
    ModelConfig cfg = ModelConfig::preset("desk");
    cfg.T = T;
    cfg.epochs = 30;
    cfg.warmup_epochs = 3;
    cfg.lr = 4e-4;
    cfg.seed = 9;
    TrainOptions opt;
    opt.run_seed = 9;
    opt.shuffle_frames_control = shuffled;
    TrainResult tr = train_model(subjects, split, cfg, opt);
    BrainMT model(cfg);
    model.restore(tr.best_params);
    std::vector<double> preds = predict_split(model, subjects, split.test, opt);
    std::vector<double> targets;
    for (const auto& id : split.test)
      for (const auto& s : subjects)
        if (s.id == id) targets.push_back(s.cognition_score);
    return pearson(preds, targets);
  };
  g_learn.r_temporal = run_one(16, false);
  g_learn.r_shuffled = run_one(16, true);
  g_learn.r_t4 = run_one(4, false);
  g_learn.ready = true;
}

std::string criterion6_learnability(bool& pass) {
  ensure_learnability_runs();
  pass = g_learn.r_temporal >= 0.8 &&
         g_learn.r_temporal - g_learn.r_shuffled >= 0.3;
  return fmt("held-out R %.3f (>= 0.8), shuffled control R %.3f, gap %.3f (>= 0.3)",
             g_learn.r_temporal, g_learn.r_shuffled,
             g_learn.r_temporal - g_learn.r_shuffled);
}

std::string criterion7_frames_ablation(bool& pass) {
  ensure_learnability_runs();
  pass = g_learn.r_temporal > g_learn.r_t4 + 0.1;
  return fmt("R(T=16) %.3f > R(T=4) %.3f + 0.1", g_learn.r_temporal, g_learn.r_t4);
}

std::string criterion8_metrics(bool& pass) {
  auto reg = evaluate_regression({0, 1, 2}, {0, 2, 4});
  bool reg_ok = std::abs(reg.mse - 5.0 / 3.0) < 1e-15 && std::abs(reg.mae - 1.0) < 1e-15 &&
                std::abs(reg.r - 1.0) < 1e-12;
  auto perfect = evaluate_regression({1, 2, 3}, {1, 2, 3});
  bool perfect_ok = perfect.mse == 0 && perfect.mae == 0 && std::abs(perfect.r - 1) < 1e-12;
  auto anti = evaluate_regression({1, 2, 3}, {-1, -2, -3});
  bool anti_ok = std::abs(anti.r + 1.0) < 1e-12;

  auto auroc_case = evaluate_classification({3, 2, 1, 0}, {1, 0, 1, 0});
  bool auroc_ok = auroc_case.auroc == 0.75;
  auto flat = evaluate_classification({0, 0, 0, 0}, {1, 0, 1, 0});
  bool flat_ok = flat.bacc == 0.5 && flat.auroc == 0.5;
  auto sep = evaluate_classification({2, -1, 3, -2}, {1, 0, 1, 0});
  bool sep_ok = sep.acc == 1.0 && sep.bacc == 1.0 && sep.auroc == 1.0;

  pass = reg_ok && perfect_ok && anti_ok && auroc_ok && flat_ok && sep_ok;
  return fmt("regression %s, AUROC[3,2,1,0]=%.2f (0.75), constant BAcc=%.2f (0.5)",
             reg_ok ? "exact" : "WRONG", auroc_case.auroc, flat.bacc);
}

std::string criterion9_ig_axioms(bool& pass) {
  // Completeness on the desk model with a synthetic subject input.
  SyntheticConfig sc;
  sc.n_subjects = 2;
  sc.T_total = 16;
  sc.seed = 42;
  auto subjects = normalized_dataset(sc);
  ModelConfig cfg = ModelConfig::preset("desk");
  cfg.seed = 3;
  BrainMT model(cfg);
  Volume4D x = subjects[0].volume;
  double base = min_intensity(x);
  AttributionMap m128 = integrated_gradients(model, x, base, 128);
  AttributionMap map = integrated_gradients(model, x, base, 256);
  double delta_f = std::abs(map.prediction - map.baseline_prediction);
  double tol = 1e-3 * delta_f + 1e-6;
  bool completeness_ok = map.completeness_residual < tol &&
                         map.completeness_residual < m128.completeness_residual;

  // Linear functional: attribution equals w .* x exactly for any m >= 1.
  Rng rng(13);
  Volume4D lx(2, 32, 32, 32);
  for (auto& v : lx.data) v = rng.normal();
  Tensor w = random_tensor({lx.size()}, rng, 1.0, false);
  auto linear = [&](Graph& g, const Tensor& in) {
    return g.sum(g.mul(g.reshape(in, {in.numel()}), w));
  };
  double linear_worst = 0.0;
  for (int m : {1, 3}) {
    AttributionMap lmap = integrated_gradients_fn(linear, lx, 0.0, m);
    for (int64_t i = 0; i < lx.size(); ++i)
      linear_worst = std::max(linear_worst,
                              std::abs(lmap.values.data[i] - w.data()[i] * lx.data[i]));
  }
  bool linear_ok = linear_worst < 1e-10;

  // x == baseline -> zero map.
  Volume4D flat = x;
  std::fill(flat.data.begin(), flat.data.end(), base);
  AttributionMap zmap = integrated_gradients(model, flat, base, 4);
  bool zero_ok = true;
  for (double v : zmap.values.data) zero_ok &= (v == 0.0);

  pass = completeness_ok && linear_ok && zero_ok;
  return fmt("completeness %.3g < %.3g; linear worst %.2e (< 1e-10); zero map %s",
             map.completeness_residual, tol, linear_worst, zero_ok ? "yes" : "no");
}

std::string criterion10_structural(bool& pass) {
  Rng rng(55);
  bool all = true;
  std::string detail;

  // residual conv stage with zeroed body is the identity (checked through an
  // identity-tap downsample)
  {
    int cin = 4;
    ConvStageParams s;
    s.w1 = Tensor({cin, cin, 3, 3, 3}, 0.0, false);
    s.b1 = Tensor({cin}, 0.0, false);
    s.ln1_g = Tensor({cin}, 1.0, false);
    s.ln1_b = Tensor({cin}, 0.0, false);
    s.w2 = Tensor({cin, cin, 3, 3, 3}, 0.0, false);
    s.b2 = Tensor({cin}, 0.0, false);
    s.ln2_g = Tensor({cin}, 1.0, false);
    s.ln2_b = Tensor({cin}, 0.0, false);
    s.wd = Tensor({2 * cin, cin, 2, 2, 2}, 0.0, false);
    for (int c = 0; c < cin; ++c) s.wd.mutable_data()[(c * cin + c) * 8] = 1.0;
    s.bd = Tensor({2 * cin}, 0.0, false);
    Tensor x = random_tensor({cin, 8, 8, 8}, rng, 1.0, false);
    Graph g(false);
    Tensor y = conv_stage(g, x, s);
    bool ok = true;
    for (int c = 0; c < cin && ok; ++c)
      for (int i = 0; i < 4 && ok; ++i)
        for (int j = 0; j < 4 && ok; ++j)
          for (int k = 0; k < 4 && ok; ++k)
            ok = y.data()[((c * 4 + i) * 4 + j) * 4 + k] ==
                 x.data()[((c * 8 + 2 * i) * 8 + 2 * j) * 8 + 2 * k];
    all &= ok;
    detail += fmt("residual-id %s; ", ok ? "ok" : "FAIL");
  }
  // transformer block with zeroed weights is the identity
  {
    AttentionBlockParams p = make_attention_block_params(8, 2, rng);
    for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo, &p.w1,
                      &p.b1, &p.w2, &p.b2})
      std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
    Tensor x = random_tensor({6, 8}, rng, 1.0, false);
    Graph g(false);
    Tensor y = transformer_block(g, x, p);
    bool ok = y.data() == x.data();
    all &= ok;
    detail += fmt("tfm-id %s; ", ok ? "ok" : "FAIL");
  }
  // attention rows sum to 1 +- 1e-12 (recorded softmax path)
  {
    Tensor q = random_tensor({5, 8}, rng, 10.0);
    Graph g;
    Tensor probs = g.softmax(g.matmul(q, g.permute(q, {1, 0})), 1);
    bool ok = true;
    for (int i = 0; i < 5; ++i) {
      double sum = 0;
      for (int j = 0; j < 5; ++j) sum += probs.data()[i * 5 + j];
      ok &= std::abs(sum - 1.0) <= 1e-12;
    }
    all &= ok;
    detail += fmt("rows-sum-1 %s; ", ok ? "ok" : "FAIL");
  }
  // reorder composed with its inverse is the identity
  {
    Tensor body = random_tensor({12, 3}, rng, 1.0, false);
    Graph g(false);
    Tensor there = reorder(g, body, ScanOrder::spatial_first, ScanOrder::temporal_first, 4, 3);
    Tensor back = reorder(g, there, ScanOrder::temporal_first, ScanOrder::spatial_first, 4, 3);
    bool ok = back.data() == body.data();
    all &= ok;
    detail += fmt("reorder-inv %s; ", ok ? "ok" : "FAIL");
  }
  // tied-weight reversal equivariance to 1e-10
  {
    SsmBlockParams p = make_ssm_block_params(6, 12, 4, 1, rng);
    tie_directions(p);
    Graph g(false);
    Tensor x = random_tensor({8, 6}, rng, 1.0, false);
    Tensor out = mamba_block(g, x, p, ScanOrder::spatial_first, 7, 1);
    Tensor out_rev = mamba_block(g, g.reverse_rows(x), p, ScanOrder::spatial_first, 7, 1);
    Tensor expect = g.reverse_rows(out);
    double worst = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
      double denom = std::max(1e-12, std::abs(expect.data()[i]));
      worst = std::max(worst, std::abs(out_rev.data()[i] - expect.data()[i]) / denom);
    }
    bool ok = worst < 1e-10;
    all &= ok;
    detail += fmt("reversal %.1e", worst);
  }
  pass = all;
  return detail;
}

std::string criterion11_paper_preset(bool& pass) {
  ModelConfig cfg = ModelConfig::preset("paper");
  cfg.validate();
  bool preset_ok = cfg.mamba_layers == 12 && cfg.transformer_layers == 8 &&
                   cfg.state_dim == 16 && cfg.expansion == 2 && cfg.T == 200;
  BrainMT model(cfg);

  // One synthetic 64^3 x T=200 volume; ~0.9 GB transient RAM.
  SyntheticConfig sc;
  sc.n_subjects = 1;
  sc.H = sc.W = sc.D = 64;
  sc.T_total = 200;
  sc.seed = 11;
  auto subjects = normalized_dataset(sc);
  Tensor vol = volume_to_tensor(subjects[0].volume);
  subjects.clear();
  Graph g(false);
  double out = model.forward(g, vol).value();
  pass = preset_ok && std::isfinite(out);
  return fmt("12/8 blocks, N=16, exp=2, L=%lld, %lld params, forward=%.4f",
             static_cast<long long>(cfg.L()),
             static_cast<long long>(model.parameter_count(true)), out);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](int c) { return only.empty() || only.count(c); };

  if (want(1)) run(1, "scan-oracle equivalence", criterion1_scan_oracle);
  if (want(2)) run(2, "ZOH correctness", criterion2_zoh);
  if (want(3)) run(3, "gradient suite", criterion3_gradients);
  if (want(4)) run(4, "linear-in-T memory", criterion4_linear_memory);
  if (want(5)) run(5, "overfit probe", criterion5_overfit);
  if (want(6)) run(6, "temporal-signal learnability", criterion6_learnability);
  if (want(7)) run(7, "frame-count ablation", criterion7_frames_ablation);
  if (want(8)) run(8, "metric unit tests", criterion8_metrics);
  if (want(9)) run(9, "integrated-gradients axioms", criterion9_ig_axioms);
  if (want(10)) run(10, "structural invariants", criterion10_structural);
  if (want(11)) run(11, "paper-preset constructibility", criterion11_paper_preset);

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
