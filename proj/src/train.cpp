#include "brainmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>

namespace brainmt {

void AdamW::init(const ParamList& params) {
  t = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.tensor.numel(), 0.0);
    v.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(ParamList& params, double lr, double weight_decay) {
  if (m.size() != params.size()) throw Error("AdamW: not initialized for this model");
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    if (!p.has_grad()) continue;
    const std::vector<double>& g = p.grad();
    std::vector<double>& mi = m[i];
    std::vector<double>& vi = v[i];
    std::vector<double>& w = p.mutable_data();
    for (size_t j = 0; j < w.size(); ++j) {
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
      double mhat = mi[j] / bc1;
      double vhat = vi[j] / bc2;
      // decoupled decay, applied to every parameter
      w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[j]);
    }
  }
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double base_lr) {
  if (total_steps < 1) throw ConfigError("lr_schedule: total_steps must be >= 1");
  if (step < 0) step = 0;
  if (step >= total_steps) return 0.0;  // cosine floor
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(std::max<int64_t>(1, total_steps - warmup_steps));
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Tensor mse_loss(Graph& g, const Tensor& pred, double target) {
  Tensor d = g.add_scalar(pred, -target);
  return g.mul(d, d);
}

Tensor bce_with_logit_loss(Graph& g, const Tensor& logit, double label) {
  // softplus(x) - y*x
  return g.sub(g.softplus(logit), g.scale(logit, label));
}

RegressionMetrics evaluate_regression(const std::vector<double>& preds,
                                      const std::vector<double>& targets) {
  if (preds.size() != targets.size() || preds.empty())
    throw DimError("evaluate_regression: size mismatch or empty");
  RegressionMetrics r;
  for (size_t i = 0; i < preds.size(); ++i) {
    double d = preds[i] - targets[i];
    r.mse += d * d;
    r.mae += std::abs(d);
  }
  r.mse /= preds.size();
  r.mae /= preds.size();
  r.r = pearson(preds, targets);
  return r;
}

ClassificationMetrics evaluate_classification(const std::vector<double>& logits,
                                              const std::vector<int>& labels) {
  if (logits.size() != labels.size() || logits.empty())
    throw DimError("evaluate_classification: size mismatch or empty");
  ClassificationMetrics m;
  int64_t n = static_cast<int64_t>(logits.size());
  int64_t correct = 0, tp = 0, tn = 0, np = 0, nn = 0;
  for (int64_t i = 0; i < n; ++i) {
    int pred = logits[i] > 0.0 ? 1 : 0;
    if (pred == labels[i]) ++correct;
    if (labels[i] == 1) {
      ++np;
      if (pred == 1) ++tp;
    } else {
      ++nn;
      if (pred == 0) ++tn;
    }
  }
  m.acc = static_cast<double>(correct) / n;
  if (np > 0 && nn > 0)
    m.bacc = 0.5 * (static_cast<double>(tp) / np + static_cast<double>(tn) / nn);
  else if (np > 0)
    m.bacc = static_cast<double>(tp) / np;
  else
    m.bacc = static_cast<double>(tn) / nn;
  // AUROC: P(score_pos > score_neg) + 0.5 P(tie)
  if (np == 0 || nn == 0) {
    m.auroc = 0.5;
  } else {
    double wins = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      if (labels[i] != 1) continue;
      for (int64_t j = 0; j < n; ++j) {
        if (labels[j] != 0) continue;
        if (logits[i] > logits[j])
          wins += 1.0;
        else if (logits[i] == logits[j])
          wins += 0.5;
      }
    }
    m.auroc = wins / (static_cast<double>(np) * static_cast<double>(nn));
  }
  return m;
}

void write_metrics_csv(const std::string& path, Task task,
                       const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  if (task == Task::regression)
    f << "epoch,split,loss,mse,mae,pearson_r\n";
  else
    f << "epoch,split,loss,acc,bacc,auroc\n";
  f.setf(std::ios::fixed);
  f.precision(9);
  for (const auto& r : rows)
    f << r.epoch << "," << r.split << "," << r.loss << "," << r.m1 << "," << r.m2 << ","
      << r.m3 << "\n";
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

const Subject& subject_by_id(const std::vector<Subject>& dataset, const std::string& id) {
  for (const auto& s : dataset)
    if (s.id == id) return s;
  throw ConfigError("unknown subject id: " + id);
}

double target_of(const Subject& s, Task task) {
  return task == Task::regression ? s.cognition_score
                                  : static_cast<double>(s.sex_label);
}

Volume4D draw_input(const Subject& s, const ModelConfig& cfg, uint64_t seed,
                    bool shuffle_control) {
  Volume4D win = sample_frames(s.volume, cfg.T, seed, cfg.frame_sampling);
  if (shuffle_control) win = shuffle_frames(win, Rng::mix(seed, 0x7e4fULL));
  return win;
}

}  // namespace

uint64_t eval_window_seed(uint64_t run_seed, const std::string& subject_id) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a over the id
  for (char c : subject_id) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return Rng::mix(run_seed, h);
}

std::vector<double> predict_split(const BrainMT& model,
                                  const std::vector<Subject>& dataset,
                                  const std::vector<std::string>& ids,
                                  const TrainOptions& opt) {
  std::vector<double> preds;
  preds.reserve(ids.size());
  for (const auto& id : ids) {
    const Subject& s = subject_by_id(dataset, id);
    Volume4D win = draw_input(s, model.config(), eval_window_seed(opt.run_seed, id),
                              opt.shuffle_frames_control);
    preds.push_back(model.predict(win));
  }
  return preds;
}

namespace {

struct EvalOutcome {
  double loss;
  MetricRow row;
};

EvalOutcome evaluate_split(const BrainMT& model, const std::vector<Subject>& dataset,
                           const std::vector<std::string>& ids, const std::string& name,
                           int epoch, const TrainOptions& opt) {
  const ModelConfig& cfg = model.config();
  std::vector<double> preds = predict_split(model, dataset, ids, opt);
  std::vector<double> targets;
  std::vector<int> labels;
  for (const auto& id : ids) {
    const Subject& s = subject_by_id(dataset, id);
    targets.push_back(target_of(s, cfg.task));
    labels.push_back(s.sex_label);
  }
  double loss = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (cfg.task == Task::regression) {
      double d = preds[i] - targets[i];
      loss += d * d;
    } else {
      loss += std::max(preds[i], 0.0) + std::log1p(std::exp(-std::abs(preds[i]))) -
              targets[i] * preds[i];
    }
  }
  loss /= preds.size();
  MetricRow row;
  row.epoch = epoch;
  row.split = name;
  row.loss = loss;
  if (cfg.task == Task::regression) {
    auto mr = evaluate_regression(preds, targets);
    row.m1 = mr.mse;
    row.m2 = mr.mae;
    row.m3 = mr.r;
  } else {
    auto mc = evaluate_classification(preds, labels);
    row.m1 = mc.acc;
    row.m2 = mc.bacc;
    row.m3 = mc.auroc;
  }
  return {loss, row};
}

}  // namespace

TrainResult train_model(const std::vector<Subject>& dataset, const DatasetSplit& split,
                        const ModelConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (split.train.empty()) throw ConfigError("train: empty training split");
  BrainMT model(cfg);
  AdamW adam;
  adam.init(model.params());

  int64_t steps_per_epoch =
      (static_cast<int64_t>(split.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  if (opt.max_steps) total_steps = std::min<int64_t>(total_steps, *opt.max_steps);

  TrainResult res;
  res.cfg = cfg;
  res.best_val_loss = HUGE_VAL;

  std::vector<std::string> order = split.train;
  int64_t step = 0;
  int epochs_since_best = 0;
  bool stop = false;

  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    // Deterministic per-epoch shuffle.
    Rng shuffle_rng(Rng::mix(opt.run_seed, 0xe90c + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);

    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    for (size_t b0 = 0; b0 < order.size() && !stop; b0 += cfg.batch_size) {
      size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      Graph g(true);
      Tensor batch_loss;
      for (size_t bi = b0; bi < b1; ++bi) {
        const Subject& s = subject_by_id(dataset, order[bi]);
        uint64_t wseed = opt.fixed_windows
                             ? eval_window_seed(opt.run_seed, s.id)
                             : Rng::mix(opt.run_seed,
                                        (static_cast<uint64_t>(epoch) << 20) ^ bi);
        Volume4D win = draw_input(s, cfg, wseed, opt.shuffle_frames_control);
        Tensor pred = model.forward(g, volume_to_tensor(win));
        Tensor li = cfg.task == Task::regression
                        ? mse_loss(g, pred, s.cognition_score)
                        : bce_with_logit_loss(g, pred, s.sex_label);
        batch_loss = batch_loss.defined() ? g.add(batch_loss, li) : li;
      }
      batch_loss = g.scale(batch_loss, 1.0 / static_cast<double>(b1 - b0));
      double lv = batch_loss.value();
      if (!std::isfinite(lv))
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      epoch_loss += lv;
      ++epoch_batches;
      model.zero_grads();
      g.backward(batch_loss);
      adam.step(model.params(), lr_schedule(step, total_steps, warmup_steps, cfg.lr),
                cfg.weight_decay);
      ++step;
      if (opt.max_steps && step >= *opt.max_steps) stop = true;
    }
    epoch_loss /= std::max<int64_t>(1, epoch_batches);
    res.final_train_loss = epoch_loss;

    MetricRow train_row;
    train_row.epoch = epoch;
    train_row.split = "train";
    train_row.loss = epoch_loss;
    res.history.push_back(train_row);

    if (!split.val.empty()) {
      EvalOutcome val = evaluate_split(model, dataset, split.val, "val", epoch, opt);
      res.history.push_back(val.row);
      if (val.loss < res.best_val_loss) {
        res.best_val_loss = val.loss;
        res.best_epoch = epoch;
        res.best_params = model.snapshot();
        epochs_since_best = 0;
      } else if (++epochs_since_best >= cfg.patience) {
        stop = true;
      }
      if (opt.verbose)
        std::cerr << "epoch " << epoch << " train_loss " << epoch_loss << " val_loss "
                  << val.loss << "\n";
    } else if (opt.verbose) {
      std::cerr << "epoch " << epoch << " train_loss " << epoch_loss << "\n";
    }
  }
  res.steps = step;
  if (res.best_params.empty()) {
    res.best_params = model.snapshot();
    res.best_epoch = cfg.epochs - 1;
    res.best_val_loss = res.final_train_loss;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Cross-validation

CvResult run_cv(const std::vector<Subject>& dataset, const ModelConfig& cfg, int folds,
                int repeats, const TrainOptions& opt) {
  if (repeats < 1) throw ConfigError("run_cv: repeats must be >= 1");
  std::vector<std::string> ids;
  for (const auto& s : dataset) ids.push_back(s.id);
  CvResult cv;
  cv.task = cfg.task;
  for (int rep = 0; rep < repeats; ++rep) {
    auto fold_splits = make_cv_folds(ids, folds, Rng::mix(cfg.seed, 0xcf01d + rep));
    for (const auto& split : fold_splits) {
      TrainOptions fold_opt = opt;
      fold_opt.run_seed = Rng::mix(opt.run_seed, (rep << 8) ^ split.fold_index);
      TrainResult tr = train_model(dataset, split, cfg, fold_opt);
      BrainMT model(cfg);
      model.restore(tr.best_params);
      EvalOutcome test = evaluate_split(model, dataset, split.test, "test", 0, fold_opt);
      CvRun run;
      run.repeat = rep;
      run.fold = split.fold_index;
      run.loss = test.loss;
      run.m1 = test.row.m1;
      run.m2 = test.row.m2;
      run.m3 = test.row.m3;
      cv.runs.push_back(run);
    }
  }
  // Aggregate: mean over all runs, std across folds (averaged over repeats),
  // std across all runs.
  auto value = [](const CvRun& r, int k) {
    switch (k) {
      case 0: return r.loss;
      case 1: return r.m1;
      case 2: return r.m2;
      default: return r.m3;
    }
  };
  for (int k = 0; k < 4; ++k) {
    double mu = 0.0;
    for (const auto& r : cv.runs) mu += value(r, k);
    mu /= cv.runs.size();
    cv.mean[k] = mu;
    double var_all = 0.0;
    for (const auto& r : cv.runs) {
      double d = value(r, k) - mu;
      var_all += d * d;
    }
    cv.std_all[k] = std::sqrt(var_all / cv.runs.size());
    double std_folds_acc = 0.0;
    for (int rep = 0; rep < repeats; ++rep) {
      double rm = 0.0;
      int cnt = 0;
      for (const auto& r : cv.runs)
        if (r.repeat == rep) {
          rm += value(r, k);
          ++cnt;
        }
      rm /= cnt;
      double var = 0.0;
      for (const auto& r : cv.runs)
        if (r.repeat == rep) {
          double d = value(r, k) - rm;
          var += d * d;
        }
      std_folds_acc += std::sqrt(var / cnt);
    }
    cv.std_folds[k] = std_folds_acc / repeats;
  }
  return cv;
}

void write_cv_csv(const std::string& runs_path, const std::string& summary_path,
                  const CvResult& cv) {
  const char* names[4];
  names[0] = "loss";
  if (cv.task == Task::regression) {
    names[1] = "mse";
    names[2] = "mae";
    names[3] = "pearson_r";
  } else {
    names[1] = "acc";
    names[2] = "bacc";
    names[3] = "auroc";
  }
  {
    std::ofstream f(runs_path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + runs_path);
    f << "repeat,fold," << names[0] << "," << names[1] << "," << names[2] << ","
      << names[3] << "\n";
    f.setf(std::ios::fixed);
    f.precision(9);
    for (const auto& r : cv.runs)
      f << r.repeat << "," << r.fold << "," << r.loss << "," << r.m1 << "," << r.m2
        << "," << r.m3 << "\n";
  }
  {
    std::ofstream f(summary_path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + summary_path);
    f << "metric,mean,std_across_folds,std_across_runs\n";
    f.setf(std::ios::fixed);
    f.precision(9);
    for (int k = 0; k < 4; ++k)
      f << names[k] << "," << cv.mean[k] << "," << cv.std_folds[k] << ","
        << cv.std_all[k] << "\n";
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[8] = {'B', 'M', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamList& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(kCkptMagic, 8);
  auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(kCkptVersion);
  std::string cfg_json = cfg.to_json().dump();
  put_u32(static_cast<uint32_t>(cfg_json.size()));
  f.write(cfg_json.data(), cfg_json.size());
  put_u32(static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(static_cast<uint32_t>(p.name.size()));
    f.write(p.name.data(), p.name.size());
    put_u32(static_cast<uint32_t>(p.tensor.ndim()));
    for (int i = 0; i < p.tensor.ndim(); ++i)
      put_u32(static_cast<uint32_t>(p.tensor.shape()[i]));
    f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
            p.tensor.numel() * sizeof(double));
  }
  if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[8] = {};
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw IoError(path + ": bad magic (not a BrainMT checkpoint)");
  auto get_u32 = [&]() {
    uint32_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 4)) throw IoError(path + ": truncated");
    return v;
  };
  uint32_t version = get_u32();
  if (version != kCkptVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  uint32_t jlen = get_u32();
  std::string cfg_json(jlen, '\0');
  if (!f.read(cfg_json.data(), jlen)) throw IoError(path + ": truncated config");
  Checkpoint ck;
  try {
    ck.cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_json));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad config blob: " + e.what());
  }
  uint32_t ntensors = get_u32();
  for (uint32_t i = 0; i < ntensors; ++i) {
    uint32_t nlen = get_u32();
    std::string name(nlen, '\0');
    if (!f.read(name.data(), nlen)) throw IoError(path + ": truncated tensor name");
    uint32_t ndim = get_u32();
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) numel *= get_u32();
    std::vector<double> data(numel);
    f.read(reinterpret_cast<char*>(data.data()), numel * sizeof(double));
    if (f.gcount() != static_cast<std::streamsize>(numel * sizeof(double)))
      throw IoError(path + ": truncated tensor payload for " + name);
    ck.tensors.emplace_back(std::move(name), std::move(data));
  }
  return ck;
}

BrainMT model_from_checkpoint(const Checkpoint& ck) {
  BrainMT model(ck.cfg);
  std::map<std::string, const std::vector<double>*> by_name;
  for (const auto& [name, data] : ck.tensors) by_name[name] = &data;
  for (auto& p : model.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw IoError("checkpoint missing tensor: " + p.name);
    if (it->second->size() != p.tensor.data().size())
      throw IoError("checkpoint tensor " + p.name + " has wrong size");
    p.tensor.mutable_data() = *it->second;
  }
  return model;
}

}  // namespace brainmt
