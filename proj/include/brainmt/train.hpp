#pragma once

#include <optional>
#include <string>
#include <vector>

#include "brainmt/model.hpp"

namespace brainmt {

// Decoupled weight decay Adam; moments keyed by parameter order.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void init(const ParamList& params);
  void step(ParamList& params, double lr, double weight_decay);
};

// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.
// Steps past the schedule clamp to the final value.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double base_lr);

Tensor mse_loss(Graph& g, const Tensor& pred, double target);
// Numerically stable log-sum-exp form: softplus(logit) - label * logit.
Tensor bce_with_logit_loss(Graph& g, const Tensor& logit, double label);

struct RegressionMetrics {
  double mse = 0, mae = 0, r = 0;
};
struct ClassificationMetrics {
  double acc = 0, bacc = 0, auroc = 0;
};

RegressionMetrics evaluate_regression(const std::vector<double>& preds,
                                      const std::vector<double>& targets);
// Threshold 0 on logits for Acc/BAcc; AUROC by rank-pair counting with ties
// worth half.
ClassificationMetrics evaluate_classification(const std::vector<double>& logits,
                                              const std::vector<int>& labels);

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double m1 = 0, m2 = 0, m3 = 0;  // mse/mae/r or acc/bacc/auroc
};

void write_metrics_csv(const std::string& path, Task task,
                       const std::vector<MetricRow>& rows);

struct TrainOptions {
  uint64_t run_seed = 0;            // shuffling + window draws
  bool shuffle_frames_control = false;  // destroy temporal order per draw
  bool fixed_windows = false;       // one window per subject, reused every epoch
  bool verbose = false;
  std::optional<int> max_steps;     // stop after this many optimizer steps
};

struct TrainResult {
  ModelConfig cfg;
  std::vector<std::vector<double>> best_params;
  double best_val_loss = 0;
  int best_epoch = -1;
  int64_t steps = 0;
  std::vector<MetricRow> history;
  double final_train_loss = 0;
};

// Subjects are looked up by id from `dataset`; volumes must already be
// normalized. Validation may be empty (no early stopping, final params kept).
TrainResult train_model(const std::vector<Subject>& dataset, const DatasetSplit& split,
                        const ModelConfig& cfg, const TrainOptions& opt = {});

// Deterministic per-subject evaluation windows.
std::vector<double> predict_split(const BrainMT& model,
                                  const std::vector<Subject>& dataset,
                                  const std::vector<std::string>& ids,
                                  const TrainOptions& opt);

struct CvRun {
  int repeat = 0, fold = 0;
  double loss = 0;
  double m1 = 0, m2 = 0, m3 = 0;
};

struct CvResult {
  Task task = Task::regression;
  std::vector<CvRun> runs;
  // mean over all runs; std across folds (mean of per-repeat stds) and std
  // across every run.
  double mean[4] = {0, 0, 0, 0};
  double std_folds[4] = {0, 0, 0, 0};
  double std_all[4] = {0, 0, 0, 0};
};

CvResult run_cv(const std::vector<Subject>& dataset, const ModelConfig& cfg, int folds,
                int repeats, const TrainOptions& opt = {});
void write_cv_csv(const std::string& runs_path, const std::string& summary_path,
                  const CvResult& cv);

// Versioned checkpoint: magic "BMTCKPT1", u32 version, config JSON blob, then
// named tensors in the volume-io binary convention (LE f64).
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamList& params);
struct Checkpoint {
  ModelConfig cfg;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
};
Checkpoint load_checkpoint(const std::string& path);
BrainMT model_from_checkpoint(const Checkpoint& ck);

// Shared by the trainer and the eval CLI: deterministic eval window seed.
uint64_t eval_window_seed(uint64_t run_seed, const std::string& subject_id);

}  // namespace brainmt
