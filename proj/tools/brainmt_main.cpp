// brainmt: synthetic 4-D dataset generation, training, evaluation,
// attribution, and the linear-complexity benchmark, in one binary.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "brainmt/attribution.hpp"
#include "brainmt/bench.hpp"
#include "brainmt/config.hpp"
#include "brainmt/train.hpp"

namespace fs = std::filesystem;
using namespace brainmt;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string preset = "desk";
  std::string out_dir = ".";
  std::string data_path;
  std::string checkpoint_path;
  std::string scan_order;
  std::string task;
  std::string frame_sampling;
  int frames = 0;
  int folds = 0;
  int repeats = 1;
  uint64_t seed = 0;
  bool seed_set = false;
};

ModelConfig build_model_config(const CommonFlags& f) {
  ModelConfig cfg = ModelConfig::preset(f.preset);
  if (!f.config_path.empty()) {
    KvConfig kv = parse_kv_file(f.config_path);
    if (kv_has(kv, "dims")) parse_dims(kv_get(kv, "dims"), cfg.H, cfg.W, cfg.D);
    cfg.T = static_cast<int>(kv_get_int(kv, "frames", cfg.T));
    cfg.C = static_cast<int>(kv_get_int(kv, "channels", cfg.C));
    cfg.mamba_layers = static_cast<int>(kv_get_int(kv, "mamba_layers", cfg.mamba_layers));
    cfg.transformer_layers =
        static_cast<int>(kv_get_int(kv, "transformer_layers", cfg.transformer_layers));
    cfg.heads = static_cast<int>(kv_get_int(kv, "heads", cfg.heads));
    cfg.state_dim = static_cast<int>(kv_get_int(kv, "state_dim", cfg.state_dim));
    cfg.expansion = static_cast<int>(kv_get_int(kv, "expansion", cfg.expansion));
    if (kv_has(kv, "scan_order"))
      cfg.scan_order = scan_order_from_string(kv_get(kv, "scan_order"));
    if (kv_has(kv, "task")) cfg.task = task_from_string(kv_get(kv, "task"));
    if (kv_has(kv, "frame_sampling"))
      cfg.frame_sampling = frame_sampling_from_string(kv_get(kv, "frame_sampling"));
    cfg.seed = static_cast<uint64_t>(kv_get_int(kv, "seed", static_cast<int64_t>(cfg.seed)));
    cfg.lr = kv_get_double(kv, "lr", cfg.lr);
    cfg.weight_decay = kv_get_double(kv, "weight_decay", cfg.weight_decay);
    cfg.epochs = static_cast<int>(kv_get_int(kv, "epochs", cfg.epochs));
    cfg.warmup_epochs = static_cast<int>(kv_get_int(kv, "warmup_epochs", cfg.warmup_epochs));
    cfg.batch_size = static_cast<int>(kv_get_int(kv, "batch_size", cfg.batch_size));
    cfg.patience = static_cast<int>(kv_get_int(kv, "patience", cfg.patience));
  }
  if (f.frames > 0) cfg.T = f.frames;
  if (!f.scan_order.empty()) cfg.scan_order = scan_order_from_string(f.scan_order);
  if (!f.task.empty()) cfg.task = task_from_string(f.task);
  if (!f.frame_sampling.empty())
    cfg.frame_sampling = frame_sampling_from_string(f.frame_sampling);
  if (f.seed_set) cfg.seed = f.seed;
  cfg.validate();
  return cfg;
}

struct LoadedDataset {
  std::vector<Subject> subjects;
  DatasetSplit split;
};

LoadedDataset load_dataset(const std::string& manifest_path) {
  LoadedDataset out;
  auto rows = read_manifest(manifest_path);
  if (rows.empty()) throw IoError(manifest_path + ": empty manifest");
  fs::path base = fs::path(manifest_path).parent_path();
  for (const auto& r : rows) {
    fs::path vol_path = r.path;
    if (vol_path.is_relative()) vol_path = base / vol_path;
    Subject s;
    s.volume = zscore_normalize(load_volume(vol_path.string()));
    load_sidecar(vol_path.string(), s);
    if (s.id != r.id)
      throw IoError(manifest_path + ": sidecar id " + s.id + " != manifest id " + r.id);
    out.subjects.push_back(std::move(s));
    if (r.split == "train")
      out.split.train.push_back(r.id);
    else if (r.split == "val")
      out.split.val.push_back(r.id);
    else if (r.split == "test")
      out.split.test.push_back(r.id);
    else
      throw IoError(manifest_path + ": unknown split '" + r.split + "' for " + r.id);
  }
  return out;
}

int cmd_generate(const CommonFlags& f) {
  if (f.config_path.empty()) throw ConfigError("generate requires --config");
  KvConfig kv = parse_kv_file(f.config_path);
  SyntheticConfig sc;
  sc.n_subjects = static_cast<int>(kv_get_int(kv, "n_subjects"));
  parse_dims(kv_get(kv, "dims"), sc.H, sc.W, sc.D);
  sc.T_total = static_cast<int>(kv_get_int(kv, "t_total"));
  sc.seed = static_cast<uint64_t>(kv_get_int(kv, "seed"));
  if (f.seed_set) sc.seed = f.seed;
  sc.roi_amplitude = kv_get_double(kv, "roi_amplitude", sc.roi_amplitude);
  sc.sex_amplitude = kv_get_double(kv, "sex_amplitude", sc.sex_amplitude);
  sc.noise_sigma = kv_get_double(kv, "noise_sigma", sc.noise_sigma);
  sc.ar_coeff = kv_get_double(kv, "ar_coeff", sc.ar_coeff);

  fs::create_directories(f.out_dir);
  auto subjects = generate_synthetic_dataset(sc);
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  DatasetSplit split = make_splits(ids, sc.seed);
  auto split_of = [&](const std::string& id) -> const char* {
    for (const auto& x : split.val)
      if (x == id) return "val";
    for (const auto& x : split.test)
      if (x == id) return "test";
    return "train";
  };
  std::vector<ManifestRow> rows;
  for (const auto& s : subjects) {
    std::string filename = s.id + ".vol";
    save_volume(s.volume, (fs::path(f.out_dir) / filename).string());
    save_sidecar((fs::path(f.out_dir) / filename).string(), s);
    rows.push_back({s.id, filename, split_of(s.id), 0});
  }
  write_manifest((fs::path(f.out_dir) / "manifest.csv").string(), rows);
  std::cout << "generated " << subjects.size() << " subjects (" << sc.H << "x" << sc.W
            << "x" << sc.D << ", T=" << sc.T_total << ", seed=" << sc.seed << ") -> "
            << f.out_dir << "/manifest.csv\n";
  return 0;
}

int cmd_train(const CommonFlags& f) {
  if (f.data_path.empty()) throw ConfigError("train requires --data <manifest.csv>");
  ModelConfig cfg = build_model_config(f);
  LoadedDataset data = load_dataset(f.data_path);
  fs::create_directories(f.out_dir);
  TrainOptions opt;
  opt.run_seed = cfg.seed;

  if (f.folds > 0) {
    CvResult cv = run_cv(data.subjects, cfg, f.folds, f.repeats, opt);
    write_cv_csv((fs::path(f.out_dir) / "cv_runs.csv").string(),
                 (fs::path(f.out_dir) / "cv_summary.csv").string(), cv);
    std::cout << "cv " << f.folds << "x" << f.repeats << " done; mean loss " << cv.mean[0]
              << " -> " << f.out_dir << "/cv_summary.csv\n";
    return 0;
  }

  TrainResult tr = train_model(data.subjects, data.split, cfg, opt);
  BrainMT model(cfg);
  model.restore(tr.best_params);
  save_checkpoint((fs::path(f.out_dir) / "checkpoint.bmt").string(), cfg, model.params());
  write_metrics_csv((fs::path(f.out_dir) / "metrics.csv").string(), cfg.task, tr.history);
  std::cout << "trained " << tr.steps << " steps; best epoch " << tr.best_epoch
            << " val loss " << tr.best_val_loss << " -> " << f.out_dir
            << "/checkpoint.bmt\n";
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  if (f.checkpoint_path.empty()) throw ConfigError("eval requires --checkpoint");
  if (f.data_path.empty()) throw ConfigError("eval requires --data <manifest.csv>");
  Checkpoint ck = load_checkpoint(f.checkpoint_path);
  BrainMT model = model_from_checkpoint(ck);
  LoadedDataset data = load_dataset(f.data_path);
  if (data.split.test.empty()) throw ConfigError("manifest has no test split");
  TrainOptions opt;
  opt.run_seed = ck.cfg.seed;

  std::vector<double> preds = predict_split(model, data.subjects, data.split.test, opt);
  std::vector<MetricRow> rows;
  MetricRow row;
  row.epoch = 0;
  row.split = "test";
  std::vector<double> targets;
  std::vector<int> labels;
  for (const auto& id : data.split.test)
    for (const auto& s : data.subjects)
      if (s.id == id) {
        targets.push_back(ck.cfg.task == Task::regression ? s.cognition_score
                                                          : s.sex_label);
        labels.push_back(s.sex_label);
      }
  double loss = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (ck.cfg.task == Task::regression) {
      double d = preds[i] - targets[i];
      loss += d * d;
    } else {
      loss += std::max(preds[i], 0.0) + std::log1p(std::exp(-std::abs(preds[i]))) -
              targets[i] * preds[i];
    }
  }
  row.loss = loss / preds.size();
  if (ck.cfg.task == Task::regression) {
    auto m = evaluate_regression(preds, targets);
    row.m1 = m.mse;
    row.m2 = m.mae;
    row.m3 = m.r;
    std::cout << "test mse " << m.mse << " mae " << m.mae << " r " << m.r << "\n";
  } else {
    auto m = evaluate_classification(preds, labels);
    row.m1 = m.acc;
    row.m2 = m.bacc;
    row.m3 = m.auroc;
    std::cout << "test acc " << m.acc << " bacc " << m.bacc << " auroc " << m.auroc
              << "\n";
  }
  rows.push_back(row);
  fs::create_directories(f.out_dir);
  write_metrics_csv((fs::path(f.out_dir) / "eval_metrics.csv").string(), ck.cfg.task, rows);
  return 0;
}

int cmd_attribute(const CommonFlags& f, const std::string& volume_path, int steps) {
  if (f.checkpoint_path.empty()) throw ConfigError("attribute requires --checkpoint");
  if (volume_path.empty()) throw ConfigError("attribute requires --volume");
  Checkpoint ck = load_checkpoint(f.checkpoint_path);
  BrainMT model = model_from_checkpoint(ck);
  Volume4D raw = load_volume(volume_path);
  Volume4D v = raw.has_mask() ? zscore_normalize(raw) : raw;
  if (v.T != ck.cfg.T)
    v = sample_frames(v, ck.cfg.T, Rng::mix(ck.cfg.seed, 0xa77), ck.cfg.frame_sampling);
  double base = min_intensity(v);
  AttributionMap map = integrated_gradients(model, v, base, steps);
  fs::create_directories(f.out_dir);
  save_volume(map.values, (fs::path(f.out_dir) / "attribution.vol").string());
  save_volume(map.time_averaged(),
              (fs::path(f.out_dir) / "attribution_tavg.vol").string());
  write_topk_csv((fs::path(f.out_dir) / "attribution_topk.csv").string(), map, 10);
  std::cout << "attribution m=" << steps << " F(x)=" << map.prediction
            << " F(baseline)=" << map.baseline_prediction << " completeness residual "
            << map.completeness_residual << " -> " << f.out_dir << "/attribution.vol\n";
  return 0;
}

int cmd_bench(const CommonFlags& f, std::vector<int> frames_list, int reps) {
  if (frames_list.size() < 2)
    throw ConfigError("bench requires --frames with at least 2 values of T");
  ModelConfig cfg = build_model_config(f);
  auto rows = run_bench(cfg, frames_list, reps);
  fs::create_directories(f.out_dir);
  write_bench_csv((fs::path(f.out_dir) / "bench.csv").string(), rows);
  std::cout << kBenchCsvHeader << "\n";
  for (const auto& r : rows)
    std::cout << r.T << "," << r.L << "," << r.param_count << "," << r.param_count_no_pt
              << "," << r.activation_elems << "," << r.workspace_elems << ","
              << r.forward_ms << "\n";
  return 0;
}

// On bench, --frames is the benchmark's T list instead of the scalar T.
void add_common_flags(CLI::App* cmd, CommonFlags& f, bool with_frames = true) {
  cmd->add_option("--config", f.config_path, "key=value configuration file");
  cmd->add_option("--preset", f.preset, "paper|desk|large|small")->capture_default_str();
  cmd->add_option("--out-dir", f.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--seed", f.seed, "random seed")->each([&f](const std::string&) {
    f.seed_set = true;
  });
  cmd->add_option("--scan-order", f.scan_order, "temporal_first|spatial_first");
  cmd->add_option("--task", f.task, "regression|classification");
  if (with_frames) cmd->add_option("--frames", f.frames, "frames per sample (T)");
  cmd->add_option("--frame-sampling", f.frame_sampling, "window|subset");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BrainMT: hybrid Mamba-Transformer for 4-D volumetric time series"};
  app.require_subcommand(1);

  CommonFlags fg, ft, fe, fa, fb;
  std::string volume_path;
  int ig_steps = 256;
  std::vector<int> bench_frames;
  int bench_reps = 5;

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common_flags(gen, fg);

  CLI::App* train = app.add_subcommand("train", "train a model on a dataset manifest");
  add_common_flags(train, ft);
  train->add_option("--data", ft.data_path, "dataset manifest.csv");
  train->add_option("--folds", ft.folds, "run k-fold cross-validation instead");
  train->add_option("--repeats", ft.repeats, "CV repeats")->capture_default_str();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common_flags(eval, fe);
  eval->add_option("--data", fe.data_path, "dataset manifest.csv");
  eval->add_option("--checkpoint", fe.checkpoint_path, "checkpoint file");

  CLI::App* attr = app.add_subcommand("attribute", "integrated-gradients attribution");
  add_common_flags(attr, fa);
  attr->add_option("--checkpoint", fa.checkpoint_path, "checkpoint file");
  attr->add_option("--volume", volume_path, "input volume (.vol)");
  attr->add_option("--steps", ig_steps, "Riemann steps m")->capture_default_str();

  CLI::App* bench = app.add_subcommand("bench", "forward-pass complexity benchmark");
  add_common_flags(bench, fb, /*with_frames=*/false);
  bench->add_option("--frames", bench_frames, "comma-separated T values")
      ->delimiter(',')
      ->expected(-1);
  bench->add_option("--reps", bench_reps, "timed repetitions per T")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage errors exit 1; --help exits 0
  }

  try {
    if (gen->parsed()) return cmd_generate(fg);
    if (train->parsed()) return cmd_train(ft);
    if (eval->parsed()) return cmd_eval(fe);
    if (attr->parsed()) return cmd_attribute(fa, volume_path, ig_steps);
    if (bench->parsed()) return cmd_bench(fb, bench_frames, bench_reps);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
