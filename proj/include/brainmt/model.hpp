#pragma once

#include <string>

#include <json.hpp>

#include "brainmt/attention.hpp"
#include "brainmt/encoder.hpp"
#include "brainmt/ssm.hpp"
#include "brainmt/tokens.hpp"
#include "brainmt/volume.hpp"

namespace brainmt {

enum class Task { regression, classification };
Task task_from_string(const std::string& s);
std::string to_string(Task t);

struct ModelConfig {
  int H = 32, W = 32, D = 32;
  int T = 16;
  int C = 8;
  int mamba_layers = 4;
  int transformer_layers = 2;
  int heads = 8;
  int state_dim = 16;
  int expansion = 2;
  ScanOrder scan_order = ScanOrder::temporal_first;
  Task task = Task::regression;
  FrameSampling frame_sampling = FrameSampling::window;
  uint64_t seed = 0;

  // training
  double lr = 2e-4;
  double weight_decay = 0.05;
  int epochs = 20;
  int warmup_epochs = 5;
  int batch_size = 2;
  int patience = 5;

  int Z() const { return 4 * C; }
  int K() const { return (H / 16) * (W / 16) * (D / 16); }
  int64_t L() const { return static_cast<int64_t>(T) * K() + 1; }
  int d_inner() const { return expansion * Z(); }
  int dt_rank() const { return (Z() + 15) / 16; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  // paper: 64^3, T=200, C=24, 12 Mamba / 8 transformer blocks
  // desk:  32^3, T=16,  C=8,   4 / 2
  // large: paper dims with 24 / 16; small: paper dims with 6 / 4
  static ModelConfig preset(const std::string& name);
};

struct HeadParams {
  Tensor ln_g, ln_b;
  Tensor w1, b1;  // [Z, Z]
  Tensor w2, b2;  // [Z, 1]
};

// Full BrainMT: conv encoder -> positional + cls -> Mamba stack ->
// transformer stack -> LN(cls) -> MLP head -> scalar.
class BrainMT {
 public:
  explicit BrainMT(const ModelConfig& cfg);

  // volume tensor [T, H, W, D] -> scalar prediction (regression) or logit.
  Tensor forward(Graph& g, const Tensor& volume) const;
  double predict(const Volume4D& v) const;  // no-grad convenience

  const ModelConfig& config() const { return cfg_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  void zero_grads();
  int64_t parameter_count(bool include_temporal_embedding = true) const;

  // Direct access for table-driven tests.
  std::vector<SsmBlockParams>& mamba_blocks() { return mamba_; }
  EncoderParams& encoder() { return enc_; }

  // Parameter data snapshot/restore (checkpointing, best-epoch tracking).
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& snap);

 private:
  ModelConfig cfg_;
  EncoderParams enc_;
  PositionalParams pos_;
  std::vector<SsmBlockParams> mamba_;
  std::vector<AttentionBlockParams> tfm_;
  HeadParams head_;
  ParamList params_;
};

Tensor volume_to_tensor(const Volume4D& v, bool requires_grad = false);

}  // namespace brainmt
