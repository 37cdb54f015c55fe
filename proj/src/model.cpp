#include "brainmt/model.hpp"

namespace brainmt {

Task task_from_string(const std::string& s) {
  if (s == "regression") return Task::regression;
  if (s == "classification") return Task::classification;
  throw ConfigError("unknown task: " + s);
}

std::string to_string(Task t) {
  return t == Task::regression ? "regression" : "classification";
}

void ModelConfig::validate() const {
  if (H < 16 || W < 16 || D < 16 || H % 16 || W % 16 || D % 16)
    throw ConfigError("config: dims must be divisible by 16, got " + std::to_string(H) +
                      "x" + std::to_string(W) + "x" + std::to_string(D));
  if (T < 1) throw ConfigError("config: T must be >= 1");
  if (C < 1) throw ConfigError("config: C must be >= 1");
  if (mamba_layers < 0 || transformer_layers < 0)
    throw ConfigError("config: negative layer count");
  if (heads < 1 || Z() % heads != 0)
    throw ConfigError("config: Z = " + std::to_string(Z()) +
                      " must be divisible by heads = " + std::to_string(heads));
  if (state_dim < 1 || expansion < 1) throw ConfigError("config: bad SSM dims");
  if (batch_size < 1 || epochs < 1 || warmup_epochs < 0)
    throw ConfigError("config: bad training schedule");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"H", H}, {"W", W}, {"D", D}, {"T", T}, {"C", C},
                        {"mamba_layers", mamba_layers},
                        {"transformer_layers", transformer_layers},
                        {"heads", heads}, {"state_dim", state_dim},
                        {"expansion", expansion},
                        {"scan_order", to_string(scan_order)},
                        {"task", to_string(task)},
                        {"frame_sampling", to_string(frame_sampling)},
                        {"seed", seed}, {"lr", lr}, {"weight_decay", weight_decay},
                        {"epochs", epochs}, {"warmup_epochs", warmup_epochs},
                        {"batch_size", batch_size}, {"patience", patience}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.H = j.at("H").get<int>();
  c.W = j.at("W").get<int>();
  c.D = j.at("D").get<int>();
  c.T = j.at("T").get<int>();
  c.C = j.at("C").get<int>();
  c.mamba_layers = j.at("mamba_layers").get<int>();
  c.transformer_layers = j.at("transformer_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.state_dim = j.at("state_dim").get<int>();
  c.expansion = j.at("expansion").get<int>();
  c.scan_order = scan_order_from_string(j.at("scan_order").get<std::string>());
  c.task = task_from_string(j.at("task").get<std::string>());
  c.frame_sampling = frame_sampling_from_string(j.at("frame_sampling").get<std::string>());
  c.seed = j.at("seed").get<uint64_t>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.patience = j.at("patience").get<int>();
  c.validate();
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;  // desk defaults
  if (name == "desk") return c;
  if (name == "paper" || name == "large" || name == "small") {
    c.H = c.W = c.D = 64;
    c.T = 200;
    c.C = 24;
    c.mamba_layers = 12;
    c.transformer_layers = 8;
    if (name == "large") {
      c.mamba_layers = 24;
      c.transformer_layers = 16;
    } else if (name == "small") {
      c.mamba_layers = 6;
      c.transformer_layers = 4;
    }
    return c;
  }
  throw ConfigError("unknown preset: " + name + " (expected paper|desk|large|small)");
}

// ---------------------------------------------------------------------------

BrainMT::BrainMT(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::mix(cfg.seed, 0xb7a1187ULL));
  enc_ = make_encoder_params(cfg.C, rng);
  pos_ = make_positional_params(cfg.T, cfg.K(), cfg.Z(), rng);
  mamba_.reserve(cfg.mamba_layers);
  for (int i = 0; i < cfg.mamba_layers; ++i)
    mamba_.push_back(
        make_ssm_block_params(cfg.Z(), cfg.d_inner(), cfg.state_dim, cfg.dt_rank(), rng));
  tfm_.reserve(cfg.transformer_layers);
  for (int i = 0; i < cfg.transformer_layers; ++i)
    tfm_.push_back(make_attention_block_params(cfg.Z(), cfg.heads, rng));
  head_.ln_g = init_ones({cfg.Z()});
  head_.ln_b = init_zeros({cfg.Z()});
  head_.w1 = init_linear_weight({cfg.Z(), cfg.Z()}, cfg.Z(), rng);
  head_.b1 = init_zeros({cfg.Z()});
  head_.w2 = init_linear_weight({cfg.Z(), 1}, cfg.Z(), rng);
  head_.b2 = init_zeros({1});

  collect_encoder_params(params_, enc_);
  collect_positional_params(params_, pos_);
  for (size_t i = 0; i < mamba_.size(); ++i)
    collect_ssm_block_params(params_, "mamba" + std::to_string(i), mamba_[i]);
  for (size_t i = 0; i < tfm_.size(); ++i)
    collect_attention_block_params(params_, "tfm" + std::to_string(i), tfm_[i]);
  collect(params_, "head.ln_g", head_.ln_g);
  collect(params_, "head.ln_b", head_.ln_b);
  collect(params_, "head.w1", head_.w1);
  collect(params_, "head.b1", head_.b1);
  collect(params_, "head.w2", head_.w2);
  collect(params_, "head.b2", head_.b2);
}

Tensor BrainMT::forward(Graph& g, const Tensor& volume) const {
  if (volume.ndim() != 4 || volume.dim(0) != cfg_.T || volume.dim(1) != cfg_.H ||
      volume.dim(2) != cfg_.W || volume.dim(3) != cfg_.D)
    throw DimError("forward: volume " + shape_str(volume.shape()) + " does not match config " +
                   std::to_string(cfg_.T) + "x" + std::to_string(cfg_.H) + "x" +
                   std::to_string(cfg_.W) + "x" + std::to_string(cfg_.D));
  Tensor feats = encode_volume(g, volume, enc_);          // [T, K, Z]
  Tensor seq = add_positional_and_cls(g, feats, pos_);    // [L, Z]
  for (const auto& blk : mamba_)
    seq = mamba_block(g, seq, blk, cfg_.scan_order, cfg_.T, cfg_.K());
  for (const auto& blk : tfm_) seq = transformer_block(g, seq, blk);
  Tensor cls = g.slice_rows(seq, 0, 1);                    // [1, Z]
  Tensor h = g.layer_norm(cls, head_.ln_g, head_.ln_b);
  h = g.gelu(g.add(g.matmul(h, head_.w1), head_.b1));
  Tensor out = g.add(g.matmul(h, head_.w2), head_.b2);     // [1, 1]
  return g.reshape(out, {});
}

double BrainMT::predict(const Volume4D& v) const {
  Graph g(false);
  return forward(g, volume_to_tensor(v)).value();
}

void BrainMT::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

int64_t BrainMT::parameter_count(bool include_temporal_embedding) const {
  int64_t n = 0;
  for (const auto& p : params_) {
    if (!include_temporal_embedding && p.name == "pos.P_t") continue;
    n += p.tensor.numel();
  }
  return n;
}

std::vector<std::vector<double>> BrainMT::snapshot() const {
  std::vector<std::vector<double>> snap;
  snap.reserve(params_.size());
  for (const auto& p : params_) snap.push_back(p.tensor.data());
  return snap;
}

void BrainMT::restore(const std::vector<std::vector<double>>& snap) {
  if (snap.size() != params_.size())
    throw DimError("restore: snapshot has " + std::to_string(snap.size()) +
                   " tensors, model has " + std::to_string(params_.size()));
  for (size_t i = 0; i < snap.size(); ++i) {
    if (snap[i].size() != params_[i].tensor.data().size())
      throw DimError("restore: size mismatch on " + params_[i].name);
    params_[i].tensor.mutable_data() = snap[i];
  }
}

Tensor volume_to_tensor(const Volume4D& v, bool requires_grad) {
  return Tensor({v.T, v.H, v.W, v.D}, v.data, requires_grad);
}

}  // namespace brainmt
