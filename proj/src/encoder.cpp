#include "brainmt/encoder.hpp"

namespace brainmt {

EncoderParams make_encoder_params(int C, Rng& rng) {
  EncoderParams p;
  p.pe_w1 = init_linear_weight({C, 1, 3, 3, 3}, 27, rng);
  p.pe_b1 = init_zeros({C});
  p.pe_w2 = init_linear_weight({C, C, 3, 3, 3}, 27LL * C, rng);
  p.pe_b2 = init_zeros({C});
  auto stage = [&](int cin) {
    ConvStageParams s;
    s.w1 = init_linear_weight({cin, cin, 3, 3, 3}, 27LL * cin, rng);
    s.b1 = init_zeros({cin});
    s.ln1_g = init_ones({cin});
    s.ln1_b = init_zeros({cin});
    s.w2 = init_linear_weight({cin, cin, 3, 3, 3}, 27LL * cin, rng);
    s.b2 = init_zeros({cin});
    s.ln2_g = init_ones({cin});
    s.ln2_b = init_zeros({cin});
    // kernel 2 is the one even-sized conv in the model; it bypasses the k-odd
    // rule of conv3d by being expressed as stride-2 patch merging below.
    s.wd = init_linear_weight({2 * cin, cin, 2, 2, 2}, 8LL * cin, rng);
    s.bd = init_zeros({2LL * cin});
    return s;
  };
  p.stage1 = stage(C);
  p.stage2 = stage(2 * C);
  return p;
}

void collect_encoder_params(ParamList& out, const EncoderParams& p) {
  collect(out, "encoder.patch.w1", p.pe_w1);
  collect(out, "encoder.patch.b1", p.pe_b1);
  collect(out, "encoder.patch.w2", p.pe_w2);
  collect(out, "encoder.patch.b2", p.pe_b2);
  auto stage = [&](const std::string& prefix, const ConvStageParams& s) {
    collect(out, prefix + ".w1", s.w1);
    collect(out, prefix + ".b1", s.b1);
    collect(out, prefix + ".ln1_g", s.ln1_g);
    collect(out, prefix + ".ln1_b", s.ln1_b);
    collect(out, prefix + ".w2", s.w2);
    collect(out, prefix + ".b2", s.b2);
    collect(out, prefix + ".ln2_g", s.ln2_g);
    collect(out, prefix + ".ln2_b", s.ln2_b);
    collect(out, prefix + ".wd", s.wd);
    collect(out, prefix + ".bd", s.bd);
  };
  stage("encoder.stage1", p.stage1);
  stage("encoder.stage2", p.stage2);
}

namespace {

// LN over the channel axis: [C, E, E, E] -> channels-last, normalize, back.
Tensor channel_layer_norm(Graph& g, const Tensor& x, const Tensor& gamma,
                          const Tensor& beta) {
  Tensor last = g.permute(x, {1, 2, 3, 0});
  Tensor normed = g.layer_norm(last, gamma, beta);
  return g.permute(normed, {3, 0, 1, 2});
}

// Stride-2 kernel-2 downsampling conv that doubles channels. conv3d is pinned
// to odd kernels, so the 2^3 taps run as eight gathered pointwise
// projections summed together; same arithmetic, fully on the tape.
Tensor downsample2x(Graph& g, const Tensor& x, const Tensor& wd, const Tensor& bd) {
  int64_t cin = x.dim(0), e1 = x.dim(1), e2 = x.dim(2), e3 = x.dim(3);
  int64_t o1 = e1 / 2, o2 = e2 / 2, o3 = e3 / 2;
  int64_t cout = wd.dim(0);
  Tensor chans_last = g.permute(g.reshape(x, {cin, e1 * e2 * e3}), {1, 0});
  Tensor wd_flat = g.reshape(wd, {cout * cin, 8});
  Tensor out;
  for (int64_t kh = 0; kh < 2; ++kh)
    for (int64_t kw = 0; kw < 2; ++kw)
      for (int64_t kd = 0; kd < 2; ++kd) {
        std::vector<int64_t> rows;
        rows.reserve(o1 * o2 * o3);
        for (int64_t h = kh; h < e1; h += 2)
          for (int64_t w = kw; w < e2; w += 2)
            for (int64_t d = kd; d < e3; d += 2)
              rows.push_back((h * e2 + w) * e3 + d);
        Tensor sub = g.permute_rows(chans_last, rows);  // [o1*o2*o3, cin]
        int64_t tap = (kh * 2 + kw) * 2 + kd;
        Tensor wmat = g.permute(
            g.reshape(g.slice_cols(wd_flat, tap, tap + 1), {cout, cin}), {1, 0});
        Tensor contrib = g.matmul(sub, wmat);
        out = out.defined() ? g.add(out, contrib) : contrib;
      }
  out = g.add(out, bd);  // broadcast over rows
  Tensor grid = g.permute(out, {1, 0});  // [cout, o1*o2*o3]
  return g.reshape(grid, {cout, o1, o2, o3});
}

}  // namespace

Tensor patch_embed(Graph& g, const Tensor& frame, const EncoderParams& p) {
  Tensor h = g.conv3d(frame, p.pe_w1, p.pe_b1, /*stride=*/2, /*pad=*/1);
  h = g.gelu(h);
  return g.conv3d(h, p.pe_w2, p.pe_b2, /*stride=*/2, /*pad=*/1);
}

Tensor conv_stage(Graph& g, const Tensor& x, const ConvStageParams& p) {
  Tensor h = g.conv3d(x, p.w1, p.b1, /*stride=*/1, /*pad=*/1);
  h = channel_layer_norm(g, h, p.ln1_g, p.ln1_b);
  h = g.gelu(h);
  h = g.conv3d(h, p.w2, p.b2, /*stride=*/1, /*pad=*/1);
  h = channel_layer_norm(g, h, p.ln2_g, p.ln2_b);
  Tensor res = g.add(h, x);
  return downsample2x(g, res, p.wd, p.bd);
}

Tensor encode_volume(Graph& g, const Tensor& volume, const EncoderParams& p) {
  if (volume.ndim() != 4)
    throw DimError("encode_volume: expected [T,H,W,D], got " + shape_str(volume.shape()));
  int64_t T = volume.dim(0);
  std::vector<Tensor> frames;
  frames.reserve(T);
  for (int64_t t = 0; t < T; ++t) {
    Tensor f = g.slice_rows(volume, t, t + 1);  // [1, H, W, D]
    Tensor e = patch_embed(g, f, p);
    e = conv_stage(g, e, p.stage1);
    e = conv_stage(g, e, p.stage2);  // [Z, H/16, W/16, D/16]
    int64_t z = e.dim(0);
    int64_t k = e.numel() / z;
    Tensor tokens = g.permute(g.reshape(e, {z, k}), {1, 0});  // [K, Z]
    frames.push_back(g.reshape(tokens, {1, k, z}));
  }
  return g.concat_rows(frames);  // [T, K, Z]
}

}  // namespace brainmt
