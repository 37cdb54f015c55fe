#pragma once

#include "brainmt/params.hpp"
#include "brainmt/tensor.hpp"

namespace brainmt {

// One hierarchical stage: a shape-preserving residual body
//   x_hat = GELU(LN(conv(x))), out = LN(conv(x_hat)) + x
// followed by a stride-2 kernel-2 downsampling conv that doubles channels.
// LN acts over the channel axis at each voxel.
struct ConvStageParams {
  Tensor w1, b1, ln1_g, ln1_b;
  Tensor w2, b2, ln2_g, ln2_b;
  Tensor wd, bd;  // downsample
};

// Patch embedding (two k=3 s=2 p=1 convs with a GELU between, partially
// overlapping patches) followed by the two downsampling stages.
struct EncoderParams {
  Tensor pe_w1, pe_b1, pe_w2, pe_b2;
  ConvStageParams stage1, stage2;
};

EncoderParams make_encoder_params(int C, Rng& rng);
void collect_encoder_params(ParamList& out, const EncoderParams& p);

// volume frame [1, H, W, D] -> [C, H/4, W/4, D/4]
Tensor patch_embed(Graph& g, const Tensor& frame, const EncoderParams& p);

// [Cin, E, E, E] -> [2*Cin, E/2, E/2, E/2]
Tensor conv_stage(Graph& g, const Tensor& x, const ConvStageParams& p);

// [T, H, W, D] volume -> [T, K, Z] stage-2 token grid, Z = 4C.
// Frames are independent: the encoder has no temporal mixing.
Tensor encode_volume(Graph& g, const Tensor& volume, const EncoderParams& p);

}  // namespace brainmt
