#pragma once

#include "brainmt/params.hpp"
#include "brainmt/tensor.hpp"

namespace brainmt {

// Token traversal order for the flattened (T*K) body. temporal_first is
// time-fastest (index = k*T + t, all frames of one spatial cell contiguous);
// spatial_first is the canonical space-fastest layout (index = t*K + k).
enum class ScanOrder { temporal_first, spatial_first };
ScanOrder scan_order_from_string(const std::string& s);
std::string to_string(ScanOrder o);

// Index permutation taking a body laid out in `from` order to `to` order.
std::vector<int64_t> reorder_permutation(ScanOrder from, ScanOrder to, int64_t T,
                                         int64_t K);

// body [(T*K), Z] -> reordered [(T*K), Z]; cls is excluded by contract.
Tensor reorder(Graph& g, const Tensor& body, ScanOrder from, ScanOrder to, int64_t T,
               int64_t K);

// One scan direction of the bidirectional block. The input projection emits
// both the SSM branch x and the gate z.
struct SsmDirectionParams {
  Tensor in_proj_w;        // [Z, 2*d_inner]
  Tensor in_proj_b;        // [2*d_inner]
  Tensor conv_w;           // [d_inner, conv_width]
  Tensor conv_b;           // [d_inner]
  Tensor dt_w1;            // [d_inner, dt_rank]
  Tensor dt_w2;            // [dt_rank, d_inner]
  Tensor dt_b;             // [d_inner]
  Tensor B_w;              // [d_inner, N]
  Tensor C_w;              // [d_inner, N]
  Tensor out_w;            // [d_inner, Z]
  Tensor out_b;            // [Z]
};

// Bidirectional selective-SSM block. A is shared between directions and
// stored directly as the negative-real diagonal values [d_inner, N].
struct SsmBlockParams {
  Tensor A;
  SsmDirectionParams fwd, bwd;
  Tensor ln_g, ln_b;  // pre-norm
};

inline constexpr int kConvWidth = 4;

SsmBlockParams make_ssm_block_params(int Z, int d_inner, int N, int dt_rank, Rng& rng);
void collect_ssm_block_params(ParamList& out, const std::string& prefix,
                              const SsmBlockParams& p);

// Ties the backward direction to the forward one (test fixture for the
// reversal-equivariance property).
void tie_directions(SsmBlockParams& p);

// One causal direction applied to an already-normalized sequence [L, Z]:
// project -> silu(causal conv) -> selective scan, gated by silu(z), then the
// per-direction output projection. Strictly causal in the sequence order.
Tensor mamba_direction(Graph& g, const Tensor& seq, const SsmDirectionParams& p,
                       const Tensor& A);

// Full pre-norm residual block over [L, Z] (cls at row 0). The body rows
// [1, L) are reordered to `order` for the scan and restored afterwards; the
// backward direction runs on the reversed sequence (cls included).
Tensor mamba_block(Graph& g, const Tensor& seq, const SsmBlockParams& p,
                   ScanOrder order, int64_t T, int64_t K);

}  // namespace brainmt
