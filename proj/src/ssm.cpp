#include "brainmt/ssm.hpp"

#include <cmath>

namespace brainmt {

ScanOrder scan_order_from_string(const std::string& s) {
  if (s == "temporal_first" || s == "temporal-first") return ScanOrder::temporal_first;
  if (s == "spatial_first" || s == "spatial-first") return ScanOrder::spatial_first;
  throw ConfigError("unknown scan order: " + s);
}

std::string to_string(ScanOrder o) {
  return o == ScanOrder::temporal_first ? "temporal_first" : "spatial_first";
}

std::vector<int64_t> reorder_permutation(ScanOrder from, ScanOrder to, int64_t T,
                                         int64_t K) {
  std::vector<int64_t> perm(T * K);
  if (from == to) {
    for (int64_t i = 0; i < T * K; ++i) perm[i] = i;
    return perm;
  }
  if (to == ScanOrder::temporal_first) {
    // out[k*T + t] = in[t*K + k]
    for (int64_t k = 0; k < K; ++k)
      for (int64_t t = 0; t < T; ++t) perm[k * T + t] = t * K + k;
  } else {
    // out[t*K + k] = in[k*T + t]
    for (int64_t t = 0; t < T; ++t)
      for (int64_t k = 0; k < K; ++k) perm[t * K + k] = k * T + t;
  }
  return perm;
}

Tensor reorder(Graph& g, const Tensor& body, ScanOrder from, ScanOrder to, int64_t T,
               int64_t K) {
  if (body.dim(0) != T * K)
    throw DimError("reorder: body has " + std::to_string(body.dim(0)) +
                   " rows, expected T*K = " + std::to_string(T * K));
  return g.permute_rows(body, reorder_permutation(from, to, T, K));
}

SsmBlockParams make_ssm_block_params(int Z, int d_inner, int N, int dt_rank, Rng& rng) {
  SsmBlockParams p;
  // A_n = -(n+1) on every channel: the referenced Mamba default.
  p.A = Tensor({d_inner, N}, 0.0, true);
  for (int c = 0; c < d_inner; ++c)
    for (int n = 0; n < N; ++n) p.A.mutable_data()[c * N + n] = -(n + 1.0);
  auto direction = [&]() {
    SsmDirectionParams d;
    d.in_proj_w = init_linear_weight({Z, 2 * d_inner}, Z, rng);
    d.in_proj_b = init_zeros({2LL * d_inner});
    d.conv_w = init_linear_weight({d_inner, kConvWidth}, kConvWidth, rng);
    d.conv_b = init_zeros({d_inner});
    d.dt_w1 = init_linear_weight({d_inner, dt_rank}, d_inner, rng);
    d.dt_w2 = init_linear_weight({dt_rank, d_inner}, dt_rank, rng);
    // softplus(dt_b) log-uniform in [1e-3, 1e-1].
    d.dt_b = Tensor({d_inner}, 0.0, true);
    for (int c = 0; c < d_inner; ++c) {
      double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      d.dt_b.mutable_data()[c] = std::log(std::expm1(dt));  // softplus inverse
    }
    d.B_w = init_linear_weight({d_inner, N}, d_inner, rng);
    d.C_w = init_linear_weight({d_inner, N}, d_inner, rng);
    d.out_w = init_linear_weight({d_inner, Z}, d_inner, rng);
    d.out_b = init_zeros({Z});
    return d;
  };
  p.fwd = direction();
  p.bwd = direction();
  p.ln_g = init_ones({Z});
  p.ln_b = init_zeros({Z});
  return p;
}

namespace {

void collect_direction(ParamList& out, const std::string& prefix,
                       const SsmDirectionParams& d) {
  collect(out, prefix + ".in_proj_w", d.in_proj_w);
  collect(out, prefix + ".in_proj_b", d.in_proj_b);
  collect(out, prefix + ".conv_w", d.conv_w);
  collect(out, prefix + ".conv_b", d.conv_b);
  collect(out, prefix + ".dt_w1", d.dt_w1);
  collect(out, prefix + ".dt_w2", d.dt_w2);
  collect(out, prefix + ".dt_b", d.dt_b);
  collect(out, prefix + ".B_w", d.B_w);
  collect(out, prefix + ".C_w", d.C_w);
  collect(out, prefix + ".out_w", d.out_w);
  collect(out, prefix + ".out_b", d.out_b);
}

}  // namespace

void collect_ssm_block_params(ParamList& out, const std::string& prefix,
                              const SsmBlockParams& p) {
  collect(out, prefix + ".A", p.A);
  collect_direction(out, prefix + ".fwd", p.fwd);
  collect_direction(out, prefix + ".bwd", p.bwd);
  collect(out, prefix + ".ln_g", p.ln_g);
  collect(out, prefix + ".ln_b", p.ln_b);
}

void tie_directions(SsmBlockParams& p) { p.bwd = p.fwd; }

Tensor mamba_direction(Graph& g, const Tensor& seq, const SsmDirectionParams& p,
                       const Tensor& A) {
  int64_t d_inner = A.dim(0);
  Tensor xz = g.add(g.matmul(seq, p.in_proj_w), p.in_proj_b);  // [L, 2d]
  Tensor x = g.slice_cols(xz, 0, d_inner);
  Tensor z = g.slice_cols(xz, d_inner, 2 * d_inner);
  Tensor u = g.silu(g.conv1d_causal(x, p.conv_w, p.conv_b));
  Tensor delta = g.softplus(g.add(g.matmul(g.matmul(u, p.dt_w1), p.dt_w2), p.dt_b));
  Tensor B = g.matmul(u, p.B_w);  // [L, N]
  Tensor C = g.matmul(u, p.C_w);
  Tensor y = g.selective_scan(u, delta, B, C, A);
  Tensor gated = g.mul(y, g.silu(z));
  return g.add(g.matmul(gated, p.out_w), p.out_b);  // [L, Z]
}

Tensor mamba_block(Graph& g, const Tensor& seq, const SsmBlockParams& p,
                   ScanOrder order, int64_t T, int64_t K) {
  int64_t L = seq.dim(0);
  if (L != T * K + 1)
    throw DimError("mamba_block: sequence length " + std::to_string(L) +
                   " != T*K + 1 = " + std::to_string(T * K + 1));
  Tensor h = g.layer_norm(seq, p.ln_g, p.ln_b);

  // Reorder body rows for the scan, cls pinned at row 0.
  std::vector<int64_t> body_perm =
      reorder_permutation(ScanOrder::spatial_first, order, T, K);
  std::vector<int64_t> full_perm(L);
  full_perm[0] = 0;
  for (int64_t i = 0; i < T * K; ++i) full_perm[i + 1] = body_perm[i] + 1;
  Tensor scan_in = g.permute_rows(h, full_perm);

  Tensor o_fwd = mamba_direction(g, scan_in, p.fwd, p.A);
  Tensor o_bwd =
      g.reverse_rows(mamba_direction(g, g.reverse_rows(scan_in), p.bwd, p.A));
  Tensor mixed = g.add(o_fwd, o_bwd);

  // Inverse permutation restores the canonical layout.
  std::vector<int64_t> inv(L);
  for (int64_t i = 0; i < L; ++i) inv[full_perm[i]] = i;
  Tensor restored = g.permute_rows(mixed, inv);
  return g.add(seq, restored);
}

}  // namespace brainmt
