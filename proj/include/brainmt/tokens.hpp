#pragma once

#include "brainmt/params.hpp"
#include "brainmt/tensor.hpp"

namespace brainmt {

// Learned spatial/temporal positional embeddings and the cls token.
// The cls token is prepended after the positional sums and receives no
// positional term of its own.
struct PositionalParams {
  Tensor P_s;    // [1, K, Z]
  Tensor P_t;    // [T, 1, Z]
  Tensor X_cls;  // [1, Z]
};

PositionalParams make_positional_params(int T, int K, int Z, Rng& rng);
void collect_positional_params(ParamList& out, const PositionalParams& p);

// features [T, K, Z] -> [L, Z] with L = T*K + 1; body token (t,k) =
// feature(t,k) + P_s[k] + P_t[t]; spatial-major flattening (t outer, k inner);
// cls at row 0.
Tensor add_positional_and_cls(Graph& g, const Tensor& features,
                              const PositionalParams& p);

}  // namespace brainmt
