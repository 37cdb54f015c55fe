#pragma once

#include "brainmt/params.hpp"
#include "brainmt/tensor.hpp"

namespace brainmt {

// Pre-norm transformer block: x + MHA(LN(x)); x + MLP(LN(x)), GELU MLP with
// hidden width 4Z.
struct AttentionBlockParams {
  int heads = 8;
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv;  // [Z, Z] / [Z]
  Tensor wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;  // MLP [Z, 4Z], [4Z, Z]
};

AttentionBlockParams make_attention_block_params(int Z, int heads, Rng& rng);
void collect_attention_block_params(ParamList& out, const std::string& prefix,
                                    const AttentionBlockParams& p);

// Full non-causal softmax attention over all L tokens (cls included).
// When the graph is not recording, attention runs row-streamed so no L x L
// probability matrix is ever materialized.
Tensor multi_head_attention(Graph& g, const Tensor& seq, const AttentionBlockParams& p);

Tensor transformer_block(Graph& g, const Tensor& seq, const AttentionBlockParams& p);

}  // namespace brainmt
