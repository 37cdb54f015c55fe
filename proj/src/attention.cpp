#include "brainmt/attention.hpp"

#include <cmath>

#include "brainmt/parallel.hpp"

namespace brainmt {

AttentionBlockParams make_attention_block_params(int Z, int heads, Rng& rng) {
  if (heads < 1 || Z % heads != 0)
    throw ConfigError("attention: token dim " + std::to_string(Z) +
                      " not divisible by heads " + std::to_string(heads));
  AttentionBlockParams p;
  p.heads = heads;
  p.ln1_g = init_ones({Z});
  p.ln1_b = init_zeros({Z});
  p.wq = init_linear_weight({Z, Z}, Z, rng);
  p.bq = init_zeros({Z});
  p.wk = init_linear_weight({Z, Z}, Z, rng);
  p.bk = init_zeros({Z});
  p.wv = init_linear_weight({Z, Z}, Z, rng);
  p.bv = init_zeros({Z});
  p.wo = init_linear_weight({Z, Z}, Z, rng);
  p.bo = init_zeros({Z});
  p.ln2_g = init_ones({Z});
  p.ln2_b = init_zeros({Z});
  p.w1 = init_linear_weight({Z, 4 * Z}, Z, rng);
  p.b1 = init_zeros({4LL * Z});
  p.w2 = init_linear_weight({4 * Z, Z}, 4LL * Z, rng);
  p.b2 = init_zeros({Z});
  return p;
}

void collect_attention_block_params(ParamList& out, const std::string& prefix,
                                    const AttentionBlockParams& p) {
  collect(out, prefix + ".ln1_g", p.ln1_g);
  collect(out, prefix + ".ln1_b", p.ln1_b);
  collect(out, prefix + ".wq", p.wq);
  collect(out, prefix + ".bq", p.bq);
  collect(out, prefix + ".wk", p.wk);
  collect(out, prefix + ".bk", p.bk);
  collect(out, prefix + ".wv", p.wv);
  collect(out, prefix + ".bv", p.bv);
  collect(out, prefix + ".wo", p.wo);
  collect(out, prefix + ".bo", p.bo);
  collect(out, prefix + ".ln2_g", p.ln2_g);
  collect(out, prefix + ".ln2_b", p.ln2_b);
  collect(out, prefix + ".w1", p.w1);
  collect(out, prefix + ".b1", p.b1);
  collect(out, prefix + ".w2", p.w2);
  collect(out, prefix + ".b2", p.b2);
}

namespace {

// One query row at a time: softmax(q K^T / sqrt(dh)) V without storing the
// L x L score matrix. Keeps forward memory linear in L.
Tensor streamed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          int heads) {
  int64_t L = q.dim(0), Z = q.dim(1);
  int64_t dh = Z / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({L, Z}, 0.0, false);
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  double* po = out.mutable_data().data();
  parallel::parallel_for(L, [&](int64_t lo, int64_t hi) {
    std::vector<double> scores(L);
    for (int64_t i = lo; i < hi; ++i) {
      for (int h = 0; h < heads; ++h) {
        const double* qi = pq + i * Z + h * dh;
        double mx = -HUGE_VAL;
        for (int64_t j = 0; j < L; ++j) {
          const double* kj = pk + j * Z + h * dh;
          double s = 0.0;
          for (int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double zsum = 0.0;
        for (int64_t j = 0; j < L; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          zsum += scores[j];
        }
        double izum = 1.0 / zsum;
        double* oi = po + i * Z + h * dh;
        for (int64_t j = 0; j < L; ++j) {
          double w = scores[j] * izum;
          const double* vj = pv + j * Z + h * dh;
          for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }, 8);
  check_finite(out.data(), "attention");
  return out;
}

}  // namespace

Tensor multi_head_attention(Graph& g, const Tensor& seq, const AttentionBlockParams& p) {
  int64_t L = seq.dim(0), Z = seq.dim(1);
  int heads = p.heads;
  if (heads < 1 || Z % heads != 0)
    throw ConfigError("attention: token dim " + std::to_string(Z) +
                      " not divisible by heads " + std::to_string(heads));
  int64_t dh = Z / heads;
  Tensor q = g.add(g.matmul(seq, p.wq), p.bq);
  Tensor k = g.add(g.matmul(seq, p.wk), p.bk);
  Tensor v = g.add(g.matmul(seq, p.wv), p.bv);

  Tensor ctx;
  if (g.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    // [L, Z] -> [heads, L, dh]
    auto split = [&](const Tensor& t) {
      return g.permute(g.reshape(t, {L, heads, dh}), {1, 0, 2});
    };
    Tensor qh = split(q), kh = split(k), vh = split(v);
    Tensor kt = g.permute(kh, {0, 2, 1});  // [heads, dh, L]
    Tensor scores = g.scale(g.matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = g.softmax(scores, 2);
    Tensor mixed = g.matmul(probs, vh);  // [heads, L, dh]
    ctx = g.reshape(g.permute(mixed, {1, 0, 2}), {L, Z});
  } else {
    ctx = streamed_attention(q, k, v, heads);
  }
  return g.add(g.matmul(ctx, p.wo), p.bo);
}

Tensor transformer_block(Graph& g, const Tensor& seq, const AttentionBlockParams& p) {
  Tensor h = g.add(seq, multi_head_attention(g, g.layer_norm(seq, p.ln1_g, p.ln1_b), p));
  Tensor m = g.layer_norm(h, p.ln2_g, p.ln2_b);
  m = g.add(g.matmul(g.gelu(g.add(g.matmul(m, p.w1), p.b1)), p.w2), p.b2);
  return g.add(h, m);
}

}  // namespace brainmt
