#include "brainmt/tokens.hpp"

namespace brainmt {

PositionalParams make_positional_params(int T, int K, int Z, Rng& rng) {
  PositionalParams p;
  p.P_s = init_trunc_normal({1, K, Z}, 0.02, rng);
  p.P_t = init_trunc_normal({T, 1, Z}, 0.02, rng);
  p.X_cls = init_trunc_normal({1, Z}, 0.02, rng);
  return p;
}

void collect_positional_params(ParamList& out, const PositionalParams& p) {
  collect(out, "pos.P_s", p.P_s);
  collect(out, "pos.P_t", p.P_t);
  collect(out, "pos.X_cls", p.X_cls);
}

Tensor add_positional_and_cls(Graph& g, const Tensor& features,
                              const PositionalParams& p) {
  if (features.ndim() != 3)
    throw DimError("add_positional_and_cls: expected [T,K,Z], got " +
                   shape_str(features.shape()));
  int64_t T = features.dim(0), K = features.dim(1), Z = features.dim(2);
  if (p.P_t.dim(0) != T)
    throw DimError("add_positional_and_cls: P_t holds " + std::to_string(p.P_t.dim(0)) +
                   " frames but features hold " + std::to_string(T));
  if (p.P_s.dim(1) != K || p.P_s.dim(2) != Z)
    throw DimError("add_positional_and_cls: P_s shape " + shape_str(p.P_s.shape()) +
                   " does not match features " + shape_str(features.shape()));
  Tensor body = g.add(g.add(features, p.P_s), p.P_t);  // broadcast over T and K
  Tensor flat = g.reshape(body, {T * K, Z});
  return g.concat_rows({p.X_cls, flat});  // [T*K + 1, Z]
}

}  // namespace brainmt
