#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "brainmt/tokens.hpp"
#include "gradcheck.hpp"

using namespace brainmt;
using namespace brainmt::testing;

TEST_CASE("zero positional params leave body tokens equal to features") {
  Rng rng(1);
  PositionalParams p;
  p.P_s = Tensor({1, 3, 4}, 0.0, false);
  p.P_t = Tensor({2, 1, 4}, 0.0, false);
  p.X_cls = random_tensor({1, 4}, rng, 1.0, false);
  Tensor f = random_tensor({2, 3, 4}, rng, 1.0, false);
  Graph g(false);
  Tensor seq = add_positional_and_cls(g, f, p);
  REQUIRE(seq.shape() == Shape{7, 4});  // L = T*K + 1 = 7
  for (int i = 0; i < 4; ++i) CHECK(seq.data()[i] == p.X_cls.data()[i]);
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(seq.data()[4 + i] == f.data()[i]);
}

TEST_CASE("token count and layout") {
  Rng rng(2);
  PositionalParams p = make_positional_params(2, 3, 4, rng);
  Tensor f = random_tensor({2, 3, 4}, rng, 1.0, false);
  Graph g(false);
  Tensor seq = add_positional_and_cls(g, f, p);
  CHECK(seq.dim(0) == 2 * 3 + 1);
  // body token (t,k) = f(t,k) + P_s[k] + P_t[t], spatial-major flattening
  for (int t = 0; t < 2; ++t)
    for (int k = 0; k < 3; ++k)
      for (int z = 0; z < 4; ++z) {
        double expect = f.data()[(t * 3 + k) * 4 + z] + p.P_s.data()[k * 4 + z] +
                        p.P_t.data()[t * 4 + z];
        CHECK(seq.data()[(1 + t * 3 + k) * 4 + z] == doctest::Approx(expect).epsilon(1e-15));
      }
}

TEST_CASE("broadcast structure: token differences depend only on P_s") {
  Rng rng(3);
  PositionalParams p = make_positional_params(3, 4, 5, rng);
  Tensor zero({3, 4, 5}, 0.0, false);
  Graph g(false);
  Tensor seq = add_positional_and_cls(g, zero, p);
  for (int k = 0; k < 4; ++k)
    for (int kp = 0; kp < 4; ++kp)
      for (int z = 0; z < 5; ++z) {
        double d0 = seq.data()[(1 + 0 * 4 + k) * 5 + z] - seq.data()[(1 + 0 * 4 + kp) * 5 + z];
        for (int t = 1; t < 3; ++t) {
          double dt = seq.data()[(1 + t * 4 + k) * 5 + z] - seq.data()[(1 + t * 4 + kp) * 5 + z];
          CHECK(dt == doctest::Approx(d0).epsilon(1e-15));
        }
        CHECK(d0 == doctest::Approx(p.P_s.data()[k * 5 + z] - p.P_s.data()[kp * 5 + z])
                        .epsilon(1e-12));
      }
}

TEST_CASE("P_t mismatch is an error") {
  Rng rng(4);
  PositionalParams p = make_positional_params(2, 3, 4, rng);
  Tensor f = random_tensor({5, 3, 4}, rng, 1.0, false);
  Graph g(false);
  CHECK_THROWS_AS(add_positional_and_cls(g, f, p), DimError);
}

TEST_CASE("P_t gradient equals the sum of body adjoints over k") {
  Rng rng(5);
  PositionalParams p = make_positional_params(2, 3, 4, rng);
  Tensor f = random_tensor({2, 3, 4}, rng);
  Tensor r = random_tensor({7, 4}, rng, 1.0, false);
  auto res = grad_check(
      [&](Graph& g, std::vector<Tensor>& v) {
        PositionalParams q{v[1], v[2], v[3]};
        return g.sum(g.mul(add_positional_and_cls(g, v[0], q), r));
      },
      {f, p.P_s, p.P_t, p.X_cls});
  CHECK(res.max_rel_err < 1e-4);

  // Closed form: dL/dP_t[t] = sum_k body adjoint at (t, k); with loss
  // sum(seq * r) the adjoint of body row (t,k) is r[1 + t*K + k].
  Graph g;
  PositionalParams q{p.P_s, p.P_t, p.X_cls};
  Tensor loss = g.sum(g.mul(add_positional_and_cls(g, f, q), r));
  p.P_t.zero_grad();
  g.backward(loss);
  for (int t = 0; t < 2; ++t)
    for (int z = 0; z < 4; ++z) {
      double expect = 0.0;
      for (int k = 0; k < 3; ++k) expect += r.data()[(1 + t * 3 + k) * 4 + z];
      CHECK(p.P_t.grad()[t * 4 + z] == doctest::Approx(expect).epsilon(1e-12));
    }
}
