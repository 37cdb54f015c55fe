#pragma once

#include <string>
#include <vector>

#include "brainmt/rng.hpp"
#include "brainmt/tensor.hpp"

namespace brainmt {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, truncated
// normal (std 0.02) embeddings. Pinned so runs are reproducible bit-for-bit.
inline Tensor init_linear_weight(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(shape, 0.0, true);
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

inline Tensor init_zeros(Shape shape) { return Tensor(std::move(shape), 0.0, true); }

inline Tensor init_ones(Shape shape) { return Tensor(std::move(shape), 1.0, true); }

inline Tensor init_trunc_normal(Shape shape, double std_dev, Rng& rng) {
  Tensor t(shape, 0.0, true);
  for (auto& v : t.mutable_data()) v = rng.trunc_normal(std_dev);
  return t;
}

inline void collect(ParamList& out, const std::string& name, const Tensor& t) {
  out.push_back({name, t});
}

}  // namespace brainmt
