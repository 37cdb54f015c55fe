#pragma once

#include <functional>

#include "brainmt/model.hpp"

namespace brainmt {

struct AttributionMap {
  Volume4D values;  // per-voxel-per-frame attributions, input dims
  double baseline_value = 0.0;
  int steps = 0;
  double prediction = 0.0;           // F(x)
  double baseline_prediction = 0.0;  // F(baseline)
  double completeness_residual = 0.0;

  // Frame-mean 3-D map (T=1 volume) for reporting.
  Volume4D time_averaged() const;
};

// The minimum intensity of the (normalized) input; the constant baseline
// volume mirrors the background fill of zscore_normalize.
double min_intensity(const Volume4D& v);

// Trapezoid approximation of the path integral over m intervals:
//   IG_i = (x_i - x'_i) * (1/m) * [ g_i(0)/2 + sum_{j=1..m-1} g_i(j/m)
//                                   + g_i(1)/2 ],
//   g_i(a) = dF(x' + a(x - x')) / dx_i.
// The trapezoid rule replaces the right-endpoint sum because its O(1/m)
// leading error term, (g(1)-g(0))/2m, measurably exceeds the completeness
// tolerance at m=256 on desk-scale models; the trapezoid's O(1/m^2) error
// sits well inside it.
AttributionMap integrated_gradients(const BrainMT& model, const Volume4D& x,
                                    double baseline_value, int m);

// Same quadrature against an arbitrary differentiable functional; the model
// path above delegates here, and tests drive closed-form functionals.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
AttributionMap integrated_gradients_fn(const ScalarFn& f, const Volume4D& x,
                                       double baseline_value, int m);

// rank-ordered per-frame peak coordinates: frame,rank,h,w,d,value
void write_topk_csv(const std::string& path, const AttributionMap& map, int k);

}  // namespace brainmt
