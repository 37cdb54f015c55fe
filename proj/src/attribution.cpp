#include "brainmt/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "brainmt/parallel.hpp"

namespace brainmt {

Volume4D AttributionMap::time_averaged() const {
  Volume4D avg(1, values.H, values.W, values.D);
  int64_t sp = values.spatial();
  for (int t = 0; t < values.T; ++t)
    for (int64_t p = 0; p < sp; ++p)
      avg.data[p] += values.data[static_cast<int64_t>(t) * sp + p];
  for (int64_t p = 0; p < sp; ++p) avg.data[p] /= values.T;
  avg.mask = values.mask;
  return avg;
}

double min_intensity(const Volume4D& v) {
  double m = v.data[0];
  for (double x : v.data) m = std::min(m, x);
  return m;
}

AttributionMap integrated_gradients_fn(const ScalarFn& f, const Volume4D& x,
                                       double baseline_value, int m) {
  if (m < 1) throw ConfigError("integrated_gradients: steps must be >= 1");
  x.validate();
  const int64_t n = x.size();

  AttributionMap map;
  map.baseline_value = baseline_value;
  map.steps = m;

  auto predict_at = [&](double alpha) {
    Tensor point({x.T, x.H, x.W, x.D}, 0.0, false);
    for (int64_t i = 0; i < n; ++i)
      point.mutable_data()[i] = baseline_value + alpha * (x.data[i] - baseline_value);
    Graph g(false);
    return f(g, point).value();
  };
  map.prediction = predict_at(1.0);
  map.baseline_prediction = predict_at(0.0);

  // m+1 path points, endpoint weight 1/2. Gradients are independent; each
  // worker owns a contiguous j range and partials are combined in range
  // order, so the summation order is fixed.
  int64_t points = static_cast<int64_t>(m) + 1;
  int nworkers = static_cast<int>(std::min<int64_t>(parallel::max_threads(), points));
  int64_t chunk = (points + nworkers - 1) / nworkers;
  int nchunks = static_cast<int>((points + chunk - 1) / chunk);
  std::vector<std::vector<double>> partial(nchunks, std::vector<double>(n, 0.0));
  parallel::parallel_for(points, [&](int64_t lo, int64_t hi) {
    int slot = static_cast<int>(lo / chunk);
    std::vector<double>& acc = partial[slot];
    for (int64_t j = lo; j < hi; ++j) {
      double alpha = static_cast<double>(j) / m;
      double weight = (j == 0 || j == m) ? 0.5 : 1.0;
      Tensor point({x.T, x.H, x.W, x.D}, 0.0, true);
      for (int64_t i = 0; i < n; ++i)
        point.mutable_data()[i] = baseline_value + alpha * (x.data[i] - baseline_value);
      Graph g(true);
      Tensor pred = f(g, point);
      g.backward(pred);
      const std::vector<double>& grad = point.grad();
      for (int64_t i = 0; i < n; ++i) acc[i] += weight * grad[i];
    }
  }, 1);

  map.values = x;
  std::fill(map.values.data.begin(), map.values.data.end(), 0.0);
  for (const auto& acc : partial)
    for (int64_t i = 0; i < n; ++i) map.values.data[i] += acc[i];
  double inv_m = 1.0 / static_cast<double>(m);
  for (int64_t i = 0; i < n; ++i)
    map.values.data[i] *= inv_m * (x.data[i] - baseline_value);

  double total = 0.0;
  for (double v : map.values.data) total += v;
  map.completeness_residual =
      std::abs(total - (map.prediction - map.baseline_prediction));
  return map;
}

AttributionMap integrated_gradients(const BrainMT& model, const Volume4D& x,
                                    double baseline_value, int m) {
  return integrated_gradients_fn(
      [&model](Graph& g, const Tensor& in) { return model.forward(g, in); }, x,
      baseline_value, m);
}

void write_topk_csv(const std::string& path, const AttributionMap& map, int k) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "frame,rank,h,w,d,value\n";
  const Volume4D& v = map.values;
  int64_t sp = v.spatial();
  std::vector<int64_t> idx(sp);
  for (int t = 0; t < v.T; ++t) {
    const double* frame = v.data.data() + static_cast<int64_t>(t) * sp;
    for (int64_t i = 0; i < sp; ++i) idx[i] = i;
    int64_t kk = std::min<int64_t>(k, sp);
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                      [&](int64_t a, int64_t b) {
                        double fa = std::abs(frame[a]), fb = std::abs(frame[b]);
                        return fa != fb ? fa > fb : a < b;
                      });
    for (int64_t r = 0; r < kk; ++r) {
      int64_t p = idx[r];
      int64_t h = p / (static_cast<int64_t>(v.W) * v.D);
      int64_t w = (p / v.D) % v.W;
      int64_t d = p % v.D;
      f << t << "," << r << "," << h << "," << w << "," << d << "," << frame[p] << "\n";
    }
  }
}

}  // namespace brainmt
