#include "brainmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "brainmt/parallel.hpp"

namespace brainmt {

using parallel::parallel_for;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  impl_->shape = std::move(shape);
  impl_->data.assign(shape_numel(impl_->shape), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw DimError("tensor: shape " + shape_str(shape) + " does not match " +
                   std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

int64_t Tensor::dim(int i) const {
  int r = ndim();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw DimError("tensor: axis " + std::to_string(i) + " out of range for " +
                   shape_str(shape()));
  return impl_->shape[i];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw Error("tensor: gradient not populated");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::value() const {
  if (numel() != 1)
    throw DimError("tensor: value() on non-scalar shape " + shape_str(shape()));
  return impl_->data[0];
}

Activation activation_from_string(const std::string& name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  if (name == "softplus") return Activation::softplus;
  if (name == "exp") return Activation::exp;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation kind: " + name);
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw DimError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `s` aligned to broadcast result shape `out`
// (0 on broadcast axes).
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  int r = static_cast<int>(out.size()), rs = static_cast<int>(s.size());
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    int o = i + r - rs;
    st[o] = (s[i] == 1 && out[o] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) in output linear order.
template <class F>
void for_each_bcast(const Shape& out, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
  int r = static_cast<int>(out.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  int64_t inner = out[r - 1];
  int64_t sa_in = sa[r - 1], sb_in = sb[r - 1];
  int64_t outer = shape_numel(out) / inner;
  std::vector<int64_t> idx(r - 1, 0);
  int64_t ia = 0, ib = 0, o = 0;
  for (int64_t u = 0; u < outer; ++u) {
    int64_t a0 = ia, b0 = ib;
    for (int64_t j = 0; j < inner; ++j) {
      f(o++, a0, b0);
      a0 += sa_in;
      b0 += sb_in;
    }
    for (int d = r - 2; d >= 0; --d) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_stable(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

inline int64_t div_floor(int64_t a, int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline int64_t div_ceil(int64_t a, int64_t b) { return -div_floor(-a, b); }

}  // namespace

// ---------------------------------------------------------------------------
// Graph plumbing

bool Graph::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void Graph::record(const char* op, std::vector<Tensor> inputs, const Tensor& out,
                   std::function<void()> fn) {
  records_.push_back(Record{op, std::move(inputs), out, std::move(fn)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw DimError("backward: loss must be a scalar tensor");
  // Intermediate (op-produced) grads are per-walk scratch; only true leaves
  // accumulate across repeated backward calls.
  std::unordered_set<const double*> produced;
  for (auto& r : records_) {
    Tensor o = r.output;
    o.zero_grad();
    produced.insert(r.output.data().data());
  }
  Tensor l = loss;
  l.grad()[0] += 1.0;
  // Guarantee populated grads on true leaves even when a branch contributes
  // nothing (e.g. multiplied by an exact zero elsewhere).
  for (auto& r : records_)
    for (auto& in : r.inputs)
      if (in.defined() && in.requires_grad() && !produced.count(in.data().data())) {
        Tensor t = in;
        t.grad();
      }
  for (auto it = records_.rbegin(); it != records_.rend(); ++it)
    if (it->output.has_grad()) it->backward_fn();
}

void Graph::zero_grads() {
  for (auto& r : records_) {
    for (auto& in : r.inputs)
      if (in.defined()) {
        Tensor t = in;
        t.zero_grad();
      }
    Tensor o = r.output;
    o.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

namespace {
enum class BinKind { add, sub, mul };
}

static Tensor binary_op(bool rec, const Tensor& a, const Tensor& b,
                        BinKind kind, const char* name,
                        const std::function<void(const char*, std::vector<Tensor>,
                                                 const Tensor&, std::function<void()>)>& record) {
  Shape os = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor out(os, 0.0, rec);
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  switch (kind) {
    case BinKind::add:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] + pb[j]; });
      break;
    case BinKind::sub:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case BinKind::mul:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] * pb[j]; });
      break;
  }
  check_finite(out.data(), name);
  if (rec) {
    Tensor ta = a, tb = b;
    record(name, {a, b}, out, [ta, tb, out, os, sa, sb, kind]() mutable {
      const std::vector<double>& go = out.grad();
      if (ta.requires_grad()) {
        double* ga = ta.grad().data();
        if (kind == BinKind::mul) {
          const double* pb2 = tb.data().data();
          for_each_bcast(os, sa, sb,
                         [&](int64_t o, int64_t i, int64_t j) { ga[i] += go[o] * pb2[j]; });
        } else {
          for_each_bcast(os, sa, sb, [&](int64_t o, int64_t i, int64_t) { ga[i] += go[o]; });
        }
      }
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        if (kind == BinKind::mul) {
          const double* pa2 = ta.data().data();
          for_each_bcast(os, sa, sb,
                         [&](int64_t o, int64_t i, int64_t j) { gb[j] += go[o] * pa2[i]; });
        } else if (kind == BinKind::sub) {
          for_each_bcast(os, sa, sb, [&](int64_t o, int64_t, int64_t j) { gb[j] -= go[o]; });
        } else {
          for_each_bcast(os, sa, sb, [&](int64_t o, int64_t, int64_t j) { gb[j] += go[o]; });
        }
      }
    });
  }
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  return binary_op(should_record({&a, &b}), a, b, BinKind::add, "add",
                   [this](const char* op, std::vector<Tensor> in, const Tensor& out,
                          std::function<void()> fn) { record(op, std::move(in), out, std::move(fn)); });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  return binary_op(should_record({&a, &b}), a, b, BinKind::sub, "sub",
                   [this](const char* op, std::vector<Tensor> in, const Tensor& out,
                          std::function<void()> fn) { record(op, std::move(in), out, std::move(fn)); });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  return binary_op(should_record({&a, &b}), a, b, BinKind::mul, "mul",
                   [this](const char* op, std::vector<Tensor> in, const Tensor& out,
                          std::function<void()> fn) { record(op, std::move(in), out, std::move(fn)); });
}

Tensor Graph::scale(const Tensor& a, double c) {
  bool rec = should_record({&a});
  Tensor out(a.shape(), 0.0, rec);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  check_finite(out.data(), "scale");
  if (rec) {
    Tensor ta = a;
    record("scale", {a}, out, [ta, out, c, n]() mutable {
      const double* go = out.grad().data();
      double* ga = ta.grad().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

Tensor Graph::add_scalar(const Tensor& a, double c) {
  bool rec = should_record({&a});
  Tensor out(a.shape(), 0.0, rec);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  check_finite(out.data(), "add_scalar");
  if (rec) {
    Tensor ta = a;
    record("add_scalar", {a}, out, [ta, out, n]() mutable {
      const double* go = out.grad().data();
      double* ga = ta.grad().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

namespace {

void mm_acc(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* oi = out + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double v = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) oi[j] += v * bp[j];
    }
  }
}

}  // namespace

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw DimError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
  int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2)
    throw DimError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                   " x " + shape_str(b.shape()));
  Shape ab(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(ab, bb, "matmul");
  auto sa = bcast_strides(ab, batch);
  auto sb = bcast_strides(bb, batch);
  for (auto& s : sa) s *= m * k;
  for (auto& s : sb) s *= k * n;
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  bool rec = should_record({&a, &b});
  Tensor out(os, 0.0, rec);

  int64_t nbatch = shape_numel(batch);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();

  // Enumerate batch offsets once; reused by the backward pass.
  auto offsets = std::make_shared<std::vector<std::pair<int64_t, int64_t>>>();
  offsets->reserve(nbatch);
  for_each_bcast(batch, sa, sb,
                 [&](int64_t, int64_t ia, int64_t ib) { offsets->emplace_back(ia, ib); });

  parallel_for(nbatch, [&](int64_t lo, int64_t hi) {
    for (int64_t q = lo; q < hi; ++q)
      mm_acc(pa + (*offsets)[q].first, pb + (*offsets)[q].second, po + q * m * n, m, k, n);
  }, 2);
  check_finite(out.data(), "matmul");

  if (rec) {
    Tensor ta = a, tb = b;
    record("matmul", {a, b}, out, [ta, tb, out, offsets, m, k, n]() mutable {
      const double* go = out.grad().data();
      const double* pa2 = ta.data().data();
      const double* pb2 = tb.data().data();
      int64_t nbatch2 = static_cast<int64_t>(offsets->size());
      if (ta.requires_grad()) {
        double* ga = ta.grad().data();
        for (int64_t q = 0; q < nbatch2; ++q) {
          const double* gq = go + q * m * n;
          const double* bq = pb2 + (*offsets)[q].second;
          double* gaq = ga + (*offsets)[q].first;
          for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* gi = gq + i * n;
              const double* bp = bq + p * n;
              for (int64_t j = 0; j < n; ++j) s += gi[j] * bp[j];
              gaq[i * k + p] += s;
            }
        }
      }
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t q = 0; q < nbatch2; ++q) {
          const double* gq = go + q * m * n;
          const double* aq = pa2 + (*offsets)[q].first;
          double* gbq = gb + (*offsets)[q].second;
          for (int64_t p = 0; p < k; ++p) {
            double* gbp = gbq + p * n;
            for (int64_t i = 0; i < m; ++i) {
              double v = aq[i * k + p];
              const double* gi = gq + i * n;
              for (int64_t j = 0; j < n; ++j) gbp[j] += v * gi[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv3d

namespace {

struct Conv3dDims {
  int64_t ci, h, w, d, co, kk, ho, wo, dd;
  int stride, pad;
};

Conv3dDims conv3d_check(const Tensor& x, const Tensor& wt, const Tensor& bias,
                        int stride, int pad) {
  if (x.ndim() != 4 || wt.ndim() != 5)
    throw DimError("conv3d: expected x [C,H,W,D] and w [O,C,k,k,k], got " +
                   shape_str(x.shape()) + " and " + shape_str(wt.shape()));
  Conv3dDims s;
  s.ci = x.dim(0); s.h = x.dim(1); s.w = x.dim(2); s.d = x.dim(3);
  s.co = wt.dim(0); s.kk = wt.dim(2);
  if (wt.dim(1) != s.ci)
    throw DimError("conv3d: weight input channels " + std::to_string(wt.dim(1)) +
                   " != x channels " + std::to_string(s.ci));
  if (wt.dim(3) != s.kk || wt.dim(4) != s.kk)
    throw DimError("conv3d: kernel must be cubic, got " + shape_str(wt.shape()));
  if (s.kk % 2 == 0) throw DimError("conv3d: kernel size must be odd");
  if (stride < 1) throw DimError("conv3d: stride must be >= 1");
  if (bias.defined() && bias.numel() != s.co)
    throw DimError("conv3d: bias size " + std::to_string(bias.numel()) +
                   " != output channels " + std::to_string(s.co));
  s.stride = stride; s.pad = pad;
  s.ho = (s.h + 2 * pad - s.kk) / stride + 1;
  s.wo = (s.w + 2 * pad - s.kk) / stride + 1;
  s.dd = (s.d + 2 * pad - s.kk) / stride + 1;
  if (s.h + 2 * pad < s.kk || s.w + 2 * pad < s.kk || s.d + 2 * pad < s.kk ||
      s.ho < 1 || s.wo < 1 || s.dd < 1)
    throw DimError("conv3d: output extent < 1 for input " + shape_str(x.shape()) +
                   " kernel " + std::to_string(s.kk));
  return s;
}

// Valid output range [lo, hi] for one kernel tap: in = out*stride - pad + kt.
inline void tap_range(int64_t extent_in, int64_t extent_out, int64_t kt, int64_t stride,
                      int64_t pad, int64_t& lo, int64_t& hi) {
  lo = std::max<int64_t>(0, div_ceil(pad - kt, stride));
  hi = std::min<int64_t>(extent_out - 1, div_floor(extent_in - 1 + pad - kt, stride));
}

}  // namespace

Tensor Graph::conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride, int pad) {
  Conv3dDims s = conv3d_check(x, w, bias, stride, pad);
  bool rec = should_record({&x, &w, &bias});
  Tensor out(Shape{s.co, s.ho, s.wo, s.dd}, 0.0, rec);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pbias = bias.data().data();
  double* po = out.mutable_data().data();
  int64_t out_spatial = s.ho * s.wo * s.dd;
  int64_t in_spatial = s.h * s.w * s.d;

  parallel_for(s.co, [&](int64_t co_lo, int64_t co_hi) {
    for (int64_t co = co_lo; co < co_hi; ++co) {
      double* oc = po + co * out_spatial;
      std::fill(oc, oc + out_spatial, pbias[co]);
      for (int64_t ci = 0; ci < s.ci; ++ci) {
        const double* xc = px + ci * in_spatial;
        const double* wc = pw + (co * s.ci + ci) * s.kk * s.kk * s.kk;
        for (int64_t kh = 0; kh < s.kk; ++kh)
          for (int64_t kw = 0; kw < s.kk; ++kw)
            for (int64_t kd = 0; kd < s.kk; ++kd) {
              double wv = wc[(kh * s.kk + kw) * s.kk + kd];
              if (wv == 0.0) continue;
              int64_t hlo, hhi, wlo, whi, dlo, dhi;
              tap_range(s.h, s.ho, kh, stride, pad, hlo, hhi);
              tap_range(s.w, s.wo, kw, stride, pad, wlo, whi);
              tap_range(s.d, s.dd, kd, stride, pad, dlo, dhi);
              for (int64_t ho = hlo; ho <= hhi; ++ho) {
                int64_t hin = ho * stride - pad + kh;
                for (int64_t wo = wlo; wo <= whi; ++wo) {
                  int64_t win = wo * stride - pad + kw;
                  const double* xrow = xc + (hin * s.w + win) * s.d;
                  double* orow = oc + (ho * s.wo + wo) * s.dd;
                  int64_t dbase = kd - pad;
                  if (stride == 1) {
                    for (int64_t dd = dlo; dd <= dhi; ++dd)
                      orow[dd] += wv * xrow[dd + dbase];
                  } else {
                    for (int64_t dd = dlo; dd <= dhi; ++dd)
                      orow[dd] += wv * xrow[dd * stride + dbase];
                  }
                }
              }
            }
      }
    }
  }, 2);
  check_finite(out.data(), "conv3d");

  if (rec) {
    Tensor tx = x, tw = w, tb = bias;
    record("conv3d", {x, w, bias}, out, [tx, tw, tb, out, s]() mutable {
      const double* go = out.grad().data();
      const double* px2 = tx.data().data();
      const double* pw2 = tw.data().data();
      int64_t out_sp = s.ho * s.wo * s.dd;
      int64_t in_sp = s.h * s.w * s.d;
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t co = 0; co < s.co; ++co) {
          double acc = 0.0;
          const double* oc = go + co * out_sp;
          for (int64_t i = 0; i < out_sp; ++i) acc += oc[i];
          gb[co] += acc;
        }
      }
      if (tw.requires_grad()) {
        double* gw = tw.grad().data();
        for (int64_t co = 0; co < s.co; ++co) {
          const double* oc = go + co * out_sp;
          for (int64_t ci = 0; ci < s.ci; ++ci) {
            const double* xc = px2 + ci * in_sp;
            double* gwc = gw + (co * s.ci + ci) * s.kk * s.kk * s.kk;
            for (int64_t kh = 0; kh < s.kk; ++kh)
              for (int64_t kw = 0; kw < s.kk; ++kw)
                for (int64_t kd = 0; kd < s.kk; ++kd) {
                  int64_t hlo, hhi, wlo, whi, dlo, dhi;
                  tap_range(s.h, s.ho, kh, s.stride, s.pad, hlo, hhi);
                  tap_range(s.w, s.wo, kw, s.stride, s.pad, wlo, whi);
                  tap_range(s.d, s.dd, kd, s.stride, s.pad, dlo, dhi);
                  double acc = 0.0;
                  for (int64_t ho = hlo; ho <= hhi; ++ho) {
                    int64_t hin = ho * s.stride - s.pad + kh;
                    for (int64_t wo = wlo; wo <= whi; ++wo) {
                      int64_t win = wo * s.stride - s.pad + kw;
                      const double* xrow = xc + (hin * s.w + win) * s.d;
                      const double* orow = oc + (ho * s.wo + wo) * s.dd;
                      for (int64_t dd = dlo; dd <= dhi; ++dd)
                        acc += xrow[dd * s.stride + kd - s.pad] * orow[dd];
                    }
                  }
                  gwc[(kh * s.kk + kw) * s.kk + kd] += acc;
                }
          }
        }
      }
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        for (int64_t ci = 0; ci < s.ci; ++ci) {
          double* gxc = gx + ci * in_sp;
          for (int64_t co = 0; co < s.co; ++co) {
            const double* oc = go + co * out_sp;
            const double* wc = pw2 + (co * s.ci + ci) * s.kk * s.kk * s.kk;
            for (int64_t kh = 0; kh < s.kk; ++kh)
              for (int64_t kw = 0; kw < s.kk; ++kw)
                for (int64_t kd = 0; kd < s.kk; ++kd) {
                  double wv = wc[(kh * s.kk + kw) * s.kk + kd];
                  if (wv == 0.0) continue;
                  int64_t hlo, hhi, wlo, whi, dlo, dhi;
                  tap_range(s.h, s.ho, kh, s.stride, s.pad, hlo, hhi);
                  tap_range(s.w, s.wo, kw, s.stride, s.pad, wlo, whi);
                  tap_range(s.d, s.dd, kd, s.stride, s.pad, dlo, dhi);
                  for (int64_t ho = hlo; ho <= hhi; ++ho) {
                    int64_t hin = ho * s.stride - s.pad + kh;
                    for (int64_t wo = wlo; wo <= whi; ++wo) {
                      int64_t win = wo * s.stride - s.pad + kw;
                      double* xrow = gxc + (hin * s.w + win) * s.d;
                      const double* orow = oc + (ho * s.wo + wo) * s.dd;
                      for (int64_t dd = dlo; dd <= dhi; ++dd)
                        xrow[dd * s.stride + kd - s.pad] += wv * orow[dd];
                    }
                  }
                }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv1d_causal (depthwise)

Tensor Graph::conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.ndim() != 2 || w.ndim() != 2)
    throw DimError("conv1d_causal: expected x [L,d] and w [d,k], got " +
                   shape_str(x.shape()) + " and " + shape_str(w.shape()));
  int64_t L = x.dim(0), d = x.dim(1), dw = w.dim(0), k = w.dim(1);
  if (k <= 0) throw DimError("conv1d_causal: kernel width must be positive");
  if (dw != d)
    throw DimError("conv1d_causal: channel mismatch " + shape_str(x.shape()) + " vs " +
                   shape_str(w.shape()));
  if (bias.numel() != d)
    throw DimError("conv1d_causal: bias size " + std::to_string(bias.numel()) +
                   " != channels " + std::to_string(d));
  bool rec = should_record({&x, &w, &bias});
  Tensor out(Shape{L, d}, 0.0, rec);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = bias.data().data();
  double* po = out.mutable_data().data();
  for (int64_t t = 0; t < L; ++t) {
    double* ot = po + t * d;
    int64_t jmax = std::min<int64_t>(k - 1, t);
    for (int64_t c = 0; c < d; ++c) ot[c] = pb[c];
    for (int64_t j = 0; j <= jmax; ++j) {
      const double* xt = px + (t - j) * d;
      for (int64_t c = 0; c < d; ++c) ot[c] += pw[c * k + j] * xt[c];
    }
  }
  check_finite(out.data(), "conv1d_causal");
  if (rec) {
    Tensor tx = x, tw = w, tb = bias;
    record("conv1d_causal", {x, w, bias}, out, [tx, tw, tb, out, L, d, k]() mutable {
      const double* go = out.grad().data();
      const double* px2 = tx.data().data();
      const double* pw2 = tw.data().data();
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t t = 0; t < L; ++t)
          for (int64_t c = 0; c < d; ++c) gb[c] += go[t * d + c];
      }
      if (tw.requires_grad()) {
        double* gw = tw.grad().data();
        for (int64_t t = 0; t < L; ++t) {
          int64_t jmax = std::min<int64_t>(k - 1, t);
          for (int64_t j = 0; j <= jmax; ++j) {
            const double* xt = px2 + (t - j) * d;
            const double* gt = go + t * d;
            for (int64_t c = 0; c < d; ++c) gw[c * k + j] += xt[c] * gt[c];
          }
        }
      }
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        for (int64_t t = 0; t < L; ++t) {
          int64_t jmax = std::min<int64_t>(k - 1, t);
          const double* gt = go + t * d;
          for (int64_t j = 0; j <= jmax; ++j) {
            double* xt = gx + (t - j) * d;
            for (int64_t c = 0; c < d; ++c) xt[c] += pw2[c * k + j] * gt[c];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  if (x.ndim() < 1) throw DimError("layer_norm: input must have rank >= 1");
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d)
    throw DimError("layer_norm: gamma/beta must have size " + std::to_string(d));
  int64_t rows = x.numel() / d;
  bool rec = should_record({&x, &gamma, &beta});
  Tensor out(x.shape(), 0.0, rec);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* po = out.mutable_data().data();
  double* ph = xhat->data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      double c = xr[i] - mu;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* hr = ph + r * d;
    double* orow = po + r * d;
    for (int64_t i = 0; i < d; ++i) {
      hr[i] = (xr[i] - mu) * is;
      orow[i] = pg[i] * hr[i] + pb[i];
    }
  }
  check_finite(out.data(), "layer_norm");
  if (rec) {
    Tensor tx = x, tg = gamma, tb = beta;
    record("layer_norm", {x, gamma, beta}, out, [tx, tg, tb, out, xhat, inv_std, rows, d]() mutable {
      const double* go = out.grad().data();
      const double* pg2 = tg.data().data();
      const double* ph2 = xhat->data();
      if (tb.requires_grad()) {
        double* gb = tb.grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) gb[i] += go[r * d + i];
      }
      if (tg.requires_grad()) {
        double* gg = tg.grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) gg[i] += go[r * d + i] * ph2[r * d + i];
      }
      if (tx.requires_grad()) {
        double* gx = tx.grad().data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* gr = go + r * d;
          const double* hr = ph2 + r * d;
          double m1 = 0.0, m2 = 0.0;
          for (int64_t i = 0; i < d; ++i) {
            double gy = gr[i] * pg2[i];
            m1 += gy;
            m2 += gy * hr[i];
          }
          m1 /= d;
          m2 /= d;
          double is = (*inv_std)[r];
          double* gxr = gx + r * d;
          for (int64_t i = 0; i < d; ++i) {
            double gy = gr[i] * pg2[i];
            gxr[i] += is * (gy - m1 - hr[i] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

Tensor Graph::activation(const Tensor& x, Activation kind) {
  bool rec = should_record({&x});
  Tensor out(x.shape(), 0.0, rec);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  int64_t n = x.numel();
  switch (kind) {
    case Activation::gelu:
      for (int64_t i = 0; i < n; ++i)
        po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
      break;
    case Activation::silu:
      for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sigmoid_stable(px[i]);
      break;
    case Activation::softplus:
      for (int64_t i = 0; i < n; ++i) po[i] = softplus_stable(px[i]);
      break;
    case Activation::exp:
      for (int64_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
      break;
    case Activation::sigmoid:
      for (int64_t i = 0; i < n; ++i) po[i] = sigmoid_stable(px[i]);
      break;
  }
  check_finite(out.data(), "activation");
  if (rec) {
    Tensor tx = x;
    record("activation", {x}, out, [tx, out, kind, n]() mutable {
      const double* go = out.grad().data();
      const double* px2 = tx.data().data();
      const double* py = out.data().data();
      double* gx = tx.grad().data();
      switch (kind) {
        case Activation::gelu:
          for (int64_t i = 0; i < n; ++i) {
            double x2 = px2[i];
            double cdf = 0.5 * (1.0 + std::erf(x2 * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x2 * x2);
            gx[i] += go[i] * (cdf + x2 * pdf);
          }
          break;
        case Activation::silu:
          for (int64_t i = 0; i < n; ++i) {
            double sg = sigmoid_stable(px2[i]);
            gx[i] += go[i] * sg * (1.0 + px2[i] * (1.0 - sg));
          }
          break;
        case Activation::softplus:
          for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * sigmoid_stable(px2[i]);
          break;
        case Activation::exp:
          for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * py[i];
          break;
        case Activation::sigmoid:
          for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * py[i] * (1.0 - py[i]);
          break;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

Tensor Graph::softmax(const Tensor& x, int axis) {
  int r = x.ndim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimError("softmax: axis out of range for " + shape_str(x.shape()));
  int64_t n = x.shape()[axis];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  bool rec = should_record({&x});
  Tensor out(x.shape(), 0.0, rec);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  parallel_for(outer, [&](int64_t olo, int64_t ohi) {
    for (int64_t o = olo; o < ohi; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const double* xs = px + o * n * inner + i;
        double* ys = po + o * n * inner + i;
        double mx = xs[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xs[j * inner]);
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          double e = std::exp(xs[j * inner] - mx);
          ys[j * inner] = e;
          z += e;
        }
        double iz = 1.0 / z;
        for (int64_t j = 0; j < n; ++j) ys[j * inner] *= iz;
      }
  }, 64);
  check_finite(out.data(), "softmax");
  if (rec) {
    Tensor tx = x;
    record("softmax", {x}, out, [tx, out, n, inner, outer]() mutable {
      const double* go = out.grad().data();
      const double* py = out.data().data();
      double* gx = tx.grad().data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const double* ys = py + o * n * inner + i;
          const double* gs = go + o * n * inner + i;
          double dot = 0.0;
          for (int64_t j = 0; j < n; ++j) dot += gs[j * inner] * ys[j * inner];
          double* gxs = gx + o * n * inner + i;
          for (int64_t j = 0; j < n; ++j)
            gxs[j * inner] += ys[j * inner] * (gs[j * inner] - dot);
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

Tensor Graph::sum(const Tensor& x) {
  bool rec = should_record({&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out(Shape{}, std::vector<double>{acc}, rec);
  check_finite(out.data(), "sum");
  if (rec) {
    Tensor tx = x;
    record("sum", {x}, out, [tx, out]() mutable {
      double g = out.grad()[0];
      double* gx = tx.grad().data();
      int64_t n = tx.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor Graph::mean(const Tensor& x) {
  if (x.numel() == 0) throw DimError("mean: empty tensor");
  bool rec = should_record({&x});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out(Shape{}, std::vector<double>{acc * inv}, rec);
  check_finite(out.data(), "mean");
  if (rec) {
    Tensor tx = x;
    record("mean", {x}, out, [tx, out, inv]() mutable {
      double g = out.grad()[0] * inv;
      double* gx = tx.grad().data();
      int64_t n = tx.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Graph::reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                   shape_str(shape));
  bool rec = should_record({&x});
  Tensor out(std::move(shape), x.data(), rec);
  if (rec) {
    Tensor tx = x;
    record("reshape", {x}, out, [tx, out]() mutable {
      const double* go = out.grad().data();
      double* gx = tx.grad().data();
      int64_t n = tx.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

namespace {

void permute_copy(const Shape& in_shape, const std::vector<int>& axes,
                  const double* src, double* dst, bool accumulate_back) {
  int r = static_cast<int>(in_shape.size());
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = in_shape[axes[i]];
  std::vector<int64_t> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<int64_t> step(r);
  for (int i = 0; i < r; ++i) step[i] = in_strides[axes[i]];
  std::vector<int64_t> idx(r, 0);
  int64_t total = shape_numel(in_shape);
  int64_t src_off = 0;
  for (int64_t o = 0; o < total; ++o) {
    if (accumulate_back)
      dst[src_off] += src[o];
    else
      dst[o] = src[src_off];
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      src_off += step[d];
      if (idx[d] < os[d]) break;
      src_off -= step[d] * os[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor Graph::permute(const Tensor& x, const std::vector<int>& axes) {
  int r = x.ndim();
  if (static_cast<int>(axes.size()) != r)
    throw DimError("permute: axes size != rank");
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[a]) throw DimError("permute: invalid axes");
    seen[a] = true;
  }
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = x.shape()[axes[i]];
  bool rec = should_record({&x});
  Tensor out(os, 0.0, rec);
  permute_copy(x.shape(), axes, x.data().data(), out.mutable_data().data(), false);
  if (rec) {
    Tensor tx = x;
    Shape in_shape = x.shape();
    std::vector<int> ax = axes;
    record("permute", {x}, out, [tx, out, in_shape, ax]() mutable {
      permute_copy(in_shape, ax, out.grad().data(), tx.grad().data(), true);
    });
  }
  return out;
}

Tensor Graph::permute_rows(const Tensor& x, const std::vector<int64_t>& perm) {
  // Gather semantics: output has perm.size() rows; a bijective perm is a pure
  // row permutation. Backward scatter-adds, so repeated indices are fine.
  int64_t L = x.dim(0);
  int64_t M = static_cast<int64_t>(perm.size());
  if (M == 0) throw DimError("permute_rows: empty index list");
  for (int64_t p : perm)
    if (p < 0 || p >= L)
      throw DimError("permute_rows: index out of range for " + std::to_string(L) +
                     " rows");
  int64_t rs = x.numel() / std::max<int64_t>(L, 1);
  bool rec = should_record({&x});
  Shape os = x.shape();
  os[0] = M;
  Tensor out(os, 0.0, rec);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (int64_t i = 0; i < M; ++i)
    std::memcpy(po + i * rs, px + perm[i] * rs, rs * sizeof(double));
  if (rec) {
    Tensor tx = x;
    auto p = std::make_shared<std::vector<int64_t>>(perm);
    record("permute_rows", {x}, out, [tx, out, p, M, rs]() mutable {
      const double* go = out.grad().data();
      double* gx = tx.grad().data();
      for (int64_t i = 0; i < M; ++i) {
        double* dst = gx + (*p)[i] * rs;
        const double* src = go + i * rs;
        for (int64_t j = 0; j < rs; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor Graph::reverse_rows(const Tensor& x) {
  int64_t L = x.dim(0);
  std::vector<int64_t> perm(L);
  for (int64_t i = 0; i < L; ++i) perm[i] = L - 1 - i;
  return permute_rows(x, perm);
}

Tensor Graph::slice_rows(const Tensor& x, int64_t begin, int64_t end) {
  int64_t L = x.dim(0);
  if (begin < 0 || end > L || begin >= end)
    throw DimError("slice_rows: invalid range [" + std::to_string(begin) + "," +
                   std::to_string(end) + ") for " + std::to_string(L) + " rows");
  int64_t rs = x.numel() / L;
  Shape os = x.shape();
  os[0] = end - begin;
  bool rec = should_record({&x});
  Tensor out(os, 0.0, rec);
  std::memcpy(out.mutable_data().data(), x.data().data() + begin * rs,
              (end - begin) * rs * sizeof(double));
  if (rec) {
    Tensor tx = x;
    record("slice_rows", {x}, out, [tx, out, begin, rs]() mutable {
      const double* go = out.grad().data();
      double* gx = tx.grad().data() + begin * rs;
      int64_t n = out.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
  }
  return out;
}

Tensor Graph::slice_cols(const Tensor& x, int64_t begin, int64_t end) {
  if (x.ndim() != 2) throw DimError("slice_cols: input must be 2-D");
  int64_t L = x.dim(0), c = x.dim(1);
  if (begin < 0 || end > c || begin >= end)
    throw DimError("slice_cols: invalid range for " + shape_str(x.shape()));
  int64_t w = end - begin;
  bool rec = should_record({&x});
  Tensor out(Shape{L, w}, 0.0, rec);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (int64_t i = 0; i < L; ++i)
    std::memcpy(po + i * w, px + i * c + begin, w * sizeof(double));
  if (rec) {
    Tensor tx = x;
    record("slice_cols", {x}, out, [tx, out, begin, L, c, w]() mutable {
      const double* go = out.grad().data();
      double* gx = tx.grad().data();
      for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < w; ++j) gx[i * c + begin + j] += go[i * w + j];
    });
  }
  return out;
}

Tensor Graph::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t rows = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail)
      throw DimError("concat_rows: trailing shapes differ: " + shape_str(parts[0].shape()) +
                     " vs " + shape_str(p.shape()));
    rows += p.dim(0);
    any_grad |= p.requires_grad();
  }
  bool rec = recording_ && any_grad;
  Shape os = parts[0].shape();
  os[0] = rows;
  Tensor out(os, 0.0, rec);
  double* po = out.mutable_data().data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(po + off, p.data().data(), p.numel() * sizeof(double));
    off += p.numel();
  }
  if (rec) {
    std::vector<Tensor> ins = parts;
    record("concat_rows", parts, out, [ins, out]() mutable {
      const double* go = out.grad().data();
      int64_t off2 = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) {
          double* gp = p.grad().data();
          int64_t n = p.numel();
          for (int64_t i = 0; i < n; ++i) gp[i] += go[off2 + i];
        }
        off2 += p.numel();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// selective scan

void zoh_discretize(const double* a, const double* b, double delta, int n,
                    double* a_bar, double* b_bar) {
  for (int i = 0; i < n; ++i) {
    double s = delta * a[i];
    double e = std::exp(s);
    a_bar[i] = e;
    // (exp(delta a) - 1) / a -> delta as a -> 0; switch below cancellation.
    b_bar[i] = (std::abs(s) < 1e-8) ? delta * b[i] : (e - 1.0) / a[i] * b[i];
  }
}

namespace {

constexpr int64_t kScanChunk = 64;

struct ScanDims {
  int64_t L, d, N;
};

ScanDims scan_check(const Tensor& u, const Tensor& delta, const Tensor& B,
                    const Tensor& C, const Tensor& A) {
  if (u.ndim() != 2 || delta.ndim() != 2 || B.ndim() != 2 || C.ndim() != 2 || A.ndim() != 2)
    throw DimError("selective_scan: all inputs must be 2-D");
  ScanDims s{u.dim(0), u.dim(1), A.dim(1)};
  if (delta.shape() != u.shape())
    throw DimError("selective_scan: delta shape " + shape_str(delta.shape()) +
                   " != u shape " + shape_str(u.shape()));
  if (B.dim(0) != s.L || C.dim(0) != s.L || B.dim(1) != s.N || C.dim(1) != s.N)
    throw DimError("selective_scan: B/C must be [L,N], got " + shape_str(B.shape()) +
                   " and " + shape_str(C.shape()));
  if (A.dim(0) != s.d)
    throw DimError("selective_scan: A must be [d,N], got " + shape_str(A.shape()));
  return s;
}

}  // namespace

Tensor Graph::selective_scan(const Tensor& u, const Tensor& delta, const Tensor& B,
                             const Tensor& C, const Tensor& A) {
  ScanDims s = scan_check(u, delta, B, C, A);
  const int64_t L = s.L, d = s.d, N = s.N;
  bool rec = should_record({&u, &delta, &B, &C, &A});
  Tensor out(Shape{L, d}, 0.0, rec);
  const double* pu = u.data().data();
  const double* pdel = delta.data().data();
  const double* pB = B.data().data();
  const double* pC = C.data().data();
  const double* pA = A.data().data();
  double* py = out.mutable_data().data();

  // Saved state trajectory [d, L, N]; only materialized when the tape needs it.
  std::shared_ptr<std::vector<double>> hsave;
  if (rec) hsave = std::make_shared<std::vector<double>>(static_cast<size_t>(d) * L * N);

  int64_t nchunks = (L + kScanChunk - 1) / kScanChunk;

  parallel_for(d, [&](int64_t clo, int64_t chi) {
    // Per-tap discretized coefficients for one channel, reused across passes.
    std::vector<double> abar(static_cast<size_t>(L) * N);
    std::vector<double> binc(static_cast<size_t>(L) * N);  // b_bar * u contribution
    std::vector<double> h(N), csum(static_cast<size_t>(nchunks) * N),
        cprod(static_cast<size_t>(nchunks) * N);
    for (int64_t c = clo; c < chi; ++c) {
      const double* ac = pA + c * N;
      for (int64_t t = 0; t < L; ++t) {
        double dt = pdel[t * d + c];
        double ut = pu[t * d + c];
        const double* bt = pB + t * N;
        double* ab = abar.data() + t * N;
        double* bi = binc.data() + t * N;
        for (int64_t n = 0; n < N; ++n) {
          double sdn = dt * ac[n];
          double e = std::exp(sdn);
          ab[n] = e;
          double coef = (std::abs(sdn) < 1e-8) ? dt : (e - 1.0) / ac[n];
          bi[n] = coef * bt[n] * ut;
        }
      }
      if (nchunks > 1) {
        // Pass 1: per-chunk summaries under the associative combine
        // (a1,b1)o(a2,b2) = (a1*a2, a2*b1 + b2).
        for (int64_t q = 0; q < nchunks; ++q) {
          int64_t t0 = q * kScanChunk, t1 = std::min(L, t0 + kScanChunk);
          double* cp = cprod.data() + q * N;
          double* cs = csum.data() + q * N;
          for (int64_t n = 0; n < N; ++n) {
            cp[n] = 1.0;
            cs[n] = 0.0;
          }
          for (int64_t t = t0; t < t1; ++t) {
            const double* ab = abar.data() + t * N;
            const double* bi = binc.data() + t * N;
            for (int64_t n = 0; n < N; ++n) {
              cp[n] *= ab[n];
              cs[n] = ab[n] * cs[n] + bi[n];
            }
          }
        }
        // Pass 2: exclusive combine gives each chunk its entry state.
        std::vector<double> entry(static_cast<size_t>(nchunks) * N, 0.0);
        for (int64_t q = 1; q < nchunks; ++q) {
          const double* pe = entry.data() + (q - 1) * N;
          const double* cp = cprod.data() + (q - 1) * N;
          const double* cs = csum.data() + (q - 1) * N;
          double* e = entry.data() + q * N;
          for (int64_t n = 0; n < N; ++n) e[n] = cp[n] * pe[n] + cs[n];
        }
        // Pass 3: re-run each chunk from its entry state and emit outputs.
        for (int64_t q = 0; q < nchunks; ++q) {
          int64_t t0 = q * kScanChunk, t1 = std::min(L, t0 + kScanChunk);
          std::memcpy(h.data(), entry.data() + q * N, N * sizeof(double));
          for (int64_t t = t0; t < t1; ++t) {
            const double* ab = abar.data() + t * N;
            const double* bi = binc.data() + t * N;
            const double* ct = pC + t * N;
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
              h[n] = ab[n] * h[n] + bi[n];
              acc += ct[n] * h[n];
            }
            if (!std::isfinite(acc))
              throw NumericError("selective_scan: non-finite state at timestep " +
                                 std::to_string(t));
            py[t * d + c] = acc;
            if (hsave)
              std::memcpy(hsave->data() + (c * L + t) * N, h.data(), N * sizeof(double));
          }
        }
      } else {
        std::fill(h.begin(), h.end(), 0.0);
        for (int64_t t = 0; t < L; ++t) {
          const double* ab = abar.data() + t * N;
          const double* bi = binc.data() + t * N;
          const double* ct = pC + t * N;
          double acc = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            h[n] = ab[n] * h[n] + bi[n];
            acc += ct[n] * h[n];
          }
          if (!std::isfinite(acc))
            throw NumericError("selective_scan: non-finite state at timestep " +
                               std::to_string(t));
          py[t * d + c] = acc;
          if (hsave)
            std::memcpy(hsave->data() + (c * L + t) * N, h.data(), N * sizeof(double));
        }
      }
    }
  }, 2);

  if (rec) {
    Tensor tu = u, tdel = delta, tB = B, tC = C, tA = A;
    record("selective_scan", {u, delta, B, C, A}, out, [tu, tdel, tB, tC, tA, out, hsave,
                                                        L, d, N]() mutable {
      const double* go = out.grad().data();
      const double* pu2 = tu.data().data();
      const double* pdel2 = tdel.data().data();
      const double* pB2 = tB.data().data();
      const double* pC2 = tC.data().data();
      const double* pA2 = tA.data().data();
      const double* ph = hsave->data();
      double* gu = tu.requires_grad() ? tu.grad().data() : nullptr;
      double* gdel = tdel.requires_grad() ? tdel.grad().data() : nullptr;
      double* gB = tB.requires_grad() ? tB.grad().data() : nullptr;
      double* gC = tC.requires_grad() ? tC.grad().data() : nullptr;
      double* gA = tA.requires_grad() ? tA.grad().data() : nullptr;
      // Reverse-time adjoint recurrence, serial over channels so the shared
      // B/C accumulators stay deterministic.
      std::vector<double> lam(N);
      for (int64_t c = 0; c < d; ++c) {
        const double* ac = pA2 + c * N;
        const double* hc = ph + c * L * N;
        std::fill(lam.begin(), lam.end(), 0.0);
        for (int64_t t = L - 1; t >= 0; --t) {
          double gy = go[t * d + c];
          double dt = pdel2[t * d + c];
          double ut = pu2[t * d + c];
          const double* bt = pB2 + t * N;
          const double* ct = pC2 + t * N;
          const double* ht = hc + t * N;
          const double* hprev = t > 0 ? hc + (t - 1) * N : nullptr;
          double du_acc = 0.0, ddelta_acc = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            if (gC) gC[t * N + n] += gy * ht[n];
            double l = lam[n] + gy * ct[n];  // dL/dh_t
            double a = ac[n];
            double sdn = dt * a;
            double e = std::exp(sdn);
            double coef = (std::abs(sdn) < 1e-8) ? dt : (e - 1.0) / a;
            double hp = hprev ? hprev[n] : 0.0;
            du_acc += l * coef * bt[n];
            if (gB) gB[t * N + n] += l * coef * ut;
            ddelta_acc += l * (a * e * hp + e * bt[n] * ut);
            if (gA) {
              double dcoef = (std::abs(sdn) < 1e-8)
                                 ? 0.5 * dt * dt
                                 : (dt * e * a - e + 1.0) / (a * a);
              gA[c * N + n] += l * (dt * e * hp + dcoef * bt[n] * ut);
            }
            lam[n] = l * e;  // propagate through h_t = abar_t h_{t-1} + ...
          }
          if (gu) gu[t * d + c] += du_acc;
          if (gdel) gdel[t * d + c] += ddelta_acc;
        }
      }
    });
  }
  return out;
}

}  // namespace brainmt
