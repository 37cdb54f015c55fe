#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "brainmt/common.hpp"

namespace brainmt {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense 64-bit tensor. A Tensor is a cheap handle onto shared state, so the
// tape and the caller always observe the same gradient buffer. Data is
// treated as immutable once the tensor has been consumed by an op; parameter
// updates happen between graphs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const;  // supports negative indices
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<double>& grad();              // allocates zeros on first use
  const std::vector<double>& grad() const;  // throws if absent
  void zero_grad();

  double value() const;  // scalar convenience accessor

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
  };
  std::shared_ptr<Impl> impl_;
};

enum class Activation { gelu, silu, softplus, exp, sigmoid };
Activation activation_from_string(const std::string& name);

// Zero-order-hold discretization of a diagonal continuous system. Operates
// elementwise on the diagonal; uses the delta*b limit when |delta*a| < 1e-8.
void zoh_discretize(const double* a, const double* b, double delta, int n,
                    double* a_bar, double* b_bar);

// Reverse-mode tape. Ops are recorded when `recording` is on and at least one
// input requires a gradient; otherwise they run as plain kernels. The tape is
// strictly append-only, so backward walks records in exact reverse order.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  bool recording() const { return recording_; }
  size_t size() const { return records_.size(); }

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor add_scalar(const Tensor& a, double c);

  // [.., m, k] x [.., k, n] -> [.., m, n] with broadcast batch dims.
  Tensor matmul(const Tensor& a, const Tensor& b);

  // x: [C_in, H, W, D], w: [C_out, C_in, k, k, k], bias: [C_out].
  // Cross-correlation (no kernel flip); k odd.
  Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                int stride, int pad);

  // Depthwise causal conv: x [L, d], w [d, k], bias [d];
  // out[t, c] = bias[c] + sum_j w[c, j] * x[t - j, c] (zero before t=0).
  Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& bias);

  // Normalizes the last axis; population variance; eps defaults to 1e-5.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5);

  Tensor activation(const Tensor& x, Activation kind);
  Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }
  Tensor silu(const Tensor& x) { return activation(x, Activation::silu); }
  Tensor softplus(const Tensor& x) { return activation(x, Activation::softplus); }
  Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }

  Tensor softmax(const Tensor& x, int axis);

  Tensor sum(const Tensor& x);   // -> scalar
  Tensor mean(const Tensor& x);  // -> scalar

  Tensor reshape(const Tensor& x, Shape shape);
  Tensor permute(const Tensor& x, const std::vector<int>& axes);

  // Row ops treat the first axis as rows, whatever the remaining shape is.
  Tensor permute_rows(const Tensor& x, const std::vector<int64_t>& perm);
  Tensor reverse_rows(const Tensor& x);
  Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
  Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);  // 2-D only
  Tensor concat_rows(const std::vector<Tensor>& parts);

  // Input-dependent diagonal SSM scan (the Mamba recurrence):
  //   h(t) = exp(delta_t A) h(t-1) + ((exp(delta_t a)-1)/a) B_t u_t
  //   y(t) = <C_t, h(t)>       per channel
  // u, delta: [L, d]; B, C: [L, N]; A: [d, N] (negative-real diagonal).
  Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& B,
                        const Tensor& C, const Tensor& A);

  // Accumulates d(loss)/d(leaf) into every requires_grad tensor reachable
  // from loss. Repeated calls accumulate; zero_grads() resets.
  void backward(const Tensor& loss);
  void zero_grads();

 private:
  struct Record {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward_fn;
  };

  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  void record(const char* op, std::vector<Tensor> inputs, const Tensor& out,
              std::function<void()> fn);

  std::vector<Record> records_;
  bool recording_;
};

// Throws NumericError naming `op` if any value is non-finite.
void check_finite(const std::vector<double>& v, const char* op);

}  // namespace brainmt
