#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::unique_ptr<std::vector<double>> grad;  // allocated on first accumulation
  bool requires_grad = false;
};

// Value-semantic handle onto a dense row-major float64 array. Copies share
// storage; ops record adjoints on the active Tape when any input requires
// gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); requires_grad on.
  static Tensor glorot(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return impl_->grad != nullptr; }
  std::span<const double> grad() const;
  void clear_grad() { impl_->grad.reset(); }

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// Flat record of adjoint closures for one forward pass. Constructing a Tape
// makes it current for the calling thread; ops run while it is current record
// onto it. One backward per forward; reset() rewinds for reuse.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse record order.
  // loss must be scalar; calling twice without reset() is a state error.
  void backward(const Tensor& loss);
  void reset();
  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* current();
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// Accumulate into t's grad buffer (allocating zeros on first touch).
// No-op unless t requires grad.
void accumulate_grad(TensorImpl* t, const std::vector<double>& g);
std::vector<double>* grad_buffer_if_present(TensorImpl* t);

// ---- primitive ops --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// matrix[m x n] + row[n], broadcast over rows (bias add).
Tensor add_row_bias(const Tensor& m, const Tensor& row);
// image[c x h x w] + bias[c], broadcast over pixels.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// Row softmax along the last axis, max-subtracted. Rejects NaN/Inf input.
Tensor softmax(const Tensor& x);

// x / max(norm2(x along axis), eps) per lane; eps = 1e-12.
Tensor l2_normalize(const Tensor& x, int axis);

Tensor concat(std::span<const Tensor> xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t stop);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Cross-correlation; x[c_in x H x W], w[c_out x c_in x k x k], k odd.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

// Border-clamped bilinear sample; differentiable w.r.t. fmap only.
Tensor bilinear_sample(const Tensor& fmap, double u, double v);

// Value-identical tensor with the gradient path severed.
Tensor stopgrad(const Tensor& x);

// Elementwise Huber (delta = 1): 0.5 d^2 if |d| < 1 else |d| - 0.5.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);
// Numerically stable elementwise binary cross-entropy on logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
// Per-row -log softmax(logits)[target]; logits [n x C] -> [n].
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets);

// Row-wise layer normalization over the last axis (no affine terms).
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);
// Inverted dropout with a caller-owned RNG; p = drop probability.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// feats[J x d] scattered to [d x X x Y] by integer (x, y) cell, elementwise
// max over voxels landing in the same cell; empty cells stay zero.
Tensor scatter_max_bev(const Tensor& feats,
                       const std::vector<std::array<int64_t, 2>>& cells,
                       int64_t size_x, int64_t size_y);

// Gather per-cell columns of map[c x X x Y] -> [n x c].
Tensor gather_cells(const Tensor& map,
                    const std::vector<std::array<int64_t, 2>>& cells);

// Per-group elementwise max over rows of feats[J x d] -> [G x d]; empty
// groups give zero rows; subgradient routed to the first argmax row.
Tensor group_rows_max(const Tensor& feats,
                      const std::vector<std::vector<int64_t>>& groups,
                      int64_t group_count);

// Backward through the current tape.
void backward(const Tensor& loss);

// Central-difference check of d f / d params: returns the max over all
// parameter entries of |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  double eps = 1e-5);

// Variant with distinct functions for the analytic backward pass and the
// perturbed evaluations. Used for losses containing stop-gradients: the
// numeric function must hold the blocked branches at their unperturbed
// values, since central differences would otherwise measure the identity
// path through them.
double grad_check(const std::function<Tensor()>& f_analytic,
                  const std::function<Tensor()>& f_numeric, std::span<Tensor> params,
                  double eps = 1e-5);

// ---- serialization --------------------------------------------------------

// Little-endian binary: magic "AATN", u32 rank, u32 extents, f64 payload.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);
std::vector<uint8_t> tensor_to_bytes(const Tensor& t);
Tensor tensor_from_bytes(std::span<const uint8_t> bytes);

}  // namespace vf
