#include "vf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace vf {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::shape, std::string(op) + ": shape mismatch " +
                               shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Wraps elementwise ops: out = f(a), adjoint ga += g * df(a, out).
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = fwd(v);
  bool track = Tape::current() != nullptr && a.requires_grad();
  Tensor r = make_tensor(a.shape(), std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr();
    auto ri = r.impl_ptr();
    Tape::current()->record([ai, ri, bwd]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> ga(ai->data.size());
      for (size_t i = 0; i < ga.size(); ++i) {
        ga[i] = (*g)[i] * bwd(ai->data[i], ri->data[i]);
      }
      accumulate_grad(ai.get(), ga);
    });
  }
  return r;
}

int64_t axis_stride(const Shape& s, int axis) {
  int64_t st = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) st *= s[i];
  return st;
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    fail(ErrorCode::invalid_argument,
         std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
             std::to_string(rank));
  }
  return a;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    fail(ErrorCode::shape, "tensor: " + shape_str(shape) + " does not hold " +
                               std::to_string(data.size()) + " values");
  }
  for (int64_t e : shape) {
    if (e <= 0) fail(ErrorCode::shape, "tensor: non-positive extent in " + shape_str(shape));
  }
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                     requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

Tensor Tensor::glorot(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  auto n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data) v = rng.uniform(-a, a);
  return make_tensor(std::move(shape), std::move(data), true);
}

double Tensor::item() const {
  if (numel() != 1) {
    fail(ErrorCode::shape, "item: tensor " + shape_str(shape()) + " is not scalar");
  }
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) {
    fail(ErrorCode::state, "grad: no gradient present (backward not run or not on loss path)");
  }
  return *impl_->grad;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  // Tapes are scoped; the innermost one is always destroyed first.
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) {
    g_tape_stack.pop_back();
  } else {
    std::erase(g_tape_stack, this);
  }
}

Tape* Tape::current() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    fail(ErrorCode::state, "backward: tape already consumed; reset() before reuse");
  }
  if (loss.numel() != 1) {
    fail(ErrorCode::shape, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  consumed_ = true;
  if (loss.requires_grad()) {
    accumulate_grad(loss.impl(), {1.0});
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

void accumulate_grad(TensorImpl* t, const std::vector<double>& g) {
  if (!t->requires_grad) return;
  if (!t->grad) t->grad = std::make_unique<std::vector<double>>(t->data.size(), 0.0);
  auto& acc = *t->grad;
  for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

std::vector<double>* grad_buffer_if_present(TensorImpl* t) { return t->grad.get(); }

void backward(const Tensor& loss) {
  Tape* t = Tape::current();
  if (!t) fail(ErrorCode::state, "backward: no active tape");
  t->backward(loss);
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  bool track = Tape::current() && (a.requires_grad() || b.requires_grad());
  Tensor r = make_tensor(a.shape(), std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([ai, bi, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(ai.get(), *g);
      accumulate_grad(bi.get(), *g);
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  bool track = Tape::current() && (a.requires_grad() || b.requires_grad());
  Tensor r = make_tensor(a.shape(), std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([ai, bi, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(ai.get(), *g);
      if (bi->requires_grad) {
        std::vector<double> gb(g->size());
        for (size_t i = 0; i < gb.size(); ++i) gb[i] = -(*g)[i];
        accumulate_grad(bi.get(), gb);
      }
    });
  }
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  bool track = Tape::current() && (a.requires_grad() || b.requires_grad());
  Tensor r = make_tensor(a.shape(), std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([ai, bi, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      if (ai->requires_grad) {
        std::vector<double> ga(g->size());
        for (size_t i = 0; i < ga.size(); ++i) ga[i] = (*g)[i] * bi->data[i];
        accumulate_grad(ai.get(), ga);
      }
      if (bi->requires_grad) {
        std::vector<double> gb(g->size());
        for (size_t i = 0; i < gb.size(); ++i) gb[i] = (*g)[i] * ai->data[i];
        accumulate_grad(bi.get(), gb);
      }
    });
  }
  return r;
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp_op(const Tensor& a) {
  return unary_op(
      a, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log_op(const Tensor& a) {
  return unary_op(
      a, [](double v) { return std::log(v); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  auto sig = [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  };
  return unary_op(a, sig, [](double, double y) { return y * (1.0 - y); });
}

Tensor add_row_bias(const Tensor& m, const Tensor& row) {
  if (m.rank() != 2 || row.rank() != 1 || m.dim(1) != row.dim(0)) {
    fail(ErrorCode::shape, "add_row_bias: " + shape_str(m.shape()) + " vs " +
                               shape_str(row.shape()));
  }
  int64_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.data().begin(), m.data().end());
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(i * cols + j)] += row.data()[static_cast<size_t>(j)];
  }
  bool track = Tape::current() && (m.requires_grad() || row.requires_grad());
  Tensor r = make_tensor(m.shape(), std::move(out), track);
  if (track) {
    auto mi = m.impl_ptr(), bi = row.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([mi, bi, ri, rows, cols]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(mi.get(), *g);
      if (bi->requires_grad) {
        std::vector<double> gb(static_cast<size_t>(cols), 0.0);
        for (int64_t i = 0; i < rows; ++i) {
          for (int64_t j = 0; j < cols; ++j) gb[static_cast<size_t>(j)] += (*g)[static_cast<size_t>(i * cols + j)];
        }
        accumulate_grad(bi.get(), gb);
      }
    });
  }
  return r;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || x.dim(0) != bias.dim(0)) {
    fail(ErrorCode::shape, "add_channel_bias: " + shape_str(x.shape()) + " vs " +
                               shape_str(bias.shape()));
  }
  int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (int64_t k = 0; k < c; ++k) {
    for (int64_t p = 0; p < hw; ++p) out[static_cast<size_t>(k * hw + p)] += bias.data()[static_cast<size_t>(k)];
  }
  bool track = Tape::current() && (x.requires_grad() || bias.requires_grad());
  Tensor r = make_tensor(x.shape(), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), bi = bias.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, bi, ri, c, hw]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(xi.get(), *g);
      if (bi->requires_grad) {
        std::vector<double> gb(static_cast<size_t>(c), 0.0);
        for (int64_t k = 0; k < c; ++k) {
          for (int64_t p = 0; p < hw; ++p) gb[static_cast<size_t>(k)] += (*g)[static_cast<size_t>(k * hw + p)];
        }
        accumulate_grad(bi.get(), gb);
      }
    });
  }
  return r;
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorCode::shape,
         "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t l = 0; l < k; ++l) {
      double ail = A[i * k + l];
      const double* brow = B + l * n;
      double* crow = out.data() + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
  bool track = Tape::current() && (a.requires_grad() || b.requires_grad());
  Tensor r = make_tensor({m, n}, std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([ai, bi, ri, m, k, n]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      const double* G = g->data();
      if (ai->requires_grad) {
        std::vector<double> ga(static_cast<size_t>(m * k), 0.0);
        const double* B = bi->data.data();
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t l = 0; l < k; ++l) {
            const double* brow = B + l * n;
            const double* grow = G + i * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i * k + l)] = acc;
          }
        }
        accumulate_grad(ai.get(), ga);
      }
      if (bi->requires_grad) {
        std::vector<double> gb(static_cast<size_t>(k * n), 0.0);
        const double* A = ai->data.data();
        for (int64_t i = 0; i < m; ++i) {
          const double* grow = G + i * n;
          for (int64_t l = 0; l < k; ++l) {
            double ail = A[i * k + l];
            double* gbrow = gb.data() + l * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += ail * grow[j];
          }
        }
        accumulate_grad(bi.get(), gb);
      }
    });
  }
  return r;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) fail(ErrorCode::shape, "transpose2d: need rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.data()[static_cast<size_t>(i * n + j)];
  }
  bool track = Tape::current() && a.requires_grad();
  Tensor r = make_tensor({n, m}, std::move(out), track);
  if (track) {
    auto ai = a.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([ai, ri, m, n]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> ga(static_cast<size_t>(m * n));
      for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < m; ++i) ga[static_cast<size_t>(i * n + j)] = (*g)[static_cast<size_t>(j * m + i)];
      }
      accumulate_grad(ai.get(), ga);
    });
  }
  return r;
}

// ---- softmax / normalization ----------------------------------------------

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) fail(ErrorCode::shape, "softmax: need rank >= 1");
  if (!all_finite(x.data())) fail(ErrorCode::numeric, "softmax: non-finite input");
  int64_t n = x.dim(x.rank() - 1);
  int64_t lanes = x.numel() / n;
  std::vector<double> out(x.data().size());
  for (int64_t l = 0; l < lanes; ++l) {
    const double* in = x.data().data() + l * n;
    double* o = out.data() + l * n;
    double mx = in[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - mx);
      s += o[i];
    }
    for (int64_t i = 0; i < n; ++i) o[i] /= s;
  }
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(x.shape(), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, lanes, n]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gx(xi->data.size());
      for (int64_t l = 0; l < lanes; ++l) {
        const double* s = ri->data.data() + l * n;
        const double* go = g->data() + l * n;
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += go[i] * s[i];
        double* gi = gx.data() + l * n;
        for (int64_t i = 0; i < n; ++i) gi[i] = s[i] * (go[i] - dot);
      }
      accumulate_grad(xi.get(), gx);
    });
  }
  return r;
}

Tensor l2_normalize(const Tensor& x, int axis) {
  constexpr double kEps = 1e-12;
  int ax = normalize_axis(axis, x.rank(), "l2_normalize");
  int64_t n = x.dim(ax);
  int64_t inner = axis_stride(x.shape(), ax);
  int64_t outer = x.numel() / (n * inner);
  std::vector<double> out(x.data().size());
  std::vector<double> norms(static_cast<size_t>(outer * inner));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in_i = 0; in_i < inner; ++in_i) {
      const double* base = x.data().data() + o * n * inner + in_i;
      double ss = 0.0;
      for (int64_t i = 0; i < n; ++i) ss += base[i * inner] * base[i * inner];
      double nr = std::max(std::sqrt(ss), kEps);
      norms[static_cast<size_t>(o * inner + in_i)] = nr;
      double* obase = out.data() + o * n * inner + in_i;
      for (int64_t i = 0; i < n; ++i) obase[i * inner] = base[i * inner] / nr;
    }
  }
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(x.shape(), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, outer, inner, n, norms = std::move(norms)]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gx(xi->data.size());
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in_i = 0; in_i < inner; ++in_i) {
          double nr = norms[static_cast<size_t>(o * inner + in_i)];
          const double* xb = xi->data.data() + o * n * inner + in_i;
          const double* gb = g->data() + o * n * inner + in_i;
          double* gxb = gx.data() + o * n * inner + in_i;
          double ss = 0.0;
          for (int64_t i = 0; i < n; ++i) ss += xb[i * inner] * xb[i * inner];
          bool clamped = std::sqrt(ss) <= kEps;
          if (clamped) {
            for (int64_t i = 0; i < n; ++i) gxb[i * inner] = gb[i * inner] / nr;
          } else {
            double xg = 0.0;
            for (int64_t i = 0; i < n; ++i) xg += xb[i * inner] * gb[i * inner];
            double n3 = nr * nr * nr;
            for (int64_t i = 0; i < n; ++i) {
              gxb[i * inner] = gb[i * inner] / nr - xb[i * inner] * xg / n3;
            }
          }
        }
      }
      accumulate_grad(xi.get(), gx);
    });
  }
  return r;
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  if (x.rank() < 1) fail(ErrorCode::shape, "layer_norm_rows: need rank >= 1");
  int64_t n = x.dim(x.rank() - 1);
  int64_t lanes = x.numel() / n;
  std::vector<double> out(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(lanes));
  for (int64_t l = 0; l < lanes; ++l) {
    const double* in = x.data().data() + l * n;
    double mu = 0.0;
    for (int64_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(l)] = is;
    double* o = out.data() + l * n;
    for (int64_t i = 0; i < n; ++i) o[i] = (in[i] - mu) * is;
  }
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(x.shape(), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, lanes, n, inv_std = std::move(inv_std)]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gx(xi->data.size());
      for (int64_t l = 0; l < lanes; ++l) {
        const double* y = ri->data.data() + l * n;
        const double* go = g->data() + l * n;
        double is = inv_std[static_cast<size_t>(l)];
        double gmean = 0.0, gymean = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          gmean += go[i];
          gymean += go[i] * y[i];
        }
        gmean /= static_cast<double>(n);
        gymean /= static_cast<double>(n);
        double* gi = gx.data() + l * n;
        for (int64_t i = 0; i < n; ++i) gi[i] = is * (go[i] - gmean - y[i] * gymean);
      }
      accumulate_grad(xi.get(), gx);
    });
  }
  return r;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) fail(ErrorCode::invalid_argument, "dropout: p must be in [0, 1)");
  double keep = 1.0 - p;
  std::vector<double> mask(x.data().size());
  for (double& m : mask) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  std::vector<double> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(x.shape(), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, mask = std::move(mask)]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gx(g->size());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] = (*g)[i] * mask[i];
      accumulate_grad(xi.get(), gx);
    });
  }
  return r;
}

// ---- shape ops --------------------------------------------------------------

Tensor concat(std::span<const Tensor> xs, int axis) {
  if (xs.empty()) fail(ErrorCode::invalid_argument, "concat: empty input list");
  int ax = normalize_axis(axis, xs[0].rank(), "concat");
  Shape out_shape = xs[0].shape();
  int64_t total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != xs[0].rank()) fail(ErrorCode::shape, "concat: rank mismatch");
    for (int d = 0; d < t.rank(); ++d) {
      if (d != ax && t.dim(d) != out_shape[static_cast<size_t>(d)]) {
        fail(ErrorCode::shape, "concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                   shape_str(xs[0].shape()));
      }
    }
    total += t.dim(ax);
  }
  out_shape[static_cast<size_t>(ax)] = total;
  int64_t inner = axis_stride(out_shape, ax);
  int64_t outer = shape_numel(out_shape) / (total * inner);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t off = 0;
  for (const Tensor& t : xs) {
    int64_t na = t.dim(ax);
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = t.data().data() + o * na * inner;
      double* dst = out.data() + (o * total + off) * inner;
      std::copy(src, src + na * inner, dst);
    }
    off += na;
  }
  bool track = false;
  if (Tape::current()) {
    for (const Tensor& t : xs) track = track || t.requires_grad();
  }
  Tensor r = make_tensor(out_shape, std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::vector<int64_t> extents;
    for (const Tensor& t : xs) {
      inputs.push_back(t.impl_ptr());
      extents.push_back(t.dim(ax));
    }
    auto ri = r.impl_ptr();
    Tape::current()->record([inputs, extents, ri, outer, inner, total]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      int64_t off = 0;
      for (size_t k = 0; k < inputs.size(); ++k) {
        int64_t na = extents[k];
        if (inputs[k]->requires_grad) {
          std::vector<double> gi(static_cast<size_t>(na * inner * outer));
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = g->data() + (o * total + off) * inner;
            std::copy(src, src + na * inner, gi.data() + o * na * inner);
          }
          accumulate_grad(inputs[k].get(), gi);
        }
        off += na;
      }
    });
  }
  return r;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t stop) {
  int ax = normalize_axis(axis, x.rank(), "slice");
  int64_t n = x.dim(ax);
  if (start < 0 || stop > n || start >= stop) {
    fail(ErrorCode::invalid_argument, "slice: bad range [" + std::to_string(start) + ", " +
                                          std::to_string(stop) + ") for extent " +
                                          std::to_string(n));
  }
  Shape out_shape = x.shape();
  int64_t na = stop - start;
  out_shape[static_cast<size_t>(ax)] = na;
  int64_t inner = axis_stride(x.shape(), ax);
  int64_t outer = x.numel() / (n * inner);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + (o * n + start) * inner;
    std::copy(src, src + na * inner, out.data() + o * na * inner);
  }
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(out_shape, std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, outer, inner, n, na, start]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gx(xi->data.size(), 0.0);
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = g->data() + o * na * inner;
        std::copy(src, src + na * inner, gx.data() + (o * n + start) * inner);
      }
      accumulate_grad(xi.get(), gx);
    });
  }
  return r;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorCode::shape, "reshape: cannot view " + shape_str(x.shape()) + " as " +
                               shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor(std::move(shape), std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(xi.get(), *g);
    });
  }
  return r;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor({1}, {s}, track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(xi.get(), std::vector<double>(xi->data.size(), (*g)[0]));
    });
  }
  return r;
}

Tensor mean(const Tensor& x) {
  double inv = 1.0 / static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  bool track = Tape::current() && x.requires_grad();
  Tensor r = make_tensor({1}, {s * inv}, track);
  if (track) {
    auto xi = x.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([xi, ri, inv]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      accumulate_grad(xi.get(), std::vector<double>(xi->data.size(), (*g)[0] * inv));
    });
  }
  return r;
}

// ---- spatial ops ------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) {
    fail(ErrorCode::shape, "conv2d: need x[c_in x H x W], w[c_out x c_in x k x k], got " +
                               shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  int64_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    fail(ErrorCode::shape, "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                               shape_str(x.shape()));
  }
  if (k % 2 == 0) fail(ErrorCode::invalid_argument, "conv2d: kernel size must be odd");
  if (stride < 1) fail(ErrorCode::invalid_argument, "conv2d: stride must be >= 1");
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1) {
    fail(ErrorCode::shape, "conv2d: non-positive output extent for input " + shape_str(x.shape()));
  }
  std::vector<double> out(static_cast<size_t>(cout * Ho * Wo), 0.0);
  const double* X = x.data().data();
  const double* Wt = w.data().data();
  for (int64_t co = 0; co < cout; ++co) {
    for (int64_t oy = 0; oy < Ho; ++oy) {
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (int64_t ci = 0; ci < cin; ++ci) {
          for (int64_t ky = 0; ky < k; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const double* xrow = X + (ci * H + iy) * W;
            const double* wrow = Wt + ((co * cin + ci) * k + ky) * k;
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        }
        out[static_cast<size_t>((co * Ho + oy) * Wo + ox)] = acc;
      }
    }
  }
  bool track = Tape::current() && (x.requires_grad() || w.requires_grad());
  Tensor r = make_tensor({cout, Ho, Wo}, std::move(out), track);
  if (track) {
    auto xi = x.impl_ptr(), wi = w.impl_ptr(), ri = r.impl_ptr();
    int64_t s = stride, p = pad;
    Tape::current()->record([xi, wi, ri, cin, H, W, cout, k, Ho, Wo, s, p]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      const double* G = g->data();
      const double* X = xi->data.data();
      const double* Wt = wi->data.data();
      std::vector<double> gx, gw;
      if (xi->requires_grad) gx.assign(xi->data.size(), 0.0);
      if (wi->requires_grad) gw.assign(wi->data.size(), 0.0);
      for (int64_t co = 0; co < cout; ++co) {
        for (int64_t oy = 0; oy < Ho; ++oy) {
          for (int64_t ox = 0; ox < Wo; ++ox) {
            double go = G[(co * Ho + oy) * Wo + ox];
            if (go == 0.0) continue;
            for (int64_t ci = 0; ci < cin; ++ci) {
              for (int64_t ky = 0; ky < k; ++ky) {
                int64_t iy = oy * s - p + ky;
                if (iy < 0 || iy >= H) continue;
                for (int64_t kx = 0; kx < k; ++kx) {
                  int64_t ix = ox * s - p + kx;
                  if (ix < 0 || ix >= W) continue;
                  int64_t xoff = (ci * H + iy) * W + ix;
                  int64_t woff = ((co * cin + ci) * k + ky) * k + kx;
                  if (!gx.empty()) gx[static_cast<size_t>(xoff)] += go * Wt[woff];
                  if (!gw.empty()) gw[static_cast<size_t>(woff)] += go * X[xoff];
                }
              }
            }
          }
        }
      }
      if (!gx.empty()) accumulate_grad(xi.get(), gx);
      if (!gw.empty()) accumulate_grad(wi.get(), gw);
    });
  }
  return r;
}

Tensor bilinear_sample(const Tensor& fmap, double u, double v) {
  if (fmap.rank() != 3) {
    fail(ErrorCode::shape, "bilinear_sample: need [c x h x w], got " + shape_str(fmap.shape()));
  }
  int64_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  double uu = std::clamp(u, 0.0, static_cast<double>(w - 1));
  double vv = std::clamp(v, 0.0, static_cast<double>(h - 1));
  int64_t x0 = static_cast<int64_t>(std::floor(uu));
  int64_t y0 = static_cast<int64_t>(std::floor(vv));
  int64_t x1 = std::min(x0 + 1, w - 1);
  int64_t y1 = std::min(y0 + 1, h - 1);
  double fx = uu - static_cast<double>(x0);
  double fy = vv - static_cast<double>(y0);
  double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
  std::vector<double> out(static_cast<size_t>(c));
  const double* F = fmap.data().data();
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* plane = F + ch * h * w;
    out[static_cast<size_t>(ch)] = w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
                                   w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
  }
  bool track = Tape::current() && fmap.requires_grad();
  Tensor r = make_tensor({c}, std::move(out), track);
  if (track) {
    auto fi = fmap.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([fi, ri, c, h, w, x0, x1, y0, y1, w00, w01, w10, w11]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gf(fi->data.size(), 0.0);
      for (int64_t ch = 0; ch < c; ++ch) {
        double go = (*g)[static_cast<size_t>(ch)];
        double* plane = gf.data() + ch * h * w;
        plane[y0 * w + x0] += go * w00;
        plane[y0 * w + x1] += go * w01;
        plane[y1 * w + x0] += go * w10;
        plane[y1 * w + x1] += go * w11;
      }
      accumulate_grad(fi.get(), gf);
    });
  }
  return r;
}

Tensor stopgrad(const Tensor& x) {
  return make_tensor(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
}

// ---- loss primitives --------------------------------------------------------

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "smooth_l1");
  std::vector<double> out(pred.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double d = pred.data()[i] - target.data()[i];
    double a = std::abs(d);
    out[i] = a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  bool track = Tape::current() && (pred.requires_grad() || target.requires_grad());
  Tensor r = make_tensor(pred.shape(), std::move(out), track);
  if (track) {
    auto pi = pred.impl_ptr(), ti = target.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([pi, ti, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gp(g->size());
      for (size_t i = 0; i < gp.size(); ++i) {
        double d = pi->data[i] - ti->data[i];
        gp[i] = (*g)[i] * std::clamp(d, -1.0, 1.0);
      }
      if (pi->requires_grad) accumulate_grad(pi.get(), gp);
      if (ti->requires_grad) {
        for (double& v : gp) v = -v;
        accumulate_grad(ti.get(), gp);
      }
    });
  }
  return r;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  check_same_shape(logits, targets, "bce_with_logits");
  std::vector<double> out(logits.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = logits.data()[i], t = targets.data()[i];
    out[i] = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  bool track = Tape::current() && (logits.requires_grad() || targets.requires_grad());
  Tensor r = make_tensor(logits.shape(), std::move(out), track);
  if (track) {
    auto li = logits.impl_ptr(), ti = targets.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([li, ti, ri]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      if (li->requires_grad) {
        std::vector<double> gl(g->size());
        for (size_t i = 0; i < gl.size(); ++i) {
          double x = li->data[i];
          double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          gl[i] = (*g)[i] * (s - ti->data[i]);
        }
        accumulate_grad(li.get(), gl);
      }
      if (ti->requires_grad) {
        std::vector<double> gt(g->size());
        for (size_t i = 0; i < gt.size(); ++i) gt[i] = (*g)[i] * (-li->data[i]);
        accumulate_grad(ti.get(), gt);
      }
    });
  }
  return r;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) {
    fail(ErrorCode::shape, "cross_entropy_rows: need [n x C], got " + shape_str(logits.shape()));
  }
  int64_t n = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n) {
    fail(ErrorCode::shape, "cross_entropy_rows: " + std::to_string(targets.size()) +
                               " targets for " + std::to_string(n) + " rows");
  }
  for (int64_t t : targets) {
    if (t < 0 || t >= C) fail(ErrorCode::invalid_argument, "cross_entropy_rows: target out of range");
  }
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * C;
    double mx = row[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
    out[static_cast<size_t>(i)] = std::log(s) + mx - row[targets[static_cast<size_t>(i)]];
  }
  bool track = Tape::current() && logits.requires_grad();
  Tensor r = make_tensor({n}, std::move(out), track);
  if (track) {
    auto li = logits.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([li, ri, n, C, targets]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gl(li->data.size());
      for (int64_t i = 0; i < n; ++i) {
        const double* row = li->data.data() + i * C;
        double mx = row[0];
        for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
        double go = (*g)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < C; ++j) {
          double p = std::exp(row[j] - mx) / s;
          gl[static_cast<size_t>(i * C + j)] =
              go * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
        }
      }
      accumulate_grad(li.get(), gl);
    });
  }
  return r;
}

// ---- scatter / gather -------------------------------------------------------

Tensor scatter_max_bev(const Tensor& feats,
                       const std::vector<std::array<int64_t, 2>>& cells,
                       int64_t size_x, int64_t size_y) {
  if (feats.rank() != 2 || static_cast<int64_t>(cells.size()) != feats.dim(0)) {
    fail(ErrorCode::shape, "scatter_max_bev: feats " + shape_str(feats.shape()) + " vs " +
                               std::to_string(cells.size()) + " cells");
  }
  int64_t J = feats.dim(0), d = feats.dim(1);
  int64_t plane = size_x * size_y;
  std::vector<double> out(static_cast<size_t>(d * plane), 0.0);
  // argmax[c * plane + cell] = source row + 1; 0 means empty.
  std::vector<int64_t> argmax(static_cast<size_t>(d * plane), 0);
  const double* F = feats.data().data();
  for (int64_t j = 0; j < J; ++j) {
    int64_t cx = cells[static_cast<size_t>(j)][0];
    int64_t cy = cells[static_cast<size_t>(j)][1];
    if (cx < 0 || cx >= size_x || cy < 0 || cy >= size_y) {
      fail(ErrorCode::invalid_argument, "scatter_max_bev: cell out of grid");
    }
    int64_t cell = cx * size_y + cy;
    for (int64_t ch = 0; ch < d; ++ch) {
      double v = F[j * d + ch];
      size_t off = static_cast<size_t>(ch * plane + cell);
      if (argmax[off] == 0 || v > out[off]) {
        out[off] = v;
        argmax[off] = j + 1;
      }
    }
  }
  bool track = Tape::current() && feats.requires_grad();
  Tensor r = make_tensor({d, size_x, size_y}, std::move(out), track);
  if (track) {
    auto fi = feats.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([fi, ri, d, plane, argmax = std::move(argmax)]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gf(fi->data.size(), 0.0);
      int64_t dd = d;
      for (int64_t ch = 0; ch < dd; ++ch) {
        for (int64_t cell = 0; cell < plane; ++cell) {
          int64_t j = argmax[static_cast<size_t>(ch * plane + cell)];
          if (j == 0) continue;
          gf[static_cast<size_t>((j - 1) * dd + ch)] += (*g)[static_cast<size_t>(ch * plane + cell)];
        }
      }
      accumulate_grad(fi.get(), gf);
    });
  }
  return r;
}

Tensor gather_cells(const Tensor& map, const std::vector<std::array<int64_t, 2>>& cells) {
  if (map.rank() != 3) {
    fail(ErrorCode::shape, "gather_cells: need [c x X x Y], got " + shape_str(map.shape()));
  }
  int64_t c = map.dim(0), X = map.dim(1), Y = map.dim(2);
  int64_t n = static_cast<int64_t>(cells.size());
  if (n == 0) fail(ErrorCode::invalid_argument, "gather_cells: empty cell list");
  std::vector<double> out(static_cast<size_t>(n * c));
  const double* M = map.data().data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t cx = cells[static_cast<size_t>(i)][0], cy = cells[static_cast<size_t>(i)][1];
    if (cx < 0 || cx >= X || cy < 0 || cy >= Y) {
      fail(ErrorCode::invalid_argument, "gather_cells: cell out of grid");
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      out[static_cast<size_t>(i * c + ch)] = M[(ch * X + cx) * Y + cy];
    }
  }
  bool track = Tape::current() && map.requires_grad();
  Tensor r = make_tensor({n, c}, std::move(out), track);
  if (track) {
    auto mi = map.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([mi, ri, c, X, Y, n, cells]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gm(mi->data.size(), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        int64_t cx = cells[static_cast<size_t>(i)][0], cy = cells[static_cast<size_t>(i)][1];
        for (int64_t ch = 0; ch < c; ++ch) {
          gm[static_cast<size_t>((ch * X + cx) * Y + cy)] += (*g)[static_cast<size_t>(i * c + ch)];
        }
      }
      accumulate_grad(mi.get(), gm);
    });
  }
  return r;
}

Tensor group_rows_max(const Tensor& feats, const std::vector<std::vector<int64_t>>& groups,
                      int64_t group_count) {
  if (feats.rank() != 2) {
    fail(ErrorCode::shape, "group_rows_max: need [J x d], got " + shape_str(feats.shape()));
  }
  if (static_cast<int64_t>(groups.size()) != group_count) {
    fail(ErrorCode::invalid_argument, "group_rows_max: group list size mismatch");
  }
  int64_t J = feats.dim(0), d = feats.dim(1);
  std::vector<double> out(static_cast<size_t>(group_count * d), 0.0);
  std::vector<int64_t> argmax(static_cast<size_t>(group_count * d), -1);
  const double* F = feats.data().data();
  for (int64_t gidx = 0; gidx < group_count; ++gidx) {
    for (int64_t j : groups[static_cast<size_t>(gidx)]) {
      if (j < 0 || j >= J) fail(ErrorCode::invalid_argument, "group_rows_max: row index out of range");
      for (int64_t ch = 0; ch < d; ++ch) {
        size_t off = static_cast<size_t>(gidx * d + ch);
        double v = F[j * d + ch];
        if (argmax[off] < 0 || v > out[off]) {
          out[off] = v;
          argmax[off] = j;
        }
      }
    }
  }
  bool track = Tape::current() && feats.requires_grad();
  Tensor r = make_tensor({group_count, d}, std::move(out), track);
  if (track) {
    auto fi = feats.impl_ptr(), ri = r.impl_ptr();
    Tape::current()->record([fi, ri, d, group_count, argmax = std::move(argmax)]() {
      auto* g = grad_buffer_if_present(ri.get());
      if (!g) return;
      std::vector<double> gf(fi->data.size(), 0.0);
      for (int64_t gidx = 0; gidx < group_count; ++gidx) {
        for (int64_t ch = 0; ch < d; ++ch) {
          int64_t j = argmax[static_cast<size_t>(gidx * d + ch)];
          if (j < 0) continue;
          gf[static_cast<size_t>(j * d + ch)] += (*g)[static_cast<size_t>(gidx * d + ch)];
        }
      }
      accumulate_grad(fi.get(), gf);
    });
  }
  return r;
}

// ---- grad check -------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f_analytic,
                  const std::function<Tensor()>& f_numeric, std::span<Tensor> params,
                  double eps) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f_analytic();
    tape.backward(loss);
    for (Tensor& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.numel(), 0.0);
      }
      p.clear_grad();
    }
  }
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    auto data = p.mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      double v0 = data[i];
      data[i] = v0 + eps;
      double fp = f_numeric().item();
      data[i] = v0 - eps;
      double fm = f_numeric().item();
      data[i] = v0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        fail(ErrorCode::numeric, "grad_check: non-finite function value at perturbed point");
      }
      double num = (fp - fm) / (2.0 * eps);
      double ana = analytic[pi][i];
      double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  return grad_check(f, f, params, eps);
}

// ---- serialization ----------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

uint32_t get_u32(std::span<const uint8_t> b, size_t off) {
  return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
         (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}

}  // namespace

std::vector<uint8_t> tensor_to_bytes(const Tensor& t) {
  std::vector<uint8_t> out;
  out.reserve(8 + t.shape().size() * 4 + t.data().size() * 8);
  out.push_back('A');
  out.push_back('A');
  out.push_back('T');
  out.push_back('N');
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int64_t e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
  for (double v : t.data()) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int s = 0; s < 64; s += 8) out.push_back(static_cast<uint8_t>((bits >> s) & 0xff));
  }
  return out;
}

Tensor tensor_from_bytes(std::span<const uint8_t> b) {
  if (b.size() < 8 || b[0] != 'A' || b[1] != 'A' || b[2] != 'T' || b[3] != 'N') {
    fail(ErrorCode::parse, "tensor: bad magic (want AATN)");
  }
  uint32_t rank = get_u32(b, 4);
  if (rank > 8) fail(ErrorCode::parse, "tensor: implausible rank " + std::to_string(rank));
  size_t off = 8;
  if (b.size() < off + rank * 4) fail(ErrorCode::parse, "tensor: truncated header");
  Shape shape;
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t e = get_u32(b, off);
    off += 4;
    shape.push_back(static_cast<int64_t>(e));
    n *= e;
  }
  if (b.size() != off + static_cast<size_t>(n) * 8) {
    fail(ErrorCode::parse, "tensor: payload size mismatch for shape " + shape_str(shape));
  }
  std::vector<double> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    uint64_t bits = 0;
    for (int s = 0; s < 8; ++s) bits |= static_cast<uint64_t>(b[off + s]) << (8 * s);
    off += 8;
    std::memcpy(&data[static_cast<size_t>(i)], &bits, 8);
  }
  return make_tensor(std::move(shape), std::move(data), false);
}

void save_tensor(const Tensor& t, const std::string& path) {
  auto bytes = tensor_to_bytes(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::io, "write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return tensor_from_bytes(bytes);
}

}  // namespace vf
