#include "sinkdoor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

namespace {

thread_local Tape* g_active_tape = nullptr;

// c[m x n] += a[m x k] * b[k x n]. Each output row depends only on its own
// input row, so stacking sequences into one batch never changes results.
void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// c[k x n] += a^T * g with a[m x k], g[m x n].
void gemm_tn_acc(const double* __restrict a, const double* __restrict g, double* __restrict c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ai[p];
      if (s == 0.0) continue;
      double* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += s * gi[j];
    }
  }
}

std::vector<double> transposed(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

std::vector<double>& grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_2d(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Applies f elementwise; df(x, y) returns dy/dx from input x and output y.
template <typename F, typename DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  require_defined(a, op);
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor result(a.shape(), std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl();
    auto oi = result.impl();
    tape->record(result, [ai, oi, df] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * df(ai->data[i], oi->data[i]);
    });
  }
  return result;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ShapeError("rows() on non-matrix " + shape_string(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ShapeError("cols() on non-matrix " + shape_string(shape()));
  return impl_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data.at(r * cols() + c); }

std::span<double> Tensor::mutable_grad() const { return grad_buffer(*impl_); }

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

// ---- Tape -------------------------------------------------------------------

void Tape::record(const Tensor& out, BackwardFn fn) {
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.is_leaf = false;
  impl.tape = this;
  impl.node = static_cast<long>(nodes_.size());
  nodes_.push_back({out.impl(), std::move(fn)});
}

void Tape::backward(const Tensor& root) {
  require_defined(root, "backward");
  if (root.numel() != 1) {
    throw ContractError("backward: root must be scalar, got " + shape_string(root.shape()));
  }
  if (root.impl()->tape != this) throw ContractError("backward: root is not on this tape");
  for (auto& node : nodes_) node.out->grad.clear();
  root.impl()->grad.assign(1, 1.0);
  const auto last = static_cast<std::size_t>(root.impl()->node);
  for (std::size_t i = last + 1; i-- > 0;) {
    if (nodes_[i].out->grad.empty()) continue;
    nodes_[i].fn();
  }
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void backward(const Tensor& root) {
  if (g_active_tape == nullptr) throw ContractError("backward: no active tape");
  g_active_tape->backward(root);
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = result.impl();
    tape->record(result, [ai, bi, oi, m, k, n] {
      if (ai->requires_grad) {
        const std::vector<double> bt = transposed(bi->data, k, n);
        gemm_acc(oi->grad.data(), bt.data(), grad_buffer(*ai).data(), m, n, k);
      }
      if (bi->requires_grad) {
        gemm_tn_acc(ai->data.data(), oi->grad.data(), grad_buffer(*bi).data(), m, k, n);
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  Tensor result({n, m}, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    tape->record(result, [ai, oi, m, n] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += oi->grad[j * m + i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Tensor result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    tape->record(result, [ai, oi] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return result;
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  Tensor result(a.shape(), std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = result.impl();
    tape->record(result, [ai, bi, oi, da, db] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(ai->data[i], bi->data[i]);
      }
      if (bi->requires_grad) {
        auto& gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(ai->data[i], bi->data[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_row_broadcast(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row_broadcast");
  require_defined(bias, "add_row_broadcast");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.ndim() != 1 || bias.dim(0) != n) {
    throw ShapeError("add_row_broadcast: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                     shape_string(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = recording_tape({&a, &bias})) {
    auto ai = a.impl(), bi = bias.impl(), oi = result.impl();
    tape->record(result, [ai, bi, oi, m, n] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return result;
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  // log(1 + e^x) computed without overflow; derivative is sigmoid(x).
  return unary(
      a, "softplus",
      [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor square(const Tensor& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor result = Tensor::scalar(s);
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    tape->record(result, [ai, oi] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      const double go = oi->grad[0];
      for (double& x : g) x += go;
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor segment_sum(const Tensor& a, std::span<const Segment> segments) {
  require_defined(a, "segment_sum");
  if (a.ndim() != 1) throw ShapeError("segment_sum: expected a vector, got " + shape_string(a.shape()));
  if (segments.empty()) throw ShapeError("segment_sum: no segments");
  std::vector<double> out(segments.size(), 0.0);
  auto x = a.data();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].offset + segments[s].length > x.size()) {
      throw ShapeError("segment_sum: segment exceeds input length");
    }
    for (std::size_t i = 0; i < segments[s].length; ++i) out[s] += x[segments[s].offset + i];
  }
  Tensor result({segments.size()}, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    std::vector<Segment> segs(segments.begin(), segments.end());
    tape->record(result, [ai, oi, segs] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t s = 0; s < segs.size(); ++s)
        for (std::size_t i = 0; i < segs[s].length; ++i) g[segs[s].offset + i] += oi->grad[s];
    });
  }
  return result;
}

Tensor sum_rows(const Tensor& a) {
  require_2d(a, "sum_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x[i * n + j];
  Tensor result({m}, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    tape->record(result, [ai, oi, m, n] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += oi->grad[i];
    });
  }
  return result;
}

// ---- normalization / indexing ----------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  require_defined(gamma, "layer_norm");
  require_defined(beta, "layer_norm");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm: affine parameters " + shape_string(gamma.shape()) + "/" +
                     shape_string(beta.shape()) + " do not fit " + shape_string(x.shape()));
  }
  std::vector<double> out(m * n), xhat(m * n), rstd(m);
  auto in = x.data();
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &in[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl();
    tape->record(result, [xi, gi, bi, oi, m, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& go = oi->grad;
      if (gi->requires_grad) {
        auto& gg = grad_buffer(*gi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat[i * n + j];
      }
      if (bi->requires_grad) {
        auto& gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
      if (xi->requires_grad) {
        auto& gx = grad_buffer(*xi);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j] * gi->data[j];
            mean_g += g;
            mean_gx += g * xhat[i * n + j];
          }
          mean_g *= inv_n;
          mean_gx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j] * gi->data[j];
            gx[i * n + j] += rstd[i] * (g - mean_g - xhat[i * n + j] * mean_gx);
          }
        }
      }
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_2d(table, "embedding");
  if (ids.empty()) throw ShapeError("embedding: no ids");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  auto t = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " outside table of " + std::to_string(v));
    }
    std::copy_n(&t[ids[r] * d], d, &out[r * d]);
  }
  Tensor result({ids.size(), d}, std::move(out));
  if (Tape* tape = recording_tape({&table})) {
    auto ti = table.impl(), oi = result.impl();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    tape->record(result, [ti, oi, idx, d] {
      if (!ti->requires_grad) return;
      auto& g = grad_buffer(*ti);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += oi->grad[r * d + j];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_2d(a, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: no rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(rows.size() * n);
  auto x = a.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(&x[rows[r] * n], n, &out[r * n]);
  }
  Tensor result({rows.size(), n}, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape->record(result, [ai, oi, idx, n] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += oi->grad[r * n + j];
    });
  }
  return result;
}

Tensor pick_per_row(const Tensor& a, std::span<const std::size_t> cols) {
  require_2d(a, "pick_per_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (cols.size() != m) throw ShapeError("pick_per_row: need one column index per row");
  std::vector<double> out(m);
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw ShapeError("pick_per_row: column " + std::to_string(cols[i]) + " out of range");
    out[i] = x[i * n + cols[i]];
  }
  Tensor result({m}, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    auto ai = a.impl(), oi = result.impl();
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    tape->record(result, [ai, oi, idx, n] {
      if (!ai->requires_grad) return;
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += oi->grad[i];
    });
  }
  return result;
}

// ---- softmax family ---------------------------------------------------------

namespace {

void check_finite(std::span<const double> x, const char* op) {
  for (double v : x) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  check_finite(x.data(), "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &in[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    auto xi = x.impl(), oi = result.impl();
    tape->record(result, [xi, oi, m, n] {
      if (!xi->requires_grad) return;
      auto& g = grad_buffer(*xi);
      const auto& y = oi->data;
      const auto& gy = oi->grad;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (gy[i * n + j] - dot);
      }
    });
  }
  return result;
}

Tensor log_softmax_rows(const Tensor& x) {
  require_2d(x, "log_softmax_rows");
  check_finite(x.data(), "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto in = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &in[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  Tensor result({m, n}, std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    auto xi = x.impl(), oi = result.impl();
    tape->record(result, [xi, oi, m, n] {
      if (!xi->requires_grad) return;
      auto& g = grad_buffer(*xi);
      const auto& y = oi->data;
      const auto& gy = oi->grad;
      for (std::size_t i = 0; i < m; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += gy[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[i * n + j] - std::exp(y[i * n + j]) * total;
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const bool> mask) {
  require_2d(logits, "cross_entropy");
  check_finite(logits.data(), "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m || mask.size() != m) {
    throw ShapeError("cross_entropy: targets/mask length must equal " + std::to_string(m));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= n) throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " >= V");
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy: every position is masked");
  auto in = logits.data();
  std::vector<double> lse(m, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    const double* row = &in[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    lse[i] = mx + std::log(z);
    total += lse[i] - row[targets[i]];
  }
  Tensor result = Tensor::scalar(total / static_cast<double>(count));
  if (Tape* tape = recording_tape({&logits})) {
    auto li = logits.impl(), oi = result.impl();
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    std::vector<bool> msk(mask.begin(), mask.end());
    tape->record(result, [li, oi, tgt, msk, lse = std::move(lse), m, n, count] {
      if (!li->requires_grad) return;
      auto& g = grad_buffer(*li);
      const double go = oi->grad[0] / static_cast<double>(count);
      for (std::size_t i = 0; i < m; ++i) {
        if (!msk[i]) continue;
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go * std::exp(li->data[i * n + j] - lse[i]);
        g[i * n + tgt[i]] -= go;
      }
    });
  }
  return result;
}

// ---- attention --------------------------------------------------------------

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Segment> segments,
                        std::size_t n_heads, std::vector<std::vector<double>>* probs) {
  require_2d(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t rows = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("causal_attention: d not divisible by heads");
  const std::size_t dh = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(rows * d, 0.0);
  auto weights = std::make_shared<std::vector<std::vector<double>>>();
  weights->reserve(segments.size() * n_heads);
  for (const Segment& seg : segments) {
    if (seg.offset + seg.length > rows || seg.length == 0) {
      throw ShapeError("causal_attention: segment outside the batch");
    }
    const std::size_t t = seg.length;
    for (std::size_t h = 0; h < n_heads; ++h) {
      std::vector<double> p(t * t, 0.0);
      for (std::size_t i = 0; i < t; ++i) {
        const double* qi = &qd[(seg.offset + i) * d + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = &kd[(seg.offset + j) * d + h * dh];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * t + j] = s * scl;
          mx = std::max(mx, p[i * t + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (p[i * t + j] = std::exp(p[i * t + j] - mx));
        for (std::size_t j = 0; j <= i; ++j) p[i * t + j] /= z;
        double* oi = &out[(seg.offset + i) * d + h * dh];
        for (std::size_t j = 0; j <= i; ++j) {
          const double w = p[i * t + j];
          const double* vj = &vd[(seg.offset + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
      weights->push_back(std::move(p));
    }
  }
  if (probs != nullptr) *probs = *weights;
  Tensor result({rows, d}, std::move(out));
  if (Tape* tape = recording_tape({&q, &k, &v})) {
    auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = result.impl();
    std::vector<Segment> segs(segments.begin(), segments.end());
    tape->record(result, [qi, ki, vi, oi, segs, weights, n_heads, d, dh, scl] {
      const auto& go = oi->grad;
      std::vector<double> zeros_q, zeros_k, zeros_v;
      auto& gq = qi->requires_grad ? grad_buffer(*qi) : (zeros_q.assign(qi->data.size(), 0.0), zeros_q);
      auto& gk = ki->requires_grad ? grad_buffer(*ki) : (zeros_k.assign(ki->data.size(), 0.0), zeros_k);
      auto& gv = vi->requires_grad ? grad_buffer(*vi) : (zeros_v.assign(vi->data.size(), 0.0), zeros_v);
      std::size_t w = 0;
      for (const Segment& seg : segs) {
        const std::size_t t = seg.length;
        std::vector<double> dp(t);
        for (std::size_t h = 0; h < n_heads; ++h, ++w) {
          const auto& p = (*weights)[w];
          for (std::size_t i = 0; i < t; ++i) {
            const double* gi = &go[(seg.offset + i) * d + h * dh];
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              const double* vj = &vi->data[(seg.offset + j) * d + h * dh];
              double* gvj = &gv[(seg.offset + j) * d + h * dh];
              const double pij = p[i * t + j];
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) {
                s += gi[c] * vj[c];
                gvj[c] += pij * gi[c];
              }
              dp[j] = s;
              dot += pij * s;
            }
            const double* qrow = &qi->data[(seg.offset + i) * d + h * dh];
            double* gqrow = &gq[(seg.offset + i) * d + h * dh];
            for (std::size_t j = 0; j <= i; ++j) {
              const double ds = p[i * t + j] * (dp[j] - dot) * scl;
              if (ds == 0.0) continue;
              const double* kj = &ki->data[(seg.offset + j) * d + h * dh];
              double* gkj = &gk[(seg.offset + j) * d + h * dh];
              for (std::size_t c = 0; c < dh; ++c) {
                gqrow[c] += ds * kj[c];
                gkj[c] += ds * qrow[c];
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor head_norms(const Tensor& v, std::span<const std::size_t> rows, std::size_t n_heads) {
  require_2d(v, "head_norms");
  if (rows.empty()) throw ShapeError("head_norms: no rows");
  const std::size_t m = v.rows(), d = v.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("head_norms: d not divisible by heads");
  const std::size_t dh = d / n_heads;
  std::vector<double> out(rows.size() * n_heads);
  auto x = v.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw ShapeError("head_norms: row " + std::to_string(rows[r]) + " out of range");
    for (std::size_t h = 0; h < n_heads; ++h) {
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += x[rows[r] * d + h * dh + c] * x[rows[r] * d + h * dh + c];
      out[r * n_heads + h] = std::sqrt(s);
    }
  }
  Tensor result({rows.size(), n_heads}, std::move(out));
  if (Tape* tape = recording_tape({&v})) {
    auto vi = v.impl(), oi = result.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape->record(result, [vi, oi, idx, n_heads, d, dh] {
      if (!vi->requires_grad) return;
      auto& g = grad_buffer(*vi);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const double norm = oi->data[r * n_heads + h];
          if (norm == 0.0) continue;
          const double go = oi->grad[r * n_heads + h] / norm;
          for (std::size_t c = 0; c < dh; ++c) {
            const std::size_t at = idx[r] * d + h * dh + c;
            g[at] += go * vi->data[at];
          }
        }
      }
    });
  }
  return result;
}

}  // namespace sinkdoor
