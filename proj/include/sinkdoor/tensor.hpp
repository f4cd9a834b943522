#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sinkdoor {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first gradient lands
  bool requires_grad = false;
  bool is_leaf = true;
  const void* tape = nullptr;
  long node = -1;
};

// Dense row-major f64 array. Tensor is a shared handle: copying a Tensor
// aliases the same storage, use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() const { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() const;  // allocates zeros on first use
  void zero_grad() const;

  // Same values, no gradient, no tape participation.
  Tensor detach() const;
  // Independent deep copy preserving requires_grad (gradient not copied).
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Records differentiable operations. Ops record onto the tape installed by
// the innermost live TapeScope on the calling thread, and only when at least
// one input requires a gradient. A tape must stay on one thread.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& out, BackwardFn fn);
  // Reverse sweep from a scalar root. Leaf gradients accumulate across calls;
  // intermediate gradients are recomputed from scratch each call.
  void backward(const Tensor& root);
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();

 private:
  friend class TapeScope;
  struct Node {
    std::shared_ptr<TensorImpl> out;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

// Suspends recording on this thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Plain row-major matrix used for captured diagnostics.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool operator==(const Matrix&) const = default;
};

// Backward on the thread's active tape.
void backward(const Tensor& root);

// Contiguous run of rows belonging to one sequence in a stacked batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// ---- differentiable operations -------------------------------------------
// Shapes must match exactly; the only broadcasting op is add_row_broadcast.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a[m x n] + bias[n] added to every row.
Tensor add_row_broadcast(const Tensor& a, const Tensor& bias);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
// tanh-approximated GELU.
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [n] -> [segments.size()], summing each contiguous run.
Tensor segment_sum(const Tensor& a, std::span<const Segment> segments);
// [m x n] -> [m], summing each row.
Tensor sum_rows(const Tensor& a);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// table[V x d] gathered at ids -> [ids.size() x d]; gradient scatter-adds.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// Picks a[i, cols[i]] for every row -> [m].
Tensor pick_per_row(const Tensor& a, std::span<const std::size_t> cols);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// Mean over unmasked rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const bool> mask);

// Multi-head causal self-attention over a stacked batch. q, k, v are [N x d]
// with head h owning columns [h*d/H, (h+1)*d/H). When probs is non-null it
// receives one row-major T x T matrix per (segment, head), segment-major.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const Segment> segments, std::size_t n_heads,
                        std::vector<std::vector<double>>* probs = nullptr);

// L2 norm of each head slice of v at the given rows -> [rows.size() x H].
Tensor head_norms(const Tensor& v, std::span<const std::size_t> rows, std::size_t n_heads);

}  // namespace sinkdoor
