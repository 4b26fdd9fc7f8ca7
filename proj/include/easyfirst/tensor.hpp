#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a node holding its value and (lazily) its
// gradient. Operations executed while a Tape is active and at least one input
// requires grad append a backward closure to that tape; Tape::backward replays
// the closures in reverse order. Without an active tape, operations compute
// values only, which is how inference runs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace easyfirst {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor;

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Activates a tape (or none, for value-only evaluation) on this thread
  /// for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(current_) { current_ = tape; }
    ~Scope() { current_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* current() { return current_; }

  void record(std::function<void()> backward) {
    if (consumed_) throw TapeError("tape already replayed; call reset() before recording");
    ops_.push_back(std::move(backward));
  }

  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    ops_.clear();
    consumed_ = false;
  }

  void backward(const Tensor<T>& loss);

 private:
  static inline thread_local Tape* current_ = nullptr;
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

/// Disables recording on the current thread while alive.
template <typename T>
class NoGrad {
 public:
  NoGrad() : scope_(nullptr) {}

 private:
  typename Tape<T>::Scope scope_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape.empty()) shape = {1};
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    if (data.size() != element_count(shape)) {
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    const auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows, bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.front(); }
  std::size_t cols() const { return node_->shape.size() > 1 ? size() / node_->shape.front() : 1; }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the value without gradient history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->value, requires_grad);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by operation implementations.
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("backward() requires a scalar loss, got " +
                         (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw TapeError("loss is not on the tape (no input requires grad)");
  if (consumed_) throw TapeError("backward() called twice on the same tape without reset()");
  consumed_ = true;
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::current();
  if (!tape) return nullptr;
  for (const auto* in : inputs) {
    if (in->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + to_string(t.shape()));
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[m×k] · b[k×n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), m, k) * detail::ConstMatrixMap<T>(b.data().data(), k, n);
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_output<T>({m, n}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(), m, k, n] {
      if (on->grad.empty()) return;
      detail::ConstMatrixMap<T> dc(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::MatrixMap<T>(an->grad_buffer().data(), m, k).noalias() +=
            dc * detail::ConstMatrixMap<T>(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        detail::MatrixMap<T>(bn->grad_buffer().data(), k, n).noalias() +=
            detail::ConstMatrixMap<T>(an->value.data(), m, k).transpose() * dc;
      }
    });
  }
  return result;
}

/// a[m×k] · b[n×k]ᵀ.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_transposed");
  detail::require_matrix(b, "matmul_transposed");
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_transposed shape mismatch: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.data().data(), m, k) *
      detail::ConstMatrixMap<T>(b.data().data(), n, k).transpose();
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_output<T>({m, n}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(), m, k, n] {
      if (on->grad.empty()) return;
      detail::ConstMatrixMap<T> dc(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::MatrixMap<T>(an->grad_buffer().data(), m, k).noalias() +=
            dc * detail::ConstMatrixMap<T>(bn->value.data(), n, k);
      }
      if (bn->requires_grad) {
        detail::MatrixMap<T>(bn->grad_buffer().data(), n, k).noalias() +=
            dc.transpose() * detail::ConstMatrixMap<T>(an->value.data(), m, k);
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto* tape = detail::recording_tape<T>({&a, &b});
  auto result = detail::make_output<T>(a.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node()] {
      if (on->grad.empty()) return;
      for (auto* in : {an.get(), bn.get()}) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>(x.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), factor] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * on->grad[i];
    });
  }
  return result;
}

/// x[R×C] + bias[C] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const auto c = x.shape().back();
  if (bias.size() != c) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  const auto r = x.size() / c;
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  auto* tape = detail::recording_tape<T>({&x, &bias});
  auto result = detail::make_output<T>(x.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), bn = bias.node(), on = result.node(), r, c] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[j] += on->grad[i * c + j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>(x.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xn->value[i] > T{0}) g[i] += on->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto xv = x.data();
  T total = std::accumulate(xv.begin(), xv.end(), T{0});
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>({1}, {total}, tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (auto& v : g) v += on->grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

/// Forward identity that contributes nothing to the gradient of its input.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return detail::make_output<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), false);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (element_count(shape) != x.size()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
                                       tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Row / column plumbing
// ---------------------------------------------------------------------------

/// Rows of `table` at `indices` (embedding lookup, row subsets).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> indices) {
  detail::require_matrix(table, "gather_rows");
  const auto n = table.shape()[0], c = table.shape()[1];
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<T> out(indices.size() * c);
  const auto tv = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                           to_string(table.shape()));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  auto* tape = detail::recording_tape<T>({&table});
  auto result = detail::make_output<T>({indices.size(), c}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([tn = table.node(), on = result.node(), idx = std::vector<std::size_t>(indices.begin(), indices.end()),
                  c] {
      if (on->grad.empty()) return;
      auto& g = tn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += on->grad[i * c + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const auto r = x.shape()[0], c = x.shape()[1];
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         to_string(x.shape()));
  }
  std::vector<T> out(r * count);
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * c + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>({r, count}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), r, c, begin, count] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += on->grad[i * count + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row mismatch " + to_string(p.shape()));
    c += p.cols();
  }
  std::vector<T> out(r * c);
  std::size_t offset = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const auto pc = p.cols();
    const auto pv = p.data();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  out.begin() + static_cast<std::ptrdiff_t>(i * c + offset));
    offset += pc;
    any_grad = any_grad || p.requires_grad();
  }
  auto* tape = any_grad ? Tape<T>::current() : nullptr;
  auto result = detail::make_output<T>({r, c}, std::move(out), tape != nullptr);
  if (tape) {
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record([nodes = std::move(nodes), on = result.node(), r, c] {
      if (on->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        const auto pc = n->shape[1];
        if (n->requires_grad) {
          auto& g = n->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += on->grad[i * c + offset + j];
        }
        offset += pc;
      }
    });
  }
  return result;
}

/// Sum of same-shaped tensors.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw DimensionError("add_n: no inputs");
  Tensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Normalization and probabilities
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilized by subtracting the running maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw DimensionError("softmax axis out of range for " + to_string(shape));
  const auto n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  const auto outer = x.size() / (n * inner);
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const auto base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>(shape, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), outer, n, inner] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      const auto& y = on->value;
      const auto& dy = on->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const auto base = o * n * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += y[base + j * inner] * dy[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const auto idx = base + j * inner;
            g[idx] += y[idx] * (dy[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

/// Row-wise softmax of x[R×C] restricted to entries where `visible` is
/// nonzero; hidden entries get probability exactly 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> visible) {
  detail::require_matrix(x, "masked_softmax");
  const auto r = x.shape()[0], c = x.shape()[1];
  if (visible.size() != r * c) {
    throw DimensionError("masked_softmax: mask size " + std::to_string(visible.size()) + " vs " +
                         to_string(x.shape()));
  }
  std::vector<T> out(x.size(), T{0});
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (visible[i * c + j]) {
        mx = std::max(mx, xv[i * c + j]);
        any = true;
      }
    }
    if (!any) throw DimensionError("attention row " + std::to_string(i) + " has no visible key");
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!visible[i * c + j]) continue;
      const T e = std::exp(xv[i * c + j] - mx);
      out[i * c + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>(x.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), r, c] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      const auto& y = on->value;
      const auto& dy = on->grad;
      for (std::size_t i = 0; i < r; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * dy[i * c + j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[i * c + j] * (dy[i * c + j] - dot);
      }
    });
  }
  return result;
}

/// Normalizes each row of x[...×d] to zero mean and unit variance, then
/// applies gamma[d] and beta[d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: affine parameters " + to_string(gamma.shape()) + "/" +
                         to_string(beta.shape()) + " do not match " + to_string(x.shape()));
  }
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const auto r = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(r);
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = gv[j] * h + bv[j];
    }
  }
  auto* tape = detail::recording_tape<T>({&x, &gamma, &beta});
  auto result = detail::make_output<T>(x.shape(), std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), r, d] {
      if (on->grad.empty()) return;
      const auto& dy = on->grad;
      if (gn->requires_grad) {
        auto& g = gn->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j] * xhat[i * d + j];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
      }
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        const auto& gamma_v = gn->value;
        for (std::size_t i = 0; i < r; ++i) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[i * d + j] * gamma_v[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * d + j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[i * d + j] * gamma_v[j];
            g[i * d + j] += inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// logits[T×V], skipping rows whose `ignore` flag is set.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                        std::span<const std::uint8_t> ignore = {}) {
  detail::require_matrix(logits, "cross_entropy");
  const auto rows = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         to_string(logits.shape()));
  }
  if (!ignore.empty() && ignore.size() != rows) throw DimensionError("cross_entropy: ignore mask length mismatch");
  std::vector<T> probs(logits.size());
  std::size_t counted = 0;
  T total = 0;
  const auto lv = logits.data();
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " >= " + std::to_string(v));
    }
    const T* row = lv.data() + i * v;
    const T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    if (!ignore.empty() && ignore[i]) continue;
    total += (mx + std::log(z)) - row[targets[i]];
    ++counted;
  }
  if (counted == 0) throw DimensionError("cross_entropy: every position is ignored");
  auto* tape = detail::recording_tape<T>({&logits});
  auto result = detail::make_output<T>({1}, {total / static_cast<T>(counted)}, tape != nullptr);
  if (tape) {
    tape->record([ln = logits.node(), on = result.node(), probs = std::move(probs),
                  tg = std::vector<std::size_t>(targets.begin(), targets.end()),
                  ig = std::vector<std::uint8_t>(ignore.begin(), ignore.end()), rows, v, counted] {
      if (on->grad.empty()) return;
      const T w = on->grad[0] / static_cast<T>(counted);
      auto& g = ln->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i) {
        if (!ig.empty() && ig[i]) continue;
        for (std::size_t j = 0; j < v; ++j) g[i * v + j] += w * probs[i * v + j];
        g[i * v + tg[i]] -= w;
      }
    });
  }
  return result;
}

/// Mean over rows with `valid` set of 1 - cos(a_r, b_r); the norm product is
/// clamped below by `eps`.
template <typename T>
Tensor<T> cosine_distance(const Tensor<T>& a, const Tensor<T>& b, std::span<const std::uint8_t> valid = {},
                          T eps = T(1e-8)) {
  detail::require_matrix(a, "cosine_distance");
  if (a.shape() != b.shape()) {
    throw DimensionError("cosine_distance shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto r = a.shape()[0], d = a.shape()[1];
  if (!valid.empty() && valid.size() != r) throw DimensionError("cosine_distance: valid mask length mismatch");
  struct RowStats {
    T dot, na, nb, denom;
    bool clamped;
  };
  std::vector<RowStats> stats(r);
  std::size_t counted = 0;
  T total = 0;
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (!valid.empty() && !valid[i]) continue;
    T dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av[i * d + j] * bv[i * d + j];
      sa += av[i * d + j] * av[i * d + j];
      sb += bv[i * d + j] * bv[i * d + j];
    }
    const T na = std::sqrt(sa), nb = std::sqrt(sb);
    const bool clamped = na * nb < eps;
    const T denom = clamped ? eps : na * nb;
    stats[i] = {dot, na, nb, denom, clamped};
    total += T{1} - dot / denom;
    ++counted;
  }
  const T value = counted ? total / static_cast<T>(counted) : T{0};
  auto* tape = counted ? detail::recording_tape<T>({&a, &b}) : nullptr;
  auto result = detail::make_output<T>({1}, {value}, tape != nullptr);
  if (tape) {
    tape->record([an = a.node(), bn = b.node(), on = result.node(), stats = std::move(stats),
                  vm = std::vector<std::uint8_t>(valid.begin(), valid.end()), r, d, counted] {
      if (on->grad.empty()) return;
      const T w = -on->grad[0] / static_cast<T>(counted);
      const auto& av = an->value;
      const auto& bv = bn->value;
      for (std::size_t i = 0; i < r; ++i) {
        if (!vm.empty() && !vm[i]) continue;
        const auto& s = stats[i];
        // d cos / da = b / denom - dot * a / (na^3 nb) when unclamped.
        if (an->requires_grad) {
          auto& g = an->grad_buffer();
          for (std::size_t j = 0; j < d; ++j) {
            T dc = bv[i * d + j] / s.denom;
            if (!s.clamped) dc -= s.dot * av[i * d + j] / (s.na * s.na * s.denom);
            g[i * d + j] += w * dc;
          }
        }
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t j = 0; j < d; ++j) {
            T dc = av[i * d + j] / s.denom;
            if (!s.clamped) dc -= s.dot * bv[i * d + j] / (s.nb * s.nb * s.denom);
            g[i * d + j] += w * dc;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution support
// ---------------------------------------------------------------------------

/// Unfolds x[H×W×C] (channels last) into patches [(Ho·Wo)×(k·k·C)] for a
/// square kernel; zero padding. Patch layout is (ky, kx, c).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3) throw DimensionError("im2col expects [H x W x C], got " + to_string(x.shape()));
  const auto h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel) {
    throw DimensionError("im2col: kernel does not fit " + to_string(x.shape()));
  }
  const auto ho = (h + 2 * pad - kernel) / stride + 1;
  const auto wo = (w + 2 * pad - kernel) / stride + 1;
  const auto patch = kernel * kernel * c;
  std::vector<T> out(ho * wo * patch, T{0});
  const auto xv = x.data();
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* dst = out.data() + (oy * wo + ox) * patch;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          std::copy_n(xv.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c, c,
                      dst + (ky * kernel + kx) * c);
        }
      }
    }
  auto* tape = detail::recording_tape<T>({&x});
  auto result = detail::make_output<T>({ho * wo, patch}, std::move(out), tape != nullptr);
  if (tape) {
    tape->record([xn = x.node(), on = result.node(), h, w, c, ho, wo, kernel, stride, pad, patch] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T* src = on->grad.data() + (oy * wo + ox) * patch;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              T* dst = g.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
              const T* s = src + (ky * kernel + kx) * c;
              for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += s[ch];
            }
          }
        }
    });
  }
  return result;
}

/// Convenience: run `loss_fn` under a fresh tape and backpropagate.
template <typename T, typename LossFn>
Tensor<T> backward_from(LossFn&& loss_fn) {
  Tape<T> tape;
  typename Tape<T>::Scope scope(&tape);
  Tensor<T> loss = loss_fn();
  tape.backward(loss);
  return loss;
}

}  // namespace easyfirst
