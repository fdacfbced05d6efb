#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autransfer/errors.hpp"

namespace autransfer {

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// A Tensor is a cheap handle onto shared storage; copying it aliases the
/// same buffers. Ops allocate fresh storage for their results and never
/// mutate their inputs' values. Gradient buffers are the only state
/// written after construction, by backward sweeps, zero_grad, and the
/// optimizer.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) {
    const std::size_t n = checked_size(shape);
    store_ = std::make_shared<Storage>();
    store_->shape = std::move(shape);
    store_->data.assign(n, 0.0);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> values) {
    const std::size_t n = checked_size(shape);
    if (values.size() != n) {
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + shape_string(shape));
    }
    store_ = std::make_shared<Storage>();
    store_->shape = std::move(shape);
    store_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(store_); }

  const std::vector<std::size_t>& shape() const { return storage().shape; }
  std::size_t rank() const { return storage().shape.size(); }
  std::size_t size() const { return storage().data.size(); }

  std::size_t rows() const {
    require_rank2("rows");
    return storage().shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return storage().shape[1];
  }

  std::span<const double> values() const { return storage().data; }
  std::span<double> values() { return storage().data; }

  // 2-D element access, used by glue code and tests
  double at(std::size_t r, std::size_t c) const {
    require_rank2("at");
    return storage().data[r * storage().shape[1] + c];
  }

  double item() const {
    if (!defined() || size() != 1) {
      throw ContractError("item: tensor is not a scalar");
    }
    return storage().data[0];
  }

  bool has_grad() const { return defined() && !store_->grad.empty(); }

  void ensure_grad() {
    auto& s = storage();
    if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  }

  std::span<double> grad() {
    if (!has_grad()) throw ContractError("grad: no gradient buffer allocated");
    return store_->grad;
  }
  std::span<const double> grad() const {
    if (!has_grad()) throw ContractError("grad: no gradient buffer allocated");
    return store_->grad;
  }

  void zero_grad() {
    if (has_grad()) std::fill(store_->grad.begin(), store_->grad.end(), 0.0);
  }

  // Deep copy of values; the gradient buffer is not carried over.
  Tensor clone() const {
    const auto& s = storage();
    return Tensor(s.shape, s.data);
  }

  // Handles compare by identity: true iff both alias the same storage.
  bool same_storage(const Tensor& other) const { return store_ == other.store_; }

 private:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until needed
  };

  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw DimensionError("tensor: empty shape");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor: zero dimension in " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  Storage& storage() {
    if (!store_) throw ContractError("tensor: use of default-constructed tensor");
    return *store_;
  }
  const Storage& storage() const {
    if (!store_) throw ContractError("tensor: use of default-constructed tensor");
    return *store_;
  }

  void require_rank2(const char* what) const {
    if (rank() != 2) {
      throw ContractError(std::string(what) + ": tensor is not 2-D, shape " +
                          shape_string(storage().shape));
    }
  }

  std::shared_ptr<Storage> store_;
};

/// Ordered record of executed ops. Each node is the backward rule of one
/// op; the sweep visits nodes strictly in reverse execution order, which
/// is a valid reverse-topological order by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }

  std::size_t node_count() const { return nodes_.size(); }

  void sweep_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

/// Seeds d(loss)/d(loss) = 1 and populates the grad buffers of every
/// tensor reachable backward from `loss` on this tape. Gradients
/// accumulate, so parameters used along several paths sum contributions.
inline void backward(Tape& tape, Tensor loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  loss.ensure_grad();
  loss.grad()[0] = 1.0;
  tape.sweep_backward();
}

inline void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

namespace detail {

// branch form: never evaluates exp of a large positive argument
inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes disagree: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace detail

/// out = a * b for a:[m x k], b:[k x n].
/// Backward: dA += G B^T, dB += A^T G.
inline Tensor matmul(Tape& tape, Tensor a, Tensor b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = &ov[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &bv[p * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  tape.record([a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    a.ensure_grad();
    b.ensure_grad();
    auto da = a.grad();
    auto db = b.grad();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
      const double* grow = &g[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double* brow = &bv[p * n];
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        da[i * k + p] += acc;
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double* grow = &g[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        double* dbrow = &db[p * n];
        for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
      }
    }
  });
  return out;
}

/// Row-wise bias addition: out[i,j] = x[i,j] + b[j].
/// Backward accumulates the bias gradient over rows.
inline Tensor add_bias(Tape& tape, Tensor x, Tensor b) {
  detail::require_matrix(x, "add_bias");
  if (!b.defined() || b.rank() != 1) {
    throw DimensionError("add_bias: bias must be 1-D, got " +
                         (b.defined() ? shape_string(b.shape()) : std::string("undefined")));
  }
  if (b.size() != x.cols()) {
    throw DimensionError("add_bias: trailing dimensions disagree: " + shape_string(x.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({m, n});
  {
    auto xv = x.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
    }
  }
  tape.record([x, b, out, m, n]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    x.ensure_grad();
    b.ensure_grad();
    auto dx = x.grad();
    auto db = b.grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        dx[i * n + j] += g[i * n + j];
        db[j] += g[i * n + j];
      }
    }
  });
  return out;
}

/// Elementwise max(0, x); backward gates the gradient by x > 0.
inline Tensor relu(Tape& tape, Tensor x) {
  Tensor out(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  }
  tape.record([x, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    x.ensure_grad();
    auto dx = x.grad();
    auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += g[i];
    }
  });
  return out;
}

/// Elementwise logistic function, computed in the branch form so large
/// magnitudes never overflow. Output lies in (0, 1).
inline Tensor sigmoid(Tape& tape, Tensor x) {
  Tensor out(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = detail::stable_sigmoid(xv[i]);
  }
  tape.record([x, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    x.ensure_grad();
    auto dx = x.grad();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) dx[i] += g[i] * ov[i] * (1.0 - ov[i]);
  });
  return out;
}

/// Per-row softmax with max-subtraction; each output row sums to 1.
inline Tensor softmax_rows(Tape& tape, Tensor x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({m, n});
  {
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = &xv[i * n];
      double mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(row[j] - mx);
        ov[i * n + j] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] /= sum;
    }
  }
  tape.record([x, out, m, n]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    x.ensure_grad();
    auto dx = x.grad();
    auto yv = out.values();
    // per row: dx_j = y_j * (g_j - <g, y>)
    for (std::size_t i = 0; i < m; ++i) {
      const double* grow = &g[i * n];
      const double* yrow = &yv[i * n];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += yrow[j] * (grow[j] - dot);
    }
  });
  return out;
}

/// Elementwise sum of two same-shape tensors.
inline Tensor add(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  }
  tape.record([a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    a.ensure_grad();
    b.ensure_grad();
    auto da = a.grad();
    auto db = b.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] += g[i];
      db[i] += g[i];
    }
  });
  return out;
}

/// Elementwise (Hadamard) product of two same-shape tensors.
inline Tensor mul(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  }
  tape.record([a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    a.ensure_grad();
    b.ensure_grad();
    auto da = a.grad();
    auto db = b.grad();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] += g[i] * bv[i];
      db[i] += g[i] * av[i];
    }
  });
  return out;
}

/// Sum of all entries, as a scalar.
inline Tensor sum(Tape& tape, Tensor x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  tape.record([x, out]() mutable {
    if (!out.has_grad()) return;
    const double g = out.grad()[0];
    x.ensure_grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
  return out;
}

/// Index of the largest entry in each row (first one wins ties).
inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
  detail::require_matrix(x, "argmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  std::vector<std::size_t> out(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

}  // namespace autransfer
