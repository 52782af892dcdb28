#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// Graphs are built from `Var` handles; each op records its parents and a
// backward rule. `backward(root)` zeroes every reachable gradient, seeds the
// root with 1 and walks the graph in reverse topological order. A graph lives
// as long as some `Var` references it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace darl::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size()) {
      throw ShapeError("Array: shape " + ad::to_string(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
  }

  static Array zeros(Shape s) {
    const auto n = numel(s);
    return Array(std::move(s), std::vector<double>(n, 0.0));
  }
  static Array scalar(double v) { return Array({1}, {v}); }
  static Array vector(std::vector<double> v) {
    const auto n = v.size();
    return Array({n}, std::move(v));
  }
  static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Array({rows, cols}, std::move(v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // Last axis is the "column" axis; everything before it is flattened into rows.
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data).subspan(r * cols(), cols());
  }

  double item() const {
    if (size() != 1) {
      throw ContractError("Array::item on non-scalar shape " + ad::to_string(shape));
    }
    return data[0];
  }

  bool operator==(const Array&) const = default;
};

struct Node {
  Array value;
  Array grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Array& value() const { return node_->value; }
  const Array& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape; }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Array value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return Var(std::move(n));
}

inline Var parameter(Array value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "parameter";
  return Var(std::move(n));
}

// Same value, cut from the graph.
inline Var detach(const Var& v) { return constant(v.value()); }

namespace detail {

inline void check_finite(const Array& a, const char* op) {
  for (double x : a.data) {
    if (!std::isfinite(x)) {
      throw DomainError(std::string(op) + ": produced a non-finite value");
    }
  }
}

inline Var make(const char* op, Array value, std::vector<Var> parents,
                std::function<void(Node&)> backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// Adds a fully formed local contribution into the parent's gradient.
inline void accumulate(Node& parent, const Array& contribution) {
  if (!parent.requires_grad) return;
  if (parent.grad.size() != parent.value.size()) parent.grad = Array::zeros(parent.value.shape);
  for (std::size_t i = 0; i < contribution.size(); ++i) parent.grad.data[i] += contribution.data[i];
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_rank2(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(a.shape()));
  }
}

template <class F>
Array map(const Array& a, F f) {
  Array out = Array::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return detail::make("add", std::move(out), {a, b}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return detail::make("sub", std::move(out), {a, b}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], detail::map(self.grad, [](double g) { return -g; }));
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return detail::make("mul", std::move(out), {a, b}, [](Node& self) {
    const Array& av = self.parents[0]->value;
    const Array& bv = self.parents[1]->value;
    Array ga = Array::zeros(av.shape);
    Array gb = Array::zeros(bv.shape);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga.data[i] = self.grad.data[i] * bv.data[i];
      gb.data[i] = self.grad.data[i] * av.data[i];
    }
    detail::accumulate(*self.parents[0], ga);
    detail::accumulate(*self.parents[1], gb);
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make("scale", detail::map(a.value(), [s](double x) { return s * x; }), {a},
                      [s](Node& self) {
                        detail::accumulate(*self.parents[0],
                                           detail::map(self.grad, [s](double g) { return s * g; }));
                      });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Array out = Array::zeros({m, n});
  const auto& A = a.value().data;
  const auto& B = b.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += aip * B[p * n + j];
    }
  }
  return detail::make("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& A = self.parents[0]->value.data;
    const auto& B = self.parents[1]->value.data;
    const auto& G = self.grad.data;
    if (self.parents[0]->requires_grad) {
      Array ga = Array::zeros({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga.data[i * k + p] = acc;
        }
      detail::accumulate(*self.parents[0], ga);
    }
    if (self.parents[1]->requires_grad) {
      Array gb = Array::zeros({k, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb.data[p * n + j] += aip * G[i * n + j];
        }
      detail::accumulate(*self.parents[1], gb);
    }
  });
}

inline Var log(const Var& a) {
  for (double x : a.value().data) {
    if (!(x > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(x));
  }
  return detail::make("log", detail::map(a.value(), [](double x) { return std::log(x); }), {a},
                      [](Node& self) {
                        const Array& av = self.parents[0]->value;
                        Array g = Array::zeros(av.shape);
                        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = self.grad.data[i] / av.data[i];
                        detail::accumulate(*self.parents[0], g);
                      });
}

inline Var exp(const Var& a) {
  return detail::make("exp", detail::map(a.value(), [](double x) { return std::exp(x); }), {a},
                      [](Node& self) {
                        Array g = Array::zeros(self.value.shape);
                        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = self.grad.data[i] * self.value.data[i];
                        detail::accumulate(*self.parents[0], g);
                      });
}

inline Var tanh(const Var& a) {
  return detail::make("tanh", detail::map(a.value(), [](double x) { return std::tanh(x); }), {a},
                      [](Node& self) {
                        Array g = Array::zeros(self.value.shape);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double y = self.value.data[i];
                          g.data[i] = self.grad.data[i] * (1.0 - y * y);
                        }
                        detail::accumulate(*self.parents[0], g);
                      });
}

namespace detail {

// Row-wise log-softmax with max subtraction.
inline Array log_softmax_rows(const Array& x) {
  Array out = Array::zeros(x.shape);
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data.data() + r * cols;
    double* o = out.data.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lz;
  }
  return out;
}

}  // namespace detail

inline Var softmax(const Var& a) {
  Array out = detail::map(detail::log_softmax_rows(a.value()), [](double x) { return std::exp(x); });
  return detail::make("softmax", std::move(out), {a}, [](Node& self) {
    const std::size_t rows = self.value.rows(), cols = self.value.cols();
    Array g = Array::zeros(self.value.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad(r, c) * self.value(r, c);
      for (std::size_t c = 0; c < cols; ++c) g(r, c) = self.value(r, c) * (self.grad(r, c) - dot);
    }
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var log_softmax(const Var& a) {
  return detail::make("log_softmax", detail::log_softmax_rows(a.value()), {a}, [](Node& self) {
    const std::size_t rows = self.value.rows(), cols = self.value.cols();
    Array g = Array::zeros(self.value.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) total += self.grad(r, c);
      for (std::size_t c = 0; c < cols; ++c) g(r, c) = self.grad(r, c) - std::exp(self.value(r, c)) * total;
    }
    detail::accumulate(*self.parents[0], g);
  });
}

// Rows of a (n x d) table selected by index: result is (len x d).
inline Var gather_rows(const Var& table, std::vector<std::size_t> indices) {
  detail::require_rank2(table, "gather_rows");
  const std::size_t n = table.shape()[0], d = table.shape()[1];
  Array out = Array::zeros({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range " +
                       std::to_string(n));
    }
    std::copy_n(table.value().data.begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return detail::make("gather_rows", std::move(out), {table},
                      [idx = std::move(indices), d](Node& self) {
                        Array g = Array::zeros(self.parents[0]->value.shape);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          for (std::size_t c = 0; c < d; ++c) g.data[idx[i] * d + c] += self.grad.data[i * d + c];
                        detail::accumulate(*self.parents[0], g);
                      });
}

// One element per row: result[r] = a[r, indices[r]].
inline Var pick(const Var& a, std::vector<std::size_t> indices) {
  detail::require_rank2(a, "pick");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (indices.size() != rows) throw ShapeError("pick: need one index per row");
  Array out = Array::zeros({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (indices[r] >= cols) throw ShapeError("pick: index out of range");
    out.data[r] = a.value()(r, indices[r]);
  }
  return detail::make("pick", std::move(out), {a}, [idx = std::move(indices)](Node& self) {
    Array g = Array::zeros(self.parents[0]->value.shape);
    for (std::size_t r = 0; r < idx.size(); ++r) g(r, idx[r]) = self.grad.data[r];
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  return detail::make("sum", Array::scalar(s), {a}, [](Node& self) {
    const double g = self.grad.data[0];
    Array ga = Array::zeros(self.parents[0]->value.shape);
    std::fill(ga.data.begin(), ga.data.end(), g);
    detail::accumulate(*self.parents[0], ga);
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty array");
  double s = 0.0;
  for (double x : a.value().data) s += x;
  return detail::make("mean", Array::scalar(s / n), {a}, [n](Node& self) {
    const double g = self.grad.data[0] / n;
    Array ga = Array::zeros(self.parents[0]->value.shape);
    std::fill(ga.data.begin(), ga.data.end(), g);
    detail::accumulate(*self.parents[0], ga);
  });
}

// Column means of a matrix, as a (1 x cols) row.
inline Var mean_rows(const Var& a) {
  detail::require_rank2(a, "mean_rows");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (rows == 0) throw ShapeError("mean_rows: no rows");
  Array out = Array::zeros({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[c] += a.value()(r, c);
  for (double& x : out.data) x /= static_cast<double>(rows);
  return detail::make("mean_rows", std::move(out), {a}, [rows, cols](Node& self) {
    Array g = Array::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g(r, c) = self.grad.data[c] / static_cast<double>(rows);
    detail::accumulate(*self.parents[0], g);
  });
}

// Sum over the last axis: (rows x cols) -> (rows).
inline Var row_sum(const Var& a) {
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  Array out = Array::zeros({rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r] += a.value()(r, c);
  return detail::make("row_sum", std::move(out), {a}, [rows, cols](Node& self) {
    Array g = Array::zeros(self.parents[0]->value.shape);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g(r, c) = self.grad.data[r];
    detail::accumulate(*self.parents[0], g);
  });
}

// Adds a row vector (1 x cols, or cols) to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (row.value().size() != cols) {
    throw ShapeError("add_row: row of " + std::to_string(row.value().size()) + " values for " +
                     std::to_string(cols) + " columns");
  }
  Array out = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += row.value().data[c];
  return detail::make("add_row", std::move(out), {a, row}, [rows, cols](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Array g = Array::zeros(self.parents[1]->value.shape);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g.data[c] += self.grad(r, c);
      detail::accumulate(*self.parents[1], g);
    }
  });
}

// Horizontal concatenation of two matrices with equal row counts.
inline Var concat_cols(const Var& a, const Var& b) {
  detail::require_rank2(a, "concat_cols");
  detail::require_rank2(b, "concat_cols");
  const std::size_t rows = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  if (b.shape()[0] != rows) throw ShapeError("concat_cols: row counts differ");
  Array out = Array::zeros({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out(r, c) = a.value()(r, c);
    for (std::size_t c = 0; c < cb; ++c) out(r, ca + c) = b.value()(r, c);
  }
  return detail::make("concat_cols", std::move(out), {a, b}, [rows, ca, cb](Node& self) {
    Array ga = Array::zeros({rows, ca});
    Array gb = Array::zeros({rows, cb});
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < ca; ++c) ga(r, c) = self.grad(r, c);
      for (std::size_t c = 0; c < cb; ++c) gb(r, c) = self.grad(r, ca + c);
    }
    detail::accumulate(*self.parents[0], ga);
    detail::accumulate(*self.parents[1], gb);
  });
}

namespace detail {

inline void check_offsets(const std::vector<std::size_t>& offsets, std::size_t n, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw ShapeError(std::string(op) + ": offsets do not partition the input");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s] == offsets[s + 1]) throw ShapeError(std::string(op) + ": empty segment");
  }
}

inline Var segment_reduce(const Var& v, std::vector<std::size_t> offsets, bool average) {
  const char* op = average ? "segment_mean" : "segment_sum";
  const std::size_t n = v.value().size();
  check_offsets(offsets, n, op);
  const std::size_t segments = offsets.size() - 1;
  Array out = Array::zeros({segments});
  for (std::size_t s = 0; s < segments; ++s) {
    double acc = 0.0;
    for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) acc += v.value().data[i];
    out.data[s] = average ? acc / static_cast<double>(offsets[s + 1] - offsets[s]) : acc;
  }
  return make(op, std::move(out), {v}, [off = std::move(offsets), average](Node& self) {
    Array g = Array::zeros(self.parents[0]->value.shape);
    for (std::size_t s = 0; s + 1 < off.size(); ++s) {
      const double len = static_cast<double>(off[s + 1] - off[s]);
      for (std::size_t i = off[s]; i < off[s + 1]; ++i)
        g.data[i] = average ? self.grad.data[s] / len : self.grad.data[s];
    }
    accumulate(*self.parents[0], g);
  });
}

}  // namespace detail

// Sums contiguous segments [offsets[s], offsets[s+1]) of a flat vector.
inline Var segment_sum(const Var& v, std::vector<std::size_t> offsets) {
  return detail::segment_reduce(v, std::move(offsets), false);
}

inline Var segment_mean(const Var& v, std::vector<std::size_t> offsets) {
  return detail::segment_reduce(v, std::move(offsets), true);
}

inline Var clamp(const Var& a, double lo, double hi) {
  return detail::make("clamp", detail::map(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); }),
                      {a}, [lo, hi](Node& self) {
                        const Array& av = self.parents[0]->value;
                        Array g = Array::zeros(av.shape);
                        for (std::size_t i = 0; i < g.size(); ++i)
                          g.data[i] = (av.data[i] >= lo && av.data[i] <= hi) ? self.grad.data[i] : 0.0;
                        detail::accumulate(*self.parents[0], g);
                      });
}

// Elementwise minimum; ties route the gradient to the first operand.
inline Var minimum(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "minimum");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::min(out.data[i], b.value().data[i]);
  return detail::make("minimum", std::move(out), {a, b}, [](Node& self) {
    const Array& av = self.parents[0]->value;
    const Array& bv = self.parents[1]->value;
    Array ga = Array::zeros(av.shape);
    Array gb = Array::zeros(bv.shape);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av.data[i] <= bv.data[i]) ga.data[i] = self.grad.data[i];
      else gb.data[i] = self.grad.data[i];
    }
    detail::accumulate(*self.parents[0], ga);
    detail::accumulate(*self.parents[1], gb);
  });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  }
  return detail::make("reshape", Array(shape, a.value().data), {a}, [](Node& self) {
    detail::accumulate(*self.parents[0], Array(self.parents[0]->value.shape, self.grad.data));
  });
}

// Gradients of a scalar root with respect to every reachable node. Gradients
// from a previous pass over the same nodes are discarded.
inline void backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw ContractError("backward: root must be scalar-valued, got shape " +
                        (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Array::zeros(n->value.shape);
  root.node().grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward) n->backward(*n);
  }
}

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& what, std::size_t tensor, std::size_t coordinate)
      : std::runtime_error(what), tensor_(tensor), coordinate_(coordinate) {}
  std::size_t tensor() const { return tensor_; }
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t tensor_;
  std::size_t coordinate_;
};

using ScalarFunction = std::function<Var(std::span<const Var>)>;

// Central-difference check of backward() against f over every coordinate of
// every parameter tensor. Returns max |analytic - numeric| / max(1, |numeric|).
inline double finite_difference_check(const ScalarFunction& f, std::span<const Array> params,
                                      double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("finite_difference_check: epsilon must be positive");

  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(parameter(p));
  Var root = f(leaves);
  backward(root);
  std::vector<Array> analytic;
  for (const auto& leaf : leaves) {
    analytic.push_back(leaf.grad().size() == leaf.value().size() ? leaf.grad()
                                                                  : Array::zeros(leaf.shape()));
  }

  auto evaluate = [&](std::size_t t, std::size_t i, double delta) {
    std::vector<Var> probe;
    probe.reserve(params.size());
    for (std::size_t j = 0; j < params.size(); ++j) {
      Array a = params[j];
      if (j == t) a.data[i] += delta;
      probe.push_back(constant(std::move(a)));
    }
    double v;
    try {
      v = f(probe).item();
    } catch (const DomainError& e) {
      throw GradCheckError("finite_difference_check: f failed at tensor " + std::to_string(t) +
                               " coordinate " + std::to_string(i) + ": " + e.what(),
                           t, i);
    }
    if (!std::isfinite(v)) {
      throw GradCheckError("finite_difference_check: non-finite f at tensor " + std::to_string(t) +
                               " coordinate " + std::to_string(i),
                           t, i);
    }
    return v;
  };

  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double numeric = (evaluate(t, i, epsilon) - evaluate(t, i, -epsilon)) / (2.0 * epsilon);
      const double err = std::abs(analytic[t].data[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline double finite_difference_check(const std::function<Var(const Var&)>& f, const Array& params,
                                      double epsilon) {
  const Array one[] = {params};
  return finite_difference_check([&](std::span<const Var> v) { return f(v[0]); }, one, epsilon);
}

}  // namespace darl::ad
