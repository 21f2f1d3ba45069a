#pragma once

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// Every value is a 2-D matrix; spatial maps are stored as (H*W) x C with the
// grid shape passed explicitly to the ops that need it. A graph is built by
// calling the free functions below and torn down when the last Var handle is
// dropped. Leaves created with requires_grad accumulate gradients across
// backward() calls until zero_grad().

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

namespace groundseg::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix<T>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  [[nodiscard]] const Matrix<T>& value() const { return node_->value; }
  [[nodiscard]] Matrix<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Matrix<T>& grad() const { return node_->grad; }
  [[nodiscard]] bool has_grad() const { return node_->grad.size() != 0; }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.resize(0, 0); }

  [[nodiscard]] Eigen::Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return node_->value.cols(); }
  [[nodiscard]] T item() const { return node_->value(0, 0); }

  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }
  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
Var<T> make_result(Matrix<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(node));
}

inline void check(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw ShapeError(std::string(op) + ": " + msg);
}

template <typename T>
std::string dims(const Var<T>& v) {
  return std::to_string(v.rows()) + "x" + std::to_string(v.cols());
}

}  // namespace detail

/// Runs reverse-mode accumulation from `root`, seeded with `seed` (same shape as root).
template <typename T>
void backward(const Var<T>& root, const Matrix<T>& seed) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

template <typename T>
void backward(const Var<T>& scalar_root) {
  Matrix<T> seed = Matrix<T>::Ones(scalar_root.rows(), scalar_root.cols());
  backward(scalar_root, seed);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.cols() == b.rows(), "matmul", detail::dims(a) + " * " + detail::dims(b));
  Matrix<T> out = a.value() * b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::check(a.cols() == b.cols(), "matmul_nt", detail::dims(a) + " * " + detail::dims(b) + "^T");
  Matrix<T> out = a.value() * b.value().transpose();
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value);
    if (pb->requires_grad) pb->accumulate(n.grad.transpose() * pa->value);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> out = a.value().transpose();
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    n.parents[0]->accumulate(n.grad.transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add", detail::dims(a) + " + " + detail::dims(b));
  Matrix<T> out = a.value() + b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents) {
      if (p->requires_grad) p->accumulate(n.grad);
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub", detail::dims(a) + " - " + detail::dims(b));
  Matrix<T> out = a.value() - b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(-n.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul", detail::dims(a) + " .* " + detail::dims(b));
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) pa->accumulate(n.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(n.grad.cwiseProduct(pa->value));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Matrix<T> out = a.value() * s;
  return detail::make_result<T>(std::move(out), {a}, [s](Node<T>& n) { n.parents[0]->accumulate(n.grad * s); });
}

/// Adds the 1 x C row vector `v` to every row of `a`.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& v) {
  detail::check(v.rows() == 1 && v.cols() == a.cols(), "add_row", detail::dims(a) + " + row " + detail::dims(v));
  Matrix<T> out = a.value().rowwise() + v.value().row(0);
  return detail::make_result<T>(std::move(out), {a, v}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Matrix<T> out = a.value().unaryExpr([](T x) { return T(1) / (T(1) + std::exp(-x)); });
  return detail::make_result<T>(out, {a}, [](Node<T>& n) {
    const auto& y = n.value;
    n.parents[0]->accumulate(n.grad.cwiseProduct(y.cwiseProduct((T(1) - y.array()).matrix())));
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.parents[0]->value;
    n.parents[0]->accumulate(n.grad.cwiseProduct(x.unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); })));
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Matrix<T> out = a.value().unaryExpr([](T x) { return x / (T(1) + std::exp(-x)); });
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.parents[0]->value;
    Matrix<T> d = x.unaryExpr([](T v) {
      const T s = T(1) / (T(1) + std::exp(-v));
      return s * (T(1) + v * (T(1) - s));
    });
    n.parents[0]->accumulate(n.grad.cwiseProduct(d));
  });
}

/// tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  Matrix<T> out = a.value().unaryExpr([](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); });
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.parents[0]->value;
    Matrix<T> d = x.unaryExpr([](T v) {
      const T u = k * (v + c * v * v * v);
      const T t = std::tanh(u);
      return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
    });
    n.parents[0]->accumulate(n.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Normalisation and attention helpers
// ---------------------------------------------------------------------------

/// Row-wise layer normalisation with affine 1 x C gamma and beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  detail::check(gamma.rows() == 1 && gamma.cols() == cols && beta.rows() == 1 && beta.cols() == cols,
                "layer_norm", "affine shape mismatch for " + detail::dims(x));
  Matrix<T> xhat(rows, cols);
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.value().row(r).mean();
    const T var = (x.value().row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (x.value().row(r).array() - mean) * is;
  }
  Matrix<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return detail::make_result<T>(std::move(out), {x, gamma, beta},
                                [xhat, inv_std](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    auto& pb = n.parents[2];
    if (pg->requires_grad) pg->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
    if (px->requires_grad) {
      Matrix<T> gxhat = n.grad.array().rowwise() * pg->value.row(0).array();
      Matrix<T> gx(gxhat.rows(), gxhat.cols());
      for (Eigen::Index r = 0; r < gxhat.rows(); ++r) {
        const T m1 = gxhat.row(r).mean();
        const T m2 = gxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        gx.row(r) = (gxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[static_cast<std::size_t>(r)];
      }
      px->accumulate(gx);
    }
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  Matrix<T> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const T m = a.value().row(r).maxCoeff();
    out.row(r) = (a.value().row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return detail::make_result<T>(out, {a}, [](Node<T>& n) {
    const auto& y = n.value;
    Matrix<T> gy_y = n.grad.cwiseProduct(y);
    Matrix<T> gx = gy_y - (y.array().colwise() * gy_y.rowwise().sum().array()).matrix();
    n.parents[0]->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <typename T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols", "range out of bounds");
  Matrix<T> out = a.value().middleCols(start, count);
  return detail::make_result<T>(std::move(out), {a}, [start, count](Node<T>& n) {
    auto& p = n.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p->value.rows(), p->value.cols());
    g.middleCols(start, count) = n.grad;
    p->accumulate(g);
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  detail::check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows", "range out of bounds");
  Matrix<T> out = a.value().middleRows(start, count);
  return detail::make_result<T>(std::move(out), {a}, [start, count](Node<T>& n) {
    auto& p = n.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p->value.rows(), p->value.cols());
    g.middleRows(start, count) = n.grad;
    p->accumulate(g);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_cols", "no inputs");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == parts[0].rows(), "concat_cols", "row count mismatch");
    cols += p.cols();
  }
  Matrix<T> out(parts[0].rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make_result<T>(std::move(out), parts, [](Node<T>& n) {
    Eigen::Index off = 0;
    for (auto& p : n.parents) {
      const auto c = p->value.cols();
      if (p->requires_grad) p->accumulate(n.grad.middleCols(off, c));
      off += c;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "concat_rows", "no inputs");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == parts[0].cols(), "concat_rows", "column count mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, parts[0].cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make_result<T>(std::move(out), parts, [](Node<T>& n) {
    Eigen::Index off = 0;
    for (auto& p : n.parents) {
      const auto r = p->value.rows();
      if (p->requires_grad) p->accumulate(n.grad.middleRows(off, r));
      off += r;
    }
  });
}

/// Reinterprets the row-major buffer with a new shape.
template <typename T>
Var<T> reshape(const Var<T>& a, Eigen::Index rows, Eigen::Index cols) {
  detail::check(rows * cols == a.rows() * a.cols(), "reshape", detail::dims(a) + " -> " + std::to_string(rows) + "x" + std::to_string(cols));
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& p = n.parents[0];
    p->accumulate(Eigen::Map<const Matrix<T>>(n.grad.data(), p->value.rows(), p->value.cols()));
  });
}

/// Selects rows of `table` by index (embedding lookup).
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::check(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows", "index out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return detail::make_result<T>(std::move(out), {table}, [ids](Node<T>& n) {
    auto& p = n.parents[0];
    Matrix<T> g = Matrix<T>::Zero(p->value.rows(), p->value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    p->accumulate(g);
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& p = n.parents[0];
    p->accumulate(Matrix<T>::Constant(p->value.rows(), p->value.cols(), n.grad(0, 0)));
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.rows() * a.cols()));
}

// ---------------------------------------------------------------------------
// Spatial ops on (H*W) x C maps
// ---------------------------------------------------------------------------

/// Transposed convolution with kernel 2 and stride 2.
/// `weight` is C_in x (4*C_out) laid out as [dy][dx][c_out]; `bias` is 1 x C_out.
/// Input (H*W) x C_in, output (2H*2W) x C_out.
template <typename T>
Var<T> conv_transpose_2x2(const Var<T>& x, int height, int width, const Var<T>& weight, const Var<T>& bias) {
  const Eigen::Index cout = bias.cols();
  detail::check(x.rows() == static_cast<Eigen::Index>(height) * width, "conv_transpose_2x2", "grid size mismatch");
  detail::check(weight.rows() == x.cols() && weight.cols() == 4 * cout, "conv_transpose_2x2", "weight shape mismatch");
  const Matrix<T> y4 = x.value() * weight.value();
  const int ow = 2 * width;
  Matrix<T> out(static_cast<Eigen::Index>(4) * height * width, cout);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const Eigen::Index src = static_cast<Eigen::Index>(i) * width + j;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const Eigen::Index dst = static_cast<Eigen::Index>(2 * i + dy) * ow + (2 * j + dx);
          out.row(dst) = y4.row(src).segment((dy * 2 + dx) * cout, cout) + bias.value().row(0);
        }
      }
    }
  }
  return detail::make_result<T>(std::move(out), {x, weight, bias}, [height, width, cout](Node<T>& n) {
    auto& px = n.parents[0];
    auto& pw = n.parents[1];
    auto& pb = n.parents[2];
    const int ow2 = 2 * width;
    Matrix<T> g4(static_cast<Eigen::Index>(height) * width, 4 * cout);
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const Eigen::Index src = static_cast<Eigen::Index>(i) * width + j;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const Eigen::Index dst = static_cast<Eigen::Index>(2 * i + dy) * ow2 + (2 * j + dx);
            g4.row(src).segment((dy * 2 + dx) * cout, cout) = n.grad.row(dst);
          }
        }
      }
    }
    if (px->requires_grad) px->accumulate(g4 * pw->value.transpose());
    if (pw->requires_grad) pw->accumulate(px->value.transpose() * g4);
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
  });
}

/// Interpolation matrix (dst x src) for half-pixel-centre bilinear resampling.
template <typename T>
Matrix<T> bilinear_matrix(int src, int dst) {
  Matrix<T> m = Matrix<T>::Zero(dst, src);
  const double s = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double pos = (i + 0.5) * s - 0.5;
    pos = std::min(std::max(pos, 0.0), static_cast<double>(src - 1));
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, src - 1);
    const T frac = static_cast<T>(pos - lo);
    m(i, lo) += T(1) - frac;
    m(i, hi) += frac;
  }
  return m;
}

/// Bilinear resampling of a single-channel H x W map to out_h x out_w.
template <typename T>
Var<T> resize_map(const Var<T>& map, int out_h, int out_w) {
  const Matrix<T> rh = bilinear_matrix<T>(static_cast<int>(map.rows()), out_h);
  const Matrix<T> rw = bilinear_matrix<T>(static_cast<int>(map.cols()), out_w);
  Matrix<T> out = rh * map.value() * rw.transpose();
  return detail::make_result<T>(std::move(out), {map}, [rh, rw](Node<T>& n) {
    n.parents[0]->accumulate(rh.transpose() * n.grad * rw);
  });
}

}  // namespace groundseg::nn
