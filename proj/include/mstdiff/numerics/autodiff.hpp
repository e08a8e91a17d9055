#pragma once

// Tape-based reverse-mode differentiation over a small, fixed op set: exactly
// what the VQ-VAE, TuckER and the denoiser need. Every op records a closure
// that pushes the output gradient back into its inputs.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "mstdiff/numerics/linalg.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff::ad {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  /// A non-recording tape evaluates ops without keeping closures; used for
  /// inference and for finite-difference probes.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value) { return add_node(std::move(value), false, nullptr); }

  Var<T> leaf(Tensor<T> value) { return add_node(std::move(value), record_, nullptr); }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Gradient buffer of a node, zero-allocated on first access.
  Tensor<T>& grad(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  Tensor<T>& grad(Var<T> v) { return grad(v.id); }

  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (const auto& v : inputs) rg = rg || requires_grad(v.id);
    return add_node(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  Var<T> push(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (const auto& v : inputs) rg = rg || requires_grad(v.id);
    return add_node(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  /// Back-propagates from a scalar node.
  void backward(Var<T> loss) {
    if (loss.value().size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!record_) throw ContractError("backward: tape is not recording");
    grad(loss.id)[0] = T{1};
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.fn && !n.grad.empty()) n.fn(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn fn;
    bool requires_grad = false;
  };

  Var<T> add_node(Tensor<T> value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(fn), rg});
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool record_;
  std::deque<Node> nodes_;  // deque: references to values stay valid across pushes
};

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a rank-2 operand");
}

template <class T>
void accumulate(Tape<T>& tape, int id, const Tensor<T>& g, T scale = T{1}) {
  if (!tape.requires_grad(id)) return;
  auto& dst = tape.grad(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
}

template <class T>
Tensor<T> gelu_value(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> v(x.data().data(), n);
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(y.data().data(), n) =
      T(0.5) * v * (T(1) + (c * (v + T(0.044715) * v.cube())).tanh());
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g, T{-1});
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= c;
  return a.tape->push(std::move(out), {a}, [a = a.id, c](Tape<T>& t, int self) {
    detail::accumulate(t, a, t.grad(self), c);
  });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(a);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
  return a.tape->push(detail::gelu_value(a.value()), {a}, [a = a.id](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(a);
    auto& ga = t.grad(a);
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const auto n = static_cast<Eigen::Index>(g.size());
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> v(x.data().data(), n), gv(g.data().data(), n);
    const Arr th = (c * (v + T(0.044715) * v.cube())).tanh();
    const Arr du = c * (T(1) + T(3 * 0.044715) * v.square());
    Eigen::Map<Arr>(ga.data().data(), n) += gv * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * du);
  });
}

// --------------------------------------------------------------- broadcasting

/// x[M x N] + b[N] broadcast over rows.
template <class T>
Var<T> add_row(Var<T> x, Var<T> b) {
  const std::size_t n = x.cols();
  if (b.value().size() != n) throw ShapeError("add_row: bias length mismatch");
  Tensor<T> out = x.value();
  const auto& bv = b.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += bv[c];
  return x.tape->push(std::move(out), {x, b}, [x = x.id, b = b.id, n](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    detail::accumulate(t, x, g);
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

/// a[L x d] stacked `times` times along rows -> [times*L x d].
template <class T>
Var<T> tile_rows(Var<T> a, std::size_t times) {
  detail::require_rank2(a, "tile_rows");
  const auto& av = a.value();
  Tensor<T> out({times * av.rows(), av.cols()});
  for (std::size_t k = 0; k < times; ++k)
    std::copy(av.data().begin(), av.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * av.size()));
  return a.tape->push(std::move(out), {a}, [a = a.id, times](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    const std::size_t n = ga.size();
    for (std::size_t k = 0; k < times; ++k)
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[k * n + i];
  });
}

/// Each row repeated `r` times in place (nearest-neighbour upsampling along
/// rows). Rows of consecutive users stay contiguous.
template <class T>
Var<T> repeat_rows(Var<T> a, std::size_t r) {
  detail::require_rank2(a, "repeat_rows");
  const auto& av = a.value();
  const std::size_t c = av.cols();
  Tensor<T> out({av.rows() * r, c});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k)
      std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(i * c), c,
                  out.data().begin() + static_cast<std::ptrdiff_t>((i * r + k) * c));
  return a.tape->push(std::move(out), {a}, [a = a.id, r, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    const std::size_t rows = ga.rows();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[(i * r + k) * c + j];
  });
}

/// Mean of each block of `r` consecutive rows.
template <class T>
Var<T> avgpool_rows(Var<T> a, std::size_t r) {
  detail::require_rank2(a, "avgpool_rows");
  const auto& av = a.value();
  if (av.rows() % r != 0) throw ShapeError("avgpool_rows: rows not divisible by pool size");
  const std::size_t c = av.cols();
  const std::size_t rows = av.rows() / r;
  Tensor<T> out({rows, c});
  const T inv = T(1) / static_cast<T>(r);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t j = 0; j < c; ++j) out(i, j) += inv * av(i * r + k, j);
  return a.tape->push(std::move(out), {a}, [a = a.id, r, c, inv](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += inv * g[(i / r) * c + j];
  });
}

// --------------------------------------------------------------- linear maps

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  Tensor<T> out = mstdiff::matmul(a.value(), b.value());
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape<T>& t, int self) {
    const auto g = as_matrix(t.grad(self));
    if (t.requires_grad(a)) as_matrix(t.grad(a)).noalias() += g * as_matrix(t.value(b)).transpose();
    if (t.requires_grad(b)) as_matrix(t.grad(b)).noalias() += as_matrix(t.value(a)).transpose() * g;
  });
}

/// x[M x K] W[K x N] + b[N].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  if (x.cols() != w.rows()) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  if (b.value().size() != w.cols()) throw ShapeError("linear: bias length mismatch");
  Tensor<T> out({x.rows(), w.cols()});
  auto om = as_matrix(out);
  om.noalias() = as_matrix(x.value()) * as_matrix(w.value());
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data().data(),
                                                                       static_cast<Eigen::Index>(w.cols()));
  return x.tape->push(std::move(out), {x, w, b}, [x = x.id, w = w.id, b = b.id](Tape<T>& t, int self) {
    const auto& gt = t.grad(self);
    const auto g = as_matrix(gt);
    if (t.requires_grad(x)) as_matrix(t.grad(x)).noalias() += g * as_matrix(t.value(w)).transpose();
    if (t.requires_grad(w)) as_matrix(t.grad(w)).noalias() += as_matrix(t.value(x)).transpose() * g;
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data().data(), static_cast<Eigen::Index>(gb.size())) +=
          g.colwise().sum();
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  detail::require_rank2(a, "transpose");
  return a.tape->push(mstdiff::transpose(a.value()), {a}, [a = a.id](Tape<T>& t, int self) {
    if (t.requires_grad(a)) as_matrix(t.grad(a)) += as_matrix(t.grad(self)).transpose();
  });
}

// ------------------------------------------------------------ normalization

template <class T>
Var<T> softmax_rows(Var<T> a) {
  const auto& x = a.value();
  const std::size_t c = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T m = x[r * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[r * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += (out[r * c + j] = std::exp(x[r * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= s;
  }
  return a.tape->push(std::move(out), {a}, [a = a.id, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t r = 0; r < y.size() / c; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  const auto& x = a.value();
  const std::size_t c = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T m = x[r * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x[r * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[r * c + j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x[r * c + j] - lse;
  }
  return a.tape->push(std::move(out), {a}, [a = a.id, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t r = 0; r < y.size() / c; ++r) {
      T gs{0};
      for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
    }
  });
}

/// Row-wise layer normalization with learned gain and bias (both [cols]).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  detail::require_rank2(x, "layer_norm");
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  if (gain.value().size() != c || bias.value().size() != c) throw ShapeError("layer_norm: parameter length mismatch");
  using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  const auto ci = static_cast<Eigen::Index>(c);
  const auto xm = as_matrix(xv);
  Eigen::Map<const Row> gv(gain.value().data().data(), ci), bv(bias.value().data().data(), ci);
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto hm = as_matrix(*xhat);
  hm = xm.colwise() - xm.rowwise().mean();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const T is = T(1) / std::sqrt(hm.row(ri).squaredNorm() / static_cast<T>(c) + eps);
    (*inv_std)[r] = is;
    hm.row(ri) *= is;
  }
  Tensor<T> out(xv.shape());
  as_matrix(out) = (hm.array().rowwise() * gv.array()).rowwise() + bv.array();
  return x.tape->push(std::move(out), {x, gain, bias},
                      [x = x.id, gain = gain.id, bias = bias.id, xhat, inv_std, ci](Tape<T>& t, int self) {
                        using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
                        const auto g = as_matrix(t.grad(self)).array();
                        const auto h = as_matrix(*xhat).array();
                        if (t.requires_grad(gain)) {
                          Eigen::Map<Row>(t.grad(gain).data().data(), ci) += (g * h).colwise().sum().matrix();
                        }
                        if (t.requires_grad(bias)) {
                          Eigen::Map<Row>(t.grad(bias).data().data(), ci) += g.colwise().sum().matrix();
                        }
                        if (t.requires_grad(x)) {
                          Eigen::Map<const Row> gv(t.value(gain).data().data(), ci);
                          const Arr dh = g.rowwise() * gv.array();
                          const auto m1 = dh.rowwise().mean().eval();
                          const auto m2 = (dh * h).rowwise().mean().eval();
                          Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> is(
                              inv_std->data(), static_cast<Eigen::Index>(inv_std->size()));
                          as_matrix(t.grad(x)).array() +=
                              ((dh.colwise() - m1) - h.colwise() * m2).colwise() * is;
                        }
                      });
}

// ------------------------------------------------------------ indexing/shape

/// Embedding lookup: out[i] = table[idx[i]].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> idx) {
  detail::require_rank2(table, "gather_rows");
  const auto& tv = table.value();
  const std::size_t c = tv.cols();
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor<T> out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= tv.rows()) throw LookupError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return table.tape->push(std::move(out), {table},
                          [table = table.id, idx = std::move(idx), c](Tape<T>& t, int self) {
                            const auto& g = t.grad(self);
                            auto& gt = t.grad(table);
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += g[i * c + j];
                          });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  return a.tape->push(a.value().reshaped(std::move(shape)), {a}, [a = a.id](Tape<T>& t, int self) {
    detail::accumulate(t, a, t.grad(self));
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  detail::require_rank2(a, "slice_rows");
  const auto& av = a.value();
  if (start + count > av.rows() || count == 0) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t c = av.cols();
  Tensor<T> out({count, c});
  std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(start * c), count * c, out.data().begin());
  return a.tape->push(std::move(out), {a}, [a = a.id, start, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count) {
  detail::require_rank2(a, "slice_cols");
  const auto& av = a.value();
  const std::size_t c = av.cols();
  if (start + count > c || count == 0) throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({av.rows(), count});
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t j = 0; j < count; ++j) out(r, j) = av(r, start + j);
  return a.tape->push(std::move(out), {a}, [a = a.id, start, count, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < count; ++j) ga[r * c + start + j] += g[r * count + j];
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor<T> out({rows, total});
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(r * pv.cols()), pv.cols(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * total + off));
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.cols();
  }
  return parts.front().tape->push(std::move(out), parts, [ids, offsets, total](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto& gp = t.grad(ids[k]);
      const std::size_t c = gp.cols();
      for (std::size_t r = 0; r < gp.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total + offsets[k] + j];
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != c) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Tensor<T> out({rows, c});
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts.front().tape->push(std::move(out), parts, [ids, offsets](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto& gp = t.grad(ids[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

/// Per-user concatenation along rows. Each part holds `batch` contiguous
/// segments; the output holds, for every user, that user's segment of each
/// part in order.
template <class T>
Var<T> interleave_segments(const std::vector<Var<T>>& parts, std::size_t batch) {
  if (parts.empty()) throw ShapeError("interleave_segments: no inputs");
  const std::size_t c = parts.front().cols();
  std::vector<std::size_t> seg;
  std::size_t per_user = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "interleave_segments");
    if (p.cols() != c || p.rows() % batch != 0) throw ShapeError("interleave_segments: incompatible part");
    seg.push_back(p.rows() / batch);
    per_user += seg.back();
  }
  Tensor<T> out({batch * per_user, c});
  std::vector<int> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  auto copy_out = [&](std::size_t k, const Tensor<T>& src) {
    std::size_t before = 0;
    for (std::size_t q = 0; q < k; ++q) before += seg[q];
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(b * seg[k] * c), seg[k] * c,
                  out.data().begin() + static_cast<std::ptrdiff_t>((b * per_user + before) * c));
  };
  for (std::size_t k = 0; k < parts.size(); ++k) copy_out(k, parts[k].value());
  return parts.front().tape->push(std::move(out), parts, [ids, seg, per_user, batch, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    std::size_t before = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& gp = t.grad(ids[k]);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < seg[k] * c; ++i)
            gp[b * seg[k] * c + i] += g[(b * per_user + before) * c + i];
      }
      before += seg[k];
    }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> a) {
  long double s = 0;
  for (auto v : a.value().data()) s += v;
  return a.tape->push(Tensor<T>({1}, {static_cast<T>(s)}), {a}, [a = a.id](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(a).storage()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Squared Frobenius norm.
template <class T>
Var<T> sum_squares(Var<T> a) {
  long double s = 0;
  for (auto v : a.value().data()) s += v * v;
  return a.tape->push(Tensor<T>({1}, {static_cast<T>(s)}), {a}, [a = a.id](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    const auto& x = t.value(a);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += T(2) * g * x[i];
  });
}

// -------------------------------------------------------------------- losses

/// Mean squared error over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mse");
  const auto& av = a.value();
  const auto& bv = b.value();
  long double s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T n = static_cast<T>(av.size());
  return a.tape->push(Tensor<T>({1}, {static_cast<T>(s / n)}), {a, b}, [a = a.id, b = b.id, n](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    Tensor<T>* ga = t.requires_grad(a) ? &t.grad(a) : nullptr;
    Tensor<T>* gb = t.requires_grad(b) ? &t.grad(b) : nullptr;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = T(2) * g * (av[i] - bv[i]) / n;
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

/// Mean over rows of -log softmax(logits[r])[labels[r]].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::size_t> labels) {
  detail::require_rank2(logits, "cross_entropy");
  const auto& x = logits.value();
  const std::size_t rows = x.rows(), c = x.cols();
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor<T>>(x.shape());
  long double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= c) throw ContractError("cross_entropy: label out of range");
    T m = x(r, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x(r, j));
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += ((*probs)(r, j) = std::exp(x(r, j) - m));
    for (std::size_t j = 0; j < c; ++j) (*probs)(r, j) /= s;
    total += m + std::log(s) - x(r, labels[r]);
  }
  const T n = static_cast<T>(rows);
  return logits.tape->push(Tensor<T>({1}, {static_cast<T>(total / n)}), {logits},
                           [logits = logits.id, labels = std::move(labels), probs, n](Tape<T>& t, int self) {
                             const T g = t.grad(self)[0] / n;
                             auto& gl = t.grad(logits);
                             const std::size_t c = gl.cols();
                             for (std::size_t r = 0; r < labels.size(); ++r)
                               for (std::size_t j = 0; j < c; ++j)
                                 gl(r, j) += g * ((*probs)(r, j) - (j == labels[r] ? T(1) : T(0)));
                           });
}

/// Mean over rows of KL(q[r] || p[r]) with q fixed. p is floored before the
/// log; 0 * log 0 = 0.
template <class T>
Var<T> kl_rows(const Tensor<T>& q, Var<T> p, T floor = T(1e-12)) {
  if (q.shape() != p.shape()) throw ShapeError("kl_rows: shape mismatch");
  const auto& pv = p.value();
  const std::size_t rows = pv.rows();
  long double total = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > T(0)) total += q[i] * (std::log(q[i]) - std::log(std::max(pv[i], floor)));
  }
  const T n = static_cast<T>(rows);
  return p.tape->push(Tensor<T>({1}, {static_cast<T>(total / n)}), {p}, [q, p = p.id, floor, n](Tape<T>& t, int self) {
    const T g = t.grad(self)[0] / n;
    const auto& pv = t.value(p);
    auto& gp = t.grad(p);
    for (std::size_t i = 0; i < q.size(); ++i)
      if (q[i] > T(0) && pv[i] > floor) gp[i] -= g * q[i] / pv[i];
  });
}

/// Mean binary cross-entropy between sigmoid(logits) and targets in [0, 1].
template <class T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets) {
  if (targets.shape() != logits.shape()) throw ShapeError("bce_with_logits: shape mismatch");
  const auto& x = logits.value();
  long double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    // log(1 + exp(x)) - y x, written stably.
    const T v = x[i];
    total += std::max(v, T(0)) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const T n = static_cast<T>(x.size());
  return logits.tape->push(Tensor<T>({1}, {static_cast<T>(total / n)}), {logits},
                           [logits = logits.id, targets, n](Tape<T>& t, int self) {
                             const T g = t.grad(self)[0] / n;
                             const auto& x = t.value(logits);
                             auto& gl = t.grad(logits);
                             for (std::size_t i = 0; i < x.size(); ++i)
                               gl[i] += g * (T(1) / (T(1) + std::exp(-x[i])) - targets[i]);
                           });
}

// ------------------------------------------------------------ composite ops

/// out[r] = probs[r] * M[idx[r]], where the matrices M are fixed
/// ([K x N x N], row j of M[k] is a distribution over the output).
template <class T>
Var<T> rowwise_vecmat(Var<T> probs, std::shared_ptr<const Tensor<T>> mats, std::vector<std::size_t> idx) {
  detail::require_rank2(probs, "rowwise_vecmat");
  const auto& pv = probs.value();
  const std::size_t rows = pv.rows(), n = pv.cols();
  if (mats->rank() != 3 || mats->dim(1) != n || mats->dim(2) != n) throw ShapeError("rowwise_vecmat: matrix stack shape");
  if (idx.size() != rows) throw ShapeError("rowwise_vecmat: index count mismatch");
  Tensor<T> out({rows, n});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= mats->dim(0)) throw LookupError("rowwise_vecmat: matrix index out of range");
    const T* m = mats->data().data() + idx[r] * n * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T w = pv(r, j);
      if (w == T(0)) continue;
      for (std::size_t k = 0; k < n; ++k) out(r, k) += w * m[j * n + k];
    }
  }
  return probs.tape->push(std::move(out), {probs},
                          [probs = probs.id, mats, idx = std::move(idx), n](Tape<T>& t, int self) {
                            const auto& g = t.grad(self);
                            auto& gp = t.grad(probs);
                            for (std::size_t r = 0; r < idx.size(); ++r) {
                              const T* m = mats->data().data() + idx[r] * n * n;
                              for (std::size_t j = 0; j < n; ++j) {
                                T acc{0};
                                for (std::size_t k = 0; k < n; ++k) acc += g(r, k) * m[j * n + k];
                                gp(r, j) += acc;
                              }
                            }
                          });
}

/// Multi-head scaled dot-product attention, applied independently per user.
/// q: [batch*Lq x d], k and v: [batch*Lk x d]; d must divide by `heads`.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batch, std::size_t heads) {
  detail::require_rank2(q, "attention");
  detail::require_same_shape(k, v, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || d % heads != 0) throw ShapeError("attention: feature size mismatch");
  if (q.rows() % batch != 0 || k.rows() % batch != 0) throw ShapeError("attention: rows not divisible by batch");
  const std::size_t lq = q.rows() / batch, lk = k.rows() / batch, dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const RowMatrix<T>, 0, Stride>;
  using Block = Eigen::Map<RowMatrix<T>, 0, Stride>;
  const auto eq = [&](const Tensor<T>& x, std::size_t b, std::size_t h, std::size_t len) {
    return CBlock(x.data().data() + b * len * d + h * dh, static_cast<Eigen::Index>(len),
                  static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(d)));
  };
  auto probs = std::make_shared<std::vector<RowMatrix<T>>>(batch * heads);
  Tensor<T> out({batch * lq, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      RowMatrix<T> s = (eq(q.value(), b, h, lq) * eq(k.value(), b, h, lk).transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      Block(out.data().data() + b * lq * d + h * dh, static_cast<Eigen::Index>(lq), static_cast<Eigen::Index>(dh),
            Stride(static_cast<Eigen::Index>(d)))
          .noalias() = s * eq(v.value(), b, h, lk);
      (*probs)[b * heads + h] = std::move(s);
    }
  }
  return q.tape->push(
      std::move(out), {q, k, v},
      [q = q.id, k = k.id, v = v.id, probs, batch, heads, lq, lk, d, dh, inv_sqrt](Tape<T>& t, int self) {
        const auto& g = t.grad(self);
        const bool rq = t.requires_grad(q), rk = t.requires_grad(k), rv = t.requires_grad(v);
        auto cmap = [&](const Tensor<T>& x, std::size_t b, std::size_t h, std::size_t len) {
          return CBlock(x.data().data() + b * len * d + h * dh, static_cast<Eigen::Index>(len),
                        static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(d)));
        };
        auto map = [&](Tensor<T>& x, std::size_t b, std::size_t h, std::size_t len) {
          return Block(x.data().data() + b * len * d + h * dh, static_cast<Eigen::Index>(len),
                       static_cast<Eigen::Index>(dh), Stride(static_cast<Eigen::Index>(d)));
        };
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& p = (*probs)[b * heads + h];
            const auto go = cmap(g, b, h, lq);
            if (rv) map(t.grad(v), b, h, lk).noalias() += p.transpose() * go;
            if (!rq && !rk) continue;
            RowMatrix<T> dp = go * cmap(t.value(v), b, h, lk).transpose();
            // softmax backward, row-wise
            RowMatrix<T> ds = p.cwiseProduct(dp);
            for (Eigen::Index r = 0; r < ds.rows(); ++r) {
              const T dot = ds.row(r).sum();
              ds.row(r) -= p.row(r) * dot;
            }
            ds *= inv_sqrt;
            if (rq) map(t.grad(q), b, h, lq).noalias() += ds * cmap(t.value(k), b, h, lk);
            if (rk) map(t.grad(k), b, h, lk).noalias() += ds.transpose() * cmap(t.value(q), b, h, lq);
          }
        }
      });
}

/// 1-D convolution with odd kernel width and zero "same" padding, applied to
/// `x` holding consecutive segments of length `seg_len` (one per sample).
/// x: [S*seg_len x C], w: [K*C x Cout] (tap-major), b: [Cout].
template <class T>
Var<T> conv1d_same(Var<T> x, Var<T> w, Var<T> b, std::size_t seg_len, std::size_t kernel) {
  detail::require_rank2(x, "conv1d_same");
  if (kernel % 2 == 0) throw ShapeError("conv1d_same: kernel width must be odd");
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  if (xv.rows() % seg_len != 0) throw ShapeError("conv1d_same: rows not divisible by segment length");
  if (w.rows() != kernel * c) throw ShapeError("conv1d_same: weight rows must equal kernel*channels");
  const std::size_t rows = xv.rows();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kernel / 2);
  auto cols = std::make_shared<Tensor<T>>(Shape{rows, kernel * c});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = (r / seg_len) * seg_len;
    const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(r % seg_len);
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = pos + static_cast<std::ptrdiff_t>(k) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(seg_len)) continue;
      std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>((base + static_cast<std::size_t>(src)) * c), c,
                  cols->data().begin() + static_cast<std::ptrdiff_t>(r * kernel * c + k * c));
    }
  }
  auto* tape = x.tape;
  Tensor<T> out({rows, w.cols()});
  as_matrix(out).noalias() = as_matrix(*cols) * as_matrix(w.value());
  const auto& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out.cols(); ++j) out(r, j) += bv[j];
  return tape->push(std::move(out), {x, w, b},
                    [x = x.id, w = w.id, b = b.id, cols, seg_len, kernel, c, pad](Tape<T>& t, int self) {
                      const auto& gt = t.grad(self);
                      const auto g = as_matrix(gt);
                      if (t.requires_grad(w)) as_matrix(t.grad(w)).noalias() += as_matrix(*cols).transpose() * g;
                      if (t.requires_grad(b)) {
                        auto& gb = t.grad(b);
                        const std::size_t n = gb.size();
                        for (std::size_t i = 0; i < gt.size(); ++i) gb[i % n] += gt[i];
                      }
                      if (t.requires_grad(x)) {
                        RowMatrix<T> dcols = g * as_matrix(t.value(w)).transpose();
                        auto& gx = t.grad(x);
                        const std::size_t rows = gx.rows();
                        for (std::size_t r = 0; r < rows; ++r) {
                          const std::size_t base = (r / seg_len) * seg_len;
                          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(r % seg_len);
                          for (std::size_t k = 0; k < kernel; ++k) {
                            const std::ptrdiff_t src = pos + static_cast<std::ptrdiff_t>(k) - pad;
                            if (src < 0 || src >= static_cast<std::ptrdiff_t>(seg_len)) continue;
                            const std::size_t dst = (base + static_cast<std::size_t>(src)) * c;
                            for (std::size_t j = 0; j < c; ++j)
                              gx[dst + j] += dcols(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k * c + j));
                          }
                        }
                      }
                    });
}

/// out[b, k] = sum_j x[b, j*K + k] * r[b, j]; the mode-2 contraction used by
/// the TuckER score after the core has been contracted with the subject.
template <class T>
Var<T> contract_mid(Var<T> x, Var<T> r) {
  detail::require_rank2(x, "contract_mid");
  detail::require_rank2(r, "contract_mid");
  const std::size_t batch = x.rows(), j_dim = r.cols();
  if (r.rows() != batch || x.cols() % j_dim != 0) throw ShapeError("contract_mid: incompatible shapes");
  const std::size_t k_dim = x.cols() / j_dim;
  Tensor<T> out({batch, k_dim});
  const auto& xv = x.value();
  const auto& rv = r.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < j_dim; ++j) {
      const T w = rv(b, j);
      for (std::size_t k = 0; k < k_dim; ++k) out(b, k) += xv(b, j * k_dim + k) * w;
    }
  return x.tape->push(std::move(out), {x, r}, [x = x.id, r = r.id, j_dim, k_dim](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    const auto& rv = t.value(r);
    Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    Tensor<T>* gr = t.requires_grad(r) ? &t.grad(r) : nullptr;
    for (std::size_t b = 0; b < g.rows(); ++b)
      for (std::size_t j = 0; j < j_dim; ++j) {
        T acc{0};
        for (std::size_t k = 0; k < k_dim; ++k) {
          if (gx) (*gx)(b, j * k_dim + k) += g(b, k) * rv(b, j);
          acc += g(b, k) * xv(b, j * k_dim + k);
        }
        if (gr) (*gr)(b, j) += acc;
      }
  });
}

}  // namespace mstdiff::ad
