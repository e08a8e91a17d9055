#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <class T>
MatrixMap<T> as_matrix(Tensor<T>& t) {
  return MatrixMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}

template <class T>
ConstMatrixMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatrixMap<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor<T> out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a).transpose();
  return out;
}

template <class T>
bool is_symmetric(const Tensor<T>& a, double tol) {
  if (a.rank() != 2 || a.rows() != a.cols()) return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(static_cast<double>(a(i, j) - a(j, i))) > tol) return false;
  return true;
}

/// Eigendecomposition of a real symmetric matrix: A = V diag(lambda) V^T.
struct SymEig {
  Tensor<double> eigenvalues;   // [N], ascending
  Tensor<double> eigenvectors;  // [N x N], column k pairs with eigenvalues[k]
};

inline SymEig sym_eig(const Tensor<double>& a, double symmetry_tol = 1e-10) {
  if (!is_symmetric(a, symmetry_tol)) throw ContractError("sym_eig: input is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(as_matrix(a));
  if (solver.info() != Eigen::Success) throw NumericError("sym_eig: decomposition failed");
  const auto n = a.rows();
  SymEig out{Tensor<double>({n}), Tensor<double>({n, n})};
  for (std::size_t i = 0; i < n; ++i) out.eigenvalues[i] = solver.eigenvalues()(static_cast<Eigen::Index>(i));
  as_matrix(out.eigenvectors) = solver.eigenvectors();
  return out;
}

/// exp(t * A) for the matrix whose decomposition is `eig`.
inline Tensor<double> sym_expm(const SymEig& eig, double t) {
  const auto n = eig.eigenvalues.size();
  const auto v = as_matrix(eig.eigenvectors);
  Eigen::VectorXd scale(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) scale(static_cast<Eigen::Index>(i)) = std::exp(t * eig.eigenvalues[i]);
  Tensor<double> out({n, n});
  as_matrix(out).noalias() = v * scale.asDiagonal() * v.transpose();
  // Symmetrize away rounding so downstream symmetry checks are exact.
  auto m = as_matrix(out);
  m = (0.5 * (m + m.transpose())).eval();
  return out;
}

inline Tensor<double> sym_expm(const Tensor<double>& a, double t) {
  if (t < 0) throw ContractError("sym_expm: t must be non-negative");
  return sym_expm(sym_eig(a), t);
}

}  // namespace mstdiff
