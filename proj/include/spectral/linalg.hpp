#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spectral/errors.hpp"

namespace spectral {

using Index = Eigen::Index;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

template <typename T>
constexpr T eps() {
  return std::numeric_limits<T>::epsilon();
}

// Loosest of a fixed absolute tolerance and a few ulps of the scalar type.
template <typename T>
T scaled_tol(double tol64) {
  return std::max(static_cast<T>(tol64), T(16) * eps<T>());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

template <typename Derived>
void require_square(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() == 0)
    throw InvalidArgument(std::string(what) + ": expected a non-empty square matrix");
}

template <typename T>
Matrix<T> skew_part(const Matrix<T>& m) {
  require_square(m, "skew_part");
  return m - m.transpose();
}

// Entries strictly below the diagonal; diagonal and upper triangle zero.
template <typename T>
Matrix<T> strict_lower(const Matrix<T>& m) {
  require_square(m, "strict_lower");
  Matrix<T> out = Matrix<T>::Zero(m.rows(), m.cols());
  out.template triangularView<Eigen::StrictlyLower>() = m.template triangularView<Eigen::StrictlyLower>();
  return out;
}

// Returns a new matrix; safe to assign back to the argument.
template <typename T>
Matrix<T> symmetrized(const Matrix<T>& m) {
  Matrix<T> out = T(0.5) * (m + m.transpose());
  return out;
}

template <typename T>
bool is_skew(const Matrix<T>& n) {
  const T tol = scaled_tol<T>(1e-8);
  return (n + n.transpose()).norm() <= tol * (T(1) + n.norm());
}

template <typename T>
void require_skew(const Matrix<T>& n, const char* what) {
  require_square(n, what);
  require_finite(n, what);
  if (!is_skew(n)) throw InvalidArgument(std::string(what) + ": argument is not skew-symmetric");
}

// (I + N)(I - N)^{-1}; the two factors commute so one solve suffices.
template <typename T>
Matrix<T> cayley_exact(const Matrix<T>& n) {
  require_skew(n, "cayley_exact");
  const Index dim = n.rows();
  const Matrix<T> id = Matrix<T>::Identity(dim, dim);
  Eigen::PartialPivLU<Matrix<T>> lu(id - n);
  Matrix<T> q = lu.solve(id + n);
  require_finite(q, "cayley_exact");
  return q;
}

// (Q + I)^{-1}(Q - I). Undefined when Q has -1 in its spectrum.
template <typename T>
Matrix<T> cayley_inverse(const Matrix<T>& q) {
  require_square(q, "cayley_inverse");
  require_finite(q, "cayley_inverse");
  const Index dim = q.rows();
  const Matrix<T> id = Matrix<T>::Identity(dim, dim);
  const T orth_tol = std::sqrt(eps<T>()) * T(dim + 1);
  if ((q.transpose() * q - id).norm() > orth_tol)
    throw InvalidArgument("cayley_inverse: argument is not orthogonal");
  Eigen::PartialPivLU<Matrix<T>> lu(q + id);
  if (!(lu.rcond() > T(64) * eps<T>()))
    throw DomainError("cayley_inverse: -1 is (numerically) an eigenvalue");
  Matrix<T> n = lu.solve(q - id);
  require_finite(n, "cayley_inverse");
  return n;
}

// (I + N)^2 (I + N^2)(I + N^4), equal to (I + N) sum_{k<8} N^k. Needs ||N||_F < 1.
template <typename T>
Matrix<T> cayley_truncated(const Matrix<T>& n) {
  require_skew(n, "cayley_truncated");
  if (!(n.norm() < T(1))) throw PreconditionError("cayley_truncated: requires ||N||_F < 1");
  const Index dim = n.rows();
  const Matrix<T> id = Matrix<T>::Identity(dim, dim);
  const Matrix<T> p = id + n;
  const Matrix<T> n2 = n * n;
  const Matrix<T> n4 = n2 * n2;
  Matrix<T> q = (p * p) * (id + n2);
  return q * (id + n4);
}

template <typename T>
struct EigenPairs {
  Matrix<T> basis;   // columns are eigenvectors
  Vector<T> values;  // ascending
};

template <typename T>
void require_symmetric(const Matrix<T>& s, const char* what) {
  require_square(s, what);
  require_finite(s, what);
  const T tol = scaled_tol<T>(1e-10);
  if ((s - s.transpose()).norm() > tol * (T(1) + s.norm()))
    throw InvalidArgument(std::string(what) + ": argument is not symmetric");
}

template <typename T>
EigenPairs<T> sym_eigendecompose(const Matrix<T>& s) {
  require_symmetric(s, "sym_eigendecompose");
  Eigen::SelfAdjointEigenSolver<Matrix<T>> es(s);
  if (es.info() != Eigen::Success) throw NumericalError("sym_eigendecompose: solver did not converge");
  return {es.eigenvectors(), es.eigenvalues()};
}

template <typename T>
Matrix<T> spd_sqrt(const Matrix<T>& s) {
  EigenPairs<T> e = sym_eigendecompose(s);
  if (!(e.values.minCoeff() > T(0))) throw DomainError("spd_sqrt: matrix is not positive definite");
  Matrix<T> r = e.basis * e.values.cwiseSqrt().asDiagonal() * e.basis.transpose();
  return T(0.5) * (r + r.transpose());
}

template <typename T>
T orthogonality_defect(const Matrix<T>& b) {
  const Index dim = b.cols();
  return (b.transpose() * b - Matrix<T>::Identity(dim, dim)).norm();
}

// One Newton-Schulz polar sweep, B <- B (3I - B^T B) / 2.
template <typename T>
Matrix<T> orthonormalize_sweep(const Matrix<T>& b) {
  const Index dim = b.cols();
  const Matrix<T> id = Matrix<T>::Identity(dim, dim);
  return b * (T(3) * id - b.transpose() * b) * T(0.5);
}

// Row-major vectorization: vec_r(X)[i * cols + j] = X(i, j).
template <typename T>
Vector<T> vec_rowmajor(const Matrix<T>& x) {
  Vector<T> v(x.size());
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) v(i * x.cols() + j) = x(i, j);
  return v;
}

template <typename T>
Matrix<T> unvec_rowmajor(const Vector<T>& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw InvalidArgument("unvec_rowmajor: size mismatch");
  Matrix<T> x(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) x(i, j) = v(i * cols + j);
  return x;
}

template <typename T>
Matrix<T> kron(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace spectral
