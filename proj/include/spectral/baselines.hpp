#pragma once

#include <cmath>
#include <optional>

#include <Eigen/SVD>

#include "spectral/linalg.hpp"

namespace spectral {

// Default scheme: S <- (1 - gamma beta2) S + beta2 (g g^T + lambda I).
template <typename T>
Matrix<T> ema_full_step(const Matrix<T>& s, const Vector<T>& g, double beta2, double gamma, double lambda) {
  require_square(s, "ema_full_step");
  if (g.size() != s.rows()) throw InvalidArgument("ema_full_step: length mismatch");
  if (gamma * beta2 >= 1.0) throw PreconditionError("ema_full_step: gamma * beta2 >= 1");
  if (gamma * beta2 < 0.0) throw InvalidArgument("ema_full_step: gamma * beta2 must be >= 0");
  const T keep = static_cast<T>(1.0 - gamma * beta2);
  const T b2 = static_cast<T>(beta2);
  // Evaluated separately: folding b2 into the product would break exact symmetry.
  const Matrix<T> outer = g * g.transpose();
  Matrix<T> out = keep * s + b2 * outer;
  out.diagonal().array() += b2 * static_cast<T>(lambda);
  return out;
}

// B Diag(d^{-1/p}) B^T g from an explicit eigendecomposition of S.
template <typename T>
Vector<T> eigen_precondition(const Matrix<T>& s, const Vector<T>& g, double p) {
  if (!(p > 0)) throw InvalidArgument("eigen_precondition: p must be > 0");
  if (g.size() != s.rows()) throw InvalidArgument("eigen_precondition: length mismatch");
  const EigenPairs<T> e = sym_eigendecompose(s);
  if (!(e.values.minCoeff() > T(0))) throw DomainError("eigen_precondition: S is not positive definite");
  Vector<T> r = e.basis.transpose() * g;
  r.array() *= e.values.array().pow(static_cast<T>(-1.0 / p));
  return e.basis * r;
}

template <typename T>
struct KronPair {
  Matrix<T> s_c;  // n x n
  Matrix<T> s_k;  // m x m
};

namespace detail {

// Van Loan rearrangement: row i * n + j holds vec_r of block (i, j).
template <typename T>
Matrix<T> vanloan_rearrange(const Matrix<T>& s, Index n, Index m) {
  Matrix<T> r(n * n, m * m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const Matrix<T> blk = s.block(i * m, j * m, m, m);
      r.row(i * n + j) = vec_rowmajor<T>(blk).transpose();
    }
  return r;
}

}  // namespace detail

// Frobenius-nearest S_C kron S_K. Power iteration on the rearranged matrix with
// an SVD fallback; factors are symmetrized and the gauge is trace(S_C) = n.
template <typename T>
KronPair<T> nearest_kron_project(const Matrix<T>& s, Index n, Index m, const Matrix<T>* warm_k = nullptr) {
  if (n < 1 || m < 1) throw InvalidArgument("nearest_kron_project: dims must be positive");
  if (s.rows() != n * m || s.cols() != n * m) throw InvalidArgument("nearest_kron_project: shape mismatch");
  require_symmetric(s, "nearest_kron_project");
  const Matrix<T> r = detail::vanloan_rearrange(s, n, m);
  if (!(r.norm() > T(0))) throw DomainError("nearest_kron_project: dominant singular value is zero");

  Vector<T> v = warm_k ? vec_rowmajor<T>(*warm_k) : vec_rowmajor<T>(Matrix<T>::Identity(m, m));
  if (!(v.norm() > T(0))) v = vec_rowmajor<T>(Matrix<T>::Identity(m, m));
  v.normalize();
  Vector<T> u;
  bool converged = false;
  const T tol = T(64) * eps<T>();
  for (int it = 0; it < 2000; ++it) {
    u = r * v;
    const T un = u.norm();
    if (!(un > T(0))) break;
    u /= un;
    Vector<T> v_next = r.transpose() * u;
    const T vn = v_next.norm();
    if (!(vn > T(0))) break;
    v_next /= vn;
    const T change = (v_next - v).norm();
    v = std::move(v_next);
    if (change <= tol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    Eigen::JacobiSVD<Matrix<T>> svd(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU().col(0);
    v = svd.matrixV().col(0);
  }
  const T sigma = u.dot(r * v);
  if (!(std::abs(sigma) > T(0))) throw DomainError("nearest_kron_project: dominant singular value is zero");

  Matrix<T> a = unvec_rowmajor<T>(u, n, n);
  Matrix<T> b = unvec_rowmajor<T>(v, m, m) * sigma;
  a = symmetrized(a);
  b = symmetrized(b);
  const T ta = a.trace();
  if (!(std::abs(ta) > T(0))) throw DomainError("nearest_kron_project: degenerate factor trace");
  const T c = T(n) / ta;
  a *= c;
  b /= c;
  if (!(b.trace() > T(0))) throw DomainError("nearest_kron_project: factors cannot both have positive trace");
  return {std::move(a), std::move(b)};
}

inline constexpr Index kProjectionCap = 200;

// Dense EMA on S_C kron S_K followed by the nearest-Kronecker projection.
template <typename T>
KronPair<T> projection_kron_step(const Matrix<T>& s_c, const Matrix<T>& s_k, const Vector<T>& g, double beta2,
                                 double gamma) {
  const Index n = s_c.rows();
  const Index m = s_k.rows();
  if (n * m > kProjectionCap)
    throw InvalidArgument("projection_kron_step: n * m exceeds the dense materialization cap of 200");
  if (g.size() != n * m) throw InvalidArgument("projection_kron_step: gradient length mismatch");
  const Matrix<T> s = ema_full_step<T>(kron(s_c, s_k), g, beta2, gamma, 0.0);
  return nearest_kron_project<T>(s, n, m, &s_k);
}

}  // namespace spectral
