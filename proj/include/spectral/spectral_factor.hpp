#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spectral/linalg.hpp"
#include "spectral/rng.hpp"

namespace spectral {

enum class CayleyMode { exact, truncated };
enum class ExpMode { exact, first_order };
enum class ResidualSource { gop, spd_opt, reinforce };

// Hyperparameters are kept in double regardless of the factor scalar type.
struct UpdateConfig {
  double beta1 = 1e-3;
  double beta2 = 1e-2;
  double gamma = 1.0;
  double root = 2.0;  // p in S^{-1/p}
  double damping = 0.0;
  double gap_rel_tol = 1e-8;
  CayleyMode cayley_mode = CayleyMode::exact;
  ExpMode exp_mode = ExpMode::exact;
  std::optional<double> clip_norm;
  // Target Cayley-argument scale for the nonconstant step in truncated mode;
  // falls back to beta2 when unset.
  std::optional<double> rotation_beta2;

  void validate() const {
    if (!(beta1 >= 0) || !std::isfinite(beta1)) throw InvalidArgument("UpdateConfig: beta1 must be >= 0");
    if (!(beta2 >= 0) || !std::isfinite(beta2)) throw InvalidArgument("UpdateConfig: beta2 must be >= 0");
    if (gamma != 0.0 && gamma != 1.0) throw InvalidArgument("UpdateConfig: gamma must be 0 or 1");
    if (!(root > 0) || !std::isfinite(root)) throw InvalidArgument("UpdateConfig: root p must be > 0");
    if (!(damping >= 0) || !std::isfinite(damping)) throw InvalidArgument("UpdateConfig: damping must be >= 0");
    if (!(gap_rel_tol > 0)) throw InvalidArgument("UpdateConfig: gap_rel_tol must be > 0");
    if (clip_norm && !(*clip_norm > 0)) throw InvalidArgument("UpdateConfig: clip_norm must be > 0");
    if (rotation_beta2 && !(*rotation_beta2 > 0)) throw InvalidArgument("UpdateConfig: rotation_beta2 must be > 0");
  }

  double rotation_step() const { return rotation_beta2.value_or(beta2); }
};

// Holds B^T C B for C = 2 dL/dS^{-1}, expressed in the basis of the factor it will update.
template <typename T>
class CurvatureResidual {
 public:
  CurvatureResidual(Matrix<T> rotated, ResidualSource source) : rotated_(std::move(rotated)), source_(source) {
    require_symmetric(rotated_, "CurvatureResidual");
  }
  const Matrix<T>& rotated() const { return rotated_; }
  ResidualSource source() const { return source_; }
  Index dim() const { return rotated_.rows(); }

 private:
  Matrix<T> rotated_;
  ResidualSource source_;
};

// S = B Diag(d) B^T, never materialized by the update steps.
template <typename T>
class SpectralFactor {
 public:
  SpectralFactor(Matrix<T> basis, Vector<T> eigvals, double orth_tol = 1e-8)
      : basis_(std::move(basis)), eigvals_(std::move(eigvals)) {
    check_shape_and_positivity();
    const T tol = scaled_tol<T>(orth_tol) * T(basis_.rows());
    if (orthogonality_defect() > tol) throw InvalidArgument("SpectralFactor: basis is not orthogonal");
  }

  // Skips the orthogonality check; positivity and finiteness are still enforced.
  static SpectralFactor unchecked(Matrix<T> basis, Vector<T> eigvals) {
    SpectralFactor f;
    f.basis_ = std::move(basis);
    f.eigvals_ = std::move(eigvals);
    f.check_shape_and_positivity();
    return f;
  }

  static SpectralFactor identity(Index n) {
    if (n < 1) throw InvalidArgument("identity_factor: n must be >= 1");
    return unchecked(Matrix<T>::Identity(n, n), Vector<T>::Ones(n));
  }

  Index dim() const { return eigvals_.size(); }
  const Matrix<T>& basis() const { return basis_; }
  const Vector<T>& eigvals() const { return eigvals_; }

  Matrix<T> reconstruct() const {
    Matrix<T> s = basis_ * eigvals_.asDiagonal() * basis_.transpose();
    return T(0.5) * (s + s.transpose());
  }

  T log_det() const { return eigvals_.array().log().sum(); }

  T orthogonality_defect() const { return spectral::orthogonality_defect(basis_); }

  // Explicit orthogonality repair; never applied automatically.
  SpectralFactor repaired() const { return unchecked(orthonormalize_sweep(basis_), eigvals_); }

  // B Diag(d^{-1/p}) B^T
  Matrix<T> inverse_root(double p) const {
    if (!(p > 0)) throw InvalidArgument("inverse_root: p must be > 0");
    const Vector<T> s = eigvals_.array().pow(static_cast<T>(-1.0 / p)).matrix();
    return basis_ * s.asDiagonal() * basis_.transpose();
  }

 private:
  SpectralFactor() = default;

  void check_shape_and_positivity() const {
    if (basis_.rows() != basis_.cols() || basis_.rows() != eigvals_.size() || eigvals_.size() == 0)
      throw InvalidArgument("SpectralFactor: basis must be square and match eigvals");
    require_finite(basis_, "SpectralFactor basis");
    require_finite(eigvals_, "SpectralFactor eigvals");
    if (!(eigvals_.minCoeff() > T(0))) throw NumericalError("SpectralFactor: eigenvalues must be positive");
  }

  Matrix<T> basis_;
  Vector<T> eigvals_;
};

template <typename T>
SpectralFactor<T> identity_factor(Index n) {
  return SpectralFactor<T>::identity(n);
}

template <typename T>
Matrix<T> reconstruct(const SpectralFactor<T>& f) {
  return f.reconstruct();
}

template <typename T>
T log_det(const SpectralFactor<T>& f) {
  return f.log_det();
}

template <typename T>
Vector<T> apply_inverse_root(const SpectralFactor<T>& f, const Vector<T>& v, double p) {
  if (!(p > 0)) throw InvalidArgument("apply_inverse_root: p must be > 0");
  if (v.size() != f.dim()) throw InvalidArgument("apply_inverse_root: length mismatch");
  Vector<T> r = f.basis().transpose() * v;
  r.array() *= f.eigvals().array().pow(static_cast<T>(-1.0 / p));
  return f.basis() * r;
}

// U_ij = -C_ij / (d_i - d_j), zero where the gap is below gap_rel_tol * max(d_i, d_j).
template <typename T>
Matrix<T> rotation_generator(const Vector<T>& d, const Matrix<T>& rotated, double gap_rel_tol) {
  const Index n = d.size();
  if (rotated.rows() != n || rotated.cols() != n) throw InvalidArgument("rotation_generator: size mismatch");
  const T tol = static_cast<T>(gap_rel_tol);
  Matrix<T> u = Matrix<T>::Zero(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) {
      if (i == j) continue;
      const T gap = d(i) - d(j);
      if (std::abs(gap) > tol * std::max(d(i), d(j))) u(i, j) = -rotated(i, j) / gap;
    }
  return u;
}

template <typename T>
Matrix<T> rotation_generator(const SpectralFactor<T>& f, const CurvatureResidual<T>& cr, double gap_rel_tol) {
  return rotation_generator(f.eigvals(), cr.rotated(), gap_rel_tol);
}

template <typename T>
Matrix<T> apply_cayley(const Matrix<T>& n, CayleyMode mode) {
  return mode == CayleyMode::exact ? cayley_exact(n) : cayley_truncated(n);
}

namespace detail {

template <typename T>
Matrix<T> rotate_basis(const SpectralFactor<T>& f, const Matrix<T>& rotated, const UpdateConfig& cfg,
                       bool diagonal_only) {
  if (diagonal_only) return f.basis();
  const Matrix<T> u = rotation_generator(f.eigvals(), rotated, cfg.gap_rel_tol);
  const Matrix<T> n = static_cast<T>(cfg.beta2 / 2.0) * skew_part(strict_lower(u));
  if (n.isZero(0)) return f.basis();
  return f.basis() * apply_cayley(n, cfg.cayley_mode);
}

}  // namespace detail

// d' = d exp(beta2 d^{-1} diag(Cr)), B' = B Cayley(beta2/2 Skew(Tril(U))).
// diagonal_only substitutes Diag(U) for Tril(U), which leaves B unchanged.
template <typename T>
SpectralFactor<T> rgd_step_exact(const SpectralFactor<T>& f, const CurvatureResidual<T>& cr, const UpdateConfig& cfg,
                                 bool diagonal_only = false) {
  cfg.validate();
  if (cr.dim() != f.dim()) throw InvalidArgument("rgd_step_exact: residual size mismatch");
  const T b2 = static_cast<T>(cfg.beta2);
  const Vector<T> m = cr.rotated().diagonal().cwiseQuotient(f.eigvals());
  Vector<T> d = f.eigvals().array() * (b2 * m.array()).exp();
  Matrix<T> basis = detail::rotate_basis(f, cr.rotated(), cfg, diagonal_only);
  return SpectralFactor<T>::unchecked(std::move(basis), std::move(d));
}

// First-order exponential; the rotation uses B^T g g^T B directly.
template <typename T>
SpectralFactor<T> rgd_step_gop_truncated(const SpectralFactor<T>& f, const Vector<T>& g, const UpdateConfig& cfg) {
  cfg.validate();
  if (cfg.exp_mode != ExpMode::first_order)
    throw InvalidArgument("rgd_step_gop_truncated: requires exp_mode = first_order");
  if (g.size() != f.dim()) throw InvalidArgument("rgd_step_gop_truncated: gradient length mismatch");
  if (cfg.gamma * cfg.beta2 >= 1.0)
    throw PreconditionError("rgd_step_gop_truncated: gamma * beta2 >= 1 loses positivity");
  const T b2 = static_cast<T>(cfg.beta2);
  const Vector<T> h = f.basis().transpose() * g;
  const Matrix<T> outer = h * h.transpose();
  Vector<T> d = static_cast<T>(1.0 - cfg.gamma * cfg.beta2) * f.eigvals() +
                b2 * (h.cwiseProduct(h).array() + static_cast<T>(cfg.damping)).matrix();
  Matrix<T> basis = detail::rotate_basis(f, outer, cfg, false);
  return SpectralFactor<T>::unchecked(std::move(basis), std::move(d));
}

// Diagonal scheme: RMSprop (gamma = 1, first order) and AdaGrad (gamma = 0) are special cases.
template <typename T>
Vector<T> diagonal_step(const Vector<T>& d, const Vector<T>& g, const UpdateConfig& cfg) {
  cfg.validate();
  if (d.size() != g.size()) throw InvalidArgument("diagonal_step: length mismatch");
  const T b2 = static_cast<T>(cfg.beta2);
  const T lam = static_cast<T>(cfg.damping);
  const T gam = static_cast<T>(cfg.gamma);
  Vector<T> out(d.size());
  if (cfg.exp_mode == ExpMode::first_order) {
    const T keep = T(1) - b2 * gam;
    for (Index i = 0; i < d.size(); ++i) out(i) = keep * d(i) + b2 * (g(i) * g(i) + lam);
  } else {
    for (Index i = 0; i < d.size(); ++i) out(i) = d(i) * std::exp(b2 * (-gam * d(i) + g(i) * g(i) + lam) / d(i));
  }
  return out;
}

// w_i = mu + B Diag(d^{-1/2}) z_i, z_i ~ N(0, I).
template <typename T>
std::vector<Vector<T>> sample_gaussian(const SpectralFactor<T>& f, const Vector<T>& mu, Index count,
                                       std::uint64_t seed) {
  if (mu.size() != f.dim()) throw InvalidArgument("sample_gaussian: length mismatch");
  if (count < 1) throw InvalidArgument("sample_gaussian: count must be >= 1");
  Rng rng(seed);
  const Vector<T> scale = f.eigvals().array().rsqrt().matrix();
  std::vector<Vector<T>> out;
  out.reserve(static_cast<std::size_t>(count));
  Vector<T> z(f.dim());
  for (Index k = 0; k < count; ++k) {
    for (Index i = 0; i < f.dim(); ++i) z(i) = static_cast<T>(rng.normal());
    out.push_back(mu + f.basis() * scale.cwiseProduct(z));
  }
  return out;
}

}  // namespace spectral
