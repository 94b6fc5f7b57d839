#pragma once

#include <cmath>

#include "spectral/spectral_factor.hpp"

namespace spectral {

// S = alpha (S_C kron S_K) with det S_C = det S_K = 1. S_C (dim n) acts on the
// rows of an n x m gradient, S_K (dim m) on its columns.
template <typename T>
class KronSpectralFactor {
 public:
  KronSpectralFactor(T alpha, SpectralFactor<T> factor_c, SpectralFactor<T> factor_k)
      : alpha_(alpha), c_(std::move(factor_c)), k_(std::move(factor_k)) {
    if (!(alpha_ > T(0)) || !std::isfinite(alpha_)) throw InvalidArgument("KronSpectralFactor: alpha must be > 0");
    check_det(c_, "factor_C");
    check_det(k_, "factor_K");
  }

  static KronSpectralFactor identity(Index n, Index m) {
    return KronSpectralFactor(T(1), SpectralFactor<T>::identity(n), SpectralFactor<T>::identity(m));
  }

  T alpha() const { return alpha_; }
  const SpectralFactor<T>& factor_c() const { return c_; }
  const SpectralFactor<T>& factor_k() const { return k_; }
  Index rows() const { return c_.dim(); }
  Index cols() const { return k_.dim(); }

  // Dense alpha (S_C kron S_K); for validation only.
  Matrix<T> reconstruct() const { return alpha_ * kron(c_.reconstruct(), k_.reconstruct()); }

  T log_det() const {
    const T nm = static_cast<T>(rows() * cols());
    return nm * std::log(alpha_) + T(cols()) * c_.log_det() + T(rows()) * k_.log_det();
  }

  static T det_tol(Index dim) { return std::max(T(1e-10), T(16) * eps<T>() * T(dim)); }

 private:
  static void check_det(const SpectralFactor<T>& f, const char* what) {
    if (std::abs(f.log_det()) > det_tol(f.dim()))
      throw InvalidArgument(std::string("KronSpectralFactor: ") + what + " must have unit determinant");
  }

  T alpha_;
  SpectralFactor<T> c_;
  SpectralFactor<T> k_;
};

template <typename T>
struct NormalizedKron {
  T alpha;
  Vector<T> d_c;
  Vector<T> d_k;
};

// Divides each eigenvalue vector by its geometric mean and moves the scale into alpha.
template <typename T>
NormalizedKron<T> normalize_kron(T alpha_raw, const Vector<T>& d_c, const Vector<T>& d_k) {
  if (!(alpha_raw > T(0))) throw InvalidArgument("normalize_kron: alpha must be > 0");
  if (d_c.size() == 0 || d_k.size() == 0) throw InvalidArgument("normalize_kron: empty eigenvalue vector");
  if (!(d_c.minCoeff() > T(0)) || !(d_k.minCoeff() > T(0)))
    throw InvalidArgument("normalize_kron: eigenvalues must be positive");
  const Vector<T> lc = d_c.array().log().matrix();
  const Vector<T> lk = d_k.array().log().matrix();
  const T mc = lc.mean();
  const T mk = lk.mean();
  return {alpha_raw * std::exp(mc + mk), (lc.array() - mc).exp().matrix(), (lk.array() - mk).exp().matrix()};
}

// Rotated curvature blocks: W_C = B_C^T G S_K^{-1} G^T B_C and W_K = B_K^T G^T S_C^{-1} G B_K,
// both from Y = B_C^T G B_K with the inverses applied through the eigenvalues.
template <typename T>
struct KronCurvature {
  Matrix<T> w_c;
  Matrix<T> w_k;
};

template <typename T>
KronCurvature<T> kron_curvature(const KronSpectralFactor<T>& kf, const Matrix<T>& g) {
  if (g.rows() != kf.rows() || g.cols() != kf.cols()) throw InvalidArgument("kron step: gradient shape mismatch");
  require_finite(g, "kron gradient");
  const Matrix<T> y = kf.factor_c().basis().transpose() * g * kf.factor_k().basis();
  const Vector<T> inv_c = kf.factor_c().eigvals().cwiseInverse();
  const Vector<T> inv_k = kf.factor_k().eigvals().cwiseInverse();
  Matrix<T> w_c = y * inv_k.asDiagonal() * y.transpose();
  Matrix<T> w_k = y.transpose() * inv_c.asDiagonal() * y;
  return {T(0.5) * (w_c + w_c.transpose()), T(0.5) * (w_k + w_k.transpose())};
}

// Tr(S_C^{-1} G S_K^{-1} G^T) / (n m alpha), the common value of the two mean terms.
template <typename T>
T kron_trace_term(const KronSpectralFactor<T>& kf, const Matrix<T>& g) {
  const Matrix<T> y = kf.factor_c().basis().transpose() * g * kf.factor_k().basis();
  const Vector<T> inv_c = kf.factor_c().eigvals().cwiseInverse();
  const Vector<T> inv_k = kf.factor_k().eigvals().cwiseInverse();
  T tr = T(0);
  for (Index j = 0; j < y.cols(); ++j)
    for (Index i = 0; i < y.rows(); ++i) tr += inv_c(i) * y(i, j) * y(i, j) * inv_k(j);
  return tr / (T(kf.rows() * kf.cols()) * kf.alpha());
}

namespace detail {

// B <- B Cayley(scale * Skew(Tril(U))). In truncated mode the scale is the
// nonconstant step that fixes ||arg||_F at rotation_beta2 / 2 (capped at 0.5).
template <typename T>
Matrix<T> kron_rotate(const SpectralFactor<T>& f, const Matrix<T>& w, T alpha, T k, const UpdateConfig& cfg) {
  const Matrix<T> u = rotation_generator(f.eigvals(), w, cfg.gap_rel_tol);
  const Matrix<T> skew = skew_part(strict_lower(u));
  const T norm = skew.norm();
  if (!(norm > T(0))) return f.basis();
  if (cfg.cayley_mode == CayleyMode::exact) {
    const T scale = static_cast<T>(cfg.beta2) / (T(2) * alpha * k);
    return f.basis() * cayley_exact<T>(scale * skew);
  }
  // beta2_l = rotation_beta2 * alpha * kappa / ||skew|| with kappa = k.
  const T beta2_l = static_cast<T>(cfg.rotation_step()) * alpha * k / norm;
  T scale = beta2_l / (T(2) * alpha * k);
  scale = std::min(scale, T(0.5) / norm);
  return f.basis() * cayley_truncated<T>(scale * skew);
}

template <typename T>
Vector<T> recentre_log(const Vector<T>& log_d) {
  return (log_d.array() - log_d.mean()).exp().matrix();
}

}  // namespace detail

// Exact-exponential Kronecker step; centering of m happens in linear space.
template <typename T>
KronSpectralFactor<T> kron_rgd_step_exact(const KronSpectralFactor<T>& kf, const Matrix<T>& g,
                                          const UpdateConfig& cfg) {
  cfg.validate();
  const KronCurvature<T> w = kron_curvature(kf, g);
  const T alpha = kf.alpha();
  const T b2 = static_cast<T>(cfg.beta2);
  const T gam = static_cast<T>(cfg.gamma);
  const T k_c = T(kf.cols());
  const T k_k = T(kf.rows());
  const auto& fc = kf.factor_c();
  const auto& fk = kf.factor_k();

  const Vector<T> m_c = (w.w_c.diagonal().array() / (alpha * k_c * fc.eigvals().array()) - gam).matrix();
  const Vector<T> m_k = (w.w_k.diagonal().array() / (alpha * k_k * fk.eigvals().array()) - gam).matrix();
  const T mean_c = m_c.mean();
  const T mean_k = m_k.mean();

  // Centering in log space keeps the determinant constraint at roundoff level.
  const Vector<T> log_c = fc.eigvals().array().log().matrix() + b2 * (m_c.array() - mean_c).matrix();
  const Vector<T> log_k = fk.eigvals().array().log().matrix() + b2 * (m_k.array() - mean_k).matrix();

  Matrix<T> b_c = detail::kron_rotate(fc, w.w_c, alpha, k_c, cfg);
  Matrix<T> b_k = detail::kron_rotate(fk, w.w_k, alpha, k_k, cfg);
  const T new_alpha = alpha * std::exp(b2 / T(2) * (mean_c + mean_k));
  return KronSpectralFactor<T>(new_alpha, SpectralFactor<T>::unchecked(std::move(b_c), detail::recentre_log(log_c)),
                               SpectralFactor<T>::unchecked(std::move(b_k), detail::recentre_log(log_k)));
}

template <typename T>
struct KronFirstOrder {
  Vector<T> n_c;
  Vector<T> n_k;
};

// n_l = (1 - gamma beta2) d_l + beta2 / (alpha k_l) (diag W_l + Lambda_l).
template <typename T>
KronFirstOrder<T> kron_first_order_terms(const KronSpectralFactor<T>& kf, const KronCurvature<T>& w,
                                         const UpdateConfig& cfg) {
  const T alpha = kf.alpha();
  const T b2 = static_cast<T>(cfg.beta2);
  const T keep = static_cast<T>(1.0 - cfg.gamma * cfg.beta2);
  const T k_c = T(kf.cols());
  const T k_k = T(kf.rows());
  const Vector<T>& d_c = kf.factor_c().eigvals();
  const Vector<T>& d_k = kf.factor_k().eigvals();
  const T inv_mean_c = d_c.cwiseInverse().mean();
  const T inv_mean_k = d_k.cwiseInverse().mean();
  const T lam = static_cast<T>(cfg.damping);
  const T lam_c = lam * k_c * inv_mean_c * inv_mean_k / inv_mean_c;
  const T lam_k = lam * k_k * inv_mean_c * inv_mean_k / inv_mean_k;
  KronFirstOrder<T> out;
  out.n_c = keep * d_c + (b2 / (alpha * k_c)) * (w.w_c.diagonal().array() + lam_c).matrix();
  out.n_k = keep * d_k + (b2 / (alpha * k_k)) * (w.w_k.diagonal().array() + lam_k).matrix();
  return out;
}

// Truncated-exponential Kronecker step with adaptive damping; centering happens in log space.
template <typename T>
KronSpectralFactor<T> kron_rgd_step_truncated(const KronSpectralFactor<T>& kf, const Matrix<T>& g,
                                              const UpdateConfig& cfg) {
  cfg.validate();
  if (cfg.exp_mode != ExpMode::first_order)
    throw InvalidArgument("kron_rgd_step_truncated: requires exp_mode = first_order");
  const KronCurvature<T> w = kron_curvature(kf, g);
  const KronFirstOrder<T> nt = kron_first_order_terms(kf, w, cfg);
  if (!(nt.n_c.minCoeff() > T(0)) || !(nt.n_k.minCoeff() > T(0)))
    throw NumericalError("kron_rgd_step_truncated: positivity lost (gamma * beta2 too large for the damping)");
  const Vector<T> log_c = nt.n_c.array().log().matrix();
  const Vector<T> log_k = nt.n_k.array().log().matrix();
  const T alpha = kf.alpha();
  Matrix<T> b_c = detail::kron_rotate(kf.factor_c(), w.w_c, alpha, T(kf.cols()), cfg);
  Matrix<T> b_k = detail::kron_rotate(kf.factor_k(), w.w_k, alpha, T(kf.rows()), cfg);
  const T new_alpha = alpha * std::exp(log_c.mean() / T(2) + log_k.mean() / T(2));
  return KronSpectralFactor<T>(new_alpha, SpectralFactor<T>::unchecked(std::move(b_c), detail::recentre_log(log_c)),
                               SpectralFactor<T>::unchecked(std::move(b_k), detail::recentre_log(log_k)));
}

// alpha^{-1/p} S_C^{-1/p} G S_K^{-1/p}
template <typename T>
Matrix<T> kron_precondition(const KronSpectralFactor<T>& kf, const Matrix<T>& g, double p) {
  if (!(p > 0)) throw InvalidArgument("kron_precondition: p must be > 0");
  if (g.rows() != kf.rows() || g.cols() != kf.cols()) throw InvalidArgument("kron_precondition: shape mismatch");
  const T e = static_cast<T>(-1.0 / p);
  const auto& fc = kf.factor_c();
  const auto& fk = kf.factor_k();
  Matrix<T> y = fc.basis().transpose() * g * fk.basis();
  const Vector<T> sc = fc.eigvals().array().pow(e).matrix();
  const Vector<T> sk = fk.eigvals().array().pow(e).matrix();
  y = sc.asDiagonal() * y * sk.asDiagonal();
  return std::pow(kf.alpha(), e) * (fc.basis() * y * fk.basis().transpose());
}

template <typename T>
Matrix<T> clip_preconditioned(const Matrix<T>& delta, double clip_norm) {
  if (!(clip_norm > 0)) throw InvalidArgument("clip_preconditioned: clip_norm must be > 0");
  const T norm = delta.norm();
  const T c = static_cast<T>(clip_norm);
  if (norm <= c) return delta;
  return delta * (c / norm);
}

}  // namespace spectral
