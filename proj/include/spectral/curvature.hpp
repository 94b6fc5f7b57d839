#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "spectral/rng.hpp"
#include "spectral/spectral_factor.hpp"

namespace spectral {

// Gradient outer product: B^T (g g^T - gamma S) B = (B^T g)(B^T g)^T - gamma Diag(d).
template <typename T>
CurvatureResidual<T> gop_residual(const SpectralFactor<T>& f, const Vector<T>& g, double gamma) {
  if (g.size() != f.dim()) throw InvalidArgument("gop_residual: length mismatch");
  const Vector<T> h = f.basis().transpose() * g;
  Matrix<T> r = h * h.transpose();
  r.diagonal() -= static_cast<T>(gamma) * f.eigvals();
  return CurvatureResidual<T>(std::move(r), ResidualSource::gop);
}

enum class SpdKind { metric_nearness, log_det };

// Both objectives are minimized at S* = Q^{-1}.
template <typename T>
struct SpdProblem {
  SpdKind kind = SpdKind::log_det;
  Matrix<T> q;
  Matrix<T> data;  // columns are the x_i (metric nearness only)
  Index batch_size = 1;

  void validate() const {
    require_symmetric(q, "SpdProblem Q");
    Eigen::LLT<Matrix<T>> llt(q);
    if (llt.info() != Eigen::Success) throw DomainError("SpdProblem: Q must be positive definite");
    if (kind == SpdKind::metric_nearness) {
      if (data.rows() != q.rows() || data.cols() == 0) throw InvalidArgument("SpdProblem: data shape mismatch");
      if (batch_size < 1 || batch_size > data.cols()) throw InvalidArgument("SpdProblem: bad batch_size");
    }
  }
  Index dim() const { return q.rows(); }
};

// Loss at a dense S over the given columns of the data (all columns if empty).
template <typename T>
T spd_loss(const SpdProblem<T>& prob, const Matrix<T>& s, const std::vector<Index>& batch = {}) {
  if (prob.kind == SpdKind::log_det) {
    Eigen::LLT<Matrix<T>> llt(s);
    if (llt.info() != Eigen::Success) throw DomainError("spd_loss: S is not positive definite");
    const T logdet = T(2) * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return (s * prob.q).trace() - logdet;
  }
  const Matrix<T> sq = s * prob.q;
  T acc = T(0);
  const Index count = batch.empty() ? prob.data.cols() : static_cast<Index>(batch.size());
  for (Index c = 0; c < count; ++c) {
    const Index i = batch.empty() ? c : batch[static_cast<std::size_t>(c)];
    acc += (sq * prob.data.col(i) - prob.data.col(i)).squaredNorm();
  }
  return acc / (T(2) * T(count));
}

template <typename T>
T spd_loss(const SpdProblem<T>& prob, const SpectralFactor<T>& f, const std::vector<Index>& batch = {}) {
  if (prob.kind == SpdKind::log_det) return (f.reconstruct() * prob.q).trace() - f.log_det();
  return spd_loss(prob, f.reconstruct(), batch);
}

template <typename T>
struct SpdResidual {
  T loss;
  CurvatureResidual<T> residual;
};

// rotated = -2 D (B^T G_S B) D, with G_S the symmetric Euclidean gradient of the loss.
template <typename T>
SpdResidual<T> spd_opt_residual(const SpectralFactor<T>& f, const SpdProblem<T>& prob,
                                const std::vector<Index>& batch = {}) {
  if (prob.dim() != f.dim()) throw InvalidArgument("spd_opt_residual: dimension mismatch");
  const Matrix<T>& b = f.basis();
  const Vector<T>& d = f.eigvals();
  Matrix<T> bgb;
  T loss;
  if (prob.kind == SpdKind::log_det) {
    // B^T (Q - S^{-1}) B = B^T Q B - D^{-1}
    bgb = b.transpose() * prob.q * b;
    bgb.diagonal() -= d.cwiseInverse();
    loss = (b.transpose() * prob.q * b).diagonal().dot(d) - f.log_det();
  } else {
    if (batch.empty()) throw InvalidArgument("spd_opt_residual: metric nearness needs a non-empty batch");
    const Index nb = static_cast<Index>(batch.size());
    Matrix<T> x(prob.dim(), nb);
    for (Index c = 0; c < nb; ++c) x.col(c) = prob.data.col(batch[static_cast<std::size_t>(c)]);
    const Matrix<T> qx = prob.q * x;
    // Work in the rotated frame: B^T R = D B^T Q x - B^T x.
    const Matrix<T> bqx = b.transpose() * qx;
    const Matrix<T> br = d.asDiagonal() * bqx - b.transpose() * x;
    loss = br.squaredNorm() / (T(2) * T(nb));
    const Matrix<T> a = br * bqx.transpose() / T(nb);
    bgb = T(0.5) * (a + a.transpose());
  }
  Matrix<T> rot = T(-2) * (d.asDiagonal() * bgb * d.asDiagonal());
  rot = symmetrized(rot);
  return {loss, CurvatureResidual<T>(std::move(rot), ResidualSource::spd_opt)};
}

// Uniform subset of size b without replacement, in increasing order.
inline std::vector<Index> sample_batch(Index n, Index b, Rng& rng) {
  if (b < 1 || b > n) throw InvalidArgument("sample_batch: batch size out of range");
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index(0));
  for (Index i = 0; i < b; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(b));
  std::sort(idx.begin(), idx.end());
  return idx;
}

enum class FitnessShaping { ranks, raw };

struct NesConfig {
  Index pop_size = 0;  // 0 selects the default 4 + floor(3 ln dim), rounded up to even
  bool antithetic = true;
  FitnessShaping fitness_shaping = FitnessShaping::ranks;
  std::uint64_t seed = 0;

  static Index default_pop_size(Index dim) {
    Index k = 4 + static_cast<Index>(std::floor(3.0 * std::log(static_cast<double>(dim))));
    return k + (k % 2);
  }
  Index resolved_pop_size(Index dim) const { return pop_size > 0 ? pop_size : default_pop_size(dim); }
  void validate(Index dim) const {
    const Index k = resolved_pop_size(dim);
    if (k < 2) throw InvalidArgument("NesConfig: pop_size must be >= 2");
    if (antithetic && k % 2 != 0) throw InvalidArgument("NesConfig: pop_size must be even when antithetic");
  }
};

// Rank utilities for minimization: the best sample (rank 1) gets the largest
// utility; utilities sum to zero. Tied values share the mean of their utilities.
inline std::vector<double> rank_utilities(const std::vector<double>& values) {
  const std::size_t k = values.size();
  std::vector<double> raw(k);
  double total = 0.0;
  const double top = std::log(static_cast<double>(k) / 2.0 + 1.0);
  for (std::size_t r = 0; r < k; ++r) {
    raw[r] = std::max(0.0, top - std::log(static_cast<double>(r + 1)));
    total += raw[r];
  }
  for (auto& x : raw) x = x / total - 1.0 / static_cast<double>(k);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> u(k);
  for (std::size_t r = 0; r < k;) {
    std::size_t e = r + 1;
    while (e < k && values[order[e]] == values[order[r]]) ++e;
    double mean = 0.0;
    for (std::size_t t = r; t < e; ++t) mean += raw[t];
    mean /= static_cast<double>(e - r);
    for (std::size_t t = r; t < e; ++t) u[order[t]] = mean;
    r = e;
  }
  return u;
}

template <typename T>
using Objective = std::function<double(const Vector<T>&)>;

template <typename T>
struct NesEstimate {
  Vector<T> g_hat;
  CurvatureResidual<T> residual;
  Index evaluations;
  double best_value;
  Vector<T> best_point;
};

// Search-gradient estimate under w ~ N(mu, S^{-1}). Both outputs are in the
// descent convention: f_k = l(w_k) for raw shaping and f_k = -u_k for ranks, so
// g_hat estimates grad_mu E[l] and the residual estimates B^T E[hess l] B.
template <typename T>
NesEstimate<T> nes_estimate(const SpectralFactor<T>& f, const Vector<T>& mu, const Objective<T>& objective,
                            const NesConfig& cfg, Rng& rng) {
  const Index dim = f.dim();
  if (mu.size() != dim) throw InvalidArgument("nes_estimate: length mismatch");
  cfg.validate(dim);
  const Index k = cfg.resolved_pop_size(dim);
  Matrix<T> z(dim, k);
  if (cfg.antithetic) {
    for (Index j = 0; j < k / 2; ++j) {
      for (Index i = 0; i < dim; ++i) z(i, j) = static_cast<T>(rng.normal());
      z.col(j + k / 2) = -z.col(j);
    }
  } else {
    for (Index j = 0; j < k; ++j)
      for (Index i = 0; i < dim; ++i) z(i, j) = static_cast<T>(rng.normal());
  }
  const Vector<T> inv_sqrt = f.eigvals().array().rsqrt().matrix();
  const Vector<T> sqrt_d = f.eigvals().array().sqrt().matrix();
  std::vector<double> values(static_cast<std::size_t>(k));
  double best = std::numeric_limits<double>::infinity();
  Vector<T> best_point = mu;
  for (Index j = 0; j < k; ++j) {
    Vector<T> w = mu + f.basis() * inv_sqrt.cwiseProduct(z.col(j));
    const double v = objective(w);
    if (!std::isfinite(v)) throw EvaluationError("nes_estimate: objective returned a non-finite value",
                                                 std::vector<double>(w.data(), w.data() + w.size()));
    values[static_cast<std::size_t>(j)] = v;
    if (v < best) {
      best = v;
      best_point = w;
    }
  }
  std::vector<double> fk(values.size());
  if (cfg.fitness_shaping == FitnessShaping::raw) {
    fk = values;
  } else {
    const std::vector<double> u = rank_utilities(values);
    for (std::size_t j = 0; j < u.size(); ++j) fk[j] = -u[j];
  }
  Vector<T> zf = Vector<T>::Zero(dim);
  Matrix<T> h = Matrix<T>::Zero(dim, dim);
  double fsum = 0.0;
  // Mirrored pairs are folded together first so that equal values on z and -z cancel exactly.
  const Index groups = cfg.antithetic ? k / 2 : k;
  for (Index j = 0; j < groups; ++j) {
    const T wa = static_cast<T>(fk[static_cast<std::size_t>(j)]);
    if (cfg.antithetic) {
      const T wb = static_cast<T>(fk[static_cast<std::size_t>(j + k / 2)]);
      zf += (wa * z.col(j) + wb * z.col(j + k / 2));
      h.noalias() += (wa + wb) * z.col(j) * z.col(j).transpose();
      fsum += fk[static_cast<std::size_t>(j)] + fk[static_cast<std::size_t>(j + k / 2)];
    } else {
      zf += wa * z.col(j);
      h.noalias() += wa * z.col(j) * z.col(j).transpose();
      fsum += fk[static_cast<std::size_t>(j)];
    }
  }
  const T inv_k = T(1) / T(k);
  zf *= inv_k;
  h *= inv_k;
  h.diagonal().array() -= static_cast<T>(fsum) * inv_k;
  Vector<T> g_hat = f.basis() * sqrt_d.cwiseProduct(zf);
  Matrix<T> rot = sqrt_d.asDiagonal() * h * sqrt_d.asDiagonal();
  rot = symmetrized(rot);
  return {std::move(g_hat), CurvatureResidual<T>(std::move(rot), ResidualSource::reinforce), k, best,
          std::move(best_point)};
}

template <typename T>
NesEstimate<T> nes_estimate(const SpectralFactor<T>& f, const Vector<T>& mu, const Objective<T>& objective,
                            const NesConfig& cfg) {
  Rng rng(cfg.seed);
  return nes_estimate(f, mu, objective, cfg, rng);
}

enum class TestFunction { ackley, rosenbrock, bohachevsky, schaffer, griewank };

inline TestFunction parse_test_function(const std::string& name) {
  if (name == "ackley") return TestFunction::ackley;
  if (name == "rosenbrock") return TestFunction::rosenbrock;
  if (name == "bohachevsky") return TestFunction::bohachevsky;
  if (name == "schaffer") return TestFunction::schaffer;
  if (name == "griewank") return TestFunction::griewank;
  throw InvalidArgument("unknown test function: " + name);
}

inline const char* test_function_name(TestFunction fn) {
  switch (fn) {
    case TestFunction::ackley: return "ackley";
    case TestFunction::rosenbrock: return "rosenbrock";
    case TestFunction::bohachevsky: return "bohachevsky";
    case TestFunction::schaffer: return "schaffer";
    case TestFunction::griewank: return "griewank";
  }
  return "?";
}

template <typename Vec>
double test_function(TestFunction fn, const Vec& w) {
  const Index n = w.size();
  constexpr double pi = 3.14159265358979323846;
  if (n < 1) throw InvalidArgument("test_function: empty input");
  if (n < 2 && fn != TestFunction::ackley && fn != TestFunction::griewank)
    throw InvalidArgument("test_function: pairwise functions need len(w) >= 2");
  auto at = [&](Index i) { return static_cast<double>(w(i)); };
  double acc = 0.0;
  switch (fn) {
    case TestFunction::ackley: {
      double sq = 0.0, cs = 0.0;
      for (Index i = 0; i < n; ++i) {
        sq += at(i) * at(i);
        cs += std::cos(2.0 * pi * at(i));
      }
      return 20.0 - 20.0 * std::exp(-0.2 * std::sqrt(sq / n)) + std::exp(1.0) - std::exp(cs / n);
    }
    case TestFunction::rosenbrock:
      for (Index i = 0; i + 1 < n; ++i) {
        const double a = at(i + 1) - at(i) * at(i);
        const double b = at(i) - 1.0;
        acc += 100.0 * a * a + b * b;
      }
      return acc;
    case TestFunction::bohachevsky:
      for (Index i = 0; i + 1 < n; ++i)
        acc += at(i) * at(i) + 2.0 * at(i + 1) * at(i + 1) - 0.3 * std::cos(3.0 * pi * at(i)) -
               0.4 * std::cos(4.0 * pi * at(i + 1)) + 0.7;
      return acc;
    case TestFunction::schaffer:
      for (Index i = 0; i + 1 < n; ++i) {
        const double r = at(i) * at(i) + at(i + 1) * at(i + 1);
        const double s = std::sin(50.0 * std::pow(r, 0.1));
        acc += std::pow(r, 0.25) * (s * s + 1.0);
      }
      return acc;
    case TestFunction::griewank: {
      double prod = 1.0;
      for (Index i = 0; i < n; ++i) {
        acc += at(i) * at(i) / 4000.0;
        prod *= std::cos(at(i) / std::sqrt(static_cast<double>(i + 1)));
      }
      return acc - prod + 1.0;
    }
  }
  throw InvalidArgument("test_function: unknown function");
}

}  // namespace spectral
