#include <cmath>

#include "spectral/harness.hpp"

namespace spectral {

MatrixD generate_random_spd(Index dim, double cond, std::uint64_t seed) {
  if (dim < 1) throw InvalidArgument("generate_random_spd: dim must be >= 1");
  if (!(cond >= 1.0) || !std::isfinite(cond)) throw InvalidArgument("generate_random_spd: cond must be >= 1");
  if (cond == 1.0) return MatrixD::Identity(dim, dim);
  Rng rng(seed, static_cast<std::uint64_t>(StreamId::problem));
  MatrixD a(dim, dim);
  for (Index j = 0; j < dim; ++j)
    for (Index i = 0; i < dim; ++i) a(i, j) = rng.normal();
  // Haar measure: QR with the signs of R's diagonal folded into Q.
  Eigen::HouseholderQR<MatrixD> qr(a);
  MatrixD q = qr.householderQ();
  const MatrixD r = qr.matrixQR();
  for (Index j = 0; j < dim; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  const double half = 0.5 * std::log(cond);
  VectorD spectrum(dim);
  for (Index i = 0; i < dim; ++i) spectrum(i) = std::exp(rng.uniform(-half, half));
  return symmetrized<double>(q * spectrum.asDiagonal() * q.transpose());
}

double rel_frobenius(const MatrixD& sa, const MatrixD& sb) {
  if (sa.rows() != sb.rows() || sa.cols() != sb.cols()) throw InvalidArgument("rel_frobenius: shape mismatch");
  const double na = sa.norm();
  if (!(na > 0)) throw InvalidArgument("rel_frobenius: reference matrix is zero");
  return (sa - sb).norm() / na;
}

double wasserstein2_spd(const MatrixD& a, const MatrixD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("wasserstein2_spd: shape mismatch");
  const MatrixD ra = spd_sqrt(a);
  const EigenPairs<double> eb = sym_eigendecompose(b);
  if (!(eb.values.minCoeff() > 0)) throw DomainError("wasserstein2_spd: B is not positive definite");
  const MatrixD inner = symmetrized<double>(ra * b * ra);
  const EigenPairs<double> ei = sym_eigendecompose(inner);
  // Tiny negative eigenvalues of the PSD inner product are roundoff.
  const double cross = ei.values.cwiseMax(0.0).cwiseSqrt().sum();
  const double sq = a.trace() + b.trace() - 2.0 * cross;
  return std::sqrt(std::max(sq, 0.0));
}

}  // namespace spectral
