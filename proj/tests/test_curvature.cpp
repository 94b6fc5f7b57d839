#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "spectral/curvature.hpp"
#include "test_util.hpp"

using namespace spectral;
using SF = SpectralFactor<double>;

namespace {

SF random_factor(Index n, Rng& rng, double lo = 0.5, double hi = 3.0) {
  return SF(testutil::random_orthogonal(n, rng), testutil::separated_eigvals(n, rng, lo, hi));
}

SpdProblem<double> make_problem(SpdKind kind, Index dim, Index count, Rng& rng) {
  SpdProblem<double> p;
  p.kind = kind;
  p.q = testutil::random_spd(dim, rng, 0.5, 2.0);
  if (kind == SpdKind::metric_nearness) {
    p.data = testutil::gaussian(dim, count, rng);
    p.batch_size = count;
  }
  p.validate();
  return p;
}

std::vector<Index> all_indices(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

// G_S recovered from rotated = -2 D (B^T G_S B) D
MatrixD euclidean_gradient(const SF& f, const MatrixD& rotated) {
  const VectorD di = f.eigvals().cwiseInverse();
  return -0.5 * f.basis() * (di.asDiagonal() * rotated * di.asDiagonal()) * f.basis().transpose();
}

}  // namespace

TEST_CASE("gop_residual") {
  Rng rng(51);
  SF f = random_factor(6, rng);
  CHECK(gop_residual(f, VectorD(VectorD::Zero(6)), 0.0).rotated().isZero(0));

  VectorD g = testutil::gaussian_vec(4, rng);
  SF id = SF::identity(4);
  MatrixD expect = g * g.transpose() - MatrixD::Identity(4, 4);
  CHECK((gop_residual(id, g, 1.0).rotated() - expect).norm() < 1e-15);

  for (Index dim : {3, 10, 20}) {
    SF s = random_factor(dim, rng);
    VectorD gg = testutil::gaussian_vec(dim, rng);
    MatrixD dense = s.basis().transpose() * (gg * gg.transpose() - s.reconstruct()) * s.basis();
    auto r = gop_residual(s, gg, 1.0);
    CHECK((r.rotated() - dense).norm() <= 1e-12 * dense.norm());
    CHECK(r.source() == ResidualSource::gop);
    MatrixD psd = r.rotated();
    psd.diagonal() += s.eigvals();
    CHECK(sym_eigendecompose(psd).values.minCoeff() >= -1e-10);
    CHECK((r.rotated() - r.rotated().transpose()).norm() <= 1e-12);
  }
}

TEST_CASE("spd_opt_residual vanishes at the optimum") {
  Rng rng(52);
  for (SpdKind kind : {SpdKind::log_det, SpdKind::metric_nearness}) {
    auto prob = make_problem(kind, 5, 30, rng);
    auto e = sym_eigendecompose<double>(prob.q.inverse());
    SF opt(e.basis, e.values);
    auto res = spd_opt_residual(opt, prob, all_indices(30));
    CHECK(res.residual.rotated().norm() <= 1e-10);
  }
}

TEST_CASE("spd_opt_residual matches finite differences of the loss") {
  Rng rng(53);
  for (SpdKind kind : {SpdKind::log_det, SpdKind::metric_nearness}) {
    auto prob = make_problem(kind, 6, 40, rng);
    SF f = random_factor(6, rng);
    std::vector<Index> batch = {1, 4, 7, 20, 33};
    auto res = spd_opt_residual(f, prob, batch);
    CHECK(res.loss == doctest::Approx(spd_loss(prob, f, batch)).epsilon(1e-12));
    const MatrixD gs = euclidean_gradient(f, res.residual.rotated());
    MatrixD e = testutil::gaussian(6, 6, rng);
    e = symmetrized(e);
    const double h = 1e-6;
    const MatrixD s = f.reconstruct();
    const double fd = (spd_loss(prob, MatrixD(s + h * e), batch) - spd_loss(prob, MatrixD(s - h * e), batch)) / (2 * h);
    CHECK(fd == doctest::Approx((gs.array() * e.array()).sum()).epsilon(1e-6));
  }
}

TEST_CASE("spd_opt_residual drives descent") {
  Rng rng(54);
  UpdateConfig cfg;
  cfg.beta2 = 1e-4;
  int decreased = 0, first_order_ok = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const SpdKind kind = t % 2 ? SpdKind::log_det : SpdKind::metric_nearness;
    auto prob = make_problem(kind, 10, 20, rng);
    SF f = random_factor(10, rng);
    auto batch = all_indices(20);
    auto res = spd_opt_residual(f, prob, batch);
    SF next = rgd_step_exact(f, res.residual, cfg);
    if (spd_loss(prob, next, batch) < res.loss) ++decreased;
    const MatrixD gs = euclidean_gradient(f, res.residual.rotated());
    const MatrixD ds = next.reconstruct() - f.reconstruct();
    if ((gs.array() * ds.array()).sum() <= 0.0) ++first_order_ok;
  }
  CHECK(decreased == trials);
  CHECK(first_order_ok == trials);
}

TEST_CASE("sample_batch") {
  Rng rng(55);
  auto b = sample_batch(50, 10, rng);
  CHECK(b.size() == 10);
  CHECK(std::adjacent_find(b.begin(), b.end()) == b.end());
  CHECK(std::is_sorted(b.begin(), b.end()));
  CHECK(b.back() < 50);
  CHECK_THROWS_AS(sample_batch(5, 6, rng), InvalidArgument);
}

TEST_CASE("rank utilities") {
  std::vector<double> vals = {3.0, 1.0, 2.0, 4.0};
  auto u = rank_utilities(vals);
  double sum = 0;
  for (double x : u) sum += x;
  CHECK(std::abs(sum) < 1e-15);
  CHECK(u[1] > u[2]);
  CHECK(u[2] >= u[0]);
  CHECK(u[0] >= u[3]);
  // permutation consistency
  std::vector<double> perm = {4.0, 2.0, 3.0, 1.0};
  auto up = rank_utilities(perm);
  CHECK(up[0] == u[3]);
  CHECK(up[1] == u[2]);
  CHECK(up[2] == u[0]);
  CHECK(up[3] == u[1]);
  // ties share utility
  auto ut = rank_utilities({1.0, 1.0, 5.0, 6.0});
  CHECK(ut[0] == ut[1]);
}

TEST_CASE("nes_estimate: constant objective gives a centered residual") {
  NesConfig cfg;
  cfg.pop_size = 8;
  cfg.antithetic = false;
  cfg.fitness_shaping = FitnessShaping::raw;
  Rng rng(56);
  SF f = SF::identity(3);
  const int reps = 10000;
  MatrixD sum = MatrixD::Zero(3, 3), sumsq = MatrixD::Zero(3, 3);
  Objective<double> constant = [](const VectorD&) { return 2.5; };
  for (int r = 0; r < reps; ++r) {
    auto est = nes_estimate(f, VectorD(VectorD::Zero(3)), constant, cfg, rng);
    sum += est.residual.rotated();
    sumsq += est.residual.rotated().array().square().matrix();
  }
  const MatrixD mean = sum / reps;
  const MatrixD var = sumsq / reps - mean.array().square().matrix();
  const MatrixD se = (var / reps).cwiseSqrt();
  CHECK((mean.cwiseAbs().array() <= 3.0 * se.array()).all());
}

TEST_CASE("nes_estimate: Stein identity recovers a quadratic's Hessian") {
  MatrixD a(3, 3);
  a << 3, 0.5, 0, 0.5, 2, -0.4, 0, -0.4, 1;
  Objective<double> quad = [&](const VectorD& w) { return 0.5 * w.dot(a * w); };
  NesConfig cfg;
  cfg.pop_size = 100000;
  cfg.antithetic = false;
  cfg.fitness_shaping = FitnessShaping::raw;
  cfg.seed = 3;
  auto est = nes_estimate(SF::identity(3), VectorD(VectorD::Zero(3)), quad, cfg);
  CHECK((est.residual.rotated() - a).norm() <= 0.1 * a.norm());
  CHECK(est.evaluations == 100000);
}

TEST_CASE("nes_estimate: antithetic pairs cancel for even objectives") {
  Objective<double> even = [](const VectorD& w) { return w.squaredNorm() + std::cos(w(0)); };
  Rng rng(57);
  SF f = random_factor(4, rng);
  for (FitnessShaping shaping : {FitnessShaping::raw, FitnessShaping::ranks}) {
    NesConfig cfg;
    cfg.pop_size = 12;
    cfg.fitness_shaping = shaping;
    cfg.seed = 9;
    auto est = nes_estimate(f, VectorD(VectorD::Zero(4)), even, cfg);
    CHECK(est.g_hat.isZero(0));
  }
}

TEST_CASE("nes_estimate: determinism and descent direction") {
  Objective<double> sphere = [](const VectorD& w) { return (w.array() - 1.0).square().sum(); };
  NesConfig cfg;
  cfg.pop_size = 20;
  cfg.seed = 11;
  SF f = SF::identity(5);
  VectorD mu = VectorD::Zero(5);
  auto a = nes_estimate(f, mu, sphere, cfg);
  auto b = nes_estimate(f, mu, sphere, cfg);
  CHECK(a.g_hat == b.g_hat);
  CHECK(a.residual.rotated() == b.residual.rotated());
  CHECK(a.residual.source() == ResidualSource::reinforce);
  // averaged over generations the estimate points along the true gradient (-2 at mu = 0)
  Rng rng(58);
  VectorD acc = VectorD::Zero(5);
  for (int t = 0; t < 200; ++t) acc += nes_estimate(f, mu, sphere, cfg, rng).g_hat;
  CHECK(acc.dot(VectorD::Constant(5, -2.0)) > 0.9 * acc.norm() * std::sqrt(20.0));
}

TEST_CASE("nes_estimate: non-finite objective") {
  Objective<double> bad = [](const VectorD& w) { return w(0) > 0 ? std::nan("") : 1.0; };
  NesConfig cfg;
  cfg.pop_size = 10;
  try {
    nes_estimate(SF::identity(2), VectorD(VectorD::Zero(2)), bad, cfg);
    FAIL("expected EvaluationError");
  } catch (const EvaluationError& e) {
    CHECK(e.point().size() == 2);
    CHECK(e.point()[0] > 0.0);
  }
  NesConfig odd;
  odd.pop_size = 7;
  CHECK_THROWS_AS(odd.validate(3), InvalidArgument);
  CHECK(NesConfig::default_pop_size(10) == 10);
  CHECK(NesConfig::default_pop_size(20) == 12);
}

TEST_CASE("test functions") {
  for (Index n : {2, 5, 10}) {
    VectorD zero = VectorD::Zero(n);
    CHECK(std::abs(test_function(TestFunction::ackley, zero)) <= 1e-12);
    CHECK(std::abs(test_function(TestFunction::griewank, zero)) <= 1e-12);
    CHECK(std::abs(test_function(TestFunction::bohachevsky, zero)) <= 1e-12);
    CHECK(std::abs(test_function(TestFunction::schaffer, zero)) <= 1e-12);
    CHECK(std::abs(test_function(TestFunction::rosenbrock, VectorD(VectorD::Ones(n)))) <= 1e-12);
  }
  VectorD two = VectorD::Zero(2);
  CHECK(test_function(TestFunction::rosenbrock, two) == doctest::Approx(1.0));
  VectorD p(2);
  p << 1.0, 2.0;
  // hand values
  CHECK(test_function(TestFunction::rosenbrock, p) == doctest::Approx(100.0));
  CHECK(test_function(TestFunction::bohachevsky, p) ==
        doctest::Approx(1 + 8 - 0.3 * std::cos(3 * M_PI) - 0.4 * std::cos(8 * M_PI) + 0.7));
  CHECK(test_function(TestFunction::griewank, p) ==
        doctest::Approx(5.0 / 4000 - std::cos(1.0) * std::cos(2.0 / std::sqrt(2.0)) + 1));
  CHECK(test_function(TestFunction::schaffer, p) ==
        doctest::Approx(std::pow(5.0, 0.25) * (std::pow(std::sin(50 * std::pow(5.0, 0.1)), 2) + 1)));
  CHECK(test_function(TestFunction::ackley, p) > 0.0);
  CHECK(parse_test_function("griewank") == TestFunction::griewank);
  CHECK_THROWS_AS(parse_test_function("sphere"), InvalidArgument);
  CHECK_THROWS_AS(test_function(TestFunction::rosenbrock, VectorD(VectorD::Zero(1))), InvalidArgument);
}
