#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spectral/harness.hpp"
#include "test_util.hpp"

using namespace spectral;

namespace {

std::vector<TraceRecord> rows_for(const std::vector<TraceRecord>& all, const std::string& method,
                                  const std::string& metric) {
  std::vector<TraceRecord> out;
  for (const auto& r : all)
    if (r.method == method && r.metric == metric) out.push_back(r);
  return out;
}

// Values only; wall time is not reproducible.
void check_same_values(const std::vector<TraceRecord>& a, const std::vector<TraceRecord>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].method == b[i].method);
    CHECK(a[i].seed == b[i].seed);
    CHECK(a[i].iteration == b[i].iteration);
    CHECK(a[i].metric == b[i].metric);
    CHECK(a[i].value == b[i].value);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generate_random_spd") {
  CHECK(generate_random_spd(7, 1.0, 3) == MatrixD::Identity(7, 7));
  CHECK(generate_random_spd(30, 100.0, 9) == generate_random_spd(30, 100.0, 9));
  CHECK(generate_random_spd(30, 100.0, 9) != generate_random_spd(30, 100.0, 10));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const MatrixD s = generate_random_spd(100, 100.0, seed);
    Eigen::LLT<MatrixD> llt(s);
    REQUIRE(llt.info() == Eigen::Success);
    if (seed < 5) {
      const VectorD ev = sym_eigendecompose(s).values;
      CHECK(ev.minCoeff() >= 0.1 * (1 - 1e-10));
      CHECK(ev.maxCoeff() <= 10.0 * (1 + 1e-10));
    }
  }
  CHECK_THROWS_AS(generate_random_spd(5, 0.5, 0), InvalidArgument);
}

TEST_CASE("rel_frobenius") {
  Rng rng(1);
  const MatrixD a = testutil::random_spd(4, rng), b = testutil::random_spd(4, rng);
  CHECK(rel_frobenius(a, a) == 0.0);
  CHECK(rel_frobenius(MatrixD::Identity(2, 2), MatrixD(2.0 * MatrixD::Identity(2, 2))) ==
        doctest::Approx(1.0).epsilon(1e-15));
  CHECK(rel_frobenius(MatrixD(3.0 * a), MatrixD(3.0 * b)) == doctest::Approx(rel_frobenius(a, b)).epsilon(1e-14));
  CHECK_THROWS_AS(rel_frobenius(MatrixD::Zero(2, 2), MatrixD::Identity(2, 2)), InvalidArgument);
}

TEST_CASE("wasserstein2_spd") {
  Rng rng(2);
  const MatrixD a = testutil::random_spd(5, rng);
  CHECK(wasserstein2_spd(a, a) <= 1e-6);
  MatrixD d1 = MatrixD::Zero(2, 2), d2 = MatrixD::Zero(2, 2);
  d1.diagonal() << 1, 4;
  d2.diagonal() << 4, 1;
  CHECK(wasserstein2_spd(d1, d2) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  for (int t = 0; t < 200; ++t) {
    const MatrixD x = testutil::random_spd(5, rng), y = testutil::random_spd(5, rng), z = testutil::random_spd(5, rng);
    const double xy = wasserstein2_spd(x, y), yz = wasserstein2_spd(y, z), xz = wasserstein2_spd(x, z);
    CHECK(xz <= xy + yz + 1e-9);
    CHECK(xy == doctest::Approx(wasserstein2_spd(y, x)).epsilon(1e-8));
  }
  MatrixD bad = MatrixD::Identity(2, 2);
  bad(1, 1) = -1;
  CHECK_THROWS_AS(wasserstein2_spd(bad, MatrixD(MatrixD::Identity(2, 2))), DomainError);
}

TEST_CASE("spec json round trip and validation") {
  for (auto kind : {ExperimentKind::fixed_point_full, ExperimentKind::iterate_full, ExperimentKind::fixed_point_kron,
                    ExperimentKind::iterate_kron, ExperimentKind::spd_opt, ExperimentKind::nes,
                    ExperimentKind::train_demo, ExperimentKind::cayley_bench}) {
    const ExperimentSpec s = default_spec(kind);
    CHECK_NOTHROW(s.validate());
    const nlohmann::json j = spec_to_json(s);
    CHECK(spec_to_json(spec_from_json(j)) == j);
  }
  nlohmann::json j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["methods"] = {"kron_exact"};
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["steps"] = 0;
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["seeds"] = nlohmann::json::array();
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["bogus"] = 1;
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["kind"] = "nope";
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::fixed_point_full));
  j["config"]["gamma"] = 0.5;
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
  j = spec_to_json(default_spec(ExperimentKind::nes));
  j["nes"]["function"] = "sphere";
  CHECK_THROWS_AS(spec_from_json(j), ConfigError);
}

TEST_CASE("traces: csv and json serialization") {
  CHECK(format_traces({}, TraceFormat::csv) == std::string(kCsvHeader) + "\n");
  CHECK(parse_traces(format_traces({}, TraceFormat::json), TraceFormat::json).empty());
  std::vector<TraceRecord> recs = {
      {"exp", "spectral", 3, 0, "rel_frobenius", 0.1, 0.0},
      {"exp", "spectral", 3, 7, "rel_frobenius", 1.0 / 3.0, 1.25e-3},
      {"exp", "default_ema", 18446744073709551615ULL, 123456, "wasserstein2", -2.5e-300, 7.0},
  };
  for (auto fmt : {TraceFormat::csv, TraceFormat::json}) {
    const std::string text = format_traces(recs, fmt);
    CHECK(parse_traces(text, fmt) == recs);
    CHECK(format_traces(recs, fmt) == text);
  }
  CHECK(format_traces(recs, TraceFormat::csv).substr(0, std::string(kCsvHeader).size()) == kCsvHeader);
  CHECK_THROWS_AS(parse_traces("wrong,header\n", TraceFormat::csv), InvalidArgument);
  std::vector<TraceRecord> bad = {{"a,b", "spectral", 0, 0, "x", 1.0, 0.0}};
  CHECK_THROWS_AS(format_traces(bad, TraceFormat::csv), InvalidArgument);
}

TEST_CASE("emit_traces writes traces and a metadata sidecar") {
  const auto dir = std::filesystem::temp_directory_path() / "spectral_harness_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "t.csv").string();
  std::vector<TraceRecord> recs = {{"exp", "spectral", 1, 0, "loss", 2.0, 0.5}};
  TraceMetadata meta;
  meta.spec_hash = "abc";
  meta.seeds = {1, 2};
  meta.scalar_bits = 32;
  meta.sequence_hashes = {"h1", "h2"};
  emit_traces(recs, path, TraceFormat::csv, meta);
  CHECK(parse_traces(read_file(path), TraceFormat::csv) == recs);
  const auto m = nlohmann::json::parse(read_file(path + ".meta.json"));
  CHECK(m.at("spec_hash") == "abc");
  CHECK(m.at("seeds") == nlohmann::json({1, 2}));
  CHECK(m.at("scalar_bits") == 32);
  CHECK(m.at("rng") == "splitmix64-counter");
  CHECK(m.at("sequence_hashes").size() == 2);
  try {
    emit_traces(recs, (dir / "missing" / "t.csv").string(), TraceFormat::csv, meta);
    FAIL("expected an I/O error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("iterate_full: default_ema against itself is zero at every k") {
  ExperimentSpec s = default_spec(ExperimentKind::iterate_full);
  s.n = 12;
  s.steps = 200;
  s.record_every = 1;
  s.w2_every = 10;
  s.methods = {Method::default_ema};
  const RunResult r = run_experiment(s);
  const auto rf = rows_for(r.records, "default_ema", "rel_frobenius");
  CHECK(rf.size() == 201);
  for (const auto& row : rf) CHECK(row.value == 0.0);
  for (const auto& row : rows_for(r.records, "default_ema", "wasserstein2")) CHECK(row.value <= 1e-6);
}

TEST_CASE("fixed_point_full: spectral tracks the default scheme at dim 100") {
  ExperimentSpec s = default_spec(ExperimentKind::fixed_point_full);
  s.config.beta2 = 0.01;
  s.steps = 5000;
  s.record_every = 1000;
  s.seeds = {0};
  const RunResult r = run_experiment(s);
  REQUIRE(r.failed_cells == 0);
  const double spec_final = final_value(r.records, "spectral", 0, "rel_frobenius");
  const double ema_final = final_value(r.records, "default_ema", 0, "rel_frobenius");
  CHECK(spec_final <= 1.10 * ema_final);
  REQUIRE(r.meta.sequence_hashes.size() == 1);
}

TEST_CASE("shared gradient sequence and reproducibility") {
  ExperimentSpec s = default_spec(ExperimentKind::iterate_full);
  s.n = 10;
  s.steps = 100;
  s.seeds = {4, 5};
  s.methods = {Method::spectral, Method::spectral_truncated, Method::default_ema};
  s.config.exp_mode = ExpMode::exact;
  const RunResult a = run_experiment(s);
  const RunResult b = run_experiment(s);
  check_same_values(a.records, b.records);
  CHECK(a.meta.sequence_hashes == b.meta.sequence_hashes);
  CHECK(a.meta.sequence_hashes.size() == 2);
  CHECK(a.meta.sequence_hashes[0] != a.meta.sequence_hashes[1]);
  CHECK(a.meta.spec_hash == b.meta.spec_hash);

  // ordering is (method, seed, iteration)
  for (std::size_t i = 1; i < a.records.size(); ++i) {
    const auto& p = a.records[i - 1];
    const auto& q = a.records[i];
    if (p.method == q.method && p.seed == q.seed) CHECK(p.iteration <= q.iteration);
  }

  // thread count does not change the output
  setenv("SPECTRAL_THREADS", "3", 1);
  const RunResult c = run_experiment(s);
  setenv("SPECTRAL_THREADS", "1", 1);
  const RunResult d = run_experiment(s);
  unsetenv("SPECTRAL_THREADS");
  check_same_values(c.records, d.records);
  check_same_values(a.records, c.records);
}

TEST_CASE("numerical failure is recorded and other cells continue") {
  ExperimentSpec s = default_spec(ExperimentKind::fixed_point_full);
  s.n = 6;
  s.steps = 20;
  s.config.beta2 = 1.0;  // gamma * beta2 = 1 is rejected by the truncated GOP step
  s.methods = {Method::spectral_truncated, Method::spectral};
  const RunResult r = run_experiment(s);
  CHECK(r.cells == 2);
  CHECK(r.failed_cells == 1);
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures[0].find("spectral_truncated") != std::string::npos);
  CHECK(rows_for(r.records, "spectral_truncated", kFailureMetric).size() == 1);
  CHECK(rows_for(r.records, "spectral", "rel_frobenius").size() > 1);
}

TEST_CASE("spd_opt: log_det loss falls below 1e-3 of its initial value within 2000 steps") {
  ExperimentSpec s = default_spec(ExperimentKind::spd_opt);
  s.steps = 2000;
  s.record_every = 100;
  const RunResult r = run_experiment(s);
  REQUIRE(r.failed_cells == 0);
  const auto rows = rows_for(r.records, "spectral", "eval_loss");
  REQUIRE(rows.front().iteration == 0);
  CHECK(rows.back().value < 1e-3 * rows.front().value);
  CHECK(final_value(r.records, "spectral", 0, "min_eigval") > 0);
}

TEST_CASE("kron experiments record determinant defects") {
  ExperimentSpec s = default_spec(ExperimentKind::iterate_kron);
  s.n = 3;
  s.m = 4;
  s.steps = 200;
  s.methods = {Method::kron_exact, Method::kron_truncated, Method::kron_projection, Method::default_ema};
  const RunResult r = run_experiment(s);
  CHECK(r.failed_cells == 0);
  CHECK(final_value(r.records, "kron_exact", 0, "det_defect_max") <= 1e-9);
  CHECK(final_value(r.records, "kron_truncated", 0, "det_defect_max") <= 1e-9);
  CHECK(final_value(r.records, "default_ema", 0, "rel_frobenius") == 0.0);
  for (const char* m : {"kron_exact", "kron_truncated", "kron_projection"})
    CHECK(final_value(r.records, m, 0, "rel_frobenius") < 1.0);
}

TEST_CASE("nes: deterministic and reaches a Rosenbrock target") {
  ExperimentSpec s = default_spec(ExperimentKind::nes);
  s.config.beta2 = 0.5;
  s.nes.init_box = 2.0;
  s.nes.target = 1e-2;
  s.record_every = 50;
  const RunResult a = run_experiment(s);
  const RunResult b = run_experiment(s);
  check_same_values(a.records, b.records);
  CHECK(final_value(a.records, "nes_spectral", 0, "loss") < 1e-2);
  CHECK(final_value(a.records, "nes_spectral", 0, "evaluations") <= 30000);
}

TEST_CASE("cayley_bench rows") {
  ExperimentSpec s = default_spec(ExperimentKind::cayley_bench);
  s.bench.dims = {5, 20};
  const RunResult r = run_experiment(s);
  CHECK(r.failed_cells == 0);
  for (Index d : {5, 20}) {
    bool seen = false;
    for (const auto& row : r.records)
      if (row.method == "spectral_truncated" && row.metric == "map_error" && row.iteration == d) {
        seen = true;
        CHECK(row.value < 1e-7);  // truncation error is O(||N||^9) with ||N|| = 0.1
      }
    CHECK(seen);
  }
}

TEST_CASE("train_demo: uniform initial loss and determinism") {
  ExperimentSpec s = default_spec(ExperimentKind::train_demo);
  s.steps = 2;
  const RunResult a = run_experiment(s);
  const RunResult b = run_experiment(s);
  REQUIRE(a.failed_cells == 0);
  const auto loss_a = rows_for(a.records, "kron_truncated", "train_loss");
  const auto loss_b = rows_for(b.records, "kron_truncated", "train_loss");
  REQUIRE(loss_a.size() == 3);
  CHECK(loss_a[0].iteration == 0);
  CHECK(std::abs(loss_a[0].value - std::log(10.0)) <= 0.05 * std::log(10.0));
  for (std::size_t i = 0; i < loss_a.size(); ++i) CHECK(std::abs(loss_a[i].value - loss_b[i].value) <= 1e-12);
  CHECK(loss_a.back().value < loss_a.front().value);
}

TEST_CASE("f32 precision runs validate-full without non-finite values") {
  ExperimentSpec s = default_spec(ExperimentKind::fixed_point_full);
  s.n = 20;
  s.steps = 300;
  s.precision = Precision::f32;
  s.methods = {Method::spectral, Method::spectral_truncated, Method::default_ema};
  const RunResult r = run_experiment(s);
  CHECK(r.meta.scalar_bits == 32);
  CHECK(r.failed_cells == 0);
  for (const auto& row : r.records) CHECK(std::isfinite(row.value));
}
