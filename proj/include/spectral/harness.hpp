#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spectral/curvature.hpp"
#include "spectral/linalg.hpp"
#include "spectral/spectral_factor.hpp"

namespace spectral {

// ---------------------------------------------------------------- metrics

// Q Diag(spectrum) Q^T with Haar Q and a log-uniform spectrum on [cond^{-1/2}, cond^{1/2}].
MatrixD generate_random_spd(Index dim, double cond, std::uint64_t seed);

// ||Sa - Sb||_F / ||Sa||_F
double rel_frobenius(const MatrixD& sa, const MatrixD& sb);

// Bures / Gaussian W2 distance between zero-mean Gaussians with covariances A and B.
double wasserstein2_spd(const MatrixD& a, const MatrixD& b);

// ---------------------------------------------------------------- spec

enum class ExperimentKind {
  fixed_point_full,
  iterate_full,
  fixed_point_kron,
  iterate_kron,
  spd_opt,
  nes,
  train_demo,
  cayley_bench,
};

enum class Method {
  spectral,
  spectral_truncated,
  default_ema,
  kron_exact,
  kron_truncated,
  kron_projection,
  nes_spectral,
};

enum class Precision { f64, f32 };

std::string to_string(ExperimentKind k);
std::string to_string(Method m);
std::string to_string(Precision p);
ExperimentKind parse_kind(const std::string& s);
Method parse_method(const std::string& s);
Precision parse_precision(const std::string& s);

struct SpdSettings {
  SpdKind kind = SpdKind::log_det;
  Index num_data = 1000;
  Index batch_size = 100;
};

struct NesSettings {
  TestFunction function = TestFunction::rosenbrock;
  NesConfig config;
  double beta1 = 0.0;          // mean step; 0 selects the population size
  double init_box = 0.0;       // mu0 ~ U[-box, box]^d when > 0
  double init_distance = 0.0;  // otherwise mu0 = optimum + distance * random unit vector
  double init_sigma = 1.0;     // S0 = I / sigma^2
  Index max_evaluations = 30000;
  double target = 0.0;  // stop once l(mu) < target when > 0
};

struct TrainSettings {
  Index input_dim = 32;
  Index hidden = 64;
  Index classes = 10;
  Index clusters_per_class = 3;
  Index samples = 2000;
  Index batch_size = 100;
  double separation = 6.0;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double floor_lr = 0.5;  // step size of the logistic-regression floor
};

struct BenchSettings {
  std::vector<Index> dims = {10, 50, 100};
  double arg_norm = 0.1;  // ||N||_F of the random skew argument
  Index repeats = 5;
};

struct ExperimentSpec {
  std::string id = "experiment";
  ExperimentKind kind = ExperimentKind::fixed_point_full;
  Index n = 100;  // full dim, Kronecker rows, SPD d, or NES d
  Index m = 11;   // Kronecker cols
  Index steps = 1000;
  std::vector<std::uint64_t> seeds = {0};
  std::vector<Method> methods = {Method::spectral, Method::default_ema};
  UpdateConfig config;
  double cond = 100.0;
  Index record_every = 1;       // rel_frobenius / loss cadence
  Index w2_every = 0;           // wasserstein2 cadence; 0 records it at the last step only
  Precision precision = Precision::f64;
  SpdSettings spd;
  NesSettings nes;
  TrainSettings train;
  BenchSettings bench;

  void validate() const;  // throws ConfigError
};

// Defaults per experiment kind.
ExperimentSpec default_spec(ExperimentKind kind);

ExperimentSpec spec_from_json(const nlohmann::json& j);  // throws ConfigError
nlohmann::json spec_to_json(const ExperimentSpec& spec);

// ---------------------------------------------------------------- traces

struct TraceRecord {
  std::string experiment;
  std::string method;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  std::string metric;
  double value = 0.0;
  double wall_time_s = 0.0;

  bool operator==(const TraceRecord& o) const = default;
};

enum class TraceFormat { csv, json };
TraceFormat parse_format(const std::string& s);

inline constexpr const char* kCsvHeader = "experiment,method,seed,iteration,metric,value,wall_time_s";
inline constexpr const char* kFailureMetric = "failure";

std::string format_traces(const std::vector<TraceRecord>& records, TraceFormat format);
std::vector<TraceRecord> parse_traces(const std::string& text, TraceFormat format);

struct TraceMetadata {
  std::string spec_hash;
  std::vector<std::uint64_t> seeds;
  int scalar_bits = 64;
  std::string rng = Rng::kName;
  std::vector<std::string> sequence_hashes;  // one per seed for shared-sequence experiments
};

// Writes records to path and metadata to path + ".meta.json". Throws Error with path context on I/O failure.
void emit_traces(const std::vector<TraceRecord>& records, const std::string& path, TraceFormat format,
                 const TraceMetadata& meta);

std::string fnv1a_hex(const std::string& bytes);

// ---------------------------------------------------------------- runs

struct RunResult {
  std::vector<TraceRecord> records;
  TraceMetadata meta;
  Index cells = 0;
  Index failed_cells = 0;
  std::vector<std::string> failures;  // "method seed N: reason" per failed cell
};

// Runs every (method, seed) cell, possibly in parallel (SPECTRAL_THREADS), and
// merges the rows ordered by (method, seed, iteration).
RunResult run_experiment(const ExperimentSpec& spec);

// Thread count from SPECTRAL_THREADS, else the hardware concurrency.
unsigned harness_threads();

// Two-layer perceptron demo; one cell per (method, seed) with method kron_truncated.
RunResult train_demo(const ExperimentSpec& spec);

// Final recorded value of (method, seed, metric); NaN when absent.
double final_value(const std::vector<TraceRecord>& records, const std::string& method, std::uint64_t seed,
                   const std::string& metric);

// ---------------------------------------------------------------- CLI

// Entry point shared by the executable and the tests; returns the exit code.
int run_cli(int argc, char** argv);

}  // namespace spectral
