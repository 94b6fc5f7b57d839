#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <thread>

#include "spectral/baselines.hpp"
#include "spectral/harness.hpp"
#include "spectral/kron_factor.hpp"
#include "spectral/spectral_factor.hpp"
#include "parallel.hpp"

namespace spectral {

// ---------------------------------------------------------------- names

namespace {

template <typename E>
struct NameTable {
  E value;
  const char* name;
};

constexpr NameTable<ExperimentKind> kKinds[] = {
    {ExperimentKind::fixed_point_full, "fixed_point_full"},
    {ExperimentKind::iterate_full, "iterate_full"},
    {ExperimentKind::fixed_point_kron, "fixed_point_kron"},
    {ExperimentKind::iterate_kron, "iterate_kron"},
    {ExperimentKind::spd_opt, "spd_opt"},
    {ExperimentKind::nes, "nes"},
    {ExperimentKind::train_demo, "train_demo"},
    {ExperimentKind::cayley_bench, "cayley_bench"},
};

constexpr NameTable<Method> kMethods[] = {
    {Method::spectral, "spectral"},
    {Method::spectral_truncated, "spectral_truncated"},
    {Method::default_ema, "default_ema"},
    {Method::kron_exact, "kron_exact"},
    {Method::kron_truncated, "kron_truncated"},
    {Method::kron_projection, "kron_projection"},
    {Method::nes_spectral, "nes_spectral"},
};

template <typename E, std::size_t N>
std::string name_of(const NameTable<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E parse_name(const NameTable<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(ExperimentKind k) { return name_of(kKinds, k); }
std::string to_string(Method m) { return name_of(kMethods, m); }
std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }
ExperimentKind parse_kind(const std::string& s) { return parse_name(kKinds, s, "experiment kind"); }
Method parse_method(const std::string& s) { return parse_name(kMethods, s, "method"); }
Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

// ---------------------------------------------------------------- spec

namespace {

bool allowed(ExperimentKind kind, Method m) {
  switch (kind) {
    case ExperimentKind::fixed_point_full:
    case ExperimentKind::iterate_full:
    case ExperimentKind::cayley_bench:
      return m == Method::spectral || m == Method::spectral_truncated || m == Method::default_ema;
    case ExperimentKind::fixed_point_kron:
    case ExperimentKind::iterate_kron:
      return m == Method::kron_exact || m == Method::kron_truncated || m == Method::kron_projection ||
             m == Method::default_ema;
    case ExperimentKind::spd_opt:
      return m == Method::spectral;
    case ExperimentKind::nes:
      return m == Method::nes_spectral;
    case ExperimentKind::train_demo:
      return m == Method::kron_truncated;
  }
  return false;
}

bool is_kron(ExperimentKind k) { return k == ExperimentKind::fixed_point_kron || k == ExperimentKind::iterate_kron; }

}  // namespace

void ExperimentSpec::validate() const {
  if (id.empty() || id.find_first_of(",\"\n\r") != std::string::npos)
    throw ConfigError("spec: id must be non-empty and free of CSV metacharacters");
  if (steps < 1) throw ConfigError("spec: steps must be >= 1");
  if (seeds.empty()) throw ConfigError("spec: at least one seed is required");
  if (methods.empty()) throw ConfigError("spec: at least one method is required");
  if (n < 1 || (is_kron(kind) && m < 1)) throw ConfigError("spec: dimensions must be >= 1");
  if (record_every < 1) throw ConfigError("spec: record_every must be >= 1");
  if (w2_every < 0) throw ConfigError("spec: w2_every must be >= 0");
  if (!(cond >= 1.0)) throw ConfigError("spec: cond must be >= 1");
  for (Method mt : methods)
    if (!allowed(kind, mt))
      throw ConfigError("spec: method " + to_string(mt) + " does not apply to kind " + to_string(kind));
  try {
    config.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("spec: ") + e.what());
  }
  if (kind == ExperimentKind::spd_opt && spd.kind == SpdKind::metric_nearness &&
      (spd.batch_size < 1 || spd.batch_size > spd.num_data))
    throw ConfigError("spec: spd.batch_size must lie in [1, num_data]");
  if (kind == ExperimentKind::nes) {
    if (n < 2) throw ConfigError("spec: nes needs n >= 2");
    try {
      nes.config.validate(n);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("spec: ") + e.what());
    }
    if (!(nes.init_sigma > 0)) throw ConfigError("spec: nes.init_sigma must be > 0");
    if (nes.max_evaluations < 1) throw ConfigError("spec: nes.max_evaluations must be >= 1");
  }
  if (kind == ExperimentKind::train_demo) {
    const auto& t = train;
    if (t.input_dim < 1 || t.hidden < 1 || t.classes < 2 || t.clusters_per_class < 1 || t.samples < t.classes || t.batch_size < 1 ||
        t.batch_size > t.samples)
      throw ConfigError("spec: invalid train settings");
    if (!(t.lr > 0) || !(t.momentum >= 0 && t.momentum < 1) || !(t.weight_decay >= 0))
      throw ConfigError("spec: invalid train step sizes");
  }
  if (kind == ExperimentKind::cayley_bench) {
    if (bench.dims.empty() || bench.repeats < 1) throw ConfigError("spec: bench needs dims and repeats >= 1");
    for (Index d : bench.dims)
      if (d < 1) throw ConfigError("spec: bench dims must be >= 1");
    if (!(bench.arg_norm > 0 && bench.arg_norm < 1)) throw ConfigError("spec: bench.arg_norm must lie in (0, 1)");
  }
}

ExperimentSpec default_spec(ExperimentKind kind) {
  ExperimentSpec s;
  s.kind = kind;
  s.id = to_string(kind);
  switch (kind) {
    case ExperimentKind::fixed_point_full:
      s.n = 100;
      s.steps = 5000;
      s.config.beta2 = 0.005;
      s.methods = {Method::spectral, Method::default_ema};
      s.record_every = 50;
      break;
    case ExperimentKind::iterate_full:
      s.n = 100;
      s.steps = 2000;
      s.config.beta2 = 0.01;
      s.methods = {Method::spectral};
      s.record_every = 20;
      break;
    case ExperimentKind::fixed_point_kron:
    case ExperimentKind::iterate_kron:
      s.n = 9;
      s.m = 11;
      s.steps = kind == ExperimentKind::fixed_point_kron ? 5000 : 2000;
      s.config.beta2 = 0.005;
      s.methods = {Method::kron_exact, Method::kron_truncated, Method::kron_projection};
      s.record_every = 50;
      break;
    case ExperimentKind::spd_opt:
      s.n = 60;
      s.steps = 5000;
      s.config.beta2 = 0.01;
      s.methods = {Method::spectral};
      s.record_every = 50;
      break;
    case ExperimentKind::nes:
      s.n = 10;
      s.steps = 100000;
      s.methods = {Method::nes_spectral};
      s.config.beta2 = 0.05;
      s.nes.init_distance = 2.0;
      break;
    case ExperimentKind::train_demo:
      s.n = 0;
      s.steps = 100;
      s.methods = {Method::kron_truncated};
      s.config.beta2 = 0.01;
      s.config.gamma = 1.0;
      s.config.damping = 1e-6;
      s.config.exp_mode = ExpMode::first_order;
      s.config.cayley_mode = CayleyMode::truncated;
      s.config.rotation_beta2 = 0.01;
      s.config.clip_norm = 1.0;
      s.n = 1;
      break;
    case ExperimentKind::cayley_bench:
      s.n = 1;
      s.steps = 1;
      s.methods = {Method::spectral, Method::spectral_truncated};
      break;
  }
  return s;
}

namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(std::string("spec: unknown key '") + it.key() + "' in " + where);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

UpdateConfig config_from_json(const json& j, UpdateConfig c) {
  reject_unknown(j,
                 {"beta1", "beta2", "gamma", "root", "damping", "gap_rel_tol", "cayley_mode", "exp_mode", "clip_norm",
                  "rotation_beta2"},
                 "config");
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "gamma", c.gamma);
  read(j, "root", c.root);
  read(j, "damping", c.damping);
  read(j, "gap_rel_tol", c.gap_rel_tol);
  if (j.contains("cayley_mode")) {
    const auto s = j.at("cayley_mode").get<std::string>();
    if (s != "exact" && s != "truncated") throw ConfigError("spec: cayley_mode must be exact or truncated");
    c.cayley_mode = s == "exact" ? CayleyMode::exact : CayleyMode::truncated;
  }
  if (j.contains("exp_mode")) {
    const auto s = j.at("exp_mode").get<std::string>();
    if (s != "exact" && s != "first_order") throw ConfigError("spec: exp_mode must be exact or first_order");
    c.exp_mode = s == "exact" ? ExpMode::exact : ExpMode::first_order;
  }
  if (j.contains("clip_norm"))
    c.clip_norm = j.at("clip_norm").is_null() ? std::nullopt : std::optional<double>(j.at("clip_norm").get<double>());
  if (j.contains("rotation_beta2"))
    c.rotation_beta2 = j.at("rotation_beta2").is_null() ? std::nullopt
                                                        : std::optional<double>(j.at("rotation_beta2").get<double>());
  return c;
}

json config_to_json(const UpdateConfig& c) {
  json j = {{"beta1", c.beta1},
            {"beta2", c.beta2},
            {"gamma", c.gamma},
            {"root", c.root},
            {"damping", c.damping},
            {"gap_rel_tol", c.gap_rel_tol},
            {"cayley_mode", c.cayley_mode == CayleyMode::exact ? "exact" : "truncated"},
            {"exp_mode", c.exp_mode == ExpMode::exact ? "exact" : "first_order"}};
  j["clip_norm"] = c.clip_norm ? json(*c.clip_norm) : json(nullptr);
  j["rotation_beta2"] = c.rotation_beta2 ? json(*c.rotation_beta2) : json(nullptr);
  return j;
}

}  // namespace

ExperimentSpec spec_from_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("spec: expected a JSON object");
    reject_unknown(j,
                   {"id", "kind", "n", "m", "steps", "seeds", "methods", "config", "cond", "record_every", "w2_every",
                    "precision", "spd", "nes", "train", "bench"},
                   "spec");
    ExperimentSpec s = default_spec(parse_kind(j.value("kind", std::string("fixed_point_full"))));
    read(j, "id", s.id);
    read(j, "n", s.n);
    read(j, "m", s.m);
    read(j, "steps", s.steps);
    read(j, "seeds", s.seeds);
    if (j.contains("methods")) {
      s.methods.clear();
      for (const auto& mj : j.at("methods")) s.methods.push_back(parse_method(mj.get<std::string>()));
    }
    if (j.contains("config")) s.config = config_from_json(j.at("config"), s.config);
    read(j, "cond", s.cond);
    read(j, "record_every", s.record_every);
    read(j, "w2_every", s.w2_every);
    if (j.contains("precision")) s.precision = parse_precision(j.at("precision").get<std::string>());
    if (j.contains("spd")) {
      const json& p = j.at("spd");
      reject_unknown(p, {"kind", "num_data", "batch_size"}, "spd");
      if (p.contains("kind")) {
        const auto k = p.at("kind").get<std::string>();
        if (k != "log_det" && k != "metric_nearness") throw ConfigError("spec: spd.kind must be log_det or metric_nearness");
        s.spd.kind = k == "log_det" ? SpdKind::log_det : SpdKind::metric_nearness;
      }
      read(p, "num_data", s.spd.num_data);
      read(p, "batch_size", s.spd.batch_size);
    }
    if (j.contains("nes")) {
      const json& p = j.at("nes");
      reject_unknown(p,
                     {"function", "pop_size", "antithetic", "fitness_shaping", "beta1", "init_box", "init_distance",
                      "init_sigma", "max_evaluations", "target"},
                     "nes");
      if (p.contains("function")) {
        try {
          s.nes.function = parse_test_function(p.at("function").get<std::string>());
        } catch (const InvalidArgument& e) {
          throw ConfigError(std::string("spec: ") + e.what());
        }
      }
      read(p, "pop_size", s.nes.config.pop_size);
      read(p, "antithetic", s.nes.config.antithetic);
      if (p.contains("fitness_shaping")) {
        const auto f = p.at("fitness_shaping").get<std::string>();
        if (f != "ranks" && f != "raw") throw ConfigError("spec: fitness_shaping must be ranks or raw");
        s.nes.config.fitness_shaping = f == "ranks" ? FitnessShaping::ranks : FitnessShaping::raw;
      }
      read(p, "beta1", s.nes.beta1);
      read(p, "init_box", s.nes.init_box);
      read(p, "init_distance", s.nes.init_distance);
      read(p, "init_sigma", s.nes.init_sigma);
      read(p, "max_evaluations", s.nes.max_evaluations);
      read(p, "target", s.nes.target);
    }
    if (j.contains("train")) {
      const json& p = j.at("train");
      reject_unknown(p,
                     {"input_dim", "hidden", "classes", "clusters_per_class", "samples", "batch_size", "separation", "lr", "momentum",
                      "weight_decay", "floor_lr"},
                     "train");
      read(p, "input_dim", s.train.input_dim);
      read(p, "hidden", s.train.hidden);
      read(p, "classes", s.train.classes);
      read(p, "clusters_per_class", s.train.clusters_per_class);
      read(p, "samples", s.train.samples);
      read(p, "batch_size", s.train.batch_size);
      read(p, "separation", s.train.separation);
      read(p, "lr", s.train.lr);
      read(p, "momentum", s.train.momentum);
      read(p, "weight_decay", s.train.weight_decay);
      read(p, "floor_lr", s.train.floor_lr);
    }
    if (j.contains("bench")) {
      const json& p = j.at("bench");
      reject_unknown(p, {"dims", "arg_norm", "repeats"}, "bench");
      read(p, "dims", s.bench.dims);
      read(p, "arg_norm", s.bench.arg_norm);
      read(p, "repeats", s.bench.repeats);
    }
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("spec: ") + e.what());
  }
}

json spec_to_json(const ExperimentSpec& s) {
  json methods = json::array();
  for (Method m : s.methods) methods.push_back(to_string(m));
  std::vector<std::string> fsh;
  return {
      {"id", s.id},
      {"kind", to_string(s.kind)},
      {"n", s.n},
      {"m", s.m},
      {"steps", s.steps},
      {"seeds", s.seeds},
      {"methods", methods},
      {"config", config_to_json(s.config)},
      {"cond", s.cond},
      {"record_every", s.record_every},
      {"w2_every", s.w2_every},
      {"precision", to_string(s.precision)},
      {"spd",
       {{"kind", s.spd.kind == SpdKind::log_det ? "log_det" : "metric_nearness"},
        {"num_data", s.spd.num_data},
        {"batch_size", s.spd.batch_size}}},
      {"nes",
       {{"function", test_function_name(s.nes.function)},
        {"pop_size", s.nes.config.pop_size},
        {"antithetic", s.nes.config.antithetic},
        {"fitness_shaping", s.nes.config.fitness_shaping == FitnessShaping::ranks ? "ranks" : "raw"},
        {"beta1", s.nes.beta1},
        {"init_box", s.nes.init_box},
        {"init_distance", s.nes.init_distance},
        {"init_sigma", s.nes.init_sigma},
        {"max_evaluations", s.nes.max_evaluations},
        {"target", s.nes.target}}},
      {"train",
       {{"input_dim", s.train.input_dim},
        {"hidden", s.train.hidden},
        {"classes", s.train.classes},
        {"clusters_per_class", s.train.clusters_per_class},
        {"samples", s.train.samples},
        {"batch_size", s.train.batch_size},
        {"separation", s.train.separation},
        {"lr", s.train.lr},
        {"momentum", s.train.momentum},
        {"weight_decay", s.train.weight_decay},
        {"floor_lr", s.train.floor_lr}}},
      {"bench", {{"dims", s.bench.dims}, {"arg_norm", s.bench.arg_norm}, {"repeats", s.bench.repeats}}},
  };
}

// ---------------------------------------------------------------- cells

namespace {

using Clock = std::chrono::steady_clock;

// Per-seed data shared by every method of the seed.
struct SeedData {
  MatrixD sigma;      // target covariance (matching experiments) or Q (spd_opt)
  MatrixD gradients;  // columns g_1..g_T
  MatrixD data;       // spd_opt metric-nearness samples
  std::string sequence_hash;
};

SeedData make_seed_data(const ExperimentSpec& spec, std::uint64_t seed) {
  SeedData sd;
  switch (spec.kind) {
    case ExperimentKind::fixed_point_full:
    case ExperimentKind::iterate_full:
    case ExperimentKind::fixed_point_kron:
    case ExperimentKind::iterate_kron: {
      const Index dim = is_kron(spec.kind) ? spec.n * spec.m : spec.n;
      sd.sigma = generate_random_spd(dim, spec.cond, seed);
      const MatrixD root = spd_sqrt(sd.sigma);
      Rng rng(seed, static_cast<std::uint64_t>(StreamId::gradients));
      MatrixD z(dim, spec.steps);
      for (Index k = 0; k < spec.steps; ++k)
        for (Index i = 0; i < dim; ++i) z(i, k) = rng.normal();
      sd.gradients = root * z;
      sd.sequence_hash = fnv1a_hex(std::string(reinterpret_cast<const char*>(sd.gradients.data()),
                                               sizeof(double) * static_cast<std::size_t>(sd.gradients.size())));
      break;
    }
    case ExperimentKind::spd_opt: {
      sd.sigma = generate_random_spd(spec.n, spec.cond, seed);
      if (spec.spd.kind == SpdKind::metric_nearness) {
        Rng rng(seed, static_cast<std::uint64_t>(StreamId::data));
        sd.data.resize(spec.n, spec.spd.num_data);
        for (Index c = 0; c < spec.spd.num_data; ++c)
          for (Index i = 0; i < spec.n; ++i) sd.data(i, c) = rng.normal();
      }
      break;
    }
    default:
      break;
  }
  return sd;
}

// Row collector for one (method, seed) cell. Step time is accumulated
// separately so metric evaluation does not count toward wall_time_s.
struct Cell {
  const ExperimentSpec& spec;
  std::string method;
  std::uint64_t seed;
  std::vector<TraceRecord> rows;
  double elapsed = 0.0;
  bool failed = false;
  std::string failure;

  void add(std::int64_t k, const std::string& metric, double value) {
    rows.push_back({spec.id, method, seed, k, metric, value, elapsed});
  }
  void fail(std::int64_t k, const std::string& why) {
    failed = true;
    failure = why;
    rows.push_back({spec.id, method, seed, k, kFailureMetric, 1.0, elapsed});
  }
  template <typename F>
  void timed(F&& f) {
    const auto t0 = Clock::now();
    f();
    elapsed += std::chrono::duration<double>(Clock::now() - t0).count();
  }
  // Adds a metric row; a non-finite value turns into a failure row.
  bool metric(std::int64_t k, const std::string& name, double value) {
    if (!std::isfinite(value)) {
      fail(k, name + " is not finite");
      return false;
    }
    add(k, name, value);
    return true;
  }
};

bool should_record(const ExperimentSpec& spec, Index k) { return k % spec.record_every == 0 || k == spec.steps; }
bool should_record_w2(const ExperimentSpec& spec, Index k) {
  return k == spec.steps || k == 0 || (spec.w2_every > 0 && k % spec.w2_every == 0);
}

template <typename T>
MatrixD to_double(const Matrix<T>& m) {
  return m.template cast<double>();
}

// Records rel_frobenius and wasserstein2 of est against ref.
bool record_pair(Cell& cell, Index k, const MatrixD& ref, const MatrixD& est) {
  if (should_record(cell.spec, k) && !cell.metric(k, "rel_frobenius", rel_frobenius(ref, est))) return false;
  if (should_record_w2(cell.spec, k)) {
    double w2;
    try {
      w2 = wasserstein2_spd(ref, est);
    } catch (const DomainError&) {
      w2 = std::numeric_limits<double>::quiet_NaN();
    }
    if (!cell.metric(k, "wasserstein2", w2)) return false;
  }
  return true;
}

// Full-matrix matching: fixed point (ref = Sigma) or iterates (ref = default EMA in double).
template <typename T>
void run_full_matching(Cell& cell, Method method, const SeedData& sd) {
  const ExperimentSpec& spec = cell.spec;
  const Index dim = spec.n;
  const bool iterate = spec.kind == ExperimentKind::iterate_full;
  UpdateConfig cfg = spec.config;
  if (method == Method::spectral_truncated) cfg.exp_mode = ExpMode::first_order;

  SpectralFactor<T> f = SpectralFactor<T>::identity(dim);
  Matrix<T> s_ema = Matrix<T>::Identity(dim, dim);
  MatrixD ref_ema = MatrixD::Identity(dim, dim);

  auto current = [&]() -> MatrixD { return method == Method::default_ema ? to_double(s_ema) : to_double(f.reconstruct()); };
  if (!record_pair(cell, 0, iterate ? ref_ema : sd.sigma, current())) return;
  for (Index k = 1; k <= spec.steps; ++k) {
    const Vector<T> g = sd.gradients.col(k - 1).cast<T>();
    cell.timed([&] {
      switch (method) {
        case Method::spectral:
          f = rgd_step_exact(f, gop_residual(f, g, cfg.gamma), cfg);
          break;
        case Method::spectral_truncated:
          f = rgd_step_gop_truncated(f, g, cfg);
          break;
        default:
          s_ema = ema_full_step<T>(s_ema, g, cfg.beta2, cfg.gamma, cfg.damping);
          break;
      }
    });
    if (iterate) ref_ema = ema_full_step<double>(ref_ema, sd.gradients.col(k - 1), cfg.beta2, cfg.gamma, cfg.damping);
    const bool rec = should_record(spec, k) || should_record_w2(spec, k);
    if (rec && !record_pair(cell, k, iterate ? ref_ema : sd.sigma, current())) return;
    if (!rec && method != Method::default_ema && !f.eigvals().allFinite()) {
      cell.fail(k, "non-finite eigenvalues");
      return;
    }
  }
  if (method != Method::default_ema) cell.add(spec.steps, "orthogonality_defect", static_cast<double>(f.orthogonality_defect()));
}

template <typename T>
double log_abs_det(const Matrix<T>& s) {
  const MatrixD sd = s.template cast<double>();
  return std::log(std::abs(Eigen::PartialPivLU<MatrixD>(sd).determinant()));
}

// Kronecker matching against Sigma or the unstructured default-scheme iterates.
template <typename T>
void run_kron_matching(Cell& cell, Method method, const SeedData& sd) {
  const ExperimentSpec& spec = cell.spec;
  const Index n = spec.n, m = spec.m, dim = n * m;
  const bool iterate = spec.kind == ExperimentKind::iterate_kron;
  UpdateConfig cfg = spec.config;
  if (method == Method::kron_truncated) cfg.exp_mode = ExpMode::first_order;

  KronSpectralFactor<T> kf = KronSpectralFactor<T>::identity(n, m);
  Matrix<T> s_c = Matrix<T>::Identity(n, n), s_k = Matrix<T>::Identity(m, m);
  Matrix<T> s_ema = Matrix<T>::Identity(dim, dim);
  MatrixD ref_ema = MatrixD::Identity(dim, dim);
  double det_defect = 0.0;

  auto current = [&]() -> MatrixD {
    switch (method) {
      case Method::kron_projection:
        return to_double(Matrix<T>(kron(s_c, s_k)));
      case Method::default_ema:
        return to_double(s_ema);
      default:
        return to_double(kf.reconstruct());
    }
  };
  if (!record_pair(cell, 0, iterate ? ref_ema : sd.sigma, current())) return;
  for (Index k = 1; k <= spec.steps; ++k) {
    const Vector<T> g = sd.gradients.col(k - 1).cast<T>();
    const Matrix<T> gm = unvec_rowmajor<T>(g, n, m);
    cell.timed([&] {
      switch (method) {
        case Method::kron_exact:
          kf = kron_rgd_step_exact(kf, gm, cfg);
          break;
        case Method::kron_truncated:
          kf = kron_rgd_step_truncated(kf, gm, cfg);
          break;
        case Method::kron_projection: {
          auto p = projection_kron_step<T>(s_c, s_k, g, cfg.beta2, cfg.gamma);
          s_c = std::move(p.s_c);
          s_k = std::move(p.s_k);
          break;
        }
        default:
          s_ema = ema_full_step<T>(s_ema, g, cfg.beta2, cfg.gamma, cfg.damping);
          break;
      }
    });
    if (iterate) ref_ema = ema_full_step<double>(ref_ema, sd.gradients.col(k - 1), cfg.beta2, cfg.gamma, cfg.damping);
    if (method == Method::kron_exact || method == Method::kron_truncated) {
      const double dc = std::abs(log_abs_det(kf.factor_c().reconstruct()));
      const double dk = std::abs(log_abs_det(kf.factor_k().reconstruct()));
      det_defect = std::max({det_defect, dc, dk});
    }
    const bool rec = should_record(spec, k) || should_record_w2(spec, k);
    if (rec) {
      if (!record_pair(cell, k, iterate ? ref_ema : sd.sigma, current())) return;
      if ((method == Method::kron_exact || method == Method::kron_truncated) && should_record(spec, k))
        cell.add(k, "det_defect_max", det_defect);
    }
  }
}

template <typename T>
void run_spd_opt(Cell& cell, const SeedData& sd, std::uint64_t method_index) {
  const ExperimentSpec& spec = cell.spec;
  SpdProblem<T> prob;
  prob.kind = spec.spd.kind;
  prob.q = sd.sigma.cast<T>();
  prob.data = sd.data.cast<T>();
  prob.batch_size = spec.spd.batch_size;
  prob.validate();
  const MatrixD q = sd.sigma;
  const MatrixD s_star = symmetrized<double>(q.inverse());
  SpdProblem<double> prob_d;
  prob_d.kind = prob.kind;
  prob_d.q = q;
  prob_d.data = sd.data;
  prob_d.batch_size = prob.batch_size;
  const double loss_star = spd_loss(prob_d, s_star);

  Rng rng(cell.seed, method_stream(method_index));
  SpectralFactor<T> f = SpectralFactor<T>::identity(spec.n);
  double min_d = 1.0;
  auto eval = [&](Index k) {
    if (!should_record(spec, k)) return true;
    double loss;
    try {
      loss = spd_loss(prob_d, to_double(f.reconstruct())) - loss_star;
    } catch (const DomainError&) {
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!cell.metric(k, "eval_loss", loss)) return false;
    cell.add(k, "min_eigval", min_d);
    return true;
  };
  if (!eval(0)) return;
  std::vector<Index> batch;
  for (Index k = 1; k <= spec.steps; ++k) {
    if (prob.kind == SpdKind::metric_nearness) batch = sample_batch(spec.spd.num_data, spec.spd.batch_size, rng);
    cell.timed([&] { f = rgd_step_exact(f, spd_opt_residual(f, prob, batch).residual, spec.config); });
    min_d = std::min(min_d, static_cast<double>(f.eigvals().minCoeff()));
    if (!eval(k)) return;
  }
}

template <typename T>
void run_nes(Cell& cell, std::uint64_t method_index) {
  const ExperimentSpec& spec = cell.spec;
  const NesSettings& ns = spec.nes;
  const Index dim = spec.n;
  const TestFunction fn = ns.function;
  const Objective<T> objective = [fn](const Vector<T>& w) { return test_function(fn, w); };

  Rng init(cell.seed, static_cast<std::uint64_t>(StreamId::init));
  Vector<T> mu(dim);
  if (ns.init_box > 0) {
    for (Index i = 0; i < dim; ++i) mu(i) = static_cast<T>(init.uniform(-ns.init_box, ns.init_box));
  } else {
    VectorD dir(dim);
    for (Index i = 0; i < dim; ++i) dir(i) = init.normal();
    dir.normalize();
    const double opt = fn == TestFunction::rosenbrock ? 1.0 : 0.0;
    for (Index i = 0; i < dim; ++i) mu(i) = static_cast<T>(opt + ns.init_distance * dir(i));
  }
  SpectralFactor<T> f = SpectralFactor<T>::unchecked(Matrix<T>::Identity(dim, dim),
                                                     Vector<T>::Constant(dim, static_cast<T>(1.0 / (ns.init_sigma * ns.init_sigma))));
  NesConfig nc = ns.config;
  const Index pop = nc.resolved_pop_size(dim);
  const double beta1 = ns.beta1 > 0 ? ns.beta1 : static_cast<double>(pop);
  UpdateConfig cfg = spec.config;
  cfg.gamma = 0.0;
  Rng rng(cell.seed, method_stream(method_index));
  Index evals = 0;
  double loss = test_function(fn, mu);
  if (!cell.metric(0, "loss", loss)) return;
  cell.add(0, "evaluations", 0.0);
  for (Index k = 1; k <= spec.steps && evals < ns.max_evaluations; ++k) {
    cell.timed([&] {
      const NesEstimate<T> est = nes_estimate(f, mu, objective, nc, rng);
      evals += est.evaluations;
      mu -= static_cast<T>(beta1) * apply_inverse_root(f, est.g_hat, 1.0);
      f = rgd_step_exact(f, est.residual, cfg);
    });
    loss = test_function(fn, mu);
    const bool done = (ns.target > 0 && loss < ns.target) || evals >= ns.max_evaluations || k == spec.steps;
    if (should_record(spec, k) || done) {
      if (!cell.metric(k, "loss", loss)) return;
      cell.add(k, "evaluations", static_cast<double>(evals));
    }
    if (done) break;
  }
}

template <typename T>
Matrix<T> random_skew(Index dim, double fro, Rng& rng) {
  MatrixD a(dim, dim);
  for (Index j = 0; j < dim; ++j)
    for (Index i = 0; i < dim; ++i) a(i, j) = rng.normal();
  MatrixD s = a - a.transpose();
  if (dim > 1) s *= fro / s.norm();
  return s.cast<T>();
}

template <typename T>
void run_cayley_bench(Cell& cell, Method method, std::uint64_t method_index) {
  const ExperimentSpec& spec = cell.spec;
  (void)method_index;
  // Arguments depend only on the seed so both maps see the same inputs.
  Rng rng(cell.seed, static_cast<std::uint64_t>(StreamId::problem));
  for (Index dim : spec.bench.dims) {
    double orth = 0.0, err = 0.0, time = 0.0;
    for (Index r = 0; r < spec.bench.repeats; ++r) {
      const Matrix<T> n = random_skew<T>(dim, spec.bench.arg_norm, rng);
      Matrix<T> q;
      const auto t0 = Clock::now();
      q = method == Method::spectral_truncated ? cayley_truncated(n) : cayley_exact(n);
      time += std::chrono::duration<double>(Clock::now() - t0).count();
      orth = std::max(orth, static_cast<double>(orthogonality_defect(q)));
      const MatrixD exact = cayley_exact<double>(n.template cast<double>());
      err = std::max(err, (q.template cast<double>() - exact).norm());
    }
    cell.elapsed = time / static_cast<double>(spec.bench.repeats);
    cell.add(dim, "orthogonality_defect", orth);
    cell.add(dim, "map_error", err);
    cell.add(dim, "seconds_per_call", cell.elapsed);
  }
}

template <typename T>
void run_cell(Cell& cell, Method method, std::uint64_t method_index, const SeedData& sd) {
  switch (cell.spec.kind) {
    case ExperimentKind::fixed_point_full:
    case ExperimentKind::iterate_full:
      run_full_matching<T>(cell, method, sd);
      break;
    case ExperimentKind::fixed_point_kron:
    case ExperimentKind::iterate_kron:
      run_kron_matching<T>(cell, method, sd);
      break;
    case ExperimentKind::spd_opt:
      run_spd_opt<T>(cell, sd, method_index);
      break;
    case ExperimentKind::nes:
      run_nes<T>(cell, method_index);
      break;
    case ExperimentKind::cayley_bench:
      run_cayley_bench<T>(cell, method, method_index);
      break;
    case ExperimentKind::train_demo:
      break;
  }
}

}  // namespace

unsigned harness_threads() {
  if (const char* env = std::getenv("SPECTRAL_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job) {
  const unsigned threads = std::min<unsigned>(harness_threads(), static_cast<unsigned>(std::max<std::size_t>(count, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

RunResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.kind == ExperimentKind::train_demo) return train_demo(spec);

  RunResult result;
  result.meta.spec_hash = fnv1a_hex(spec_to_json(spec).dump());
  result.meta.seeds = spec.seeds;
  result.meta.scalar_bits = spec.precision == Precision::f64 ? 64 : 32;

  std::vector<SeedData> seeds(spec.seeds.size());
  detail::parallel_for(seeds.size(), [&](std::size_t i) { seeds[i] = make_seed_data(spec, spec.seeds[i]); });
  for (const auto& sd : seeds)
    if (!sd.sequence_hash.empty()) result.meta.sequence_hashes.push_back(sd.sequence_hash);

  const std::size_t nm = spec.methods.size(), ns = spec.seeds.size();
  std::vector<std::vector<TraceRecord>> rows(nm * ns);
  std::vector<char> failed(nm * ns, 0);
  std::vector<std::string> messages(nm * ns);
  detail::parallel_for(nm * ns, [&](std::size_t c) {
    const std::size_t mi = c / ns, si = c % ns;
    Cell cell{spec, to_string(spec.methods[mi]), spec.seeds[si], {}, 0.0, false, {}};
    try {
      if (spec.precision == Precision::f64)
        run_cell<double>(cell, spec.methods[mi], mi, seeds[si]);
      else
        run_cell<float>(cell, spec.methods[mi], mi, seeds[si]);
    } catch (const Error& e) {
      const std::int64_t k = cell.rows.empty() ? 0 : cell.rows.back().iteration;
      cell.fail(k, e.what());
    }
    rows[c] = std::move(cell.rows);
    failed[c] = cell.failed;
    messages[c] = cell.failure;
  });
  result.cells = static_cast<Index>(nm * ns);
  for (std::size_t c = 0; c < rows.size(); ++c) {
    // Within a cell rows are appended in iteration order; stable sort keeps metric order per iteration.
    std::stable_sort(rows[c].begin(), rows[c].end(),
                     [](const TraceRecord& a, const TraceRecord& b) { return a.iteration < b.iteration; });
    result.records.insert(result.records.end(), rows[c].begin(), rows[c].end());
    result.failed_cells += failed[c];
    if (failed[c])
      result.failures.push_back(to_string(spec.methods[c / ns]) + " seed " + std::to_string(spec.seeds[c % ns]) + ": " +
                                messages[c]);
  }
  return result;
}

}  // namespace spectral
