#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "spectral/harness.hpp"

namespace spectral {

namespace {

struct Subcommand {
  const char* name;
  const char* help;
  ExperimentKind default_kind;
  ExperimentKind alt_kind;
};

constexpr Subcommand kSubcommands[] = {
    {"validate-full", "full-matrix fixed-point or iterate matching", ExperimentKind::fixed_point_full,
     ExperimentKind::iterate_full},
    {"validate-kron", "Kronecker fixed-point or iterate matching", ExperimentKind::fixed_point_kron,
     ExperimentKind::iterate_kron},
    {"spd-opt", "SPD matrix optimization", ExperimentKind::spd_opt, ExperimentKind::spd_opt},
    {"nes", "gradient-free optimization with natural evolution strategies", ExperimentKind::nes, ExperimentKind::nes},
    {"train-demo", "two-layer perceptron with the Kronecker optimizer", ExperimentKind::train_demo,
     ExperimentKind::train_demo},
    {"cayley-bench", "exact versus truncated Cayley map", ExperimentKind::cayley_bench, ExperimentKind::cayley_bench},
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format = "csv";
  std::optional<std::string> precision;
};

ExperimentSpec load_spec(const Subcommand& sc, const Options& opt) {
  ExperimentSpec spec = default_spec(sc.default_kind);
  if (!opt.config.empty()) {
    std::ifstream in(opt.config);
    if (!in) throw ConfigError("cannot read config '" + opt.config + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config '" + opt.config + "': " + e.what());
    }
    if (j.is_object() && !j.contains("kind")) j["kind"] = to_string(sc.default_kind);
    spec = spec_from_json(j);
  }
  if (spec.kind != sc.default_kind && spec.kind != sc.alt_kind)
    throw ConfigError(std::string("kind ") + to_string(spec.kind) + " cannot run under '" + sc.name + "'");
  if (opt.seed) spec.seeds = {*opt.seed};
  if (opt.precision) spec.precision = parse_precision(*opt.precision);
  spec.validate();
  return spec;
}

int execute(const Subcommand& sc, const Options& opt) {
  ExperimentSpec spec;
  TraceFormat format;
  try {
    spec = load_spec(sc, opt);
    format = parse_format(opt.format);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  RunResult result;
  try {
    result = run_experiment(spec);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  for (const auto& f : result.failures) std::cerr << "numerical failure: " << f << "\n";
  try {
    if (opt.out.empty())
      std::cout << format_traces(result.records, format);
    else
      emit_traces(result.records, opt.out, format, result.meta);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return result.cells > 0 && result.failed_cells == result.cells ? 3 : 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Spectral-factorized curvature learning experiments"};
  app.require_subcommand(1);
  Options opt;
  std::vector<std::pair<CLI::App*, const Subcommand*>> subs;
  for (const auto& sc : kSubcommands) {
    CLI::App* sub = app.add_subcommand(sc.name, sc.help);
    sub->add_option("--config", opt.config, "experiment spec (JSON)");
    sub->add_option("--seed", opt.seed, "run a single seed");
    sub->add_option("--out", opt.out, "trace output path; metadata goes to <path>.meta.json");
    sub->add_option("--format", opt.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--precision", opt.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    subs.emplace_back(sub, &sc);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (const auto& [sub, sc] : subs)
    if (sub->parsed()) return execute(*sc, opt);
  return 2;
}

}  // namespace spectral
