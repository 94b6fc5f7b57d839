#include <cerrno>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "spectral/harness.hpp"

namespace spectral {

TraceFormat parse_format(const std::string& s) {
  if (s == "csv") return TraceFormat::csv;
  if (s == "json") return TraceFormat::json;
  throw ConfigError("unknown trace format '" + s + "' (expected csv or json)");
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") != std::string::npos)
    throw InvalidArgument("trace field contains a CSV metacharacter: '" + s + "'");
}

double parse_double(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw InvalidArgument("parse_traces: bad number '" + s + "'");
  return v;
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string format_traces(const std::vector<TraceRecord>& records, TraceFormat format) {
  if (format == TraceFormat::csv) {
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : records) {
      check_field(r.experiment);
      check_field(r.method);
      check_field(r.metric);
      out += r.experiment + "," + r.method + "," + std::to_string(r.seed) + "," + std::to_string(r.iteration) + "," +
             r.metric + "," + fmt_double(r.value) + "," + fmt_double(r.wall_time_s) + "\n";
    }
    return out;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    arr.push_back({{"experiment", r.experiment},
                   {"method", r.method},
                   {"seed", r.seed},
                   {"iteration", r.iteration},
                   {"metric", r.metric},
                   {"value", number_or_null(r.value)},
                   {"wall_time_s", number_or_null(r.wall_time_s)}});
  }
  return arr.dump(1) + "\n";
}

std::vector<TraceRecord> parse_traces(const std::string& text, TraceFormat format) {
  std::vector<TraceRecord> out;
  if (format == TraceFormat::csv) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) throw InvalidArgument("parse_traces: missing CSV header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::size_t start = 0;
      for (;;) {
        const std::size_t comma = line.find(',', start);
        f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      if (f.size() != 7) throw InvalidArgument("parse_traces: expected 7 columns in '" + line + "'");
      TraceRecord r;
      r.experiment = f[0];
      r.method = f[1];
      r.seed = std::stoull(f[2]);
      r.iteration = std::stoll(f[3]);
      r.metric = f[4];
      r.value = parse_double(f[5]);
      r.wall_time_s = parse_double(f[6]);
      out.push_back(std::move(r));
    }
    return out;
  }
  try {
    const nlohmann::json arr = nlohmann::json::parse(text);
    if (!arr.is_array()) throw InvalidArgument("parse_traces: expected a JSON array");
    for (const auto& o : arr) {
      TraceRecord r;
      r.experiment = o.at("experiment").get<std::string>();
      r.method = o.at("method").get<std::string>();
      r.seed = o.at("seed").get<std::uint64_t>();
      r.iteration = o.at("iteration").get<std::int64_t>();
      r.metric = o.at("metric").get<std::string>();
      r.value = number_from(o.at("value"));
      r.wall_time_s = number_from(o.at("wall_time_s"));
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("parse_traces: ") + e.what());
  }
  return out;
}

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing: " + std::strerror(errno));
  f << content;
  f.flush();
  if (!f) throw Error("write to '" + path + "' failed");
}

}  // namespace

void emit_traces(const std::vector<TraceRecord>& records, const std::string& path, TraceFormat format,
                 const TraceMetadata& meta) {
  write_file(path, format_traces(records, format));
  nlohmann::ordered_json m;
  m["spec_hash"] = meta.spec_hash;
  m["seeds"] = meta.seeds;
  m["scalar_bits"] = meta.scalar_bits;
  m["rng"] = meta.rng;
  m["sequence_hashes"] = meta.sequence_hashes;
  m["format"] = format == TraceFormat::csv ? "csv" : "json";
  write_file(path + ".meta.json", m.dump(2) + "\n");
}

double final_value(const std::vector<TraceRecord>& records, const std::string& method, std::uint64_t seed,
                   const std::string& metric) {
  double v = std::numeric_limits<double>::quiet_NaN();
  std::int64_t best = std::numeric_limits<std::int64_t>::min();
  for (const auto& r : records)
    if (r.method == method && r.seed == seed && r.metric == metric && r.iteration >= best) {
      best = r.iteration;
      v = r.value;
    }
  return v;
}

}  // namespace spectral
