#pragma once

// Scenario files (JSON) and run artifacts. Omitted keys take defaults;
// unknown keys are rejected with the line they appear on.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdca/sim.hpp"

namespace rdca {

using json = nlohmann::ordered_json;

class ScenarioError : public Error {
 public:
  ScenarioError(const std::string& what, std::string key = {}, int line = 0)
      : Error(Errc::ConfigError, what), key_(std::move(key)), line_(line) {}
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  std::string key_;
  int line_;
};

namespace detail {

inline int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// First line on which `"key"` appears as an object key.
inline int line_of_key(const std::string& text, const std::string& key) {
  const std::string needle = "\"" + key + "\"";
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) {
    auto after = text.find_first_not_of(" \t\r\n", pos + needle.size());
    if (after != std::string::npos && text[after] == ':') return line_of_offset(text, pos);
  }
  return 0;
}

struct Field {
  std::string key;
  std::function<void(const json&, const std::string& path)> read;
  std::function<json()> write;
};

struct Reader {
  const std::string& text;

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    const auto leaf = path.substr(path.rfind('.') + 1);
    const int line = line_of_key(text, leaf);
    std::string where = line ? "line " + std::to_string(line) + ": " : "";
    throw ScenarioError(where + path + ": " + msg, path, line);
  }

  std::int64_t integer(const json& v, const std::string& path) const {
    if (!v.is_number_integer()) fail(path, "expected an integer");
    return v.get<std::int64_t>();
  }
  double number(const json& v, const std::string& path) const {
    if (!v.is_number()) fail(path, "expected a number");
    return v.get<double>();
  }
  bool boolean(const json& v, const std::string& path) const {
    if (!v.is_boolean()) fail(path, "expected true or false");
    return v.get<bool>();
  }
  std::string string(const json& v, const std::string& path) const {
    if (!v.is_string()) fail(path, "expected a string");
    return v.get<std::string>();
  }

  void apply(const json& obj, const std::vector<Field>& fields, const std::string& prefix) const {
    const auto path_of = [&](const std::string& k) { return prefix.empty() ? k : prefix + "." + k; };
    if (!obj.is_object()) fail(prefix.empty() ? "scenario" : prefix, "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      auto f = std::find_if(fields.begin(), fields.end(), [&](const Field& x) { return x.key == it.key(); });
      if (f == fields.end()) {
        const int line = line_of_key(text, it.key());
        std::string where = line ? "line " + std::to_string(line) + ": " : "";
        throw ScenarioError(where + "unknown key \"" + path_of(it.key()) + "\"", path_of(it.key()), line);
      }
      f->read(it.value(), path_of(it.key()));
    }
  }
};

template <typename Q>
Field quantity(const Reader& r, std::string key, Q& q) {
  return {key, [&r, &q](const json& v, const std::string& p) { q = Q{r.integer(v, p)}; },
          [&q] { return json(q.value); }};
}
inline Field integer(const Reader& r, std::string key, std::int64_t& x) {
  return {key, [&r, &x](const json& v, const std::string& p) { x = r.integer(v, p); }, [&x] { return json(x); }};
}
inline Field unsigned_int(const Reader& r, std::string key, std::uint64_t& x) {
  return {key,
          [&r, &x](const json& v, const std::string& p) {
            const auto i = r.integer(v, p);
            if (i < 0) r.fail(p, "expected a non-negative integer");
            x = static_cast<std::uint64_t>(i);
          },
          [&x] { return json(x); }};
}
inline Field number(const Reader& r, std::string key, double& x) {
  return {key, [&r, &x](const json& v, const std::string& p) { x = r.number(v, p); }, [&x] { return json(x); }};
}
inline Field boolean(const Reader& r, std::string key, bool& x) {
  return {key, [&r, &x](const json& v, const std::string& p) { x = r.boolean(v, p); }, [&x] { return json(x); }};
}
inline Field section(const Reader& r, std::string key, std::vector<Field> fields) {
  auto shared = std::make_shared<std::vector<Field>>(std::move(fields));
  return {key, [&r, shared](const json& v, const std::string& p) { r.apply(v, *shared, p); },
          [shared] {
            json out = json::object();
            for (const auto& f : *shared) out[f.key] = f.write();
            return out;
          }};
}

inline Mode parse_mode(const std::string& s, const Reader& r, const std::string& path) {
  if (s == "jet") return Mode::Jet;
  if (s == "baseline") return Mode::BaselineDdio;
  r.fail(path, "expected \"jet\" or \"baseline\"");
}

inline NetworkKind parse_network(const std::string& s, const Reader& r, const std::string& path) {
  for (auto n : {NetworkKind::Lossless25G, NetworkKind::Lossy100G, NetworkKind::Lossy25G}) {
    if (s == to_string(n)) return n;
  }
  r.fail(path, "expected \"lossless25g\", \"lossy100g\" or \"lossy25g\"");
}

// Everything except mode/network, which are handled first because the
// network selects the host preset the other keys override.
inline std::vector<Field> scenario_fields(const Reader& r, Scenario& s) {
  auto& h = s.host;
  auto& d = s.host.dcqcn;
  return {
      integer(r, "qp_count", s.qp_count),
      quantity(r, "msg_size_bytes", s.msg_size),
      integer(r, "io_depth", s.io_depth),
      quantity(r, "duration_ns", s.duration),
      unsigned_int(r, "seed", s.seed),
      quantity(r, "tick_ns", s.tick),
      quantity(r, "sample_interval_ns", s.sample_interval),
      number(r, "warmup_fraction", s.warmup_fraction),
      integer(r, "app_count", s.app_count),
      quantity(r, "app_hold_ns", s.app_hold),
      quantity(r, "think_time_ns", s.think_time),
      integer(r, "low_qos_qps", s.low_qos_qps),
      integer(r, "slow_app", s.slow_app),
      number(r, "slow_ratio", s.slow_ratio),
      quantity(r, "slow_hold_ns", s.slow_hold),
      boolean(r, "copy_fault", s.copy_fault),
      section(r, "competitor",
              {
                  quantity(r, "chunk_bytes", s.competitor.chunk),
                  number(r, "frequency_hz", s.competitor.frequency_hz),
                  boolean(r, "saturating", s.competitor.saturating),
                  quantity(r, "start_ns", s.competitor.start),
                  quantity(r, "ramp_ns", s.competitor.ramp),
              }),
      section(r, "pool",
              {
                  quantity(r, "total_bytes", s.pool.total_capacity),
                  quantity(r, "srq_bytes", s.pool.srq_initial),
                  quantity(r, "read_bytes", s.pool.read_initial),
                  quantity(r, "srq_min_bytes", s.pool.srq_min),
                  quantity(r, "object_bytes", s.pool.object_size),
                  integer(r, "slack_num", s.pool.slack_num),
                  integer(r, "slack_den", s.pool.slack_den),
                  integer(r, "initial_wqes", s.pool.initial_wqes),
              }),
      section(r, "flow",
              {
                  quantity(r, "fragment_max_bytes", s.flow.fragment_max),
                  integer(r, "concurrency_limit", s.flow.concurrency_limit),
                  quantity(r, "inflight_limit_bytes", s.flow.inflight_limit),
                  quantity(r, "expected_timespan_ns", s.flow.expected_timespan),
                  boolean(r, "low_qos_memory_fallback", s.flow.low_qos_memory_fallback),
              }),
      section(r, "processing",
              {
                  quantity(r, "base_cost_ns", s.processing.base_cost_per_slice),
                  quantity(r, "crc_cost_ns", s.processing.crc_cost),
                  quantity(r, "copy_cost_ns", s.processing.copy_cost),
                  boolean(r, "crc_offloaded", s.processing.crc_offloaded),
                  boolean(r, "serde_lightweight", s.processing.serde_lightweight),
                  integer(r, "worker_count", s.processing.worker_count),
                  quantity(r, "get_latency_ns", s.processing.get_latency),
              }),
      section(r, "escape",
              {
                  quantity(r, "cache_safe_bytes", s.escape.cache_safe),
                  quantity(r, "cache_danger_bytes", s.escape.cache_danger),
                  quantity(r, "mem_esc_bytes", s.escape.mem_esc),
                  number(r, "credit", s.escape.credit),
                  quantity(r, "time_th_ns", s.escape.time_th),
                  number(r, "alpha", s.escape.alpha),
              }),
      section(r, "host",
              {
                  quantity(r, "mem_capacity_bytes_per_s", h.mem_capacity),
                  quantity(r, "ddio_ways_bytes", h.ddio_ways),
                  quantity(r, "line_rate_bytes_per_s", h.line_rate),
                  quantity(r, "pcie_capacity_bytes_per_s", h.pcie_capacity),
                  boolean(r, "lossless", h.lossless),
                  quantity(r, "rnic_capacity_bytes", h.rnic_capacity),
                  quantity(r, "ecn_threshold_bytes", h.ecn_threshold),
                  quantity(r, "ecn_full_mark_bytes", h.ecn_full_mark),
                  number(r, "ecn_max_prob", h.ecn_max_prob),
                  quantity(r, "ecn_danger_threshold_bytes", h.ecn_danger_threshold),
                  quantity(r, "xoff_bytes", h.xoff),
                  quantity(r, "xon_bytes", h.xon),
                  section(r, "dcqcn",
                          {
                              number(r, "g", d.g),
                              quantity(r, "update_period_ns", d.update_period),
                              integer(r, "fast_recovery_steps", d.fast_recovery_steps),
                              quantity(r, "additive_increase_bytes_per_s", d.additive_increase),
                              quantity(r, "min_rate_bytes_per_s", d.min_rate),
                              quantity(r, "cnp_interval_ns", d.cnp_interval),
                          }),
              }),
  };
}

}  // namespace detail

// Parses a scenario document. Throws ScenarioError (a ConfigError) on bad
// syntax, unknown keys, wrong types or a scenario that fails validation.
inline Scenario parse_scenario(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const int line = detail::line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ScenarioError("line " + std::to_string(line) + ": malformed JSON", {}, line);
  }
  detail::Reader r{text};
  if (!doc.is_object()) r.fail("scenario", "expected an object");

  Scenario s;
  if (doc.contains("network")) s.set_network(detail::parse_network(r.string(doc["network"], "network"), r, "network"));
  if (doc.contains("mode")) s.mode = detail::parse_mode(r.string(doc["mode"], "mode"), r, "mode");

  auto fields = detail::scenario_fields(r, s);
  fields.push_back({"mode", [](const json&, const std::string&) {}, [] { return json(); }});
  fields.push_back({"network", [](const json&, const std::string&) {}, [] { return json(); }});
  r.apply(doc, fields, "");
  s.flow.line_rate = s.host.line_rate;
  try {
    s.validate();
  } catch (const Error& e) {
    throw ScenarioError(std::string("invalid scenario: ") + e.what());
  }
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot read scenario file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

// Fully resolved configuration, defaults expanded.
inline json to_json(const Scenario& sc) {
  Scenario s = sc;
  const std::string empty;
  detail::Reader r{empty};
  json out = json::object();
  out["mode"] = to_string(s.mode);
  out["network"] = to_string(s.network);
  for (const auto& f : detail::scenario_fields(r, s)) out[f.key] = f.write();
  return out;
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix + "." + it.key(), out);
  } else if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
  } else if (j.is_number_float()) {
    out.emplace_back(prefix, format_double(j.get<double>()));
  } else {
    out.emplace_back(prefix, j.dump());
  }
}

inline std::string summary_text(const Scenario& sc, const Summary& sum) {
  std::vector<std::pair<std::string, std::string>> kv;
  flatten(to_json(sc), "config", kv);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  for (const auto& [k, v] : sum.to_kv()) out += k + "=" + v + "\n";
  return out;
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::ios_base::failure("cannot write " + p.string());
  f << content;
  if (!f) throw std::ios_base::failure("write failed: " + p.string());
}

inline void write_artifacts(const std::filesystem::path& dir, const Scenario& sc, const RunResult& res) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::ios_base::failure("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "metrics.csv", to_csv(res.samples));
  write_file(dir / "summary.txt", summary_text(sc, res.summary));
  std::string log;
  for (const auto& e : res.events) log += e + "\n";
  write_file(dir / "events.log", log);
}

// Sweep and compare tables share this CSV layout.
inline std::string table_header() {
  return "msg_size_bytes,mode,goodput_bytes_per_s,goodput_gbps,avg_lat_us,p99_lat_us,pfc_paused_ns,cnp_count,"
         "drops,ddio_miss_rate,pool_miss_rate,pcie_stalls,escape_actions";
}

inline std::string table_row(ByteSize size, Mode mode, const Summary& s) {
  std::string out = std::to_string(size.value) + "," + to_string(mode);
  auto i = [&](std::int64_t v) { out += "," + std::to_string(v); };
  auto d = [&](double v) { out += "," + format_double(v); };
  i(s.goodput_bytes_per_s);
  d(s.goodput_gbps);
  d(s.avg_lat_us);
  d(s.p99_lat_us);
  i(s.pfc_paused_ns);
  i(s.cnp_count);
  i(s.drops);
  d(s.ddio_miss_rate);
  d(s.pool_miss_rate);
  i(s.pcie_stalls);
  i(s.escape_actions);
  return out;
}

}  // namespace rdca
