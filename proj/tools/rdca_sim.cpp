// rdca_sim: run, sweep and compare receiver-datapath scenarios, and size a
// cache-resident buffer pool.
//
// Exit codes: 0 ok, 1 I/O error, 2 configuration error, 3 internal
// invariant violation.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "rdca/rdca.hpp"

namespace fs = std::filesystem;
using namespace rdca;

namespace {

constexpr int kOk = 0;
constexpr int kIoError = 1;
constexpr int kConfigError = 2;
constexpr int kInternalError = 3;

struct CommonOpts {
  std::string scenario;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet{false};
};

std::string default_out() {
  const char* env = std::getenv("RDCA_SIM_OUT");
  return env && *env ? env : "out";
}

// "65536", "64K", "64KB", "64KiB", "1M", "1MB" (binary multiples).
ByteSize parse_size(std::string s) {
  std::int64_t mult = 1;
  auto strip = [&](const std::string& suf, std::int64_t m) {
    if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
      s.resize(s.size() - suf.size());
      mult = m;
      return true;
    }
    return false;
  };
  strip("KiB", 1024) || strip("KB", 1024) || strip("K", 1024) || strip("MiB", 1 << 20) || strip("MB", 1 << 20) ||
      strip("M", 1 << 20) || strip("B", 1);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, "bad size: " + s);
  }
  if (used != s.size() || v <= 0) throw Error(Errc::ConfigError, "bad size: " + s);
  return ByteSize{v * mult};
}

Scenario load(const CommonOpts& o) {
  auto sc = load_scenario(o.scenario);
  if (o.seed) sc.seed = *o.seed;
  return sc;
}

int cmd_run(const CommonOpts& o) {
  const auto sc = load(o);
  const auto res = run(sc);
  write_artifacts(o.out, sc, res);
  if (!o.quiet) {
    std::cout << "mode=" << to_string(sc.mode) << " goodput_gbps=" << format_double(res.summary.goodput_gbps)
              << " p99_lat_us=" << format_double(res.summary.p99_lat_us) << " out=" << o.out << "\n";
  }
  return kOk;
}

int cmd_sweep(const CommonOpts& o, const std::vector<std::string>& size_args, int jobs) {
  const auto base = load(o);
  std::vector<ByteSize> sizes;
  for (const auto& s : size_args) sizes.push_back(parse_size(s));
  if (sizes.empty()) throw Error(Errc::ConfigError, "--sizes needs at least one size");

  std::vector<Summary> results(sizes.size());
  std::vector<std::string> errors(sizes.size());
  std::vector<int> codes(sizes.size(), kOk);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (auto i = next++; i < sizes.size(); i = next++) {
      try {
        auto sc = base;
        sc.msg_size = sizes[i];
        results[i] = run(sc).summary;
      } catch (const Error& e) {
        errors[i] = e.what();
        codes[i] = e.code() == Errc::ConfigError ? kConfigError : kInternalError;
      }
    }
  };
  const auto n = static_cast<std::size_t>(std::max(1, jobs));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(n, sizes.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (codes[i] != kOk) {
      std::cerr << "error: size " << sizes[i].value << ": " << errors[i] << "\n";
      return codes[i];
    }
  }

  std::string table = table_header() + "\n";
  for (std::size_t i = 0; i < sizes.size(); ++i) table += table_row(sizes[i], base.mode, results[i]) + "\n";
  fs::create_directories(o.out);
  write_file(fs::path(o.out) / "sweep.csv", table);
  if (!o.quiet) std::cout << table;
  return kOk;
}

int cmd_compare(const CommonOpts& o) {
  const auto sc = load(o);
  const auto r = compare(sc);
  std::string table = table_header() + ",throughput_ratio\n";
  const auto ratio = format_double(r.throughput_ratio);
  table += table_row(sc.msg_size, Mode::BaselineDdio, r.baseline) + "," + ratio + "\n";
  table += table_row(sc.msg_size, Mode::Jet, r.jet) + "," + ratio + "\n";
  fs::create_directories(o.out);
  write_file(fs::path(o.out) / "compare.csv", table);
  if (!o.quiet) std::cout << table;
  return kOk;
}

int cmd_sizing(double rate_gbps, std::int64_t timespan_us, bool quiet) {
  if (!(rate_gbps > 0) || timespan_us <= 0) {
    std::cerr << "error: rate and timespan must be positive\n";
    return kConfigError;
  }
  SizingInput in;
  in.rate = Bandwidth{static_cast<std::int64_t>(rate_gbps * 125'000'000.0)};
  in.timespan = us(timespan_us);
  const auto rep = sizing(in);
  if (!quiet) {
    for (const auto& [k, v] : sizing_kv(in, rep)) std::cout << k << "=" << v << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cache-centric RDMA receiver simulator"};
  app.require_subcommand(1);

  CommonOpts opts;
  opts.out = default_out();
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--scenario", opts.scenario, "scenario JSON file")->required();
    sub->add_option("--out", opts.out, "output directory (default $RDCA_SIM_OUT or ./out)");
    seed_opts.push_back(sub->add_option("--seed", seed, "override the scenario seed"));
    sub->add_flag("--quiet", opts.quiet, "no console output");
  };

  auto* run_cmd = app.add_subcommand("run", "run one scenario and write metrics.csv, summary.txt, events.log");
  add_common(run_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "run the scenario once per message size");
  add_common(sweep_cmd);
  std::vector<std::string> sizes;
  int jobs = 1;
  sweep_cmd->add_option("--sizes", sizes, "message sizes, e.g. 64K,128K,1M")->delimiter(',')->required();
  sweep_cmd->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  auto* compare_cmd = app.add_subcommand("compare", "run baseline and jet with the same seed");
  add_common(compare_cmd);

  auto* sizing_cmd = app.add_subcommand("sizing", "buffer size needed for a rate and timespan");
  double rate_gbps = 0;
  std::int64_t timespan_us = 0;
  bool sizing_quiet = false;
  sizing_cmd->add_option("--rate-gbps", rate_gbps, "line rate in Gbps")->required();
  sizing_cmd->add_option("--timespan-us", timespan_us, "average buffer timespan in microseconds")->required();
  sizing_cmd->add_flag("--quiet", sizing_quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  for (auto* o : seed_opts) {
    if (o->count() > 0) opts.seed = seed;
  }

  try {
    if (*run_cmd) return cmd_run(opts);
    if (*sweep_cmd) return cmd_sweep(opts, sizes, jobs);
    if (*compare_cmd) return cmd_compare(opts);
    if (*sizing_cmd) return cmd_sizing(rate_gbps, timespan_us, sizing_quiet);
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << opts.scenario << ": " << e.what() << "\n";
    return kConfigError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::ConfigError ? kConfigError : kInternalError;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  }
  return kInternalError;
}
