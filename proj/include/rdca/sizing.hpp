#pragma once

// Buffer sizing from Little's law: average resident bytes equal arrival rate
// times the average time a buffer stays allocated.

#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "rdca/cache_pool.hpp"
#include "rdca/core.hpp"

namespace rdca {

struct SizingInput {
  Bandwidth rate;
  Nanos timespan;
  std::int64_t qp_count{32};
  std::int64_t wqes_per_qp{32};
  ByteSize wqe_size = KiB(4);
  std::int64_t read_concurrency{32};
  ByteSize fragment_max = KiB(256);
};

struct SizingReport {
  ByteSize required;
  ByteSize srq;
  ByteSize read;
  ByteSize pool_total;
  ByteSize srq_min;
  ByteSize reserved_footprint;
  bool pool_covers_required{false};
};

inline ByteSize littles_law(Bandwidth rate, Nanos timespan) { return transfer(rate, timespan); }

inline SizingReport sizing(const SizingInput& in) {
  if (in.rate.value <= 0) throw Error(Errc::ConfigError, "rate must be positive");
  if (in.timespan.value <= 0) throw Error(Errc::ConfigError, "timespan must be positive");
  if (in.qp_count <= 0 || in.wqes_per_qp <= 0 || in.read_concurrency <= 0) {
    throw Error(Errc::ConfigError, "counts must be positive");
  }
  SizingReport r;
  r.required = littles_law(in.rate, in.timespan);
  r.srq = in.wqe_size * (in.qp_count * in.wqes_per_qp);
  r.read = in.fragment_max * in.read_concurrency;
  r.pool_total = r.srq + r.read;
  r.srq_min = ByteSize{r.srq.value / 4};
  PoolConfig defaults;
  r.reserved_footprint = ByteSize{r.pool_total.value * defaults.slack_num / defaults.slack_den};
  r.pool_covers_required = r.pool_total >= r.required;
  return r;
}

// Decimal megabytes without trailing zeros: 5000000 -> "5", 2500000 -> "2.5".
inline std::string decimal_mb(ByteSize b) {
  const auto whole = b.value / 1'000'000;
  auto frac = b.value % 1'000'000;
  std::string out = std::to_string(whole);
  if (frac != 0) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%06lld", static_cast<long long>(frac));
    std::string f = buf;
    while (!f.empty() && f.back() == '0') f.pop_back();
    out += "." + f;
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> sizing_kv(const SizingInput& in, const SizingReport& r) {
  return {
      {"rate_bytes_per_s", std::to_string(in.rate.value)},
      {"timespan_ns", std::to_string(in.timespan.value)},
      {"required_buffer_bytes", std::to_string(r.required.value)},
      {"required_buffer_mb", decimal_mb(r.required)},
      {"recommended_srq_bytes", std::to_string(r.srq.value)},
      {"recommended_read_bytes", std::to_string(r.read.value)},
      {"recommended_pool_bytes", std::to_string(r.pool_total.value)},
      {"recommended_srq_min_bytes", std::to_string(r.srq_min.value)},
      {"reserved_llc_bytes", std::to_string(r.reserved_footprint.value)},
      {"pool_covers_required", r.pool_covers_required ? "true" : "false"},
  };
}

}  // namespace rdca
