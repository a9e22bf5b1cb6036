#pragma once

// Metric stream rows and the run summary, with their text encodings.

#include <array>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rdca {

// Column set and order are part of the output contract.
inline constexpr std::array<std::string_view, 30> kMetricColumns = {
    "time_ns",
    "net_throughput_gbps",
    "goodput_gbps",
    "avg_lat_us",
    "p99_lat_us",
    "pfc_paused_us",
    "cnp_count",
    "drops",
    "ddio_miss_rate",
    "pcie_stalls",
    "mem_bw_cpu",
    "mem_bw_nic",
    "free_srq_bytes",
    "free_read_bytes",
    "live_bytes",
    "replacement_bytes",
    "queued_high",
    "queued_low",
    "concurrency_in_use",
    "inflight_used_bytes",
    "admit_count",
    "blocked_count",
    "avg_post_rnic_us",
    "p99_post_rnic_us",
    "stragglers_total",
    "releases_per_tick",
    "escape_actions",
    "replace_mem_bytes",
    "copy_bytes",
    "ecn_lowered_flag",
};

// One row per sampling tick. Counters are deltas over the sampling window;
// pool and window fields are instantaneous.
struct MetricSample {
  std::int64_t time_ns{0};
  double net_throughput_gbps{0};
  double goodput_gbps{0};
  double avg_lat_us{0};
  double p99_lat_us{0};
  double pfc_paused_us{0};
  std::int64_t cnp_count{0};
  std::int64_t drops{0};
  double ddio_miss_rate{0};
  std::int64_t pcie_stalls{0};
  std::int64_t mem_bw_cpu{0};
  std::int64_t mem_bw_nic{0};
  std::int64_t free_srq_bytes{0};
  std::int64_t free_read_bytes{0};
  std::int64_t live_bytes{0};
  std::int64_t replacement_bytes{0};
  std::int64_t queued_high{0};
  std::int64_t queued_low{0};
  std::int64_t concurrency_in_use{0};
  std::int64_t inflight_used_bytes{0};
  std::int64_t admit_count{0};
  std::int64_t blocked_count{0};
  double avg_post_rnic_us{0};
  double p99_post_rnic_us{0};
  std::int64_t stragglers_total{0};
  std::int64_t releases_per_tick{0};
  std::int64_t escape_actions{0};
  std::int64_t replace_mem_bytes{0};
  std::int64_t copy_bytes{0};
  std::int64_t ecn_lowered_flag{0};
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string csv_header() {
  std::string out;
  for (std::size_t i = 0; i < kMetricColumns.size(); ++i) {
    if (i) out += ',';
    out += kMetricColumns[i];
  }
  return out;
}

inline std::string to_csv_row(const MetricSample& s) {
  std::string out;
  auto i = [&](std::int64_t v) {
    if (!out.empty()) out += ',';
    out += std::to_string(v);
  };
  auto d = [&](double v) {
    if (!out.empty()) out += ',';
    out += format_double(v);
  };
  out = std::to_string(s.time_ns);
  d(s.net_throughput_gbps);
  d(s.goodput_gbps);
  d(s.avg_lat_us);
  d(s.p99_lat_us);
  d(s.pfc_paused_us);
  i(s.cnp_count);
  i(s.drops);
  d(s.ddio_miss_rate);
  i(s.pcie_stalls);
  i(s.mem_bw_cpu);
  i(s.mem_bw_nic);
  i(s.free_srq_bytes);
  i(s.free_read_bytes);
  i(s.live_bytes);
  i(s.replacement_bytes);
  i(s.queued_high);
  i(s.queued_low);
  i(s.concurrency_in_use);
  i(s.inflight_used_bytes);
  i(s.admit_count);
  i(s.blocked_count);
  d(s.avg_post_rnic_us);
  d(s.p99_post_rnic_us);
  i(s.stragglers_total);
  i(s.releases_per_tick);
  i(s.escape_actions);
  i(s.replace_mem_bytes);
  i(s.copy_bytes);
  i(s.ecn_lowered_flag);
  return out;
}

inline std::string to_csv(const std::vector<MetricSample>& rows) {
  std::string out = csv_header() + "\n";
  for (const auto& r : rows) out += to_csv_row(r) + "\n";
  return out;
}

// Run totals. Latency and throughput exclude the warm-up prefix; event
// counters cover the whole run.
struct Summary {
  std::int64_t duration_ns{0};
  std::int64_t measured_ns{0};
  std::int64_t messages_completed{0};
  std::int64_t messages_lost{0};
  std::int64_t goodput_bytes{0};
  std::int64_t goodput_bytes_per_s{0};
  std::int64_t net_bytes{0};
  double goodput_gbps{0};
  double net_throughput_gbps{0};
  double avg_lat_us{0};
  double p99_lat_us{0};
  std::int64_t pfc_paused_ns{0};
  std::int64_t cnp_count{0};
  std::int64_t drops{0};
  std::int64_t dropped_bytes{0};
  std::int64_t ddio_hits{0};
  std::int64_t ddio_misses{0};
  double ddio_miss_rate{0};
  std::int64_t pool_writes{0};
  std::int64_t pool_misses{0};
  double pool_miss_rate{0};
  std::int64_t writeback_bytes{0};
  std::int64_t pcie_stalls{0};
  std::int64_t rnr_stalls{0};
  std::int64_t escape_evaluations{0};
  std::int64_t escape_actions{0};
  std::int64_t escape_replace{0};
  std::int64_t escape_copy{0};
  std::int64_t escape_copy_failed{0};
  std::int64_t escape_mark_ecn{0};
  std::int64_t max_replace_mem_bytes{0};
  std::int64_t steady_replace_mem_bytes{0};
  std::int64_t copy_bytes_total{0};
  std::int64_t max_copy_window_bytes{0};
  std::int64_t copy_rate_limit_bytes_per_s{0};
  std::int64_t ecn_transitions{0};
  std::int64_t straggler_checks{0};
  std::int64_t straggler_mismatches{0};
  std::int64_t window_violations{0};
  double avg_post_rnic_us{0};
  double p99_post_rnic_us{0};
  double final_sender_rate_gbps{0};
  std::int64_t events_processed{0};

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    std::vector<std::pair<std::string, std::string>> kv;
    auto i = [&](const char* k, std::int64_t v) { kv.emplace_back(k, std::to_string(v)); };
    auto d = [&](const char* k, double v) { kv.emplace_back(k, format_double(v)); };
    i("duration_ns", duration_ns);
    i("measured_ns", measured_ns);
    i("messages_completed", messages_completed);
    i("messages_lost", messages_lost);
    i("goodput_bytes", goodput_bytes);
    i("goodput_bytes_per_s", goodput_bytes_per_s);
    d("goodput_gbps", goodput_gbps);
    i("net_bytes", net_bytes);
    d("net_throughput_gbps", net_throughput_gbps);
    d("avg_lat_us", avg_lat_us);
    d("p99_lat_us", p99_lat_us);
    i("pfc_paused_ns", pfc_paused_ns);
    i("cnp_count", cnp_count);
    i("drops", drops);
    i("dropped_bytes", dropped_bytes);
    i("ddio_hits", ddio_hits);
    i("ddio_misses", ddio_misses);
    d("ddio_miss_rate", ddio_miss_rate);
    i("pool_writes", pool_writes);
    i("pool_misses", pool_misses);
    d("pool_miss_rate", pool_miss_rate);
    i("writeback_bytes", writeback_bytes);
    i("pcie_stalls", pcie_stalls);
    i("rnr_stalls", rnr_stalls);
    i("escape_evaluations", escape_evaluations);
    i("escape_actions", escape_actions);
    i("escape_replace", escape_replace);
    i("escape_copy", escape_copy);
    i("escape_copy_failed", escape_copy_failed);
    i("escape_mark_ecn", escape_mark_ecn);
    i("max_replace_mem_bytes", max_replace_mem_bytes);
    i("steady_replace_mem_bytes", steady_replace_mem_bytes);
    i("copy_bytes_total", copy_bytes_total);
    i("max_copy_window_bytes", max_copy_window_bytes);
    i("copy_rate_limit_bytes_per_s", copy_rate_limit_bytes_per_s);
    i("ecn_transitions", ecn_transitions);
    i("straggler_checks", straggler_checks);
    i("straggler_mismatches", straggler_mismatches);
    i("window_violations", window_violations);
    d("avg_post_rnic_us", avg_post_rnic_us);
    d("p99_post_rnic_us", p99_post_rnic_us);
    d("final_sender_rate_gbps", final_sender_rate_gbps);
    i("events_processed", events_processed);
    return kv;
  }
};

}  // namespace rdca
