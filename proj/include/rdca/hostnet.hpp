#pragma once

// Rate-level model of the contended receiver host: memory bus with CPU
// priority, DDIO residency (LRU over 4 KB line groups), PCIe stall counting,
// the RNIC receive buffer with ECN/PFC signalling, a DCQCN-style sender rate
// controller and the memory-bandwidth competitor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <list>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "rdca/core.hpp"

namespace rdca {

enum class NetworkKind { Lossless25G, Lossy100G, Lossy25G };

inline const char* to_string(NetworkKind n) {
  switch (n) {
    case NetworkKind::Lossless25G: return "lossless25g";
    case NetworkKind::Lossy100G: return "lossy100g";
    case NetworkKind::Lossy25G: return "lossy25g";
  }
  return "?";
}

inline constexpr ByteSize kLineGroup = KiB(4);

// Deterministic uniform doubles in [0, 1) from a 64-bit Mersenne Twister.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double exponential(double mean) { return mean <= 0 ? 0.0 : -mean * std::log1p(-uniform()); }

 private:
  std::mt19937_64 gen_;
};

struct DcqcnConfig {
  double g = 1.0 / 16.0;
  Nanos update_period = us(55);
  std::int64_t fast_recovery_steps{5};
  Bandwidth additive_increase = gbps(1) ;  // per period once fast recovery ends
  Bandwidth min_rate = Bandwidth{12'500'000};  // 100 Mbps floor
  Nanos cnp_interval = us(50);                  // minimum spacing of CNPs
};

struct HostConfig {
  Bandwidth mem_capacity = gb_per_s(250);
  ByteSize ddio_ways = MiB(6);
  Bandwidth line_rate = gbps(100);
  Bandwidth pcie_capacity = Bandwidth{31'500'000'000};
  bool lossless{false};

  ByteSize rnic_capacity = MiB(2);
  ByteSize ecn_threshold = KiB(256);         // marking starts above this
  ByteSize ecn_full_mark = MiB(1);           // marking probability reaches ecn_max_prob here
  double ecn_max_prob{0.2};
  ByteSize ecn_danger_threshold = KiB(4);    // lowered threshold while the pool is in danger
  ByteSize xoff = KiB(1536);
  ByteSize xon = MiB(1);

  DcqcnConfig dcqcn;

  static HostConfig preset(NetworkKind n) {
    HostConfig c;
    switch (n) {
      case NetworkKind::Lossy100G:
        break;
      case NetworkKind::Lossless25G:
      case NetworkKind::Lossy25G:
        c.mem_capacity = gb_per_s(60);
        c.ddio_ways = MiB(4);
        c.line_rate = gbps(25);
        c.pcie_capacity = Bandwidth{7'880'000'000};
        c.lossless = n == NetworkKind::Lossless25G;
        c.dcqcn.additive_increase = Bandwidth{gbps(1).value / 4};
        break;
    }
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
    if (mem_capacity.value <= 0 || line_rate.value <= 0 || pcie_capacity.value <= 0) fail("rates must be positive");
    if (ddio_ways.value < kLineGroup.value) fail("ddio_ways must hold at least one line group");
    if (rnic_capacity.value <= 0) fail("rnic_capacity must be positive");
    if (xon > xoff || xoff > rnic_capacity) fail("need xon <= xoff <= rnic_capacity");
    if (ecn_full_mark <= ecn_threshold) fail("ecn_full_mark must exceed ecn_threshold");
    if (ecn_max_prob < 0 || ecn_max_prob > 1) fail("ecn_max_prob must be in [0,1]");
    if (dcqcn.min_rate.value <= 0 || dcqcn.min_rate > line_rate) fail("dcqcn.min_rate must be in (0, line_rate]");
    if (dcqcn.g <= 0 || dcqcn.g > 1) fail("dcqcn.g must be in (0,1]");
    if (dcqcn.update_period.value <= 0) fail("dcqcn.update_period must be positive");
  }
};

struct BusGrant {
  Bandwidth cpu;
  Bandwidth nic;
};

// The CPU is served first; the RNIC gets what is left.
class MemoryBus {
 public:
  explicit MemoryBus(Bandwidth capacity) : capacity_(capacity) {}

  Bandwidth capacity() const { return capacity_; }

  BusGrant arbitrate(Bandwidth cpu_demand, Bandwidth nic_demand) const {
    const auto cpu = std::min(cpu_demand, capacity_);
    const auto nic = std::min(nic_demand, capacity_ - cpu);
    return {cpu, nic};
  }

 private:
  Bandwidth capacity_;
};

enum class DdioOutcome { Update, Allocate };

struct DdioWrite {
  DdioOutcome outcome{DdioOutcome::Update};
  ByteSize writeback{0};
};

// LRU residency over 4 KB line groups limited to the DDIO ways. Groups in
// the CAT-reserved pool are always resident and bypass the LRU.
class DdioModel {
 public:
  explicit DdioModel(ByteSize ways_capacity) : capacity_groups_(ways_capacity.value / kLineGroup.value) {}

  std::int64_t capacity_groups() const { return capacity_groups_; }
  std::int64_t resident_groups() const { return static_cast<std::int64_t>(lru_.size()); }

  bool resident(std::uint64_t group) const { return where_.count(group) != 0; }

  // True when writing `group` would evict a dirty victim.
  bool needs_writeback(std::uint64_t group, bool reserved) const {
    return !reserved && !resident(group) && resident_groups() >= capacity_groups_;
  }

  DdioWrite write(std::uint64_t group, bool reserved) {
    if (reserved) {
      ++hits_;
      ++pool_hits_;
      return {DdioOutcome::Update, ByteSize{0}};
    }
    auto it = where_.find(group);
    if (it != where_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second);
      ++hits_;
      return {DdioOutcome::Update, ByteSize{0}};
    }
    ++misses_;
    ByteSize wb{0};
    if (resident_groups() >= capacity_groups_) {
      where_.erase(lru_.back());
      lru_.pop_back();
      wb = kLineGroup;
      writeback_ += wb;
    }
    lru_.push_front(group);
    where_[group] = lru_.begin();
    return {DdioOutcome::Allocate, wb};
  }

  // Writes `bytes` starting at `first_group`, one result per touched group.
  std::vector<DdioWrite> write_bytes(std::uint64_t first_group, ByteSize bytes, bool reserved) {
    std::vector<DdioWrite> out;
    const auto groups = ceil_div(bytes.value, kLineGroup.value);
    for (std::int64_t i = 0; i < groups; ++i) out.push_back(write(first_group + static_cast<std::uint64_t>(i), reserved));
    return out;
  }

  std::uint64_t hits() const { return hits_; }
  std::uint64_t misses() const { return misses_; }
  std::uint64_t pool_hits() const { return pool_hits_; }
  std::uint64_t pool_misses() const { return 0; }
  ByteSize writeback_bytes() const { return writeback_; }
  double miss_rate() const {
    const auto total = hits_ + misses_;
    return total ? static_cast<double>(misses_) / static_cast<double>(total) : 0.0;
  }

 private:
  std::int64_t capacity_groups_;
  std::list<std::uint64_t> lru_;
  std::unordered_map<std::uint64_t, std::list<std::uint64_t>::iterator> where_;
  std::uint64_t hits_{0};
  std::uint64_t misses_{0};
  std::uint64_t pool_hits_{0};
  ByteSize writeback_{0};
};

struct PcieModel {
  Bandwidth link_capacity;
  std::uint64_t stalled_writes{0};

  // Counts a stall when the NIC wanted more memory bandwidth than granted.
  void account(Bandwidth nic_demand, Bandwidth nic_grant) {
    if (nic_demand > nic_grant) ++stalled_writes;
  }
};

struct RnicSignals {
  ByteSize accepted;
  ByteSize dropped;
  bool marked{false};
  bool cnp{false};
  bool paused{false};
};

class RnicBuffer {
 public:
  explicit RnicBuffer(const HostConfig& cfg)
      : capacity_(cfg.rnic_capacity),
        normal_threshold_(cfg.ecn_threshold),
        full_mark_(cfg.ecn_full_mark),
        max_prob_(cfg.ecn_max_prob),
        danger_threshold_(cfg.ecn_danger_threshold),
        xoff_(cfg.xoff),
        xon_(cfg.xon),
        lossless_(cfg.lossless),
        cnp_interval_(cfg.dcqcn.cnp_interval) {}

  ByteSize capacity() const { return capacity_; }
  ByteSize occupancy() const { return occupancy_; }
  ByteSize headroom() const { return capacity_ - occupancy_; }
  bool lossless() const { return lossless_; }
  bool paused() const { return paused_; }
  bool threshold_lowered() const { return lowered_; }
  ByteSize ecn_threshold() const { return lowered_ ? danger_threshold_ : normal_threshold_; }

  std::uint64_t drops() const { return drops_; }
  ByteSize dropped_bytes() const { return dropped_bytes_; }
  std::int64_t pfc_paused_ns() const { return pfc_paused_ns_; }
  std::uint64_t cnp_sent() const { return cnp_sent_; }
  std::uint64_t marks() const { return marks_; }
  bool ever_above_threshold() const { return ever_above_; }

  void set_threshold_lowered(bool on) { lowered_ = on; }

  // Accepts up to the free space. In lossy mode the rest is dropped; in
  // lossless mode the sender is expected to have respected the pause, and
  // anything beyond headroom is refused without loss.
  ByteSize ingest(ByteSize bytes) {
    const auto accepted = std::min(bytes, headroom());
    occupancy_ += accepted;
    if (!lossless_ && accepted < bytes) {
      ++drops_;
      dropped_bytes_ += bytes - accepted;
    }
    return accepted;
  }

  void drain(ByteSize bytes) { occupancy_ -= std::min(bytes, occupancy_); }

  // RED-style marking on the current occupancy; at most one CNP per interval.
  RnicSignals signal(SimTime now, Rng& rng) { return signal_flow(0, now, rng); }

  // Marking decision for one flow's arrivals; CNP pacing is per flow.
  RnicSignals signal_flow(std::uint64_t flow, SimTime now, Rng& rng) {
    RnicSignals s;
    const auto th = ecn_threshold();
    if (occupancy_ > th) {
      ever_above_ = true;
      const auto kmax = std::max(full_mark_, th + kLineGroup);
      double p = occupancy_ >= kmax ? 1.0
                                    : max_prob_ * static_cast<double>((occupancy_ - th).value) /
                                          static_cast<double>((kmax - th).value);
      if (lowered_) p = 1.0;
      if (p >= 1.0 || rng.uniform() < p) {
        s.marked = true;
        ++marks_;
        auto last = last_cnp_.find(flow);
        if (last == last_cnp_.end() || now - last->second >= cnp_interval_) {
          s.cnp = true;
          ++cnp_sent_;
          last_cnp_[flow] = now;
        }
      }
    }
    return s;
  }

  // PFC hysteresis, accumulated over one tick of length dt.
  bool update_pause(Nanos dt) {
    if (!lossless_) return false;
    if (!paused_ && occupancy_ >= xoff_) paused_ = true;
    if (paused_ && occupancy_ <= xon_) paused_ = false;
    if (paused_) pfc_paused_ns_ += dt.value;
    return paused_;
  }

 private:
  ByteSize capacity_;
  ByteSize normal_threshold_;
  ByteSize full_mark_;
  double max_prob_;
  ByteSize danger_threshold_;
  ByteSize xoff_;
  ByteSize xon_;
  bool lossless_;
  Nanos cnp_interval_;

  ByteSize occupancy_{0};
  bool paused_{false};
  bool lowered_{false};
  bool ever_above_{false};
  std::uint64_t drops_{0};
  ByteSize dropped_bytes_{0};
  std::int64_t pfc_paused_ns_{0};
  std::uint64_t cnp_sent_{0};
  std::uint64_t marks_{0};
  std::map<std::uint64_t, SimTime> last_cnp_;
};

// Max-min fair split of `budget` over `demands`; each share is capped by its
// demand and leftover capacity is redistributed. Integer rounding leaves at
// most n-1 bytes unassigned.
inline std::vector<std::int64_t> water_fill(const std::vector<std::int64_t>& demands, std::int64_t budget) {
  std::vector<std::size_t> order(demands.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return demands[a] < demands[b]; });
  std::vector<std::int64_t> out(demands.size(), 0);
  auto left = std::max<std::int64_t>(budget, 0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto share = left / static_cast<std::int64_t>(order.size() - k);
    const auto g = std::clamp<std::int64_t>(demands[order[k]], 0, share);
    out[order[k]] = g;
    left -= g;
  }
  return out;
}

// One tick of RNIC ingest with a fixed drain: arrivals, marking, drain, PFC.
inline RnicSignals rnic_ingest(RnicBuffer& buf, ByteSize arrivals, ByteSize drain, SimTime now, Nanos dt, Rng& rng) {
  auto offered = arrivals;
  if (buf.lossless() && buf.paused()) offered = ByteSize{0};
  RnicSignals s;
  const auto before_drops = buf.dropped_bytes();
  s.accepted = buf.ingest(offered);
  s.dropped = buf.dropped_bytes() - before_drops;
  const auto sig = buf.signal(now, rng);
  s.marked = sig.marked;
  s.cnp = sig.cnp;
  buf.drain(drain);
  s.paused = buf.update_pause(dt);
  return s;
}

// DCQCN-style reaction point: multiplicative decrease on CNP, then timed
// fast recovery toward the pre-cut rate followed by additive increase.
class DcqcnLite {
 public:
  DcqcnLite(Bandwidth line_rate, DcqcnConfig cfg)
      : cfg_(cfg), line_(static_cast<double>(line_rate.value)), current_(line_), target_(line_) {}

  Bandwidth rate() const { return Bandwidth{static_cast<std::int64_t>(current_)}; }
  Bandwidth target() const { return Bandwidth{static_cast<std::int64_t>(target_)}; }
  double alpha() const { return alpha_; }
  std::uint64_t cuts() const { return cuts_; }

  void on_cnp(SimTime now) {
    alpha_ = (1.0 - cfg_.g) * alpha_ + cfg_.g;
    target_ = current_;
    current_ = std::max(static_cast<double>(cfg_.min_rate.value), current_ * (1.0 - alpha_ / 2.0));
    stage_ = 0;
    next_update_ = now + cfg_.update_period;
    ++cuts_;
  }

  void tick(SimTime now) {
    if (!next_update_) next_update_ = now + cfg_.update_period;
    while (now >= *next_update_) {
      alpha_ = (1.0 - cfg_.g) * alpha_;
      ++stage_;
      if (stage_ > cfg_.fast_recovery_steps) {
        target_ = std::min(line_, target_ + static_cast<double>(cfg_.additive_increase.value));
      }
      current_ = std::min(line_, (current_ + target_) / 2.0);
      *next_update_ += cfg_.update_period;
    }
  }

 private:
  DcqcnConfig cfg_;
  double line_;
  double current_;
  double target_;
  double alpha_{1.0};
  std::int64_t stage_{0};
  std::optional<SimTime> next_update_;
  std::uint64_t cuts_{0};
};

// Memory-bandwidth generator: passes over a chunk, each pass reading and
// writing it once, `frequency_hz` passes per second.
struct CompetitorProfile {
  ByteSize chunk = MiB(128);
  double frequency_hz{0.0};
  bool saturating{false};
  Nanos start{0};
  Nanos ramp{0};  // linear ramp-up from zero after `start`

  Bandwidth steady_demand(Bandwidth capacity) const {
    if (saturating) return capacity;
    const double d = 2.0 * static_cast<double>(chunk.value) * frequency_hz;
    if (d >= static_cast<double>(capacity.value)) return capacity;
    return Bandwidth{static_cast<std::int64_t>(d)};
  }

  Bandwidth demand_at(SimTime t, Bandwidth capacity) const {
    if (t < start) return Bandwidth{0};
    const auto full = steady_demand(capacity);
    if (ramp.value <= 0 || t - start >= ramp) return full;
    return Bandwidth{static_cast<std::int64_t>(static_cast<__int128>(full.value) * (t - start).value / ramp.value)};
  }

  static double saturating_frequency(ByteSize chunk, Bandwidth capacity) {
    return static_cast<double>(capacity.value) / (2.0 * static_cast<double>(chunk.value));
  }
};

inline std::vector<Bandwidth> membw_competitor(const CompetitorProfile& p, Bandwidth capacity, Nanos duration,
                                               Nanos step) {
  std::vector<Bandwidth> out;
  for (SimTime t{0}; t < duration; t += step) out.push_back(p.demand_at(t, capacity));
  return out;
}

}  // namespace rdca
