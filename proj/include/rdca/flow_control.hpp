#pragma once

// Receiver-side read control for large messages: priority admission queues,
// a request-count concurrency window, a byte-count in-flight window and
// fixed-size fragmentation. Small messages bypass this path and land in
// posted SRQ buffers (recv_small).

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "rdca/cache_pool.hpp"
#include "rdca/core.hpp"

namespace rdca {

enum class Qos { High, Low };

inline const char* to_string(Qos q) { return q == Qos::High ? "High" : "Low"; }

// Splits `size` into chunks of `fragment_max`, remainder last.
inline std::vector<ByteSize> fragment(ByteSize size, ByteSize fragment_max) {
  if (size.value <= 0) throw Error(Errc::ZeroSizeMessage, "fragment of non-positive size");
  if (fragment_max.value <= 0) throw Error(Errc::ConfigError, "fragment_max must be positive");
  std::vector<ByteSize> out;
  out.reserve(static_cast<std::size_t>(ceil_div(size.value, fragment_max.value)));
  for (auto left = size.value; left > 0; left -= fragment_max.value) {
    out.push_back(ByteSize{std::min(left, fragment_max.value)});
  }
  return out;
}

struct ReadRequest {
  Message msg;
  ByteSize remaining;  // bytes not yet completed
  std::int64_t fragments_issued{0};
  Qos qos{Qos::High};
  SimTime enqueued_at;
  Nanos expected_timespan{us(200)};

  ByteSize issued_bytes{0};
  std::int64_t fragments_in_flight{0};
  SimTime admitted_at;
};

struct Fragment {
  std::uint64_t id{0};
  MsgId parent;
  std::int64_t index{0};
  ByteSize offset;
  ByteSize size;
  BufferHandle handle;
  bool memory_fallback{false};  // Low-QoS overflow placed in ordinary memory
};

struct FlowWindows {
  std::int64_t concurrency_limit{32};
  std::int64_t concurrency_in_use{0};
  ByteSize inflight_limit = MiB(8);
  ByteSize inflight_used{0};

  bool valid() const {
    return concurrency_in_use >= 0 && concurrency_in_use <= concurrency_limit && inflight_used.value >= 0 &&
           inflight_used <= inflight_limit;
  }
};

struct FlowConfig {
  ByteSize fragment_max = KiB(256);
  std::int64_t concurrency_limit{32};
  ByteSize inflight_limit = MiB(8);
  Bandwidth line_rate = gbps(100);
  Nanos expected_timespan = us(200);
  bool low_qos_memory_fallback{true};

  void validate() const {
    if (fragment_max.value <= 0) throw Error(Errc::ConfigError, "fragment_max must be positive");
    if (concurrency_limit <= 0) throw Error(Errc::ConfigError, "concurrency_limit must be positive");
    if (inflight_limit < fragment_max) throw Error(Errc::ConfigError, "inflight_limit must hold one fragment");
    if (line_rate.value <= 0) throw Error(Errc::ConfigError, "line_rate must be positive");
    if (expected_timespan.value < 0) throw Error(Errc::ConfigError, "expected_timespan must be non-negative");
  }
};

// Expected throughput of the next admitted request. The default is a fair
// share of the line rate.
using ThroughputEstimator = std::function<Bandwidth(Bandwidth line_rate, const FlowWindows&)>;

inline Bandwidth fair_share(Bandwidth line_rate, const FlowWindows& w) {
  return Bandwidth{line_rate.value / (w.concurrency_in_use + 1)};
}

enum class BlockReason { None, InflightFull, PoolExhausted, NotAdmitted, NothingLeft };

struct FragmentCompletion {
  MsgId msg;
  bool message_done{false};
};

class FlowController {
 public:
  explicit FlowController(FlowConfig cfg = {}, ThroughputEstimator est = fair_share)
      : cfg_(cfg), estimator_(std::move(est)) {
    cfg_.validate();
    windows_.concurrency_limit = cfg_.concurrency_limit;
    windows_.inflight_limit = cfg_.inflight_limit;
  }

  const FlowConfig& config() const { return cfg_; }
  const FlowWindows& windows() const { return windows_; }
  std::size_t queued(Qos q) const { return queue(q).size(); }
  std::size_t active_count() const { return active_.size(); }
  std::size_t fragments_outstanding() const { return issued_.size(); }
  std::uint64_t admit_count() const { return admit_count_; }
  std::uint64_t blocked_count() const { return blocked_count_; }
  BlockReason last_block() const { return last_block_; }

  ReadRequest make_request(const Message& msg, Qos qos, SimTime now) const {
    ReadRequest r;
    r.msg = msg;
    r.remaining = msg.size;
    r.qos = qos;
    r.enqueued_at = now;
    r.expected_timespan = cfg_.expected_timespan;
    return r;
  }

  void submit(ReadRequest req) {
    if (req.msg.kind != MsgKind::Large) throw Error(Errc::WrongPath, "small messages use the SRQ path");
    queue(req.qos).push_back(std::move(req));
  }

  ByteSize expected_footprint(const ReadRequest& r) const {
    return transfer(estimator_(cfg_.line_rate, windows_), r.expected_timespan);
  }

  // Admits queued requests, High before Low and FIFO within a class, while
  // the concurrency window, in-flight window and footprint predicate all hold.
  // A blocked head blocks everything behind it.
  std::vector<MsgId> admit(ByteSize remaining_read_capacity, SimTime now) {
    std::vector<MsgId> out;
    for (Qos q : {Qos::High, Qos::Low}) {
      auto& fifo = queue(q);
      while (!fifo.empty()) {
        auto& head = fifo.front();
        if (windows_.concurrency_in_use >= windows_.concurrency_limit) return out;
        const auto next = std::min(head.remaining, cfg_.fragment_max);
        if (windows_.inflight_used + next > windows_.inflight_limit) return out;
        if (expected_footprint(head) > remaining_read_capacity) return out;
        ++windows_.concurrency_in_use;
        ++admit_count_;
        head.admitted_at = now;
        out.push_back(head.msg.id);
        order_.push_back(head.msg.id);
        active_.emplace(head.msg.id, std::move(head));
        fifo.pop_front();
      }
    }
    return out;
  }

  // Issues the next fragment of an admitted request. Returns nullopt when
  // blocked; no state changes in that case.
  std::optional<Fragment> issue_fragment(MsgId msg, CachePool& pool, SimTime now) {
    auto it = active_.find(msg);
    if (it == active_.end()) return block(BlockReason::NotAdmitted);
    auto& req = it->second;
    const auto left = req.msg.size - req.issued_bytes;
    if (left.value <= 0) return block(BlockReason::NothingLeft);
    const auto size = std::min(left, cfg_.fragment_max);
    if (windows_.inflight_used + size > windows_.inflight_limit) return block(BlockReason::InflightFull);

    Fragment f;
    if (auto h = pool.alloc(Region::Read, size, req.msg.app, now)) {
      f.handle = *h;
    } else if (req.qos == Qos::Low && cfg_.low_qos_memory_fallback) {
      f.handle = BufferHandle{kMemoryHandleBase + next_memory_handle_++, Region::EscapeMem, req.msg.app,
                              ByteSize{pool.objects_for(size) * pool.object_size().value}, now, false};
      f.memory_fallback = true;
    } else {
      return block(BlockReason::PoolExhausted);
    }
    f.id = next_fragment_++;
    f.parent = msg;
    f.index = req.fragments_issued++;
    f.offset = req.issued_bytes;
    f.size = size;
    req.issued_bytes += size;
    ++req.fragments_in_flight;
    windows_.inflight_used += size;
    issued_.emplace(f.id, f);
    last_block_ = BlockReason::None;
    return f;
  }

  // Issues fragments round-robin over admitted requests (admission order)
  // until a pass makes no progress or the pool/window blocks.
  std::vector<Fragment> pump(CachePool& pool, SimTime now) {
    std::vector<Fragment> out;
    bool progress = true;
    while (progress) {
      progress = false;
      for (auto id : order_) {
        const auto& req = active_.at(id);
        if (req.issued_bytes >= req.msg.size) continue;
        auto f = issue_fragment(id, pool, now);
        if (!f) {
          if (last_block_ == BlockReason::InflightFull || last_block_ == BlockReason::PoolExhausted) return out;
          continue;
        }
        out.push_back(*f);
        progress = true;
      }
    }
    return out;
  }

  FragmentCompletion complete_fragment(std::uint64_t fragment_id) {
    auto it = issued_.find(fragment_id);
    if (it == issued_.end()) throw Error(Errc::UnknownFragment, "fragment " + std::to_string(fragment_id));
    const auto frag = it->second;
    issued_.erase(it);
    auto& req = active_.at(frag.parent);
    windows_.inflight_used -= frag.size;
    req.remaining -= frag.size;
    --req.fragments_in_flight;
    FragmentCompletion done{frag.parent, false};
    if (req.remaining.value == 0) {
      --windows_.concurrency_in_use;
      active_.erase(frag.parent);
      order_.erase(std::find(order_.begin(), order_.end(), frag.parent));
      done.message_done = true;
    }
    return done;
  }

  const Fragment& fragment_info(std::uint64_t fragment_id) const {
    auto it = issued_.find(fragment_id);
    if (it == issued_.end()) throw Error(Errc::UnknownFragment, "fragment " + std::to_string(fragment_id));
    return it->second;
  }
  const ReadRequest* request(MsgId id) const {
    auto it = active_.find(id);
    return it == active_.end() ? nullptr : &it->second;
  }

  static bool is_memory_handle(std::uint64_t handle_id) { return handle_id >= kMemoryHandleBase; }

 private:
  static constexpr std::uint64_t kMemoryHandleBase = 1ull << 62;

  std::deque<ReadRequest>& queue(Qos q) { return q == Qos::High ? high_ : low_; }
  const std::deque<ReadRequest>& queue(Qos q) const { return q == Qos::High ? high_ : low_; }

  std::nullopt_t block(BlockReason r) {
    last_block_ = r;
    if (r == BlockReason::InflightFull || r == BlockReason::PoolExhausted) ++blocked_count_;
    return std::nullopt;
  }

  FlowConfig cfg_;
  ThroughputEstimator estimator_;
  FlowWindows windows_;
  std::deque<ReadRequest> high_;
  std::deque<ReadRequest> low_;
  std::map<MsgId, ReadRequest> active_;
  std::vector<MsgId> order_;
  std::map<std::uint64_t, Fragment> issued_;
  std::uint64_t next_fragment_{1};
  std::uint64_t next_memory_handle_{0};
  std::uint64_t admit_count_{0};
  std::uint64_t blocked_count_{0};
  BlockReason last_block_{BlockReason::None};
};

// Small-message receive: the message lands in one posted SRQ WQE buffer.
// nullopt means no WQE was posted (receiver not ready).
inline std::optional<BufferHandle> recv_small(const Message& msg, CachePool& pool, SimTime now) {
  if (msg.kind != MsgKind::Small) throw Error(Errc::WrongPath, "large messages use the READ path");
  return pool.consume_wqe(msg.app, now);
}

}  // namespace rdca
