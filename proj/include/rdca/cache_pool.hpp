#pragma once

// Cache-resident buffer pool: a fixed reserved-LLC region split into an SRQ
// region (small messages, WQE-bound 4 KB buffers) and a READ region (large
// message fragments), slab-allocated in fixed-size objects.
//
// Escape may add memory-backed objects ("replacement" objects) to a region's
// free list. Those are tracked separately so that residency accounting never
// treats them as cache.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rdca/core.hpp"

namespace rdca {

enum class Region { Srq, Read, EscapeMem };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::Srq: return "Srq";
    case Region::Read: return "Read";
    case Region::EscapeMem: return "EscapeMem";
  }
  return "?";
}

struct PoolConfig {
  ByteSize total_capacity = MiB(12);
  ByteSize srq_initial = MiB(4);
  ByteSize read_initial = MiB(8);
  ByteSize srq_min = MiB(1);
  ByteSize object_size = KiB(4);
  // Reserved LLC footprint = total_capacity * slack_num / slack_den.
  std::int64_t slack_num = 5;
  std::int64_t slack_den = 4;
  // WQEs posted at init. Negative means "fill the SRQ region".
  std::int64_t initial_wqes = -1;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
    if (object_size.value <= 0) fail("object_size must be positive");
    if (total_capacity.value <= 0) fail("total_capacity must be positive");
    if (srq_initial.value < 0 || read_initial.value < 0) fail("region sizes must be non-negative");
    if (srq_initial + read_initial != total_capacity) fail("srq_initial + read_initial must equal total_capacity");
    if (srq_min > srq_initial) fail("srq_min must not exceed srq_initial");
    if (srq_min.value < 0) fail("srq_min must be non-negative");
    if (total_capacity.value % object_size.value != 0) fail("total_capacity must be a multiple of object_size");
    if (srq_initial.value % object_size.value != 0) fail("srq_initial must be a multiple of object_size");
    if (slack_den <= 0 || slack_num < slack_den) fail("slack factor must be >= 1");
    if (initial_wqes > srq_initial.value / object_size.value) fail("initial_wqes exceed SRQ capacity");
  }
};

struct BufferHandle {
  std::uint64_t id{0};
  Region region{Region::Read};  // EscapeMem when any backing object is memory
  AppId app;
  ByteSize size;
  SimTime alloc_time;
  bool released{false};
};

struct PoolStats {
  ByteSize free_srq;
  ByteSize free_read;
  ByteSize live;
  ByteSize replacement;
};

class CachePool {
 public:
  using ObjectId = std::uint32_t;

  explicit CachePool(PoolConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    obj_ = cfg_.object_size.value;
    cache_objects_ = cfg_.total_capacity.value / obj_;
    const auto srq = cfg_.srq_initial.value / obj_;
    next_mem_id_ = static_cast<ObjectId>(cache_objects_);
    // Lower ids are handed out first (LIFO stack, so push in reverse).
    for (std::int64_t i = srq - 1; i >= 0; --i) region(Region::Srq).free_cache.push_back(static_cast<ObjectId>(i));
    for (std::int64_t i = cache_objects_ - 1; i >= srq; --i) region(Region::Read).free_cache.push_back(static_cast<ObjectId>(i));
    region(Region::Srq).capacity = srq;
    region(Region::Read).capacity = cache_objects_ - srq;
    srq_min_objects_ = cfg_.srq_min.value / obj_;
    const auto wqes = cfg_.initial_wqes < 0 ? srq : cfg_.initial_wqes;
    post_wqes(wqes);
  }

  const PoolConfig& config() const { return cfg_; }
  ByteSize object_size() const { return ByteSize{obj_}; }
  std::int64_t total_cache_objects() const { return cache_objects_; }
  bool is_cache_object(ObjectId o) const { return o < cache_objects_; }

  std::int64_t objects_for(ByteSize size) const { return ceil_div(size.value, obj_); }

  // Region capacity in cache objects (rebalance moves this between regions).
  std::int64_t capacity_objects(Region r) const { return region(r).capacity; }
  std::int64_t replacement_objects(Region r) const { return region(r).replacement; }
  std::int64_t free_objects(Region r) const {
    const auto& s = region(r);
    return static_cast<std::int64_t>(s.free_cache.size() + s.free_mem.size());
  }
  std::int64_t free_cache_objects(Region r) const { return static_cast<std::int64_t>(region(r).free_cache.size()); }
  std::int64_t posted_wqes() const { return posted_; }
  std::int64_t wqe_target() const { return wqe_target_; }

  ByteSize available() const { return ByteSize{(free_objects(Region::Srq) + free_objects(Region::Read)) * obj_}; }
  ByteSize free_bytes(Region r) const { return ByteSize{free_objects(r) * obj_}; }
  ByteSize replace_mem_size() const {
    return ByteSize{(region(Region::Srq).replacement + region(Region::Read).replacement) * obj_};
  }
  std::int64_t replaced_live_objects() const { return replaced_live_; }

  // Capacity that recycling can hand out: every cache object plus every
  // replacement object, minus objects pinned by replaced stragglers.
  std::int64_t recyclable_objects() const {
    return cache_objects_ + region(Region::Srq).replacement + region(Region::Read).replacement - replaced_live_;
  }

  ByteSize reserved_footprint() const {
    return ByteSize{cfg_.total_capacity.value * cfg_.slack_num / cfg_.slack_den};
  }

  PoolStats stats() const {
    std::int64_t live = 0;
    for (const auto& [id, e] : live_) live += static_cast<std::int64_t>(e.objects.size() - e.cursor);
    return {free_bytes(Region::Srq), free_bytes(Region::Read), ByteSize{live * obj_}, replace_mem_size()};
  }

  std::optional<BufferHandle> alloc(Region r, ByteSize size, AppId app, SimTime now) {
    if (size.value <= 0) throw Error(Errc::ZeroSizeMessage, "alloc of non-positive size");
    if (r == Region::EscapeMem) throw Error(Errc::ConfigError, "alloc targets Srq or Read");
    const auto n = objects_for(size);
    auto& s = region(r);
    if (static_cast<std::int64_t>(s.free_cache.size() + s.free_mem.size()) < n) return std::nullopt;
    Entry e;
    e.home = r;
    e.objects.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      auto& list = s.free_cache.empty() ? s.free_mem : s.free_cache;
      e.objects.push_back(list.back());
      list.pop_back();
    }
    if (r == Region::Srq) posted_ = std::min<std::int64_t>(posted_, static_cast<std::int64_t>(s.free_cache.size()));
    return insert(std::move(e), app, n, now);
  }

  // Small-message receive: consumes one posted WQE and its object.
  std::optional<BufferHandle> consume_wqe(AppId app, SimTime now) {
    auto& s = region(Region::Srq);
    if (posted_ == 0 || s.free_cache.empty()) return std::nullopt;
    --posted_;
    Entry e;
    e.home = Region::Srq;
    e.from_wqe = true;
    e.objects.push_back(s.free_cache.back());
    s.free_cache.pop_back();
    return insert(std::move(e), app, 1, now);
  }

  // Posts `count` more receive WQEs on free SRQ objects.
  void post_wqes(std::int64_t count) {
    if (count < 0) throw Error(Errc::ConfigError, "negative WQE count");
    if (count == 0) return;
    const auto free_srq = static_cast<std::int64_t>(region(Region::Srq).free_cache.size());
    if (posted_ + count > free_srq) throw Error(Errc::Exhausted, "not enough free SRQ objects to post WQEs");
    posted_ += count;
    wqe_target_ = std::max(wqe_target_, posted_);
  }

  // Returns every remaining object of the handle.
  void free(std::uint64_t handle_id) {
    auto it = find_live(handle_id);
    auto& e = it->second;
    if (!e.detached) {
      release_range(e, static_cast<std::int64_t>(e.objects.size()) - e.cursor);
    }
    finish(it);
  }

  // Returns the next `count` objects of a handle (slice-granular release).
  // Returns true when the handle has been fully released.
  bool release_objects(std::uint64_t handle_id, std::int64_t count) {
    auto it = find_live(handle_id);
    auto& e = it->second;
    const auto remaining = static_cast<std::int64_t>(e.objects.size()) - e.cursor;
    count = std::min(count, remaining);
    if (e.detached) {
      e.cursor += count;
    } else {
      release_range(e, count);
    }
    if (e.cursor == static_cast<std::int64_t>(e.objects.size())) {
      finish(it);
      return true;
    }
    return false;
  }

  // Buffer replacement: adds memory-backed objects equal to the handle's
  // held objects to its region's free list and pins the handle's objects out
  // of recycling. Returns objects added (0 if already replaced or detached).
  std::int64_t replace(std::uint64_t handle_id, std::int64_t budget_objects) {
    auto it = find_live(handle_id);
    auto& e = it->second;
    if (e.replaced || e.detached) return 0;
    const auto held = static_cast<std::int64_t>(e.objects.size()) - e.cursor;
    if (held == 0 || held > budget_objects) return 0;
    auto& s = region(e.home);
    for (std::int64_t i = 0; i < held; ++i) s.free_mem.push_back(next_mem_id_++);
    s.replacement += held;
    e.replaced = true;
    e.replaced_held = held;
    replaced_live_ += held;
    return held;
  }

  // Data copy: the handle's contents now live in ordinary memory, so all of
  // its pool objects return immediately. The handle stays valid for its app
  // and later releases are accepted without touching the pool.
  std::int64_t detach(std::uint64_t handle_id) {
    auto it = find_live(handle_id);
    auto& e = it->second;
    if (e.detached) return 0;
    const auto held = static_cast<std::int64_t>(e.objects.size()) - e.cursor;
    const auto saved_cursor = e.cursor;
    release_range(e, held);
    e.cursor = saved_cursor;  // releases still count down against the app's view
    e.detached = true;
    return held;
  }

  // Moves free cache objects between regions toward the demand ratio. SRQ
  // capacity never drops below srq_min; live objects never move.
  void rebalance(ByteSize demand_srq, ByteSize demand_read) {
    if (demand_srq.value < 0 || demand_read.value < 0) return;
    const auto total_demand = static_cast<__int128>(demand_srq.value) + demand_read.value;
    if (total_demand == 0) return;
    auto desired = static_cast<std::int64_t>(
        (static_cast<__int128>(cache_objects_) * demand_srq.value + total_demand - 1) / total_demand);
    desired = std::clamp<std::int64_t>(desired, srq_min_objects_, cache_objects_);
    auto& srq = region(Region::Srq);
    auto& read = region(Region::Read);
    if (desired < srq.capacity) {
      const auto k = std::min<std::int64_t>(srq.capacity - desired, static_cast<std::int64_t>(srq.free_cache.size()));
      move_free(srq, read, k);
      posted_ = std::min<std::int64_t>(posted_, static_cast<std::int64_t>(srq.free_cache.size()));
    } else if (desired > srq.capacity) {
      const auto k = std::min<std::int64_t>(desired - srq.capacity, static_cast<std::int64_t>(read.free_cache.size()));
      move_free(read, srq, k);
      repost();
    }
  }

  bool is_live(std::uint64_t handle_id) const { return live_.count(handle_id) != 0; }
  bool is_detached(std::uint64_t handle_id) const {
    auto it = live_.find(handle_id);
    return it != live_.end() && it->second.detached;
  }
  bool is_replaced(std::uint64_t handle_id) const {
    auto it = live_.find(handle_id);
    return it != live_.end() && it->second.replaced;
  }
  const BufferHandle& handle(std::uint64_t handle_id) const { return find_live(handle_id)->second.handle; }
  std::int64_t held_objects(std::uint64_t handle_id) const {
    const auto& e = find_live(handle_id)->second;
    return e.detached ? 0 : static_cast<std::int64_t>(e.objects.size()) - e.cursor;
  }
  std::size_t live_count() const { return live_.size(); }

  // Backing object of the handle's byte offset; used for residency lookups.
  ObjectId object_at(std::uint64_t handle_id, ByteSize offset) const {
    const auto& e = find_live(handle_id)->second;
    return e.objects.at(static_cast<std::size_t>(offset.value / obj_));
  }

  // Full check of per-region conservation and disjoint ownership.
  // Throws InvariantViolation on failure.
  void check_invariants() const {
    std::array<std::int64_t, 2> held{0, 0};
    std::vector<std::uint8_t> seen(next_mem_id_, 0);
    auto claim = [&](ObjectId o) {
      if (o >= seen.size()) throw Error(Errc::InvariantViolation, "object id out of range: " + std::to_string(o));
      if (seen[o]++) throw Error(Errc::InvariantViolation, "object owned twice: " + std::to_string(o));
    };
    std::int64_t replaced = 0;
    for (const auto& [id, e] : live_) {
      if (e.detached) continue;
      for (auto i = static_cast<std::size_t>(e.cursor); i < e.objects.size(); ++i) claim(e.objects[i]);
      held[index(e.home)] += static_cast<std::int64_t>(e.objects.size()) - e.cursor;
      if (e.replaced) replaced += static_cast<std::int64_t>(e.objects.size()) - e.cursor;
    }
    std::int64_t cache_capacity = 0;
    for (Region r : {Region::Srq, Region::Read}) {
      const auto& s = region(r);
      for (auto o : s.free_cache) {
        claim(o);
        if (!is_cache_object(o)) throw Error(Errc::InvariantViolation, "memory object on cache free list");
      }
      for (auto o : s.free_mem) {
        claim(o);
        if (is_cache_object(o)) throw Error(Errc::InvariantViolation, "cache object on memory free list");
      }
      const auto free = static_cast<std::int64_t>(s.free_cache.size() + s.free_mem.size());
      if (free + held[index(r)] != s.capacity + s.replacement) {
        throw Error(Errc::InvariantViolation, std::string("conservation broken in region ") + to_string(r));
      }
      cache_capacity += s.capacity;
    }
    if (cache_capacity != cache_objects_) throw Error(Errc::InvariantViolation, "cache object count changed");
    if (region(Region::Srq).capacity < srq_min_objects_) throw Error(Errc::InvariantViolation, "SRQ below minimum");
    if (replaced != replaced_live_) throw Error(Errc::InvariantViolation, "replaced-object count drift");
    if (posted_ > static_cast<std::int64_t>(region(Region::Srq).free_cache.size())) {
      throw Error(Errc::InvariantViolation, "more posted WQEs than free SRQ objects");
    }
  }

 private:
  struct RegionState {
    std::int64_t capacity{0};
    std::int64_t replacement{0};
    std::int64_t retire_debt{0};
    std::vector<ObjectId> free_cache;
    std::vector<ObjectId> free_mem;
  };

  struct Entry {
    BufferHandle handle;
    Region home{Region::Read};
    std::vector<ObjectId> objects;
    std::int64_t cursor{0};  // objects before the cursor are already released
    bool from_wqe{false};
    bool replaced{false};
    bool detached{false};
    std::int64_t replaced_held{0};
  };

  static std::size_t index(Region r) { return r == Region::Srq ? 0 : 1; }
  RegionState& region(Region r) { return regions_[index(r)]; }
  const RegionState& region(Region r) const { return regions_[index(r)]; }

  BufferHandle insert(Entry e, AppId app, std::int64_t n, SimTime now) {
    const bool mem = std::any_of(e.objects.begin(), e.objects.end(), [&](ObjectId o) { return !is_cache_object(o); });
    e.handle = BufferHandle{next_handle_++, mem ? Region::EscapeMem : e.home, app, ByteSize{n * obj_}, now, false};
    auto h = e.handle;
    live_.emplace(h.id, std::move(e));
    return h;
  }

  std::map<std::uint64_t, Entry>::iterator find_live(std::uint64_t id) {
    auto it = live_.find(id);
    if (it == live_.end()) {
      if (released_.count(id)) throw Error(Errc::DoubleFree, "handle " + std::to_string(id) + " already released");
      throw Error(Errc::UnknownHandle, "handle " + std::to_string(id));
    }
    return it;
  }
  std::map<std::uint64_t, Entry>::const_iterator find_live(std::uint64_t id) const {
    auto it = live_.find(id);
    if (it == live_.end()) {
      if (released_.count(id)) throw Error(Errc::DoubleFree, "handle " + std::to_string(id) + " already released");
      throw Error(Errc::UnknownHandle, "handle " + std::to_string(id));
    }
    return it;
  }

  void release_range(Entry& e, std::int64_t count) {
    auto& s = region(e.home);
    for (std::int64_t i = 0; i < count; ++i) {
      const auto o = e.objects[static_cast<std::size_t>(e.cursor++)];
      if (is_cache_object(o)) {
        s.free_cache.push_back(o);
      } else {
        s.free_mem.push_back(o);
      }
    }
    if (e.replaced) {
      const auto k = std::min(count, e.replaced_held);
      e.replaced_held -= k;
      replaced_live_ -= k;
      s.retire_debt += k;
    }
    retire(s);
    if (e.home == Region::Srq) repost();
  }

  void finish(std::map<std::uint64_t, Entry>::iterator it) {
    if (it->second.replaced && it->second.replaced_held > 0) {
      replaced_live_ -= it->second.replaced_held;
      it->second.replaced_held = 0;
    }
    released_.insert(it->first);
    live_.erase(it);
  }

  // Replacement objects retire as the straggler they stood in for returns.
  void retire(RegionState& s) {
    while (s.retire_debt > 0 && !s.free_mem.empty()) {
      s.free_mem.pop_back();
      --s.replacement;
      --s.retire_debt;
    }
  }

  void repost() {
    const auto free_srq = static_cast<std::int64_t>(region(Region::Srq).free_cache.size());
    posted_ = std::max(posted_, std::min(wqe_target_, free_srq));
  }

  void move_free(RegionState& from, RegionState& to, std::int64_t k) {
    for (std::int64_t i = 0; i < k; ++i) {
      to.free_cache.push_back(from.free_cache.back());
      from.free_cache.pop_back();
    }
    from.capacity -= k;
    to.capacity += k;
  }

  PoolConfig cfg_;
  std::int64_t obj_{0};
  std::int64_t cache_objects_{0};
  std::int64_t srq_min_objects_{0};
  std::array<RegionState, 2> regions_{};
  std::map<std::uint64_t, Entry> live_;
  std::set<std::uint64_t> released_;
  std::uint64_t next_handle_{1};
  ObjectId next_mem_id_{0};
  std::int64_t posted_{0};
  std::int64_t wqe_target_{0};
  std::int64_t replaced_live_{0};
};

}  // namespace rdca
