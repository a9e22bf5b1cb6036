#pragma once

// Cache recycle: the Get -> Process -> Release slice pipeline, per-app
// registries of live buffers with O(1) straggler detection, the notification
// ring shared with applications and post-RNIC timespan accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <list>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <unordered_map>
#include <vector>

#include "rdca/cache_pool.hpp"
#include "rdca/core.hpp"
#include "rdca/flow_control.hpp"

namespace rdca {

inline constexpr ByteSize kSliceMax = KiB(4);

enum class Stage { Get, Process, Release, Done };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Get: return "Get";
    case Stage::Process: return "Process";
    case Stage::Release: return "Release";
    case Stage::Done: return "Done";
  }
  return "?";
}

struct Slice {
  std::uint64_t fragment{0};
  std::uint64_t handle{0};
  AppId app;
  std::int64_t index{0};
  ByteSize size;
  Stage stage{Stage::Get};
  SimTime stage_entered;
  Nanos release_latency{0};  // time the app holds the slice after processing
};

inline std::vector<ByteSize> slice_sizes(ByteSize size, ByteSize slice_max = kSliceMax) {
  return fragment(size, slice_max);
}

inline std::vector<Slice> slice_fragment(const Fragment& f, ByteSize slice_max = kSliceMax) {
  std::vector<Slice> out;
  std::int64_t i = 0;
  for (auto s : slice_sizes(f.size, slice_max)) {
    Slice sl;
    sl.fragment = f.id;
    sl.handle = f.handle.id;
    sl.app = f.handle.app;
    sl.index = i++;
    sl.size = s;
    out.push_back(sl);
  }
  return out;
}

struct ProcessingModel {
  Nanos base_cost_per_slice = ns(200);
  Nanos crc_cost = ns(300);
  Nanos copy_cost = ns(300);
  bool crc_offloaded{false};
  bool serde_lightweight{false};
  std::int64_t worker_count{4};
  Nanos get_latency = ns(0);

  Nanos effective_cost() const {
    return base_cost_per_slice + (crc_offloaded ? ns(0) : crc_cost) + (serde_lightweight ? ns(0) : copy_cost);
  }

  // Slice-processing throughput of all workers, capped at the arrival rate.
  Bandwidth aggregate_rate(Bandwidth arrival, ByteSize slice = kSliceMax) const {
    const auto c = effective_cost().value;
    if (c <= 0) return arrival;
    const auto rate = Bandwidth{static_cast<std::int64_t>(static_cast<__int128>(slice.value) * worker_count *
                                                          1'000'000'000 / c)};
    return std::min(rate, arrival);
  }

  void validate() const {
    if (worker_count < 1) throw Error(Errc::ConfigError, "worker_count must be >= 1");
    if (base_cost_per_slice.value < 0 || crc_cost.value < 0 || copy_cost.value < 0 || get_latency.value < 0) {
      throw Error(Errc::ConfigError, "processing costs must be non-negative");
    }
  }
};

struct ReleasedSlice {
  Slice slice;
  SimTime released_at;
};

// Slices move Get -> Process -> Release, at most one stage per step().
// Process stage runs on `worker_count` simulated workers, assigned in stage
// entry order so slices of a fragment never overtake each other.
class SlicePipeline {
 public:
  explicit SlicePipeline(ProcessingModel model = {}) : model_(model) {
    model_.validate();
    worker_free_.assign(static_cast<std::size_t>(model_.worker_count), SimTime{0});
  }

  const ProcessingModel& model() const { return model_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  void push(Slice s, SimTime now) {
    s.stage = Stage::Get;
    s.stage_entered = now;
    schedule(std::move(s), now + model_.get_latency);
  }

  // Earliest time a slice becomes ready to advance.
  std::optional<SimTime> next_due() const {
    if (items_.empty()) return std::nullopt;
    return items_.top().due;
  }

  std::vector<ReleasedSlice> step(SimTime now) {
    std::vector<Item> ready;
    while (!items_.empty() && items_.top().due <= now) {
      ready.push_back(items_.top());
      items_.pop();
    }
    std::vector<ReleasedSlice> released;
    for (auto& it : ready) {
      auto s = std::move(it.slice);
      switch (s.stage) {
        case Stage::Get: {
          auto w = std::min_element(worker_free_.begin(), worker_free_.end());
          const auto start = std::max(now, *w);
          *w = start + model_.effective_cost();
          s.stage = Stage::Process;
          s.stage_entered = now;
          schedule(std::move(s), *w);
          break;
        }
        case Stage::Process: {
          const auto hold = s.release_latency;
          s.stage = Stage::Release;
          s.stage_entered = now;
          schedule(std::move(s), now + hold);
          break;
        }
        case Stage::Release:
          s.stage = Stage::Done;
          s.stage_entered = now;
          released.push_back({std::move(s), now});
          break;
        case Stage::Done:
          break;
      }
    }
    return released;
  }

 private:
  struct Item {
    SimTime due;
    std::uint64_t seq;
    Slice slice;
    bool operator>(const Item& o) const { return due != o.due ? due > o.due : seq > o.seq; }
  };

  void schedule(Slice s, SimTime due) { items_.push(Item{due, seq_++, std::move(s)}); }

  ProcessingModel model_;
  std::vector<SimTime> worker_free_;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> items_;
  std::uint64_t seq_{0};
};

// Live buffers of one application, oldest first. Entries are appended at the
// tail in allocation order, so stragglers always form a prefix and a
// frontier pointer finds new ones without rescanning.
class AppRegistry {
 public:
  AppRegistry() = default;
  AppRegistry(const AppRegistry&) = delete;
  AppRegistry& operator=(const AppRegistry&) = delete;

  struct Entry {
    std::uint64_t handle;
    SimTime alloc_time;
    bool straggler{false};
  };

  void add(std::uint64_t handle, SimTime alloc_time) {
    if (!list_.empty() && alloc_time < list_.back().alloc_time) {
      throw Error(Errc::InvariantViolation, "registry append out of time order");
    }
    list_.push_back(Entry{handle, alloc_time, false});
    auto it = std::prev(list_.end());
    index_.emplace(handle, it);
    if (frontier_ == list_.end()) frontier_ = it;
  }

  bool contains(std::uint64_t handle) const { return index_.count(handle) != 0; }

  void remove(std::uint64_t handle) {
    auto found = index_.find(handle);
    if (found == index_.end()) throw Error(Errc::UnknownHandle, "handle not registered: " + std::to_string(handle));
    auto it = found->second;
    if (it->straggler) --stragglers_;
    if (it == frontier_) frontier_ = std::next(it);
    list_.erase(it);
    index_.erase(found);
  }

  // Amortized O(1): only the frontier moves.
  std::int64_t scan(SimTime now, Nanos time_th) {
    while (frontier_ != list_.end() && now - frontier_->alloc_time > time_th) {
      frontier_->straggler = true;
      ++stragglers_;
      ++frontier_;
    }
    return stragglers_;
  }

  std::int64_t held() const { return static_cast<std::int64_t>(list_.size()); }
  std::int64_t stragglers() const { return stragglers_; }
  bool empty() const { return list_.empty(); }
  std::optional<SimTime> head_time() const {
    if (list_.empty()) return std::nullopt;
    return list_.front().alloc_time;
  }
  const std::list<Entry>& entries() const { return list_; }

 private:
  std::list<Entry> list_;
  std::unordered_map<std::uint64_t, std::list<Entry>::iterator> index_;
  std::list<Entry>::iterator frontier_{list_.end()};
  std::int64_t stragglers_{0};
};

// O(n) reference count for checking the incremental one.
inline std::int64_t full_straggler_count(const AppRegistry& reg, SimTime now, Nanos time_th) {
  return std::count_if(reg.entries().begin(), reg.entries().end(),
                       [&](const AppRegistry::Entry& e) { return now - e.alloc_time > time_th; });
}

enum class NotifyEvent { DataReady, ReleaseRequest };

struct Notification {
  std::uint64_t handle;
  AppId app;
  NotifyEvent event;
};

// Bounded ring of notifications between the service and applications.
class NotifyRing {
 public:
  explicit NotifyRing(std::size_t capacity = 4096) : capacity_(capacity) {}

  bool notify(std::uint64_t handle, AppId app) {
    if (pending_.count(handle)) return true;
    push({handle, app, NotifyEvent::DataReady});
    pending_.emplace(handle, app);
    return true;
  }

  // Matches the outstanding DataReady for `handle`.
  AppId acknowledge(std::uint64_t handle) {
    auto it = pending_.find(handle);
    if (it == pending_.end()) throw Error(Errc::UnknownHandle, "release without DataReady: " + std::to_string(handle));
    const auto app = it->second;
    pending_.erase(it);
    push({handle, app, NotifyEvent::ReleaseRequest});
    return app;
  }

  // An escape action took over the handle; its DataReady is closed.
  void close(std::uint64_t handle) { pending_.erase(handle); }

  bool pending(std::uint64_t handle) const { return pending_.count(handle) != 0; }
  std::size_t outstanding() const { return pending_.size(); }
  const std::deque<Notification>& recent() const { return ring_; }

 private:
  void push(Notification n) {
    if (capacity_ == 0) return;
    if (ring_.size() == capacity_) ring_.pop_front();
    ring_.push_back(n);
  }

  std::size_t capacity_;
  std::deque<Notification> ring_;
  std::map<std::uint64_t, AppId> pending_;
};

// Samples of (release time - alloc time) for released buffers.
class TimespanStats {
 public:
  void record(Nanos span) {
    sum_ += span.value;
    ++count_;
    samples_.push_back(span.value);
    window_.push_back(span.value);
  }

  std::int64_t count() const { return count_; }
  double mean_ns() const { return count_ ? static_cast<double>(sum_) / static_cast<double>(count_) : 0.0; }
  const std::vector<std::int64_t>& samples() const { return samples_; }

  // Statistics over samples since the last call, then resets the window.
  std::pair<double, double> take_window() {
    auto w = std::move(window_);
    window_.clear();
    if (w.empty()) return {0.0, 0.0};
    double sum = 0;
    for (auto v : w) sum += static_cast<double>(v);
    return {sum / static_cast<double>(w.size()), static_cast<double>(percentile(w, 0.99))};
  }

  static std::int64_t percentile(std::vector<std::int64_t> v, double q) {
    if (v.empty()) return 0;
    const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
  }

 private:
  std::int64_t sum_{0};
  std::int64_t count_{0};
  std::vector<std::int64_t> samples_;
  std::vector<std::int64_t> window_;
};

// Ties pool, registries, ring and timespan accounting together.
class RecycleController {
 public:
  RecycleController(CachePool& pool, Nanos time_th = ms(1), std::size_t ring_capacity = 4096)
      : pool_(pool), ring_(ring_capacity), time_th_(time_th) {}

  Nanos time_th() const { return time_th_; }
  NotifyRing& ring() { return ring_; }
  const TimespanStats& timespans() const { return timespans_; }
  TimespanStats& timespans() { return timespans_; }
  std::uint64_t releases() const { return releases_; }

  void track(const BufferHandle& h) { registries_[h.app].add(h.id, h.alloc_time); }

  void notify(const BufferHandle& h) {
    if (!registries_[h.app].contains(h.id)) throw Error(Errc::UnknownHandle, "notify on untracked handle");
    ring_.notify(h.id, h.app);
  }

  // Whole-handle release requested by the application.
  void on_release(std::uint64_t handle, SimTime now) {
    const auto app = ring_.acknowledge(handle);
    const auto alloc = pool_.handle(handle).alloc_time;
    pool_.free(handle);
    untrack(app, handle);
    timespans_.record(now - alloc);
    ++releases_;
  }

  // Slice-granular release. Returns true when the handle is fully returned.
  bool release_slice(std::uint64_t handle, ByteSize slice, SimTime now) {
    const auto h = pool_.handle(handle);
    const bool done = pool_.release_objects(handle, pool_.objects_for(slice));
    if (done) {
      ring_.close(handle);
      untrack(h.app, handle);
      timespans_.record(now - h.alloc_time);
      ++releases_;
    }
    return done;
  }

  // Data copied out: the handle is no longer a cache buffer of its app.
  void forget(AppId app, std::uint64_t handle) {
    ring_.close(handle);
    untrack(app, handle);
  }

  std::int64_t straggler_scan(SimTime now) {
    std::int64_t total = 0;
    for (auto& [app, reg] : registries_) total += reg.scan(now, time_th_);
    return total;
  }

  std::int64_t full_recount(SimTime now) const {
    std::int64_t total = 0;
    for (const auto& [app, reg] : registries_) total += full_straggler_count(reg, now, time_th_);
    return total;
  }

  std::map<AppId, AppRegistry>& registries() { return registries_; }
  const std::map<AppId, AppRegistry>& registries() const { return registries_; }
  bool tracked(AppId app, std::uint64_t handle) const {
    auto it = registries_.find(app);
    return it != registries_.end() && it->second.contains(handle);
  }

 private:
  void untrack(AppId app, std::uint64_t handle) {
    auto it = registries_.find(app);
    if (it != registries_.end() && it->second.contains(handle)) it->second.remove(handle);
  }

  CachePool& pool_;
  NotifyRing ring_;
  Nanos time_th_;
  std::map<AppId, AppRegistry> registries_;
  TimespanStats timespans_;
  std::uint64_t releases_{0};
};

}  // namespace rdca
