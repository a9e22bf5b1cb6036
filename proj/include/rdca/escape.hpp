#pragma once

// Cache-pressure escape: straggler buffer replacement, data copy of slowly
// releasing applications to memory, and ECN marking as the last resort.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "rdca/cache_pool.hpp"
#include "rdca/core.hpp"
#include "rdca/recycle.hpp"

namespace rdca {

struct EscapeConfig {
  ByteSize cache_safe = MiB(3);
  ByteSize cache_danger = ByteSize{MiB(12).value / 10};
  ByteSize mem_esc = MiB(4);
  double credit{0.5};
  Nanos time_th = ms(1);
  double alpha{0.04};

  void validate(ByteSize pool_total) const {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
    if (!(cache_danger < cache_safe)) fail("cache_danger must be below cache_safe");
    if (cache_safe > pool_total) fail("cache_safe must not exceed the pool size");
    if (cache_danger.value < 0 || mem_esc.value < 0) fail("escape sizes must be non-negative");
    if (!(credit > 0.0 && credit <= 1.0)) fail("credit must be in (0,1]");
    if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must be in (0,1]");
    if (time_th.value <= 0) fail("time_th must be positive");
  }
};

enum class EscapeKind { BufferReplace, DataCopy, CopyFailed, MarkEcn, RestoreEcn };

inline const char* to_string(EscapeKind k) {
  switch (k) {
    case EscapeKind::BufferReplace: return "BufferReplace";
    case EscapeKind::DataCopy: return "DataCopy";
    case EscapeKind::CopyFailed: return "CopyFailed";
    case EscapeKind::MarkEcn: return "MarkEcn";
    case EscapeKind::RestoreEcn: return "RestoreEcn";
  }
  return "?";
}

struct EscapeAction {
  EscapeKind kind;
  AppId app{};
  ByteSize bytes{0};

  bool operator==(const EscapeAction& o) const { return kind == o.kind && app == o.app; }
};

struct AppPressure {
  AppId app;
  std::int64_t straggler_buf_num{0};
  std::int64_t held_buf_num{0};
};

inline bool slowly_releasing(const AppPressure& p, double credit) {
  if (p.held_buf_num <= 0) return false;
  return static_cast<double>(p.straggler_buf_num) / static_cast<double>(p.held_buf_num) > credit;
}

// The escape decision tree. `Env` supplies the pool view and the actions:
//   ByteSize avl_cache_pool();  ByteSize replace_mem_size();
//   std::vector<AppPressure> apps();
//   ByteSize buffer_replace();  std::optional<ByteSize> data_copy(AppId);
//   void mark_ecn();
template <typename Env>
std::vector<EscapeAction> escape(Env& env, const EscapeConfig& cfg) {
  std::vector<EscapeAction> actions;
  if (!(env.avl_cache_pool() < cfg.cache_safe)) return actions;

  if (env.replace_mem_size() < cfg.mem_esc) {
    actions.push_back({EscapeKind::BufferReplace, AppId{}, env.buffer_replace()});
  } else {
    for (const auto& p : env.apps()) {
      if (!slowly_releasing(p, cfg.credit)) continue;
      if (auto copied = env.data_copy(p.app)) {
        actions.push_back({EscapeKind::DataCopy, p.app, *copied});
      } else {
        actions.push_back({EscapeKind::CopyFailed, p.app, ByteSize{0}});
      }
    }
  }
  if (env.avl_cache_pool() < cfg.cache_danger) {
    env.mark_ecn();
    actions.push_back({EscapeKind::MarkEcn, AppId{}, ByteSize{0}});
  }
  return actions;
}

// Copies run in the background at no more than alpha * line_rate per
// direction. Every tick's transfer is logged (read + write bytes).
class CopyEngine {
 public:
  struct LogEntry {
    SimTime time;
    ByteSize bytes;  // read + write
  };

  CopyEngine(Bandwidth line_rate, double alpha)
      : rate_(Bandwidth{static_cast<std::int64_t>(static_cast<double>(line_rate.value) * alpha)}) {}

  Bandwidth rate() const { return rate_; }
  ByteSize backlog() const { return backlog_; }
  ByteSize total_copied() const { return total_; }
  const std::vector<LogEntry>& log() const { return log_; }

  void enqueue(ByteSize b) { backlog_ += b; }

  // Advances by dt; returns bytes written to memory during the tick.
  ByteSize tick(SimTime now, Nanos dt) {
    if (backlog_.value == 0) return ByteSize{0};
    credit_ += transfer(rate_, dt);
    const auto moved = std::min(backlog_, credit_);
    credit_ -= moved;
    backlog_ -= moved;
    if (backlog_.value == 0) credit_ = ByteSize{0};
    if (moved.value > 0) {
      total_ += moved;
      log_.push_back({now, moved * 2});
    }
    return moved;
  }

  // Largest read+write volume inside any window of length `window`.
  ByteSize max_window_bytes(Nanos window) const {
    ByteSize best{0};
    ByteSize cur{0};
    std::size_t lo = 0;
    for (std::size_t hi = 0; hi < log_.size(); ++hi) {
      cur += log_[hi].bytes;
      while (log_[hi].time - log_[lo].time >= window) {
        cur -= log_[lo].bytes;
        ++lo;
      }
      best = std::max(best, cur);
    }
    return best;
  }

 private:
  Bandwidth rate_;
  ByteSize backlog_{0};
  ByteSize credit_{0};
  ByteSize total_{0};
  std::vector<LogEntry> log_;
};

struct EscapeEvent {
  SimTime time;
  EscapeKind kind;
  AppId app;
  ByteSize bytes;
  std::string cause;
};

struct EscapeState {
  bool ecn_lowered{false};
  ByteSize copy_bytes_total{0};
  ByteSize max_replace_mem{0};
  std::uint64_t actions{0};
  std::uint64_t ecn_transitions{0};
};

// Hooks into the host model.
struct EscapeHost {
  std::function<bool()> copy_fault = [] { return false; };
  std::function<void(bool)> set_ecn_lowered = [](bool) {};
};

class EscapeController {
 public:
  EscapeController(EscapeConfig cfg, CachePool& pool, RecycleController& recycle, CopyEngine& copier,
                   EscapeHost host = {})
      : cfg_(cfg), pool_(pool), recycle_(recycle), copier_(copier), host_(std::move(host)) {
    cfg_.validate(pool_.config().total_capacity);
  }

  const EscapeConfig& config() const { return cfg_; }
  const EscapeState& state() const { return state_; }
  const std::vector<EscapeEvent>& events() const { return events_; }

  // Replaces stragglers oldest-first while the memory budget allows.
  ByteSize buffer_replace(SimTime now) {
    recycle_.straggler_scan(now);
    struct Candidate {
      SimTime t;
      std::uint64_t handle;
    };
    std::vector<Candidate> cands;
    for (const auto& [app, reg] : recycle_.registries()) {
      for (const auto& e : reg.entries()) {
        if (!e.straggler) break;
        if (!pool_.is_replaced(e.handle) && !pool_.is_detached(e.handle)) cands.push_back({e.alloc_time, e.handle});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      return a.t != b.t ? a.t < b.t : a.handle < b.handle;
    });
    const auto obj = pool_.object_size().value;
    std::int64_t replaced = 0;
    for (const auto& c : cands) {
      const auto budget = (cfg_.mem_esc - pool_.replace_mem_size()).value / obj;
      if (budget <= 0) break;
      replaced += pool_.replace(c.handle, budget);
    }
    state_.max_replace_mem = std::max(state_.max_replace_mem, pool_.replace_mem_size());
    return ByteSize{replaced * obj};
  }

  // Moves every cache buffer of `app` to memory. nullopt on copy failure.
  std::optional<ByteSize> data_copy(AppId app, SimTime now) {
    auto& regs = recycle_.registries();
    auto it = regs.find(app);
    if (it == regs.end()) return ByteSize{0};
    if (host_.copy_fault()) return std::nullopt;
    std::vector<std::uint64_t> handles;
    for (const auto& e : it->second.entries()) handles.push_back(e.handle);
    std::int64_t objects = 0;
    for (auto h : handles) {
      objects += pool_.detach(h);
      recycle_.forget(app, h);
    }
    const ByteSize copied{objects * pool_.object_size().value};
    copier_.enqueue(copied);
    state_.copy_bytes_total += copied;
    (void)now;
    return copied;
  }

  void mark_ecn(bool on) {
    if (state_.ecn_lowered == on) return;
    state_.ecn_lowered = on;
    ++state_.ecn_transitions;
    host_.set_ecn_lowered(on);
  }

  // One escape evaluation plus the ECN restore rule.
  std::vector<EscapeAction> evaluate(SimTime now, const std::string& cause) {
    Env env{*this, now};
    auto actions = escape(env, cfg_);
    if (state_.ecn_lowered && !(pool_.available() < cfg_.cache_safe)) {
      mark_ecn(false);
      actions.push_back({EscapeKind::RestoreEcn, AppId{}, ByteSize{0}});
    }
    for (const auto& a : actions) events_.push_back({now, a.kind, a.app, a.bytes, cause});
    state_.actions += actions.size();
    return actions;
  }

  std::vector<AppPressure> pressures(SimTime now) {
    recycle_.straggler_scan(now);
    std::vector<AppPressure> out;
    for (const auto& [app, reg] : recycle_.registries()) out.push_back({app, reg.stragglers(), reg.held()});
    return out;
  }

 private:
  struct Env {
    EscapeController& c;
    SimTime now;
    ByteSize avl_cache_pool() { return c.pool_.available(); }
    ByteSize replace_mem_size() { return c.pool_.replace_mem_size(); }
    std::vector<AppPressure> apps() { return c.pressures(now); }
    ByteSize buffer_replace() { return c.buffer_replace(now); }
    std::optional<ByteSize> data_copy(AppId app) { return c.data_copy(app, now); }
    void mark_ecn() { c.mark_ecn(true); }
  };

  EscapeConfig cfg_;
  CachePool& pool_;
  RecycleController& recycle_;
  CopyEngine& copier_;
  EscapeHost host_;
  EscapeState state_;
  std::vector<EscapeEvent> events_;
};

}  // namespace rdca
