#pragma once

// Deterministic discrete-event engine. A fixed-length tick drives the fluid
// model of wire, RNIC buffer, PCIe and memory bus; message arrivals, baseline
// releases and metric sampling are discrete events on the same queue.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "rdca/cache_pool.hpp"
#include "rdca/core.hpp"
#include "rdca/escape.hpp"
#include "rdca/flow_control.hpp"
#include "rdca/hostnet.hpp"
#include "rdca/metrics.hpp"
#include "rdca/recycle.hpp"

namespace rdca {

enum class Mode { BaselineDdio, Jet };

inline const char* to_string(Mode m) { return m == Mode::BaselineDdio ? "baseline" : "jet"; }

struct Scenario {
  Mode mode{Mode::Jet};
  NetworkKind network{NetworkKind::Lossy100G};
  std::int64_t qp_count{32};
  ByteSize msg_size = KiB(256);
  std::int64_t io_depth{1};
  Nanos duration = ms(20);
  std::uint64_t seed{1};

  Nanos tick = us(1);
  Nanos sample_interval = us(100);
  double warmup_fraction{0.05};

  std::int64_t app_count{4};
  Nanos app_hold = us(10);    // time an app holds received data after processing
  Nanos think_time{0};        // mean of the exponential gap before a QP reposts
  std::int64_t low_qos_qps{0};  // the last N QPs submit Low-QoS reads

  // Slow-release injection: a fraction of this app's buffers is held longer.
  std::int64_t slow_app{-1};
  double slow_ratio{0.8};
  Nanos slow_hold = ms(3);

  bool copy_fault{false};

  CompetitorProfile competitor;
  PoolConfig pool;
  FlowConfig flow;
  ProcessingModel processing;
  EscapeConfig escape;
  HostConfig host = HostConfig::preset(NetworkKind::Lossy100G);

  // Default scenario for a network: host preset and matching line rate.
  static Scenario for_network(NetworkKind n, Mode m = Mode::Jet) {
    Scenario s;
    s.mode = m;
    s.set_network(n);
    return s;
  }

  void set_network(NetworkKind n) {
    network = n;
    host = HostConfig::preset(n);
    flow.line_rate = host.line_rate;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
    if (qp_count <= 0) fail("qp_count must be positive");
    if (msg_size.value <= 0) fail("msg_size must be positive");
    if (io_depth <= 0) fail("io_depth must be positive");
    if (duration.value < 0) fail("duration must be non-negative");
    if (tick.value <= 0) fail("tick must be positive");
    if (sample_interval.value <= 0) fail("sample_interval must be positive");
    if (sample_interval.value % tick.value != 0) fail("sample_interval must be a multiple of tick");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must be in [0,1)");
    if (app_count <= 0) fail("app_count must be positive");
    if (app_hold.value < 0 || think_time.value < 0 || slow_hold.value < 0) fail("times must be non-negative");
    if (low_qos_qps < 0 || low_qos_qps > qp_count) fail("low_qos_qps must be in [0, qp_count]");
    if (slow_app >= app_count) fail("slow_app must name an existing app");
    if (!(slow_ratio >= 0.0 && slow_ratio <= 1.0)) fail("slow_ratio must be in [0,1]");
    if (competitor.frequency_hz < 0) fail("competitor.frequency_hz must be non-negative");
    if (competitor.chunk.value <= 0) fail("competitor.chunk must be positive");
    if (flow.line_rate != host.line_rate) fail("flow.line_rate must equal host.line_rate");
    pool.validate();
    flow.validate();
    processing.validate();
    escape.validate(pool.total_capacity);
    host.validate();
  }
};

// Min-heap of timed events. Ties run in insertion order. Scheduling into
// the past is an invariant violation.
template <typename Payload>
class EventQueue {
 public:
  SimTime now() const { return now_; }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }
  std::uint64_t processed() const { return processed_; }

  void push(SimTime at, Payload p) {
    if (at < now_) throw Error(Errc::InvariantViolation, "event scheduled in the past");
    heap_.push(Item{at, seq_++, std::move(p)});
  }

  std::pair<SimTime, Payload> pop() {
    if (heap_.empty()) throw Error(Errc::InvariantViolation, "pop from empty event queue");
    auto it = heap_.top();
    heap_.pop();
    if (it.at < now_) throw Error(Errc::InvariantViolation, "event executes before the current clock");
    now_ = it.at;
    ++processed_;
    return {it.at, std::move(it.payload)};
  }

 private:
  struct Item {
    SimTime at;
    std::uint64_t seq;
    Payload payload;
    bool operator>(const Item& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap_;
  SimTime now_{0};
  std::uint64_t seq_{0};
  std::uint64_t processed_{0};
};

struct RunResult {
  std::vector<MetricSample> samples;
  Summary summary;
  std::vector<std::string> events;
};

class Engine {
 public:
  explicit Engine(Scenario sc)
      : sc_(std::move(sc)),
        pool_((sc_.validate(), sc_.pool)),
        flow_(sc_.flow),
        pipeline_(sc_.processing),
        recycle_(pool_, sc_.escape.time_th),
        copier_(sc_.host.line_rate, sc_.escape.alpha),
        escape_(sc_.escape, pool_, recycle_, copier_, make_host_hooks()),
        bus_(sc_.host.mem_capacity),
        ddio_(sc_.host.ddio_ways),
        pcie_{sc_.host.pcie_capacity},
        rnic_(sc_.host),
        rng_(sc_.seed) {
    warmup_end_ = Nanos{static_cast<std::int64_t>(static_cast<double>(sc_.duration.value) * sc_.warmup_fraction)};
    groups_per_msg_ = ceil_div(sc_.msg_size.value, kLineGroup.value);
    qps_.resize(static_cast<std::size_t>(sc_.qp_count));
    for (auto& q : qps_) q.slot_busy.assign(static_cast<std::size_t>(sc_.io_depth), false);
    senders_.assign(static_cast<std::size_t>(sc_.qp_count), DcqcnLite(sc_.host.line_rate, sc_.host.dcqcn));
    baseline_workers_.assign(static_cast<std::size_t>(sc_.processing.worker_count), SimTime{0});
  }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  RunResult run() {
    // Step 0/1: pool is reserved at construction; apps register here.
    if (sc_.mode == Mode::Jet) {
      for (std::int64_t a = 0; a < sc_.app_count; ++a) recycle_.registries()[AppId{static_cast<std::uint64_t>(a)}];
    }
    if (sc_.duration.value > 0) {
      for (std::int64_t q = 0; q < sc_.qp_count; ++q) {
        for (std::int64_t d = 0; d < sc_.io_depth; ++d) schedule_generate(q, SimTime{0});
      }
      events_.push(SimTime{0}, Event{EventKind::Tick, 0});
      for (SimTime t = sc_.sample_interval; t <= sc_.duration; t += sc_.sample_interval) {
        events_.push(t, Event{EventKind::Sample, 0});
      }
    }
    while (!events_.empty()) {
      auto [t, ev] = events_.pop();
      switch (ev.kind) {
        case EventKind::Tick: on_tick(t); break;
        case EventKind::Sample: on_sample(t); break;
        case EventKind::Generate: generate(static_cast<std::int64_t>(ev.arg), t); break;
        case EventKind::BaselineRelease: complete_message(ev.arg, t); break;
      }
    }
    finish_summary();
    return std::move(result_);
  }

  const CachePool& pool() const { return pool_; }
  const FlowController& flow() const { return flow_; }

 private:
  enum class EventKind { Tick, Sample, Generate, BaselineRelease };
  struct Event {
    EventKind kind;
    std::uint64_t arg;
  };

  struct MsgRec {
    Message msg;
    std::int64_t slot{-1};
    ByteSize released{0};
    bool lost{false};
    bool slow{false};
  };

  struct Transfer {
    std::uint64_t id{0};
    std::uint64_t msg{0};
    std::uint64_t fragment{0};  // flow-control fragment id, 0 when not a READ
    std::int64_t qp{0};
    ByteSize size;
    ByteSize sent{0};
    ByteSize landed{0};  // drained or dropped
    ByteSize sliced{0};
    ByteSize released{0};
    std::int64_t slices{0};
    bool ready{true};
    bool small{false};
    bool has_handle{false};
    bool memory_fallback{false};
    std::uint64_t handle{0};
    std::uint64_t base_group{0};  // baseline buffer location
    std::uint64_t last_group{~0ull};
    Nanos hold{0};
  };

  struct Chunk {
    std::uint64_t transfer;
    ByteSize offset;
    ByteSize len;
  };

  struct Qp {
    std::deque<std::uint64_t> send_queue;  // transfers sent one after another
    std::vector<bool> slot_busy;
  };

  struct Window {
    ByteSize net{0};
    ByteSize good{0};
    std::vector<std::int64_t> lat;
    std::int64_t pfc_ns{0};
    std::uint64_t cnp{0};
    std::uint64_t drops{0};
    std::uint64_t hits{0};
    std::uint64_t misses{0};
    std::uint64_t stalls{0};
    std::int64_t cpu_bytes{0};
    std::int64_t nic_bytes{0};
    std::uint64_t admits{0};
    std::uint64_t blocked{0};
    std::uint64_t releases{0};
    std::uint64_t escape_actions{0};
    ByteSize copy{0};
  };

  static constexpr std::uint64_t kTagReplacement = 1ull << 56;
  static constexpr std::uint64_t kTagFallback = 2ull << 56;
  static constexpr std::uint64_t kTagCopied = 3ull << 56;

  EscapeHost make_host_hooks() {
    EscapeHost h;
    h.copy_fault = [this] { return sc_.copy_fault; };
    h.set_ecn_lowered = [this](bool on) { rnic_.set_threshold_lowered(on); };
    return h;
  }

  AppId app_of(std::int64_t qp) const { return AppId{static_cast<std::uint64_t>(qp % sc_.app_count)}; }

  bool next_is_slow(AppId app) {
    if (sc_.slow_app < 0 || app.value != static_cast<std::uint64_t>(sc_.slow_app)) return false;
    const auto k = static_cast<double>(slow_counter_++);
    return std::floor((k + 1.0) * sc_.slow_ratio) > std::floor(k * sc_.slow_ratio);
  }

  void schedule_generate(std::int64_t qp, SimTime now) {
    auto at = now;
    if (sc_.think_time.value > 0) {
      const auto gap = static_cast<std::int64_t>(rng_.exponential(static_cast<double>(sc_.think_time.value)));
      at = now + Nanos{gap};
    }
    if (at < sc_.duration) events_.push(at, Event{EventKind::Generate, static_cast<std::uint64_t>(qp)});
  }

  // A QP posts a new message.
  void generate(std::int64_t qp, SimTime now) {
    auto& q = qps_[static_cast<std::size_t>(qp)];
    MsgRec rec;
    rec.msg = Message::make(msg_ids_.next(), app_of(qp), QpId{static_cast<std::uint64_t>(qp)}, sc_.msg_size, now);
    const auto mid = rec.msg.id.value;
    if (sc_.mode == Mode::BaselineDdio) {
      auto free_slot = std::find(q.slot_busy.begin(), q.slot_busy.end(), false);
      if (free_slot == q.slot_busy.end()) throw Error(Errc::InvariantViolation, "no free baseline slot");
      *free_slot = true;
      rec.slot = free_slot - q.slot_busy.begin();
      rec.slow = next_is_slow(rec.msg.app);
      auto& t = new_transfer(mid, qp, rec.msg.size);
      t.base_group = static_cast<std::uint64_t>((qp * sc_.io_depth + rec.slot) * groups_per_msg_);
      t.hold = rec.slow ? sc_.slow_hold : sc_.app_hold;
      enqueue_send(q, t);
    } else if (rec.msg.kind == MsgKind::Small) {
      auto& t = new_transfer(mid, qp, rec.msg.size);
      t.small = true;
      t.hold = next_is_slow(rec.msg.app) ? sc_.slow_hold : sc_.app_hold;
      enqueue_send(q, t);
    } else {
      const auto qos = qp >= sc_.qp_count - sc_.low_qos_qps ? Qos::Low : Qos::High;
      flow_.submit(flow_.make_request(rec.msg, qos, now));
      pump_pending_ = true;
    }
    msgs_.emplace(mid, std::move(rec));
  }

  Transfer& new_transfer(std::uint64_t msg, std::int64_t qp, ByteSize size) {
    const auto id = next_transfer_++;
    auto& t = transfers_[id];
    t.id = id;
    t.msg = msg;
    t.qp = qp;
    t.size = size;
    return t;
  }

  void enqueue_send(Qp& q, Transfer& t) {
    t.ready = q.send_queue.empty();
    q.send_queue.push_back(t.id);
  }

  // --- Jet read path -------------------------------------------------------

  void pump(SimTime now) {
    pump_pending_ = false;
    for (int attempt = 0; attempt < 2; ++attempt) {
      const auto admitted = flow_.admit(pool_.free_bytes(Region::Read), now);
      for (auto f : flow_.pump(pool_, now)) start_fragment(f, now);
      if (flow_.last_block() != BlockReason::PoolExhausted || alloc_failure_tick_ == now) break;
      alloc_failure_tick_ = now;
      on_alloc_failure(Region::Read, now);
      (void)admitted;
    }
  }

  void on_alloc_failure(Region r, SimTime now) {
    const auto obj = pool_.object_size().value;
    auto in_use = [&](Region x) {
      return ByteSize{(pool_.capacity_objects(x) + pool_.replacement_objects(x) - pool_.free_objects(x)) * obj};
    };
    auto srq = in_use(Region::Srq);
    auto read = in_use(Region::Read);
    (r == Region::Srq ? srq : read) += ByteSize{obj};
    pool_.rebalance(srq, read);
    run_escape(now, r == Region::Srq ? "srq_exhausted" : "alloc_failure");
  }

  void run_escape(SimTime now, const char* cause) {
    const auto before = escape_.events().size();
    escape_.evaluate(now, cause);
    ++escape_evaluations_;
    const auto& evs = escape_.events();
    for (auto i = before; i < evs.size(); ++i) {
      const auto& e = evs[i];
      char buf[160];
      std::snprintf(buf, sizeof buf, "%lld %s app=%llu bytes=%lld cause=%s", static_cast<long long>(e.time.value),
                    to_string(e.kind), static_cast<unsigned long long>(e.app.value),
                    static_cast<long long>(e.bytes.value), e.cause.c_str());
      result_.events.emplace_back(buf);
      switch (e.kind) {
        case EscapeKind::BufferReplace: ++escape_replace_; break;
        case EscapeKind::DataCopy: ++escape_copy_; break;
        case EscapeKind::CopyFailed: ++escape_copy_failed_; break;
        case EscapeKind::MarkEcn: ++escape_mark_; break;
        case EscapeKind::RestoreEcn: break;
      }
      ++win_.escape_actions;
    }
    max_replace_mem_ = std::max(max_replace_mem_, pool_.replace_mem_size());
  }

  void start_fragment(const Fragment& f, SimTime now) {
    const auto& req = *flow_.request(f.parent);
    auto& t = new_transfer(req.msg.id.value, static_cast<std::int64_t>(req.msg.qp.value), f.size);
    t.fragment = f.id;
    t.handle = f.handle.id;
    t.has_handle = true;
    t.memory_fallback = f.memory_fallback;
    t.hold = next_is_slow(req.msg.app) ? sc_.slow_hold : sc_.app_hold;
    if (!f.memory_fallback) recycle_.track(f.handle);
    (void)now;
  }

  // --- per-tick fluid model -------------------------------------------------

  void on_tick(SimTime now) {
    const auto dt = sc_.tick;

    // Memory bus: CPU demand is the competitor plus background copies.
    const auto copied = copier_.tick(now, dt);
    win_.copy += copied;
    const auto copy_bw = Bandwidth{static_cast<std::int64_t>(static_cast<__int128>(copied.value) * 2 *
                                                             1'000'000'000 / dt.value)};
    const auto cpu_demand = std::min(bus_.capacity(), sc_.competitor.demand_at(now, bus_.capacity()) + copy_bw);
    const auto grant = bus_.arbitrate(cpu_demand, bus_.capacity());
    win_.cpu_bytes += transfer(grant.cpu, dt).value;

    for (auto& r : senders_) r.tick(now);
    transmit(now, dt);
    drain(now, dt, grant.nic);
    if (rnic_.update_pause(dt)) win_.pfc_ns += dt.value;

    for (auto& r : pipeline_.step(now)) on_slice_released(r.slice, now);
    if (sc_.mode == Mode::Jet && pump_pending_) pump(now);
    for (auto q : to_generate_) schedule_generate(q, now);
    to_generate_.clear();

    if (!flow_.windows().valid()) ++window_violations_;
    if (pool_.replace_mem_size() > sc_.escape.mem_esc) ++replace_mem_violations_;

    const auto next = now + dt;
    if (next < sc_.duration) events_.push(next, Event{EventKind::Tick, 0});
  }

  // Sender: each QP is capped by its own DCQCN rate, the link budget is
  // split max-min fairly across QPs, then across a QP's active transfers.
  void transmit(SimTime now, Nanos dt) {
    auto budget = transfer(sc_.host.line_rate, dt);
    if (rnic_.lossless()) budget = rnic_.paused() ? ByteSize{0} : std::min(budget, rnic_.headroom());
    if (budget.value <= 0) return;

    std::vector<std::vector<Transfer*>> by_qp(qps_.size());
    bool any = false;
    for (auto& [id, t] : transfers_) {
      if (t.ready && t.sent < t.size) {
        by_qp[static_cast<std::size_t>(t.qp)].push_back(&t);
        any = true;
      }
    }
    if (!any) return;
    std::vector<std::int64_t> qp_demand(qps_.size(), 0);
    for (std::size_t q = 0; q < by_qp.size(); ++q) {
      std::int64_t want = 0;
      for (auto* t : by_qp[q]) want += (t->size - t->sent).value;
      qp_demand[q] = std::min(want, transfer(senders_[q].rate(), dt).value);
    }
    const auto qp_alloc = water_fill(qp_demand, budget.value);

    for (std::size_t q = 0; q < by_qp.size(); ++q) {
      if (qp_alloc[q] <= 0) continue;
      std::vector<std::int64_t> need;
      for (auto* t : by_qp[q]) need.push_back((t->size - t->sent).value);
      const auto give = water_fill(need, qp_alloc[q]);
      for (std::size_t i = 0; i < by_qp[q].size(); ++i) {
        if (give[i] > 0) offer(*by_qp[q][i], ByteSize{give[i]}, now);
      }
      const auto sig = rnic_.signal_flow(q, now, rng_);
      if (sig.cnp) {
        senders_[q].on_cnp(now);
        ++win_.cnp;
      }
    }
  }

  void offer(Transfer& t, ByteSize g, SimTime now) {
    const auto accepted = rnic_.ingest(g);
    if (accepted.value > 0) fifo_.push_back(Chunk{t.id, t.sent, accepted});
    const auto dropped = g - accepted;
    t.sent += g;
    if (t.sent == t.size) advance_send_queue(t);
    if (dropped.value > 0) {
      ++win_.drops;
      mark_lost(t);
      on_landed(t, dropped, now);
    }
  }

  void advance_send_queue(const Transfer& t) {
    if (t.fragment != 0) return;
    auto& q = qps_[static_cast<std::size_t>(msgs_.at(t.msg).msg.qp.value)];
    if (q.send_queue.empty() || q.send_queue.front() != t.id) return;
    q.send_queue.pop_front();
    if (!q.send_queue.empty()) transfers_.at(q.send_queue.front()).ready = true;
  }

  void mark_lost(Transfer& t) { msgs_.at(t.msg).lost = true; }

  // Placement of the bytes at `offset` of a transfer: DDIO group id and
  // whether it lies in the CAT-reserved pool.
  std::pair<std::uint64_t, bool> placement(const Transfer& t, ByteSize offset) const {
    const auto idx = static_cast<std::uint64_t>(offset.value / kLineGroup.value);
    if (sc_.mode == Mode::BaselineDdio) return {t.base_group + idx, false};
    if (t.memory_fallback) return {kTagFallback + ((t.handle & 0xffffffffull) << 20) + idx, false};
    if (pool_.is_detached(t.handle)) return {kTagCopied + ((t.handle & 0xffffffffull) << 20) + idx, false};
    const auto obj = pool_.object_at(t.handle, offset);
    if (pool_.is_cache_object(obj)) return {obj, true};
    return {kTagReplacement + obj, false};
  }

  // RNIC -> host: bounded by PCIe, and stalled whenever a DDIO write must
  // evict a dirty line and the memory bus has no bandwidth left for it.
  void drain(SimTime now, Nanos dt, Bandwidth nic_bw) {
    auto pcie = transfer(sc_.host.pcie_capacity, dt);
    auto nic = transfer(nic_bw, dt) + wb_carry_;
    bool stalled = false;
    std::int64_t wb_done = 0;
    bool srq_fail = false;

    while (!fifo_.empty() && pcie.value > 0) {
      auto& c = fifo_.front();
      auto& t = transfers_.at(c.transfer);

      if (t.small && !t.has_handle) {
        const auto& m = msgs_.at(t.msg).msg;
        auto h = recv_small(m, pool_, now);
        if (!h) {
          ++rnr_stalls_;
          srq_fail = true;
          break;
        }
        t.handle = h->id;
        t.has_handle = true;
        recycle_.track(*h);
      }

      const auto in_group = kLineGroup.value - c.offset.value % kLineGroup.value;
      const auto piece = ByteSize{std::min({c.len.value, in_group, pcie.value})};
      const auto [group, reserved] = placement(t, c.offset);
      if (group != t.last_group) {
        if (ddio_.needs_writeback(group, reserved)) {
          if (nic < kLineGroup) {
            stalled = true;
            break;
          }
        }
        const auto w = ddio_.write(group, reserved);
        if (w.outcome == DdioOutcome::Allocate) {
          ++win_.misses;
        } else {
          ++win_.hits;
        }
        if (reserved) ++pool_writes_;
        nic -= w.writeback;
        wb_done += w.writeback.value;
        t.last_group = group;
      }
      pcie -= piece;
      c.offset += piece;
      c.len -= piece;
      rnic_.drain(piece);
      win_.net += piece;
      net_total_ += piece;
      const auto id = c.transfer;
      if (c.len.value == 0) fifo_.pop_front();
      on_landed(transfers_.at(id), piece, now);
    }

    wb_carry_ = std::min(nic, kLineGroup);
    if (wb_carry_.value < 0) wb_carry_ = ByteSize{0};
    win_.nic_bytes += wb_done;
    const auto demand = wb_done + (stalled ? kLineGroup.value : 0);
    pcie_.account(Bandwidth{demand}, Bandwidth{wb_done});
    if (stalled) ++win_.stalls;
    if (srq_fail && srq_failure_tick_ != now) {
      srq_failure_tick_ = now;
      on_alloc_failure(Region::Srq, now);
    }
  }

  // Bytes of a transfer reached the host (or were dropped on the way).
  void on_landed(Transfer& t, ByteSize n, SimTime now) {
    t.landed += n;
    if (sc_.mode == Mode::BaselineDdio) {
      if (t.landed == t.size) baseline_process(t, now);
      return;
    }
    while (t.sliced < t.size) {
      const auto len = std::min(kSliceMax, t.size - t.sliced);
      if (t.landed < t.sliced + len) break;
      Slice s;
      s.fragment = t.id;
      s.handle = t.handle;
      s.app = msgs_.at(t.msg).msg.app;
      s.index = t.slices++;
      s.size = len;
      s.release_latency = t.hold;
      if (s.index == 0 && !t.memory_fallback && recycle_.tracked(s.app, t.handle)) {
        recycle_.notify(pool_.handle(t.handle));
      }
      pipeline_.push(s, now);
      t.sliced += len;
    }
    if (t.landed == t.size && t.fragment != 0) {
      flow_.complete_fragment(t.fragment);
      pump_pending_ = true;
    }
  }

  void on_slice_released(const Slice& s, SimTime now) {
    auto& t = transfers_.at(s.fragment);
    if (!t.memory_fallback) {
      if (recycle_.release_slice(t.handle, s.size, now)) ++win_.releases;
      pump_pending_ = true;
    }
    t.released += s.size;
    auto& m = msgs_.at(t.msg);
    m.released += s.size;
    if (!m.lost) credit_released(s.size, now);
    const auto msg = t.msg;
    if (t.released == t.size) transfers_.erase(s.fragment);
    if (m.released == m.msg.size) complete_message(msg, now);
  }

  // Baseline: the whole message is processed on one worker, held, released.
  void baseline_process(Transfer& t, SimTime now) {
    auto w = std::min_element(baseline_workers_.begin(), baseline_workers_.end());
    const auto start = std::max(now, *w);
    const auto slices = ceil_div(t.size.value, kSliceMax.value);
    *w = start + sc_.processing.effective_cost() * slices;
    events_.push(*w + t.hold, Event{EventKind::BaselineRelease, t.msg});
    transfers_.erase(t.id);
  }

  // Goodput counts bytes as they are released: per slice in Jet, per
  // message in the baseline, which releases a message at once.
  void credit_released(ByteSize b, SimTime now) {
    win_.good += b;
    if (now >= warmup_end_ && now <= sc_.duration) good_total_ += b;
  }

  void complete_message(std::uint64_t mid, SimTime now) {
    auto it = msgs_.find(mid);
    auto& m = it->second;
    const auto qp = static_cast<std::int64_t>(m.msg.qp.value);
    if (m.lost) {
      ++lost_;
    } else {
      if (now >= warmup_end_ && now <= sc_.duration) {
        ++completed_;
        latencies_.push_back((now - m.msg.created_at).value);
      }
      win_.lat.push_back((now - m.msg.created_at).value);
      if (sc_.mode == Mode::BaselineDdio) credit_released(m.msg.size, now);
    }
    if (m.slot >= 0) qps_[static_cast<std::size_t>(qp)].slot_busy[static_cast<std::size_t>(m.slot)] = false;
    msgs_.erase(it);
    if (sc_.mode == Mode::BaselineDdio) {
      schedule_generate(qp, now);
    } else {
      to_generate_.push_back(qp);
    }
  }

  // --- sampling -------------------------------------------------------------

  void on_sample(SimTime now) {
    if (sc_.mode == Mode::Jet) {
      run_escape(now, "sample");
      ++straggler_checks_;
      if (recycle_.straggler_scan(now) != recycle_.full_recount(now)) ++straggler_mismatches_;
      if (now >= warmup_end_) steady_replace_mem_ = std::max(steady_replace_mem_, pool_.replace_mem_size());
      pool_.check_invariants();
    }
    const double secs = static_cast<double>(sc_.sample_interval.value) / 1e9;
    MetricSample s;
    s.time_ns = now.value;
    s.net_throughput_gbps = static_cast<double>(win_.net.value) * 8.0 / 1e9 / secs;
    s.goodput_gbps = static_cast<double>(win_.good.value) * 8.0 / 1e9 / secs;
    if (!win_.lat.empty()) {
      double sum = 0;
      for (auto v : win_.lat) sum += static_cast<double>(v);
      s.avg_lat_us = sum / static_cast<double>(win_.lat.size()) / 1e3;
      s.p99_lat_us = static_cast<double>(TimespanStats::percentile(win_.lat, 0.99)) / 1e3;
    }
    s.pfc_paused_us = static_cast<double>(win_.pfc_ns) / 1e3;
    s.cnp_count = static_cast<std::int64_t>(win_.cnp);
    s.drops = static_cast<std::int64_t>(win_.drops);
    const auto writes = win_.hits + win_.misses;
    s.ddio_miss_rate = writes ? static_cast<double>(win_.misses) / static_cast<double>(writes) : 0.0;
    s.pcie_stalls = static_cast<std::int64_t>(win_.stalls);
    s.mem_bw_cpu = static_cast<std::int64_t>(static_cast<double>(win_.cpu_bytes) / secs);
    s.mem_bw_nic = static_cast<std::int64_t>(static_cast<double>(win_.nic_bytes) / secs);
    const auto st = pool_.stats();
    s.free_srq_bytes = st.free_srq.value;
    s.free_read_bytes = st.free_read.value;
    s.live_bytes = st.live.value;
    s.replacement_bytes = st.replacement.value;
    s.queued_high = static_cast<std::int64_t>(flow_.queued(Qos::High));
    s.queued_low = static_cast<std::int64_t>(flow_.queued(Qos::Low));
    s.concurrency_in_use = flow_.windows().concurrency_in_use;
    s.inflight_used_bytes = flow_.windows().inflight_used.value;
    s.admit_count = static_cast<std::int64_t>(flow_.admit_count() - last_admits_);
    s.blocked_count = static_cast<std::int64_t>(flow_.blocked_count() - last_blocked_);
    last_admits_ = flow_.admit_count();
    last_blocked_ = flow_.blocked_count();
    const auto [mean_ns, p99_ns] = recycle_.timespans().take_window();
    s.avg_post_rnic_us = mean_ns / 1e3;
    s.p99_post_rnic_us = p99_ns / 1e3;
    std::int64_t stragglers = 0;
    for (const auto& [app, reg] : recycle_.registries()) stragglers += reg.stragglers();
    s.stragglers_total = stragglers;
    s.releases_per_tick = static_cast<std::int64_t>(win_.releases);
    s.escape_actions = static_cast<std::int64_t>(win_.escape_actions);
    s.replace_mem_bytes = pool_.replace_mem_size().value;
    s.copy_bytes = win_.copy.value;
    s.ecn_lowered_flag = escape_.state().ecn_lowered ? 1 : 0;
    result_.samples.push_back(s);
    win_ = Window{};
  }

  void finish_summary() {
    auto& s = result_.summary;
    s.duration_ns = sc_.duration.value;
    s.measured_ns = (sc_.duration - warmup_end_).value;
    if (sc_.duration.value == 0) s.measured_ns = 0;
    s.messages_completed = completed_;
    s.messages_lost = lost_;
    s.goodput_bytes = good_total_.value;
    s.net_bytes = net_total_.value;
    if (s.measured_ns > 0) {
      s.goodput_bytes_per_s = static_cast<std::int64_t>(static_cast<__int128>(s.goodput_bytes) * 1'000'000'000 /
                                                        s.measured_ns);
      s.goodput_gbps = to_gbps(Bandwidth{s.goodput_bytes_per_s});
      s.net_throughput_gbps =
          static_cast<double>(s.net_bytes) * 8.0 / static_cast<double>(sc_.duration.value);
    }
    if (!latencies_.empty()) {
      double sum = 0;
      for (auto v : latencies_) sum += static_cast<double>(v);
      s.avg_lat_us = sum / static_cast<double>(latencies_.size()) / 1e3;
      s.p99_lat_us = static_cast<double>(TimespanStats::percentile(latencies_, 0.99)) / 1e3;
    }
    s.pfc_paused_ns = rnic_.pfc_paused_ns();
    s.cnp_count = static_cast<std::int64_t>(rnic_.cnp_sent());
    s.drops = static_cast<std::int64_t>(rnic_.drops());
    s.dropped_bytes = rnic_.dropped_bytes().value;
    s.ddio_hits = static_cast<std::int64_t>(ddio_.hits());
    s.ddio_misses = static_cast<std::int64_t>(ddio_.misses());
    s.ddio_miss_rate = ddio_.miss_rate();
    s.pool_writes = static_cast<std::int64_t>(pool_writes_);
    s.pool_misses = static_cast<std::int64_t>(ddio_.pool_misses());
    s.pool_miss_rate = pool_writes_ ? static_cast<double>(s.pool_misses) / static_cast<double>(pool_writes_) : 0.0;
    s.writeback_bytes = ddio_.writeback_bytes().value;
    s.pcie_stalls = static_cast<std::int64_t>(pcie_.stalled_writes);
    s.rnr_stalls = rnr_stalls_;
    s.escape_evaluations = escape_evaluations_;
    s.escape_actions = static_cast<std::int64_t>(escape_.state().actions);
    s.escape_replace = escape_replace_;
    s.escape_copy = escape_copy_;
    s.escape_copy_failed = escape_copy_failed_;
    s.escape_mark_ecn = escape_mark_;
    s.max_replace_mem_bytes = max_replace_mem_.value;
    s.steady_replace_mem_bytes = steady_replace_mem_.value;
    s.copy_bytes_total = copier_.total_copied().value;
    s.max_copy_window_bytes = copier_.max_window_bytes(ms(1000)).value;
    s.copy_rate_limit_bytes_per_s = copier_.rate().value;
    s.ecn_transitions = static_cast<std::int64_t>(escape_.state().ecn_transitions);
    s.straggler_checks = straggler_checks_;
    s.straggler_mismatches = straggler_mismatches_;
    s.window_violations = window_violations_ + replace_mem_violations_;
    const auto& spans = recycle_.timespans().samples();
    if (!spans.empty()) {
      s.avg_post_rnic_us = recycle_.timespans().mean_ns() / 1e3;
      s.p99_post_rnic_us = static_cast<double>(TimespanStats::percentile(spans, 0.99)) / 1e3;
    }
    Bandwidth total{0};
    for (const auto& r : senders_) total += r.rate();
    s.final_sender_rate_gbps = to_gbps(std::min(total, sc_.host.line_rate));
    s.events_processed = static_cast<std::int64_t>(events_.processed());
  }

  Scenario sc_;
  CachePool pool_;
  FlowController flow_;
  SlicePipeline pipeline_;
  RecycleController recycle_;
  CopyEngine copier_;
  EscapeController escape_;
  MemoryBus bus_;
  DdioModel ddio_;
  PcieModel pcie_;
  RnicBuffer rnic_;
  std::vector<DcqcnLite> senders_;  // one reaction point per QP
  Rng rng_;

  EventQueue<Event> events_;
  IdFactory<MsgId> msg_ids_;
  std::unordered_map<std::uint64_t, MsgRec> msgs_;
  std::map<std::uint64_t, Transfer> transfers_;
  std::deque<Chunk> fifo_;
  std::vector<Qp> qps_;
  std::vector<SimTime> baseline_workers_;
  std::vector<std::int64_t> to_generate_;
  std::uint64_t next_transfer_{1};
  std::int64_t groups_per_msg_{1};
  std::uint64_t slow_counter_{0};

  Nanos warmup_end_{0};
  bool pump_pending_{false};
  std::optional<SimTime> alloc_failure_tick_;
  std::optional<SimTime> srq_failure_tick_;
  ByteSize wb_carry_{0};

  Window win_;
  std::uint64_t last_admits_{0};
  std::uint64_t last_blocked_{0};
  std::vector<std::int64_t> latencies_;
  std::int64_t completed_{0};
  std::int64_t lost_{0};
  ByteSize good_total_{0};
  ByteSize net_total_{0};
  std::uint64_t pool_writes_{0};
  std::int64_t rnr_stalls_{0};
  std::int64_t escape_evaluations_{0};
  std::int64_t escape_replace_{0};
  std::int64_t escape_copy_{0};
  std::int64_t escape_copy_failed_{0};
  std::int64_t escape_mark_{0};
  ByteSize max_replace_mem_{0};
  ByteSize steady_replace_mem_{0};
  std::int64_t straggler_checks_{0};
  std::int64_t straggler_mismatches_{0};
  std::int64_t window_violations_{0};
  std::int64_t replace_mem_violations_{0};

  RunResult result_;
};

inline RunResult run(const Scenario& sc) {
  Engine e(sc);
  return e.run();
}

struct SweepRow {
  ByteSize msg_size;
  Summary summary;
};

// One run per message size, rows in the order of `sizes`.
inline std::vector<SweepRow> sweep(const Scenario& base, const std::vector<ByteSize>& sizes,
                                   const std::function<RunResult(const Scenario&)>& runner = run) {
  std::vector<SweepRow> rows;
  for (auto sz : sizes) {
    auto sc = base;
    sc.msg_size = sz;
    rows.push_back({sz, runner(sc).summary});
  }
  return rows;
}

struct CompareResult {
  Summary baseline;
  Summary jet;
  double throughput_ratio{0};
};

inline double throughput_ratio(const Summary& jet, const Summary& baseline) {
  if (baseline.goodput_bytes == 0) return jet.goodput_bytes == 0 ? 1.0 : INFINITY;
  return static_cast<double>(jet.goodput_bytes) / static_cast<double>(baseline.goodput_bytes);
}

inline CompareResult compare(const Scenario& sc) {
  auto b = sc;
  b.mode = Mode::BaselineDdio;
  auto j = sc;
  j.mode = Mode::Jet;
  CompareResult r;
  r.baseline = run(b).summary;
  r.jet = run(j).summary;
  r.throughput_ratio = throughput_ratio(r.jet, r.baseline);
  return r;
}

}  // namespace rdca
