#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "rdca/flow_control.hpp"

using namespace rdca;

namespace {

Message large(std::uint64_t id, ByteSize size = MiB(1), std::uint64_t app = 0) {
  return Message::make(MsgId{id}, AppId{app}, QpId{id % 32}, size, us(0));
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::InvariantViolation;
}

}  // namespace

TEST(Fragment, FixedSizeRemainderLast) {
  auto f = fragment(MiB(1), KiB(256));
  ASSERT_EQ(f.size(), 4u);
  for (auto s : f) EXPECT_EQ(s, KiB(256));
  auto g = fragment(KiB(600), KiB(256));
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[2], KiB(88));
  EXPECT_EQ(fragment(KiB(100), KiB(256)).size(), 1u);
  EXPECT_EQ(code_of([] { fragment(bytes(0), KiB(256)); }), Errc::ZeroSizeMessage);
}

TEST(FlowPaths, SmallAndLargeAreSeparated) {
  FlowController fc;
  auto small = Message::make(MsgId{1}, AppId{0}, QpId{0}, KiB(4), us(0));
  EXPECT_EQ(code_of([&] { fc.submit(fc.make_request(small, Qos::High, us(0))); }), Errc::WrongPath);
  CachePool pool;
  EXPECT_EQ(code_of([&] { recv_small(large(2), pool, us(0)); }), Errc::WrongPath);
  auto h = recv_small(small, pool, us(0));
  ASSERT_TRUE(h);
  EXPECT_EQ(h->region, Region::Srq);
}

TEST(FlowPaths, RecvSmallWithoutWqe) {
  PoolConfig c;
  c.initial_wqes = 0;
  CachePool pool(c);
  auto small = Message::make(MsgId{1}, AppId{0}, QpId{0}, bytes(100), us(0));
  EXPECT_FALSE(recv_small(small, pool, us(0)));
}

TEST(FlowAdmission, ConcurrencyCapsAdmission) {
  FlowController fc;
  for (std::uint64_t i = 0; i < 40; ++i) fc.submit(fc.make_request(large(i), Qos::High, us(0)));
  auto admitted = fc.admit(MiB(8), us(1));
  EXPECT_EQ(admitted.size(), 32u);
  EXPECT_EQ(fc.windows().concurrency_in_use, 32);
  EXPECT_EQ(fc.queued(Qos::High), 8u);
}

// Scripted trace: fill, block on the in-flight window, resume on completion.
TEST(FlowAdmission, BlockedAndResumeTrace) {
  FlowController fc;
  CachePool pool;
  for (std::uint64_t i = 0; i < 40; ++i) fc.submit(fc.make_request(large(i), Qos::High, us(0)));
  fc.admit(pool.free_bytes(Region::Read), us(0));
  auto frags = fc.pump(pool, us(0));
  ASSERT_EQ(frags.size(), 32u);
  EXPECT_EQ(fc.windows().inflight_used, MiB(8));
  EXPECT_EQ(fc.last_block(), BlockReason::InflightFull);
  for (std::size_t i = 0; i < frags.size(); ++i) EXPECT_EQ(frags[i].parent, MsgId{i});

  EXPECT_TRUE(fc.pump(pool, us(1)).empty());
  pool.free(frags[0].handle.id);
  auto done = fc.complete_fragment(frags[0].id);
  EXPECT_FALSE(done.message_done);
  EXPECT_EQ(fc.windows().inflight_used, MiB(8) - KiB(256));
  auto more = fc.pump(pool, us(2));
  ASSERT_EQ(more.size(), 1u);
  EXPECT_EQ(more[0].parent, MsgId{0});
  EXPECT_EQ(more[0].index, 1);
  EXPECT_EQ(more[0].offset, KiB(256));
}

TEST(FlowAdmission, MessageDoneFreesConcurrency) {
  FlowController fc;
  CachePool pool;
  fc.submit(fc.make_request(large(0, KiB(300)), Qos::High, us(0)));
  fc.admit(MiB(8), us(0));
  auto f = fc.pump(pool, us(0));
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[1].size, KiB(44));
  EXPECT_FALSE(fc.complete_fragment(f[0].id).message_done);
  EXPECT_TRUE(fc.complete_fragment(f[1].id).message_done);
  EXPECT_EQ(fc.windows().concurrency_in_use, 0);
  EXPECT_EQ(fc.windows().inflight_used.value, 0);
  EXPECT_EQ(code_of([&] { fc.complete_fragment(f[1].id); }), Errc::UnknownFragment);
}

TEST(FlowAdmission, HighBeforeLowAndHeadBlocks) {
  FlowConfig cfg;
  cfg.concurrency_limit = 1;
  FlowController fc(cfg);
  fc.submit(fc.make_request(large(1), Qos::Low, us(0)));
  fc.submit(fc.make_request(large(2), Qos::High, us(1)));
  auto a = fc.admit(MiB(8), us(2));
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0], MsgId{2});

  // Footprint predicate: 100 Gbps fair share over 200 us is 2.5 MB.
  FlowController fc2;
  fc2.submit(fc2.make_request(large(3), Qos::High, us(0)));
  fc2.submit(fc2.make_request(large(4), Qos::Low, us(0)));
  EXPECT_EQ(fc2.expected_footprint(*std::make_unique<ReadRequest>(fc2.make_request(large(9), Qos::High, us(0)))),
            ByteSize{2'500'000});
  EXPECT_TRUE(fc2.admit(ByteSize{2'499'999}, us(0)).empty());
  EXPECT_EQ(fc2.queued(Qos::Low), 1u);
  // The second admission sees a halved fair share.
  auto b = fc2.admit(ByteSize{2'500'000}, us(0));
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0], MsgId{3});
}

TEST(FlowAdmission, LowQosFallsBackToMemory) {
  CachePool pool;
  std::vector<std::uint64_t> hold;
  for (int i = 0; i < 32; ++i) hold.push_back(pool.alloc(Region::Read, KiB(256), AppId{9}, us(0))->id);

  FlowController fc;
  fc.submit(fc.make_request(large(1), Qos::High, us(0)));
  fc.submit(fc.make_request(large(2), Qos::Low, us(0)));
  fc.admit(MiB(8), us(0));
  auto frags = fc.pump(pool, us(0));
  EXPECT_TRUE(frags.empty());
  EXPECT_EQ(fc.last_block(), BlockReason::PoolExhausted);
  EXPECT_GE(fc.blocked_count(), 1u);

  FlowController low_only;
  low_only.submit(low_only.make_request(large(3), Qos::Low, us(0)));
  low_only.admit(MiB(8), us(0));
  auto lf = low_only.pump(pool, us(0));
  ASSERT_EQ(lf.size(), 4u);
  for (const auto& f : lf) {
    EXPECT_TRUE(f.memory_fallback);
    EXPECT_EQ(f.handle.region, Region::EscapeMem);
    EXPECT_TRUE(FlowController::is_memory_handle(f.handle.id));
  }
  pool.check_invariants();
}

// Admission order must equal a stable sort of submissions by class.
TEST(FlowProperty, AdmissionOrderIsStablePrioritySort) {
  std::mt19937_64 rng(5);
  for (int round = 0; round < 50; ++round) {
    FlowConfig cfg;
    cfg.concurrency_limit = 1'000'000;
    cfg.inflight_limit = MiB(1'000'000);
    FlowController fc(cfg);
    std::vector<std::pair<Qos, std::uint64_t>> log;
    const int n = 1 + static_cast<int>(rng() % 60);
    for (int i = 0; i < n; ++i) {
      const auto q = (rng() & 1) ? Qos::High : Qos::Low;
      fc.submit(fc.make_request(large(static_cast<std::uint64_t>(i)), q, us(i)));
      log.emplace_back(q, i);
    }
    std::stable_sort(log.begin(), log.end(),
                     [](const auto& a, const auto& b) { return a.first == Qos::High && b.first == Qos::Low; });
    auto got = fc.admit(MiB(1'000'000), us(100));
    ASSERT_EQ(got.size(), log.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i].value, log[i].second);
  }
}

// Random admission/completion replay with a shadow of both windows.
TEST(FlowProperty, WindowsHoldUnderRandomEvents) {
  std::mt19937_64 rng(77);
  FlowController fc;
  CachePool pool;
  std::map<std::uint64_t, Fragment> outstanding;
  std::map<MsgId, ByteSize> remaining;
  std::uint64_t next_msg = 0;
  std::int64_t shadow_conc = 0;
  ByteSize shadow_inflight{0};
  for (int step = 0; step < 20000; ++step) {
    const auto op = rng() % 4;
    if (op == 0) {
      const auto size = bytes(static_cast<std::int64_t>(KiB(4).value + 1 + rng() % MiB(2).value));
      auto m = Message::make(MsgId{next_msg++}, AppId{rng() % 3}, QpId{0}, size, us(step));
      fc.submit(fc.make_request(m, (rng() & 1) ? Qos::High : Qos::Low, us(step)));
      remaining[m.id] = size;
    } else if (op == 1) {
      for (auto id : fc.admit(pool.free_bytes(Region::Read), us(step))) {
        (void)id;
        ++shadow_conc;
      }
      for (const auto& f : fc.pump(pool, us(step))) {
        outstanding[f.id] = f;
        shadow_inflight += f.size;
      }
    } else if (!outstanding.empty()) {
      auto it = outstanding.begin();
      std::advance(it, static_cast<long>(rng() % outstanding.size()));
      const auto f = it->second;
      outstanding.erase(it);
      if (!f.memory_fallback) pool.free(f.handle.id);
      shadow_inflight -= f.size;
      auto done = fc.complete_fragment(f.id);
      remaining[f.parent] -= f.size;
      EXPECT_EQ(done.message_done, remaining[f.parent].value == 0);
      if (done.message_done) --shadow_conc;
    }
    const auto& w = fc.windows();
    ASSERT_TRUE(w.valid()) << "step " << step;
    ASSERT_LE(w.concurrency_in_use, 32);
    ASSERT_LE(w.inflight_used, MiB(8));
    ASSERT_EQ(w.concurrency_in_use, shadow_conc);
    ASSERT_EQ(w.inflight_used, shadow_inflight);
  }
}
