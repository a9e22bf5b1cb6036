#include <gtest/gtest.h>

#include <random>

#include "escape_oracle.hpp"
#include "rdca/escape.hpp"

using namespace rdca;
using rdca::testing::MockEnv;
using rdca::testing::MockState;

TEST(EscapeConfig, Validation) {
  EscapeConfig c;
  EXPECT_NO_THROW(c.validate(MiB(12)));
  EXPECT_THROW(c.validate(MiB(2)), Error);
  c.cache_danger = MiB(4);
  EXPECT_THROW(c.validate(MiB(12)), Error);
  c = {};
  c.credit = 0;
  EXPECT_THROW(c.validate(MiB(12)), Error);
  c = {};
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(MiB(12)), Error);
  c = {};
  c.time_th = ns(0);
  EXPECT_THROW(c.validate(MiB(12)), Error);
}

TEST(SlowlyReleasing, StrictlyAboveCredit) {
  EXPECT_FALSE(slowly_releasing({AppId{0}, 5, 10}, 0.5));
  EXPECT_TRUE(slowly_releasing({AppId{0}, 6, 10}, 0.5));
  EXPECT_FALSE(slowly_releasing({AppId{0}, 0, 0}, 0.5));
  EXPECT_FALSE(slowly_releasing({AppId{0}, 10, 10}, 1.0));
}

TEST(EscapeTree, NothingWhenSafe) {
  MockEnv env;
  env.s.avl = MiB(3).value;
  EXPECT_TRUE(escape(env, EscapeConfig{}).empty());
  EXPECT_TRUE(env.calls.empty());
}

TEST(EscapeTree, ReplaceWhileBudgetRemains) {
  MockEnv env;
  env.s.avl = MiB(2).value;
  env.s.repl = MiB(4).value - 1;
  env.s.replace_gain = KiB(64).value;
  auto a = escape(env, EscapeConfig{});
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].kind, EscapeKind::BufferReplace);
  EXPECT_EQ(a[0].bytes, KiB(64));
}

TEST(EscapeTree, CopiesOnlySlowAppsOnceBudgetSpent) {
  MockEnv env;
  env.s.avl = MiB(2).value;
  env.s.repl = MiB(4).value;
  env.s.apps = {{AppId{0}, 1, 10}, {AppId{1}, 9, 10}, {AppId{2}, 3, 4}};
  env.s.copy_ok = {true, true, false};
  env.s.copy_gain = {0, 100, 0};
  auto a = escape(env, EscapeConfig{});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].kind, EscapeKind::DataCopy);
  EXPECT_EQ(a[0].app, AppId{1});
  EXPECT_EQ(a[1].kind, EscapeKind::CopyFailed);
  EXPECT_EQ(a[1].app, AppId{2});
}

TEST(EscapeTree, DangerMarksEcnAfterOtherActions) {
  MockEnv env;
  env.s.avl = KiB(100).value;
  env.s.replace_gain = KiB(4).value;
  auto a = escape(env, EscapeConfig{});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[1].kind, EscapeKind::MarkEcn);
  // A replace that lifts the pool out of danger skips the mark.
  MockEnv env2;
  env2.s.avl = KiB(100).value;
  env2.s.replace_gain = MiB(2).value;
  EXPECT_EQ(escape(env2, EscapeConfig{}).size(), 1u);
}

TEST(EscapeTree, MatchesReferenceOnRandomStates) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 5000; ++i) {
    EscapeConfig cfg;
    const double credits[] = {0.25, 0.5, 0.75, 1.0};
    cfg.credit = credits[rng() % 4];
    const auto state = rdca::testing::random_state(rng, MiB(4).value);
    MockEnv env{state, {}};
    auto actions = escape(env, cfg);
    const auto want =
        rdca::testing::oracle_calls(state, cfg.cache_safe.value, cfg.cache_danger.value, cfg.mem_esc.value, cfg.credit);
    ASSERT_EQ(env.calls, want) << "case " << i;
    ASSERT_EQ(rdca::testing::action_calls(actions), want) << "case " << i;
  }
}

TEST(CopyEngine, RateLimitedPerTick) {
  CopyEngine c(gbps(100), 0.04);
  EXPECT_EQ(c.rate().value, 500'000'000);
  c.enqueue(ByteSize{10'000});
  std::int64_t moved = 0;
  for (int t = 0; t < 30; ++t) {
    const auto m = c.tick(SimTime{t * 1000}, us(1));
    EXPECT_LE(m.value, 500);
    moved += m.value;
  }
  EXPECT_EQ(moved, 10'000);
  EXPECT_EQ(c.backlog().value, 0);
  EXPECT_EQ(c.total_copied().value, 10'000);
  EXPECT_EQ(c.log().front().bytes.value, 1000);  // read + write
  EXPECT_EQ(c.tick(SimTime{40'000}, us(1)).value, 0);
}

TEST(CopyEngine, WindowNeverExceedsTwiceAlphaLine) {
  std::mt19937_64 rng(12);
  CopyEngine c(gbps(100), 0.04);
  std::int64_t t = 0;
  for (int i = 0; i < 200'000; ++i) {
    if (rng() % 1000 == 0) c.enqueue(ByteSize{static_cast<std::int64_t>(rng() % MiB(4).value)});
    c.tick(SimTime{t}, us(1));
    t += 1000;
  }
  for (auto w : {us(100), ms(1), ms(10), ms(100)}) {
    const auto bound = 2 * transfer(c.rate(), w).value;
    EXPECT_LE(c.max_window_bytes(w).value, bound + 2 * 500) << w.value;
  }
}

TEST(CopyEngine, SlidingWindowMatchesBruteForce) {
  std::mt19937_64 rng(13);
  CopyEngine c(gbps(25), 0.5);
  std::int64_t t = 0;
  for (int i = 0; i < 3000; ++i) {
    if (rng() % 50 == 0) c.enqueue(ByteSize{static_cast<std::int64_t>(rng() % 200'000)});
    c.tick(SimTime{t}, us(1));
    t += 1000 * static_cast<std::int64_t>(1 + rng() % 3);
  }
  const auto& log = c.log();
  const auto w = us(37);
  std::int64_t best = 0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    std::int64_t sum = 0;
    for (std::size_t j = i; j < log.size() && log[j].time - log[i].time < w; ++j) sum += log[j].bytes.value;
    best = std::max(best, sum);
  }
  EXPECT_EQ(c.max_window_bytes(w).value, best);
}

namespace {

struct Rig {
  CachePool pool;
  RecycleController recycle{pool, ms(1)};
  CopyEngine copier{gbps(100), 0.04};
  bool fault{false};
  bool lowered{false};
  EscapeController esc{EscapeConfig{}, pool, recycle, copier, make_host()};

  EscapeHost make_host() {
    EscapeHost h;
    h.copy_fault = [this] { return fault; };
    h.set_ecn_lowered = [this](bool on) { lowered = on; };
    return h;
  }

  std::vector<std::uint64_t> fill(AppId app, int count, SimTime at) {
    std::vector<std::uint64_t> ids;
    for (int i = 0; i < count; ++i) {
      auto h = pool.alloc(Region::Read, KiB(256), app, at);
      if (!h) break;
      recycle.track(*h);
      ids.push_back(h->id);
    }
    return ids;
  }

  // Takes 8 SRQ objects of 256 KiB so only 2 MiB of the pool stays free.
  void squeeze(AppId app, SimTime at) {
    for (int i = 0; i < 8; ++i) recycle.track(*pool.alloc(Region::Srq, KiB(256), app, at));
  }
};

}  // namespace

TEST(EscapeController, ReplaceStaysWithinMemoryBudget) {
  Rig r;
  r.fill(AppId{1}, 32, SimTime{0});
  r.squeeze(AppId{2}, SimTime{0});
  auto a = r.esc.evaluate(ms(2), "test");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a[0].kind, EscapeKind::BufferReplace);
  EXPECT_EQ(r.pool.replace_mem_size(), MiB(4));
  EXPECT_LE(r.esc.state().max_replace_mem, MiB(4));
  r.pool.check_invariants();

  // A fresh app takes the replacement objects; with the budget spent the
  // slow apps' buffers are copied out.
  EXPECT_EQ(r.fill(AppId{3}, 16, ms(2)).size(), 16u);
  auto b = r.esc.evaluate(ms(3), "test");
  ASSERT_FALSE(b.empty());
  EXPECT_EQ(b[0].kind, EscapeKind::DataCopy);
  EXPECT_EQ(b[0].app, AppId{1});
  EXPECT_GE(r.pool.available(), MiB(12));
  EXPECT_FALSE(r.recycle.tracked(AppId{1}, 1));
  EXPECT_GT(r.copier.backlog().value, 0);
  r.pool.check_invariants();
}

TEST(EscapeController, FreshBuffersAreNotStragglers) {
  Rig r;
  r.fill(AppId{1}, 32, SimTime{0});
  r.squeeze(AppId{2}, SimTime{0});
  auto a = r.esc.evaluate(us(500), "test");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a[0].kind, EscapeKind::BufferReplace);
  EXPECT_EQ(a[0].bytes.value, 0);
  EXPECT_EQ(r.pool.replace_mem_size().value, 0);
}

TEST(EscapeController, EcnLowersInDangerAndRestoresAtSafe) {
  Rig r;
  auto big = r.fill(AppId{1}, 32, SimTime{0});
  std::vector<std::uint64_t> srq;
  for (int i = 0; i < 14; ++i) srq.push_back(r.pool.alloc(Region::Srq, KiB(256), AppId{2}, SimTime{0})->id);
  ASSERT_LT(r.pool.available(), EscapeConfig{}.cache_danger);
  auto a = r.esc.evaluate(us(10), "test");
  EXPECT_TRUE(r.lowered);
  EXPECT_EQ(a.back().kind, EscapeKind::MarkEcn);
  EXPECT_EQ(r.esc.state().ecn_transitions, 1u);

  for (int i = 0; i < 8; ++i) r.pool.free(big[static_cast<std::size_t>(i)]);
  ASSERT_LT(r.pool.available(), MiB(3));
  r.esc.evaluate(us(20), "test");
  EXPECT_TRUE(r.lowered);  // between danger and safe: hold

  for (int i = 8; i < 16; ++i) r.pool.free(big[static_cast<std::size_t>(i)]);
  auto c = r.esc.evaluate(us(30), "test");
  EXPECT_FALSE(r.lowered);
  ASSERT_FALSE(c.empty());
  EXPECT_EQ(c.back().kind, EscapeKind::RestoreEcn);
  EXPECT_EQ(r.esc.state().ecn_transitions, 2u);
}

TEST(EscapeController, CopyFaultLeavesBuffersInPlace) {
  Rig r;
  r.fill(AppId{1}, 32, SimTime{0});
  r.squeeze(AppId{2}, SimTime{0});
  r.esc.evaluate(ms(2), "test");
  r.fill(AppId{3}, 16, ms(2));
  r.fault = true;
  auto b = r.esc.evaluate(ms(3), "test");
  ASSERT_FALSE(b.empty());
  EXPECT_EQ(b[0].kind, EscapeKind::CopyFailed);
  EXPECT_EQ(r.copier.backlog().value, 0);
  EXPECT_TRUE(r.recycle.tracked(AppId{1}, 1));
  EXPECT_EQ(r.esc.events().back().cause, "test");
}
