#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "rdca/cache_pool.hpp"

using namespace rdca;

namespace {

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

TEST(PoolInit, DefaultSplit) {
  CachePool p;
  EXPECT_EQ(p.total_cache_objects(), 3072);
  EXPECT_EQ(p.capacity_objects(Region::Srq), 1024);
  EXPECT_EQ(p.capacity_objects(Region::Read), 2048);
  EXPECT_EQ(p.posted_wqes(), 1024);
  EXPECT_EQ(p.available(), MiB(12));
  EXPECT_EQ(p.replace_mem_size().value, 0);
  EXPECT_EQ(p.reserved_footprint(), MiB(15));
  p.check_invariants();
}

TEST(PoolInit, BadConfigRejected) {
  PoolConfig c;
  c.srq_initial = MiB(5);
  EXPECT_EQ(code_of([&] { CachePool p(c); }), Errc::ConfigError);
  c = {};
  c.srq_min = MiB(5);
  EXPECT_EQ(code_of([&] { CachePool p(c); }), Errc::ConfigError);
  c = {};
  c.initial_wqes = 2000;
  EXPECT_EQ(code_of([&] { CachePool p(c); }), Errc::ConfigError);
}

TEST(PoolAlloc, FragmentTakesWholeObjects) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(256), AppId{1}, us(5));
  ASSERT_TRUE(h);
  EXPECT_EQ(h->region, Region::Read);
  EXPECT_EQ(h->size, KiB(256));
  EXPECT_EQ(p.held_objects(h->id), 64);
  EXPECT_EQ(p.free_bytes(Region::Read), MiB(8) - KiB(256));
  auto odd = p.alloc(Region::Read, bytes(5000), AppId{1}, us(5));
  ASSERT_TRUE(odd);
  EXPECT_EQ(p.held_objects(odd->id), 2);
  p.check_invariants();
}

TEST(PoolAlloc, ExhaustionLeavesStateUntouched) {
  CachePool p;
  std::vector<std::uint64_t> ids;
  for (int i = 0; i < 32; ++i) ids.push_back(p.alloc(Region::Read, KiB(256), AppId{0}, us(0))->id);
  EXPECT_EQ(p.free_objects(Region::Read), 0);
  const auto before = p.stats();
  EXPECT_FALSE(p.alloc(Region::Read, KiB(4), AppId{0}, us(1)));
  EXPECT_EQ(p.stats().live, before.live);
  p.free(ids[3]);
  EXPECT_TRUE(p.alloc(Region::Read, KiB(256), AppId{0}, us(2)));
  p.check_invariants();
}

TEST(PoolAlloc, RejectsZeroAndEscapeRegion) {
  CachePool p;
  EXPECT_EQ(code_of([&] { p.alloc(Region::Read, bytes(0), AppId{}, us(0)); }), Errc::ZeroSizeMessage);
  EXPECT_EQ(code_of([&] { p.alloc(Region::EscapeMem, KiB(4), AppId{}, us(0)); }), Errc::ConfigError);
}

TEST(PoolFree, DoubleFreeAndUnknown) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(8), AppId{0}, us(0));
  p.free(h->id);
  EXPECT_EQ(code_of([&] { p.free(h->id); }), Errc::DoubleFree);
  EXPECT_EQ(code_of([&] { p.free(9999); }), Errc::UnknownHandle);
  EXPECT_EQ(code_of([&] { p.release_objects(h->id, 1); }), Errc::DoubleFree);
}

TEST(PoolFree, SliceReleaseReturnsObjectsInOrder) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(16), AppId{0}, us(0));
  const auto first = p.object_at(h->id, bytes(0));
  EXPECT_FALSE(p.release_objects(h->id, 1));
  EXPECT_EQ(p.held_objects(h->id), 3);
  EXPECT_FALSE(p.release_objects(h->id, 2));
  EXPECT_TRUE(p.release_objects(h->id, 1));
  EXPECT_FALSE(p.is_live(h->id));
  auto again = p.alloc(Region::Read, KiB(4), AppId{0}, us(1));
  EXPECT_NE(p.object_at(again->id, bytes(0)), first);  // LIFO: the last object returned comes back first
  p.check_invariants();
}

TEST(PoolWqe, ConsumeAndRepost) {
  PoolConfig c;
  c.initial_wqes = 2;
  CachePool p(c);
  auto a = p.consume_wqe(AppId{0}, us(0));
  auto b = p.consume_wqe(AppId{0}, us(0));
  ASSERT_TRUE(a && b);
  EXPECT_FALSE(p.consume_wqe(AppId{0}, us(0)));
  p.free(a->id);
  EXPECT_EQ(p.posted_wqes(), 2);  // reposted up to the initial target
  EXPECT_TRUE(p.consume_wqe(AppId{0}, us(1)));
  p.check_invariants();
}

TEST(PoolWqe, PostingBeyondFreeObjectsFails) {
  CachePool p;
  EXPECT_EQ(code_of([&] { p.post_wqes(1); }), Errc::Exhausted);
  EXPECT_EQ(code_of([&] { p.post_wqes(-1); }), Errc::ConfigError);
}

TEST(PoolWqe, SrqAllocTrimsPostedWqes) {
  CachePool p;
  auto h = p.alloc(Region::Srq, KiB(64), AppId{0}, us(0));
  ASSERT_TRUE(h);
  EXPECT_EQ(p.posted_wqes(), 1024 - 16);
  p.check_invariants();
}

TEST(PoolReplace, AddsMemoryObjectsAndRetiresThem) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(64), AppId{0}, us(0));
  EXPECT_EQ(p.replace(h->id, 100), 16);
  EXPECT_TRUE(p.is_replaced(h->id));
  EXPECT_EQ(p.replace_mem_size(), KiB(64));
  EXPECT_EQ(p.free_objects(Region::Read), 2048);
  EXPECT_EQ(p.replace(h->id, 100), 0);
  p.check_invariants();
  // The straggler returns; an equal number of memory objects retire.
  EXPECT_FALSE(p.release_objects(h->id, 10));
  EXPECT_EQ(p.replace_mem_size(), KiB(24));
  p.free(h->id);
  EXPECT_EQ(p.replace_mem_size().value, 0);
  EXPECT_EQ(p.free_objects(Region::Read), 2048);
  p.check_invariants();
}

TEST(PoolReplace, BudgetRespected) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(64), AppId{0}, us(0));
  EXPECT_EQ(p.replace(h->id, 15), 0);
  EXPECT_FALSE(p.is_replaced(h->id));
}

TEST(PoolReplace, MemoryObjectsMarkHandleEscapeMem) {
  CachePool p;
  std::vector<std::uint64_t> ids;
  for (int i = 0; i < 32; ++i) ids.push_back(p.alloc(Region::Read, KiB(256), AppId{0}, us(0))->id);
  p.replace(ids[0], 64);
  auto h = p.alloc(Region::Read, KiB(4), AppId{1}, us(1));
  ASSERT_TRUE(h);
  EXPECT_EQ(h->region, Region::EscapeMem);
  EXPECT_FALSE(p.is_cache_object(p.object_at(h->id, bytes(0))));
  p.check_invariants();
}

TEST(PoolDetach, ObjectsReturnImmediately) {
  CachePool p;
  auto h = p.alloc(Region::Read, KiB(32), AppId{0}, us(0));
  EXPECT_EQ(p.detach(h->id), 8);
  EXPECT_TRUE(p.is_detached(h->id));
  EXPECT_EQ(p.free_objects(Region::Read), 2048);
  EXPECT_EQ(p.held_objects(h->id), 0);
  EXPECT_EQ(p.detach(h->id), 0);
  p.check_invariants();
  EXPECT_FALSE(p.release_objects(h->id, 7));
  EXPECT_TRUE(p.release_objects(h->id, 1));
  EXPECT_EQ(p.free_objects(Region::Read), 2048);
  p.check_invariants();
}

// Reference for rebalance: the smallest SRQ size s with
// s * (ds + dr) >= total * ds, floored at srq_min, then approached one free
// object at a time.
std::int64_t rebalance_oracle(std::int64_t total, std::int64_t srq_min, std::int64_t srq_cap, std::int64_t free_srq,
                              std::int64_t free_read, std::int64_t ds, std::int64_t dr) {
  std::int64_t desired = total;
  for (std::int64_t s = 0; s <= total; ++s) {
    if (static_cast<__int128>(s) * (ds + dr) >= static_cast<__int128>(total) * ds) {
      desired = s;
      break;
    }
  }
  desired = std::max(desired, srq_min);
  while (srq_cap > desired && free_srq > 0) {
    --srq_cap;
    --free_srq;
  }
  while (srq_cap < desired && free_read > 0) {
    ++srq_cap;
    --free_read;
  }
  return srq_cap;
}

TEST(PoolRebalance, MatchesTwoBucketOracle) {
  std::mt19937_64 rng(11);
  for (int round = 0; round < 300; ++round) {
    CachePool p;
    std::uniform_int_distribution<int> n_alloc(0, 20);
    const int k = n_alloc(rng);
    for (int i = 0; i < k; ++i) {
      const Region r = (rng() & 1) ? Region::Srq : Region::Read;
      p.alloc(r, KiB(4) * static_cast<std::int64_t>(1 + rng() % 64), AppId{0}, us(0));
    }
    const std::int64_t ds = static_cast<std::int64_t>(rng() % 5000);
    const std::int64_t dr = static_cast<std::int64_t>(rng() % 5000) + (ds == 0 ? 1 : 0);
    const auto expect =
        rebalance_oracle(3072, 256, p.capacity_objects(Region::Srq), p.free_cache_objects(Region::Srq),
                         p.free_cache_objects(Region::Read), ds, dr);
    p.rebalance(ByteSize{ds}, ByteSize{dr});
    EXPECT_EQ(p.capacity_objects(Region::Srq), expect) << "round " << round;
    EXPECT_GE(p.capacity_objects(Region::Srq), 256);
    p.check_invariants();
  }
}

TEST(PoolRebalance, IdleSrqShrinksToFloor) {
  CachePool p;
  p.rebalance(ByteSize{0}, MiB(8));
  EXPECT_EQ(p.capacity_objects(Region::Srq), 256);
  EXPECT_EQ(p.capacity_objects(Region::Read), 2816);
  EXPECT_LE(p.posted_wqes(), 256);
  p.rebalance(MiB(12), ByteSize{0});
  EXPECT_EQ(p.capacity_objects(Region::Srq), 3072);
  p.check_invariants();
}

TEST(PoolRebalance, LiveObjectsNeverMove) {
  CachePool p;
  std::vector<std::uint64_t> ids;
  for (int i = 0; i < 16; ++i) ids.push_back(p.alloc(Region::Srq, KiB(256), AppId{0}, us(0))->id);
  p.rebalance(ByteSize{0}, MiB(8));
  EXPECT_EQ(p.capacity_objects(Region::Srq), 1024);
  for (auto id : ids) EXPECT_EQ(p.handle(id).region, Region::Srq);
  p.check_invariants();
}

// Randomized replay against a shadow of held objects per live handle.
TEST(PoolProperty, ConservationAndDisjointOwnership) {
  std::mt19937_64 rng(2024);
  CachePool p;
  struct Shadow {
    Region home;
    std::int64_t objects;
    std::int64_t released{0};
    bool detached{false};
  };
  std::map<std::uint64_t, Shadow> live;
  std::set<std::uint64_t> dead;
  for (int step = 0; step < 20000; ++step) {
    const auto op = rng() % 8;
    if (op <= 2 || live.empty()) {
      const Region r = (rng() % 3 == 0) ? Region::Srq : Region::Read;
      const auto size = bytes(static_cast<std::int64_t>(1 + rng() % (KiB(64).value)));
      if (auto h = p.alloc(r, size, AppId{rng() % 4}, us(step))) {
        live[h->id] = {r, p.objects_for(size)};
      }
    } else {
      auto it = live.begin();
      std::advance(it, static_cast<long>(rng() % live.size()));
      auto& s = it->second;
      if (op == 3) {
        p.free(it->first);
        dead.insert(it->first);
        live.erase(it);
      } else if (op == 4) {
        const auto n = static_cast<std::int64_t>(1 + rng() % 4);
        const bool done = p.release_objects(it->first, n);
        s.released = std::min(s.objects, s.released + n);
        EXPECT_EQ(done, s.released == s.objects);
        if (done) {
          dead.insert(it->first);
          live.erase(it);
        }
      } else if (op == 5) {
        p.replace(it->first, static_cast<std::int64_t>(rng() % 64));
      } else if (op == 6) {
        p.detach(it->first);
        s.detached = true;
      } else {
        p.rebalance(ByteSize{static_cast<std::int64_t>(rng() % 100000)},
                    ByteSize{static_cast<std::int64_t>(rng() % 100000)});
      }
    }
    if (!dead.empty() && rng() % 50 == 0) {
      const auto victim = *dead.begin();
      EXPECT_EQ(code_of([&] { p.free(victim); }), Errc::DoubleFree);
    }

    p.check_invariants();
    std::array<std::int64_t, 2> held{0, 0};
    std::set<CachePool::ObjectId> owned;
    for (const auto& [id, s] : live) {
      if (s.detached) continue;
      held[s.home == Region::Srq ? 0 : 1] += s.objects - s.released;
      EXPECT_EQ(p.held_objects(id), s.objects - s.released);
      for (auto k = s.released; k < s.objects; ++k) {
        EXPECT_TRUE(owned.insert(p.object_at(id, ByteSize{k * 4096})).second) << "overlap at step " << step;
      }
    }
    for (Region r : {Region::Srq, Region::Read}) {
      const auto i = r == Region::Srq ? 0 : 1;
      ASSERT_EQ(p.free_objects(r) + held[i], p.capacity_objects(r) + p.replacement_objects(r)) << "step " << step;
    }
    ASSERT_EQ(p.capacity_objects(Region::Srq) + p.capacity_objects(Region::Read), 3072);
  }
}
