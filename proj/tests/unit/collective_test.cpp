// Copyright 2026 The pipesgd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <mutex>
#include <random>

#include "pipesgd/collective.hpp"
#include "pipesgd/inproc_transport.hpp"
#include "support/oracles.hpp"
#include "support/ranks.hpp"

namespace {

using namespace pipesgd;
using namespace pipesgd::comm;
using codec::CodecId;
using testing_support::run_ranks;
using namespace std::chrono_literals;

using Inputs = std::vector<std::vector<float>>;

Inputs random_inputs(int p, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Inputs in(p, std::vector<float>(n));
  for (auto& v : in) {
    for (auto& x : v) x = d(rng);
  }
  return in;
}

enum class Variant { ring, pipelined };

Inputs allreduce_all(const Inputs& in, CodecId c, Variant v, std::size_t chunk = 4096,
                     LinkModel link = {}) {
  const int p = static_cast<int>(in.size());
  InProcFabric f(p, link);
  f.set_recv_timeout(10s);
  Inputs out(p);
  run_ranks(f, [&](Transport& t) {
    CollectiveOptions o;
    o.chunk_elems = chunk;
    const GradVec r = v == Variant::ring ? ring_allreduce(in[t.rank()], t, c, o)
                                         : pipelined_allreduce(in[t.rank()], t, c, o);
    out[t.rank()] = r.values();
  });
  return out;
}

TEST(BlockPartitionTest, CoversVectorWithBalancedBlocks) {
  for (std::size_t n : {0, 1, 7, 8, 1024, 4099}) {
    for (int p : {1, 2, 3, 4, 8}) {
      const BlockPartition part(n, p);
      std::size_t next = 0, lo = n, hi = 0;
      for (int b = 0; b < p; ++b) {
        EXPECT_EQ(part[b].offset, next);
        next += part[b].length;
        lo = std::min(lo, part[b].length);
        hi = std::max(hi, part[b].length);
      }
      EXPECT_EQ(next, n);
      EXPECT_LE(hi - std::min(lo, hi), 1u);
    }
  }
  EXPECT_THROW(BlockPartition(4, 0), ConfigError);
}

TEST(RingTopologyTest, SuccessorInvertsPredecessor) {
  for (int p : {1, 2, 5}) {
    const RingTopology ring{p};
    int r = 0;
    for (int i = 0; i < p; ++i) {
      EXPECT_EQ(ring.successor(ring.predecessor(i)), i);
      r = ring.successor(r);
    }
    EXPECT_EQ(r, 0);
  }
}

TEST(RingAllReduceTest, TwoPartySum) {
  const Inputs out = allreduce_all({{1, 2}, {3, 4}}, CodecId::none, Variant::ring);
  for (const auto& v : out) EXPECT_EQ(v, (std::vector<float>{4, 6}));
}

TEST(RingAllReduceTest, MatchesDirectSumOracle) {
  for (Variant v : {Variant::ring, Variant::pipelined}) {
    for (int p : {1, 2, 3, 4, 8}) {
      for (std::size_t n : {std::size_t{1}, std::size_t{7}, static_cast<std::size_t>(p),
                            std::size_t{1024}, std::size_t{4099}}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
          const Inputs in = random_inputs(p, n, seed * 100 + n);
          const Inputs out = allreduce_all(in, CodecId::none, v, 100);
          const auto sum = oracle::direct_sum(in);
          const auto mag = oracle::abs_sum(in);
          for (const auto& o : out) {
            ASSERT_LE(oracle::max_sum_rel_error(o, sum, mag), 1e-6)
                << "p=" << p << " n=" << n;
          }
        }
      }
    }
  }
}

TEST(RingAllReduceTest, ZerosStayExactUnderQuant8) {
  const Inputs in(4, std::vector<float>(1024, 0.0f));
  for (Variant v : {Variant::ring, Variant::pipelined}) {
    for (const auto& o : allreduce_all(in, CodecId::quant8, v)) {
      for (float x : o) ASSERT_EQ(x, 0.0f);
    }
  }
}

TEST(RingAllReduceTest, RanksAgreeBitExactly) {
  for (CodecId c : {CodecId::none, CodecId::trunc16, CodecId::quant8}) {
    const Inputs out = allreduce_all(random_inputs(5, 999, 3), c, Variant::ring);
    for (const auto& o : out) EXPECT_TRUE(bit_equal(o, out[0])) << codec::to_string(c);
  }
}

TEST(RingAllReduceTest, Quant8WithinEnvelope) {
  for (int p : {2, 4, 8}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Inputs in = random_inputs(p, 1000, seed);
      double max_in = 0.0;
      for (const auto& v : in) {
        for (float x : v) max_in = std::max(max_in, std::fabs(double{x}));
      }
      const auto sum = oracle::direct_sum(in);
      for (Variant v : {Variant::ring, Variant::pipelined}) {
        const Inputs out = allreduce_all(in, CodecId::quant8, v, 128);
        for (std::size_t i = 0; i < sum.size(); ++i) {
          ASSERT_LE(std::fabs(out[0][i] - sum[i]), p * max_in / 64.0);
        }
      }
    }
  }
}

TEST(PipelinedAllReduceTest, BitExactWithRingForElementwiseCodecs) {
  for (CodecId c : {CodecId::none, CodecId::trunc16}) {
    for (int p : {2, 4, 8}) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Inputs in = random_inputs(p, 3000 + seed, seed);
        const Inputs a = allreduce_all(in, c, Variant::ring);
        const Inputs b = allreduce_all(in, c, Variant::pipelined, 97);
        for (int r = 0; r < p; ++r) ASSERT_TRUE(bit_equal(a[r], b[r]));
      }
    }
  }
}

TEST(PipelinedAllReduceTest, NotSlowerUnderInjectedLatency) {
  const Inputs in = random_inputs(4, 1 << 15, 1);
  const auto link = LinkModel::from_ms_mbps(2.0, 200.0);
  const auto time = [&](Variant v) {
    const auto start = Clock::now();
    allreduce_all(in, CodecId::trunc16, v, 2048, link);
    return std::chrono::duration<double>(Clock::now() - start).count();
  };
  double seq = 1e9, pipe = 1e9;
  for (int i = 0; i < 3; ++i) {
    seq = std::min(seq, time(Variant::ring));
    pipe = std::min(pipe, time(Variant::pipelined));
  }
  EXPECT_LE(pipe, seq * 1.15 + 0.005);
}

TEST(AllReduceAccountingTest, MessageAndByteCounts) {
  for (CodecId c : {CodecId::none, CodecId::trunc16, CodecId::quant8}) {
    for (int p : {2, 4, 8}) {
      const std::size_t n = 256 * static_cast<std::size_t>(p);
      const Inputs in = random_inputs(p, n, 2);
      InProcFabric f(p);
      run_ranks(f, [&](Transport& t) { ring_allreduce(in[t.rank()], t, c); });
      for (int r = 0; r < p; ++r) {
        const auto s = f.endpoint(r).stats().snapshot();
        const auto steps = static_cast<std::uint64_t>(2 * (p - 1));
        EXPECT_EQ(s.messages[0], steps);
        EXPECT_EQ(s.payload_bytes[0],
                  steps * (n / p) * codec::bytes_per_element(c) +
                      steps * codec::kBlockHeaderBytes);
      }
    }
  }
}

TEST(AllReduceErrorTest, LengthMismatchNamesTheStep) {
  InProcFabric f(2);
  f.set_recv_timeout(2s);
  try {
    run_ranks(f, [&](Transport& t) {
      std::vector<float> v(t.rank() == 0 ? 8 : 10, 1.0f);
      ring_allreduce(v, t, CodecId::none);
    });
    FAIL() << "expected CollectiveError";
  } catch (const CollectiveError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(AllReduceErrorTest, IterationMismatchDetected) {
  InProcFabric f(2);
  f.set_recv_timeout(2s);
  EXPECT_THROW(run_ranks(f,
                         [&](Transport& t) {
                           CollectiveOptions o;
                           o.iteration = static_cast<std::uint32_t>(t.rank());
                           std::vector<float> v(4, 1.0f);
                           ring_allreduce(v, t, CodecId::none, o);
                         }),
               CollectiveError);
}

TEST(AllReduceErrorTest, CodecMismatchDetected) {
  InProcFabric f(2);
  f.set_recv_timeout(2s);
  EXPECT_THROW(run_ranks(f,
                         [&](Transport& t) {
                           std::vector<float> v(4, 1.0f);
                           ring_allreduce(v, t, t.rank() ? CodecId::quant8 : CodecId::none);
                         }),
               CollectiveError);
}

TEST(AllReduceErrorTest, MissingPeerTimesOut) {
  InProcFabric f(3);
  f.set_recv_timeout(100ms);
  std::vector<float> v(6, 1.0f);
  EXPECT_THROW(ring_allreduce(v, f.endpoint(0), CodecId::none), CollectiveError);
}

TEST(GatherTest, UnitVectors) {
  InProcFabric f(3);
  std::optional<GradVec> root_result;
  std::mutex mu;
  run_ranks(f, [&](Transport& t) {
    std::vector<float> e(3, 0.0f);
    e[t.rank()] = 1.0f;
    auto r = gather_to_root(e, 0, t);
    std::lock_guard lock(mu);
    if (t.rank() == 0) {
      root_result = r;
    } else {
      EXPECT_FALSE(r.has_value());
    }
  });
  ASSERT_TRUE(root_result);
  EXPECT_EQ(*root_result, (GradVec{1, 1, 1}));
}

TEST(GatherTest, SingleRankIsIdentity) {
  InProcFabric f(1);
  const std::vector<float> v = {3, -1};
  EXPECT_EQ(*gather_to_root(v, 0, f.endpoint(0)), (GradVec{3, -1}));
}

TEST(GatherTest, RandomMatchesDirectSum) {
  const Inputs in = random_inputs(4, 513, 8);
  InProcFabric f(4);
  GradVec got;
  run_ranks(f, [&](Transport& t) {
    auto r = gather_to_root(in[t.rank()], 2, t);
    if (t.rank() == 2) got = *r;
  });
  EXPECT_LE(oracle::max_sum_rel_error(got.values(), oracle::direct_sum(in), oracle::abs_sum(in)),
            1e-6);
}

TEST(BroadcastTest, LargeVectorBitExactFromLastRank) {
  const int p = 8;
  const std::vector<float> value = random_inputs(1, 1 << 20, 4)[0];
  InProcFabric f(p);
  Inputs out(p);
  run_ranks(f, [&](Transport& t) {
    const std::vector<float> junk(t.rank() == p - 1 ? 0 : 3, 9.0f);
    out[t.rank()] =
        broadcast_from_root(t.rank() == p - 1 ? std::span<const float>(value) : junk, p - 1, t)
            .values();
  });
  for (const auto& o : out) EXPECT_TRUE(bit_equal(o, value));
}

TEST(BroadcastTest, TwoRanks) {
  InProcFabric f(2);
  Inputs out(2);
  const std::vector<float> v = {1.5f, -2.0f};
  run_ranks(f, [&](Transport& t) { out[t.rank()] = broadcast_from_root(v, 0, t).values(); });
  EXPECT_EQ(out[1], v);
}

TEST(BarrierTest, SingleRankReturnsImmediately) {
  InProcFabric f(1);
  const auto start = Clock::now();
  barrier(f.endpoint(0));
  EXPECT_LT(Clock::now() - start, 10ms);
}

TEST(BarrierTest, DelayedRankHoldsEveryoneBack) {
  InProcFabric f(4);
  std::vector<Clock::duration> waited(4);
  const auto start = Clock::now();
  run_ranks(f, [&](Transport& t) {
    if (t.rank() == 2) std::this_thread::sleep_for(50ms);
    barrier(t);
    waited[t.rank()] = Clock::now() - start;
  });
  for (const auto& w : waited) EXPECT_GE(w, 50ms);
}

TEST(BarrierTest, RepeatedWithoutDeadlock) {
  InProcFabric f(4);
  f.set_recv_timeout(5s);
  run_ranks(f, [&](Transport& t) {
    for (std::uint32_t i = 0; i < 100; ++i) {
      CollectiveOptions o;
      o.iteration = i;
      barrier(t, o);
    }
  });
  SUCCEED();
}

}  // namespace
