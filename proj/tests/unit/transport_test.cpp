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
#include <memory>
#include <sstream>
#include <thread>

#include "pipesgd/collective.hpp"
#include "pipesgd/inproc_transport.hpp"
#include "pipesgd/tcp_transport.hpp"
#include "support/ranks.hpp"

namespace {

using namespace pipesgd;
using namespace pipesgd::comm;
using namespace std::chrono_literals;

Message data_msg(std::uint32_t it, std::uint16_t block, std::size_t bytes, std::uint8_t fill) {
  Message m;
  m.iteration = it;
  m.block_index = block;
  m.payload.assign(bytes, std::byte{fill});
  return m;
}

TEST(InProcTest, FifoExactlyOncePerPair) {
  InProcFabric f(3);
  for (std::uint32_t i = 0; i < 100; ++i) {
    f.endpoint(0).send(2, data_msg(i, 0, 4, 1));
    f.endpoint(1).send(2, data_msg(1000 + i, 0, 4, 2));
  }
  for (std::uint32_t i = 0; i < 100; ++i) {
    EXPECT_EQ(f.endpoint(2).recv(1).iteration, 1000 + i);
    EXPECT_EQ(f.endpoint(2).recv(0).iteration, i);
  }
  f.set_recv_timeout(20ms);
  EXPECT_THROW(f.endpoint(2).recv(0), TimeoutError);
}

TEST(InProcTest, InvalidPeer) {
  InProcFabric f(2);
  EXPECT_THROW(f.endpoint(0).send(0, Message{}), TransportError);
  EXPECT_THROW(f.endpoint(0).recv(2), TransportError);
}

TEST(InProcTest, StatsCountPerType) {
  InProcFabric f(2);
  f.endpoint(0).send(1, data_msg(0, 0, 100, 0));
  Message b;
  b.type = MsgType::barrier;
  f.endpoint(0).send(1, b);
  const auto s = f.endpoint(0).stats().snapshot();
  EXPECT_EQ(s.messages[0], 1u);
  EXPECT_EQ(s.messages[1], 1u);
  EXPECT_EQ(s.payload_bytes[0], 100u);
  EXPECT_EQ(s.frame_bytes, 100 + 2 * kFrameHeaderBytes);
}

TEST(InProcTest, AbortWakesBlockedReceiver) {
  InProcFabric f(2);
  std::thread t([&] {
    std::this_thread::sleep_for(30ms);
    f.abort("stop");
  });
  EXPECT_THROW(f.endpoint(1).recv(0), TransportError);
  t.join();
}

TEST(LinkModelTest, FromMsMbps) {
  const auto m = LinkModel::from_ms_mbps(1.5, 80.0);
  EXPECT_DOUBLE_EQ(m.alpha, 1.5e-3);
  EXPECT_DOUBLE_EQ(m.beta, 1e-7);
  EXPECT_FALSE(LinkModel::from_ms_mbps(0, 0).active());
  EXPECT_THROW(LinkModel::from_ms_mbps(-1, 0), ConfigError);
}

TEST(LinkModelTest, LatencyDelaysDelivery) {
  InProcFabric f(2, LinkModel::from_ms_mbps(20.0, 0.0));
  const auto start = Clock::now();
  f.endpoint(0).send(1, Message{});
  f.endpoint(1).recv(0);
  EXPECT_GE(Clock::now() - start, 20ms);
}

TEST(LinkModelTest, IngressSerializesConcurrentSenders) {
  // 8 Mbit/s: each 10 kB frame takes ~10 ms on the wire; two senders into one
  // receiver must queue.
  InProcFabric f(3, LinkModel::from_ms_mbps(0.0, 8.0));
  const auto start = Clock::now();
  f.endpoint(0).send(2, data_msg(0, 0, 10000, 0));
  f.endpoint(1).send(2, data_msg(0, 0, 10000, 0));
  f.endpoint(2).recv(0);
  f.endpoint(2).recv(1);
  EXPECT_GE(Clock::now() - start, 20ms);
}

TEST(FrameTest, EncodeDecode) {
  Message m = data_msg(77, 3, 5, 9);
  m.type = MsgType::control;
  const auto bytes = encode_frame(m);
  ASSERT_EQ(bytes.size(), kFrameHeaderBytes + 5);
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[0]), kFrameHeaderBytes - 4 + 5);
  const Message back = decode_frame_body(std::span(bytes).subspan(4));
  EXPECT_EQ(back.type, MsgType::control);
  EXPECT_EQ(back.iteration, 77u);
  EXPECT_EQ(back.block_index, 3);
  EXPECT_EQ(back.payload, m.payload);
  auto bad = bytes;
  bad[4] = std::byte{9};
  EXPECT_THROW(decode_frame_body(std::span(bad).subspan(4)), CorruptionError);
}

TEST(RosterTest, Parse) {
  std::istringstream in("# cluster\n127.0.0.1:5000\n\n  localhost:5001  # two\n");
  const auto r = parse_roster(in);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].host, "127.0.0.1");
  EXPECT_EQ(r[1].port, 5001);
  EXPECT_THROW(parse_peer("nohost"), ConfigError);
  EXPECT_THROW(parse_peer("h:70000"), ConfigError);
  EXPECT_THROW(parse_peer("h:x"), ConfigError);
  EXPECT_THROW(load_roster("/nonexistent/roster"), ConfigError);
}

std::vector<PeerAddress> loopback_roster(int p) {
  std::vector<PeerAddress> roster;
  for (int port : testing_support::free_ports(p)) {
    roster.push_back({"127.0.0.1", static_cast<std::uint16_t>(port)});
  }
  return roster;
}

TEST(TcpTest, MeshDeliversInOrderAndRunsCollectives) {
  const int p = 3;
  const auto roster = loopback_roster(p);
  std::vector<std::unique_ptr<TcpTransport>> ts(p);
  std::vector<std::thread> threads;
  for (int r = 0; r < p; ++r) {
    threads.emplace_back([&, r] { ts[r] = std::make_unique<TcpTransport>(r, roster); });
  }
  for (auto& t : threads) t.join();
  threads.clear();

  for (int r = 0; r < p; ++r) {
    threads.emplace_back([&, r] {
      auto& t = *ts[r];
      t.set_recv_timeout(10s);
      for (int j = 0; j < p; ++j) {
        if (j == r) continue;
        for (std::uint32_t i = 0; i < 50; ++i) {
          t.send(j, data_msg(i, static_cast<std::uint16_t>(r), 1000 + i, static_cast<std::uint8_t>(i)));
        }
      }
      for (int j = 0; j < p; ++j) {
        if (j == r) continue;
        for (std::uint32_t i = 0; i < 50; ++i) {
          const Message m = t.recv(j);
          ASSERT_EQ(m.iteration, i);
          ASSERT_EQ(m.block_index, j);
          ASSERT_EQ(m.payload.size(), 1000 + i);
          ASSERT_EQ(m.payload.back(), std::byte{static_cast<std::uint8_t>(i)});
        }
      }
      std::vector<float> local(1001, static_cast<float>(r + 1));
      const GradVec sum = ring_allreduce(local, t, codec::CodecId::none, {});
      for (float v : sum) ASSERT_EQ(v, 6.0f);
      barrier(t);
    });
  }
  for (auto& t : threads) t.join();
  ts.clear();
}

TEST(TcpTest, PeerLossSurfacesAsTransportError) {
  const auto roster = loopback_roster(2);
  std::unique_ptr<TcpTransport> a, b;
  std::thread ta([&] { a = std::make_unique<TcpTransport>(0, roster); });
  std::thread tb([&] { b = std::make_unique<TcpTransport>(1, roster); });
  ta.join();
  tb.join();
  a->set_recv_timeout(10s);
  b.reset();
  EXPECT_THROW(a->recv(1), TransportError);
}

TEST(TcpTest, UnreachablePeerTimesOut) {
  auto roster = loopback_roster(2);
  TcpTransport::Options o;
  o.connect_timeout = 300ms;
  // Rank 1 connects to rank 0, which never starts.
  EXPECT_THROW(TcpTransport(1, roster, o), TransportError);
  EXPECT_THROW(TcpTransport(2, roster, o), ConfigError);
}

}  // namespace
