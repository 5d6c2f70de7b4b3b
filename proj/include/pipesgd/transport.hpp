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

#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <vector>

#include "pipesgd/common.hpp"

namespace pipesgd::comm {

using Clock = std::chrono::steady_clock;

enum class MsgType : std::uint8_t { data = 0, barrier = 1, control = 2 };

struct Message {
  MsgType type = MsgType::data;
  std::uint32_t iteration = 0;
  std::uint16_t block_index = 0;
  std::vector<std::byte> payload;
};

// u32 frame_length | u8 msg_type | u32 iteration | u16 block_index
inline constexpr std::size_t kFrameHeaderBytes = 4 + 1 + 4 + 2;

inline std::size_t frame_size(const Message& m) {
  return kFrameHeaderBytes + m.payload.size();
}

// Alpha-beta link cost: each message is delayed by `alpha` seconds of latency
// plus `beta` seconds per frame byte of serialization. Serialization occupies
// the sender's egress and the receiver's ingress, so concurrent transfers into
// one endpoint queue behind each other.
struct LinkModel {
  double alpha = 0.0;  // s / message
  double beta = 0.0;   // s / byte

  bool active() const noexcept { return alpha > 0.0 || beta > 0.0; }

  static LinkModel from_ms_mbps(double alpha_ms, double mbps) {
    if (alpha_ms < 0.0 || mbps < 0.0) {
      throw ConfigError("injected latency and bandwidth must be >= 0");
    }
    LinkModel m;
    m.alpha = alpha_ms * 1e-3;
    m.beta = mbps > 0.0 ? 8.0 / (mbps * 1e6) : 0.0;
    return m;
  }
};

inline Clock::duration to_duration(double seconds) {
  return std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(seconds));
}

struct StatsSnapshot {
  std::array<std::uint64_t, 3> messages{};       // per MsgType
  std::array<std::uint64_t, 3> payload_bytes{};  // per MsgType
  std::uint64_t frame_bytes = 0;                 // headers + payloads, all types
};

// Per-endpoint send-side counters.
class TransportStats {
 public:
  void record(const Message& m) {
    const auto t = static_cast<std::size_t>(m.type);
    messages_[t].fetch_add(1, std::memory_order_relaxed);
    payload_bytes_[t].fetch_add(m.payload.size(), std::memory_order_relaxed);
    frame_bytes_.fetch_add(frame_size(m), std::memory_order_relaxed);
  }

  StatsSnapshot snapshot() const {
    StatsSnapshot s;
    for (std::size_t i = 0; i < 3; ++i) {
      s.messages[i] = messages_[i].load(std::memory_order_relaxed);
      s.payload_bytes[i] = payload_bytes_[i].load(std::memory_order_relaxed);
    }
    s.frame_bytes = frame_bytes_.load(std::memory_order_relaxed);
    return s;
  }

  void reset() {
    for (std::size_t i = 0; i < 3; ++i) {
      messages_[i].store(0);
      payload_bytes_[i].store(0);
    }
    frame_bytes_.store(0);
  }

 private:
  std::array<std::atomic<std::uint64_t>, 3> messages_{};
  std::array<std::atomic<std::uint64_t>, 3> payload_bytes_{};
  std::atomic<std::uint64_t> frame_bytes_{0};
};

inline constexpr std::chrono::milliseconds kDefaultRecvTimeout{30000};

// FIFO of messages from one peer. A message becomes visible at its ready_at
// instant; pop() blocks until the head is visible, the deadline passes, or the
// mailbox is aborted.
class Mailbox {
 public:
  void push(Message m, Clock::time_point ready_at) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back({ready_at, std::move(m)});
    }
    cv_.notify_all();
  }

  Message pop(Clock::time_point deadline) {
    std::unique_lock lock(mu_);
    for (;;) {
      if (!abort_reason_.empty()) throw TransportError(abort_reason_);
      const auto now = Clock::now();
      if (!queue_.empty() && now >= queue_.front().ready_at) {
        Message m = std::move(queue_.front().msg);
        queue_.pop_front();
        return m;
      }
      if (queue_.empty() && !close_reason_.empty()) {
        throw TransportError(close_reason_);
      }
      if (now >= deadline) throw TimeoutError("receive timed out");
      const auto wake =
          queue_.empty() ? deadline : std::min(queue_.front().ready_at, deadline);
      cv_.wait_until(lock, wake);
    }
  }

  // Sender is gone: queued messages stay readable, then pop() fails.
  void close(const std::string& reason) {
    {
      std::lock_guard lock(mu_);
      if (close_reason_.empty()) close_reason_ = reason;
    }
    cv_.notify_all();
  }

  void abort(const std::string& reason) {
    {
      std::lock_guard lock(mu_);
      if (abort_reason_.empty()) {
        abort_reason_ = reason.empty() ? "transport aborted" : reason;
      }
    }
    cv_.notify_all();
  }

 private:
  struct Entry {
    Clock::time_point ready_at;
    Message msg;
  };
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Entry> queue_;
  std::string abort_reason_;
  std::string close_reason_;
};

// One worker's view of the cluster. Messages between a fixed (src, dst) pair
// arrive in order, exactly once. send() never blocks on the receiver.
// send/recv may be used from two threads only on disjoint peers.
class Transport {
 public:
  virtual ~Transport() = default;

  virtual int rank() const = 0;
  virtual int size() const = 0;
  virtual void send(int dest, Message msg) = 0;
  virtual Message recv(int src) = 0;
  // Fails every pending and future recv on this endpoint and its peers
  // (where the implementation can reach them).
  virtual void abort(const std::string& reason) = 0;

  TransportStats& stats() noexcept { return stats_; }
  const TransportStats& stats() const noexcept { return stats_; }

  std::chrono::milliseconds recv_timeout() const noexcept { return timeout_; }
  void set_recv_timeout(std::chrono::milliseconds t) noexcept { timeout_ = t; }

 protected:
  void check_peer(int peer, const char* what) const {
    if (peer < 0 || peer >= size() || peer == rank()) {
      throw TransportError(std::string(what) + ": invalid peer rank " +
                           std::to_string(peer) + " (rank " +
                           std::to_string(rank()) + " of " +
                           std::to_string(size()) + ")");
    }
  }

 private:
  TransportStats stats_;
  std::chrono::milliseconds timeout_ = kDefaultRecvTimeout;
};

}  // namespace pipesgd::comm
