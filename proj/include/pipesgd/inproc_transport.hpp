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

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "pipesgd/transport.hpp"

namespace pipesgd::comm {

class InProcFabric;

class InProcEndpoint final : public Transport {
 public:
  InProcEndpoint(InProcFabric& fabric, int rank) : fabric_(fabric), rank_(rank) {}

  int rank() const override { return rank_; }
  int size() const override;
  void send(int dest, Message msg) override;
  Message recv(int src) override;
  void abort(const std::string& reason) override;

 private:
  InProcFabric& fabric_;
  int rank_;
};

// p endpoints sharing one process. Mailboxes are indexed [dst][src]. With an
// active LinkModel, each endpoint has an egress and an ingress "NIC" whose busy
// intervals serialize transfers; delivery is then delayed by alpha.
class InProcFabric {
 public:
  explicit InProcFabric(int p, LinkModel link = {}) : p_(p), link_(link) {
    if (p < 1) throw ConfigError("fabric needs at least one endpoint");
    mailboxes_.resize(static_cast<std::size_t>(p) * p);
    for (auto& m : mailboxes_) m = std::make_unique<Mailbox>();
    egress_free_.assign(p, Clock::time_point{});
    ingress_free_.assign(p, Clock::time_point{});
    for (int r = 0; r < p; ++r) {
      endpoints_.push_back(std::make_unique<InProcEndpoint>(*this, r));
    }
  }

  InProcFabric(const InProcFabric&) = delete;
  InProcFabric& operator=(const InProcFabric&) = delete;

  int size() const noexcept { return p_; }
  const LinkModel& link() const noexcept { return link_; }

  InProcEndpoint& endpoint(int rank) { return *endpoints_.at(rank); }

  void set_recv_timeout(std::chrono::milliseconds t) {
    for (auto& e : endpoints_) e->set_recv_timeout(t);
  }

  void abort(const std::string& reason) {
    for (auto& m : mailboxes_) m->abort(reason);
  }

 private:
  friend class InProcEndpoint;

  Mailbox& mailbox(int dst, int src) {
    return *mailboxes_[static_cast<std::size_t>(dst) * p_ + src];
  }

  Clock::time_point delivery_time(int src, int dst, std::size_t bytes) {
    const auto now = Clock::now();
    if (!link_.active()) return now;
    std::lock_guard lock(nic_mu_);
    const auto start = std::max({now, egress_free_[src], ingress_free_[dst]});
    const auto done = start + to_duration(static_cast<double>(bytes) * link_.beta);
    egress_free_[src] = done;
    ingress_free_[dst] = done;
    return done + to_duration(link_.alpha);
  }

  int p_;
  LinkModel link_;
  std::vector<std::unique_ptr<Mailbox>> mailboxes_;
  std::vector<std::unique_ptr<InProcEndpoint>> endpoints_;
  std::mutex nic_mu_;
  std::vector<Clock::time_point> egress_free_;
  std::vector<Clock::time_point> ingress_free_;
};

inline int InProcEndpoint::size() const { return fabric_.size(); }

inline void InProcEndpoint::send(int dest, Message msg) {
  check_peer(dest, "send");
  stats().record(msg);
  const auto ready = fabric_.delivery_time(rank_, dest, frame_size(msg));
  fabric_.mailbox(dest, rank_).push(std::move(msg), ready);
}

inline Message InProcEndpoint::recv(int src) {
  check_peer(src, "recv");
  const auto deadline = Clock::now() + recv_timeout();
  try {
    return fabric_.mailbox(rank_, src).pop(deadline);
  } catch (const TimeoutError&) {
    throw TimeoutError("rank " + std::to_string(rank_) +
                       ": receive from rank " + std::to_string(src) +
                       " timed out after " +
                       std::to_string(recv_timeout().count()) + " ms");
  }
}

inline void InProcEndpoint::abort(const std::string& reason) {
  fabric_.abort(reason);
}

}  // namespace pipesgd::comm
