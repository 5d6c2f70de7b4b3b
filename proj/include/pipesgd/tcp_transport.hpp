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

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pipesgd/transport.hpp"

// Full-mesh TCP transport. Frame layout (little-endian):
//
//   u32 frame_length | u8 msg_type | u32 iteration | u16 block_index | payload
//
// frame_length counts the bytes after the length field itself. Rank r listens
// on roster[r]; at startup every rank connects to all lower ranks and accepts
// from all higher ranks, each connection opening with a u32 hello carrying the
// connecting rank.
namespace pipesgd::comm {

struct PeerAddress {
  std::string host;
  std::uint16_t port = 0;
};

inline PeerAddress parse_peer(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError("roster entry '" + text + "' is not host:port");
  }
  PeerAddress a;
  a.host = text.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("roster entry '" + text + "' has a bad port");
  }
  if (port <= 0 || port > 65535) {
    throw ConfigError("roster entry '" + text + "' port out of range");
  }
  a.port = static_cast<std::uint16_t>(port);
  return a;
}

// One host:port per line; blank lines and '#' comments ignored.
inline std::vector<PeerAddress> parse_roster(std::istream& in) {
  std::vector<PeerAddress> roster;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    roster.push_back(parse_peer(line.substr(b, e - b + 1)));
  }
  return roster;
}

inline std::vector<PeerAddress> load_roster(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open roster file '" + path + "'");
  return parse_roster(in);
}

inline std::vector<std::byte> encode_frame(const Message& m) {
  std::vector<std::byte> out;
  out.reserve(frame_size(m));
  pipesgd::detail::put_le<std::uint32_t>(
      out, static_cast<std::uint32_t>(kFrameHeaderBytes - 4 + m.payload.size()));
  out.push_back(static_cast<std::byte>(m.type));
  pipesgd::detail::put_le<std::uint32_t>(out, m.iteration);
  pipesgd::detail::put_le<std::uint16_t>(out, m.block_index);
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

// Decodes the bytes following the length field.
inline Message decode_frame_body(std::span<const std::byte> body) {
  if (body.size() < kFrameHeaderBytes - 4) {
    throw CorruptionError("frame shorter than its header");
  }
  const auto type = static_cast<std::uint8_t>(body[0]);
  if (type > 2) throw CorruptionError("unknown frame type " + std::to_string(type));
  Message m;
  m.type = static_cast<MsgType>(type);
  m.iteration = pipesgd::detail::get_le<std::uint32_t>(body, 1);
  m.block_index = pipesgd::detail::get_le<std::uint16_t>(body, 5);
  m.payload.assign(body.begin() + 7, body.end());
  return m;
}

namespace detail {

inline void write_all(int fd, const std::byte* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("socket write failed: ") +
                           std::strerror(errno));
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

// False on orderly EOF before any byte was read.
inline bool read_all(int fd, std::byte* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, data + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("socket read failed: ") +
                           std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

inline sockaddr_in resolve(const PeerAddress& addr) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(addr.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    throw TransportError("cannot resolve host '" + addr.host + "'");
  }
  sockaddr_in sa = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  sa.sin_port = htons(addr.port);
  return sa;
}

}  // namespace detail

class TcpTransport final : public Transport {
 public:
  struct Options {
    LinkModel link;
    std::chrono::milliseconds connect_timeout{30000};
  };

  TcpTransport(int rank, std::vector<PeerAddress> roster, Options opts)
      : rank_(rank), roster_(std::move(roster)), opts_(opts) {
    const int p = static_cast<int>(roster_.size());
    if (rank < 0 || rank >= p) {
      throw ConfigError("rank " + std::to_string(rank) + " outside roster of " +
                        std::to_string(p));
    }
    peers_.resize(p);
    for (int j = 0; j < p; ++j) {
      if (j != rank_) peers_[j] = std::make_unique<Peer>();
    }
    try {
      connect_mesh();
    } catch (...) {
      for (auto& peer : peers_) {
        if (peer && peer->fd >= 0) ::close(peer->fd);
      }
      throw;
    }
    for (int j = 0; j < p; ++j) {
      if (j == rank_) continue;
      peers_[j]->reader = std::thread([this, j] { reader_loop(j); });
      peers_[j]->writer = std::thread([this, j] { writer_loop(j); });
    }
  }

  TcpTransport(int rank, std::vector<PeerAddress> roster)
      : TcpTransport(rank, std::move(roster), Options{}) {}

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  ~TcpTransport() override {
    for (auto& peer : peers_) {
      if (!peer) continue;
      {
        std::lock_guard lock(peer->mu);
        peer->closing = true;
      }
      peer->cv.notify_all();
    }
    for (auto& peer : peers_) {
      if (peer && peer->writer.joinable()) peer->writer.join();
    }
    // Half-close, then give peers a bounded window to finish reading.
    for (auto& peer : peers_) {
      if (peer && peer->fd >= 0) ::shutdown(peer->fd, SHUT_WR);
    }
    const auto deadline = Clock::now() + std::chrono::seconds(5);
    for (auto& peer : peers_) {
      if (!peer) continue;
      std::unique_lock lock(peer->mu);
      peer->cv.wait_until(lock, deadline, [&] { return peer->reader_done; });
    }
    for (auto& peer : peers_) {
      if (!peer) continue;
      if (peer->fd >= 0) ::shutdown(peer->fd, SHUT_RDWR);
      if (peer->reader.joinable()) peer->reader.join();
      if (peer->fd >= 0) ::close(peer->fd);
    }
  }

  int rank() const override { return rank_; }
  int size() const override { return static_cast<int>(roster_.size()); }

  void send(int dest, Message msg) override {
    check_peer(dest, "send");
    stats().record(msg);
    Peer& peer = *peers_[dest];
    {
      std::lock_guard lock(peer.mu);
      if (!peer.error.empty()) throw TransportError(peer.error);
      peer.outq.push_back(encode_frame(msg));
    }
    peer.cv.notify_all();
  }

  Message recv(int src) override {
    check_peer(src, "recv");
    const auto deadline = Clock::now() + recv_timeout();
    try {
      return peers_[src]->inbox.pop(deadline);
    } catch (const TimeoutError&) {
      throw TimeoutError("rank " + std::to_string(rank_) +
                         ": receive from rank " + std::to_string(src) +
                         " timed out");
    }
  }

  void abort(const std::string& reason) override {
    for (auto& peer : peers_) {
      if (peer) peer->inbox.abort(reason);
    }
  }

 private:
  struct Peer {
    int fd = -1;
    std::thread reader;
    std::thread writer;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::vector<std::byte>> outq;
    bool closing = false;
    bool reader_done = false;
    std::string error;
    Mailbox inbox;
    Clock::time_point link_free{};
  };

  void connect_mesh() {
    const int p = size();
    const auto deadline = Clock::now() + opts_.connect_timeout;

    int listener = -1;
    if (rank_ < p - 1) {
      listener = ::socket(AF_INET, SOCK_STREAM, 0);
      if (listener < 0) throw TransportError("cannot create listen socket");
      const int one = 1;
      ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
      sockaddr_in sa{};
      sa.sin_family = AF_INET;
      sa.sin_addr.s_addr = htonl(INADDR_ANY);
      sa.sin_port = htons(roster_[rank_].port);
      if (::bind(listener, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0 ||
          ::listen(listener, p) < 0) {
        const std::string err = std::strerror(errno);
        ::close(listener);
        throw TransportError("rank " + std::to_string(rank_) +
                             " cannot listen on port " +
                             std::to_string(roster_[rank_].port) + ": " + err);
      }
    }

    try {
      for (int j = 0; j < rank_; ++j) {
        peers_[j]->fd = connect_to(roster_[j], deadline);
        const auto hello = static_cast<std::uint32_t>(rank_);
        detail::write_all(peers_[j]->fd,
                          reinterpret_cast<const std::byte*>(&hello), 4);
      }
      int pending = p - 1 - rank_;
      while (pending > 0) {
        const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - Clock::now());
        if (remaining.count() <= 0) {
          throw TransportError("rank " + std::to_string(rank_) +
                               " timed out waiting for peers to connect");
        }
        pollfd pfd{listener, POLLIN, 0};
        if (::poll(&pfd, 1, static_cast<int>(remaining.count())) <= 0) continue;
        const int fd = ::accept(listener, nullptr, nullptr);
        if (fd < 0) continue;
        std::uint32_t who = 0;
        if (!detail::read_all(fd, reinterpret_cast<std::byte*>(&who), 4) ||
            who <= static_cast<std::uint32_t>(rank_) ||
            who >= static_cast<std::uint32_t>(p) || peers_[who]->fd >= 0) {
          ::close(fd);
          throw TransportError("unexpected hello on rank " +
                               std::to_string(rank_));
        }
        set_nodelay(fd);
        peers_[who]->fd = fd;
        --pending;
      }
    } catch (...) {
      if (listener >= 0) ::close(listener);
      throw;
    }
    if (listener >= 0) ::close(listener);
  }

  static void set_nodelay(int fd) {
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  int connect_to(const PeerAddress& addr, Clock::time_point deadline) {
    const sockaddr_in sa = detail::resolve(addr);
    for (;;) {
      const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw TransportError("cannot create socket");
      if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa)) == 0) {
        set_nodelay(fd);
        return fd;
      }
      ::close(fd);
      if (Clock::now() >= deadline) {
        throw TransportError("rank " + std::to_string(rank_) +
                             " cannot connect to " + addr.host + ":" +
                             std::to_string(addr.port));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  void fail_peer(int j, const std::string& what) {
    Peer& peer = *peers_[j];
    {
      std::lock_guard lock(peer.mu);
      if (peer.error.empty()) peer.error = what;
    }
    peer.inbox.abort(what);
  }

  void reader_loop(int j) {
    Peer& peer = *peers_[j];
    try {
      std::vector<std::byte> body;
      for (;;) {
        std::uint32_t len = 0;
        if (!detail::read_all(peer.fd, reinterpret_cast<std::byte*>(&len), 4)) {
          break;
        }
        body.resize(len);
        if (len > 0 && !detail::read_all(peer.fd, body.data(), len)) {
          throw TransportError("connection closed mid-frame");
        }
        Message m = decode_frame_body(body);
        auto ready = Clock::now();
        if (opts_.link.active()) {
          const auto start = std::max(ready, peer.link_free);
          peer.link_free =
              start + to_duration((len + 4.0) * opts_.link.beta);
          ready = peer.link_free + to_duration(opts_.link.alpha);
        }
        peer.inbox.push(std::move(m), ready);
      }
      bool closing;
      {
        std::lock_guard lock(peer.mu);
        closing = peer.closing;
      }
      if (!closing) {
        peer.inbox.close("rank " + std::to_string(j) + " closed the connection");
      }
    } catch (const std::exception& e) {
      fail_peer(j, "link to rank " + std::to_string(j) + ": " + e.what());
    }
    {
      std::lock_guard lock(peer.mu);
      peer.reader_done = true;
    }
    peer.cv.notify_all();
  }

  void writer_loop(int j) {
    Peer& peer = *peers_[j];
    for (;;) {
      std::vector<std::byte> frame;
      {
        std::unique_lock lock(peer.mu);
        peer.cv.wait(lock, [&] { return peer.closing || !peer.outq.empty(); });
        if (peer.outq.empty()) return;
        frame = std::move(peer.outq.front());
        peer.outq.pop_front();
      }
      try {
        detail::write_all(peer.fd, frame.data(), frame.size());
      } catch (const std::exception& e) {
        fail_peer(j, "link to rank " + std::to_string(j) + ": " + e.what());
        return;
      }
    }
  }

  int rank_;
  std::vector<PeerAddress> roster_;
  Options opts_;
  std::vector<std::unique_ptr<Peer>> peers_;
};

}  // namespace pipesgd::comm
