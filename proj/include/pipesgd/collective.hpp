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

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipesgd/compression.hpp"
#include "pipesgd/transport.hpp"

namespace pipesgd::comm {

using codec::CodecId;
using codec::CompressedBlock;

struct BlockRange {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// `parts` contiguous blocks covering [0, n); the first n % parts blocks are one
// element longer than the rest.
class BlockPartition {
 public:
  BlockPartition(std::size_t n, int parts) : n_(n), parts_(parts) {
    if (parts < 1) throw ConfigError("partition needs at least one block");
  }

  int parts() const noexcept { return parts_; }
  std::size_t total() const noexcept { return n_; }

  BlockRange operator[](int i) const {
    const auto p = static_cast<std::size_t>(parts_);
    const auto idx = static_cast<std::size_t>(i);
    const std::size_t base = n_ / p;
    const std::size_t rem = n_ % p;
    return {idx * base + std::min(idx, rem), base + (idx < rem ? 1 : 0)};
  }

 private:
  std::size_t n_;
  int parts_;
};

struct RingTopology {
  int p = 1;
  int successor(int rank) const noexcept { return (rank + 1) % p; }
  int predecessor(int rank) const noexcept { return (rank + p - 1) % p; }
};

struct CollectiveOptions {
  std::uint32_t iteration = 0;       // stamped on every message and checked
  std::size_t chunk_elems = 4096;    // pipelined variant: elements per chunk
};

// Reduced gradient as an ordered list of compressed pieces; decoding each and
// concatenating yields the full vector.
using AggregatedGradient = std::vector<CompressedBlock>;

inline std::vector<CompressedBlock> compress_blocks(
    std::span<const float> values, const BlockPartition& part, CodecId codec) {
  if (values.size() != part.total()) {
    throw ConfigError("compress_blocks: vector/partition size mismatch");
  }
  std::vector<CompressedBlock> out;
  out.reserve(part.parts());
  for (int b = 0; b < part.parts(); ++b) {
    const BlockRange r = part[b];
    out.push_back(codec::compress(values.subspan(r.offset, r.length), codec));
  }
  return out;
}

inline GradVec decompress_blocks(std::span<const CompressedBlock> blocks) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.n_elems;
  GradVec out(n);
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    codec::decompress_into(b, out.span().subspan(offset, b.n_elems));
    offset += b.n_elems;
  }
  return out;
}

namespace detail {

inline int wrap(int v, int p) { return ((v % p) + p) % p; }

inline std::string where(const char* op, int rank, const std::string& step) {
  return std::string(op) + " on rank " + std::to_string(rank) + ", " + step;
}

inline void send_block(Transport& t, int dest, const CompressedBlock& block,
                       int block_index, const CollectiveOptions& opts) {
  Message m;
  m.type = MsgType::data;
  m.iteration = opts.iteration;
  m.block_index = static_cast<std::uint16_t>(block_index);
  m.payload = codec::serialize(block);
  t.send(dest, std::move(m));
}

inline CompressedBlock recv_block(Transport& t, int src, int block_index,
                                  std::size_t expected_len, CodecId codec,
                                  const CollectiveOptions& opts) {
  Message m = t.recv(src);
  if (m.type != MsgType::data) {
    throw CollectiveError("expected a data message from rank " +
                          std::to_string(src) + ", got type " +
                          std::to_string(static_cast<int>(m.type)));
  }
  if (m.iteration != opts.iteration) {
    throw CollectiveError("iteration mismatch from rank " + std::to_string(src) +
                          ": got " + std::to_string(m.iteration) + ", expected " +
                          std::to_string(opts.iteration));
  }
  if (m.block_index != static_cast<std::uint16_t>(block_index)) {
    throw CollectiveError("block mismatch from rank " + std::to_string(src) +
                          ": got " + std::to_string(m.block_index) +
                          ", expected " + std::to_string(block_index) +
                          " (participant count or schedule differs)");
  }
  CompressedBlock block = codec::deserialize(m.payload);
  if (block.codec != codec) {
    throw CollectiveError("codec mismatch from rank " + std::to_string(src));
  }
  if (block.n_elems != expected_len) {
    throw CollectiveError("length mismatch from rank " + std::to_string(src) +
                          ": block " + std::to_string(block_index) + " has " +
                          std::to_string(block.n_elems) + " elements, expected " +
                          std::to_string(expected_len));
  }
  return block;
}

// received + local, elementwise, in full precision.
inline std::vector<float> reduce_block(const CompressedBlock& received,
                                       std::span<const float> local) {
  std::vector<float> sum(received.n_elems);
  codec::decompress_into(received, sum);
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += local[i];
  return sum;
}

inline BlockPartition check_local_blocks(std::span<const CompressedBlock> local,
                                         int p, CodecId codec) {
  if (static_cast<int>(local.size()) != p) {
    throw CollectiveError("expected " + std::to_string(p) +
                          " local blocks, got " + std::to_string(local.size()));
  }
  std::size_t n = 0;
  for (const auto& b : local) {
    if (b.codec != codec) throw CollectiveError("local block codec mismatch");
    n += b.n_elems;
  }
  BlockPartition part(n, p);
  for (int b = 0; b < p; ++b) {
    if (local[b].n_elems != part[b].length) {
      throw CollectiveError("local blocks do not follow the ring partition");
    }
  }
  return part;
}

template <typename Fn>
auto guarded(const char* op, int rank, const std::string& step, Fn&& fn) {
  try {
    return fn();
  } catch (const CollectiveError& e) {
    throw CollectiveError(where(op, rank, step) + ": " + e.what());
  } catch (const TransportError& e) {
    throw CollectiveError(where(op, rank, step) + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CollectiveError(where(op, rank, step) + ": " + e.what());
  }
}

}  // namespace detail

// Ring-AllReduce over pre-compressed local blocks (one per rank, following
// BlockPartition(n, p)). p-1 reduce-scatter steps then p-1 allgather steps, one
// block message per step. Each reduce hop decodes the incoming partial sum,
// adds the local block and re-encodes; allgather forwards the owner's encoded
// block verbatim, so every rank returns identical bytes.
inline AggregatedGradient ring_allreduce_blocks(
    std::span<const CompressedBlock> local, Transport& t, CodecId codec,
    const CollectiveOptions& opts = {}) {
  const int p = t.size();
  const int r = t.rank();
  const BlockPartition part = detail::check_local_blocks(local, p, codec);
  if (p == 1) return {local.begin(), local.end()};
  const RingTopology ring{p};
  const int succ = ring.successor(r);
  const int pred = ring.predecessor(r);

  std::vector<CompressedBlock> result(p);
  std::vector<float> local_values;
  std::vector<float> partial;

  CompressedBlock outgoing = local[r];
  int send_idx = r;
  for (int s = 0; s + 1 < p; ++s) {
    const int recv_idx = detail::wrap(r - s - 1, p);
    detail::guarded("ring_allreduce", r,
                    "reduce-scatter step " + std::to_string(s), [&] {
      detail::send_block(t, succ, outgoing, send_idx, opts);
      CompressedBlock in = detail::recv_block(t, pred, recv_idx,
                                              part[recv_idx].length, codec, opts);
      local_values.resize(local[recv_idx].n_elems);
      codec::decompress_into(local[recv_idx], local_values);
      partial = detail::reduce_block(in, local_values);
      return 0;
    });
    outgoing = codec::compress(partial, codec);
    send_idx = recv_idx;
  }
  const int owned = detail::wrap(r + 1, p);
  result[owned] = std::move(outgoing);

  int fwd_idx = owned;
  for (int s = 0; s + 1 < p; ++s) {
    const int recv_idx = detail::wrap(r - s, p);
    detail::guarded("ring_allreduce", r, "allgather step " + std::to_string(s),
                    [&] {
      detail::send_block(t, succ, result[fwd_idx], fwd_idx, opts);
      result[recv_idx] = detail::recv_block(t, pred, recv_idx,
                                            part[recv_idx].length, codec, opts);
      return 0;
    });
    fwd_idx = recv_idx;
  }
  return result;
}

inline GradVec ring_allreduce(std::span<const float> local, Transport& t,
                              CodecId codec, const CollectiveOptions& opts = {}) {
  const BlockPartition part(local.size(), t.size());
  const auto blocks = compress_blocks(local, part, codec);
  return decompress_blocks(ring_allreduce_blocks(blocks, t, codec, opts));
}

// Ring-AllReduce with each block streamed as chunks: a rank decodes, reduces,
// re-encodes and forwards chunk j while chunk j+1 is still in flight, so the
// per-hop reduction hides behind transfer. Same result contract as
// ring_allreduce; elementwise codecs give bit-identical output.
inline AggregatedGradient pipelined_allreduce_blocks(
    std::span<const CompressedBlock> local, Transport& t, CodecId codec,
    const CollectiveOptions& opts = {}) {
  const int p = t.size();
  const int r = t.rank();
  const BlockPartition part = detail::check_local_blocks(local, p, codec);
  if (p == 1) return {local.begin(), local.end()};
  if (opts.chunk_elems == 0) throw ConfigError("chunk_elems must be positive");
  const RingTopology ring{p};
  const int succ = ring.successor(r);
  const int pred = ring.predecessor(r);

  const auto chunks_of = [&](int b) {
    const std::size_t len = part[b].length;
    const std::size_t count =
        len == 0 ? 1 : (len + opts.chunk_elems - 1) / opts.chunk_elems;
    std::vector<BlockRange> out;
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t off = c * opts.chunk_elems;
      out.push_back({off, std::min(opts.chunk_elems, len - std::min(off, len))});
    }
    return out;
  };

  std::vector<std::vector<CompressedBlock>> result(p);
  std::vector<float> local_values;

  detail::guarded("pipelined_allreduce", r, "reduce-scatter step 0 send", [&] {
    local_values.resize(local[r].n_elems);
    codec::decompress_into(local[r], local_values);
    for (const BlockRange& c : chunks_of(r)) {
      const auto piece = std::span<const float>(local_values).subspan(c.offset, c.length);
      detail::send_block(t, succ, codec::compress(piece, codec), r, opts);
    }
    return 0;
  });

  const int owned = detail::wrap(r + 1, p);
  for (int s = 0; s + 1 < p; ++s) {
    const int idx = detail::wrap(r - s - 1, p);
    const bool last = s + 2 == p;
    detail::guarded("pipelined_allreduce", r,
                    "reduce-scatter step " + std::to_string(s), [&] {
      local_values.resize(local[idx].n_elems);
      codec::decompress_into(local[idx], local_values);
      for (const BlockRange& c : chunks_of(idx)) {
        CompressedBlock in =
            detail::recv_block(t, pred, idx, c.length, codec, opts);
        const auto sum = detail::reduce_block(
            in, std::span<const float>(local_values).subspan(c.offset, c.length));
        CompressedBlock out = codec::compress(sum, codec);
        if (last) {
          result[owned].push_back(std::move(out));
        } else {
          detail::send_block(t, succ, out, idx, opts);
        }
      }
      return 0;
    });
  }

  detail::guarded("pipelined_allreduce", r, "allgather step 0 send", [&] {
    for (const auto& c : result[owned]) detail::send_block(t, succ, c, owned, opts);
    return 0;
  });
  for (int s = 0; s + 1 < p; ++s) {
    const int idx = detail::wrap(r - s, p);
    const bool last = s + 2 == p;
    detail::guarded("pipelined_allreduce", r,
                    "allgather step " + std::to_string(s), [&] {
      for (const BlockRange& c : chunks_of(idx)) {
        CompressedBlock in =
            detail::recv_block(t, pred, idx, c.length, codec, opts);
        if (!last) detail::send_block(t, succ, in, idx, opts);
        result[idx].push_back(std::move(in));
      }
      return 0;
    });
  }

  AggregatedGradient flat;
  for (auto& blocks : result) {
    for (auto& b : blocks) flat.push_back(std::move(b));
  }
  return flat;
}

inline GradVec pipelined_allreduce(std::span<const float> local, Transport& t,
                                   CodecId codec,
                                   const CollectiveOptions& opts = {}) {
  const BlockPartition part(local.size(), t.size());
  const auto blocks = compress_blocks(local, part, codec);
  return decompress_blocks(pipelined_allreduce_blocks(blocks, t, codec, opts));
}

// Star reduction onto `root`, summed in rank order. Non-roots get nullopt.
inline std::optional<GradVec> gather_to_root(std::span<const float> local,
                                             int root, Transport& t,
                                             const CollectiveOptions& opts = {}) {
  const int p = t.size();
  const int r = t.rank();
  if (root < 0 || root >= p) throw ConfigError("gather root out of range");
  if (p == 1) return GradVec(std::vector<float>(local.begin(), local.end()));
  if (r != root) {
    detail::guarded("gather_to_root", r, "send to root", [&] {
      detail::send_block(t, root, codec::compress(local, CodecId::none), r, opts);
      return 0;
    });
    return std::nullopt;
  }
  GradVec sum(local.size(), 0.0f);
  for (int q = 0; q < p; ++q) {
    if (q == root) {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += local[i];
      continue;
    }
    detail::guarded("gather_to_root", r, "receive from rank " + std::to_string(q),
                    [&] {
      const CompressedBlock in = detail::recv_block(t, q, q, local.size(),
                                                    CodecId::none, opts);
      const auto values = detail::reduce_block(in, sum.span());
      std::copy(values.begin(), values.end(), sum.begin());
      return 0;
    });
  }
  return sum;
}

// Root's value copied bit-exactly to every rank. Non-roots' `value` is ignored.
inline GradVec broadcast_from_root(std::span<const float> value, int root,
                                   Transport& t,
                                   const CollectiveOptions& opts = {}) {
  const int p = t.size();
  const int r = t.rank();
  if (root < 0 || root >= p) throw ConfigError("broadcast root out of range");
  if (r == root) {
    if (p > 1) {
      detail::guarded("broadcast_from_root", r, "send", [&] {
        const CompressedBlock block = codec::compress(value, CodecId::none);
        for (int q = 0; q < p; ++q) {
          if (q != root) detail::send_block(t, q, block, root, opts);
        }
        return 0;
      });
    }
    return GradVec(std::vector<float>(value.begin(), value.end()));
  }
  return detail::guarded("broadcast_from_root", r, "receive from root", [&] {
    Message m = t.recv(root);
    if (m.type != MsgType::data || m.iteration != opts.iteration) {
      throw CollectiveError("unexpected message while awaiting broadcast");
    }
    return codec::decompress(codec::deserialize(m.payload));
  });
}

// Centralized barrier through rank 0: everyone checks in, then rank 0 releases.
inline void barrier(Transport& t, const CollectiveOptions& opts = {}) {
  const int p = t.size();
  const int r = t.rank();
  if (p == 1) return;
  const auto expect_barrier = [&](int src) {
    Message m = t.recv(src);
    if (m.type != MsgType::barrier || m.iteration != opts.iteration) {
      throw CollectiveError("unexpected message from rank " +
                            std::to_string(src) + " inside barrier");
    }
  };
  const auto signal = [&](int dest) {
    Message m;
    m.type = MsgType::barrier;
    m.iteration = opts.iteration;
    t.send(dest, std::move(m));
  };
  detail::guarded("barrier", r, "iteration " + std::to_string(opts.iteration),
                  [&] {
    if (r == 0) {
      for (int q = 1; q < p; ++q) expect_barrier(q);
      for (int q = 1; q < p; ++q) signal(q);
    } else {
      signal(0);
      expect_barrier(0);
    }
    return 0;
  });
}

}  // namespace pipesgd::comm
