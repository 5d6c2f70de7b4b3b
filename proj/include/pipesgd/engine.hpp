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

#include <algorithm>
#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <cstring>
#include <fstream>
#include <iterator>
#include <latch>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "pipesgd/collective.hpp"
#include "pipesgd/compression.hpp"
#include "pipesgd/inproc_transport.hpp"
#include "pipesgd/numerics.hpp"
#include "pipesgd/transport.hpp"

namespace pipesgd::engine {

using codec::CodecId;
using comm::AggregatedGradient;
using comm::Clock;
using comm::Transport;

enum class Mode { ps_sync, d_sync, pipe_sgd };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::ps_sync:
      return "ps_sync";
    case Mode::d_sync:
      return "d_sync";
    case Mode::pipe_sgd:
      return "pipe_sgd";
  }
  return "invalid";
}

inline Mode parse_mode(std::string_view name) {
  if (name == "ps_sync") return Mode::ps_sync;
  if (name == "d_sync") return Mode::d_sync;
  if (name == "pipe_sgd") return Mode::pipe_sgd;
  throw ConfigError("unknown mode '" + std::string(name) +
                    "' (expected ps_sync, d_sync or pipe_sgd)");
}

struct RunConfig {
  Mode mode = Mode::pipe_sgd;
  int K = 2;  // pipe_sgd only
  double learning_rate = 0.05;
  CodecId codec = CodecId::none;  // ignored by ps_sync
  long iterations = 2000;
  std::size_t batch_size = 32;  // per worker
  int warmup_epochs = 0;
  long eval_interval = 100;
  std::uint64_t seed = 1;
  bool pipelined_allreduce = false;
  std::size_t chunk_elems = 4096;
  bool sync_barrier = true;  // global barrier before each AllReduce
  double lr_decay = 1.0;     // step decay factor ...
  long lr_decay_every = 0;   // ... applied every this many iterations (0: off)

  int effective_k() const noexcept { return mode == Mode::pipe_sgd ? K : 1; }

  void validate() const {
    if (mode == Mode::pipe_sgd && K < 2) {
      throw ConfigError("pipe_sgd needs K >= 2 (got " + std::to_string(K) + ")");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning rate must be > 0");
    }
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (chunk_elems < 1) throw ConfigError("chunk_elems must be >= 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
      throw ConfigError("lr_decay must be in (0, 1]");
    }
    if (lr_decay_every < 0) throw ConfigError("lr_decay_every must be >= 0");
  }
};

inline double learning_rate_at(const RunConfig& cfg, long t) {
  if (cfg.lr_decay_every <= 0 || cfg.lr_decay == 1.0) return cfg.learning_rate;
  return cfg.learning_rate *
         std::pow(cfg.lr_decay, static_cast<double>((t - 1) / cfg.lr_decay_every));
}

// One epoch = one pass of the global batch (p workers x batch) over the data.
inline long iterations_per_epoch(std::size_t num_samples, int p,
                                 std::size_t batch_size) {
  const std::size_t global = static_cast<std::size_t>(p) * batch_size;
  return static_cast<long>(std::max<std::size_t>(1, (num_samples + global - 1) / global));
}

inline Mode warmup_controller(const RunConfig& cfg, long epoch) {
  if (cfg.mode != Mode::pipe_sgd) return cfg.mode;
  return epoch < cfg.warmup_epochs ? Mode::d_sync : Mode::pipe_sgd;
}

inline long warmup_iterations(const RunConfig& cfg, std::size_t num_samples,
                              int p) {
  if (cfg.mode != Mode::pipe_sgd || cfg.warmup_epochs == 0) return 0;
  const long per_epoch = iterations_per_epoch(num_samples, p, cfg.batch_size);
  return std::min<long>(cfg.iterations, cfg.warmup_epochs * per_epoch);
}

// The update consumes the mean of the workers' gradients, not their raw sum.
inline GradVec aggregate_semantics(std::span<const float> sum, int p) {
  if (p < 1) throw ConfigError("aggregate_semantics: p must be >= 1");
  GradVec out(sum.size());
  const float denom = static_cast<float>(p);
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = sum[i] / denom;
  return out;
}

// Which aggregated gradient the update of iteration t applies. Warm-up
// iterations (and one boundary iteration after them) are synchronous and
// consume t-1. After the boundary b, iteration t consumes t-K; tags below b
// were already applied synchronously, so those K-1 slots are filled with
// zeros instead.
struct ConsumePlan {
  long tag = 0;
  bool zero = true;
};

inline ConsumePlan consume_plan(long t, int K, long warmup_iters) {
  const long boundary = warmup_iters > 0 ? warmup_iters + 1 : 0;
  if (t <= boundary) return {t - 1, t - 1 < 1};
  const long tag = t - K;
  return {tag, tag < std::max<long>(boundary, 1)};
}

// ---------------------------------------------------------------------------
// Tracing

enum class Stage : std::uint8_t {
  update,
  forward,
  backward,
  compress,
  allreduce,  // any gradient/weight communication, PS gather/broadcast too
  decompress,
  barrier,
  idle,
};

inline std::string_view to_string(Stage s) {
  static constexpr std::array<std::string_view, 8> names = {
      "update", "forward", "backward", "compress",
      "allreduce", "decompress", "barrier", "idle"};
  return names[static_cast<std::size_t>(s)];
}

inline constexpr std::uint8_t kComputeThread = 0;  // also D-Sync / PS worker
inline constexpr std::uint8_t kCommThread = 1;
inline constexpr std::uint8_t kServerThread = 2;

struct TraceEvent {
  int rank = 0;
  long iteration = 0;
  Stage stage = Stage::idle;
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;
  std::optional<long> consumed_tag;  // update events only
  std::uint8_t thread = kComputeThread;
  bool gradient_wait = false;  // idle spent waiting for an aggregated gradient
};

// Per-thread event log. Each mark() closes the interval since the previous
// mark, so a thread's events tile its timeline without gaps or overlap.
class Tracer {
 public:
  Tracer(int rank, std::uint8_t thread, Clock::time_point t0)
      : rank_(rank), thread_(thread), t0_(t0), cursor_(now_ns()) {}

  std::int64_t now_ns() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0_)
        .count();
  }

  void mark(Stage stage, long iteration, std::optional<long> consumed = {},
            bool gradient_wait = false) {
    const std::int64_t now = now_ns();
    events_.push_back({rank_, iteration, stage, cursor_, now, consumed, thread_,
                       gradient_wait});
    cursor_ = now;
  }

  // Advance without recording (work deliberately kept out of the breakdown).
  void skip() { cursor_ = now_ns(); }

  std::vector<TraceEvent> take() { return std::move(events_); }

 private:
  int rank_;
  std::uint8_t thread_;
  Clock::time_point t0_;
  std::int64_t cursor_;
  std::vector<TraceEvent> events_;
};

inline void write_trace_csv(std::ostream& out, const std::vector<TraceEvent>& events) {
  out << "rank,iteration,stage,start_ns,end_ns,consumed_tag\n";
  for (const auto& e : events) {
    out << e.rank << ',' << e.iteration << ',' << to_string(e.stage) << ','
        << e.start_ns << ',' << e.end_ns << ',';
    if (e.consumed_tag) out << *e.consumed_tag;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Compute/communication handoff

struct Aggregated {
  long tag = 0;
  bool zero = false;  // pre-initialized slot: the gradient is all zeros
  AggregatedGradient blocks;
};

// K slots of aggregated gradients, slot = tag mod K. Tags 1-K..0 start out
// ready and zero. Each tag is published exactly once and acquired at most once.
class GradientBuffer {
 public:
  explicit GradientBuffer(int K) : slots_(static_cast<std::size_t>(K)) {
    if (K < 1) throw ConfigError("gradient buffer depth must be >= 1");
    for (long tag = 1 - K; tag <= 0; ++tag) {
      Slot& s = slot(tag);
      s.tag = tag;
      s.ready = true;
      s.zero = true;
    }
  }

  int depth() const noexcept { return static_cast<int>(slots_.size()); }

  void publish(long tag, AggregatedGradient g) {
    {
      std::lock_guard lock(mu_);
      if (tag != last_published_ + 1) {
        throw LogicError("gradient buffer: tag " + std::to_string(tag) +
                         " published out of order (last " +
                         std::to_string(last_published_) + ")");
      }
      Slot& s = slot(tag);
      if (s.ready && !s.zero) {
        throw LogicError("gradient buffer: slot for tag " + std::to_string(tag) +
                         " still holds unconsumed tag " + std::to_string(s.tag));
      }
      s = Slot{tag, true, false, std::move(g)};
      last_published_ = tag;
    }
    cv_.notify_all();
  }

  Aggregated acquire(long tag) {
    std::unique_lock lock(mu_);
    Slot& s = slot(tag);
    cv_.wait(lock, [&] { return !abort_reason_.empty() || (s.ready && s.tag >= tag); });
    if (!abort_reason_.empty()) throw TransportError(abort_reason_);
    if (s.tag != tag) {
      throw LogicError("gradient buffer: tag " + std::to_string(tag) +
                       " was overwritten by tag " + std::to_string(s.tag));
    }
    s.ready = false;
    return {s.tag, s.zero, std::move(s.blocks)};
  }

  void abort(const std::string& reason) {
    {
      std::lock_guard lock(mu_);
      if (abort_reason_.empty()) abort_reason_ = reason;
    }
    cv_.notify_all();
  }

 private:
  struct Slot {
    long tag = 0;
    bool ready = false;
    bool zero = false;
    AggregatedGradient blocks;
  };

  Slot& slot(long tag) {
    const long k = static_cast<long>(slots_.size());
    return slots_[static_cast<std::size_t>(((tag % k) + k) % k)];
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Slot> slots_;
  long last_published_ = 0;
  std::string abort_reason_;
};

struct LocalGradient {
  long tag = 0;
  std::vector<codec::CompressedBlock> blocks;
};

// Single-slot handoff of the compressed local gradient to the comm thread.
class LocalGradientMailbox {
 public:
  void put(LocalGradient g) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !abort_reason_.empty() || !value_; });
    if (!abort_reason_.empty()) throw TransportError(abort_reason_);
    value_ = std::move(g);
    cv_.notify_all();
  }

  LocalGradient take() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !abort_reason_.empty() || value_.has_value(); });
    if (!abort_reason_.empty()) throw TransportError(abort_reason_);
    LocalGradient g = std::move(*value_);
    value_.reset();
    cv_.notify_all();
    return g;
  }

  void abort(const std::string& reason) {
    {
      std::lock_guard lock(mu_);
      if (abort_reason_.empty()) abort_reason_ = reason;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<LocalGradient> value_;
  std::string abort_reason_;
};

// Keeps the first failure of a run; later failures are usually consequences.
class ErrorSink {
 public:
  void record(std::exception_ptr e) {
    std::lock_guard lock(mu_);
    if (!first_) first_ = e;
  }
  bool failed() const {
    std::lock_guard lock(mu_);
    return static_cast<bool>(first_);
  }
  void rethrow_if_failed() const {
    std::lock_guard lock(mu_);
    if (first_) std::rethrow_exception(first_);
  }

 private:
  mutable std::mutex mu_;
  std::exception_ptr first_;
};

inline std::string describe(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

// ---------------------------------------------------------------------------
// Workers

// Rank r draws minibatches from its shard (indices i mod p == r) with an
// rng stream derived from (seed, r).
class BatchSchedule {
 public:
  BatchSchedule(const numerics::Dataset& data, int rank, int p,
                std::size_t batch_size, std::uint64_t seed)
      : shard_(numerics::shard_indices(data.size(), rank, p)),
        rng_(numerics::make_rng(seed, 1000 + static_cast<std::uint64_t>(rank))),
        batch_size_(batch_size) {
    if (batch_size_ > shard_.size()) {
      throw ConfigError("batch size " + std::to_string(batch_size_) +
                        " exceeds shard of " + std::to_string(shard_.size()) +
                        " samples on rank " + std::to_string(rank));
    }
  }

  numerics::Minibatch next() {
    return numerics::sample_minibatch(shard_, batch_size_, rng_);
  }

 private:
  std::vector<std::size_t> shard_;
  numerics::Rng rng_;
  std::size_t batch_size_;
};

struct WorkerSetup {
  const RunConfig& config;
  const numerics::ModelSpec& model;
  const numerics::Dataset& train;
  const GradVec& init;  // w[0], identical on every worker
  Clock::time_point t0;
  ErrorSink* errors = nullptr;
  bool record_snapshots = false;  // keep w[t] at eval points (rank 0)
};

struct WorkerResult {
  int rank = 0;
  GradVec params;
  std::vector<TraceEvent> trace;
  std::vector<std::pair<long, GradVec>> snapshots;
  std::vector<std::int64_t> params_ready_ns;  // [t-1]: when w[t] existed
  std::int64_t finish_ns = 0;
};

namespace detail {

inline bool is_eval_point(const RunConfig& cfg, long t) {
  return t % cfg.eval_interval == 0 || t == cfg.iterations;
}

inline comm::CollectiveOptions collective_options(const RunConfig& cfg, long t) {
  comm::CollectiveOptions o;
  o.iteration = static_cast<std::uint32_t>(t);
  o.chunk_elems = cfg.chunk_elems;
  return o;
}

inline AggregatedGradient allreduce(const RunConfig& cfg,
                                    std::span<const codec::CompressedBlock> local,
                                    Transport& t, long iteration) {
  const auto opts = collective_options(cfg, iteration);
  return cfg.pipelined_allreduce
             ? comm::pipelined_allreduce_blocks(local, t, cfg.codec, opts)
             : comm::ring_allreduce_blocks(local, t, cfg.codec, opts);
}

inline void fail(const WorkerSetup& s, Transport& t, std::exception_ptr e,
                 const std::string& who) {
  if (s.errors) s.errors->record(e);
  t.abort(who + " failed: " + describe(e));
}

// forward + backward + compress for iteration t; returns the local blocks.
inline std::vector<codec::CompressedBlock> compute_local_gradient(
    const WorkerSetup& s, const GradVec& w, BatchSchedule& batches,
    const comm::BlockPartition& part, Tracer& tr, long t) {
  const numerics::Minibatch batch = batches.next();
  const auto fwd = numerics::forward_batch(w.span(), s.model, s.train, batch);
  tr.mark(Stage::forward, t);
  const GradVec grad = numerics::backward_batch(w.span(), s.model, s.train, batch, fwd);
  tr.mark(Stage::backward, t);
  auto blocks = comm::compress_blocks(grad.span(), part, s.config.codec);
  tr.mark(Stage::compress, t);
  return blocks;
}

inline void apply_update(const WorkerSetup& s, GradVec& w,
                         const Aggregated& g, int p, Tracer& tr, long t) {
  if (!g.zero) {
    const GradVec sum = comm::decompress_blocks(g.blocks);
    tr.mark(Stage::decompress, t);
    const GradVec mean = aggregate_semantics(sum.span(), p);
    w = numerics::sgd_update(w.span(), mean.span(), learning_rate_at(s.config, t));
  }
  tr.mark(Stage::update, t, g.tag);
}

inline void note_params(const WorkerSetup& s, WorkerResult& res, const GradVec& w,
                        Tracer& tr, long t) {
  res.params_ready_ns.push_back(tr.now_ns());
  if (s.record_snapshots && is_eval_point(s.config, t)) {
    res.snapshots.emplace_back(t, w);
    tr.skip();
  }
}

}  // namespace detail

// Two threads per worker. Compute thread, iteration t: wait for the gradient
// tagged t-K, decompress, update, then forward/backward/compress and hand the
// local gradient over. Comm thread: take local gradient t, barrier, AllReduce,
// publish tag t.
inline WorkerResult run_pipe_sgd_worker(Transport& transport, const WorkerSetup& s) {
  const RunConfig& cfg = s.config;
  cfg.validate();
  const int p = transport.size();
  const int r = transport.rank();
  const long T = cfg.iterations;
  const long warmup = warmup_iterations(cfg, s.train.size(), p);
  const comm::BlockPartition part(s.model.num_params(), p);
  BatchSchedule batches(s.train, r, p, cfg.batch_size, cfg.seed);

  GradientBuffer buffer(cfg.K);
  LocalGradientMailbox handoff;
  ErrorSink local_errors;
  const std::string who = "rank " + std::to_string(r);
  const auto on_failure = [&](std::exception_ptr e, const std::string& thread) {
    local_errors.record(e);
    buffer.abort(who + " " + thread + " thread failed");
    handoff.abort(who + " " + thread + " thread failed");
    detail::fail(s, transport, e, who + " " + thread + " thread");
  };

  std::vector<TraceEvent> comm_trace;
  std::thread comm_thread([&] {
    Tracer tr(r, kCommThread, s.t0);
    try {
      for (long t = 1; t <= T; ++t) {
        LocalGradient local = handoff.take();
        tr.mark(Stage::idle, t);
        if (local.tag != t) {
          throw LogicError("comm thread expected local gradient " +
                           std::to_string(t) + ", got " + std::to_string(local.tag));
        }
        if (cfg.sync_barrier) {
          comm::barrier(transport, detail::collective_options(cfg, t));
          tr.mark(Stage::barrier, t);
        }
        AggregatedGradient sum = detail::allreduce(cfg, local.blocks, transport, t);
        tr.mark(Stage::allreduce, t);
        buffer.publish(t, std::move(sum));
      }
    } catch (...) {
      on_failure(std::current_exception(), "communication");
    }
    comm_trace = tr.take();
  });

  WorkerResult res;
  res.rank = r;
  GradVec w = s.init;
  Tracer tr(r, kComputeThread, s.t0);
  try {
    for (long t = 1; t <= T; ++t) {
      const ConsumePlan plan = consume_plan(t, cfg.K, warmup);
      Aggregated g;
      if (plan.zero) {
        g.tag = plan.tag;
        g.zero = true;
      } else {
        g = buffer.acquire(plan.tag);
        tr.mark(Stage::idle, t, std::nullopt, true);
      }
      detail::apply_update(s, w, g, p, tr, t);
      detail::note_params(s, res, w, tr, t);
      auto blocks = detail::compute_local_gradient(s, w, batches, part, tr, t);
      handoff.put({t, std::move(blocks)});
      tr.mark(Stage::idle, t);
    }
  } catch (...) {
    on_failure(std::current_exception(), "compute");
  }
  comm_thread.join();
  local_errors.rethrow_if_failed();

  res.finish_ns = tr.now_ns();
  res.params = std::move(w);
  res.trace = tr.take();
  res.trace.insert(res.trace.end(), comm_trace.begin(), comm_trace.end());
  return res;
}

// Single thread, strictly sequential: update with g_sum[t-1], compute,
// compress, barrier, AllReduce.
inline WorkerResult run_d_sync_worker(Transport& transport, const WorkerSetup& s) {
  const RunConfig& cfg = s.config;
  cfg.validate();
  const int p = transport.size();
  const int r = transport.rank();
  const comm::BlockPartition part(s.model.num_params(), p);
  BatchSchedule batches(s.train, r, p, cfg.batch_size, cfg.seed);

  WorkerResult res;
  res.rank = r;
  GradVec w = s.init;
  Tracer tr(r, kComputeThread, s.t0);
  try {
    Aggregated prev;
    prev.zero = true;
    for (long t = 1; t <= cfg.iterations; ++t) {
      prev.tag = t - 1;
      detail::apply_update(s, w, prev, p, tr, t);
      detail::note_params(s, res, w, tr, t);
      auto blocks = detail::compute_local_gradient(s, w, batches, part, tr, t);
      if (cfg.sync_barrier) {
        comm::barrier(transport, detail::collective_options(cfg, t));
        tr.mark(Stage::barrier, t);
      }
      prev.blocks = detail::allreduce(cfg, blocks, transport, t);
      prev.zero = false;
      tr.mark(Stage::allreduce, t);
    }
  } catch (...) {
    detail::fail(s, transport, std::current_exception(),
                 "rank " + std::to_string(r));
    throw;
  }
  res.finish_ns = tr.now_ns();
  res.params = std::move(w);
  res.trace = tr.take();
  return res;
}

// PS-Sync worker (ranks 0..p-1 of a p+1 endpoint transport; the server is the
// last rank): receive w[t], compute the gradient, send it to the server.
inline WorkerResult run_ps_worker(Transport& transport, const WorkerSetup& s) {
  const RunConfig& cfg = s.config;
  cfg.validate();
  const int server = transport.size() - 1;
  const int p = server;
  const int r = transport.rank();
  if (r == server) throw ConfigError("run_ps_worker called on the server rank");
  BatchSchedule batches(s.train, r, p, cfg.batch_size, cfg.seed);

  WorkerResult res;
  res.rank = r;
  GradVec w;
  Tracer tr(r, kComputeThread, s.t0);
  try {
    for (long t = 1; t <= cfg.iterations; ++t) {
      const auto opts = detail::collective_options(cfg, t);
      w = comm::broadcast_from_root({}, server, transport, opts);
      if (w.size() != s.model.num_params()) {
        throw CollectiveError("server sent " + std::to_string(w.size()) +
                              " parameters, model has " +
                              std::to_string(s.model.num_params()));
      }
      tr.mark(Stage::allreduce, t);
      detail::note_params(s, res, w, tr, t);
      const numerics::Minibatch batch = batches.next();
      const auto fwd = numerics::forward_batch(w.span(), s.model, s.train, batch);
      tr.mark(Stage::forward, t);
      const GradVec grad =
          numerics::backward_batch(w.span(), s.model, s.train, batch, fwd);
      tr.mark(Stage::backward, t);
      comm::gather_to_root(grad.span(), server, transport, opts);
      tr.mark(Stage::allreduce, t);
    }
  } catch (...) {
    detail::fail(s, transport, std::current_exception(),
                 "rank " + std::to_string(r));
    throw;
  }
  res.finish_ns = tr.now_ns();
  res.params = std::move(w);
  res.trace = tr.take();
  return res;
}

// PS-Sync server: apply the mean gradient of iteration t-1, broadcast w[t],
// gather the gradients of iteration t.
inline WorkerResult run_ps_server(Transport& transport, const WorkerSetup& s) {
  const RunConfig& cfg = s.config;
  cfg.validate();
  const int server = transport.size() - 1;
  const int p = server;
  if (transport.rank() != server) {
    throw ConfigError("run_ps_server must run on the last rank");
  }
  WorkerResult res;
  res.rank = server;
  GradVec w = s.init;
  const GradVec zeros(w.size(), 0.0f);
  Tracer tr(server, kServerThread, s.t0);
  try {
    std::optional<GradVec> pending;
    for (long t = 1; t <= cfg.iterations; ++t) {
      const auto opts = detail::collective_options(cfg, t);
      if (pending) {
        const GradVec mean = aggregate_semantics(pending->span(), p);
        w = numerics::sgd_update(w.span(), mean.span(), learning_rate_at(cfg, t));
      }
      tr.mark(Stage::update, t, t - 1);
      comm::broadcast_from_root(w.span(), server, transport, opts);
      tr.mark(Stage::allreduce, t);
      pending = comm::gather_to_root(zeros.span(), server, transport, opts);
      tr.mark(Stage::allreduce, t);
    }
  } catch (...) {
    detail::fail(s, transport, std::current_exception(), "parameter server");
    throw;
  }
  res.finish_ns = tr.now_ns();
  res.params = std::move(w);
  res.trace = tr.take();
  return res;
}

// Dispatches one endpoint of a run to the right worker loop.
inline WorkerResult run_worker(Transport& transport, const WorkerSetup& s) {
  switch (s.config.mode) {
    case Mode::pipe_sgd:
      return run_pipe_sgd_worker(transport, s);
    case Mode::d_sync:
      return run_d_sync_worker(transport, s);
    case Mode::ps_sync:
      return transport.rank() == transport.size() - 1 ? run_ps_server(transport, s)
                                                      : run_ps_worker(transport, s);
  }
  throw LogicError("unhandled mode");
}

struct RunResult {
  std::vector<WorkerResult> workers;  // indexed by rank
  std::optional<WorkerResult> server;
  std::int64_t total_ns = 0;  // start to last finish
  std::vector<comm::StatsSnapshot> stats;  // send-side counters per endpoint

  std::vector<TraceEvent> merged_trace() const {
    std::vector<TraceEvent> all;
    for (const auto& w : workers) all.insert(all.end(), w.trace.begin(), w.trace.end());
    if (server) all.insert(all.end(), server->trace.begin(), server->trace.end());
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.rank != b.rank) return a.rank < b.rank;
      if (a.thread != b.thread) return a.thread < b.thread;
      return a.start_ns < b.start_ns;
    });
    return all;
  }
};

// Runs p workers (plus the PS server) as threads over an in-process fabric.
inline RunResult run_inproc(const RunConfig& cfg, int p, comm::LinkModel link,
                            const numerics::ModelSpec& model,
                            const numerics::Dataset& train, const GradVec& init,
                            std::chrono::milliseconds recv_timeout =
                                comm::kDefaultRecvTimeout) {
  cfg.validate();
  if (p < 1) throw ConfigError("need at least one worker");
  if (init.size() != model.num_params()) {
    throw ConfigError("initial parameters do not match the model");
  }
  // Pre-flight: shard sizes.
  for (int r = 0; r < p; ++r) BatchSchedule(train, r, p, cfg.batch_size, cfg.seed);

  const bool ps = cfg.mode == Mode::ps_sync;
  const int endpoints = ps ? p + 1 : p;
  comm::InProcFabric fabric(endpoints, link);
  fabric.set_recv_timeout(recv_timeout);

  ErrorSink errors;
  std::vector<std::optional<WorkerResult>> results(endpoints);
  std::latch go(1);
  Clock::time_point t0;
  std::vector<std::thread> threads;
  threads.reserve(endpoints);
  for (int r = 0; r < endpoints; ++r) {
    threads.emplace_back([&, r] {
      go.wait();
      WorkerSetup setup{cfg, model, train, init, t0, &errors, r == 0};
      try {
        results[r] = run_worker(fabric.endpoint(r), setup);
      } catch (...) {
        errors.record(std::current_exception());
        fabric.abort("rank " + std::to_string(r) + " failed");
      }
    });
  }
  t0 = Clock::now();
  go.count_down();
  for (auto& t : threads) t.join();
  errors.rethrow_if_failed();

  RunResult out;
  for (int r = 0; r < p; ++r) out.workers.push_back(std::move(*results[r]));
  if (ps) out.server = std::move(*results[p]);
  for (const auto& w : out.workers) out.total_ns = std::max(out.total_ns, w.finish_ns);
  if (out.server) out.total_ns = std::max(out.total_ns, out.server->finish_ns);
  for (int r = 0; r < endpoints; ++r) {
    out.stats.push_back(fabric.endpoint(r).stats().snapshot());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PSGD" | u32 version | u64 length | length x f32, little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, std::span<const float> params) {
  std::vector<std::byte> buf;
  for (char c : std::string_view("PSGD")) buf.push_back(static_cast<std::byte>(c));
  pipesgd::detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  pipesgd::detail::put_le<std::uint64_t>(buf, params.size());
  for (float v : params) pipesgd::detail::put_le<float>(buf, v);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw ConfigError("short write to checkpoint '" + path + "'");
}

inline GradVec load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  const auto bytes = std::as_bytes(std::span<const char>(raw));
  if (bytes.size() < 16 || std::memcmp(raw.data(), "PSGD", 4) != 0) {
    throw CorruptionError("'" + path + "' is not a checkpoint");
  }
  const auto version = pipesgd::detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CorruptionError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n = pipesgd::detail::get_le<std::uint64_t>(bytes, 8);
  if (bytes.size() != 16 + n * 4) {
    throw CorruptionError("checkpoint length field does not match file size");
  }
  GradVec out(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = pipesgd::detail::get_le<float>(bytes, 16 + 4 * i);
  }
  return out;
}

}  // namespace pipesgd::engine
