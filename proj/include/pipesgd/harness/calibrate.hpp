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
#include <barrier>
#include <chrono>
#include <functional>
#include <thread>
#include <vector>

#include "pipesgd/collective.hpp"
#include "pipesgd/engine.hpp"
#include "pipesgd/harness/config.hpp"
#include "pipesgd/harness/experiment.hpp"
#include "pipesgd/harness/predict.hpp"
#include "pipesgd/inproc_transport.hpp"

namespace pipesgd::harness {

struct CalibrationOptions {
  int reps = 30;        // measured repetitions per probe (>= 20)
  int warmup_reps = 3;  // discarded
  int flood_messages = 8;
  std::size_t flood_bytes = 64 * 1024;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline double seconds_since(comm::Clock::time_point t0, comm::Clock::time_point t) {
  return std::chrono::duration<double>(t - t0).count();
}

// Runs body(rank, rep, probe) on p threads in lockstep. Each call returns the
// probe's [start, end) and the rep's duration is the span from the earliest
// start to the latest end, i.e. how long the slowest worker held the group
// back. This captures CPU contention between co-located workers.
using Interval = std::pair<comm::Clock::time_point, comm::Clock::time_point>;

inline std::vector<std::vector<double>> lockstep(
    int p, int reps, int probes, const std::function<Interval(int, int, int)>& body) {
  std::vector<std::vector<std::vector<Interval>>> spans(
      probes, std::vector<std::vector<Interval>>(reps, std::vector<Interval>(p)));
  std::barrier sync(p);
  engine::ErrorSink errors;
  std::vector<std::thread> threads;
  for (int r = 0; r < p; ++r) {
    threads.emplace_back([&, r] {
      for (int rep = 0; rep < reps; ++rep) {
        for (int probe = 0; probe < probes; ++probe) {
          sync.arrive_and_wait();
          if (errors.failed()) {
            spans[probe][rep][r] = {};
            continue;
          }
          try {
            spans[probe][rep][r] = body(r, rep, probe);
          } catch (...) {
            errors.record(std::current_exception());
          }
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  errors.rethrow_if_failed();

  std::vector<std::vector<double>> out(probes);
  for (int probe = 0; probe < probes; ++probe) {
    for (int rep = 0; rep < reps; ++rep) {
      const auto& v = spans[probe][rep];
      auto start = v[0].first;
      auto end = v[0].second;
      for (const auto& [s, e] : v) {
        start = std::min(start, s);
        end = std::max(end, e);
      }
      out[probe].push_back(std::chrono::duration<double>(end - start).count());
    }
  }
  return out;
}

inline std::vector<double> drop_warmup(std::vector<double> v, int warmup) {
  v.erase(v.begin(), v.begin() + std::min<std::ptrdiff_t>(warmup, static_cast<std::ptrdiff_t>(v.size())));
  return v;
}

}  // namespace detail

// Measures the timing-model inputs for this config on the in-process
// transport: stage times (median over lockstep reps of all p workers), alpha
// by ping-pong, beta by a flood, S by the barrier, gamma_red by one
// reduce-scatter hop.
inline PredictInput calibrate(const ExperimentConfig& c, const CalibrationOptions& o = {}) {
  validate(c);
  if (c.transport != TransportKind::inproc) {
    throw ConfigError("calibrate runs on the inproc transport");
  }
  if (o.reps < 20) throw ConfigError("calibration needs at least 20 repetitions");
  const Workload w = prepare_workload(c);
  const int p = c.workers;
  const auto codec_id =
      c.run.mode == engine::Mode::ps_sync ? codec::CodecId::none : c.run.codec;
  const std::size_t n_params = w.model.num_params();
  const comm::BlockPartition part(n_params, p);
  const int total_reps = o.reps + o.warmup_reps;
  using comm::Clock;

  PredictInput pi;
  pi.codec = codec_id;
  pi.cluster.p = p;
  pi.cluster.L = 1;
  pi.cluster.n = static_cast<double>(n_params * codec::bytes_per_element(codec_id));
  pi.pipeline.T = c.run.iterations;
  pi.pipeline.K = c.run.effective_k();

  // Stage times.
  {
    std::vector<engine::BatchSchedule> schedules;
    for (int r = 0; r < p; ++r) {
      schedules.emplace_back(w.train, r, p, c.run.batch_size, c.run.seed);
    }
    struct Scratch {
      numerics::Minibatch batch;
      numerics::BatchForward fwd;
      std::vector<codec::CompressedBlock> blocks;
      GradVec params;
    };
    std::vector<Scratch> scratch(p);
    const auto times = detail::lockstep(p, total_reps, 3, [&](int r, int, int probe) {
      Scratch& s = scratch[r];
      const auto start = Clock::now();
      if (probe == 0) {
        s.batch = schedules[r].next();
        s.fwd = numerics::forward_batch(w.init.span(), w.model, w.train, s.batch);
      } else if (probe == 1) {
        const GradVec g =
            numerics::backward_batch(w.init.span(), w.model, w.train, s.batch, s.fwd);
        s.blocks = comm::compress_blocks(g.span(), part, codec_id);
      } else {
        const GradVec sum = comm::decompress_blocks(s.blocks);
        const GradVec mean = engine::aggregate_semantics(sum.span(), p);
        s.params = numerics::sgd_update(w.init.span(), mean.span(), c.run.learning_rate);
      }
      return detail::Interval{start, Clock::now()};
    });
    pi.stages.l_for = detail::median(detail::drop_warmup(times[0], o.warmup_reps));
    pi.stages.l_back = detail::median(detail::drop_warmup(times[1], o.warmup_reps));
    pi.stages.l_up = detail::median(detail::drop_warmup(times[2], o.warmup_reps));
    pi.stages.l_b = pi.stages.l_back / pi.cluster.L;
  }

  if (p == 1) {
    pi.stages.l_comm = model::ring_comm_time(pi.cluster);
    return pi;
  }

  comm::InProcFabric fabric(p, c.link());
  fabric.set_recv_timeout(std::chrono::milliseconds(c.recv_timeout_ms));

  // Latency: ping-pong between ranks 0 and 1 with empty messages.
  double one_way = 0.0;
  {
    std::vector<double> rtt;
    std::thread echo([&] {
      auto& ep = fabric.endpoint(1);
      for (int i = 0; i < total_reps; ++i) ep.send(0, ep.recv(0));
    });
    auto& ep = fabric.endpoint(0);
    for (int i = 0; i < total_reps; ++i) {
      comm::Message m;
      m.type = comm::MsgType::control;
      const auto start = Clock::now();
      ep.send(1, m);
      ep.recv(1);
      rtt.push_back(detail::seconds_since(start, Clock::now()));
    }
    echo.join();
    one_way = detail::median(detail::drop_warmup(rtt, o.warmup_reps)) / 2.0;
  }

  // Throughput: flood rank 1, which acknowledges once everything arrived.
  {
    const int reps = 5;
    std::vector<double> elapsed;
    std::thread sink([&] {
      auto& ep = fabric.endpoint(1);
      for (int i = 0; i < reps; ++i) {
        for (int j = 0; j < o.flood_messages; ++j) ep.recv(0);
        comm::Message ack;
        ack.type = comm::MsgType::control;
        ep.send(0, ack);
      }
    });
    auto& ep = fabric.endpoint(0);
    for (int i = 0; i < reps; ++i) {
      const auto start = Clock::now();
      for (int j = 0; j < o.flood_messages; ++j) {
        comm::Message m;
        m.payload.resize(o.flood_bytes);
        ep.send(1, std::move(m));
      }
      ep.recv(1);
      elapsed.push_back(detail::seconds_since(start, Clock::now()));
    }
    sink.join();
    const double bytes = static_cast<double>(o.flood_messages) *
                         static_cast<double>(o.flood_bytes + comm::kFrameHeaderBytes);
    pi.cluster.beta = std::max(0.0, (detail::median(elapsed) - 2.0 * one_way) / bytes);
  }
  pi.cluster.alpha =
      std::max(0.0, one_way - static_cast<double>(comm::kFrameHeaderBytes) * pi.cluster.beta);

  // Global synchronization: the engine's barrier, all ranks released together.
  {
    const auto times = detail::lockstep(p, total_reps, 1, [&](int r, int rep, int) {
      comm::CollectiveOptions opts;
      opts.iteration = static_cast<std::uint32_t>(rep);
      const auto start = Clock::now();
      comm::barrier(fabric.endpoint(r), opts);
      return detail::Interval{start, Clock::now()};
    });
    pi.cluster.S = detail::median(detail::drop_warmup(times[0], o.warmup_reps));
  }

  // Reduction: one reduce-scatter hop (decode incoming + decode local + add +
  // encode + serialize) on every rank at once.
  {
    numerics::Rng rng = numerics::make_rng(c.run.seed, 77);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<std::vector<std::byte>> incoming(p);
    std::vector<codec::CompressedBlock> local(p);
    for (int r = 0; r < p; ++r) {
      std::vector<float> a(part[r].length), b(part[r].length);
      for (auto& v : a) v = dist(rng);
      for (auto& v : b) v = dist(rng);
      incoming[r] = codec::serialize(codec::compress(a, codec_id));
      local[r] = codec::compress(b, codec_id);
    }
    std::vector<std::size_t> sink(p);
    const auto times = detail::lockstep(p, total_reps, 1, [&](int r, int, int) {
      const auto start = Clock::now();
      const auto in = codec::deserialize(incoming[r]);
      std::vector<float> mine(local[r].n_elems);
      codec::decompress_into(local[r], mine);
      const auto sum = comm::detail::reduce_block(in, mine);
      sink[r] += codec::serialize(codec::compress(sum, codec_id)).size();
      return detail::Interval{start, Clock::now()};
    });
    const double hop = detail::median(detail::drop_warmup(times[0], o.warmup_reps));
    const double block_bytes = pi.cluster.n / static_cast<double>(p);
    pi.cluster.gamma_red = block_bytes > 0.0 ? hop / block_bytes : 0.0;
  }

  pi.stages.l_comm = model::ring_comm_time(pi.cluster);
  return pi;
}

}  // namespace pipesgd::harness
