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

#include <filesystem>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pipesgd/collective.hpp"
#include "pipesgd/engine.hpp"
#include "pipesgd/harness/charts.hpp"
#include "pipesgd/harness/config.hpp"
#include "pipesgd/harness/csv.hpp"
#include "pipesgd/mnist.hpp"
#include "pipesgd/numerics.hpp"
#include "pipesgd/tcp_transport.hpp"

namespace pipesgd::harness {

struct Workload {
  numerics::Dataset train;
  numerics::Dataset test;
  numerics::ModelSpec model = numerics::ModelSpec::logistic(1, 2);
  GradVec init;
};

inline Workload prepare_workload(const ExperimentConfig& c) {
  Workload w;
  if (c.dataset == DatasetKind::synthetic) {
    w.train = numerics::make_gaussian_blobs(c.synthetic);
    numerics::BlobSpec test_spec = c.synthetic;
    test_spec.samples = c.synthetic_test_samples;
    test_spec.seed = c.synthetic.seed ^ 0x7e57'5e7dULL;
    w.test = numerics::make_gaussian_blobs(test_spec);
  } else {
    w.train = numerics::load_mnist(c.mnist_images, c.mnist_labels);
    w.test = c.mnist_test_images.empty()
                 ? w.train
                 : numerics::load_mnist(c.mnist_test_images, c.mnist_test_labels);
  }
  if (c.model == numerics::ModelKind::logistic_regression) {
    w.model = numerics::ModelSpec::logistic(w.train.dim, w.train.num_classes);
  } else {
    std::vector<std::size_t> dims{w.train.dim};
    dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
    dims.push_back(w.train.num_classes);
    w.model = numerics::ModelSpec::mlp(dims);
  }
  w.init = numerics::init_params(w.model, c.run.seed);
  return w;
}

struct MetricRow {
  long iteration = 0;
  double wall_clock_ms = 0.0;
  double train_loss = 0.0;
  double eval_accuracy = 0.0;
};

// Mean seconds per iteration on each worker's critical thread (the thread
// that performs updates), averaged over workers.
struct Breakdown {
  engine::Mode mode = engine::Mode::d_sync;
  double update = 0.0;       // decompress + update
  double compute = 0.0;      // forward + backward
  double compress = 0.0;
  double communicate = 0.0;  // barrier + collectives, or waiting for g_sum
  double idle = 0.0;
  double iteration = 0.0;    // wall-clock per iteration
  double final_accuracy = 0.0;

  double accounted() const { return update + compute + compress + communicate + idle; }
};

inline Breakdown compute_breakdown(engine::Mode mode,
                                   const std::vector<engine::WorkerResult>& workers,
                                   long iterations, std::int64_t total_ns) {
  using engine::Stage;
  Breakdown b;
  b.mode = mode;
  if (workers.empty() || iterations < 1) return b;
  for (const auto& w : workers) {
    for (const auto& e : w.trace) {
      if (e.thread != engine::kComputeThread) continue;
      const double s = static_cast<double>(e.end_ns - e.start_ns) * 1e-9;
      switch (e.stage) {
        case Stage::update:
        case Stage::decompress:
          b.update += s;
          break;
        case Stage::forward:
        case Stage::backward:
          b.compute += s;
          break;
        case Stage::compress:
          b.compress += s;
          break;
        case Stage::allreduce:
        case Stage::barrier:
          b.communicate += s;
          break;
        case Stage::idle:
          (e.gradient_wait ? b.communicate : b.idle) += s;
          break;
      }
    }
  }
  const double denom = static_cast<double>(workers.size()) * static_cast<double>(iterations);
  for (double* v : {&b.update, &b.compute, &b.compress, &b.communicate, &b.idle}) {
    *v /= denom;
  }
  b.iteration = static_cast<double>(total_ns) * 1e-9 / static_cast<double>(iterations);
  return b;
}

// Loss on the training set and accuracy on the test set for every parameter
// snapshot of rank 0. Runs after training, so it never costs training time.
inline std::vector<MetricRow> evaluate_metrics(const ExperimentConfig& c, const Workload& w,
                                               const engine::WorkerResult& rank0) {
  numerics::Minibatch loss_rows;
  const std::size_t n = c.eval_samples == 0 ? w.train.size()
                                            : std::min(c.eval_samples, w.train.size());
  loss_rows.indices.resize(n);
  std::iota(loss_rows.indices.begin(), loss_rows.indices.end(), std::size_t{0});

  std::vector<MetricRow> rows;
  for (const auto& [t, params] : rank0.snapshots) {
    MetricRow row;
    row.iteration = t;
    row.wall_clock_ms =
        c.clock == ClockKind::logical
            ? static_cast<double>(t)
            : static_cast<double>(rank0.params_ready_ns.at(static_cast<std::size_t>(t - 1))) * 1e-6;
    row.train_loss = numerics::forward_loss(params.span(), w.model, w.train, loss_rows);
    row.eval_accuracy = numerics::evaluate_accuracy(params.span(), w.model, w.test);
    rows.push_back(row);
  }
  return rows;
}

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "iteration,wall_clock_ms,train_loss,eval_accuracy\n";
  for (const auto& r : rows) {
    out << r.iteration << ',' << fmt(r.wall_clock_ms, 3) << ',' << fmt(r.train_loss, 6)
        << ',' << fmt(r.eval_accuracy, 4) << '\n';
  }
}

inline void write_breakdown_csv(std::ostream& out, const Breakdown& b) {
  out << "mode,update_s,compute_s,compress_s,communicate_s,idle_s,iteration_s,final_accuracy\n"
      << engine::to_string(b.mode) << ',' << fmt_exact(b.update) << ','
      << fmt_exact(b.compute) << ',' << fmt_exact(b.compress) << ','
      << fmt_exact(b.communicate) << ',' << fmt_exact(b.idle) << ','
      << fmt_exact(b.iteration) << ',' << fmt(b.final_accuracy, 4) << '\n';
}

struct ExperimentResult {
  engine::RunResult run;
  std::vector<MetricRow> metrics;  // rank 0 only
  Breakdown breakdown;
  long warmup_iterations = 0;
  std::size_t num_params = 0;
  double final_train_loss = 0.0;
  double final_accuracy = 0.0;
  double total_s = 0.0;
  bool is_rank0 = true;
};

// key = value lines; read back by `compare`.
inline void write_summary(std::ostream& out, const ExperimentConfig& c,
                          const ExperimentResult& r) {
  const auto& rc = c.run;
  out << "mode = " << engine::to_string(rc.mode) << '\n'
      << "workers = " << c.workers << '\n'
      << "codec = " << codec::to_string(rc.codec) << '\n'
      << "k = " << rc.effective_k() << '\n'
      << "iterations = " << rc.iterations << '\n'
      << "batch_size = " << rc.batch_size << '\n'
      << "learning_rate = " << fmt_exact(rc.learning_rate) << '\n'
      << "warmup_iterations = " << r.warmup_iterations << '\n'
      << "pipelined_allreduce = " << (rc.pipelined_allreduce ? "true" : "false") << '\n'
      << "dataset = " << to_string(c.dataset) << '\n'
      << "model = " << (c.model == numerics::ModelKind::mlp ? "mlp" : "logistic") << '\n'
      << "num_params = " << r.num_params << '\n'
      << "transport = " << to_string(c.transport) << '\n'
      << "inject_alpha_ms = " << fmt_exact(c.inject_alpha_ms) << '\n'
      << "inject_mbps = " << fmt_exact(c.inject_mbps) << '\n'
      << "total_wall_s = " << fmt_exact(r.total_s) << '\n'
      << "mean_iteration_s = " << fmt_exact(r.breakdown.iteration) << '\n'
      << "final_train_loss = " << fmt(r.final_train_loss, 6) << '\n'
      << "final_accuracy = " << fmt(r.final_accuracy, 4) << '\n';
  if (!r.run.stats.empty()) {
    const auto& s = r.run.stats[0];
    const auto data = static_cast<std::size_t>(comm::MsgType::data);
    out << "rank0_data_messages = " << s.messages[data] << '\n'
        << "rank0_data_payload_bytes = " << s.payload_bytes[data] << '\n';
  }
}

namespace detail {

inline engine::RunResult run_tcp(const ExperimentConfig& c, const Workload& w) {
  auto roster = comm::load_roster(c.roster);
  if (static_cast<int>(roster.size()) != c.workers) {
    throw ConfigError("roster lists " + std::to_string(roster.size()) +
                      " endpoints for " + std::to_string(c.workers) + " workers");
  }
  comm::TcpTransport::Options opts;
  opts.link = c.link();
  opts.connect_timeout = std::chrono::milliseconds(c.recv_timeout_ms);
  comm::TcpTransport transport(c.rank, std::move(roster), opts);
  transport.set_recv_timeout(std::chrono::milliseconds(c.recv_timeout_ms));
  // Align start times across processes.
  comm::barrier(transport, comm::CollectiveOptions{});

  engine::ErrorSink errors;
  const auto t0 = comm::Clock::now();
  engine::WorkerSetup setup{c.run, w.model, w.train, w.init, t0, &errors, c.rank == 0};
  engine::RunResult out;
  out.workers.push_back(engine::run_worker(transport, setup));
  out.total_ns = out.workers[0].finish_ns;
  out.stats.push_back(transport.stats().snapshot());
  return out;
}

}  // namespace detail

// Runs the configured experiment end-to-end and writes metrics.csv,
// breakdown.csv, trace.csv, summary.txt and charts/ into c.out. Over TCP each
// process runs one rank; rank 0 writes the reports, others only their trace.
inline ExperimentResult run_experiment(const ExperimentConfig& c) {
  validate(c);
  const Workload w = prepare_workload(c);
  for (int r = 0; r < c.workers; ++r) {
    engine::BatchSchedule(w.train, r, c.workers, c.run.batch_size, c.run.seed);
  }

  ExperimentResult res;
  res.num_params = w.model.num_params();
  res.warmup_iterations = engine::warmup_iterations(c.run, w.train.size(), c.workers);
  if (c.transport == TransportKind::inproc) {
    res.run = engine::run_inproc(c.run, c.workers, c.link(), w.model, w.train, w.init,
                                 std::chrono::milliseconds(c.recv_timeout_ms));
  } else {
    res.run = detail::run_tcp(c, w);
    res.is_rank0 = c.rank == 0;
  }
  res.total_s = static_cast<double>(res.run.total_ns) * 1e-9;
  res.breakdown = compute_breakdown(c.run.mode, res.run.workers, c.run.iterations,
                                    res.run.total_ns);

  const std::filesystem::path out_dir(c.out);
  std::filesystem::create_directories(out_dir);
  if (!res.is_rank0) {
    if (c.write_trace) {
      std::ostringstream trace;
      engine::write_trace_csv(trace, res.run.merged_trace());
      write_text_file(out_dir / ("trace_rank" + std::to_string(c.rank) + ".csv"), trace.str());
    }
    return res;
  }

  res.metrics = evaluate_metrics(c, w, res.run.workers.at(0));
  if (!res.metrics.empty()) {
    res.final_train_loss = res.metrics.back().train_loss;
    res.final_accuracy = res.metrics.back().eval_accuracy;
  }
  res.breakdown.final_accuracy = res.final_accuracy;

  std::ostringstream metrics, breakdown, summary;
  write_metrics_csv(metrics, res.metrics);
  write_breakdown_csv(breakdown, res.breakdown);
  write_summary(summary, c, res);
  write_text_file(out_dir / "metrics.csv", metrics.str());
  write_text_file(out_dir / "breakdown.csv", breakdown.str());
  write_text_file(out_dir / "summary.txt", summary.str());
  if (c.write_trace) {
    std::ostringstream trace;
    engine::write_trace_csv(trace, res.run.merged_trace());
    write_text_file(out_dir / "trace.csv", trace.str());
  }
  if (c.charts) {
    const std::string label(engine::to_string(c.run.mode));
    emit_charts({{label, (out_dir / "metrics.csv").string(),
                  (out_dir / "breakdown.csv").string()}},
                out_dir / "charts");
  }
  return res;
}

}  // namespace pipesgd::harness
