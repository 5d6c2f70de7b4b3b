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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. `acceptance 3 7` runs a subset.

#include <sys/wait.h>

#include <algorithm>
#include <bit>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pipesgd/pipesgd.hpp"
#include "support/oracles.hpp"
#include "support/ranks.hpp"

namespace {

namespace fs = std::filesystem;
using namespace pipesgd;
using codec::CodecId;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string f4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() /
                     ("pipesgd_accept_" + name + "_" + std::to_string(std::random_device{}()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PIPESGD_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

using Inputs = std::vector<std::vector<float>>;

Inputs random_inputs(int p, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Inputs in(p, std::vector<float>(n));
  for (auto& v : in) {
    for (auto& x : v) x = d(rng);
  }
  return in;
}

// ---- 1 ---------------------------------------------------------------------

Outcome allreduce_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  long cases = 0;
  for (int p : {1, 2, 3, 4, 8}) {
    for (std::size_t n : {std::size_t{1}, std::size_t{7}, static_cast<std::size_t>(p),
                          std::size_t{1024}, std::size_t{4099}}) {
      for (bool pipelined : {false, true}) {
        for (int c = 0; c < 100; ++c) {
          const Inputs in = random_inputs(p, n, rng);
          comm::InProcFabric fabric(p);
          Inputs out(p);
          testing_support::run_ranks(fabric, [&](comm::Transport& t) {
            comm::CollectiveOptions o;
            o.chunk_elems = 256;
            const GradVec r = pipelined
                                  ? comm::pipelined_allreduce(in[t.rank()], t, CodecId::none, o)
                                  : comm::ring_allreduce(in[t.rank()], t, CodecId::none, o);
            out[t.rank()] = r.values();
          });
          const auto sum = oracle::direct_sum(in);
          const auto mag = oracle::abs_sum(in);
          for (const auto& o : out) worst = std::max(worst, oracle::max_sum_rel_error(o, sum, mag));
          ++cases;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 30.0,
          std::to_string(cases) + " cases, max rel err " + f4(worst) + ", " + f4(secs) + " s"};
}

// ---- 2 ---------------------------------------------------------------------

Outcome message_accounting() {
  std::mt19937_64 rng(5);
  int checked = 0;
  std::string bad;
  for (CodecId c : {CodecId::none, CodecId::trunc16, CodecId::quant8}) {
    for (int p : {2, 4, 8}) {
      const std::size_t n = 1000 * static_cast<std::size_t>(p);
      const Inputs in = random_inputs(p, n, rng);
      comm::InProcFabric fabric(p);
      testing_support::run_ranks(
          fabric, [&](comm::Transport& t) { comm::ring_allreduce(in[t.rank()], t, c); });
      const std::uint64_t msgs = 2 * static_cast<std::uint64_t>(p - 1);
      // 2((p-1)/p) * n elements of payload plus one block header per message.
      const std::uint64_t elem_bytes = 2 * (p - 1) * (n / p) * codec::bytes_per_element(c);
      const std::uint64_t header_bytes = msgs * codec::kBlockHeaderBytes;
      for (int r = 0; r < p; ++r) {
        const auto s = fabric.endpoint(r).stats().snapshot();
        const auto data = static_cast<std::size_t>(comm::MsgType::data);
        if (s.messages[data] != msgs || s.payload_bytes[data] != elem_bytes + header_bytes) {
          bad = std::string(codec::to_string(c)) + " p=" + std::to_string(p) + " rank " +
                std::to_string(r) + ": " + std::to_string(s.messages[data]) + " msgs, " +
                std::to_string(s.payload_bytes[data]) + " bytes";
        }
        ++checked;
      }
    }
  }
  return {bad.empty(), bad.empty() ? std::to_string(checked) + " rank/codec/p combinations exact"
                                   : bad};
}

// ---- 3 ---------------------------------------------------------------------

Outcome timing_identities() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pi(1, 64), li(1, 16), ti(1, 10000);
  double worst_identity = 0.0;
  int dominance = 0, se_mismatch = 0;
  for (int i = 0; i < 1000; ++i) {
    model::StageTimes s;
    s.l_up = u(rng);
    s.l_for = u(rng);
    s.l_back = u(rng);
    s.l_b = s.l_back * u(rng);
    model::ClusterParams c;
    c.p = pi(rng);
    c.L = li(rng);
    c.alpha = 1e-3 * u(rng);
    c.beta = 1e-8 * u(rng);
    c.gamma_red = 1e-9 * u(rng);
    c.S = 1e-3 * u(rng);
    c.n = 1e8 * u(rng);
    const double T = ti(rng);
    s.l_comm = model::ring_comm_time(c);

    const double gap = model::segmented_comm_time(c) - model::ring_comm_time(c);
    const double expect = (c.L - 1) * (2.0 * (c.p - 1) * c.alpha + c.S);
    worst_identity = std::max(worst_identity, std::fabs(gap - expect));
    if (model::t_pipe_seq(T, s, c) > model::t_sync_total(T, s)) ++dominance;

    // Alternate between the drawn comm time and an arbitrary one so both
    // sides of the compute/communication split are exercised.
    model::StageTimes s2 = s;
    if (i % 2) s2.l_comm = 3.0 * u(rng);
    const bool one = model::scaling_efficiency(s2) == 1.0;
    if (one != (s2.l_comm <= s2.l_up + s2.l_comp())) ++se_mismatch;
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_identity <= 1e-9 && dominance == 0 && se_mismatch == 0 && secs < 1.0;
  return {ok, "identity err " + f4(worst_identity) + ", dominance violations " +
                  std::to_string(dominance) + ", SE mismatches " + std::to_string(se_mismatch)};
}

// ---- 4 ---------------------------------------------------------------------

Outcome staleness_audit() {
  numerics::BlobSpec spec;
  spec.dim = 16;
  spec.classes = 3;
  spec.samples = 2000;
  const auto train = numerics::make_gaussian_blobs(spec);
  const auto m = numerics::ModelSpec::logistic(16, 3);
  const GradVec init = numerics::init_params(m, 3);
  engine::RunConfig cfg;
  cfg.mode = engine::Mode::pipe_sgd;
  cfg.K = 2;
  cfg.iterations = 500;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.1;
  cfg.eval_interval = 1;
  const auto run = engine::run_inproc(cfg, 4, {}, m, train, init);

  long updates = 0, wrong = 0;
  for (const auto& w : run.workers) {
    std::set<long> seen;
    for (const auto& e : w.trace) {
      if (e.stage != engine::Stage::update) continue;
      ++updates;
      seen.insert(e.iteration);
      if (!e.consumed_tag || *e.consumed_tag != e.iteration - cfg.K) ++wrong;
    }
    if (seen.size() != 500) ++wrong;
  }
  // snapshots[t-1] holds w[t], the parameters after the update of iteration t.
  const auto& snaps = run.workers[0].snapshots;
  int prefix_changed = 0;
  for (int t = 1; t <= cfg.K - 1; ++t) {
    if (!bit_equal(snaps.at(t - 1).second.span(), init.span())) ++prefix_changed;
  }
  const bool moved = !bit_equal(snaps.at(cfg.K).second.span(), init.span());
  const bool ok = wrong == 0 && updates == 4 * 500 && prefix_changed == 0 && moved;
  return {ok, std::to_string(updates) + " updates audited, " + std::to_string(wrong) +
                  " with tag != t-K, prefix changed " + std::to_string(prefix_changed)};
}

// ---- 5 ---------------------------------------------------------------------

double grad_rel_error(const GradVec& analytic, const std::vector<double>& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double denom = std::max({std::fabs(fd[i]), std::fabs(double{analytic[i]}), 1e-4});
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string counts;
  int fewest = 100;
  for (const std::vector<std::size_t>& dims :
       {std::vector<std::size_t>{6, 3}, std::vector<std::size_t>{6, 5, 4, 3}}) {
    numerics::BlobSpec spec;
    spec.dim = dims.front();
    spec.classes = dims.back();
    spec.samples = 400;
    spec.seed = 17;
    const auto data = numerics::make_gaussian_blobs(spec);
    const auto m = dims.size() == 2 ? numerics::ModelSpec::logistic(dims[0], dims[1])
                                    : numerics::ModelSpec::mlp(dims);
    numerics::Rng rng = numerics::make_rng(99, dims.size());
    std::normal_distribution<double> d(0.0, 0.5);
    int done = 0;
    for (int attempt = 0; done < 100 && attempt < 5000; ++attempt) {
      GradVec w(m.num_params());
      for (auto& v : w) v = static_cast<float>(d(rng));
      const auto b = numerics::sample_minibatch(data, 4, rng);
      const std::vector<double> wd(w.begin(), w.end());
      // Keep hidden pre-activations away from the ReLU kink.
      if (dims.size() > 2 &&
          oracle::min_hidden_margin(wd, dims, data.features, b.indices) < 0.05) {
        continue;
      }
      const auto fd = oracle::fd_gradient(wd, dims, data.features, data.labels, b.indices, 1e-3);
      worst = std::max(worst, grad_rel_error(numerics::backward_grad(w.span(), m, data, b), fd));
      ++done;
    }
    fewest = std::min(fewest, done);
    counts += (counts.empty() ? "" : ", ") + std::string(dims.size() == 2 ? "logistic " : "mlp ") +
              std::to_string(done);
  }
  const double secs = seconds_since(t0);
  const bool ok = worst < 1e-4 && secs < 60.0 && fewest >= 100;
  return {ok, "draws: " + counts + "; max rel err " + f4(worst) + ", " + f4(secs) + " s"};
}

// ---- 6 ---------------------------------------------------------------------

harness::ExperimentResult convex_run(engine::Mode mode, CodecId c, const fs::path& out) {
  harness::ExperimentConfig x;
  x.workers = 4;
  x.run.mode = mode;
  x.run.K = 2;
  x.run.codec = c;
  x.run.iterations = 2000;
  x.run.eval_interval = 2000;
  x.clock = harness::ClockKind::logical;
  x.write_trace = false;
  x.charts = false;
  x.out = out.string();
  return harness::run_experiment(x);
}

Outcome convergence_parity() {
  const auto t0 = Clock::now();
  const fs::path d = scratch("c6");
  const auto ds = convex_run(engine::Mode::d_sync, CodecId::none, d / "d");
  const auto none = convex_run(engine::Mode::pipe_sgd, CodecId::none, d / "p");
  const auto t16 = convex_run(engine::Mode::pipe_sgd, CodecId::trunc16, d / "t16");
  const auto q8 = convex_run(engine::Mode::pipe_sgd, CodecId::quant8, d / "q8");
  fs::remove_all(d);
  const double loss_gap = std::fabs(none.final_train_loss - ds.final_train_loss) /
                          ds.final_train_loss;
  const double acc_t16 = std::fabs(t16.final_accuracy - none.final_accuracy);
  const double acc_q8 = std::fabs(q8.final_accuracy - none.final_accuracy);
  const double secs = seconds_since(t0);
  const bool ok = loss_gap <= 0.02 && acc_t16 <= 0.01 && acc_q8 <= 0.01 && secs < 300.0;
  return {ok, "loss d_sync " + f4(ds.final_train_loss) + " pipe " + f4(none.final_train_loss) +
                  " (rel " + f4(loss_gap) + "); acc none " + f4(none.final_accuracy) +
                  " trunc16 " + f4(t16.final_accuracy) + " quant8 " + f4(q8.final_accuracy) +
                  ", " + f4(secs) + " s"};
}

// ---- 7 ---------------------------------------------------------------------

harness::ExperimentConfig masking_config(const fs::path& out) {
  harness::ExperimentConfig x;
  x.workers = 4;
  x.model = numerics::ModelKind::mlp;
  x.hidden = {256, 256};
  x.run.batch_size = 128;
  x.run.iterations = 60;
  x.run.eval_interval = 60;
  x.write_trace = false;
  x.charts = false;
  x.eval_samples = 500;
  x.out = out.string();
  return x;
}

Outcome masking_speedup() {
  const auto t0 = Clock::now();
  const fs::path d = scratch("c7");
  auto x = masking_config(d);
  x.run.mode = engine::Mode::d_sync;
  harness::CalibrationOptions o;
  o.reps = 20;
  const auto cal = harness::calibrate(x, o);
  // Bandwidth at which the ring exchange takes as long as the computation.
  const double compute = cal.stages.l_up + cal.stages.l_comp();
  const double p = x.workers;
  const double beta = compute / (2.0 * (p - 1) / p * cal.cluster.n);
  x.inject_mbps = 8.0 / (beta * 1e6);

  std::map<engine::Mode, std::vector<double>> times;
  for (int rep = 0; rep < 3; ++rep) {
    for (auto m : {engine::Mode::d_sync, engine::Mode::pipe_sgd, engine::Mode::ps_sync}) {
      x.run.mode = m;
      times[m].push_back(harness::run_experiment(x).total_s);
    }
  }
  fs::remove_all(d);
  const double ds = median(times[engine::Mode::d_sync]);
  const double pipe = median(times[engine::Mode::pipe_sgd]);
  const double ps = median(times[engine::Mode::ps_sync]);
  const double secs = seconds_since(t0);
  const bool ok = pipe <= 0.7 * ds && ds < ps && secs < 600.0;
  return {ok, "compute " + f4(1e3 * compute) + " ms/iter, link " + f4(x.inject_mbps) +
                  " Mbit/s; median s: pipe_sgd " + f4(pipe) + ", d_sync " + f4(ds) +
                  ", ps_sync " + f4(ps) + " (pipe/d_sync " + f4(pipe / ds) + ")"};
}

// ---- 8 ---------------------------------------------------------------------

Outcome prediction_vs_measurement() {
  const fs::path d = scratch("c8");
  const std::string common =
      "--workers 2 --model mlp --hidden 256,256 --batch-size 32 --iters 100 "
      "--eval-interval 100 --inject-alpha-ms 2 --inject-mbps 100 --set charts=false "
      "--set trace=false --set eval_samples=500";
  const std::string cal = (d / "calibration.cfg").string();
  if (run_cli("calibrate " + common + " --mode d_sync --reps 30 --out " + d.string()) != 0 ||
      run_cli("run " + common + " --mode d_sync --out " + (d / "d").string()) != 0 ||
      run_cli("run " + common + " --mode pipe_sgd --k 2 --out " + (d / "p").string()) != 0) {
    fs::remove_all(d);
    return {false, "calibrate/run failed"};
  }
  const int rc = run_cli("compare --run " + (d / "d").string() + " --run " +
                         (d / "p").string() + " --calibration " + cal + " --threshold 0.15");
  auto rel = [&](const char* run) {
    return harness::read_csv((d / run / "compare.csv").string()).numbers("rel_error").at(0);
  };
  const double rd = rel("d");
  const double rp = rel("p");
  fs::remove_all(d);
  const bool ok = rc == 0 && rd <= 0.10 && rp <= 0.15;
  return {ok, "compare exit " + std::to_string(rc) + "; rel err d_sync " + f4(rd) +
                  ", pipe_sgd " + f4(rp)};
}

// ---- 9 ---------------------------------------------------------------------

Outcome codec_bounds() {
  std::mt19937_64 rng(9);
  std::vector<float> values;
  values.reserve(1'000'000);
  // Half normally distributed, half random finite normal bit patterns.
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> exp(1, 254), mant(0, (1u << 23) - 1), sign(0, 1);
  for (int i = 0; i < 500'000; ++i) values.push_back(g(rng));
  for (int i = 0; i < 500'000; ++i) {
    values.push_back(std::bit_cast<float>((sign(rng) << 31) | (exp(rng) << 23) | mant(rng)));
  }

  const std::vector<float> edges = {0.0f, FLT_MIN, -FLT_MIN, FLT_MAX, -FLT_MAX};
  double worst_t16 = 0.0;
  long t16_bad = 0;
  for (const auto& set : {values, edges}) {
    const GradVec d = codec::decompress(codec::compress(set, CodecId::trunc16));
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double v = set[i];
      const double err = v == 0.0 ? std::fabs(double{d[i]}) : std::fabs(d[i] - v) / std::fabs(v);
      worst_t16 = std::max(worst_t16, err);
      if (!(err <= std::ldexp(1.0, -8))) ++t16_bad;
    }
  }

  // quant8 works per block; check blocks of the size the collectives use,
  // the edge values together, and each edge value alone.
  long q8_bad = 0;
  double worst_q8 = 0.0;
  auto check_q8 = [&](std::span<const float> block) {
    double max_abs = 0.0;
    for (float v : block) max_abs = std::max(max_abs, std::fabs(double{v}));
    const GradVec d = codec::decompress(codec::compress(block, CodecId::quant8));
    for (std::size_t i = 0; i < block.size(); ++i) {
      const double err = std::fabs(double{d[i]} - double{block[i]});
      if (max_abs > 0.0) worst_q8 = std::max(worst_q8, err / max_abs);
      if (!(err <= max_abs / 254.0)) ++q8_bad;
    }
  };
  const std::span<const float> all(values);
  // The normal half in one pass of 4096-element blocks, the bit patterns in
  // blocks of 7 so magnitudes differ wildly inside a block and across blocks.
  for (std::size_t i = 0; i < 500'000; i += 4096) {
    check_q8(all.subspan(i, std::min<std::size_t>(4096, 500'000 - i)));
  }
  for (std::size_t i = 500'000; i < all.size(); i += 7) {
    check_q8(all.subspan(i, std::min<std::size_t>(7, all.size() - i)));
  }
  check_q8(edges);
  for (float e : edges) check_q8(std::span<const float>(&e, 1));
  const std::vector<float> tiny = {0.0f, FLT_MIN, -FLT_MIN};
  check_q8(tiny);

  return {t16_bad == 0 && q8_bad == 0,
          "trunc16 max rel err " + f4(worst_t16) + " (bound " + f4(std::ldexp(1.0, -8)) +
              "), quant8 max err/max|v| " + f4(worst_q8) + " (bound " + f4(1.0 / 254) + ")"};
}

// ---- 10 --------------------------------------------------------------------

Outcome determinism() {
  const fs::path d = scratch("c10");
  const std::string common =
      "--workers 4 --codec none --transport inproc --seed 7 --iters 300 --eval-interval 20 "
      "--set charts=false --set trace=false";
  int rc = 0;
  rc |= run_cli("run " + common + " --clock logical --out " + (d / "a").string());
  rc |= run_cli("run " + common + " --clock logical --out " + (d / "b").string());
  rc |= run_cli("run " + common + " --clock wall --out " + (d / "c").string());
  rc |= run_cli("run " + common + " --clock wall --out " + (d / "e").string());
  if (rc != 0) {
    fs::remove_all(d);
    return {false, "run failed"};
  }
  const std::string a = slurp(d / "a" / "metrics.csv");
  const bool identical = !a.empty() && a == slurp(d / "b" / "metrics.csv");

  // Under the wall clock only the time column may differ.
  auto strip_time = [&](const char* run) {
    const auto t = harness::read_csv((d / run / "metrics.csv").string());
    std::vector<std::string> out;
    for (const auto& row : t.rows) {
      out.push_back(row.at(t.column("iteration")) + "," + row.at(t.column("train_loss")) + "," +
                    row.at(t.column("eval_accuracy")));
    }
    return out;
  };
  const bool wall_ok = strip_time("c") == strip_time("e") && strip_time("c") == strip_time("a");
  fs::remove_all(d);
  return {identical && wall_ok,
          std::string("logical-clock metrics.csv ") + (identical ? "byte-identical" : "DIFFER") +
              "; wall-clock non-time columns " + (wall_ok ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "allreduce matches direct sum", allreduce_oracle},
      {2, "message and byte accounting", message_accounting},
      {3, "timing-model identities", timing_identities},
      {4, "staleness exactness", staleness_audit},
      {5, "gradient correctness", gradient_check},
      {6, "convergence parity", convergence_parity},
      {7, "masking speedup", masking_speedup},
      {8, "prediction vs measurement", prediction_vs_measurement},
      {9, "codec error bounds", codec_bounds},
      {10, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s  %2d %-30s %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
