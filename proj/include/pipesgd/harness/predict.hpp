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

#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>

#include "pipesgd/compression.hpp"
#include "pipesgd/engine.hpp"
#include "pipesgd/harness/config.hpp"
#include "pipesgd/harness/csv.hpp"
#include "pipesgd/timing_model.hpp"

namespace pipesgd::harness {

// Inputs of the timing model, as read from (and written by `calibrate` to) a
// key = value file.
struct PredictInput {
  model::StageTimes stages;
  bool l_comm_given = false;  // otherwise l_comm = ring_comm_time(cluster)
  model::ClusterParams cluster;
  model::PipelineConfig pipeline;
  std::optional<codec::CodecId> codec;  // what n was measured with
};

inline PredictInput parse_predict_input(std::istream& in, const std::string& origin) {
  PredictInput pi;
  bool have_lb = false;
  for (const auto& kv : parse_key_values(in, origin)) {
    const std::string& k = kv.key;
    const std::string& v = kv.value;
    try {
      auto num = [&] { return detail::parse_number<double>(k, v); };
      if (k == "l_up") {
        pi.stages.l_up = num();
      } else if (k == "l_for") {
        pi.stages.l_for = num();
      } else if (k == "l_back") {
        pi.stages.l_back = num();
      } else if (k == "l_b") {
        pi.stages.l_b = num();
        have_lb = true;
      } else if (k == "l_comm") {
        pi.stages.l_comm = num();
        pi.l_comm_given = true;
      } else if (k == "p") {
        pi.cluster.p = detail::parse_number<int>(k, v);
      } else if (k == "alpha") {
        pi.cluster.alpha = num();
      } else if (k == "beta") {
        pi.cluster.beta = num();
      } else if (k == "gamma_red") {
        pi.cluster.gamma_red = num();
      } else if (k == "S") {
        pi.cluster.S = num();
      } else if (k == "n") {
        pi.cluster.n = num();
      } else if (k == "L") {
        pi.cluster.L = detail::parse_number<int>(k, v);
      } else if (k == "T") {
        pi.pipeline.T = detail::parse_number<long>(k, v);
      } else if (k == "K") {
        pi.pipeline.K = detail::parse_number<int>(k, v);
      } else if (k == "codec") {
        pi.codec = codec::parse_codec(v);
      } else {
        throw ConfigError("unknown key '" + k + "'");
      }
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(kv.line) + ": " + e.what());
    }
  }
  if (!have_lb) pi.stages.l_b = pi.stages.l_back / std::max(pi.cluster.L, 1);
  pi.cluster.validate();
  pi.pipeline.validate();
  if (!pi.l_comm_given) pi.stages.l_comm = model::ring_comm_time(pi.cluster);
  pi.stages.validate();
  return pi;
}

inline PredictInput load_predict_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return parse_predict_input(in, path);
}

inline void write_predict_input(std::ostream& out, const PredictInput& pi) {
  const auto& s = pi.stages;
  const auto& c = pi.cluster;
  out << "# stage times (s)\n"
      << "l_up = " << fmt_exact(s.l_up) << '\n'
      << "l_for = " << fmt_exact(s.l_for) << '\n'
      << "l_back = " << fmt_exact(s.l_back) << '\n'
      << "l_b = " << fmt_exact(s.l_b) << '\n';
  if (pi.l_comm_given) out << "l_comm = " << fmt_exact(s.l_comm) << '\n';
  out << "# cluster\n"
      << "p = " << c.p << '\n'
      << "alpha = " << fmt_exact(c.alpha) << '\n'
      << "beta = " << fmt_exact(c.beta) << '\n'
      << "gamma_red = " << fmt_exact(c.gamma_red) << '\n'
      << "S = " << fmt_exact(c.S) << '\n'
      << "n = " << fmt_exact(c.n) << '\n'
      << "L = " << c.L << '\n'
      << "# run shape\n"
      << "T = " << pi.pipeline.T << '\n'
      << "K = " << pi.pipeline.K << '\n';
  if (pi.codec) out << "codec = " << codec::to_string(*pi.codec) << '\n';
}

struct Prediction {
  double t_sync_total = 0.0;
  double t_pipe_ideal = 0.0;
  double t_pipe_limited = 0.0;
  double ring_comm_time = 0.0;
  double t_pipe_seq = 0.0;
  double t_pipe_segmented = 0.0;
  std::optional<double> scaling_efficiency;  // undefined for zero compute
  model::Recommendation recommendation;
};

inline Prediction predict(const PredictInput& pi) {
  const double T = static_cast<double>(pi.pipeline.T);
  Prediction p;
  p.t_sync_total = model::t_sync_total(T, pi.stages);
  p.t_pipe_ideal = model::t_pipe_ideal(T, pi.pipeline.K, pi.stages);
  p.t_pipe_limited = model::t_pipe_limited(T, pi.stages);
  p.ring_comm_time = model::ring_comm_time(pi.cluster);
  p.t_pipe_seq = model::t_pipe_seq(T, pi.stages, pi.cluster);
  p.t_pipe_segmented = model::t_pipe_segmented(T, pi.stages, pi.cluster);
  if (pi.stages.l_up + pi.stages.l_comp() > 0.0) {
    p.scaling_efficiency = model::scaling_efficiency(pi.stages);
  }
  p.recommendation = model::recommend_config(pi.stages, pi.cluster);
  return p;
}

inline void write_prediction_csv(std::ostream& out, const Prediction& p) {
  out << "quantity,value\n"
      << "t_sync_total_s," << fmt_exact(p.t_sync_total) << '\n'
      << "t_pipe_ideal_s," << fmt_exact(p.t_pipe_ideal) << '\n'
      << "t_pipe_limited_s," << fmt_exact(p.t_pipe_limited) << '\n'
      << "ring_comm_time_s," << fmt_exact(p.ring_comm_time) << '\n'
      << "t_pipe_seq_s," << fmt_exact(p.t_pipe_seq) << '\n'
      << "t_pipe_segmented_s," << fmt_exact(p.t_pipe_segmented) << '\n'
      << "scaling_efficiency,"
      << (p.scaling_efficiency ? fmt_exact(*p.scaling_efficiency) : "undefined") << '\n'
      << "recommended_k," << p.recommendation.K << '\n'
      << "recommended_comm_mode," << model::to_string(p.recommendation.comm_mode) << '\n'
      << "bound," << model::to_string(p.recommendation.bound) << '\n';
}

inline void write_prediction_text(std::ostream& out, const Prediction& p) {
  auto row = [&](const char* name, double v) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-22s %14.6f s\n", name, v);
    out << buf;
  };
  out << "predicted totals\n";
  row("t_sync_total", p.t_sync_total);
  row("t_pipe_ideal", p.t_pipe_ideal);
  row("t_pipe_limited", p.t_pipe_limited);
  row("ring_comm_time", p.ring_comm_time);
  row("t_pipe_seq", p.t_pipe_seq);
  row("t_pipe_segmented", p.t_pipe_segmented);
  out << "  scaling_efficiency     "
      << (p.scaling_efficiency ? fmt(*p.scaling_efficiency, 4) : "undefined") << '\n'
      << "recommendation: K=" << p.recommendation.K << ", "
      << model::to_string(p.recommendation.comm_mode) << " gradient exchange, "
      << model::to_string(p.recommendation.bound) << "-bound\n";
}

// The fields of a run's summary.txt that `compare` needs.
struct RunSummary {
  engine::Mode mode = engine::Mode::d_sync;
  int workers = 1;
  codec::CodecId codec = codec::CodecId::none;
  int K = 1;
  long iterations = 1;
  double mean_iteration_s = 0.0;
};

inline RunSummary load_run_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run summary '" + path + "'");
  std::map<std::string, std::string> kv;
  for (auto& e : parse_key_values(in, path)) kv[e.key] = e.value;
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError(path + ": missing '" + k + "'");
    return it->second;
  };
  RunSummary s;
  s.mode = engine::parse_mode(get("mode"));
  s.workers = detail::parse_number<int>("workers", get("workers"));
  s.codec = codec::parse_codec(get("codec"));
  s.K = detail::parse_number<int>("k", get("k"));
  s.iterations = detail::parse_number<long>("iterations", get("iterations"));
  s.mean_iteration_s = detail::parse_number<double>("mean_iteration_s", get("mean_iteration_s"));
  return s;
}

struct ComparisonRow {
  engine::Mode mode = engine::Mode::d_sync;
  double measured_s = 0.0;   // per iteration
  double predicted_s = 0.0;  // per iteration
  double rel_error = 0.0;    // |measured - predicted| / predicted
  model::Bound bound = model::Bound::compute;
  bool flagged = false;
};

// d_sync is predicted by the synchronous total; pipe_sgd by the
// resource-limited pipelined total over T + K - 1 iterations (the pipeline
// fill), spread over T.
inline ComparisonRow compare_prediction(const RunSummary& measured, const PredictInput& pi,
                                        double threshold = 0.25) {
  if (measured.workers != pi.cluster.p) {
    throw ConfigError("run used " + std::to_string(measured.workers) +
                      " workers but the prediction is for p = " + std::to_string(pi.cluster.p));
  }
  if (pi.codec && *pi.codec != measured.codec) {
    throw ConfigError("run used codec " + std::string(codec::to_string(measured.codec)) +
                      " but the prediction was calibrated with " +
                      std::string(codec::to_string(*pi.codec)));
  }
  ComparisonRow row;
  row.mode = measured.mode;
  row.measured_s = measured.mean_iteration_s;
  const double T = static_cast<double>(measured.iterations);
  switch (measured.mode) {
    case engine::Mode::d_sync:
      row.predicted_s = model::t_sync_total(1.0, pi.stages);
      break;
    case engine::Mode::pipe_sgd:
      row.predicted_s =
          model::t_pipe_limited(T + static_cast<double>(measured.K - 1), pi.stages) / T;
      break;
    case engine::Mode::ps_sync:
      throw ConfigError("mode mismatch: the timing model covers d_sync and pipe_sgd, not ps_sync");
  }
  row.rel_error = row.predicted_s > 0.0
                      ? std::fabs(row.measured_s - row.predicted_s) / row.predicted_s
                      : std::numeric_limits<double>::infinity();
  row.bound = pi.stages.l_comm > pi.stages.l_up + pi.stages.l_comp()
                  ? model::Bound::communication
                  : model::Bound::compute;
  row.flagged = row.rel_error > threshold;
  return row;
}

inline void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "mode,measured_iteration_s,predicted_iteration_s,rel_error,bound,flagged\n";
  for (const auto& r : rows) {
    out << engine::to_string(r.mode) << ',' << fmt_exact(r.measured_s) << ','
        << fmt_exact(r.predicted_s) << ',' << fmt(r.rel_error, 4) << ','
        << model::to_string(r.bound) << ',' << (r.flagged ? "yes" : "no") << '\n';
  }
}

inline void write_comparison_text(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %14s %14s %9s  %-13s %s\n", "mode", "measured_s",
                "predicted_s", "rel_err", "bound", "flag");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %14.6f %14.6f %8.2f%%  %-13s %s\n",
                  std::string(engine::to_string(r.mode)).c_str(), r.measured_s, r.predicted_s,
                  100.0 * r.rel_error, std::string(model::to_string(r.bound)).c_str(),
                  r.flagged ? "DISAGREES" : "ok");
    out << buf;
  }
}

}  // namespace pipesgd::harness
