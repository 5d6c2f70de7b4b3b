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
#include <cmath>
#include <string>
#include <string_view>

#include "pipesgd/common.hpp"

// Closed-form runtime model for synchronous and pipelined data-parallel SGD.
// All quantities are seconds (or bytes for n) and evaluated in double.
namespace pipesgd::model {

struct StageTimes {
  double l_up = 0.0;    // weight update
  double l_for = 0.0;   // forward pass
  double l_back = 0.0;  // backward pass
  double l_b = 0.0;     // backward time of the first gradient segment
  double l_comm = 0.0;  // gradient communication

  double l_comp() const noexcept { return l_for + l_back; }

  void validate() const {
    for (double v : {l_up, l_for, l_back, l_b, l_comm}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ConfigError("stage times must be finite and >= 0");
      }
    }
    if (l_b > l_back) throw ConfigError("l_b must not exceed l_back");
  }
};

struct ClusterParams {
  int p = 1;
  double alpha = 0.0;      // s / message
  double beta = 0.0;       // s / byte
  double gamma_red = 0.0;  // s / byte reduced
  double S = 0.0;          // global synchronization, s
  double n = 0.0;          // model size, bytes
  int L = 1;               // gradient segments

  void validate() const {
    if (p < 1) throw ConfigError("p must be >= 1");
    if (L < 1) throw ConfigError("L must be >= 1");
    for (double v : {alpha, beta, gamma_red, S, n}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ConfigError("cluster parameters must be finite and >= 0");
      }
    }
  }
};

struct PipelineConfig {
  int K = 2;
  long T = 1;

  void validate() const {
    if (K < 1) throw ConfigError("K must be >= 1");
    if (T < 1) throw ConfigError("T must be >= 1");
  }
};

inline double t_sync_total(double T, const StageTimes& s) {
  return T * (s.l_up + s.l_comp() + s.l_comm);
}

// Ideal pipelining with unlimited resources; T / K is real division.
inline double t_pipe_ideal(double T, int K, const StageTimes& s) {
  if (K < 1) throw ConfigError("K must be >= 1");
  return T / static_cast<double>(K) * (s.l_up + s.l_comp() + s.l_comm);
}

// Compute and communication each run on one resource; K drops out.
inline double t_pipe_limited(double T, const StageTimes& s) {
  return T * std::max(s.l_up + s.l_comp(), s.l_comm);
}

namespace detail {

inline double ring_fraction(int p) {
  return static_cast<double>(p - 1) / static_cast<double>(p);
}

}  // namespace detail

// Ring-AllReduce cost with one sequential exchange of the whole gradient.
inline double ring_comm_time(const ClusterParams& c) {
  const double f = detail::ring_fraction(c.p);
  return 2.0 * (c.p - 1) * c.alpha + 2.0 * f * c.n * c.beta +
         f * c.n * c.gamma_red + c.S;
}

// Same exchange split into L segments: latency and synchronization paid L times.
inline double segmented_comm_time(const ClusterParams& c) {
  const double f = detail::ring_fraction(c.p);
  return 2.0 * (c.p - 1) * c.L * c.alpha + 2.0 * f * c.n * c.beta +
         f * c.n * c.gamma_red + c.L * c.S;
}

inline double t_pipe_seq(double T, const StageTimes& s, const ClusterParams& c) {
  return T * std::max(s.l_up + s.l_for + s.l_back, ring_comm_time(c));
}

inline double t_pipe_segmented(double T, const StageTimes& s,
                               const ClusterParams& c) {
  if (c.L < 1) throw ConfigError("L must be >= 1");
  return T * std::max(s.l_up + s.l_for + s.l_b, segmented_comm_time(c));
}

inline double scaling_efficiency(const StageTimes& s) {
  const double compute = s.l_up + s.l_comp();
  if (!(compute > 0.0)) {
    throw ConfigError("scaling efficiency undefined for zero compute time");
  }
  return compute / std::max(compute, s.l_comm);
}

enum class CommMode { sequential, segmented };
enum class Bound { compute, communication };

inline std::string_view to_string(CommMode m) {
  return m == CommMode::sequential ? "sequential" : "segmented";
}
inline std::string_view to_string(Bound b) {
  return b == Bound::compute ? "compute" : "communication";
}

struct Recommendation {
  int K = 2;
  CommMode comm_mode = CommMode::sequential;
  Bound bound = Bound::compute;
};

inline Recommendation recommend_config(const StageTimes& s,
                                       const ClusterParams& c) {
  Recommendation rec;
  if (c.p == 1) return rec;
  const double seq_compute = s.l_up + s.l_for + s.l_back;
  const double seq_comm = ring_comm_time(c);
  const double seg_compute = s.l_up + s.l_for + s.l_b;
  const double seg_comm = segmented_comm_time(c);
  if (seq_comm > seq_compute) {
    rec.bound = Bound::communication;
    rec.comm_mode = CommMode::sequential;
    return rec;
  }
  rec.bound = Bound::compute;
  if (std::max(seg_compute, seg_comm) < std::max(seq_compute, seq_comm)) {
    rec.comm_mode = CommMode::segmented;
  }
  return rec;
}

}  // namespace pipesgd::model
