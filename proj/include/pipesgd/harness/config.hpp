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
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pipesgd/engine.hpp"
#include "pipesgd/numerics.hpp"

namespace pipesgd::harness {

enum class DatasetKind { synthetic, mnist };
enum class TransportKind { inproc, tcp };
enum class ClockKind { wall, logical };

inline std::string_view to_string(DatasetKind d) {
  return d == DatasetKind::synthetic ? "synthetic" : "mnist";
}
inline std::string_view to_string(TransportKind t) {
  return t == TransportKind::inproc ? "inproc" : "tcp";
}
inline std::string_view to_string(ClockKind c) {
  return c == ClockKind::wall ? "wall" : "logical";
}

struct ExperimentConfig {
  engine::RunConfig run;
  int workers = 4;

  DatasetKind dataset = DatasetKind::synthetic;
  numerics::BlobSpec synthetic;
  std::size_t synthetic_test_samples = 2000;
  std::string mnist_images;
  std::string mnist_labels;
  std::string mnist_test_images;
  std::string mnist_test_labels;

  numerics::ModelKind model = numerics::ModelKind::logistic_regression;
  std::vector<std::size_t> hidden = {64, 64};

  TransportKind transport = TransportKind::inproc;
  std::string roster;
  int rank = 0;
  double inject_alpha_ms = 0.0;
  double inject_mbps = 0.0;  // 0: unlimited
  long recv_timeout_ms = 30000;  // also bounds TCP connection setup

  std::string out = "out";
  // logical: wall_clock_ms is replaced by one 1 ms tick per iteration, which
  // makes metrics.csv byte-reproducible.
  ClockKind clock = ClockKind::wall;
  std::size_t eval_samples = 0;  // training rows used for train_loss; 0 = all
  bool write_trace = true;
  bool charts = true;

  comm::LinkModel link() const {
    return comm::LinkModel::from_ms_mbps(inject_alpha_ms, inject_mbps);
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("'" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + value + "'");
}

inline std::vector<std::size_t> parse_dims(const std::string& key,
                                           const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto v = parse_number<std::size_t>(key, trim(item));
    if (v == 0) throw ConfigError("'" + key + "': layer widths must be positive");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("'" + key + "': empty list");
  return out;
}

}  // namespace detail

// Every key accepted in a config file (and by --set on the command line).
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "mode", "workers", "k", "learning_rate", "codec", "iterations",
      "batch_size", "warmup_epochs", "eval_interval", "seed",
      "pipelined_allreduce", "chunk_elems", "sync_barrier", "lr_decay",
      "lr_decay_every", "dataset", "synthetic_dim", "synthetic_classes",
      "synthetic_samples", "synthetic_test_samples", "synthetic_separation",
      "synthetic_seed", "mnist_images", "mnist_labels", "mnist_test_images",
      "mnist_test_labels", "model", "hidden", "transport", "roster", "rank",
      "inject_alpha_ms", "inject_mbps", "recv_timeout_ms", "out", "clock",
      "eval_samples", "trace", "charts"};
  return keys;
}

inline void apply_setting(ExperimentConfig& c, const std::string& key,
                          const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  auto& r = c.run;
  if (key == "mode") {
    r.mode = engine::parse_mode(value);
  } else if (key == "workers") {
    c.workers = parse_number<int>(key, value);
  } else if (key == "k") {
    r.K = parse_number<int>(key, value);
  } else if (key == "learning_rate") {
    r.learning_rate = parse_number<double>(key, value);
  } else if (key == "codec") {
    r.codec = codec::parse_codec(value);
  } else if (key == "iterations") {
    r.iterations = parse_number<long>(key, value);
  } else if (key == "batch_size") {
    r.batch_size = parse_number<std::size_t>(key, value);
  } else if (key == "warmup_epochs") {
    r.warmup_epochs = parse_number<int>(key, value);
  } else if (key == "eval_interval") {
    r.eval_interval = parse_number<long>(key, value);
  } else if (key == "seed") {
    r.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "pipelined_allreduce") {
    r.pipelined_allreduce = parse_bool(key, value);
  } else if (key == "chunk_elems") {
    r.chunk_elems = parse_number<std::size_t>(key, value);
  } else if (key == "sync_barrier") {
    r.sync_barrier = parse_bool(key, value);
  } else if (key == "lr_decay") {
    r.lr_decay = parse_number<double>(key, value);
  } else if (key == "lr_decay_every") {
    r.lr_decay_every = parse_number<long>(key, value);
  } else if (key == "dataset") {
    if (value == "synthetic") {
      c.dataset = DatasetKind::synthetic;
    } else if (value == "mnist") {
      c.dataset = DatasetKind::mnist;
    } else {
      throw ConfigError("'dataset': expected synthetic or mnist, got '" + value + "'");
    }
  } else if (key == "synthetic_dim") {
    c.synthetic.dim = parse_number<std::size_t>(key, value);
  } else if (key == "synthetic_classes") {
    c.synthetic.classes = parse_number<std::size_t>(key, value);
  } else if (key == "synthetic_samples") {
    c.synthetic.samples = parse_number<std::size_t>(key, value);
  } else if (key == "synthetic_test_samples") {
    c.synthetic_test_samples = parse_number<std::size_t>(key, value);
  } else if (key == "synthetic_separation") {
    c.synthetic.separation = parse_number<double>(key, value);
  } else if (key == "synthetic_seed") {
    c.synthetic.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "mnist_images") {
    c.mnist_images = value;
  } else if (key == "mnist_labels") {
    c.mnist_labels = value;
  } else if (key == "mnist_test_images") {
    c.mnist_test_images = value;
  } else if (key == "mnist_test_labels") {
    c.mnist_test_labels = value;
  } else if (key == "model") {
    if (value == "logistic") {
      c.model = numerics::ModelKind::logistic_regression;
    } else if (value == "mlp") {
      c.model = numerics::ModelKind::mlp;
    } else {
      throw ConfigError("'model': expected logistic or mlp, got '" + value + "'");
    }
  } else if (key == "hidden") {
    c.hidden = detail::parse_dims(key, value);
  } else if (key == "transport") {
    if (value == "inproc") {
      c.transport = TransportKind::inproc;
    } else if (value == "tcp") {
      c.transport = TransportKind::tcp;
    } else {
      throw ConfigError("'transport': expected inproc or tcp, got '" + value + "'");
    }
  } else if (key == "roster") {
    c.roster = value;
  } else if (key == "rank") {
    c.rank = parse_number<int>(key, value);
  } else if (key == "inject_alpha_ms") {
    c.inject_alpha_ms = parse_number<double>(key, value);
  } else if (key == "inject_mbps") {
    c.inject_mbps = parse_number<double>(key, value);
  } else if (key == "recv_timeout_ms") {
    c.recv_timeout_ms = parse_number<long>(key, value);
  } else if (key == "out") {
    c.out = value;
  } else if (key == "clock") {
    if (value == "wall") {
      c.clock = ClockKind::wall;
    } else if (value == "logical") {
      c.clock = ClockKind::logical;
    } else {
      throw ConfigError("'clock': expected wall or logical, got '" + value + "'");
    }
  } else if (key == "eval_samples") {
    c.eval_samples = parse_number<std::size_t>(key, value);
  } else if (key == "trace") {
    c.write_trace = parse_bool(key, value);
  } else if (key == "charts") {
    c.charts = parse_bool(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

struct KeyValue {
  std::string key;
  std::string value;
  int line = 0;
};

// `key = value` per line; '#' starts a comment; blank lines ignored; a key may
// appear once.
inline std::vector<KeyValue> parse_key_values(std::istream& in,
                                              const std::string& origin) {
  std::vector<KeyValue> out;
  std::map<std::string, int> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string text = detail::trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value'");
    }
    KeyValue kv{detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)),
                lineno};
    if (kv.key.empty()) throw ConfigError(where + ": empty key");
    if (auto [it, fresh] = seen.emplace(kv.key, lineno); !fresh) {
      throw ConfigError(where + ": duplicate key '" + kv.key + "' (first on line " +
                        std::to_string(it->second) + ")");
    }
    out.push_back(std::move(kv));
  }
  return out;
}

inline void apply_config(ExperimentConfig& c, std::istream& in,
                         const std::string& origin) {
  for (const auto& kv : parse_key_values(in, origin)) {
    try {
      apply_setting(c, kv.key, kv.value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(kv.line) + ": " + e.what());
    }
  }
}

inline void load_config(ExperimentConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  apply_config(c, in, path);
}

// Pre-flight checks that need no data or network.
inline void validate(const ExperimentConfig& c) {
  c.run.validate();
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.workers > 4096) throw ConfigError("workers must be <= 4096");
  if (c.dataset == DatasetKind::synthetic) {
    if (!c.mnist_images.empty() || !c.mnist_labels.empty() ||
        !c.mnist_test_images.empty() || !c.mnist_test_labels.empty()) {
      throw ConfigError("mnist_* paths given but dataset = synthetic");
    }
    if (c.synthetic.classes < 2 || c.synthetic.classes > c.synthetic.dim) {
      throw ConfigError("synthetic_classes must be in [2, synthetic_dim]");
    }
    if (c.synthetic.samples < 1 || c.synthetic_test_samples < 1) {
      throw ConfigError("synthetic sample counts must be >= 1");
    }
  } else {
    if (c.mnist_images.empty() || c.mnist_labels.empty()) {
      throw ConfigError("dataset = mnist needs mnist_images and mnist_labels");
    }
    if (c.mnist_test_images.empty() != c.mnist_test_labels.empty()) {
      throw ConfigError("give both mnist_test_images and mnist_test_labels, or neither");
    }
  }
  if (c.inject_alpha_ms < 0.0 || c.inject_mbps < 0.0) {
    throw ConfigError("injected latency and bandwidth must be >= 0");
  }
  if (c.recv_timeout_ms < 1) throw ConfigError("recv_timeout_ms must be >= 1");
  if (c.transport == TransportKind::tcp) {
    if (c.roster.empty()) throw ConfigError("transport = tcp needs a roster file");
    if (c.run.mode == engine::Mode::ps_sync) {
      throw ConfigError("ps_sync runs on the inproc transport only");
    }
    if (c.rank < 0 || c.rank >= c.workers) {
      throw ConfigError("rank " + std::to_string(c.rank) + " outside [0, workers)");
    }
  } else if (!c.roster.empty()) {
    throw ConfigError("roster given but transport = inproc");
  }
}

}  // namespace pipesgd::harness
