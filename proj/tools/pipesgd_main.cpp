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

// pipesgd command line: run / predict / calibrate / compare / chart.
//
// Exit codes: 0 ok, 2 configuration error, 3 transport failure,
// 4 prediction disagreement in `compare`, 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "pipesgd/pipesgd.hpp"

namespace {

namespace fs = std::filesystem;
using namespace pipesgd;
using namespace pipesgd::harness;

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTransport = 3;
constexpr int kExitThreshold = 4;

// Experiment options shared by `run` and `calibrate`. Each flag maps to a
// config key and, when given, overrides the config file.
struct ExperimentFlags {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> flag_keys = {
      {"mode", "--mode"},
      {"workers", "--workers"},
      {"codec", "--codec"},
      {"k", "--k"},
      {"warmup_epochs", "--warmup-epochs"},
      {"transport", "--transport"},
      {"roster", "--roster"},
      {"rank", "--rank"},
      {"inject_alpha_ms", "--inject-alpha-ms"},
      {"inject_mbps", "--inject-mbps"},
      {"seed", "--seed"},
      {"iterations", "--iters"},
      {"out", "--out"},
      {"clock", "--clock"},
      {"batch_size", "--batch-size"},
      {"learning_rate", "--lr"},
      {"model", "--model"},
      {"hidden", "--hidden"},
      {"eval_interval", "--eval-interval"},
  };
  std::vector<std::string> values = std::vector<std::string>(flag_keys.size());
  std::vector<CLI::Option*> options;
  std::vector<std::string> sets;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "key = value config file")
        ->check(CLI::ExistingFile);
    const std::vector<std::string> help = {
        "ps_sync | d_sync | pipe_sgd",
        "number of workers p",
        "none | trunc16 | quant8",
        "iteration dependency K (pipe_sgd)",
        "epochs of D-Sync before pipelining",
        "inproc | tcp",
        "host:port roster file (tcp)",
        "this process's rank (tcp)",
        "injected per-message latency, ms",
        "injected link bandwidth, Mbit/s (0 = unlimited)",
        "random seed",
        "iterations T",
        "output directory",
        "wall | logical (logical makes metrics.csv reproducible)",
        "per-worker batch size",
        "learning rate",
        "logistic | mlp",
        "hidden layer widths, e.g. 64,64",
        "iterations between metric rows",
    };
    for (std::size_t i = 0; i < flag_keys.size(); ++i) {
      options.push_back(app.add_option(flag_keys[i].second, values[i], help[i]));
    }
    app.add_option("--set", sets, "extra key=value overrides (repeatable)");
  }

  ExperimentConfig build() const {
    ExperimentConfig c;
    if (!config_file.empty()) load_config(c, config_file);
    for (std::size_t i = 0; i < flag_keys.size(); ++i) {
      if (options[i]->count() > 0) {
        try {
          apply_setting(c, flag_keys[i].first, values[i]);
        } catch (const ConfigError& e) {
          throw ConfigError(flag_keys[i].second + ": " + e.what());
        }
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(c, harness::detail::trim(s.substr(0, eq)),
                    harness::detail::trim(s.substr(eq + 1)));
    }
    return c;
  }
};

int cmd_run(const ExperimentFlags& flags) {
  const ExperimentConfig c = flags.build();
  const ExperimentResult r = run_experiment(c);
  if (!r.is_rank0) {
    std::cout << "rank " << c.rank << " done in " << fmt(r.total_s, 3) << " s\n";
    return kExitOk;
  }
  std::cout << engine::to_string(c.run.mode) << ": " << c.workers << " workers, "
            << c.run.iterations << " iterations in " << fmt(r.total_s, 3) << " s ("
            << fmt(1e3 * r.breakdown.iteration, 3) << " ms/iteration)\n"
            << "final train loss " << fmt(r.final_train_loss, 6) << ", test accuracy "
            << fmt(r.final_accuracy, 4) << "\nwrote " << c.out << "/{metrics,breakdown"
            << (c.write_trace ? ",trace" : "") << "}.csv, summary.txt"
            << (c.charts ? ", charts/" : "") << '\n';
  return kExitOk;
}

int cmd_predict(const std::string& input, const std::string& csv) {
  const PredictInput pi = load_predict_input(input);
  const Prediction p = predict(pi);
  write_prediction_text(std::cout, p);
  if (!csv.empty()) {
    std::ostringstream o;
    write_prediction_csv(o, p);
    write_text_file(csv, o.str());
  }
  return kExitOk;
}

int cmd_calibrate(const ExperimentFlags& flags, int reps, const std::string& output) {
  const ExperimentConfig c = flags.build();
  CalibrationOptions o;
  o.reps = reps;
  const PredictInput pi = calibrate(c, o);
  std::ostringstream text;
  text << "# measured by `pipesgd calibrate` (" << engine::to_string(c.run.mode) << ", "
       << c.workers << " workers, inject_alpha_ms=" << c.inject_alpha_ms
       << ", inject_mbps=" << c.inject_mbps << ")\n";
  write_predict_input(text, pi);
  const std::string path = output.empty() ? (fs::path(c.out) / "calibration.cfg").string() : output;
  write_text_file(path, text.str());
  std::cout << text.str() << "wrote " << path << '\n';
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& calibration,
                double threshold) {
  const PredictInput pi = load_predict_input(calibration);
  std::vector<ComparisonRow> rows;
  for (const auto& dir : runs) {
    RunSummary s = load_run_summary((fs::path(dir) / "summary.txt").string());
    rows.push_back(compare_prediction(s, pi, threshold));
    std::ostringstream o;
    write_comparison_csv(o, {rows.back()});
    write_text_file(fs::path(dir) / "compare.csv", o.str());
  }
  write_comparison_text(std::cout, rows);
  for (const auto& r : rows) {
    if (r.flagged) {
      std::cerr << "prediction disagrees with measurement by more than "
                << fmt(100.0 * threshold, 1) << "%\n";
      return kExitThreshold;
    }
  }
  return kExitOk;
}

int cmd_chart(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<ChartInput> inputs;
  for (const auto& dir : runs) {
    const fs::path d(dir);
    ChartInput in;
    in.label = d.filename().empty() ? d.parent_path().filename().string() : d.filename().string();
    if (fs::exists(d / "metrics.csv")) in.metrics_csv = (d / "metrics.csv").string();
    if (fs::exists(d / "breakdown.csv")) in.breakdown_csv = (d / "breakdown.csv").string();
    if (in.metrics_csv.empty() && in.breakdown_csv.empty()) {
      throw ConfigError("'" + dir + "' has neither metrics.csv nor breakdown.csv");
    }
    inputs.push_back(std::move(in));
  }
  for (const auto& f : emit_charts(inputs, out)) std::cout << "wrote " << f.string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pipesgd: pipelined and synchronous data-parallel SGD"};
  app.require_subcommand(1);

  ExperimentFlags run_flags;
  auto* run = app.add_subcommand("run", "train end-to-end and write reports");
  run_flags.attach(*run);

  std::string predict_input, predict_csv;
  auto* pred = app.add_subcommand("predict", "evaluate the timing model");
  pred->add_option("--config,input", predict_input, "timing-model input (key = value)")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--csv", predict_csv, "also write the table as CSV");

  ExperimentFlags cal_flags;
  int cal_reps = 30;
  std::string cal_output;
  auto* cal = app.add_subcommand("calibrate", "measure timing-model inputs");
  cal_flags.attach(*cal);
  cal->add_option("--reps", cal_reps, "repetitions per probe (>= 20)");
  cal->add_option("--output", cal_output, "where to write the result (default <out>/calibration.cfg)");

  std::vector<std::string> cmp_runs;
  std::string cmp_calibration;
  double cmp_threshold = 0.25;
  auto* cmp = app.add_subcommand("compare", "measured vs predicted iteration time");
  cmp->add_option("--run", cmp_runs, "run output directory (repeatable)")->required();
  cmp->add_option("--calibration", cmp_calibration, "timing-model input from calibrate")
      ->required()
      ->check(CLI::ExistingFile);
  cmp->add_option("--threshold", cmp_threshold, "flag relative error above this");

  std::vector<std::string> chart_runs;
  std::string chart_out = "charts";
  auto* chart = app.add_subcommand("chart", "render SVG charts from run directories");
  chart->add_option("runs", chart_runs, "run output directories")->required();
  chart->add_option("--out", chart_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*pred) return cmd_predict(predict_input, predict_csv);
    if (*cal) return cmd_calibrate(cal_flags, cal_reps, cal_output);
    if (*cmp) return cmd_compare(cmp_runs, cmp_calibration, cmp_threshold);
    if (*chart) return cmd_chart(chart_runs, chart_out);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TransportError& e) {
    std::cerr << "transport failure: " << e.what() << '\n';
    return kExitTransport;
  } catch (const CollectiveError& e) {
    std::cerr << "transport failure: " << e.what() << '\n';
    return kExitTransport;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}
