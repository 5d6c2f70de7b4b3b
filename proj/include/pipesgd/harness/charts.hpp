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
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pipesgd/harness/csv.hpp"

// Standalone SVG charts: accuracy/loss vs wall-clock lines and a stacked
// per-iteration time breakdown.
namespace pipesgd::harness {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

struct AxisRange {
  double lo = 0.0;
  double hi = 1.0;
};

// [min, max] widened by 5% of the span on each side. A zero span is widened by
// 5% of the magnitude (or by 1 around zero) so the axis never collapses.
inline AxisRange padded_range(const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("cannot scale an axis with no data");
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  double span = *mx - *mn;
  if (span == 0.0) {
    const double pad = *mn == 0.0 ? 1.0 : 0.05 * std::fabs(*mn);
    return {*mn - pad, *mx + pad};
  }
  return {*mn - 0.05 * span, *mx + 0.05 * span};
}

namespace detail {

inline constexpr std::array<const char*, 6> kPalette = {
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
inline constexpr std::array<const char*, 4> kDashes = {"", "6,3", "2,3", "8,3,2,3"};

inline constexpr double kWidth = 760;
inline constexpr double kHeight = 440;
inline constexpr double kLeft = 72;
inline constexpr double kRight = 190;
inline constexpr double kTop = 40;
inline constexpr double kBottom = 56;

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", std::fabs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

struct Frame {
  AxisRange x, y;
  double px(double v) const {
    return kLeft + (v - x.lo) / (x.hi - x.lo) * (kWidth - kLeft - kRight);
  }
  double py(double v) const {
    return kHeight - kBottom - (v - y.lo) / (y.hi - y.lo) * (kHeight - kTop - kBottom);
  }
};

inline void open_svg(std::ostringstream& o, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
    << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(title) << "</text>\n";
}

inline void draw_axes(std::ostringstream& o, const Frame& f, const std::string& xlabel,
                      const std::string& ylabel, bool x_ticks = true) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  o << "<g class=\"axes\" stroke=\"#333\">\n"
    << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\"/>\n"
    << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\"/>\n"
    << "</g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y.lo + (f.y.hi - f.y.lo) * i / 4.0;
    o << "<text x=\"" << x0 - 6 << "\" y=\"" << num(f.py(yv) + 4)
      << "\" text-anchor=\"end\">" << tick_label(yv) << "</text>\n";
    if (x_ticks) {
      const double xv = f.x.lo + (f.x.hi - f.x.lo) * i / 4.0;
      o << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << y0 + 16
        << "\" text-anchor=\"middle\">" << tick_label(xv) << "</text>\n";
    }
  }
  o << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 14
    << "\" text-anchor=\"middle\">" << xml_escape(xlabel) << "</text>\n"
    << "<text transform=\"translate(18," << (y0 + y1) / 2
    << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(ylabel) << "</text>\n";
}

}  // namespace detail

inline std::string line_chart_svg(const std::string& title, const std::string& xlabel,
                                  const std::string& ylabel,
                                  const std::vector<Series>& series) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      xs.push_back(x);
      ys.push_back(y);
    }
  }
  if (xs.empty()) throw ConfigError("line chart '" + title + "' has no data points");
  const detail::Frame f{padded_range(xs), padded_range(ys)};

  std::ostringstream o;
  detail::open_svg(o, title);
  o << "<g class=\"plot\" data-x-lo=\"" << fmt_exact(f.x.lo) << "\" data-x-hi=\""
    << fmt_exact(f.x.hi) << "\" data-y-lo=\"" << fmt_exact(f.y.lo) << "\" data-y-hi=\""
    << fmt_exact(f.y.hi) << "\">\n";
  detail::draw_axes(o, f, xlabel, ylabel);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = detail::kPalette[i % detail::kPalette.size()];
    const char* dash = detail::kDashes[i % detail::kDashes.size()];
    o << "<g class=\"series\" data-label=\"" << detail::xml_escape(s.label) << "\">\n";
    if (s.points.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"";
      if (*dash) o << " stroke-dasharray=\"" << dash << "\"";
      o << " points=\"";
      for (const auto& [x, y] : s.points) {
        o << detail::num(f.px(x)) << ',' << detail::num(f.py(y)) << ' ';
      }
      o << "\"/>\n";
    }
    if (s.points.size() <= 60) {
      for (const auto& [x, y] : s.points) {
        o << "<circle cx=\"" << detail::num(f.px(x)) << "\" cy=\"" << detail::num(f.py(y))
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      }
    }
    o << "</g>\n";
    const double ly = detail::kTop + 10 + 20.0 * static_cast<double>(i);
    const double lx = detail::kWidth - detail::kRight + 16;
    o << "<g class=\"legend\"><line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 26
      << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"";
    if (*dash) o << " stroke-dasharray=\"" << dash << "\"";
    o << "/><text x=\"" << lx + 32 << "\" y=\"" << ly + 4 << "\">"
      << detail::xml_escape(s.label) << "</text></g>\n";
  }
  o << "</g>\n</svg>\n";
  return o.str();
}

struct Bar {
  std::string label;
  std::vector<double> stack;  // one value per stack name
};

inline std::string stacked_bar_svg(const std::string& title, const std::string& ylabel,
                                   const std::vector<std::string>& stack_names,
                                   const std::vector<Bar>& bars) {
  if (bars.empty()) throw ConfigError("bar chart '" + title + "' has no bars");
  double top = 0.0;
  for (const auto& b : bars) {
    if (b.stack.size() != stack_names.size()) {
      throw ConfigError("bar '" + b.label + "' has the wrong number of stacks");
    }
    double sum = 0.0;
    for (double v : b.stack) sum += std::max(v, 0.0);
    top = std::max(top, sum);
  }
  // Bars grow from zero; only the top is padded.
  const detail::Frame f{{0.0, 1.0}, {0.0, top > 0.0 ? top * 1.05 : 1.0}};

  std::ostringstream o;
  detail::open_svg(o, title);
  o << "<g class=\"plot\" data-y-lo=\"0\" data-y-hi=\"" << fmt_exact(f.y.hi) << "\">\n";
  detail::draw_axes(o, f, "", ylabel, false);
  const double plot_w = detail::kWidth - detail::kLeft - detail::kRight;
  const double slot = plot_w / static_cast<double>(bars.size());
  const double bar_w = std::min(80.0, slot * 0.6);
  for (std::size_t b = 0; b < bars.size(); ++b) {
    const double cx = detail::kLeft + slot * (static_cast<double>(b) + 0.5);
    double base = 0.0;
    o << "<g class=\"bar\" data-label=\"" << detail::xml_escape(bars[b].label) << "\">\n";
    for (std::size_t s = 0; s < stack_names.size(); ++s) {
      const double v = std::max(bars[b].stack[s], 0.0);
      const double y_top = f.py(base + v);
      const double h = f.py(base) - y_top;
      o << "<rect x=\"" << detail::num(cx - bar_w / 2) << "\" y=\"" << detail::num(y_top)
        << "\" width=\"" << detail::num(bar_w) << "\" height=\"" << detail::num(h)
        << "\" fill=\"" << detail::kPalette[s % detail::kPalette.size()]
        << "\"><title>" << detail::xml_escape(stack_names[s]) << ": " << v
        << "</title></rect>\n";
      base += v;
    }
    o << "<text x=\"" << detail::num(cx) << "\" y=\"" << detail::kHeight - detail::kBottom + 16
      << "\" text-anchor=\"middle\">" << detail::xml_escape(bars[b].label) << "</text>\n</g>\n";
  }
  for (std::size_t s = 0; s < stack_names.size(); ++s) {
    const double ly = detail::kTop + 10 + 20.0 * static_cast<double>(s);
    const double lx = detail::kWidth - detail::kRight + 16;
    o << "<g class=\"legend\"><rect x=\"" << lx << "\" y=\"" << ly - 6
      << "\" width=\"12\" height=\"12\" fill=\"" << detail::kPalette[s % detail::kPalette.size()]
      << "\"/><text x=\"" << lx + 18 << "\" y=\"" << ly + 4 << "\">"
      << detail::xml_escape(stack_names[s]) << "</text></g>\n";
  }
  o << "</g>\n</svg>\n";
  return o.str();
}

struct ChartInput {
  std::string label;
  std::string metrics_csv;    // may be empty
  std::string breakdown_csv;  // may be empty
};

inline const std::vector<std::string>& breakdown_components() {
  static const std::vector<std::string> names = {"update", "compute", "compress",
                                                 "communicate", "idle"};
  return names;
}

// Writes accuracy_vs_time.svg and loss_vs_time.svg (from metrics) and
// breakdown.svg (from breakdowns) into out_dir. Returns the files written.
inline std::vector<std::filesystem::path> emit_charts(const std::vector<ChartInput>& inputs,
                                                      const std::filesystem::path& out_dir) {
  std::vector<Series> acc, loss;
  std::vector<Bar> bars;
  for (const auto& in : inputs) {
    if (!in.metrics_csv.empty()) {
      const CsvTable t = read_csv(in.metrics_csv);
      const auto ms = t.numbers("wall_clock_ms");
      const auto a = t.numbers("eval_accuracy");
      const auto l = t.numbers("train_loss");
      if (ms.empty()) throw ConfigError("'" + in.metrics_csv + "' has no rows");
      if (a.size() != ms.size() || l.size() != ms.size()) {
        throw ConfigError("'" + in.metrics_csv + "' has incomplete rows");
      }
      Series sa{in.label, {}}, sl{in.label, {}};
      for (std::size_t i = 0; i < ms.size(); ++i) {
        sa.points.emplace_back(ms[i] / 1000.0, a[i]);
        sl.points.emplace_back(ms[i] / 1000.0, l[i]);
      }
      acc.push_back(std::move(sa));
      loss.push_back(std::move(sl));
    }
    if (!in.breakdown_csv.empty()) {
      const CsvTable t = read_csv(in.breakdown_csv);
      if (t.rows.empty()) throw ConfigError("'" + in.breakdown_csv + "' has no rows");
      const std::size_t mode_col = t.column("mode");
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        Bar b;
        b.label = in.label.empty() ? t.rows[r][mode_col] : in.label;
        for (const auto& name : breakdown_components()) {
          b.stack.push_back(t.numbers(name + "_s")[r]);
        }
        bars.push_back(std::move(b));
      }
    }
  }
  if (acc.empty() && bars.empty()) throw ConfigError("no chart input given");
  std::vector<std::filesystem::path> written;
  if (!acc.empty()) {
    written.push_back(out_dir / "accuracy_vs_time.svg");
    write_text_file(written.back(), line_chart_svg("Test accuracy vs wall-clock",
                                                   "wall-clock (s)", "accuracy", acc));
    written.push_back(out_dir / "loss_vs_time.svg");
    write_text_file(written.back(), line_chart_svg("Training loss vs wall-clock",
                                                   "wall-clock (s)", "training loss", loss));
  }
  if (!bars.empty()) {
    written.push_back(out_dir / "breakdown.svg");
    write_text_file(written.back(),
                    stacked_bar_svg("Per-iteration time breakdown", "seconds / iteration",
                                    breakdown_components(), bars));
  }
  return written;
}

}  // namespace pipesgd::harness
