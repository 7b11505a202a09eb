#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/report.hpp"

namespace flowmatch {

/// Point clouds and trajectories in the form written by cmd_eval (trajectories.csv).
struct FlowPicture {
  Matrix source;
  Matrix target;
  std::vector<Matrix> trajectories;  // each: steps x d
};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::string trajectory_csv(const FlowPicture& pic) {
  const std::size_t d = std::max({pic.source.cols(), pic.target.cols(),
                                  pic.trajectories.empty() ? std::size_t{0} : pic.trajectories.front().cols()});
  std::string out = "kind,id";
  for (std::size_t k = 0; k < d; ++k) out += ",x" + std::to_string(k);
  out += "\n";
  auto rows = [&](const std::string& kind, std::size_t id, const Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out += kind + "," + std::to_string(kind == "traj" ? id : i);
      for (std::size_t k = 0; k < m.cols(); ++k) out += "," + format_double(m(i, k));
      out += "\n";
    }
  };
  rows("source", 0, pic.source);
  rows("target", 0, pic.target);
  for (std::size_t j = 0; j < pic.trajectories.size(); ++j) rows("traj", j, pic.trajectories[j]);
  return out;
}

inline FlowPicture parse_trajectory_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("trajectory file is empty", 1, 1);
  const auto header = detail::split_fields(line);
  if (header.size() < 3 || header[0] != "kind" || header[1] != "id")
    throw ParseError("trajectory header must start with kind,id and name coordinates", 1, 1);
  const std::size_t d = header.size() - 2;
  Vector src, tgt;
  std::map<std::uint64_t, Vector> traj;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto c = detail::split_fields(line);
    if (c.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells", row, c.size() + 1);
    const std::uint64_t id = detail::parse_report_uint(c[1], row, 2);
    Vector* dest = nullptr;
    if (c[0] == "source")
      dest = &src;
    else if (c[0] == "target")
      dest = &tgt;
    else if (c[0] == "traj")
      dest = &traj[id];
    else
      throw ParseError("unknown row kind '" + c[0] + "'", row, 1);
    for (std::size_t k = 0; k < d; ++k) dest->push_back(detail::parse_report_double(c[k + 2], row, k + 3));
  }
  FlowPicture pic;
  const std::size_t n_src = src.size() / d, n_tgt = tgt.size() / d;
  pic.source = Matrix(n_src, d, std::move(src));
  pic.target = Matrix(n_tgt, d, std::move(tgt));
  for (auto& [id, v] : traj) {
    const std::size_t steps = v.size() / d;
    pic.trajectories.emplace_back(steps, d, std::move(v));
  }
  return pic;
}

inline FlowPicture read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_trajectory_csv(in);
}

namespace svg {

inline constexpr double kCanvas = 800.0;
inline constexpr double kPad = 60.0;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Axis range centred on the data's bounding box, widened by 10%.
struct Range {
  double lo = -1.0;
  double hi = 1.0;
};

inline Range centred(double lo, double hi, double half) {
  const double c = 0.5 * (lo + hi);
  if (!(half > 0.0)) half = 1.0;
  return {c - half, c + half};
}

struct Frame {
  Range x, y;
  double px(double v) const { return kPad + (v - x.lo) / (x.hi - x.lo) * (kCanvas - 2 * kPad); }
  double py(double v) const { return kCanvas - kPad - (v - y.lo) / (y.hi - y.lo) * (kCanvas - 2 * kPad); }
};

inline std::string header() {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n"
         "<rect x=\"0\" y=\"0\" width=\"800\" height=\"800\" fill=\"white\"/>\n";
}

inline std::string axes(const Frame& f) {
  std::string s;
  const double lo = kPad, hi = kCanvas - kPad;
  s += "<rect x=\"" + num(lo) + "\" y=\"" + num(lo) + "\" width=\"" + num(hi - lo) + "\" height=\"" + num(hi - lo) +
       "\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
  if (f.x.lo < 0.0 && f.x.hi > 0.0)
    s += "<line x1=\"" + num(f.px(0)) + "\" y1=\"" + num(lo) + "\" x2=\"" + num(f.px(0)) + "\" y2=\"" + num(hi) +
         "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
  if (f.y.lo < 0.0 && f.y.hi > 0.0)
    s += "<line x1=\"" + num(lo) + "\" y1=\"" + num(f.py(0)) + "\" x2=\"" + num(hi) + "\" y2=\"" + num(f.py(0)) +
         "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double vx = f.x.lo + (f.x.hi - f.x.lo) * k / 4.0;
    const double vy = f.y.lo + (f.y.hi - f.y.lo) * k / 4.0;
    s += "<text x=\"" + num(f.px(vx)) + "\" y=\"" + num(hi + 20) +
         "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" + label(vx) + "</text>\n";
    s += "<text x=\"" + num(lo - 8) + "\" y=\"" + num(f.py(vy) + 4) +
         "\" font-size=\"12\" text-anchor=\"end\" font-family=\"sans-serif\">" + label(vy) + "</text>\n";
  }
  return s;
}

}  // namespace svg

/// Scatter of source (blue) and target (black) with trajectories as green polylines.
/// Square axes; only the first two coordinates are drawn.
inline std::string render_flow_svg(const FlowPicture& pic) {
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  auto extend = [&](const Matrix& m) {
    if (m.cols() == 0) return;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      xlo = std::min(xlo, m(i, 0));
      xhi = std::max(xhi, m(i, 0));
      const double y = m.cols() > 1 ? m(i, 1) : 0.0;
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  };
  extend(pic.source);
  extend(pic.target);
  for (const auto& t : pic.trajectories) extend(t);
  svg::Frame f;
  if (xlo <= xhi) {
    const double half = 0.5 * std::max(xhi - xlo, yhi - ylo) * 1.1;
    f.x = svg::centred(xlo, xhi, half);
    f.y = svg::centred(ylo, yhi, half);
  }
  std::string s = svg::header() + svg::axes(f);
  auto dots = [&](const Matrix& m, const char* colour) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const double y = m.cols() > 1 ? m(i, 1) : 0.0;
      s += "<circle cx=\"" + svg::num(f.px(m(i, 0))) + "\" cy=\"" + svg::num(f.py(y)) + "\" r=\"1.5\" fill=\"" +
           colour + "\" fill-opacity=\"0.6\"/>\n";
    }
  };
  dots(pic.source, "blue");
  dots(pic.target, "black");
  for (const auto& t : pic.trajectories) {
    s += "<polyline fill=\"none\" stroke=\"green\" stroke-width=\"1\" stroke-opacity=\"0.7\" points=\"";
    for (std::size_t i = 0; i < t.rows(); ++i) {
      const double y = t.cols() > 1 ? t(i, 1) : 0.0;
      s += (i ? " " : "") + svg::num(f.px(t(i, 0))) + "," + svg::num(f.py(y));
    }
    s += "\"/>\n";
  }
  return s + "</svg>\n";
}

/// Line plot of named (x, y) series; each axis centred on its own data range.
inline std::string render_metric_svg(const std::vector<Series>& series, const std::string& x_label,
                                     const std::string& y_label) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& sr : series)
    for (const auto& [x, y] : sr.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  svg::Frame f;
  if (xlo <= xhi) {
    f.x = svg::centred(xlo, xhi, 0.5 * (xhi - xlo) * 1.1);
    f.y = svg::centred(ylo, yhi, 0.5 * (yhi - ylo) * 1.1);
  }
  std::string s = svg::header() + svg::axes(f);
  s += "<text x=\"400\" y=\"780\" font-size=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\">" + x_label +
       "</text>\n";
  s += "<text x=\"16\" y=\"400\" font-size=\"14\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "transform=\"rotate(-90 16 400)\">" +
       y_label + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* colour = palette[k % std::size(palette)];
    s += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& [x, y] : series[k].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      s += (first ? "" : " ") + svg::num(f.px(x)) + "," + svg::num(f.py(y));
      first = false;
    }
    s += "\"/>\n";
    s += "<text x=\"" + svg::num(svg::kPad + 10) + "\" y=\"" + svg::num(svg::kPad + 20 + 18.0 * k) +
         "\" font-size=\"13\" font-family=\"sans-serif\" fill=\"" + colour + "\">" + series[k].name + "</text>\n";
  }
  return s + "</svg>\n";
}

/// w2_sq against n_steps, one series per (algorithm, integrator, run).
inline std::string render_report_svg(const std::vector<ReportRow>& rows) {
  std::map<std::string, Series> by_key;
  for (const auto& r : rows) {
    const std::string key = r.run_id + " " + r.algorithm + " " + r.integrator;
    auto& sr = by_key[key];
    sr.name = key;
    sr.points.emplace_back(static_cast<double>(r.n_steps), r.w2_sq);
  }
  std::vector<Series> series;
  for (auto& [key, sr] : by_key) {
    std::sort(sr.points.begin(), sr.points.end());
    series.push_back(std::move(sr));
  }
  return render_metric_svg(series, "steps", "W2^2");
}

}  // namespace flowmatch
