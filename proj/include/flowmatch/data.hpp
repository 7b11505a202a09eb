#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/rng.hpp"

namespace flowmatch {

enum class DatasetKind { gaussian, eight_gaussians, moons, scurve, funnel, csv };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::gaussian: return "gaussian";
    case DatasetKind::eight_gaussians: return "8gaussians";
    case DatasetKind::moons: return "moons";
    case DatasetKind::scurve: return "scurve";
    case DatasetKind::funnel: return "funnel";
    case DatasetKind::csv: return "csv";
  }
  return "unknown";
}

inline DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "gaussian" || name == "normal") return DatasetKind::gaussian;
  if (name == "8gaussians" || name == "eight_gaussians") return DatasetKind::eight_gaussians;
  if (name == "moons") return DatasetKind::moons;
  if (name == "scurve") return DatasetKind::scurve;
  if (name == "funnel") return DatasetKind::funnel;
  if (name == "csv") return DatasetKind::csv;
  throw InvalidConfig("unknown dataset kind: " + name);
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::gaussian;
  std::size_t d = 2;
  std::uint64_t seed = 0;
  std::string csv_path;
  std::optional<std::string> time_column;
};

inline void validate(const DatasetSpec& spec) {
  if (spec.d == 0) throw InvalidConfig("dataset dimension must be at least 1");
  const bool planar = spec.kind == DatasetKind::eight_gaussians || spec.kind == DatasetKind::moons ||
                      spec.kind == DatasetKind::scurve;
  if (planar && spec.d != 2) throw InvalidConfig(to_string(spec.kind) + " is two-dimensional");
  if (spec.kind == DatasetKind::funnel && spec.d != 10) throw InvalidConfig("funnel is ten-dimensional");
  if (spec.kind == DatasetKind::csv && spec.csv_path.empty()) throw InvalidConfig("csv dataset needs a path");
}

namespace datasets {

inline constexpr double kEightRadius = 2.0 * std::numbers::sqrt2;
inline constexpr double kEightStd = 0.1;
inline constexpr double kMoonsNoise = 0.1;
inline constexpr double kScurveNoise = 0.05;

// Closed-form moments of the raw generators; whitening uses these rather than
// batch statistics so each point is a pure function of its own draws.
inline constexpr double kMoonsMeanX = 0.5;
inline constexpr double kMoonsMeanY = 0.25;
inline const double kMoonsStdX = std::sqrt(0.75 + kMoonsNoise * kMoonsNoise);
inline const double kMoonsStdY = std::sqrt(0.5625 - 1.0 / std::numbers::pi + kMoonsNoise * kMoonsNoise);
inline const double kScurveStdX = std::sqrt(0.5 + kScurveNoise * kScurveNoise);
inline const double kScurveStdY = std::sqrt(1.5 + 4.0 / (3.0 * std::numbers::pi) + kScurveNoise * kScurveNoise);

inline void eight_gaussians(Rng& rng, std::span<double> out) {
  const auto k = static_cast<double>(rng.below(8));
  const double angle = 2.0 * std::numbers::pi * k / 8.0;
  out[0] = kEightRadius * std::cos(angle) + kEightStd * rng.normal();
  out[1] = kEightRadius * std::sin(angle) + kEightStd * rng.normal();
}

inline void moons(Rng& rng, std::span<double> out) {
  const bool inner = rng.below(2) == 1;
  const double theta = std::numbers::pi * rng.uniform();
  double x = std::cos(theta), y = std::sin(theta);
  if (inner) {
    x = 1.0 - x;
    y = 0.5 - y;
  }
  x += kMoonsNoise * rng.normal();
  y += kMoonsNoise * rng.normal();
  out[0] = (x - kMoonsMeanX) / kMoonsStdX;
  out[1] = (y - kMoonsMeanY) / kMoonsStdY;
}

inline void scurve(Rng& rng, std::span<double> out) {
  const double u = rng.uniform(-1.5 * std::numbers::pi, 1.5 * std::numbers::pi);
  const double sign = u < 0.0 ? -1.0 : (u > 0.0 ? 1.0 : 0.0);
  const double x = std::sin(u) + kScurveNoise * rng.normal();
  const double y = sign * (std::cos(u) - 1.0) + kScurveNoise * rng.normal();
  out[0] = x / kScurveStdX;
  out[1] = y / kScurveStdY;
}

/// Exact funnel draw: x0 ~ N(0, 1), then x1..x9 ~ N(0, exp(x0)).
inline void funnel(Rng& rng, std::span<double> out) {
  out[0] = rng.normal();
  const double scale = std::exp(0.5 * out[0]);
  for (std::size_t i = 1; i < out.size(); ++i) out[i] = scale * rng.normal();
}

}  // namespace datasets

/// n fresh draws. Deterministic in the state of rng.
inline Batch sample_dataset(const DatasetSpec& spec, std::size_t n, Rng& rng) {
  validate(spec);
  if (n == 0) throw InvalidInput("sample count must be at least 1");
  Matrix m(n, spec.d);
  switch (spec.kind) {
    case DatasetKind::gaussian:
      for (double& v : m.values()) v = rng.normal();
      break;
    case DatasetKind::eight_gaussians:
      for (std::size_t i = 0; i < n; ++i) datasets::eight_gaussians(rng, m.row(i));
      break;
    case DatasetKind::moons:
      for (std::size_t i = 0; i < n; ++i) datasets::moons(rng, m.row(i));
      break;
    case DatasetKind::scurve:
      for (std::size_t i = 0; i < n; ++i) datasets::scurve(rng, m.row(i));
      break;
    case DatasetKind::funnel:
      for (std::size_t i = 0; i < n; ++i) datasets::funnel(rng, m.row(i));
      break;
    case DatasetKind::csv:
      throw InvalidInput("csv datasets are loaded with load_csv, not sampled");
  }
  return Batch(std::move(m));
}

/// Ten-dimensional funnel: x0 ~ N(0, 1), x1..x9 ~ N(0, exp(x0)).
inline double funnel_log_density(std::span<const double> x) {
  if (x.size() != 10) throw ShapeError("funnel density is defined on R^10");
  const double x0 = x[0];
  double s = 0.0;
  for (std::size_t i = 1; i < 10; ++i) s += x[i] * x[i];
  return -0.5 * x0 * x0 - 0.5 * kLog2Pi + 9.0 * (-0.5 * kLog2Pi - 0.5 * x0) - 0.5 * s * std::exp(-x0);
}

inline Vector funnel_log_density_grad(std::span<const double> x) {
  if (x.size() != 10) throw ShapeError("funnel density is defined on R^10");
  const double x0 = x[0];
  const double inv_var = std::exp(-x0);
  double s = 0.0;
  for (std::size_t i = 1; i < 10; ++i) s += x[i] * x[i];
  Vector g(10);
  g[0] = -x0 - 4.5 + 0.5 * s * inv_var;
  for (std::size_t i = 1; i < 10; ++i) g[i] = -x[i] * inv_var;
  return g;
}

struct WhiteningStats {
  Vector mean;
  Vector std;

  void apply(Matrix& m) const {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = (m(i, k) - mean[k]) / std[k];
  }
  void invert(Matrix& m) const {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = m(i, k) * std[k] + mean[k];
  }
};

struct TimedBatch {
  double label = 0.0;
  Batch batch;
};

struct CsvData {
  std::vector<std::string> columns;  // coordinate columns, time column excluded
  std::vector<TimedBatch> groups;    // ascending by label
  std::optional<WhiteningStats> whitening;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& s, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* first = s.data();
  if (!s.empty() && s.front() == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw ParseError("non-numeric cell '" + s + "'", row, col);
  return v;
}

}  // namespace detail

/// Reads a headed CSV of coordinates. Rows are grouped by time_column when given;
/// whitening statistics come from the union of all rows.
inline CsvData parse_csv(std::istream& in, const std::optional<std::string>& time_column, bool whiten) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv file is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
  const std::vector<std::string> header = detail::split_csv_line(line);
  std::optional<std::size_t> time_idx;
  CsvData out;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (time_column && header[c] == *time_column)
      time_idx = c;
    else
      out.columns.push_back(header[c]);
  }
  if (time_column && !time_idx) throw DataError("time column '" + *time_column + "' not found in header");
  if (out.columns.empty()) throw DataError("csv has no coordinate columns");
  const std::size_t d = out.columns.size();

  std::map<double, Vector> grouped;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()),
                       row, cells.size() + 1);
    double label = 0.0;
    Vector values;
    values.reserve(d);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = detail::parse_double(cells[c], row, c + 1);
      if (time_idx && c == *time_idx)
        label = v;
      else
        values.push_back(v);
    }
    auto& g = grouped[label];
    g.insert(g.end(), values.begin(), values.end());
  }
  if (grouped.empty()) throw DataError("csv has no data rows");

  for (auto& [label, values] : grouped) {
    if (values.empty()) throw DataError("empty group for time label " + std::to_string(label));
    const std::size_t n = values.size() / d;
    out.groups.push_back({label, Batch(Matrix(n, d, std::move(values)))});
  }

  if (whiten) {
    WhiteningStats stats{Vector(d, 0.0), Vector(d, 0.0)};
    std::size_t total = 0;
    for (const auto& g : out.groups) {
      total += g.batch.size();
      for (std::size_t i = 0; i < g.batch.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) stats.mean[k] += g.batch.points(i, k);
    }
    for (double& m : stats.mean) m /= static_cast<double>(total);
    for (const auto& g : out.groups)
      for (std::size_t i = 0; i < g.batch.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) {
          const double z = g.batch.points(i, k) - stats.mean[k];
          stats.std[k] += z * z;
        }
    for (std::size_t k = 0; k < d; ++k) {
      stats.std[k] = std::sqrt(stats.std[k] / static_cast<double>(total));
      if (!(stats.std[k] > 0.0)) throw DataError("column '" + out.columns[k] + "' is constant and cannot be whitened");
    }
    for (auto& g : out.groups) stats.apply(g.batch.points);
    out.whitening = std::move(stats);
  }
  return out;
}

inline CsvData load_csv(const std::string& path, const std::optional<std::string>& time_column, bool whiten) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open csv file: " + path);
  return parse_csv(in, time_column, whiten);
}

}  // namespace flowmatch
