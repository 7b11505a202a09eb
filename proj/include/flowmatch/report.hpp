#pragma once

#include <boost/uuid/detail/sha1.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "flowmatch/core.hpp"
#include "flowmatch/trainer.hpp"

namespace flowmatch {

/// Shortest round-trip decimal text; "nan" / "inf" / "-inf" for non-finite values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
inline std::string git_blob_sha1(const std::string& content) {
  boost::uuids::detail::sha1 h;
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  h.process_bytes(header.data(), header.size());
  h.process_bytes(content.data(), content.size());
  unsigned int digest[5];
  h.get_digest(digest);
  char buf[41];
  for (int i = 0; i < 5; ++i) std::snprintf(buf + 8 * i, 9, "%08x", digest[i]);
  return std::string(buf, 40);
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "\n";
  return out;
}

inline std::string timing_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,elapsed_s\n";
  for (const auto& r : history) out += std::to_string(r.epoch) + "," + format_double(r.elapsed_s) + "\n";
  return out;
}

/// One evaluation row of report.csv.
struct ReportRow {
  std::string run_id;
  std::string algorithm;
  std::string dataset;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  double w2_sq = 0.0;
  double pe = 0.0;
  double npe = 0.0;
  double nfe_mean = 0.0;
  std::string integrator;
  std::size_t n_steps = 0;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"run_id", "algorithm", "dataset", "sigma",     "seed",      "w2_sq",
                                                "pe",     "npe",       "nfe_mean", "integrator", "n_steps"};
  return cols;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& r : rows) {
    out += r.run_id + "," + r.algorithm + "," + r.dataset + "," + format_double(r.sigma) + "," +
           std::to_string(r.seed) + "," + format_double(r.w2_sq) + "," + format_double(r.pe) + "," +
           format_double(r.npe) + "," + format_double(r.nfe_mean) + "," + r.integrator + "," +
           std::to_string(r.n_steps) + "\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_report_double(const std::string& s, std::size_t row, std::size_t col) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw ParseError("bad number '" + s + "'", row, col);
  return v;
}

inline std::uint64_t parse_report_uint(const std::string& s, std::size_t row, std::size_t col) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw ParseError("bad integer '" + s + "'", row, col);
  return v;
}

}  // namespace detail

/// Strict reader: exact header, exact column count, every cell typed.
inline std::vector<ReportRow> parse_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("report is empty", 1, 1);
  const auto header = detail::split_fields(line);
  if (header != report_columns()) throw ParseError("unexpected report header", 1, 1);
  std::vector<ReportRow> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto c = detail::split_fields(line);
    if (c.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells", row, c.size() + 1);
    ReportRow r;
    r.run_id = c[0];
    r.algorithm = c[1];
    r.dataset = c[2];
    r.sigma = detail::parse_report_double(c[3], row, 4);
    r.seed = detail::parse_report_uint(c[4], row, 5);
    r.w2_sq = detail::parse_report_double(c[5], row, 6);
    r.pe = detail::parse_report_double(c[6], row, 7);
    r.npe = detail::parse_report_double(c[7], row, 8);
    r.nfe_mean = detail::parse_report_double(c[8], row, 9);
    r.integrator = c[9];
    r.n_steps = detail::parse_report_uint(c[10], row, 11);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ReportRow> read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_report_csv(in);
}

}  // namespace flowmatch
