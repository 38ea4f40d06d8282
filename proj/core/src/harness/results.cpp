#include "nflow/harness/results.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "nflow/tensor.hpp"

namespace nflow::harness {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    throw Error("invalid number '" + s + "'");
  }
  if (used != s.size()) throw Error("invalid number '" + s + "'");
  return v;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  std::ofstream out = open_out(path);
  out << kResultsHeader << "\n";
  for (const ResultRow& r : rows) {
    out << r.task << ',' << r.method << ',' << r.image_id << ',' << format_double(r.psnr) << ','
        << format_double(r.ssim) << ',' << format_double(r.data_loss) << ',' << format_double(r.reg_loss) << ','
        << r.seed << "\n";
  }
}

void write_timing_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  std::ofstream out = open_out(path);
  out << "task,method,image_id,wall_time_ms\n";
  for (const ResultRow& r : rows) {
    out << r.task << ',' << r.method << ',' << r.image_id << ',' << format_double(r.wall_time_ms) << "\n";
  }
}

std::vector<ResultRow> read_results_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw Error(path + ": missing or unexpected header (expected '" + std::string(kResultsHeader) + "')");
  }
  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 8) throw Error(path + ":" + std::to_string(line_no) + ": expected 8 fields");
    try {
      ResultRow r;
      r.task = f[0];
      r.method = f[1];
      r.image_id = f[2];
      r.psnr = parse_double(f[3]);
      r.ssim = parse_double(f[4]);
      r.data_loss = parse_double(f[5]);
      r.reg_loss = parse_double(f[6]);
      r.seed = std::stoull(f[7]);
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<Aggregate> aggregate(const std::vector<ResultRow>& rows) {
  struct Acc {
    Aggregate a;
    std::size_t ssim_count = 0;
  };
  std::map<std::pair<std::string, std::string>, Acc> groups;
  for (const ResultRow& r : rows) {
    Acc& acc = groups[{r.task, r.method}];
    acc.a.task = r.task;
    acc.a.method = r.method;
    ++acc.a.rows;
    if (!std::isfinite(r.psnr)) {
      ++acc.a.excluded;
      continue;
    }
    acc.a.mean_psnr += r.psnr;
    if (std::isfinite(r.ssim)) {
      acc.a.mean_ssim += r.ssim;
      ++acc.ssim_count;
    }
  }
  std::vector<Aggregate> table;
  for (auto& [key, acc] : groups) {
    const std::size_t used = acc.a.rows - acc.a.excluded;
    acc.a.mean_psnr = used ? acc.a.mean_psnr / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
    acc.a.mean_ssim = acc.ssim_count ? acc.a.mean_ssim / static_cast<double>(acc.ssim_count)
                                     : std::numeric_limits<double>::quiet_NaN();
    table.push_back(acc.a);
  }
  return table;
}

void write_aggregate_csv(const std::string& path, const std::vector<Aggregate>& table) {
  std::ofstream out = open_out(path);
  out << kAggregateHeader << "\n";
  for (const Aggregate& a : table) {
    out << a.task << ',' << a.method << ',' << a.rows << ',' << a.excluded << ',' << format_double(a.mean_psnr)
        << ',' << format_double(a.mean_ssim) << "\n";
  }
}

}  // namespace nflow::harness
