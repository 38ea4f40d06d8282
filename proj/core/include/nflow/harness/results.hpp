#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace nflow::harness {

struct ResultRow {
  std::string task;
  std::string method;
  std::string image_id;
  double psnr = 0;
  double ssim = 0;
  double data_loss = 0;
  double reg_loss = 0;
  std::uint64_t seed = 0;
  double wall_time_ms = 0;
};

/// Fixed column order; wall time is written separately by write_timing_csv
/// so that this file is reproducible.
inline constexpr const char* kResultsHeader = "task,method,image_id,psnr,ssim,data_loss,reg_loss,seed";

std::string format_double(double v);
double parse_double(const std::string& s);

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);
void write_timing_csv(const std::string& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(const std::string& path);

struct Aggregate {
  std::string task;
  std::string method;
  std::size_t rows = 0;
  /// Rows with an infinite or NaN PSNR are left out of both means.
  std::size_t excluded = 0;
  double mean_psnr = 0;
  double mean_ssim = 0;
};

inline constexpr const char* kAggregateHeader = "task,method,rows,excluded,mean_psnr,mean_ssim";

/// One entry per (task, method), sorted by task and then method.
std::vector<Aggregate> aggregate(const std::vector<ResultRow>& rows);
void write_aggregate_csv(const std::string& path, const std::vector<Aggregate>& table);

}  // namespace nflow::harness
