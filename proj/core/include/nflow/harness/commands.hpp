#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nflow/flow_model.hpp"
#include "nflow/harness/image_io.hpp"
#include "nflow/harness/results.hpp"

namespace nflow::harness {

struct TrainOptions {
  std::string data_dir;
  std::string out;
  /// Defaults to <out>.loss.csv.
  std::string loss_csv;
  std::size_t epochs = 100;
  std::size_t batch = 32;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::size_t scales = 5;
  std::size_t steps = 2;
  std::size_t hidden = 512;
  std::string perm = "coupling";
  /// "auto" doubles the 2x2 and 1x1 scales, "none" doubles nothing,
  /// otherwise a comma-separated list of 0-based scale indices.
  std::string double_at = "auto";
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t max_steps = 0;
  double clip = 50.0;
  std::size_t limit = 0;
};

struct SampleOptions {
  std::string ckpt;
  std::string sigmas = "0:2:0.2";
  std::size_t count = 16;
  std::string out;
  std::uint64_t seed = 0;
};

struct SolveOptions {
  std::string ckpt;
  std::string data_dir;
  std::string task = "denoise";
  std::string method = "ours";
  std::optional<double> alpha;
  std::optional<double> gamma;
  std::optional<double> beta;
  std::optional<double> lr;
  std::size_t iters = 1500;
  std::size_t count = 192;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t batch = 32;
  std::size_t threads = 1;
  double noise_std = 0.1;
  std::string noise_mode = "per-entry";
  std::string blur_mode = "valid";
  std::size_t mask_side = 0;
  std::optional<double> noise_sigma;
  bool strips = true;
};

struct EvalOptions {
  std::string in;
  std::string out;
};

struct BenchOptions {
  std::string ckpt_a;
  std::string ckpt_b;
  std::size_t runs = 1500;
  std::size_t batch = 128;
  std::size_t warmup = 10;
  std::uint64_t seed = 0;
  std::string out;
};

struct SynthOptions {
  std::string out;
  std::size_t count = 64;
  std::size_t channels = 1;
  std::size_t size = 8;
  std::uint64_t seed = 0;
  std::string pattern = "rectangles";
};

std::vector<double> parse_sigmas(const std::string& text);
std::vector<std::size_t> parse_double_at(const std::string& text, const FlowConfig& config);

/// Rows of `count` samples, one row per sigma in ascending order.
Image8 sample_grid(const FlowModel<float>& model, std::vector<double> sigmas, std::size_t count, std::uint64_t seed);

struct TimingStats {
  double mean_ms = 0;
  double std_ms = 0;
  std::vector<double> samples_ms;
};

/// Times the inverse pass on one fixed latent batch.
TimingStats time_inverse(const FlowModel<float>& model, std::size_t batch, std::size_t runs, std::size_t warmup,
                         std::uint64_t seed);

struct BenchEntry {
  std::string label;
  std::string permutation;
  std::size_t steps = 0;
  TimingStats stats;
};

/// Both models must have the same number of flow steps.
std::vector<BenchEntry> bench_models(const FlowModel<float>& a, const FlowModel<float>& b, std::size_t batch,
                                     std::size_t runs, std::size_t warmup, std::uint64_t seed);

void cmd_train(const TrainOptions& opt, std::ostream& log);
void cmd_sample(const SampleOptions& opt, std::ostream& log);
std::vector<ResultRow> cmd_solve(const SolveOptions& opt, std::ostream& log);
std::vector<Aggregate> cmd_eval(const EvalOptions& opt, std::ostream& log);
std::vector<BenchEntry> cmd_bench(const BenchOptions& opt, std::ostream& log);
void cmd_synth(const SynthOptions& opt, std::ostream& log);

}  // namespace nflow::harness
