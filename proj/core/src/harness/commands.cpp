#include "nflow/harness/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "nflow/checkpoint.hpp"
#include "nflow/harness/ingest.hpp"
#include "nflow/harness/synthetic.hpp"
#include "nflow/measurement.hpp"
#include "nflow/metrics.hpp"
#include "nflow/random.hpp"
#include "nflow/solver.hpp"
#include "nflow/trainer.hpp"

namespace nflow::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMeasureStream = 0x6d65617375726501ull;

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

}  // namespace

std::vector<double> parse_sigmas(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    const auto parts = split_list(text, ':');
    if (parts.size() != 3) throw Error("sigmas: expected start:stop:step, got '" + text + "'");
    const double a = parse_double(parts[0]);
    const double b = parse_double(parts[1]);
    const double step = parse_double(parts[2]);
    if (!(step > 0) || b < a) throw Error("sigmas: need step > 0 and stop >= start in '" + text + "'");
    const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9)) + 1;
    for (std::size_t k = 0; k < n; ++k) out.push_back(a + static_cast<double>(k) * step);
  } else {
    for (const auto& p : split_list(text, ',')) out.push_back(parse_double(p));
  }
  if (out.empty()) throw Error("sigmas: empty list");
  for (double s : out)
    if (!(s >= 0)) throw DomainError("sigmas: negative sigma in '" + text + "'");
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> parse_double_at(const std::string& text, const FlowConfig& config) {
  if (text == "auto") return small_scale_indices(config);
  if (text == "none" || text.empty()) return {};
  std::vector<std::size_t> out;
  for (const auto& p : split_list(text, ',')) {
    if (p.empty() || p.find_first_not_of("0123456789") != std::string::npos) {
      throw Error("double-at: expected scale indices, got '" + text + "'");
    }
    const std::size_t s = std::stoul(p);
    if (s >= config.num_scales) {
      throw Error("double-at: scale " + p + " out of range for " + std::to_string(config.num_scales) + " scales");
    }
    out.push_back(s);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Image8 sample_grid(const FlowModel<float>& model, std::vector<double> sigmas, std::size_t count, std::uint64_t seed) {
  std::sort(sigmas.begin(), sigmas.end());
  const FlowConfig& cfg = model.config();
  Image8 grid = make_image(cfg.channels, sigmas.size() * cfg.height, count * cfg.width);
  for (std::size_t r = 0; r < sigmas.size(); ++r) {
    const Tensor<float> x = model.sample(static_cast<float>(sigmas[r]), count, derive_seed(seed, r));
    const std::size_t per = shape_volume(cfg.image_shape());
    for (std::size_t c = 0; c < count; ++c) {
      Tensor<float> one(cfg.image_shape(), std::vector<float>(x.ptr() + c * per, x.ptr() + (c + 1) * per));
      paste(grid, to_image8(one), r * cfg.height, c * cfg.width);
    }
  }
  return grid;
}

TimingStats time_inverse(const FlowModel<float>& model, std::size_t batch, std::size_t runs, std::size_t warmup,
                         std::uint64_t seed) {
  if (runs == 0) throw DomainError("bench: runs must be positive");
  if (batch == 0) throw DomainError("bench: batch must be positive");
  const LatentState<float> z = model.sample_latent(1.0f, batch, seed);
  for (std::size_t i = 0; i < warmup; ++i) (void)model.inverse(z);
  TimingStats st;
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = model.inverse(z);
    const auto t1 = std::chrono::steady_clock::now();
    if (!std::isfinite(out.first[0])) throw Error("bench: non-finite output");
    st.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  const double n = static_cast<double>(runs);
  st.mean_ms = std::accumulate(st.samples_ms.begin(), st.samples_ms.end(), 0.0) / n;
  double var = 0;
  for (double s : st.samples_ms) var += (s - st.mean_ms) * (s - st.mean_ms);
  st.std_ms = runs > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  return st;
}

std::vector<BenchEntry> bench_models(const FlowModel<float>& a, const FlowModel<float>& b, std::size_t batch,
                                     std::size_t runs, std::size_t warmup, std::uint64_t seed) {
  if (a.num_flow_steps() != b.num_flow_steps()) {
    throw Error("bench: variants have " + std::to_string(a.num_flow_steps()) + " and " +
                std::to_string(b.num_flow_steps()) + " flow steps; they must match");
  }
  if (runs == 0) throw DomainError("bench: runs must be positive");
  std::vector<BenchEntry> out;
  const FlowModel<float>* models[2] = {&a, &b};
  const char* labels[2] = {"a", "b"};
  for (int i = 0; i < 2; ++i) {
    BenchEntry e;
    e.label = labels[i];
    e.permutation = to_string(models[i]->config().permutation);
    e.steps = models[i]->num_flow_steps();
    e.stats = time_inverse(*models[i], batch, runs, warmup, seed);
    out.push_back(std::move(e));
  }
  return out;
}

void cmd_train(const TrainOptions& opt, std::ostream& log) {
  FlowConfig cfg;
  cfg.channels = opt.channels;
  cfg.height = opt.height;
  cfg.width = opt.width;
  cfg.num_scales = opt.scales;
  cfg.steps_per_scale = opt.steps;
  cfg.hidden_channels = opt.hidden;
  cfg.permutation = permutation_from_string(opt.perm);
  cfg.double_steps_at = parse_double_at(opt.double_at, cfg);

  IngestResult data = ingest(opt.data_dir, cfg.channels, cfg.height, cfg.width, opt.limit, &log);
  if (data.images.count() == 0) throw Error("train: no readable images in " + opt.data_dir);
  log << "train: " << data.images.count() << " images (" << data.skipped << " skipped)\n";

  FlowModel<float> model = FlowModel<float>::build(cfg, opt.seed);
  log << "train: " << model.num_flow_steps() << " flow steps, " << model.parameter_count() << " parameters\n";

  TrainConfig tc;
  tc.learning_rate = opt.lr;
  tc.batch_size = opt.batch;
  tc.epochs = opt.epochs;
  tc.max_steps = opt.max_steps;
  tc.clip_norm = opt.clip;
  tc.seed = opt.seed;

  const std::string loss_path = opt.loss_csv.empty() ? opt.out + ".loss.csv" : opt.loss_csv;
  ensure_parent(loss_path);
  std::ofstream loss(loss_path, std::ios::binary | std::ios::trunc);
  if (!loss) throw Error("cannot write " + loss_path);
  loss << "step,epoch,loss,bits_per_dim\n";
  const TrainResult res = train(model, data.images, tc, [&](const TrainStep& s) {
    loss << s.step << ',' << s.epoch << ',' << format_double(s.loss) << ',' << format_double(s.bits_per_dim) << "\n";
    if (s.step % 100 == 0) log << "step " << s.step << " epoch " << s.epoch << " bpd " << s.bits_per_dim << "\n";
  });
  ensure_parent(opt.out);
  save_checkpoint(model, opt.out, res.curve.size());
  log << "train: wrote " << opt.out << " after " << res.curve.size() << " steps";
  if (!res.curve.empty()) log << ", final bpd " << res.curve.back().bits_per_dim;
  log << "\n";
}

void cmd_sample(const SampleOptions& opt, std::ostream& log) {
  if (opt.count == 0) throw DomainError("sample: count must be positive");
  LoadedCheckpoint<float> ck = load_checkpoint<float>(opt.ckpt);
  const std::vector<double> sigmas = parse_sigmas(opt.sigmas);
  const Image8 grid = sample_grid(ck.model, sigmas, opt.count, opt.seed);
  ensure_parent(opt.out);
  write_png(opt.out, grid);
  log << "sample: " << sigmas.size() << "x" << opt.count << " grid (" << grid.width << "x" << grid.height
      << " px) -> " << opt.out << "\n";
}

namespace {

Image8 measurement_view(const MeasurementOperator& op, const Tensor<float>& y, std::size_t channels) {
  const Shape s = op.output_shape();
  if (s.size() != 3) return make_image(channels, op.input_shape()[1], op.input_shape()[2]);
  Image8 img = convert_channels(to_image8(y), channels);
  const std::size_t H = op.input_shape()[1], W = op.input_shape()[2];
  if (img.height == H && img.width == W) return img;
  Image8 canvas = make_image(channels, H, W);
  paste(canvas, img, (H - img.height) / 2, (W - img.width) / 2);
  return canvas;
}

Tensor<float> row_of(const Tensor<float>& batch, std::size_t i) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t per = shape_volume(s);
  return Tensor<float>(s, std::vector<float>(batch.ptr() + i * per, batch.ptr() + (i + 1) * per));
}

double safe_ssim(const Tensor<float>& a, const Tensor<float>& b) {
  try {
    return ssim(a, b);
  } catch (const ShapeError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

std::vector<ResultRow> cmd_solve(const SolveOptions& opt, std::ostream& log) {
  if (opt.count == 0) throw DomainError("solve: count must be positive");
  const Task task = task_from_string(opt.task);
  const Method method = method_from_string(opt.method);
  LoadedCheckpoint<float> ck = load_checkpoint<float>(opt.ckpt);
  const FlowModel<float>& model = ck.model;
  const FlowConfig& cfg = model.config();

  MeasurementOperator op = MeasurementOperator::for_task(task, cfg.image_shape(), opt.noise_std);
  if (task == Task::denoise) {
    NoiseMode mode = NoiseMode::per_entry;
    if (opt.noise_mode == "total-norm") mode = NoiseMode::total_norm;
    else if (opt.noise_mode != "per-entry") throw Error("solve: unknown noise mode '" + opt.noise_mode + "'");
    op = MeasurementOperator::denoise(cfg.image_shape(), opt.noise_std, mode);
  } else if (task == Task::deblur) {
    BlurMode mode = BlurMode::valid;
    if (opt.blur_mode == "reflect") mode = BlurMode::reflect;
    else if (opt.blur_mode != "valid") throw Error("solve: unknown blur mode '" + opt.blur_mode + "'");
    op = MeasurementOperator::blur3x3(cfg.image_shape(), mode);
  } else if (task == Task::inpaint) {
    op = MeasurementOperator::inpaint_center(cfg.image_shape(), opt.mask_side);
  }

  SolveConfig sc = SolveConfig::defaults(method, task);
  if (opt.alpha) sc.alpha = *opt.alpha;
  if (opt.gamma) sc.gamma = *opt.gamma;
  if (opt.beta) sc.beta = *opt.beta;
  if (opt.lr) sc.learning_rate = *opt.lr;
  sc.noise_sigma = opt.noise_sigma ? *opt.noise_sigma : op.noise_std_per_entry();
  if (sc.noise_sigma <= 0) sc.noise_sigma = 0.1;
  sc.iterations = opt.iters;
  sc.batch_size = opt.batch;
  sc.threads = opt.threads;
  sc.seed = opt.seed;
  sc.validate();
  if (method == Method::map && task != Task::denoise) throw Error("solve: method map supports denoise only");

  IngestResult data = ingest(opt.data_dir, cfg.channels, cfg.height, cfg.width, opt.count, &log);
  const std::size_t n = data.images.count();
  if (n == 0) throw Error("solve: no readable images in " + opt.data_dir);
  log << "solve: " << opt.task << "/" << opt.method << " on " << n << " images\n";

  const Tensor<float> x_star = to_unit_range<float>(data.images.pixels, data.images.shape);
  Shape y_shape{n};
  for (std::size_t d : op.output_shape()) y_shape.push_back(d);
  Tensor<float> y(y_shape);
  const std::size_t out_per = op.output_size();
  const std::uint64_t measure_seed = derive_seed(opt.seed, kMeasureStream);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<float> yi = op.measure(row_of(x_star, i), derive_seed(measure_seed, i));
    std::copy(yi.ptr(), yi.ptr() + out_per, y.ptr() + i * out_per);
  }

  fs::create_directories(opt.out);
  if (opt.strips) fs::create_directories(fs::path(opt.out) / "strips");
  std::ofstream trace((fs::path(opt.out) / "trace.csv").string(), std::ios::binary | std::ios::trunc);
  trace << "batch,iteration,data_loss,reg_loss,objective\n";

  std::vector<ResultRow> rows(n);
  for (std::size_t b0 = 0; b0 < n; b0 += sc.batch_size) {
    const std::size_t b1 = std::min(n, b0 + sc.batch_size);
    std::vector<std::size_t> idx(b1 - b0);
    std::iota(idx.begin(), idx.end(), b0);
    const Tensor<float> yb = take_rows(y, idx);

    // Per-image results do not depend on grouping, so a failed batch is
    // retried image by image to isolate the failure.
    std::vector<std::optional<SolveResult<float>>> parts;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    try {
      parts.emplace_back(solve(model, op, yb, sc, b0));
      spans.emplace_back(b0, b1);
    } catch (const Error& e) {
      log << "solve: batch at image " << b0 << " failed (" << e.what() << "), retrying per image\n";
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t one[1] = {i};
        try {
          parts.emplace_back(solve(model, op, take_rows(y, one), sc, i));
        } catch (const Error& e2) {
          log << "solve: image " << data.images.ids[i] << " aborted: " << e2.what() << "\n";
          parts.emplace_back(std::nullopt);
        }
        spans.emplace_back(i, i + 1);
      }
    }

    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto [s0, s1] = spans[p];
      if (parts[p]) {
        for (std::size_t it = 0; it < parts[p]->trace.size(); ++it) {
          const TracePoint& tp = parts[p]->trace[it];
          trace << s0 << ',' << it << ',' << format_double(tp.data_loss) << ',' << format_double(tp.reg_loss) << ','
                << format_double(tp.objective) << "\n";
        }
      }
      for (std::size_t i = s0; i < s1; ++i) {
        ResultRow& row = rows[i];
        row.task = opt.task;
        row.method = opt.method;
        row.image_id = data.images.ids[i];
        row.seed = opt.seed;
        const Tensor<float> target = row_of(x_star, i);
        if (!parts[p]) {
          row.psnr = row.ssim = row.data_loss = row.reg_loss = std::numeric_limits<double>::quiet_NaN();
          continue;
        }
        const SolveResult<float>& r = *parts[p];
        const std::size_t k = i - s0;
        const Tensor<float> x_hat = row_of(r.x_hat, k);
        row.psnr = psnr(target, x_hat);
        row.ssim = safe_ssim(target, x_hat);
        row.data_loss = r.data_loss[k];
        row.reg_loss = r.reg_loss[k];
        row.wall_time_ms = r.wall_time_ms / static_cast<double>(s1 - s0);
        if (opt.strips) {
          Image8 strip = make_image(cfg.channels, cfg.height, 3 * cfg.width);
          paste(strip, to_image8(target), 0, 0);
          paste(strip, measurement_view(op, row_of(y, i), cfg.channels), 0, cfg.width);
          paste(strip, to_image8(x_hat), 0, 2 * cfg.width);
          write_png((fs::path(opt.out) / "strips" / (row.image_id + ".png")).string(), strip);
        }
      }
    }
  }

  write_results_csv((fs::path(opt.out) / "results.csv").string(), rows);
  write_timing_csv((fs::path(opt.out) / "timing.csv").string(), rows);
  double mean = 0;
  std::size_t used = 0;
  for (const ResultRow& r : rows)
    if (std::isfinite(r.psnr)) {
      mean += r.psnr;
      ++used;
    }
  if (used) log << "solve: mean PSNR " << mean / static_cast<double>(used) << " dB over " << used << " images\n";
  return rows;
}

std::vector<Aggregate> cmd_eval(const EvalOptions& opt, std::ostream& log) {
  std::vector<std::string> files;
  if (fs::is_directory(opt.in)) {
    for (const auto& e : fs::recursive_directory_iterator(opt.in)) {
      if (e.is_regular_file() && e.path().filename() == "results.csv") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(opt.in);
  }
  if (files.empty()) throw Error("eval: no results.csv under " + opt.in);
  std::vector<ResultRow> rows;
  for (const auto& f : files) {
    auto part = read_results_csv(f);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::vector<Aggregate> table = aggregate(rows);
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-8s %6s %9s %10s %10s\n", "task", "method", "rows", "excluded", "psnr",
                "ssim");
  log << line;
  for (const Aggregate& a : table) {
    std::snprintf(line, sizeof line, "%-10s %-8s %6zu %9zu %10.4f %10.4f\n", a.task.c_str(), a.method.c_str(),
                  a.rows, a.excluded, a.mean_psnr, a.mean_ssim);
    log << line;
    if (a.excluded) log << "  note: " << a.excluded << " row(s) with infinite or NaN PSNR left out of the means\n";
  }
  if (!opt.out.empty()) {
    ensure_parent(opt.out);
    write_aggregate_csv(opt.out, table);
  }
  return table;
}

std::vector<BenchEntry> cmd_bench(const BenchOptions& opt, std::ostream& log) {
  if (opt.runs == 0) throw DomainError("bench: runs must be positive");
  LoadedCheckpoint<float> a = load_checkpoint<float>(opt.ckpt_a);
  LoadedCheckpoint<float> b = load_checkpoint<float>(opt.ckpt_b);
  std::vector<BenchEntry> entries = bench_models(a.model, b.model, opt.batch, opt.runs, opt.warmup, opt.seed);
  entries[0].label = opt.ckpt_a;
  entries[1].label = opt.ckpt_b;
  char line[256];
  for (const BenchEntry& e : entries) {
    std::snprintf(line, sizeof line, "%-10s %2zu steps  %.3f +- %.3f ms  (%s)\n", e.permutation.c_str(), e.steps,
                  e.stats.mean_ms, e.stats.std_ms, e.label.c_str());
    log << line;
  }
  if (!opt.out.empty()) {
    ensure_parent(opt.out);
    std::ofstream out(opt.out, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + opt.out);
    out << "checkpoint,permutation,steps,batch,runs,mean_ms,std_ms\n";
    for (const BenchEntry& e : entries) {
      out << e.label << ',' << e.permutation << ',' << e.steps << ',' << opt.batch << ',' << opt.runs << ','
          << format_double(e.stats.mean_ms) << ',' << format_double(e.stats.std_ms) << "\n";
    }
  }
  return entries;
}

void cmd_synth(const SynthOptions& opt, std::ostream& log) {
  if (opt.channels != 1 && opt.channels != 3) throw Error("synth: channels must be 1 or 3");
  const ByteImages imgs = synthetic_shapes(opt.count, opt.channels, opt.size, opt.size, opt.seed, pattern_from_string(opt.pattern));
  fs::create_directories(opt.out);
  for (std::size_t i = 0; i < imgs.count(); ++i) {
    Image8 img = make_image(opt.channels, opt.size, opt.size);
    const auto px = imgs.sample(i);
    std::copy(px.begin(), px.end(), img.pixels.begin());
    write_png((fs::path(opt.out) / (imgs.ids[i] + ".png")).string(), img);
  }
  log << "synth: wrote " << imgs.count() << " images to " << opt.out << "\n";
}

}  // namespace nflow::harness
