#include <exception>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "nflow/harness/commands.hpp"

using namespace nflow::harness;

namespace {

// CLI11 has no direct binding for std::optional<double> in older releases.
void optional_double(CLI::App* app, const std::string& name, std::optional<double>& target, const std::string& help) {
  app->add_option_function<double>(name, [&target](double v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normalizing-flow training, sampling and latent-space restoration"};
  app.require_subcommand(1);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "maximum-likelihood training on a directory of images");
  t->add_option("--data", train.data_dir, "image directory")->required();
  t->add_option("--out", train.out, "checkpoint path")->required();
  t->add_option("--loss-csv", train.loss_csv, "loss curve CSV (default <out>.loss.csv)");
  t->add_option("--epochs", train.epochs)->capture_default_str();
  t->add_option("--batch", train.batch)->capture_default_str();
  t->add_option("--lr", train.lr)->capture_default_str();
  t->add_option("--seed", train.seed)->capture_default_str();
  t->add_option("--scales", train.scales)->capture_default_str();
  t->add_option("--steps", train.steps, "flow steps per scale")->capture_default_str();
  t->add_option("--hidden", train.hidden, "hidden channels of each coupling network")->capture_default_str();
  t->add_option("--perm", train.perm, "coupling | invconv")->check(CLI::IsMember({"coupling", "invconv"}))
      ->capture_default_str();
  t->add_option("--double-at", train.double_at, "auto | none | comma-separated scale indices")
      ->capture_default_str();
  t->add_option("--channels", train.channels)->capture_default_str();
  t->add_option("--height", train.height)->capture_default_str();
  t->add_option("--width", train.width)->capture_default_str();
  t->add_option("--max-steps", train.max_steps, "stop after this many updates (0 = no limit)");
  t->add_option("--clip", train.clip, "global gradient-norm clip (0 disables)")->capture_default_str();
  t->add_option("--limit", train.limit, "use at most this many images (0 = all)");

  SampleOptions sample;
  auto* s = app.add_subcommand("sample", "sigma-sweep sample grid");
  s->add_option("--ckpt", sample.ckpt)->required();
  s->add_option("--sigmas", sample.sigmas, "start:stop:step or comma list")->capture_default_str();
  s->add_option("--count", sample.count)->capture_default_str();
  s->add_option("--out", sample.out, "PNG path")->required();
  s->add_option("--seed", sample.seed)->capture_default_str();

  SolveOptions solve;
  auto* v = app.add_subcommand("solve", "restore measured images by latent-space optimization");
  v->add_option("--ckpt", solve.ckpt)->required();
  v->add_option("--data", solve.data_dir, "directory of target images")->required();
  v->add_option("--task", solve.task)->check(CLI::IsMember({"denoise", "deblur", "inpaint", "colorize"}))
      ->capture_default_str();
  v->add_option("--method", solve.method)->check(CLI::IsMember({"ours", "csgm", "glowip", "map"}))
      ->capture_default_str();
  optional_double(v, "--alpha", solve.alpha, "likelihood weight (default per task)");
  optional_double(v, "--gamma", solve.gamma, "latent-norm weight (default per task and method)");
  optional_double(v, "--beta", solve.beta, "density weight for map");
  optional_double(v, "--lr", solve.lr, "Adam learning rate (default per method)");
  optional_double(v, "--noise-sigma", solve.noise_sigma, "noise level assumed by map");
  v->add_option("--iters", solve.iters)->capture_default_str();
  v->add_option("--count", solve.count)->capture_default_str();
  v->add_option("--out", solve.out, "output directory")->required();
  v->add_option("--seed", solve.seed)->capture_default_str();
  v->add_option("--batch", solve.batch)->capture_default_str();
  v->add_option("--threads", solve.threads, "parallel image groups")->capture_default_str();
  v->add_option("--noise-std", solve.noise_std)->capture_default_str();
  v->add_option("--noise-mode", solve.noise_mode)->check(CLI::IsMember({"per-entry", "total-norm"}))
      ->capture_default_str();
  v->add_option("--blur-mode", solve.blur_mode)->check(CLI::IsMember({"valid", "reflect"}))->capture_default_str();
  v->add_option("--mask-side", solve.mask_side, "inpainting square side (0 = H/2)");
  v->add_flag("!--no-strips", solve.strips, "skip the per-image comparison PNGs");

  EvalOptions eval;
  auto* e = app.add_subcommand("eval", "aggregate results.csv files");
  e->add_option("--in", eval.in, "results.csv or a directory containing them")->required();
  e->add_option("--out", eval.out, "aggregate CSV path");

  BenchOptions bench;
  auto* b = app.add_subcommand("bench", "time the inverse pass of two checkpoints");
  b->add_option("--ckpt-a", bench.ckpt_a)->required();
  b->add_option("--ckpt-b", bench.ckpt_b)->required();
  b->add_option("--runs", bench.runs)->capture_default_str();
  b->add_option("--batch", bench.batch)->capture_default_str();
  b->add_option("--warmup", bench.warmup)->capture_default_str();
  b->add_option("--seed", bench.seed)->capture_default_str();
  b->add_option("--out", bench.out, "timing CSV path");

  SynthOptions synth;
  auto* y = app.add_subcommand("synth", "write a toy dataset of rectangle or blob images");
  y->add_option("--out", synth.out)->required();
  y->add_option("--count", synth.count)->capture_default_str();
  y->add_option("--channels", synth.channels)->capture_default_str();
  y->add_option("--size", synth.size)->capture_default_str();
  y->add_option("--seed", synth.seed)->capture_default_str();
  y->add_option("--pattern", synth.pattern)->check(CLI::IsMember({"rectangles", "blobs"}))->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*t) cmd_train(train, std::cout);
    if (*s) cmd_sample(sample, std::cout);
    if (*v) cmd_solve(solve, std::cout);
    if (*e) cmd_eval(eval, std::cout);
    if (*b) cmd_bench(bench, std::cout);
    if (*y) cmd_synth(synth, std::cout);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
