#include <chrono>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rpt/config.hpp"
#include "rpt/data.hpp"
#include "rpt/errors.hpp"
#include "rpt/model.hpp"
#include "rpt/train.hpp"

using namespace rpt;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void print_eval(const EvalReport& r) {
  std::printf("pixel  precision %.4f  recall %.4f  F %.4f\n", r.pixel_precision, r.pixel_recall, r.pixel_f);
  std::printf("box    precision %.4f  recall %.4f  F %.4f\n", r.box_precision, r.box_recall, r.box_f);
}

ModelConfig config_or_toy(const std::string& path) { return path.empty() ? ModelConfig::toy() : load_config(path); }

int run_train(const std::string& config_path, std::size_t steps, std::uint64_t seed, const std::string& out) {
  const ModelConfig config = config_or_toy(config_path);
  const auto scenes = generate_scenes(seed, config.train_scenes, config);
  TrainState state(config, seed);
  TrainOptions options;
  options.steps = steps;
  options.out_dir = out;
  options.checkpoint_every = config.checkpoint_every;
  const auto start = std::chrono::steady_clock::now();
  options.on_step = [&](std::size_t step, const LossReport& r) {
    if (step == 1 || step % 25 == 0 || step == steps) {
      std::printf("%s\t%.1fs\n", metrics_line(step, r).c_str(), seconds_since(start));
      std::fflush(stdout);
    }
  };
  train(state, scenes, options);
  print_eval(evaluate(state.model, scenes));
  std::printf("checkpoint %s/final.rpt\n", out.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, std::size_t count, std::uint64_t seed) {
  const TrainState state = load_checkpoint(ckpt);
  print_eval(evaluate(state.model, generate_scenes(seed, count, state.model.config())));
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& image_path, const std::string& heatmap) {
  const TrainState state = load_checkpoint(ckpt);
  const ModelConfig& c = state.model.config();
  const Tensor image = read_ppm(image_path);
  NoGradScope no_grad;
  const Tensor prob = probability_map(state.model, forward_full(state.model, image));
  write_pgm(heatmap, prob.values(), c.height, c.width);
  std::printf("wrote %zux%zu heatmap to %s\n", c.height, c.width, heatmap.c_str());
  return 0;
}

int run_gradcheck(bool full, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto report = gradient_check(ModelConfig::micro(), seed, full);
  const double elapsed = seconds_since(start);
  const bool ok = report.result.max_relative_error < 1e-3;
  std::printf("%s gradient check: %zu parameters, %zu coordinates\n", full ? "full" : "core", report.parameters,
              report.result.coordinates);
  std::printf("max relative error %.3e at %s[%zu] (analytic %.9g, numeric %.9g)\n", report.result.max_relative_error,
              report.worst_parameter.c_str(), report.result.worst_index, report.result.analytic,
              report.result.numeric);
  std::printf("%s in %.1fs\n", ok ? "PASS" : "FAIL", elapsed);
  return ok ? 0 : 1;
}

int run_ablate(const std::string& config_path, std::size_t steps, std::uint64_t seed) {
  const ModelConfig base = config_or_toy(config_path);
  std::printf("%-30s %10s %10s %10s %10s %8s\n", "row", "l_db", "l_bd", "l_mat", "l_sum", "pixel F");
  for (const auto& row : ablation_rows()) {
    ModelConfig config = base;
    config.flags = row.flags;
    const auto scenes = generate_scenes(seed, config.train_scenes, config);
    TrainState state(config, seed);
    TrainOptions options;
    options.steps = steps;
    const auto history = train(state, scenes, options);
    const LossReport& r = history.back();
    std::printf("%-30s %10.5f %10.5f %10.5f %10.5f %8.4f\n", row.name.c_str(), r.l_db, r.l_bd, r.l_mat, r.l_sum,
                evaluate(state.model, scenes).pixel_f);
    std::fflush(stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region prompt tuning text detector"};
  app.require_subcommand(1);

  std::string config_path, out = "run", ckpt, image, heatmap;
  std::size_t steps = 500, count = 8, ablate_steps = 200;
  std::uint64_t seed = 1;
  bool full = false;

  auto* train_cmd = app.add_subcommand("train", "Train on synthetic scenes");
  train_cmd->add_option("--config", config_path, "Config file (toy preset when omitted)");
  train_cmd->add_option("--steps", steps, "Optimizer steps");
  train_cmd->add_option("--seed", seed, "Seed for initialisation and scenes");
  train_cmd->add_option("--out", out, "Output directory");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on synthetic scenes");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--scenes", count, "Number of scenes");
  eval_cmd->add_option("--seed", seed, "Scene seed");

  auto* infer_cmd = app.add_subcommand("infer", "Write a probability heatmap for one image");
  infer_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  infer_cmd->add_option("--image", image, "Input pixmap (P6)")->required();
  infer_cmd->add_option("--heatmap", heatmap, "Output graymap (P5)")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check on the micro model");
  grad_cmd->add_flag("--full", full, "Check every trainable parameter");
  grad_cmd->add_option("--seed", seed, "Seed");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every ablation row and print final losses");
  ablate_cmd->add_option("--config", config_path, "Config file (toy preset when omitted)");
  ablate_cmd->add_option("--steps", ablate_steps, "Steps per row");
  ablate_cmd->add_option("--seed", seed, "Seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return run_train(config_path, steps, seed, out);
    if (*eval_cmd) return run_eval(ckpt, count, seed);
    if (*infer_cmd) return run_infer(ckpt, image, heatmap);
    if (*grad_cmd) return run_gradcheck(full, seed);
    if (*ablate_cmd) return run_ablate(config_path, ablate_steps, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
