#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rpt/data.hpp"
#include "rpt/model.hpp"

namespace rpt {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  RptModel model;
  std::vector<std::vector<double>> first_moment;   // one per trainable parameter
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  AdamOptions adam;

  TrainState(const ModelConfig& config, std::uint64_t seed);
};

// One full-batch step over all scenes: gradients of the mean loss, then Adam.
// Throws NonFiniteError naming the first non-finite tensor if the loss blows up.
LossReport train_step(TrainState& state, const std::vector<Scene>& scenes);

struct TrainOptions {
  std::size_t steps = 0;
  std::string out_dir;                 // metrics.tsv and checkpoints; empty for none
  std::size_t checkpoint_every = 0;    // 0 disables periodic checkpoints
  std::function<void(std::size_t, const LossReport&)> on_step;
};

std::vector<LossReport> train(TrainState& state, const std::vector<Scene>& scenes, const TrainOptions& options);

// `step l_db l_bd l_mat l_sum`, tab separated.
std::string metrics_line(std::size_t step, const LossReport& report);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// FNV-1a over the values of all frozen parameters.
std::uint64_t frozen_digest(const RptModel& model);

struct EvalReport {
  double pixel_precision = 0, pixel_recall = 0, pixel_f = 0;
  double box_precision = 0, box_recall = 0, box_f = 0;
};

struct Box {
  std::size_t x0, y0, x1, y1;  // inclusive pixel bounds
};

// Axis-aligned boxes of 4-connected foreground components.
std::vector<Box> component_boxes(std::span<const double> binary, std::size_t height, std::size_t width);
double box_iou(const Box& a, const Box& b);

// Metrics over binary predictions, counts pooled over all scenes.
EvalReport evaluate_masks(const std::vector<std::vector<double>>& predictions,
                          const std::vector<std::vector<double>>& masks, std::size_t height, std::size_t width);
EvalReport evaluate(const RptModel& model, const std::vector<Scene>& scenes, double threshold = 0.3);

// The incremental flag rows of the component ablation, first row all off.
struct AblationRow {
  std::string name;
  AblationFlags flags;
};
std::vector<AblationRow> ablation_rows();

// Central finite differences of the total loss against every trainable
// parameter (or, without `full`, only the prompts, gates and heads). Gates are
// opened and zero-initialised parameters filled with small noise first so that
// every path carries gradient. Runs in wide precision. The default step sits
// between cancellation noise (smaller) and truncation error (larger) for the
// sharp binarization sigmoid.
struct GradientCheckReport {
  GradCheckResult result;
  std::string worst_parameter;
  std::size_t parameters = 0;
};
GradientCheckReport gradient_check(const ModelConfig& config, std::uint64_t seed, bool full, double eps = 1e-5);

}  // namespace rpt
