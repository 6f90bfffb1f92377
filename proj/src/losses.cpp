#include "rpt/losses.hpp"

#include <algorithm>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

Tensor bidirectional_distance_loss(const Tensor& text_input, const Tensor& region_prompt) {
  if (text_input.rank() != 2 || region_prompt.rank() != 2 || text_input.extent(1) != region_prompt.extent(1)) {
    throw DimensionError("bidirectional_distance_loss: " + to_string(text_input.shape()) + " vs " +
                         to_string(region_prompt.shape()));
  }
  const Tensor sim = cosine_similarity(mean_over_axes(text_input, {0}), mean_over_axes(region_prompt, {0}));
  return add_scalar(scale(sim, -1.0), 1.0);
}

double squash_offset(const AblationFlags& flags, double lambda_mix) {
  double top = 1.0;
  if (flags.region_prompt && flags.feature_enhancement) top += 1.0;
  if (flags.region_prompt && flags.feature_fusion) top += lambda_mix;
  return top / 2.0;
}

Tensor squash(const Tensor& score, double offset) { return sigmoid(add_scalar(score, -offset)); }

Tensor matching_loss(const Tensor& probability, std::span<const double> mask) {
  return binary_cross_entropy(probability, mask);
}

std::vector<double> boundary_band(std::span<const double> mask, std::size_t height, std::size_t width,
                                  std::size_t radius) {
  if (mask.size() != height * width) {
    throw DimensionError("boundary_band: mask of " + std::to_string(mask.size()) + " pixels for " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<double> band(mask.size(), 0.0);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  for (std::ptrdiff_t i = 0; i < h; ++i) {
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      const double own = mask[static_cast<std::size_t>(i * w + j)];
      bool edge = false;
      for (std::ptrdiff_t di = -r; di <= r && !edge; ++di) {
        for (std::ptrdiff_t dj = -r; dj <= r && !edge; ++dj) {
          const std::ptrdiff_t y = i + di, x = j + dj;
          if (y < 0 || x < 0 || y >= h || x >= w) continue;
          edge = mask[static_cast<std::size_t>(y * w + x)] != own;
        }
      }
      band[static_cast<std::size_t>(i * w + j)] = edge ? 1.0 : 0.0;
    }
  }
  return band;
}

std::vector<double> threshold_target(std::span<const double> mask, std::size_t height, std::size_t width) {
  auto band = boundary_band(mask, height, width);
  for (auto& v : band) v = 0.3 + 0.4 * v;
  return band;
}

DBLiteHead::DBLiteHead(double k_db, double offset)
    : prob_weight(Tensor({3, 3, 1, 1}, {0, 0, 0, 0, 4.0, 0, 0, 0, 0}, true)),
      prob_bias(Tensor({1}, {-4.0 * offset}, true)),
      thresh_weight(Tensor::zeros({3, 3, 1, 1}, true)),
      thresh_bias(Tensor::zeros({1}, true)),
      k(k_db) {
  if (!(k > 0.0)) throw ConfigError("db head: amplification k must be positive");
}

DBMaps DBLiteHead::forward(const Tensor& score) const {
  if (score.rank() != 3 || score.extent(2) != 1) {
    throw DimensionError("db head: expected an H x W x 1 score map, got " + to_string(score.shape()));
  }
  DBMaps m;
  m.probability = sigmoid(conv2d(score, prob_weight, prob_bias, 1, 1));
  m.threshold = sigmoid(conv2d(score, thresh_weight, thresh_bias, 1, 1));
  m.binary = sigmoid(scale(sub(m.probability, m.threshold), k));
  return m;
}

void DBLiteHead::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".prob.weight", prob_weight, true});
  out.push_back({prefix + ".prob.bias", prob_bias, true});
  out.push_back({prefix + ".thresh.weight", thresh_weight, true});
  out.push_back({prefix + ".thresh.bias", thresh_bias, true});
}

Tensor db_lite_loss(const DBMaps& maps, std::span<const double> mask, std::span<const double> thresh_target) {
  return add(add(binary_cross_entropy(maps.probability, mask), l1_loss(maps.threshold, thresh_target)),
             binary_cross_entropy(maps.binary, mask));
}

Tensor db_lite_loss(const DBLiteHead& head, const Tensor& score, std::span<const double> mask) {
  const DBMaps maps = head.forward(score);
  if (mask.size() != score.size()) {
    throw DimensionError("db_lite_loss: mask of " + std::to_string(mask.size()) + " pixels for " +
                         to_string(score.shape()));
  }
  return db_lite_loss(maps, mask, threshold_target(mask, score.extent(0), score.extent(1)));
}

LossReport total_loss(double l_db, double l_bd, double l_mat, double lambda_bd, double lambda_mat) {
  return {l_db, l_bd, l_mat, l_db + lambda_bd * l_bd + lambda_mat * l_mat, lambda_bd, lambda_mat};
}

Tensor total_loss(const Tensor& l_db, const Tensor& l_bd, const Tensor& l_mat, double lambda_bd, double lambda_mat) {
  Tensor sum = l_db;
  if (l_bd.defined()) sum = add(sum, scale(l_bd, lambda_bd));
  return add(sum, scale(l_mat, lambda_mat));
}

}  // namespace rpt
