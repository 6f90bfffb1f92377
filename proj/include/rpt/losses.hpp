#pragma once

#include <span>
#include <string>
#include <vector>

#include "rpt/config.hpp"
#include "rpt/nn.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

// 1 - cos(mean of T_i rows, mean of T_r rows).
Tensor bidirectional_distance_loss(const Tensor& text_input, const Tensor& region_prompt);

// Centre of the raw fused score range for the enabled terms:
// (1 + [enhancement] + [fusion] * lambda_mix) / 2.
double squash_offset(const AblationFlags& flags, double lambda_mix);
// sigmoid(S - offset): the fused map as a probability.
Tensor squash(const Tensor& score, double offset);

// Pixel-mean binary cross-entropy of a probability map against a binary mask.
Tensor matching_loss(const Tensor& probability, std::span<const double> mask);

// 1 on pixels with a differently labelled pixel within Chebyshev distance
// `radius` (a band on both sides of every mask edge), else 0.
std::vector<double> boundary_band(std::span<const double> mask, std::size_t height, std::size_t width,
                                  std::size_t radius = 2);
// Threshold-map target: 0.7 on the boundary band, 0.3 elsewhere.
std::vector<double> threshold_target(std::span<const double> mask, std::size_t height, std::size_t width);

struct DBMaps {
  Tensor probability;  // Pmap, H x W x 1
  Tensor threshold;    // Tmap
  Tensor binary;       // B = sigmoid(k (Pmap - Tmap))
};

// Two 3x3 single-channel convolutions over the raw pixel score map.
struct DBLiteHead {
  Tensor prob_weight, prob_bias;
  Tensor thresh_weight, thresh_bias;
  double k = 50.0;

  DBLiteHead() = default;
  // The probability branch starts as sigmoid(4 (S - offset)); the threshold branch at 0.5.
  DBLiteHead(double k, double offset);

  DBMaps forward(const Tensor& score) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

// BCE(P, Y) + L1(T, threshold target) + BCE(B, Y) for already computed maps.
Tensor db_lite_loss(const DBMaps& maps, std::span<const double> mask, std::span<const double> thresh_target);
Tensor db_lite_loss(const DBLiteHead& head, const Tensor& score, std::span<const double> mask);

struct LossReport {
  double l_db = 0.0;
  double l_bd = 0.0;
  double l_mat = 0.0;
  double l_sum = 0.0;
  double lambda_bd = 1.0;
  double lambda_mat = 1.0;
};

LossReport total_loss(double l_db, double l_bd, double l_mat, double lambda_bd, double lambda_mat);
// Differentiable form; l_bd may be undefined (treated as zero).
Tensor total_loss(const Tensor& l_db, const Tensor& l_bd, const Tensor& l_mat, double lambda_bd, double lambda_mat);

}  // namespace rpt
