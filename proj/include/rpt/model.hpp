#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "rpt/config.hpp"
#include "rpt/encoders.hpp"
#include "rpt/losses.hpp"
#include "rpt/matching.hpp"
#include "rpt/nn.hpp"
#include "rpt/region.hpp"

namespace rpt {

// Every parameter of the detector. Frozen sets: vocabulary, text encoder,
// prompt encoder, width adapters and fusion lifts.
class RptModel {
 public:
  RptModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  // Stable order, unique names; frozen entries included.
  ParameterList parameters() const;

  Vocabulary vocab;
  TextEncoder text;
  PromptEncoder prompt;
  ImageBackbone backbone;
  AttentionPool pool;
  Tensor position;        // P, (H/d) x (W/d) x C''
  Tensor general_prompt;  // T_g, N1 x C'
  Tensor region_prompt;   // T_r, N2 x C'
  LinearLayer ln1;        // C'' -> C'
  InteractionGates gates;
  InteractionBranch dec1, dec2, dec3, dec4;
  FusionHead fusion;
  DBLiteHead head;

 private:
  ModelConfig config_;
};

struct ForwardResult {
  Tensor text_input;   // T_i
  Tensor text_output;  // T_o
  ScoreMap global;     // S_glo
  ScoreMap region;     // S_reg; undefined grid without the region prompt
  Tensor enhanced;     // S_FE
  Tensor fused;        // S_FF; undefined without fusion
  ScoreMap feature;    // S at feature resolution
  ScoreMap pixel;      // S at pixel resolution (raw, before squashing)
};

// Runs under the configured precision. Throws ConfigError before any compute
// when the configuration is invalid or the image extents disagree with it.
ForwardResult forward_full(const RptModel& model, const Tensor& image);

struct LossTerms {
  Tensor l_db, l_bd, l_mat, l_sum;  // l_bd undefined when unused
  LossReport report;
};

LossTerms compute_loss(const RptModel& model, const ForwardResult& forward, std::span<const double> mask);

// The map thresholded for evaluation and exported as a heatmap: the head's
// probability map over the pixel score map.
Tensor probability_map(const RptModel& model, const ForwardResult& forward);

}  // namespace rpt
