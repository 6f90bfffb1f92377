#pragma once

#include <span>
#include <string>

#include "rpt/config.hpp"
#include "rpt/nn.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

struct ScoreMap {
  enum class Resolution { Feature, Pixel };

  Tensor grid;  // h x w x 1
  Resolution resolution = Resolution::Feature;
};

// S_glo[i,j] = sigmoid(<t, v_ij> / tau) with t the last row of T_o and both
// sides L2-normalised.
ScoreMap global_score_map(const Tensor& text_embedding, const Tensor& image_embedding, double tau);

// Per region a: sigmoid(<t_pa, i_oa[i,j]> / tau), tiles assembled on the k x k grid.
ScoreMap region_score_map(std::span<const Tensor> chars, std::span<const Tensor> tokens, double tau);

// Decoder-mediated combination of the two maps. Every position's score is
// lifted to the decoder width by a frozen affine adapter; S_glo gives the query
// sequence, S_reg the memory. A trainable readout (zero at start) maps back to
// one channel, so S_FF starts at exactly zero.
struct FusionHead {
  LinearLayer lift_query;
  LinearLayer lift_memory;
  TransformerDecoder decoder;
  LinearLayer readout;

  FusionHead() = default;
  FusionHead(StackSpec spec, Initializer& init);

  Tensor forward(const Tensor& global, const Tensor& region) const;
  // Zero the decoder branches and the readout: S_FF becomes identically zero.
  void zero();
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct FusedScores {
  Tensor enhanced;  // S_FE
  Tensor fused;     // S_FF; undefined when fusion is off
  ScoreMap combined;
};

// S_FE = S_glo + S_reg (or S_glo alone without enhancement),
// S = S_FE + lambda_mix * S_FF (or S_FE alone without fusion).
FusedScores fuse_score_maps(const ScoreMap& global, const ScoreMap& region, double lambda_mix, const FusionHead& head,
                            bool use_fusion, bool use_enhancement = true);

ScoreMap upsample_to_pixels(const ScoreMap& map, std::size_t height, std::size_t width);

}  // namespace rpt
