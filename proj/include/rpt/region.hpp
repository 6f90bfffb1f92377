#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rpt/nn.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

// k x k tiling of a feature map; token a sits in cell (a / k, a % k).
struct RegionGrid {
  std::size_t k = 1;
  std::size_t token_h = 0;
  std::size_t token_w = 0;

  // Throws ConfigError when the map extents are not multiples of k.
  static RegionGrid of(const Shape& map_shape, std::size_t k);
  std::size_t count() const { return k * k; }
};

std::vector<Tensor> split_feature_map(const Tensor& map, std::size_t k);
Tensor concat_tokens(std::span<const Tensor> tokens, std::size_t k);

// Mean of each position token over its spatial extent, projected by ln1
// (C'' -> C'), one row per token.
Tensor derive_shared_position_embedding(const Tensor& position, std::size_t k, const LinearLayer& ln1);

// l1..l4, each a learnable scalar starting at zero.
struct InteractionGates {
  Tensor l1, l2, l3, l4;

  static InteractionGates zeros();
  void collect(ParameterList& out, const std::string& prefix) const;
};

// One cross-attention direction. Query and memory are mapped into the decoder
// width by frozen adapters; the decoder's change to the query is mapped back by
// a third frozen adapter. With every branch output of the decoder zeroed the
// increment is exactly zero.
struct InteractionBranch {
  LinearLayer query_in;
  LinearLayer memory_in;
  LinearLayer back;
  TransformerDecoder decoder;

  InteractionBranch() = default;
  InteractionBranch(std::size_t query_width, std::size_t memory_width, StackSpec spec, Initializer& init);

  // query [n_q x query_width], memory [n_m x memory_width] -> increment [n_q x query_width]
  Tensor increment(const Tensor& query, const Tensor& memory) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct InteractionResult {
  std::vector<Tensor> chars;   // one row each
  std::vector<Tensor> tokens;  // token_h x token_w x c each
};

// Before encoding: chars_with_pos [N2 x C'] and tokens_with_pos (N2 maps of
// token_h x token_w x C''). Both sides read the pre-update values. Returns the
// updated characters as rows and the updated tokens.
InteractionResult pre_encode_interaction(const Tensor& chars_with_pos, std::span<const Tensor> tokens_with_pos,
                                         const InteractionGates& gates, const InteractionBranch& dec1,
                                         const InteractionBranch& dec2);
InteractionResult pre_encode_interaction(const Tensor& chars, const Tensor& pos_chars, std::span<const Tensor> tokens,
                                         std::span<const Tensor> pos_tokens, const InteractionGates& gates,
                                         const InteractionBranch& dec1, const InteractionBranch& dec2);

// I_o split spatially into N2 tokens, T_p split into N2 rows.
InteractionResult split_embeddings(const Tensor& image_embedding, const Tensor& prompt_embedding, std::size_t k);

// After encoding, at width C, gated by l3 (characters) and l4 (tokens).
InteractionResult post_encode_interaction(std::span<const Tensor> chars, std::span<const Tensor> tokens,
                                          const InteractionGates& gates, const InteractionBranch& dec3,
                                          const InteractionBranch& dec4);

}  // namespace rpt
