#include "rpt/region.hpp"

#include <cmath>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

namespace {

double fan_in_std(std::size_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); }

// token_h x token_w x c -> (token_h * token_w) x c, row-major over positions.
Tensor flatten_token(const Tensor& token) {
  return reshape(token, {token.extent(0) * token.extent(1), token.extent(2)});
}

void require_aligned(std::size_t chars, std::size_t tokens, const char* where) {
  if (chars != tokens || chars == 0) {
    throw ContractError(std::string(where) + ": " + std::to_string(chars) + " characters vs " +
                        std::to_string(tokens) + " tokens");
  }
}

}  // namespace

RegionGrid RegionGrid::of(const Shape& map_shape, std::size_t k) {
  if (map_shape.size() != 3) throw DimensionError("region grid: expected a h x w x c map, got " + to_string(map_shape));
  if (k == 0 || map_shape[0] % k != 0 || map_shape[1] % k != 0) {
    throw ConfigError("region grid: map " + to_string(map_shape) + " cannot be tiled by k = " + std::to_string(k));
  }
  return {k, map_shape[0] / k, map_shape[1] / k};
}

std::vector<Tensor> split_feature_map(const Tensor& map, std::size_t k) {
  const RegionGrid g = RegionGrid::of(map.shape(), k);
  std::vector<Tensor> tokens;
  tokens.reserve(g.count());
  for (std::size_t a = 0; a < g.count(); ++a) {
    tokens.push_back(crop(map, (a / k) * g.token_h, (a % k) * g.token_w, g.token_h, g.token_w));
  }
  return tokens;
}

Tensor concat_tokens(std::span<const Tensor> tokens, std::size_t k) { return assemble_grid(tokens, k); }

Tensor derive_shared_position_embedding(const Tensor& position, std::size_t k, const LinearLayer& ln1) {
  const auto tokens = split_feature_map(position, k);
  std::vector<Tensor> means;
  means.reserve(tokens.size());
  for (const auto& t : tokens) means.push_back(reshape(mean_over_axes(t, {0, 1}), {1, t.extent(2)}));
  return ln1.forward(concat_rows(means));
}

InteractionGates InteractionGates::zeros() {
  return {Tensor::scalar(0.0, true), Tensor::scalar(0.0, true), Tensor::scalar(0.0, true), Tensor::scalar(0.0, true)};
}

void InteractionGates::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".l1", l1, true});
  out.push_back({prefix + ".l2", l2, true});
  out.push_back({prefix + ".l3", l3, true});
  out.push_back({prefix + ".l4", l4, true});
}

InteractionBranch::InteractionBranch(std::size_t query_width, std::size_t memory_width, StackSpec spec,
                                     Initializer& init) {
  query_in = LinearLayer::normal(query_width, spec.width, fan_in_std(query_width), init, false);
  memory_in = LinearLayer::normal(memory_width, spec.width, fan_in_std(memory_width), init, false);
  back = LinearLayer::normal(spec.width, query_width, fan_in_std(spec.width), init, false);
  // Branch outputs start random rather than zero: the increment form below is
  // already zero whenever they are, and zero gates keep the start exact.
  decoder = TransformerDecoder(spec, init, true, false);
}

Tensor InteractionBranch::increment(const Tensor& query, const Tensor& memory) const {
  Tensor q = query_in.forward(query);
  Tensor d = decoder.forward(q, memory_in.forward(memory));
  return back.forward(sub(d, q));
}

void InteractionBranch::collect(ParameterList& out, const std::string& prefix) const {
  query_in.collect(out, prefix + ".query_in");
  memory_in.collect(out, prefix + ".memory_in");
  back.collect(out, prefix + ".back");
  decoder.collect(out, prefix + ".decoder");
}

InteractionResult pre_encode_interaction(const Tensor& chars_with_pos, std::span<const Tensor> tokens_with_pos,
                                         const InteractionGates& gates, const InteractionBranch& dec1,
                                         const InteractionBranch& dec2) {
  if (chars_with_pos.rank() != 2) {
    throw DimensionError("pre_encode_interaction: characters must be N2 x C', got " +
                         to_string(chars_with_pos.shape()));
  }
  require_aligned(chars_with_pos.extent(0), tokens_with_pos.size(), "pre_encode_interaction");
  InteractionResult out;
  for (std::size_t a = 0; a < tokens_with_pos.size(); ++a) {
    const Tensor c = slice_rows(chars_with_pos, a, 1);
    const Tensor& token = tokens_with_pos[a];
    const Tensor flat = flatten_token(token);
    out.chars.push_back(add(c, gate(dec1.increment(c, flat), gates.l1)));
    const Tensor dv = reshape(dec2.increment(flat, c), token.shape());
    out.tokens.push_back(add(token, gate(dv, gates.l2)));
  }
  return out;
}

InteractionResult pre_encode_interaction(const Tensor& chars, const Tensor& pos_chars, std::span<const Tensor> tokens,
                                         std::span<const Tensor> pos_tokens, const InteractionGates& gates,
                                         const InteractionBranch& dec1, const InteractionBranch& dec2) {
  require_aligned(tokens.size(), pos_tokens.size(), "pre_encode_interaction");
  std::vector<Tensor> summed;
  for (std::size_t a = 0; a < tokens.size(); ++a) summed.push_back(add(tokens[a], pos_tokens[a]));
  return pre_encode_interaction(add(chars, pos_chars), summed, gates, dec1, dec2);
}

InteractionResult split_embeddings(const Tensor& image_embedding, const Tensor& prompt_embedding, std::size_t k) {
  InteractionResult out;
  out.tokens = split_feature_map(image_embedding, k);
  if (prompt_embedding.rank() != 2 || prompt_embedding.extent(0) != out.tokens.size()) {
    throw DimensionError("split_embeddings: prompt embedding " + to_string(prompt_embedding.shape()) + " for " +
                         std::to_string(out.tokens.size()) + " tokens");
  }
  for (std::size_t a = 0; a < out.tokens.size(); ++a) out.chars.push_back(slice_rows(prompt_embedding, a, 1));
  return out;
}

InteractionResult post_encode_interaction(std::span<const Tensor> chars, std::span<const Tensor> tokens,
                                          const InteractionGates& gates, const InteractionBranch& dec3,
                                          const InteractionBranch& dec4) {
  require_aligned(chars.size(), tokens.size(), "post_encode_interaction");
  InteractionResult out;
  for (std::size_t a = 0; a < chars.size(); ++a) {
    const Tensor& c = chars[a];
    const Tensor& token = tokens[a];
    const Tensor flat = flatten_token(token);
    out.chars.push_back(add(c, gate(dec3.increment(c, flat), gates.l3)));
    const Tensor dv = reshape(dec4.increment(flat, c), token.shape());
    out.tokens.push_back(add(token, gate(dv, gates.l4)));
  }
  return out;
}

}  // namespace rpt
