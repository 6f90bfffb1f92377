#include "rpt/matching.hpp"

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"
#include "rpt/region.hpp"

namespace rpt {

namespace {

void require_feature_map(const ScoreMap& s, const char* where) {
  if (s.resolution != ScoreMap::Resolution::Feature) throw ContractError(std::string(where) + ": expected a feature-level map");
  if (!s.grid.defined() || s.grid.rank() != 3 || s.grid.extent(2) != 1) {
    throw DimensionError(std::string(where) + ": score maps are h x w x 1");
  }
}

// Row vector t [1 x C] against positions v [n x C] -> sigmoid(<t, v> / tau) as [n x 1].
Tensor match(const Tensor& t, const Tensor& v, double tau) {
  return sigmoid(scale(matmul(normalize_rows(v), transpose(normalize_rows(t))), 1.0 / tau));
}

}  // namespace

ScoreMap global_score_map(const Tensor& text_embedding, const Tensor& image_embedding, double tau) {
  if (!(tau > 0.0)) throw ConfigError("global_score_map: tau must be positive");
  if (text_embedding.rank() != 2 || image_embedding.rank() != 3 ||
      text_embedding.extent(1) != image_embedding.extent(2)) {
    throw DimensionError("global_score_map: text " + to_string(text_embedding.shape()) + " vs image " +
                         to_string(image_embedding.shape()));
  }
  const std::size_t h = image_embedding.extent(0), w = image_embedding.extent(1), c = image_embedding.extent(2);
  const Tensor t = slice_rows(text_embedding, text_embedding.extent(0) - 1, 1);
  return {reshape(match(t, reshape(image_embedding, {h * w, c}), tau), {h, w, 1}), ScoreMap::Resolution::Feature};
}

ScoreMap region_score_map(std::span<const Tensor> chars, std::span<const Tensor> tokens, double tau) {
  if (!(tau > 0.0)) throw ConfigError("region_score_map: tau must be positive");
  if (chars.size() != tokens.size() || chars.empty()) {
    throw ContractError("region_score_map: " + std::to_string(chars.size()) + " characters vs " +
                        std::to_string(tokens.size()) + " tokens");
  }
  std::size_t k = 1;
  while (k * k < tokens.size()) ++k;
  if (k * k != tokens.size()) throw ContractError("region_score_map: token count is not a square");
  std::vector<Tensor> tiles;
  tiles.reserve(tokens.size());
  for (std::size_t a = 0; a < tokens.size(); ++a) {
    const Tensor& tok = tokens[a];
    if (tok.rank() != 3 || chars[a].size() != tok.extent(2)) {
      throw DimensionError("region_score_map: character " + to_string(chars[a].shape()) + " vs token " +
                           to_string(tok.shape()));
    }
    const std::size_t th = tok.extent(0), tw = tok.extent(1);
    const Tensor t = reshape(chars[a], {1, tok.extent(2)});
    tiles.push_back(reshape(match(t, reshape(tok, {th * tw, tok.extent(2)}), tau), {th, tw, 1}));
  }
  return {concat_tokens(tiles, k), ScoreMap::Resolution::Feature};
}

FusionHead::FusionHead(StackSpec spec, Initializer& init) {
  // The frozen bias matters: a purely linear 1 -> width lift would make every
  // position the same direction, which layer norm then erases.
  lift_query = {init.normal({1, spec.width}, 1.0, false), init.normal({spec.width}, 1.0, false), false};
  lift_memory = {init.normal({1, spec.width}, 1.0, false), init.normal({spec.width}, 1.0, false), false};
  decoder = TransformerDecoder(spec, init, true, true);
  readout = LinearLayer::zeros(spec.width, 1, true);
}

Tensor FusionHead::forward(const Tensor& global, const Tensor& region) const {
  if (global.shape() != region.shape() || global.rank() != 3 || global.extent(2) != 1) {
    throw DimensionError("fusion: S_glo " + to_string(global.shape()) + " vs S_reg " + to_string(region.shape()));
  }
  const std::size_t n = global.extent(0) * global.extent(1);
  Tensor q = lift_query.forward(reshape(global, {n, 1}));
  Tensor m = lift_memory.forward(reshape(region, {n, 1}));
  return reshape(readout.forward(decoder.forward(q, m)), global.shape());
}

void FusionHead::zero() {
  decoder.zero_branch_outputs();
  readout.zero();
}

void FusionHead::collect(ParameterList& out, const std::string& prefix) const {
  lift_query.collect(out, prefix + ".lift_query");
  lift_memory.collect(out, prefix + ".lift_memory");
  decoder.collect(out, prefix + ".decoder");
  readout.collect(out, prefix + ".readout");
}

FusedScores fuse_score_maps(const ScoreMap& global, const ScoreMap& region, double lambda_mix, const FusionHead& head,
                            bool use_fusion, bool use_enhancement) {
  require_feature_map(global, "fuse_score_maps");
  require_feature_map(region, "fuse_score_maps");
  if (global.grid.shape() != region.grid.shape()) {
    throw DimensionError("fuse_score_maps: S_glo " + to_string(global.grid.shape()) + " vs S_reg " +
                         to_string(region.grid.shape()));
  }
  FusedScores out;
  out.enhanced = use_enhancement ? add(global.grid, region.grid) : global.grid;
  Tensor s = out.enhanced;
  if (use_fusion) {
    out.fused = head.forward(global.grid, region.grid);
    s = add(s, scale(out.fused, lambda_mix));
  }
  out.combined = {s, ScoreMap::Resolution::Feature};
  return out;
}

ScoreMap upsample_to_pixels(const ScoreMap& map, std::size_t height, std::size_t width) {
  if (map.resolution == ScoreMap::Resolution::Pixel) throw ContractError("upsample_to_pixels: map is already pixel-level");
  return {bilinear_upsample(map.grid, height, width), ScoreMap::Resolution::Pixel};
}

}  // namespace rpt
