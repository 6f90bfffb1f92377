#include "rpt/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

Vocabulary::Vocabulary(std::size_t dim, Initializer& init) : table_(init.normal({kWords.size(), dim}, 0.02, false)) {}

Tensor Vocabulary::embed(std::string_view word) const {
  for (std::size_t i = 0; i < kWords.size(); ++i) {
    if (kWords[i] == word) return slice_rows(table_, i, 1);
  }
  throw VocabularyError("word '" + std::string(word) + "' is not in the vocabulary");
}

void Vocabulary::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".table", table_, false});
}

Tensor embed_fixed_word(const Vocabulary& vocab, std::string_view word) { return vocab.embed(word); }

Tensor build_text_input(const PromptBank& bank) {
  if (!bank.general.defined()) return bank.fixed;
  const Tensor parts[] = {bank.fixed, bank.general};
  return concat_rows(parts);
}

TextEncoder::TextEncoder(const ModelConfig& config, Initializer& init) {
  const std::size_t context = std::max(config.fixed_len + config.general_len, config.region_len);
  position = init.normal({context, config.prompt_dim}, 0.01, false);
  encoder = TransformerEncoder({config.text_layers, config.text_heads, config.prompt_dim}, init, false, false);
  projection = LinearLayer::normal(config.prompt_dim, config.embed_dim,
                                   1.0 / std::sqrt(static_cast<double>(config.prompt_dim)), init, false);
}

void TextEncoder::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".position", position, false});
  encoder.collect(out, prefix + ".encoder");
  projection.collect(out, prefix + ".projection");
}

Tensor encode_text(const TextEncoder& text, const Tensor& text_input) {
  if (text_input.rank() != 2 || text_input.extent(1) != text.position.extent(1) ||
      text_input.extent(0) > text.position.extent(0)) {
    throw DimensionError("encode_text: input " + to_string(text_input.shape()) + " does not fit position table " +
                         to_string(text.position.shape()));
  }
  Tensor x = add(text_input, slice_rows(text.position, 0, text_input.extent(0)));
  return text.projection.forward(text.encoder.forward(x));
}

PromptEncoder::PromptEncoder(const TextEncoder& source) {
  // Same architecture, then copy every value so the two stacks start bit-identical
  // but never share storage.
  Initializer scratch(0);
  encoder = TransformerEncoder(source.encoder.spec(), scratch, false, false);
  projection = LinearLayer::zeros(source.projection.in_features(), source.projection.out_features(), false);
  ParameterList from, to;
  source.encoder.collect(from, "e");
  source.projection.collect(from, "p");
  encoder.collect(to, "e");
  projection.collect(to, "p");
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto dst = to[i].tensor.mutable_values();
    std::copy(from[i].tensor.values().begin(), from[i].tensor.values().end(), dst.begin());
  }
}

void PromptEncoder::collect(ParameterList& out, const std::string& prefix) const {
  encoder.collect(out, prefix + ".encoder");
  projection.collect(out, prefix + ".projection");
}

Tensor encode_prompt(const PromptEncoder& prompt, const Tensor& region_prompt, const Tensor& position_chars) {
  if (region_prompt.shape() != position_chars.shape()) {
    throw DimensionError("encode_prompt: prompt " + to_string(region_prompt.shape()) + " vs positions " +
                         to_string(position_chars.shape()));
  }
  return encode_prompt_sum(prompt, add(region_prompt, position_chars));
}

Tensor encode_prompt_sum(const PromptEncoder& prompt, const Tensor& prompt_with_positions) {
  return prompt.projection.forward(prompt.encoder.forward(prompt_with_positions));
}

ImageBackbone::ImageBackbone(const ModelConfig& config, Initializer& init)
    : height_(config.height), width_(config.width) {
  // Spread log2(d) over three blocks, earliest blocks taking the larger strides.
  std::size_t exponent = 0;
  while ((std::size_t{1} << exponent) < config.downsample) ++exponent;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t e = exponent / 3 + (b < exponent % 3 ? 1 : 0);
    strides_.push_back(std::size_t{1} << e);
  }
  const std::size_t c = config.feature_dim;
  const std::size_t channels[4] = {3, std::max<std::size_t>(c / 4, 1), std::max<std::size_t>(c / 2, 1), c};
  for (std::size_t b = 0; b < 3; ++b) {
    const double stddev = std::sqrt(2.0 / (9.0 * static_cast<double>(channels[b])));
    weights_.push_back(init.normal({3, 3, channels[b], channels[b + 1]}, stddev, true));
    biases_.push_back(Tensor::zeros({channels[b + 1]}, true));
  }
}

Tensor ImageBackbone::forward(const Tensor& image) const {
  if (image.shape() != Shape{height_, width_, 3}) {
    throw DimensionError("encode_image: expected image " + to_string(Shape{height_, width_, 3}) + ", got " +
                         to_string(image.shape()));
  }
  Tensor x = add_scalar(image, -0.5);
  for (std::size_t b = 0; b < weights_.size(); ++b) x = gelu(conv2d(x, weights_[b], biases_[b], strides_[b], 1));
  return x;
}

void ImageBackbone::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t b = 0; b < weights_.size(); ++b) {
    out.push_back({prefix + ".conv" + std::to_string(b) + ".weight", weights_[b], true});
    out.push_back({prefix + ".conv" + std::to_string(b) + ".bias", biases_[b], true});
  }
}

Tensor encode_image(const ImageBackbone& backbone, const Tensor& image) { return backbone.forward(image); }

AttentionPool::AttentionPool(const ModelConfig& config, Initializer& init) {
  attention = MultiHeadAttention::create(config.feature_dim, config.pool_heads, init, true, false, config.embed_dim);
  // Start with tied, unit-variance query/key maps so attention is position
  // dependent from the first step; both are trained independently afterwards.
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.feature_dim));
  for (LinearLayer* l : {&attention.q_proj, &attention.v_proj, &attention.out_proj}) {
    l->weight = init.normal(l->weight.shape(), stddev, true);
  }
  attention.k_proj.weight = Tensor(attention.q_proj.weight.shape(),
                                   std::vector<double>(attention.q_proj.weight.values().begin(),
                                                       attention.q_proj.weight.values().end()),
                                   true);
}

void AttentionPool::collect(ParameterList& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attn");
}

Tensor attention_pool(const AttentionPool& pool, const Tensor& features, const Tensor& position) {
  if (features.shape() != position.shape()) {
    throw DimensionError("attention_pool: features " + to_string(features.shape()) + " vs position " +
                         to_string(position.shape()));
  }
  return attention_pool_sum(pool, add(features, position));
}

Tensor attention_pool_sum(const AttentionPool& pool, const Tensor& features_with_positions) {
  const Tensor& x = features_with_positions;
  if (x.rank() != 3) throw DimensionError("attention_pool: expected a h x w x c map, got " + to_string(x.shape()));
  const std::size_t h = x.extent(0), w = x.extent(1);
  Tensor seq = reshape(x, {h * w, x.extent(2)});
  Tensor out = pool.attention.forward(seq, seq, seq);
  return reshape(out, {h, w, out.extent(1)});
}

}  // namespace rpt
