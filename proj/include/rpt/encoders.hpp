#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "rpt/config.hpp"
#include "rpt/nn.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

// Fixed eight-word embedding table standing in for a tokenizer plus word
// embedding. Rows are drawn once from a seeded N(0, 0.02^2) and never trained.
class Vocabulary {
 public:
  static constexpr std::array<std::string_view, 8> kWords{"text",  "word",  "letter",  "sign",
                                                          "label", "title", "caption", "number"};

  Vocabulary() = default;
  Vocabulary(std::size_t dim, Initializer& init);

  // One frozen row per word; throws VocabularyError for unknown words.
  Tensor embed(std::string_view word) const;
  const Tensor& table() const { return table_; }
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  Tensor table_;  // kWords.size() x dim
};

Tensor embed_fixed_word(const Vocabulary& vocab, std::string_view word);

// T_f (frozen), T_g and T_r (learnable).
struct PromptBank {
  Tensor fixed;    // N_f x C'
  Tensor general;  // N1 x C'; undefined when N1 == 0
  Tensor region;   // N2 x C'
};

// [T_f, T_g], fixed row(s) first.
Tensor build_text_input(const PromptBank& bank);

// Frozen text encoder: sequential position embedding, transformer stack and a
// C' -> C projection.
struct TextEncoder {
  Tensor position;  // context x C'
  TransformerEncoder encoder;
  LinearLayer projection;

  TextEncoder() = default;
  TextEncoder(const ModelConfig& config, Initializer& init);
  void collect(ParameterList& out, const std::string& prefix) const;
};

Tensor encode_text(const TextEncoder& text, const Tensor& text_input);

// Frozen copy of the text encoder's stack and projection. The sequential
// position embedding is replaced by the caller-supplied P_r.
struct PromptEncoder {
  TransformerEncoder encoder;
  LinearLayer projection;

  PromptEncoder() = default;
  explicit PromptEncoder(const TextEncoder& source);
  void collect(ParameterList& out, const std::string& prefix) const;
};

// T_p from (T_r + P_r), both N2 x C'.
Tensor encode_prompt(const PromptEncoder& prompt, const Tensor& region_prompt, const Tensor& position_chars);
// T_p from a prompt that already carries its position characters.
Tensor encode_prompt_sum(const PromptEncoder& prompt, const Tensor& prompt_with_positions);

// Three strided 3x3 convolutions with GELU, total stride d, H x W x 3 -> (H/d) x (W/d) x C''.
class ImageBackbone {
 public:
  ImageBackbone() = default;
  ImageBackbone(const ModelConfig& config, Initializer& init);

  Tensor forward(const Tensor& image) const;
  const std::vector<std::size_t>& strides() const { return strides_; }
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<std::size_t> strides_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

Tensor encode_image(const ImageBackbone& backbone, const Tensor& image);

// Multi-head self-attention over every feature position, with a C'' -> C output
// projection. Per-position outputs are kept.
struct AttentionPool {
  MultiHeadAttention attention;

  AttentionPool() = default;
  AttentionPool(const ModelConfig& config, Initializer& init);
  void collect(ParameterList& out, const std::string& prefix) const;
};

// I_o from I_i and the learnable position field P, both h x w x C''.
Tensor attention_pool(const AttentionPool& pool, const Tensor& features, const Tensor& position);
// I_o from a feature map that already carries its position embedding.
Tensor attention_pool_sum(const AttentionPool& pool, const Tensor& features_with_positions);

}  // namespace rpt
