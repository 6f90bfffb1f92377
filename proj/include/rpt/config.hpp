#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "rpt/nn.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

// Component toggles, one per row of the ablation matrix.
struct AblationFlags {
  bool general_prompt = true;
  bool region_prompt = true;
  bool feature_enhancement = true;
  bool shared_pos_embed = true;
  bool interaction = true;
  bool bd_loss = true;
  bool feature_fusion = true;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t height = 96;      // H
  std::size_t width = 96;       // W
  std::size_t downsample = 8;   // d
  std::size_t grid = 3;         // k
  std::size_t fixed_len = 1;    // N_f
  std::size_t general_len = 4;  // N1
  std::size_t region_len = 9;   // N2, always grid * grid
  std::size_t prompt_dim = 16;  // C'
  std::size_t embed_dim = 32;   // C
  std::size_t feature_dim = 64; // C''
  double tau = 0.07;
  double lambda_mix = 2.0;
  double lambda_bd = 1.0;
  double lambda_mat = 1.0;
  StackSpec decoder{2, 3, 12};
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t pool_heads = 4;
  double db_k = 50.0;
  std::string fixed_word = "text";
  Precision precision = Precision::Standard;
  AblationFlags flags;

  // training
  double learning_rate = 1e-3;
  std::size_t train_scenes = 8;
  std::size_t checkpoint_every = 100;

  std::size_t feature_h() const { return height / downsample; }
  std::size_t feature_w() const { return width / downsample; }
  std::size_t token_h() const { return feature_h() / grid; }
  std::size_t token_w() const { return feature_w() / grid; }
  // Number of rows in the text encoder input [T_f, T_g].
  std::size_t text_len() const { return fixed_len + (flags.general_prompt ? general_len : 0); }

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  // Small geometry used by the tests and the overfit runs.
  static ModelConfig toy();
  // Smallest geometry exercising every path; used by the full gradient check.
  static ModelConfig micro();
  // Published dimensions at 288x288 (d=32, C'=512, C=1024, C''=2048, 4x3x256 decoders).
  static ModelConfig paper();

  bool operator==(const ModelConfig&) const = default;
};

// Flat `key = value` lines; `#` starts a comment. Unknown keys are errors.
ModelConfig parse_config(std::string_view text);
ModelConfig load_config(const std::string& path);
std::string to_config_text(const ModelConfig& config);

}  // namespace rpt
