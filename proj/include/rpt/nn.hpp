#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rpt/tensor.hpp"

namespace rpt {

struct NamedParameter {
  std::string name;
  Tensor tensor;  // shared handle onto the live parameter
  bool trainable = true;
};

using ParameterList = std::vector<NamedParameter>;

// Seeded source for parameter initialisation.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(Shape shape, double stddev, bool trainable);
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

struct LinearLayer {
  Tensor weight;  // in x out
  Tensor bias;    // out
  bool trainable = true;

  static LinearLayer normal(std::size_t in, std::size_t out, double stddev, Initializer& init, bool trainable = true);
  static LinearLayer zeros(std::size_t in, std::size_t out, bool trainable = true);

  std::size_t in_features() const { return weight.extent(0); }
  std::size_t out_features() const { return weight.extent(1); }
  // x[n x in] -> x W + b
  Tensor forward(const Tensor& x) const;
  void zero();
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  bool trainable = true;

  static LayerNorm create(std::size_t width, bool trainable = true);
  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

// Scaled dot-product attention over `heads` heads of size ceil(width / heads).
struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t width = 0;
  std::size_t head_dim = 0;
  LinearLayer q_proj, k_proj, v_proj, out_proj;

  static MultiHeadAttention create(std::size_t width, std::size_t heads, Initializer& init, bool trainable,
                                   bool zero_output, std::size_t out_width = 0);
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct FeedForward {
  LinearLayer fc1;  // width -> 4 width
  LinearLayer fc2;  // 4 width -> width

  static FeedForward create(std::size_t width, Initializer& init, bool trainable, bool zero_output);
  Tensor forward(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct StackSpec {
  std::size_t layers = 4;
  std::size_t heads = 3;
  std::size_t width = 256;

  bool operator==(const StackSpec&) const = default;
};

// Pre-norm blocks: x += attn(ln(x)); x += ff(ln(x)).
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(StackSpec spec, Initializer& init, bool trainable = true, bool zero_outputs = true);

  const StackSpec& spec() const { return spec_; }
  Tensor forward(const Tensor& seq) const;
  void zero_branch_outputs();
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  struct Layer {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    FeedForward ff;
  };
  StackSpec spec_;
  std::vector<Layer> layers_;
};

// Pre-norm blocks: self-attention, cross-attention into memory, feed-forward,
// each wrapped in a residual connection. No masking, no dropout.
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(StackSpec spec, Initializer& init, bool trainable = true, bool zero_outputs = true);

  const StackSpec& spec() const { return spec_; }
  Tensor forward(const Tensor& query, const Tensor& memory) const;
  void zero_branch_outputs();
  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  struct Layer {
    LayerNorm ln1;
    MultiHeadAttention self_attn;
    LayerNorm ln2;
    MultiHeadAttention cross_attn;
    LayerNorm ln3;
    FeedForward ff;
  };
  StackSpec spec_;
  std::vector<Layer> layers_;
};

}  // namespace rpt
