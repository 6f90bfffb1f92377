#include "rpt/nn.hpp"

#include <cmath>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

Tensor Initializer::normal(Shape shape, double stddev, bool trainable) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng_);
  return Tensor(std::move(shape), std::move(v), trainable);
}

LinearLayer LinearLayer::normal(std::size_t in, std::size_t out, double stddev, Initializer& init, bool trainable) {
  return {init.normal({in, out}, stddev, trainable), Tensor::zeros({out}, trainable), trainable};
}

LinearLayer LinearLayer::zeros(std::size_t in, std::size_t out, bool trainable) {
  return {Tensor::zeros({in, out}, trainable), Tensor::zeros({out}, trainable), trainable};
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.extent(1) != in_features()) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  return add_bias(matmul(x, weight), bias);
}

void LinearLayer::zero() {
  for (auto& v : weight.mutable_values()) v = 0.0;
  for (auto& v : bias.mutable_values()) v = 0.0;
}

void LinearLayer::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, trainable});
  out.push_back({prefix + ".bias", bias, trainable});
}

LayerNorm LayerNorm::create(std::size_t width, bool trainable) {
  return {Tensor::full({width}, 1.0, trainable), Tensor::zeros({width}, trainable), trainable};
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, trainable});
  out.push_back({prefix + ".beta", beta, trainable});
}

MultiHeadAttention MultiHeadAttention::create(std::size_t width, std::size_t heads, Initializer& init,
                                              bool trainable, bool zero_output, std::size_t out_width) {
  if (width == 0 || heads == 0) throw ConfigError("attention needs positive width and head count");
  MultiHeadAttention m;
  m.heads = heads;
  m.width = width;
  m.head_dim = (width + heads - 1) / heads;
  const std::size_t inner = m.head_dim * heads;
  if (out_width == 0) out_width = width;
  m.q_proj = LinearLayer::normal(width, inner, 0.02, init, trainable);
  m.k_proj = LinearLayer::normal(width, inner, 0.02, init, trainable);
  m.v_proj = LinearLayer::normal(width, inner, 0.02, init, trainable);
  m.out_proj = zero_output ? LinearLayer::zeros(inner, out_width, trainable)
                           : LinearLayer::normal(inner, out_width, 0.02, init, trainable);
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
  for (const Tensor* t : {&q, &k, &v}) {
    if (t->rank() != 2 || t->extent(1) != width) {
      throw DimensionError("attention: input " + to_string(t->shape()) + " does not have width " +
                           std::to_string(width));
    }
  }
  if (k.extent(0) != v.extent(0)) {
    throw DimensionError("attention: key " + to_string(k.shape()) + " and value " + to_string(v.shape()) +
                         " lengths differ");
  }
  const Tensor Q = q_proj.forward(q);
  const Tensor K = k_proj.forward(k);
  const Tensor V = v_proj.forward(v);
  const double s = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * head_dim;
    Tensor scores = scale(matmul(slice_cols(Q, c0, head_dim), transpose(slice_cols(K, c0, head_dim))), s);
    Tensor weights = softmax(scores, 1);
    if (debug_checks()) {
      const std::size_t n = weights.extent(1);
      for (std::size_t r = 0; r < weights.extent(0); ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += weights[r * n + c];
        if (std::abs(total - 1.0) > 1e-6) throw ContractError("attention weights do not sum to one");
      }
    }
    outs.push_back(matmul(weights, slice_cols(V, c0, head_dim)));
  }
  Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
  return out_proj.forward(merged);
}

void MultiHeadAttention::collect(ParameterList& out, const std::string& prefix) const {
  q_proj.collect(out, prefix + ".q");
  k_proj.collect(out, prefix + ".k");
  v_proj.collect(out, prefix + ".v");
  out_proj.collect(out, prefix + ".out");
}

FeedForward FeedForward::create(std::size_t width, Initializer& init, bool trainable, bool zero_output) {
  FeedForward f;
  f.fc1 = LinearLayer::normal(width, 4 * width, 0.02, init, trainable);
  f.fc2 = zero_output ? LinearLayer::zeros(4 * width, width, trainable)
                      : LinearLayer::normal(4 * width, width, 0.02, init, trainable);
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

void FeedForward::collect(ParameterList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

TransformerEncoder::TransformerEncoder(StackSpec spec, Initializer& init, bool trainable, bool zero_outputs)
    : spec_(spec) {
  for (std::size_t i = 0; i < spec.layers; ++i) {
    layers_.push_back({LayerNorm::create(spec.width, trainable),
                       MultiHeadAttention::create(spec.width, spec.heads, init, trainable, zero_outputs),
                       LayerNorm::create(spec.width, trainable),
                       FeedForward::create(spec.width, init, trainable, zero_outputs)});
  }
}

Tensor TransformerEncoder::forward(const Tensor& seq) const {
  if (seq.rank() != 2 || seq.extent(1) != spec_.width) {
    throw DimensionError("encoder: input " + to_string(seq.shape()) + " does not have width " +
                         std::to_string(spec_.width));
  }
  Tensor x = seq;
  for (const auto& l : layers_) {
    Tensor h = l.ln1.forward(x);
    x = add(x, l.attn.forward(h, h, h));
    x = add(x, l.ff.forward(l.ln2.forward(x)));
  }
  return x;
}

void TransformerEncoder::zero_branch_outputs() {
  for (auto& l : layers_) {
    l.attn.out_proj.zero();
    l.ff.fc2.zero();
  }
}

void TransformerEncoder::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_[i].ln1.collect(out, p + ".ln1");
    layers_[i].attn.collect(out, p + ".attn");
    layers_[i].ln2.collect(out, p + ".ln2");
    layers_[i].ff.collect(out, p + ".ff");
  }
}

TransformerDecoder::TransformerDecoder(StackSpec spec, Initializer& init, bool trainable, bool zero_outputs)
    : spec_(spec) {
  for (std::size_t i = 0; i < spec.layers; ++i) {
    layers_.push_back({LayerNorm::create(spec.width, trainable),
                       MultiHeadAttention::create(spec.width, spec.heads, init, trainable, zero_outputs),
                       LayerNorm::create(spec.width, trainable),
                       MultiHeadAttention::create(spec.width, spec.heads, init, trainable, zero_outputs),
                       LayerNorm::create(spec.width, trainable),
                       FeedForward::create(spec.width, init, trainable, zero_outputs)});
  }
}

Tensor TransformerDecoder::forward(const Tensor& query, const Tensor& memory) const {
  if (!memory.defined()) throw ContractError("decoder: empty memory sequence");
  for (const Tensor* t : {&query, &memory}) {
    if (t->rank() != 2 || t->extent(1) != spec_.width) {
      throw DimensionError("decoder: input " + to_string(t->shape()) + " does not have width " +
                           std::to_string(spec_.width));
    }
  }
  Tensor x = query;
  for (const auto& l : layers_) {
    Tensor h = l.ln1.forward(x);
    x = add(x, l.self_attn.forward(h, h, h));
    x = add(x, l.cross_attn.forward(l.ln2.forward(x), memory, memory));
    x = add(x, l.ff.forward(l.ln3.forward(x)));
  }
  return x;
}

void TransformerDecoder::zero_branch_outputs() {
  for (auto& l : layers_) {
    l.self_attn.out_proj.zero();
    l.cross_attn.out_proj.zero();
    l.ff.fc2.zero();
  }
}

void TransformerDecoder::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_[i].ln1.collect(out, p + ".ln1");
    layers_[i].self_attn.collect(out, p + ".self_attn");
    layers_[i].ln2.collect(out, p + ".ln2");
    layers_[i].cross_attn.collect(out, p + ".cross_attn");
    layers_[i].ln3.collect(out, p + ".ln3");
    layers_[i].ff.collect(out, p + ".ff");
  }
}

}  // namespace rpt
