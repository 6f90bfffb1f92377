#include "rpt/model.hpp"

#include <cmath>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

RptModel::RptModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  PrecisionScope precision(config_.precision);
  const ModelConfig& c = config_;
  Initializer init(seed);
  vocab = Vocabulary(c.prompt_dim, init);
  text = TextEncoder(c, init);
  prompt = PromptEncoder(text);
  backbone = ImageBackbone(c, init);
  pool = AttentionPool(c, init);
  position = init.normal({c.feature_h(), c.feature_w(), c.feature_dim}, 1.0 / std::sqrt(double(c.feature_dim)), true);
  general_prompt = init.normal({c.general_len, c.prompt_dim}, 0.02, true);
  region_prompt = init.normal({c.region_len, c.prompt_dim}, 0.02, true);
  ln1 = LinearLayer::normal(c.feature_dim, c.prompt_dim, 0.02, init);
  gates = InteractionGates::zeros();
  dec1 = InteractionBranch(c.prompt_dim, c.feature_dim, c.decoder, init);
  dec2 = InteractionBranch(c.feature_dim, c.prompt_dim, c.decoder, init);
  dec3 = InteractionBranch(c.embed_dim, c.embed_dim, c.decoder, init);
  dec4 = InteractionBranch(c.embed_dim, c.embed_dim, c.decoder, init);
  fusion = FusionHead(c.decoder, init);
  head = DBLiteHead(c.db_k, squash_offset(c.flags, c.lambda_mix));
}

ParameterList RptModel::parameters() const {
  ParameterList out;
  vocab.collect(out, "vocab");
  text.collect(out, "text");
  prompt.collect(out, "prompt");
  backbone.collect(out, "backbone");
  pool.collect(out, "pool");
  out.push_back({"position", position, true});
  out.push_back({"general_prompt", general_prompt, true});
  out.push_back({"region_prompt", region_prompt, true});
  ln1.collect(out, "ln1");
  gates.collect(out, "gates");
  dec1.collect(out, "dec1");
  dec2.collect(out, "dec2");
  dec3.collect(out, "dec3");
  dec4.collect(out, "dec4");
  fusion.collect(out, "fusion");
  head.collect(out, "head");
  return out;
}

ForwardResult forward_full(const RptModel& model, const Tensor& image) {
  const ModelConfig& c = model.config();
  c.validate();
  if (image.shape() != Shape{c.height, c.width, 3}) {
    throw ConfigError("forward: image " + to_string(image.shape()) + " does not match the configured " +
                      std::to_string(c.height) + "x" + std::to_string(c.width) + " input");
  }
  PrecisionScope precision(c.precision);
  const AblationFlags& f = c.flags;
  ForwardResult r;

  PromptBank bank{embed_fixed_word(model.vocab, c.fixed_word), f.general_prompt ? model.general_prompt : Tensor(),
                  model.region_prompt};
  r.text_input = build_text_input(bank);
  r.text_output = encode_text(model.text, r.text_input);
  const Tensor features = encode_image(model.backbone, image);

  if (!f.region_prompt) {
    const Tensor image_embedding = attention_pool(model.pool, features, model.position);
    r.global = global_score_map(r.text_output, image_embedding, c.tau);
    r.enhanced = r.global.grid;
    r.feature = r.global;
    r.pixel = upsample_to_pixels(r.feature, c.height, c.width);
    return r;
  }

  const Tensor pos_chars = f.shared_pos_embed ? derive_shared_position_embedding(model.position, c.grid, model.ln1)
                                              : slice_rows(model.text.position, 0, c.region_len);
  Tensor image_embedding, prompt_embedding;
  if (f.interaction) {
    const auto tokens = split_feature_map(add(features, model.position), c.grid);
    const auto pre = pre_encode_interaction(add(model.region_prompt, pos_chars), tokens, model.gates, model.dec1,
                                            model.dec2);
    image_embedding = attention_pool_sum(model.pool, concat_tokens(pre.tokens, c.grid));
    prompt_embedding = encode_prompt_sum(model.prompt, concat_rows(pre.chars));
  } else {
    image_embedding = attention_pool(model.pool, features, model.position);
    prompt_embedding = encode_prompt(model.prompt, model.region_prompt, pos_chars);
  }

  r.global = global_score_map(r.text_output, image_embedding, c.tau);
  auto split = split_embeddings(image_embedding, prompt_embedding, c.grid);
  if (f.interaction) split = post_encode_interaction(split.chars, split.tokens, model.gates, model.dec3, model.dec4);
  r.region = region_score_map(split.chars, split.tokens, c.tau);

  const FusedScores fused =
      fuse_score_maps(r.global, r.region, c.lambda_mix, model.fusion, f.feature_fusion, f.feature_enhancement);
  r.enhanced = fused.enhanced;
  r.fused = fused.fused;
  r.feature = fused.combined;
  r.pixel = upsample_to_pixels(r.feature, c.height, c.width);
  return r;
}

LossTerms compute_loss(const RptModel& model, const ForwardResult& forward, std::span<const double> mask) {
  const ModelConfig& c = model.config();
  PrecisionScope precision(c.precision);
  LossTerms t;
  const Tensor& s = forward.pixel.grid;
  t.l_mat = matching_loss(squash(s, squash_offset(c.flags, c.lambda_mix)), mask);
  t.l_db = db_lite_loss(model.head, s, mask);
  const bool use_bd = c.flags.region_prompt && c.flags.bd_loss;
  if (use_bd) t.l_bd = bidirectional_distance_loss(forward.text_input, model.region_prompt);
  const double lambda_bd = use_bd ? c.lambda_bd : 0.0;
  t.l_sum = total_loss(t.l_db, t.l_bd, t.l_mat, lambda_bd, c.lambda_mat);
  t.report = total_loss(t.l_db.item(), use_bd ? t.l_bd.item() : 0.0, t.l_mat.item(), lambda_bd, c.lambda_mat);
  return t;
}

Tensor probability_map(const RptModel& model, const ForwardResult& forward) {
  PrecisionScope precision(model.config().precision);
  return model.head.forward(forward.pixel.grid).probability;
}

}  // namespace rpt
