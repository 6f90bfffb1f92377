#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rpt/encoders.hpp"
#include "rpt/errors.hpp"
#include "test_util.hpp"

using namespace rpt;
using rpt::testing::bit_equal;
using rpt::testing::random_tensor;
using rpt::testing::weighted_sum;

namespace {

double max_abs(std::span<const double> values) {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

double max_abs(const Tensor& t) { return max_abs(t.values()); }

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

TEST_CASE("fixed word lookup is frozen and deterministic") {
  Initializer init(1);
  Vocabulary vocab(16, init);
  auto a = embed_fixed_word(vocab, "text");
  auto b = embed_fixed_word(vocab, "text");
  CHECK(a.shape() == Shape{1, 16});
  CHECK(bit_equal(a, b));
  CHECK_FALSE(a.requires_grad());
  CHECK_FALSE(bit_equal(a, embed_fixed_word(vocab, "word")));
  CHECK_THROWS_AS(embed_fixed_word(vocab, "dog"), VocabularyError);
  CHECK(max_abs(vocab.table()) < 0.2);
}

TEST_CASE("text input layout") {
  std::mt19937_64 rng(3);
  PromptBank bank{random_tensor({1, 16}, rng, false), random_tensor({4, 16}, rng), random_tensor({9, 16}, rng)};
  auto ti = build_text_input(bank);
  CHECK(ti.shape() == Shape{5, 16});
  for (std::size_t c = 0; c < 16; ++c) CHECK(ti[c] == bank.fixed[c]);

  // Changing general row 2 only moves text input row 3.
  auto before = std::vector<double>(ti.values().begin(), ti.values().end());
  bank.general.mutable_values()[2 * 16 + 5] += 1.0;
  auto after = build_text_input(bank);
  for (std::size_t i = 0; i < after.size(); ++i) {
    const bool changed = after[i] != before[i];
    CHECK(changed == (i == 3 * 16 + 5));
  }

  PromptBank empty{bank.fixed, Tensor(), bank.region};
  CHECK(bit_equal(build_text_input(empty), bank.fixed));
}

TEST_CASE("text encoder shape, frozen internals and prompt sensitivity") {
  auto cfg = ModelConfig::toy();
  Initializer init(5);
  Vocabulary vocab(cfg.prompt_dim, init);
  TextEncoder text(cfg, init);
  std::mt19937_64 rng(6);
  PromptBank bank{vocab.embed("text"), random_tensor({cfg.general_len, cfg.prompt_dim}, rng, true, -0.05, 0.05),
                  Tensor()};
  auto out = encode_text(text, build_text_input(bank));
  CHECK(out.shape() == Shape{cfg.text_len(), cfg.embed_dim});
  backward(weighted_sum(out));

  ParameterList params;
  text.collect(params, "text");
  for (const auto& p : params) {
    CHECK_FALSE(p.trainable);
    CHECK_FALSE(p.tensor.has_grad());
  }
  REQUIRE(bank.general.has_grad());
  CHECK(max_abs(bank.general.grad()) > 0.0);

  // Finite differences agree with the analytic gradient reaching T_g.
  PrecisionScope wide(Precision::Wide);
  Tensor general[] = {bank.general};
  auto check = grad_check([&] { return weighted_sum(encode_text(text, build_text_input(bank))); }, general);
  CHECK(check.max_relative_error < 1e-5);
}

TEST_CASE("text encoder rejects inputs longer than its context") {
  auto cfg = ModelConfig::toy();
  Initializer init(5);
  TextEncoder text(cfg, init);
  CHECK_THROWS_AS(encode_text(text, Tensor::zeros({20, cfg.prompt_dim})), DimensionError);
  CHECK_THROWS_AS(encode_text(text, Tensor::zeros({3, cfg.prompt_dim + 1})), DimensionError);
}

TEST_CASE("image backbone geometry") {
  struct Case {
    std::size_t side, d, grid;
  };
  for (auto [side, d, grid] : {Case{64, 8, 2}, Case{96, 8, 3}, Case{256, 32, 2}, Case{48, 4, 3}}) {
    auto cfg = ModelConfig::toy();
    cfg.height = cfg.width = side;
    cfg.downsample = d;
    cfg.grid = grid;
    cfg.region_len = grid * grid;
    cfg.feature_dim = 16;
    Initializer init(7);
    ImageBackbone backbone(cfg, init);
    const auto& s = backbone.strides();
    CHECK(std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>()) == d);
    std::mt19937_64 rng(8);
    auto img = random_tensor({side, side, 3}, rng, false, 0.0, 1.0);
    auto out = encode_image(backbone, img);
    CHECK(out.shape() == Shape{side / d, side / d, 16});
    CHECK(all_finite(out));
    CHECK(all_finite(encode_image(backbone, Tensor::zeros({side, side, 3}))));
  }
  auto cfg = ModelConfig::toy();
  Initializer init(7);
  ImageBackbone backbone(cfg, init);
  CHECK_THROWS_AS(encode_image(backbone, Tensor::zeros({64, 64, 3})), DimensionError);
}

TEST_CASE("attention pool symmetry and ordering") {
  auto cfg = ModelConfig::toy();
  cfg.feature_dim = 8;
  cfg.embed_dim = 6;
  cfg.pool_heads = 2;
  Initializer init(9);
  AttentionPool pool(cfg, init);

  SUBCASE("constant features without positions give identical outputs") {
    auto feats = Tensor::full({3, 3, 8}, 0.7);
    auto out = attention_pool(pool, feats, Tensor::zeros({3, 3, 8}));
    CHECK(out.shape() == Shape{3, 3, 6});
    for (std::size_t p = 1; p < 9; ++p) {
      for (std::size_t c = 0; c < 6; ++c) CHECK(out[p * 6 + c] == doctest::Approx(out[c]).epsilon(1e-12));
    }
  }

  SUBCASE("permuting positions with their embeddings permutes outputs") {
    PrecisionScope wide(Precision::Wide);
    std::mt19937_64 rng(10);
    auto feats = random_tensor({2, 2, 8}, rng, false);
    auto pos = random_tensor({2, 2, 8}, rng, false);
    auto base = attention_pool(pool, feats, pos);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    do {
      std::vector<double> f(32), q(32);
      for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t c = 0; c < 8; ++c) {
          f[p * 8 + c] = feats[perm[p] * 8 + c];
          q[p * 8 + c] = pos[perm[p] * 8 + c];
        }
      }
      auto out = attention_pool(pool, Tensor({2, 2, 8}, f), Tensor({2, 2, 8}, q));
      for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t c = 0; c < 6; ++c) CHECK(out[p * 6 + c] == doctest::Approx(base[perm[p] * 6 + c]).epsilon(1e-10));
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  }

  CHECK_THROWS_AS(attention_pool(pool, Tensor::zeros({2, 2, 8}), Tensor::zeros({2, 3, 8})), DimensionError);
}

TEST_CASE("prompt encoder copies the text encoder") {
  auto cfg = ModelConfig::toy();
  Initializer init(11);
  TextEncoder text(cfg, init);
  PromptEncoder prompt(text);
  ParameterList a, b;
  text.encoder.collect(a, "x");
  text.projection.collect(a, "y");
  prompt.collect(b, "x");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bit_equal(a[i].tensor, b[i].tensor));
    CHECK(a[i].tensor.node() != b[i].tensor.node());
    CHECK_FALSE(b[i].trainable);
  }

  std::mt19937_64 rng(12);
  auto tr = random_tensor({9, cfg.prompt_dim}, rng, true, -0.05, 0.05);
  auto pr = random_tensor({9, cfg.prompt_dim}, rng, false, -0.05, 0.05);
  auto out = encode_prompt(prompt, tr, pr);
  CHECK(out.shape() == Shape{9, cfg.embed_dim});
  backward(weighted_sum(out));
  REQUIRE(tr.has_grad());
  CHECK(max_abs(tr.grad()) > 0.0);
  for (const auto& p : b) CHECK_FALSE(p.tensor.has_grad());

  PrecisionScope wide(Precision::Wide);
  Tensor inputs[] = {tr};
  auto check = grad_check([&] { return weighted_sum(encode_prompt(prompt, tr, pr)); }, inputs);
  CHECK(check.max_relative_error < 1e-5);

  CHECK_THROWS_AS(encode_prompt(prompt, tr, Tensor::zeros({8, cfg.prompt_dim})), DimensionError);
}

TEST_CASE("prompt encoding keeps character order") {
  // A perturbation of one character moves that character's output the most.
  PrecisionScope wide(Precision::Wide);
  auto cfg = ModelConfig::toy();
  Initializer init(13);
  TextEncoder text(cfg, init);
  PromptEncoder prompt(text);
  std::mt19937_64 rng(14);
  auto tr = random_tensor({9, cfg.prompt_dim}, rng, false, -0.05, 0.05);
  auto base = encode_prompt_sum(prompt, tr);
  for (std::size_t r = 0; r < 9; ++r) {
    std::vector<double> v(tr.values().begin(), tr.values().end());
    v[r * cfg.prompt_dim] += 0.5;
    auto out = encode_prompt_sum(prompt, Tensor(tr.shape(), v));
    std::size_t best = 0;
    double best_delta = -1.0;
    for (std::size_t row = 0; row < 9; ++row) {
      double delta = 0.0;
      for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
        delta += std::abs(out[row * cfg.embed_dim + c] - base[row * cfg.embed_dim + c]);
      }
      if (delta > best_delta) best_delta = delta, best = row;
    }
    CHECK(best == r);
  }
}
