#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rpt/errors.hpp"
#include "rpt/region.hpp"
#include "test_util.hpp"

using namespace rpt;
using rpt::testing::bit_equal;
using rpt::testing::random_tensor;
using rpt::testing::weighted_sum;

namespace {

// Cell a of a k x k grid over an (k*th) x (k*tw) x c map holds a * 100 everywhere.
Tensor painted_grid(std::size_t k, std::size_t th, std::size_t tw, std::size_t c) {
  const std::size_t h = k * th, w = k * tw;
  std::vector<double> v(h * w * c);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) v[(i * w + j) * c + ch] = 100.0 * static_cast<double>((i / th) * k + j / tw);
  return Tensor({h, w, c}, v);
}

void set_gates(InteractionGates& g, double v) {
  for (Tensor* t : {&g.l1, &g.l2, &g.l3, &g.l4}) t->mutable_values()[0] = v;
}

struct Fixture {
  static constexpr std::size_t k = 3, th = 2, tw = 2, cp = 6, cv = 8;
  Initializer init{21};
  StackSpec spec{1, 3, 6};
  InteractionBranch dec1{cp, cv, spec, init}, dec2{cv, cp, spec, init};
  InteractionBranch dec3{cp, cp, spec, init}, dec4{cp, cp, spec, init};
  InteractionGates gates = InteractionGates::zeros();
  std::mt19937_64 rng{22};
  Tensor chars = random_tensor({k * k, cp}, rng, false);
  std::vector<Tensor> tokens = [&] {
    std::vector<Tensor> t;
    for (std::size_t a = 0; a < k * k; ++a) t.push_back(random_tensor({th, tw, cv}, rng, false));
    return t;
  }();
};

}  // namespace

TEST_CASE("split_feature_map tiling") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({6, 6, 2}, rng, false);
  auto tokens = split_feature_map(x, 3);
  REQUIRE(tokens.size() == 9);
  for (const auto& t : tokens) CHECK(t.shape() == Shape{2, 2, 2});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 2; ++c) CHECK(tokens[0][(i * 2 + j) * 2 + c] == x[(i * 6 + j) * 2 + c]);

  auto whole = split_feature_map(x, 1);
  REQUIRE(whole.size() == 1);
  CHECK(bit_equal(whole[0], x));
  CHECK(bit_equal(concat_tokens(whole, 1), x));

  CHECK_THROWS_AS(split_feature_map(Tensor::zeros({7, 6, 1}), 3), ConfigError);
}

TEST_CASE("painted grid oracle and round trip") {
  for (std::size_t k : {1u, 2u, 3u, 4u}) {
    auto map = painted_grid(k, 2, 3, 2);
    auto tokens = split_feature_map(map, k);
    for (std::size_t a = 0; a < tokens.size(); ++a) {
      for (double v : tokens[a].values()) CHECK(v == 100.0 * static_cast<double>(a));
    }
    CHECK(bit_equal(concat_tokens(tokens, k), map));
  }
  std::mt19937_64 rng(2);
  auto x = random_tensor({12, 12, 5}, rng, false);
  CHECK(bit_equal(concat_tokens(split_feature_map(x, 4), 4), x));

  auto tokens = split_feature_map(x, 3);
  CHECK_THROWS_AS(concat_tokens(std::span<const Tensor>(tokens).first(8), 3), DimensionError);
  tokens[4] = Tensor::zeros({4, 3, 5});
  CHECK_THROWS_AS(concat_tokens(tokens, 3), DimensionError);
}

TEST_CASE("shared position embedding") {
  PrecisionScope wide(Precision::Wide);
  SUBCASE("constant field gives identical characters") {
    Initializer init(3);
    auto ln1 = LinearLayer::normal(4, 3, 0.5, init);
    auto out = derive_shared_position_embedding(Tensor::full({6, 6, 4}, 0.25), 3, ln1);
    auto expect = ln1.forward(Tensor::full({1, 4}, 0.25));
    CHECK(out.shape() == Shape{9, 3});
    for (std::size_t a = 0; a < 9; ++a)
      for (std::size_t c = 0; c < 3; ++c) CHECK(out[a * 3 + c] == doctest::Approx(expect[c]).epsilon(1e-12));
  }

  SUBCASE("averaging projection over painted tokens") {
    auto ln1 = LinearLayer::zeros(2, 1);
    ln1.weight.mutable_values()[0] = 0.5;
    ln1.weight.mutable_values()[1] = 0.5;
    auto p = scale(painted_grid(3, 2, 2, 2), 0.01);  // token a holds (a, a)
    auto out = derive_shared_position_embedding(p, 3, ln1);
    for (std::size_t a = 0; a < 9; ++a) CHECK(out[a] == doctest::Approx(static_cast<double>(a)));
  }

  SUBCASE("one row per token for the published grid sizes") {
    for (std::size_t k : {3u, 4u, 5u}) {
      Initializer init(4);
      auto ln1 = LinearLayer::normal(8, 5, 0.3, init);
      std::mt19937_64 rng(5);
      auto out = derive_shared_position_embedding(random_tensor({2 * k, 3 * k, 8}, rng, false), k, ln1);
      CHECK(out.shape() == Shape{k * k, 5});
    }
  }

  SUBCASE("linear in P") {
    Initializer init(6);
    auto ln1 = LinearLayer::normal(8, 5, 0.3, init);
    std::mt19937_64 rng(7);
    auto p = random_tensor({6, 6, 8}, rng, false);
    auto once = derive_shared_position_embedding(p, 3, ln1);
    auto twice = derive_shared_position_embedding(scale(p, 2.0), 3, ln1);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(twice[i] - 2.0 * once[i]) < 1e-6);
  }

  SUBCASE("gradient reaches P and the projection") {
    Initializer init(8);
    auto ln1 = LinearLayer::normal(4, 3, 0.3, init);
    std::mt19937_64 rng(9);
    auto p = random_tensor({4, 4, 4}, rng);
    std::vector<Tensor> in{p, ln1.weight};
    auto r = grad_check([&] { return weighted_sum(derive_shared_position_embedding(p, 2, ln1)); }, in);
    CHECK(r.max_relative_error < 1e-6);
  }
}

TEST_CASE("pre-encoding interaction") {
  PrecisionScope wide(Precision::Wide);
  Fixture f;

  SUBCASE("zero gates are a no-op") {
    auto r = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
    for (std::size_t a = 0; a < 9; ++a) {
      CHECK(bit_equal(r.chars[a], slice_rows(f.chars, a, 1)));
      CHECK(bit_equal(r.tokens[a], f.tokens[a]));
    }
  }

  SUBCASE("zeroed decoder outputs are a no-op for any gate") {
    set_gates(f.gates, 1.7);
    f.dec1.decoder.zero_branch_outputs();
    f.dec2.decoder.zero_branch_outputs();
    auto r = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
    for (std::size_t a = 0; a < 9; ++a) {
      CHECK(bit_equal(r.chars[a], slice_rows(f.chars, a, 1)));
      CHECK(bit_equal(r.tokens[a], f.tokens[a]));
    }
  }

  SUBCASE("open gates change both sides") {
    set_gates(f.gates, 0.5);
    auto r = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
    CHECK_FALSE(bit_equal(r.chars[0], slice_rows(f.chars, 0, 1)));
    CHECK_FALSE(bit_equal(r.tokens[0], f.tokens[0]));
  }

  SUBCASE("character a depends on token a only") {
    set_gates(f.gates, 0.5);
    auto base = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
    for (std::size_t b = 0; b < 9; ++b) {
      auto tokens = f.tokens;
      std::vector<double> v(tokens[b].values().begin(), tokens[b].values().end());
      v[3] += 1.0;
      tokens[b] = Tensor(tokens[b].shape(), v);
      std::vector<double> cv(f.chars.values().begin(), f.chars.values().end());
      cv[b * Fixture::cp + 1] += 1.0;
      auto r = pre_encode_interaction(Tensor(f.chars.shape(), cv), tokens, f.gates, f.dec1, f.dec2);
      for (std::size_t a = 0; a < 9; ++a) {
        CHECK(bit_equal(r.chars[a], base.chars[a]) == (a != b));
        CHECK(bit_equal(r.tokens[a], base.tokens[a]) == (a != b));
      }
    }
  }

  SUBCASE("separate position inputs are summed first") {
    set_gates(f.gates, 0.5);
    std::mt19937_64 rng(30);
    auto pos = random_tensor(f.chars.shape(), rng, false);
    std::vector<Tensor> pos_tokens, summed;
    for (const auto& t : f.tokens) {
      pos_tokens.push_back(random_tensor(t.shape(), rng, false));
      summed.push_back(add(t, pos_tokens.back()));
    }
    auto a = pre_encode_interaction(f.chars, pos, f.tokens, pos_tokens, f.gates, f.dec1, f.dec2);
    auto b = pre_encode_interaction(add(f.chars, pos), summed, f.gates, f.dec1, f.dec2);
    for (std::size_t i = 0; i < 9; ++i) CHECK(bit_equal(a.chars[i], b.chars[i]));
  }

  SUBCASE("gates receive gradient at zero") {
    auto r = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
    auto loss = add(weighted_sum(concat_rows(r.chars), 1), weighted_sum(concat_tokens(r.tokens, 3), 2));
    backward(loss);
    REQUIRE(f.gates.l1.has_grad());
    REQUIRE(f.gates.l2.has_grad());
    CHECK(std::abs(f.gates.l1.grad()[0]) > 0.0);
    CHECK(std::abs(f.gates.l2.grad()[0]) > 0.0);
  }

  SUBCASE("gradients match finite differences") {
    set_gates(f.gates, 0.4);
    std::vector<Tensor> in{f.gates.l1, f.gates.l2, f.tokens[4]};
    in[2].set_requires_grad(true);
    f.tokens[4] = in[2];
    auto r = grad_check(
        [&] {
          auto out = pre_encode_interaction(f.chars, f.tokens, f.gates, f.dec1, f.dec2);
          return add(weighted_sum(concat_rows(out.chars), 1), weighted_sum(concat_tokens(out.tokens, 3), 2));
        },
        in);
    CHECK(r.max_relative_error < 1e-5);
  }

  SUBCASE("misaligned inputs") {
    CHECK_THROWS_AS(pre_encode_interaction(slice_rows(f.chars, 0, 8), f.tokens, f.gates, f.dec1, f.dec2),
                    ContractError);
  }
}

TEST_CASE("split_embeddings") {
  std::mt19937_64 rng(40);
  auto io = random_tensor({6, 6, 4}, rng, false);
  auto tp = random_tensor({9, 4}, rng, false);
  auto r = split_embeddings(io, tp, 3);
  REQUIRE(r.tokens.size() == 9);
  REQUIRE(r.chars.size() == 9);
  for (std::size_t a = 0; a < 9; ++a) {
    CHECK(r.tokens[a].shape() == Shape{2, 2, 4});
    CHECK(r.chars[a].shape() == Shape{1, 4});
  }
  CHECK(bit_equal(concat_tokens(r.tokens, 3), io));
  CHECK(bit_equal(concat_rows(r.chars), tp));

  auto single = split_embeddings(io, slice_rows(tp, 0, 1), 1);
  CHECK(single.tokens.size() == 1);
  CHECK(single.chars.size() == 1);
  CHECK_THROWS_AS(split_embeddings(io, tp, 2), DimensionError);
}

TEST_CASE("post-encoding interaction") {
  PrecisionScope wide(Precision::Wide);
  Fixture f;
  std::mt19937_64 rng(50);
  auto io = random_tensor({6, 6, Fixture::cp}, rng, false);
  auto tp = random_tensor({9, Fixture::cp}, rng, false);
  auto s = split_embeddings(io, tp, 3);

  SUBCASE("zero gates are the identity") {
    auto r = post_encode_interaction(s.chars, s.tokens, f.gates, f.dec3, f.dec4);
    for (std::size_t a = 0; a < 9; ++a) {
      CHECK(bit_equal(r.chars[a], s.chars[a]));
      CHECK(bit_equal(r.tokens[a], s.tokens[a]));
    }
  }

  SUBCASE("single region with zeroed decoders is the identity") {
    set_gates(f.gates, 0.9);
    f.dec3.decoder.zero_branch_outputs();
    f.dec4.decoder.zero_branch_outputs();
    auto one = split_embeddings(io, slice_rows(tp, 0, 1), 1);
    auto r = post_encode_interaction(one.chars, one.tokens, f.gates, f.dec3, f.dec4);
    CHECK(bit_equal(r.chars[0], one.chars[0]));
    CHECK(bit_equal(r.tokens[0], one.tokens[0]));
  }

  SUBCASE("locality") {
    set_gates(f.gates, 0.5);
    auto base = post_encode_interaction(s.chars, s.tokens, f.gates, f.dec3, f.dec4);
    for (std::size_t b = 0; b < 9; ++b) {
      auto tokens = s.tokens;
      tokens[b] = add_scalar(tokens[b], 0.3);
      auto r = post_encode_interaction(s.chars, tokens, f.gates, f.dec3, f.dec4);
      for (std::size_t a = 0; a < 9; ++a) {
        CHECK(bit_equal(r.chars[a], base.chars[a]) == (a != b));
      }
    }
  }

  CHECK_THROWS_AS(post_encode_interaction(std::span<const Tensor>(s.chars).first(8), s.tokens, f.gates, f.dec3, f.dec4),
                  ContractError);
}
