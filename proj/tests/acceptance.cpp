// Acceptance run: one PASS/FAIL line per criterion with its measured values.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rpt/errors.hpp"
#include "rpt/losses.hpp"
#include "rpt/matching.hpp"
#include "rpt/model.hpp"
#include "rpt/ops.hpp"
#include "rpt/region.hpp"
#include "rpt/train.hpp"

using namespace rpt;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

void open_gates(InteractionGates& g, double v) {
  for (Tensor* t : {&g.l1, &g.l2, &g.l3, &g.l4}) t->mutable_values()[0] = v;
}

Outcome gradient_integrity() {
  const auto r = gradient_check(ModelConfig::micro(), 1, true);
  return {r.result.max_relative_error < 1e-3,
          fmt("%zu parameters, %zu coordinates, max relative error %.3e (%s)", r.parameters, r.result.coordinates,
              r.result.max_relative_error, r.worst_parameter.c_str())};
}

Outcome region_algebra() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> grid(1, 5), tile(1, 4), width(1, 6);
  std::size_t failures = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = grid(rng), th = tile(rng), tw = tile(rng), c = width(rng);
    const Tensor map = random_tensor({k * th, k * tw, c}, rng);
    const auto tokens = split_feature_map(map, k);
    bool ok = tokens.size() == k * k && bit_equal(concat_tokens(tokens, k), map);

    const Tensor rows = random_tensor({k * k, c}, rng);
    const auto split = split_embeddings(map, rows, k);
    ok = ok && bit_equal(concat_tokens(split.tokens, k), map) && bit_equal(concat_rows(split.chars), rows);

    // Painted grid: cell a carries the value a everywhere.
    std::vector<double> painted(map.size());
    for (std::size_t i = 0; i < k * th; ++i)
      for (std::size_t j = 0; j < k * tw; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) painted[(i * k * tw + j) * c + ch] = double((i / th) * k + j / tw);
    const Tensor painted_map({k * th, k * tw, c}, painted);
    const auto painted_tokens = split_feature_map(painted_map, k);
    for (std::size_t a = 0; a < painted_tokens.size(); ++a)
      for (double v : painted_tokens[a].values()) ok = ok && v == double(a);

    // Per-tile means through an identity projection recover the painted values.
    LinearLayer identity = LinearLayer::zeros(c, c, false);
    for (std::size_t i = 0; i < c; ++i) identity.weight.mutable_values()[i * c + i] = 1.0;
    const Tensor pos = derive_shared_position_embedding(painted_map, k, identity);
    for (std::size_t a = 0; a < k * k; ++a)
      for (std::size_t ch = 0; ch < c; ++ch) ok = ok && pos[a * c + ch] == double(a);

    // Region scores land in their own cell: every token points along the first
    // axis and character a at angle a/10, so cell a scores sigmoid(cos(a/10)/tau).
    if (c >= 2) {
      PrecisionScope wide(Precision::Wide);
      std::vector<Tensor> st, sc;
      for (std::size_t a = 0; a < k * k; ++a) {
        std::vector<double> t(th * tw * c, 0.0), ch(c, 0.0);
        for (std::size_t p = 0; p < th * tw; ++p) t[p * c] = 1.0;
        ch[0] = std::cos(0.1 * double(a));
        ch[1] = std::sin(0.1 * double(a));
        st.emplace_back(Shape{th, tw, c}, t);
        sc.emplace_back(Shape{1, c}, ch);
      }
      const ScoreMap s = region_score_map(sc, st, 0.07);
      ok = ok && s.grid.shape() == Shape{k * th, k * tw, 1};
      for (std::size_t i = 0; ok && i < k * th; ++i) {
        for (std::size_t j = 0; j < k * tw; ++j) {
          const double a = double((i / th) * k + j / tw);
          const double expected = 1.0 / (1.0 + std::exp(-std::cos(0.1 * a) / 0.07));
          ok = ok && std::abs(s.grid[i * k * tw + j] - expected) < 1e-12;
        }
      }
    }
    if (!ok) ++failures;
  }
  return {failures == 0, fmt("200 random shapes, %zu failures", failures)};
}

Outcome locality() {
  auto c = ModelConfig::toy();
  c.precision = Precision::Wide;
  RptModel model(c, 3);
  open_gates(model.gates, 0.5);
  PrecisionScope wide(c.precision);
  const std::size_t n = c.grid * c.grid;
  std::mt19937_64 rng(31);

  const Tensor chars = random_tensor({n, c.prompt_dim}, rng);
  const auto tokens = split_feature_map(random_tensor({c.feature_h(), c.feature_w(), c.feature_dim}, rng), c.grid);
  const auto pre = pre_encode_interaction(chars, tokens, model.gates, model.dec1, model.dec2);

  std::vector<Tensor> post_chars, post_tokens;
  for (std::size_t a = 0; a < n; ++a) {
    post_chars.push_back(random_tensor({1, c.embed_dim}, rng));
    post_tokens.push_back(random_tensor({c.token_h(), c.token_w(), c.embed_dim}, rng));
  }
  const auto post = post_encode_interaction(post_chars, post_tokens, model.gates, model.dec3, model.dec4);
  const ScoreMap scores = region_score_map(post.chars, post.tokens, c.tau);

  auto one_hot = [](const Tensor& t, std::size_t index) {
    std::vector<double> v(t.values().begin(), t.values().end());
    v[index] += 1.0;
    return Tensor(t.shape(), v);
  };

  std::size_t violations = 0, checked = 0;
  for (std::size_t b = 0; b < n; ++b) {
    auto moved = tokens;
    moved[b] = one_hot(tokens[b], (b * 7) % tokens[b].size());
    const auto r = pre_encode_interaction(chars, moved, model.gates, model.dec1, model.dec2);
    for (std::size_t a = 0; a < n; ++a) {
      ++checked;
      if (a != b && (!bit_equal(r.chars[a], pre.chars[a]) || !bit_equal(r.tokens[a], pre.tokens[a]))) ++violations;
      if (a == b && bit_equal(r.chars[a], pre.chars[a])) ++violations;  // the pair must still interact
    }

    auto moved_post = post_tokens;
    moved_post[b] = one_hot(post_tokens[b], (b * 5) % post_tokens[b].size());
    const auto q = post_encode_interaction(post_chars, moved_post, model.gates, model.dec3, model.dec4);
    for (std::size_t a = 0; a < n; ++a) {
      ++checked;
      if (a != b && (!bit_equal(q.chars[a], post.chars[a]) || !bit_equal(q.tokens[a], post.tokens[a]))) ++violations;
    }

    const ScoreMap s = region_score_map(q.chars, q.tokens, c.tau);
    for (std::size_t i = 0; i < c.feature_h(); ++i) {
      for (std::size_t j = 0; j < c.feature_w(); ++j) {
        const std::size_t cell = (i / c.token_h()) * c.grid + j / c.token_w();
        const std::size_t p = i * c.feature_w() + j;
        ++checked;
        if (cell != b && s.grid[p] != scores.grid[p]) ++violations;
      }
    }
  }
  return {violations == 0, fmt("%zu exact comparisons over %zu perturbed tokens, %zu violations", checked, n,
                               violations)};
}

Outcome ablation_identity() {
  const auto base = ModelConfig::toy();
  const Scene scene = generate_scene(12, base);

  auto off = base;
  off.flags = ablation_rows()[1].flags;  // general prompt only
  const RptModel plain(off, 11);
  bool first = false;
  {
    PrecisionScope precision(off.precision);
    PromptBank bank{embed_fixed_word(plain.vocab, off.fixed_word), plain.general_prompt, plain.region_prompt};
    const Tensor text_out = encode_text(plain.text, build_text_input(bank));
    const Tensor image_embedding =
        attention_pool(plain.pool, encode_image(plain.backbone, scene.image), plain.position);
    const ScoreMap expected =
        upsample_to_pixels(global_score_map(text_out, image_embedding, off.tau), off.height, off.width);
    first = bit_equal(forward_full(plain, scene.image).pixel.grid, expected.grid);
  }

  RptModel model(base, 21);
  open_gates(model.gates, 0.3);
  model.fusion.readout.bias.mutable_values()[0] = 0.1;
  model.gates = InteractionGates::zeros();
  model.fusion.zero();
  const auto r = forward_full(model, scene.image);
  PrecisionScope precision(base.precision);
  const ScoreMap sum{add(r.global.grid, r.region.grid), ScoreMap::Resolution::Feature};
  const bool second = bit_equal(r.pixel.grid, upsample_to_pixels(sum, base.height, base.width).grid);
  return {first && second, fmt("region flags off == image-text pipeline: %s; zeroed gates and fusion == "
                               "upsample(S_glo + S_reg): %s",
                               first ? "bit-exact" : "differs", second ? "bit-exact" : "differs")};
}

Outcome loss_identities() {
  PrecisionScope wide(Precision::Wide);
  const double same = bidirectional_distance_loss(Tensor({2, 2}, {0.5, 1.5, 1.5, 0.5}),
                                                  Tensor({3, 2}, {1, 1, 1, 1, 1, 1}))
                          .item();
  const double swapped = bidirectional_distance_loss(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {2, 1})).item();
  std::vector<double> mask(16, 0.0);
  for (std::size_t i = 0; i < 16; i += 3) mask[i] = 1.0;
  const double half = matching_loss(Tensor({4, 4, 1}, std::vector<double>(16, 0.5)), mask).item();

  double worst_sum = 0.0;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng), m = u(rng), l1 = u(rng), l2 = u(rng);
    const LossReport r = total_loss(a, b, m, l1, l2);
    worst_sum = std::max(worst_sum, std::abs(r.l_sum - (a + l1 * b + l2 * m)));
  }
  const auto c = ModelConfig::toy();
  const RptModel model(c, 1);
  const Scene scene = generate_scene(2, c);
  const LossReport r = compute_loss(model, forward_full(model, scene.image), scene.mask).report;
  worst_sum = std::max(worst_sum, std::abs(r.l_sum - (r.l_db + r.lambda_bd * r.l_bd + r.lambda_mat * r.l_mat)));

  const bool ok = same < 1e-6 && std::abs(swapped - 0.2) < 1e-6 && std::abs(half - std::log(2.0)) < 1e-6 &&
                  worst_sum < 1e-6;
  return {ok, fmt("L_BD(same) %.2e, L_BD(swapped) %.9f, matching(0.5) - ln 2 = %.2e, sum identity error %.2e", same,
                  swapped, half - std::log(2.0), worst_sum)};
}

Outcome overfit() {
  const auto c = ModelConfig::toy();
  const auto scenes = generate_scenes(1, 8, c);
  TrainState state(c, 1);
  TrainOptions options;
  options.steps = 500;
  const auto history = train(state, scenes, options);
  const EvalReport e = evaluate(state.model, scenes);
  const double first = history.front().l_sum, last = history.back().l_sum;
  const bool ok = c.learning_rate == 1e-3 && e.pixel_f >= 0.90 && last < 0.5 * first;
  return {ok, fmt("pixel F %.4f (box F %.4f), l_sum %.4f -> %.4f (ratio %.3f)", e.pixel_f, e.box_f, first, last,
                  last / first)};
}

Outcome grid_sweep() {
  std::string detail;
  bool ok = true;
  for (std::size_t k : {2, 3, 4}) {
    auto c = ModelConfig::toy();
    c.grid = k;
    c.region_len = k * k;
    const auto scenes = generate_scenes(1, 8, c);
    TrainState state(c, 1);
    TrainOptions options;
    options.steps = 20;
    const auto history = train(state, scenes, options);
    const auto fwd = forward_full(state.model, scenes[0].image);
    const auto split =
        split_embeddings(attention_pool(state.model.pool, encode_image(state.model.backbone, scenes[0].image),
                                        state.model.position),
                         encode_prompt(state.model.prompt, state.model.region_prompt,
                                       derive_shared_position_embedding(state.model.position, k, state.model.ln1)),
                         k);
    const bool counts = state.model.region_prompt.extent(0) == k * k && split.chars.size() == k * k &&
                        split.tokens.size() == k * k;
    const bool finite = std::isfinite(history.back().l_sum) && std::isfinite(fwd.pixel.grid[0]);
    ok = ok && counts && finite;
    detail += fmt("k=%zu: N2=%zu chars=%zu tokens=%zu l_sum %.3f -> %.3f; ", k, state.model.region_prompt.extent(0),
                  split.chars.size(), split.tokens.size(), history.front().l_sum, history.back().l_sum);
  }
  return {ok, detail};
}

Outcome determinism_and_persistence() {
  const auto c = ModelConfig::toy();
  const auto scenes = generate_scenes(1, 8, c);
  TrainOptions options;
  options.steps = 10;
  TrainState a(c, 7), b(c, 7);
  const auto ha = train(a, scenes, options);
  const auto hb = train(b, scenes, options);
  bool same_losses = true;
  for (std::size_t i = 0; i < ha.size(); ++i)
    same_losses = same_losses && ha[i].l_db == hb[i].l_db && ha[i].l_bd == hb[i].l_bd &&
                  ha[i].l_mat == hb[i].l_mat && ha[i].l_sum == hb[i].l_sum;

  const auto dir = std::filesystem::temp_directory_path() / "rpt_acceptance";
  std::filesystem::create_directories(dir);
  const std::string ckpt = (dir / "model.rpt").string();
  save_checkpoint(a, ckpt);
  const TrainState loaded = load_checkpoint(ckpt);
  bool same_forward = true;
  for (const auto& scene : scenes)
    same_forward = same_forward &&
                   bit_equal(forward_full(loaded.model, scene.image).pixel.grid,
                             forward_full(a.model, scene.image).pixel.grid);

  NoGradScope no_grad;
  const Tensor prob = probability_map(loaded.model, forward_full(loaded.model, scenes[0].image));
  const std::string heatmap = (dir / "heatmap.pgm").string();
  write_pgm(heatmap, prob.values(), c.height, c.width);
  std::size_t h = 0, w = 0;
  const auto back = read_pgm(heatmap, h, w);
  double worst = 0.0;
  for (std::size_t i = 0; i < back.size(); ++i)
    worst = std::max(worst, std::abs(back[i] - std::clamp(prob[i], 0.0, 1.0)));
  std::filesystem::remove_all(dir);

  const bool heat_ok = h == c.height && w == c.width && worst <= 1.0 / 255.0;
  return {same_losses && same_forward && heat_ok,
          fmt("first 10 losses %s; checkpoint forward %s; heatmap max error %.5f (limit %.5f)",
              same_losses ? "bit-identical" : "differ", same_forward ? "bit-exact" : "differs", worst, 1.0 / 255.0)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_seconds;  // 0 for none
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", 60, gradient_integrity},
      {2, "region algebra", 5, region_algebra},
      {3, "locality", 10, locality},
      {4, "ablation identity", 5, ablation_identity},
      {5, "loss identities", 0, loss_identities},
      {6, "overfit capability", 600, overfit},
      {7, "grid-size sweep", 0, grid_sweep},
      {8, "determinism and persistence", 0, determinism_and_persistence},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.limit_seconds == 0 || seconds < c.limit_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failed;
    const std::string limit = c.limit_seconds > 0 ? fmt(", limit %.0fs", c.limit_seconds) : "";
    std::printf("%s %d %s: %s [%.1fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), seconds,
                limit.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
