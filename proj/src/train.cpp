#include "rpt/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "rpt/errors.hpp"
#include "rpt/ops.hpp"

namespace rpt {

namespace {

std::vector<NamedParameter> trainable(const RptModel& model) {
  std::vector<NamedParameter> out;
  for (auto& p : model.parameters())
    if (p.trainable) out.push_back(p);
  return out;
}

bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

[[noreturn]] void diagnose_non_finite(const TrainState& state, const std::vector<Scene>& scenes, std::size_t scene) {
  for (const auto& p : state.model.parameters()) {
    if (!finite(p.tensor.values())) throw NonFiniteError("non-finite parameter '" + p.name + "'");
  }
  // Replay the failing forward pass with per-op checks to name the first bad op.
  DebugChecksScope checks(true);
  NoGradScope no_grad;
  try {
    auto fwd = forward_full(state.model, scenes[scene].image);
    compute_loss(state.model, fwd, scenes[scene].mask);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("non-finite loss at step " + std::to_string(state.step + 1) + " on scene " +
                         std::to_string(scene) + ": " + e.what());
  }
  throw NonFiniteError("non-finite loss at step " + std::to_string(state.step + 1) + " on scene " +
                       std::to_string(scene));
}

}  // namespace

TrainState::TrainState(const ModelConfig& config, std::uint64_t seed_) : model(config, seed_), seed(seed_) {
  for (const auto& p : trainable(model)) {
    first_moment.emplace_back(p.tensor.size(), 0.0);
    second_moment.emplace_back(p.tensor.size(), 0.0);
  }
}

LossReport train_step(TrainState& state, const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw ContractError("train_step: no scenes");
  const ModelConfig& c = state.model.config();
  PrecisionScope precision(c.precision);
  auto params = trainable(state.model);
  for (auto& p : params) p.tensor.zero_grad();

  const double inv_n = 1.0 / static_cast<double>(scenes.size());
  LossReport mean{};
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const ForwardResult fwd = forward_full(state.model, scenes[s].image);
    const LossTerms terms = compute_loss(state.model, fwd, scenes[s].mask);
    if (!std::isfinite(terms.report.l_sum)) diagnose_non_finite(state, scenes, s);
    backward(scale(terms.l_sum, inv_n));
    mean.l_db += terms.report.l_db * inv_n;
    mean.l_bd += terms.report.l_bd * inv_n;
    mean.l_mat += terms.report.l_mat * inv_n;
    mean.l_sum += terms.report.l_sum * inv_n;
    mean.lambda_bd = terms.report.lambda_bd;
    mean.lambda_mat = terms.report.lambda_mat;
  }

  ++state.step;
  const AdamOptions& a = state.adam;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(a.beta1, t);
  const double correct2 = 1.0 - std::pow(a.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (!p.has_grad()) continue;  // unused by the enabled components
    const auto g = p.grad();
    if (!finite(g)) throw NonFiniteError("non-finite gradient for '" + params[i].name + "'");
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    auto values = p.mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = round_to_precision(a.beta1 * m[j] + (1.0 - a.beta1) * g[j]);
      v[j] = round_to_precision(a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j]);
      const double mhat = m[j] / correct1, vhat = v[j] / correct2;
      values[j] = round_to_precision(values[j] - c.learning_rate * mhat / (std::sqrt(vhat) + a.eps));
    }
    p.zero_grad();
  }
  return mean;
}

std::string metrics_line(std::size_t step, const LossReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g", step, r.l_db, r.l_bd, r.l_mat, r.l_sum);
  return buf;
}

std::vector<LossReport> train(TrainState& state, const std::vector<Scene>& scenes, const TrainOptions& options) {
  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const std::string path = options.out_dir + "/metrics.tsv";
    metrics.open(path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write " + path);
  }
  std::vector<LossReport> history;
  for (std::size_t i = 0; i < options.steps; ++i) {
    const LossReport r = train_step(state, scenes);
    history.push_back(r);
    if (metrics.is_open()) metrics << metrics_line(state.step, r) << '\n' << std::flush;
    if (options.on_step) options.on_step(state.step, r);
    if (!options.out_dir.empty() && options.checkpoint_every > 0 && state.step % options.checkpoint_every == 0) {
      save_checkpoint(state, options.out_dir + "/step_" + std::to_string(state.step) + ".rpt");
    }
  }
  if (!options.out_dir.empty()) save_checkpoint(state, options.out_dir + "/final.rpt");
  return history;
}

// ---- checkpoints -------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'R', 'P', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError(path + ": truncated checkpoint");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

template <typename Word>
void put_word(std::ostream& out, Word w) {
  unsigned char b[sizeof(Word)];
  for (std::size_t i = 0; i < sizeof(Word); ++i) b[i] = static_cast<unsigned char>(w >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(Word));
}

template <typename Word>
Word get_word(std::istream& in, const std::string& path) {
  unsigned char b[sizeof(Word)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(Word))) throw IoError(path + ": truncated checkpoint");
  Word w = 0;
  for (std::size_t i = 0; i < sizeof(Word); ++i) w |= Word(b[i]) << (8 * i);
  return w;
}

struct Record {
  Shape shape;
  std::vector<double> values;
};

void put_record(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> values,
                bool wide) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : values) {
    if (wide) {
      put_word(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_word(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

// The seed as four exactly representable 16-bit pieces.
std::vector<double> seed_pieces(std::uint64_t seed) {
  return {double(seed & 0xffff), double((seed >> 16) & 0xffff), double((seed >> 32) & 0xffff), double(seed >> 48)};
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  const ModelConfig& c = state.model.config();
  const bool wide = c.precision == Precision::Wide;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic, 4);
  const std::string text = to_config_text(c);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto params = state.model.parameters();
  const auto train_params = trainable(state.model);
  put_u32(out, static_cast<std::uint32_t>(params.size() + 2 * train_params.size() + 2));
  for (const auto& p : params) put_record(out, p.name, p.tensor.shape(), p.tensor.values(), wide);
  for (std::size_t i = 0; i < train_params.size(); ++i) {
    put_record(out, "adam.m." + train_params[i].name, train_params[i].tensor.shape(), state.first_moment[i], wide);
    put_record(out, "adam.v." + train_params[i].name, train_params[i].tensor.shape(), state.second_moment[i], wide);
  }
  const double step = static_cast<double>(state.step);
  put_record(out, "train.step", {1}, std::span<const double>(&step, 1), wide);
  const auto pieces = seed_pieces(state.seed);
  put_record(out, "train.seed", {4}, pieces, wide);
  if (!out) throw IoError("failed writing checkpoint " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not an RPT1 checkpoint");
  std::string text(get_u32(in, path), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(text.size()))) throw IoError(path + ": truncated config");
  const ModelConfig config = parse_config(text);
  const bool wide = config.precision == Precision::Wide;

  std::map<std::string, Record> records;
  const std::uint32_t count = get_u32(in, path);
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name(get_u32(in, path), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError(path + ": truncated name");
    Record rec;
    const std::uint32_t rank = get_u32(in, path);
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(get_u32(in, path));
    rec.values.resize(numel(rec.shape));
    for (auto& v : rec.values) {
      v = wide ? std::bit_cast<double>(get_word<std::uint64_t>(in, path))
               : static_cast<double>(std::bit_cast<float>(get_word<std::uint32_t>(in, path)));
    }
    records.emplace(std::move(name), std::move(rec));
  }

  auto take = [&](const std::string& name, const Shape& shape) -> const std::vector<double>& {
    auto it = records.find(name);
    if (it == records.end()) throw IoError(path + ": missing tensor '" + name + "'");
    if (it->second.shape != shape) {
      throw IoError(path + ": tensor '" + name + "' has shape " + to_string(it->second.shape) + ", expected " +
                    to_string(shape));
    }
    return it->second.values;
  };

  const auto& seed = take("train.seed", {4});
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < 4; ++i) s |= static_cast<std::uint64_t>(seed[i]) << (16 * i);
  TrainState state(config, s);
  state.step = static_cast<std::size_t>(take("train.step", {1})[0]);
  for (auto& p : state.model.parameters()) {
    const auto& v = take(p.name, p.tensor.shape());
    std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
  }
  const auto train_params = trainable(state.model);
  for (std::size_t i = 0; i < train_params.size(); ++i) {
    state.first_moment[i] = take("adam.m." + train_params[i].name, train_params[i].tensor.shape());
    state.second_moment[i] = take("adam.v." + train_params[i].name, train_params[i].tensor.shape());
  }
  return state;
}

std::uint64_t frozen_digest(const RptModel& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.parameters()) {
    if (p.trainable) continue;
    for (double v : p.tensor.values()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

// ---- evaluation --------------------------------------------------------

std::vector<Box> component_boxes(std::span<const double> binary, std::size_t height, std::size_t width) {
  if (binary.size() != height * width) throw DimensionError("component_boxes: mask size does not match extents");
  std::vector<char> seen(binary.size(), 0);
  std::vector<Box> boxes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < binary.size(); ++start) {
    if (seen[start] || binary[start] < 0.5) continue;
    Box b{start % width, start / width, start % width, start / width};
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / width, x = p % width;
      b.x0 = std::min(b.x0, x);
      b.x1 = std::max(b.x1, x);
      b.y0 = std::min(b.y0, y);
      b.y1 = std::max(b.y1, y);
      auto visit = [&](std::size_t q) {
        if (!seen[q] && binary[q] >= 0.5) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < width) visit(p + 1);
      if (y > 0) visit(p - width);
      if (y + 1 < height) visit(p + width);
    }
    boxes.push_back(b);
  }
  return boxes;
}

double box_iou(const Box& a, const Box& b) {
  auto area = [](const Box& r) { return double(r.x1 - r.x0 + 1) * double(r.y1 - r.y0 + 1); };
  const std::size_t x0 = std::max(a.x0, b.x0), y0 = std::max(a.y0, b.y0);
  const std::size_t x1 = std::min(a.x1, b.x1), y1 = std::min(a.y1, b.y1);
  const double inter = (x0 > x1 || y0 > y1) ? 0.0 : double(x1 - x0 + 1) * double(y1 - y0 + 1);
  return inter / (area(a) + area(b) - inter);
}

namespace {

void fill_prf(double tp, double fp, double fn, double& p, double& r, double& f) {
  // Empty prediction against empty ground truth counts as perfect.
  p = (tp + fp) > 0 ? tp / (tp + fp) : (fn == 0 ? 1.0 : 0.0);
  r = (tp + fn) > 0 ? tp / (tp + fn) : (fp == 0 ? 1.0 : 0.0);
  f = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
}

}  // namespace

EvalReport evaluate_masks(const std::vector<std::vector<double>>& predictions,
                          const std::vector<std::vector<double>>& masks, std::size_t height, std::size_t width) {
  if (predictions.size() != masks.size() || predictions.empty()) {
    throw ContractError("evaluate: need one prediction per scene and at least one scene");
  }
  double ptp = 0, pfp = 0, pfn = 0, btp = 0, bfp = 0, bfn = 0;
  for (std::size_t s = 0; s < masks.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& gt = masks[s];
    if (pred.size() != height * width || gt.size() != height * width) {
      throw DimensionError("evaluate: prediction or mask does not match " + std::to_string(height) + "x" +
                           std::to_string(width));
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool p = pred[i] >= 0.5, g = gt[i] >= 0.5;
      ptp += p && g;
      pfp += p && !g;
      pfn += !p && g;
    }
    const auto pb = component_boxes(pred, height, width);
    const auto gb = component_boxes(gt, height, width);
    struct Pair {
      double iou;
      std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < pb.size(); ++i)
      for (std::size_t j = 0; j < gb.size(); ++j)
        if (double iou = box_iou(pb[i], gb[j]); iou >= 0.5) pairs.push_back({iou, i, j});
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::vector<char> used_p(pb.size(), 0), used_g(gb.size(), 0);
    double matched = 0;
    for (const auto& pr : pairs) {
      if (used_p[pr.p] || used_g[pr.g]) continue;
      used_p[pr.p] = used_g[pr.g] = 1;
      ++matched;
    }
    btp += matched;
    bfp += static_cast<double>(pb.size()) - matched;
    bfn += static_cast<double>(gb.size()) - matched;
  }
  EvalReport r;
  fill_prf(ptp, pfp, pfn, r.pixel_precision, r.pixel_recall, r.pixel_f);
  fill_prf(btp, bfp, bfn, r.box_precision, r.box_recall, r.box_f);
  return r;
}

EvalReport evaluate(const RptModel& model, const std::vector<Scene>& scenes, double threshold) {
  if (scenes.empty()) throw ContractError("evaluate: no scenes");
  NoGradScope no_grad;
  std::vector<std::vector<double>> preds, masks;
  for (const auto& scene : scenes) {
    const Tensor prob = probability_map(model, forward_full(model, scene.image));
    std::vector<double> binary(prob.size());
    for (std::size_t i = 0; i < binary.size(); ++i) binary[i] = prob[i] >= threshold ? 1.0 : 0.0;
    preds.push_back(std::move(binary));
    masks.push_back(scene.mask);
  }
  return evaluate_masks(preds, masks, model.config().height, model.config().width);
}

std::vector<AblationRow> ablation_rows() {
  std::vector<AblationRow> rows;
  AblationFlags f{false, false, false, false, false, false, false};
  rows.push_back({"baseline", f});
  f.general_prompt = true;
  rows.push_back({"+general prompt", f});
  f.region_prompt = f.feature_enhancement = true;
  rows.push_back({"+region prompt, enhancement", f});
  f.shared_pos_embed = true;
  rows.push_back({"+shared position", f});
  f.interaction = true;
  rows.push_back({"+interaction", f});
  f.bd_loss = true;
  rows.push_back({"+distance loss", f});
  f.feature_fusion = true;
  rows.push_back({"+fusion", f});
  return rows;
}

GradientCheckReport gradient_check(const ModelConfig& base, std::uint64_t seed, bool full, double eps) {
  ModelConfig c = base;
  c.precision = Precision::Wide;
  PrecisionScope precision(c.precision);
  RptModel model(c, seed);
  const Scene scene = generate_scene(seed, c);

  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (auto& p : model.parameters()) {
    if (!p.trainable) continue;
    auto v = p.tensor.mutable_values();
    if (p.name.starts_with("gates.")) {
      std::fill(v.begin(), v.end(), 0.5);
    } else if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
      for (auto& x : v) x = noise(rng);
    }
  }

  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (auto& p : model.parameters()) {
    if (!p.trainable) continue;
    const bool core = p.name.starts_with("gates.") || p.name.ends_with("_prompt") || p.name.starts_with("head.") ||
                      p.name.starts_with("fusion.readout") || p.name == "position";
    if (!full && !core) continue;
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  const auto loss = [&] { return compute_loss(model, forward_full(model, scene.image), scene.mask).l_sum; };
  GradientCheckReport report;
  report.result = grad_check(loss, inputs, eps);
  report.parameters = inputs.size();
  report.worst_parameter = inputs.empty() ? "" : names[report.result.worst_input];
  return report;
}

}  // namespace rpt
