#include "rpt/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "rpt/errors.hpp"

namespace rpt {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_real(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(ModelConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ModelConfig&)> get;
};

template <typename Member>
Field size_field(Member m) {
  return {[m](ModelConfig& c, const std::string& k, const std::string& v) { c.*m = parse_size(k, v); },
          [m](const ModelConfig& c) { return std::to_string(c.*m); }};
}

template <typename Member>
Field real_field(Member m) {
  return {[m](ModelConfig& c, const std::string& k, const std::string& v) { c.*m = parse_real(k, v); },
          [m](const ModelConfig& c) { return fmt_real(c.*m); }};
}

template <typename Member>
Field flag_field(Member m) {
  return {[m](ModelConfig& c, const std::string& k, const std::string& v) { c.flags.*m = parse_bool(k, v); },
          [m](const ModelConfig& c) { return std::string(c.flags.*m ? "true" : "false"); }};
}

// Ordered so the text form is stable.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"height", size_field(&ModelConfig::height)},
      {"width", size_field(&ModelConfig::width)},
      {"downsample", size_field(&ModelConfig::downsample)},
      {"grid", size_field(&ModelConfig::grid)},
      {"fixed_len", size_field(&ModelConfig::fixed_len)},
      {"general_len", size_field(&ModelConfig::general_len)},
      {"region_len", size_field(&ModelConfig::region_len)},
      {"prompt_dim", size_field(&ModelConfig::prompt_dim)},
      {"embed_dim", size_field(&ModelConfig::embed_dim)},
      {"feature_dim", size_field(&ModelConfig::feature_dim)},
      {"tau", real_field(&ModelConfig::tau)},
      {"lambda_mix", real_field(&ModelConfig::lambda_mix)},
      {"lambda_bd", real_field(&ModelConfig::lambda_bd)},
      {"lambda_mat", real_field(&ModelConfig::lambda_mat)},
      {"decoder_layers",
       {[](ModelConfig& c, const std::string& k, const std::string& v) { c.decoder.layers = parse_size(k, v); },
        [](const ModelConfig& c) { return std::to_string(c.decoder.layers); }}},
      {"decoder_heads",
       {[](ModelConfig& c, const std::string& k, const std::string& v) { c.decoder.heads = parse_size(k, v); },
        [](const ModelConfig& c) { return std::to_string(c.decoder.heads); }}},
      {"decoder_width",
       {[](ModelConfig& c, const std::string& k, const std::string& v) { c.decoder.width = parse_size(k, v); },
        [](const ModelConfig& c) { return std::to_string(c.decoder.width); }}},
      {"text_layers", size_field(&ModelConfig::text_layers)},
      {"text_heads", size_field(&ModelConfig::text_heads)},
      {"pool_heads", size_field(&ModelConfig::pool_heads)},
      {"db_k", real_field(&ModelConfig::db_k)},
      {"fixed_word",
       {[](ModelConfig& c, const std::string&, const std::string& v) { c.fixed_word = v; },
        [](const ModelConfig& c) { return c.fixed_word; }}},
      {"precision",
       {[](ModelConfig& c, const std::string& k, const std::string& v) {
          if (v == "standard") {
            c.precision = Precision::Standard;
          } else if (v == "wide") {
            c.precision = Precision::Wide;
          } else {
            throw ConfigError("'" + k + "' expects standard or wide, got '" + v + "'");
          }
        },
        [](const ModelConfig& c) { return std::string(c.precision == Precision::Wide ? "wide" : "standard"); }}},
      {"general_prompt", flag_field(&AblationFlags::general_prompt)},
      {"region_prompt", flag_field(&AblationFlags::region_prompt)},
      {"feature_enhancement", flag_field(&AblationFlags::feature_enhancement)},
      {"shared_pos_embed", flag_field(&AblationFlags::shared_pos_embed)},
      {"interaction", flag_field(&AblationFlags::interaction)},
      {"bd_loss", flag_field(&AblationFlags::bd_loss)},
      {"feature_fusion", flag_field(&AblationFlags::feature_fusion)},
      {"learning_rate", real_field(&ModelConfig::learning_rate)},
      {"train_scenes", size_field(&ModelConfig::train_scenes)},
      {"checkpoint_every", size_field(&ModelConfig::checkpoint_every)},
  };
  return table;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid configuration: " + msg); };
  if (height == 0 || width == 0) fail("image extents must be positive");
  if (!is_power_of_two(downsample)) fail("downsample must be a power of two, got " + std::to_string(downsample));
  if (grid == 0) fail("grid must be positive");
  if (height % (downsample * grid) != 0 || width % (downsample * grid) != 0) {
    fail("image " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by downsample*grid = " +
         std::to_string(downsample * grid));
  }
  if (region_len != grid * grid) {
    fail("region_len must equal grid^2 = " + std::to_string(grid * grid) + ", got " + std::to_string(region_len));
  }
  if (fixed_len != 1) fail("fixed_len must be 1 (one vocabulary row per word)");
  if (prompt_dim == 0 || embed_dim == 0) fail("embedding widths must be positive");
  if (feature_dim < 4) fail("feature_dim must be at least 4");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (lambda_mix < 0.0 || lambda_bd < 0.0 || lambda_mat < 0.0) fail("loss weights must be non-negative");
  if (decoder.layers == 0 || decoder.heads == 0 || decoder.width == 0) fail("decoder dimensions must be positive");
  if (text_layers == 0 || text_heads == 0 || pool_heads == 0) fail("encoder dimensions must be positive");
  if (!(db_k > 0.0)) fail("db_k must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (train_scenes == 0) fail("train_scenes must be positive");
  if (!flags.region_prompt) {
    const std::pair<bool, const char*> deps[] = {{flags.feature_enhancement, "feature_enhancement"},
                                                 {flags.shared_pos_embed, "shared_pos_embed"},
                                                 {flags.interaction, "interaction"},
                                                 {flags.bd_loss, "bd_loss"},
                                                 {flags.feature_fusion, "feature_fusion"}};
    for (auto [on, name] : deps) {
      if (on) fail(std::string(name) + " requires region_prompt");
    }
  }
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.height = c.width = 16;
  c.downsample = 8;
  c.grid = 2;
  c.region_len = 4;
  c.general_len = 2;
  c.prompt_dim = 8;
  c.embed_dim = 8;
  c.feature_dim = 16;
  c.decoder = {1, 2, 8};
  c.text_layers = 1;
  c.text_heads = 2;
  c.pool_heads = 2;
  c.precision = Precision::Wide;
  return c;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.height = c.width = 288;  // smallest square tiling 3x3 tokens at stride 32
  c.downsample = 32;
  c.grid = 3;
  c.region_len = 9;
  c.general_len = 4;
  c.prompt_dim = 512;
  c.embed_dim = 1024;
  c.feature_dim = 2048;
  c.decoder = {4, 3, 256};
  c.text_layers = 12;
  c.text_heads = 8;
  c.pool_heads = 32;
  return c;
}

ModelConfig parse_config(std::string_view text) {
  ModelConfig c;
  std::map<std::string, const Field*> lookup;
  for (const auto& [k, f] : fields()) lookup[k] = &f;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(c, key, value);
  }
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_text(const ModelConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace rpt
