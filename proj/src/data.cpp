#include "rpt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "rpt/errors.hpp"

namespace rpt {

namespace {

constexpr double kMinFraction = 0.01;
constexpr double kMaxFraction = 0.4;

Quad make_quad(Point c, double length, double thickness, double angle) {
  const double ux = std::cos(angle), uy = std::sin(angle);  // along the bar
  const double vx = -uy, vy = ux;                           // across the bar
  const double a = length / 2.0, b = thickness / 2.0;
  return {Point{c.x - a * ux - b * vx, c.y - a * uy - b * vy}, Point{c.x + a * ux - b * vx, c.y + a * uy - b * vy},
          Point{c.x + a * ux + b * vx, c.y + a * uy + b * vy}, Point{c.x - a * ux + b * vx, c.y - a * uy + b * vy}};
}

// Pixel centres inside the quad, found by projecting onto the quad's own axes.
bool inside(const Quad& q, double px, double py, double& along) {
  const double ex = q[1].x - q[0].x, ey = q[1].y - q[0].y;
  const double fx = q[3].x - q[0].x, fy = q[3].y - q[0].y;
  const double dx = px - q[0].x, dy = py - q[0].y;
  const double s = (dx * ex + dy * ey) / (ex * ex + ey * ey);
  const double t = (dx * fx + dy * fy) / (fx * fx + fy * fy);
  along = s;
  return s >= 0.0 && s <= 1.0 && t >= 0.0 && t <= 1.0;
}

std::vector<double> smooth_background(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  constexpr std::size_t kGrid = 5;
  std::uniform_real_distribution<double> tone(0.25, 0.75);
  std::vector<double> coarse(kGrid * kGrid * 3);
  for (auto& v : coarse) v = tone(rng);
  std::vector<double> out(h * w * 3);
  for (std::size_t i = 0; i < h; ++i) {
    const double gy = (static_cast<double>(i) + 0.5) / static_cast<double>(h) * (kGrid - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), kGrid - 2);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t j = 0; j < w; ++j) {
      const double gx = (static_cast<double>(j) + 0.5) / static_cast<double>(w) * (kGrid - 1);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), kGrid - 2);
      const double fx = gx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto at = [&](std::size_t y, std::size_t x) { return coarse[(y * kGrid + x) * 3 + c]; };
        out[(i * w + j) * 3 + c] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                                   fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
    }
  }
  return out;
}

}  // namespace

double Scene::text_fraction() const {
  double n = 0.0;
  for (double v : mask) n += v;
  return mask.empty() ? 0.0 : n / static_cast<double>(mask.size());
}

std::vector<double> rasterize(const std::vector<Quad>& quads, std::size_t height, std::size_t width) {
  std::vector<double> mask(height * width, 0.0);
  double along = 0.0;
  for (const auto& q : quads) {
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j)
        if (inside(q, static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5, along)) mask[i * width + j] = 1.0;
  }
  return mask;
}

Scene generate_scene(std::uint64_t seed, const ModelConfig& config) {
  const std::size_t h = config.height, w = config.width;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Scene scene;
  scene.seed = seed;
  scene.height = h;
  scene.width = w;
  std::vector<double> pixels = smooth_background(rng, h, w);

  const double side = static_cast<double>(std::min(h, w));
  const int wanted = std::uniform_int_distribution<int>(1, 6)(rng);
  std::vector<double> occupied(h * w, 0.0);  // bars grown by a small margin
  double covered = 0.0;
  for (int attempt = 0; attempt < 200 && static_cast<int>(scene.polygons.size()) < wanted; ++attempt) {
    const double length = side * (0.25 + 0.3 * unit(rng));
    const double thickness = side * (0.10 + 0.08 * unit(rng));
    const double angle = (unit(rng) * 60.0 - 30.0) * std::numbers::pi / 180.0;
    const Point centre{static_cast<double>(w) * unit(rng), static_cast<double>(h) * unit(rng)};
    const Quad quad = make_quad(centre, length, thickness, angle);
    const bool within = std::all_of(quad.begin(), quad.end(), [&](const Point& p) {
      return p.x >= 1.0 && p.y >= 1.0 && p.x <= static_cast<double>(w) - 1.0 && p.y <= static_cast<double>(h) - 1.0;
    });
    if (!within) continue;
    const auto area = rasterize({quad}, h, w);
    const double added = std::accumulate(area.begin(), area.end(), 0.0);
    if ((covered + added) / static_cast<double>(h * w) > kMaxFraction) continue;
    const auto grown = rasterize({make_quad(centre, length + 6.0, thickness + 6.0, angle)}, h, w);
    bool clash = false;
    for (std::size_t p = 0; p < grown.size() && !clash; ++p) clash = grown[p] > 0.0 && occupied[p] > 0.0;
    if (clash) continue;
    for (std::size_t p = 0; p < grown.size(); ++p) occupied[p] = std::max(occupied[p], grown[p]);
    covered += added;

    // Stripes alternate between a dark and a light ink across the bar's length.
    const int stripes = std::uniform_int_distribution<int>(2, 6)(rng);
    std::array<double, 3> dark{}, light{};
    for (std::size_t c = 0; c < 3; ++c) {
      dark[c] = 0.15 * unit(rng);
      light[c] = 0.85 + 0.15 * unit(rng);
    }
    const bool dark_first = unit(rng) < 0.5;
    double along = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        if (!inside(quad, static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5, along)) continue;
        const int stripe = std::min(stripes - 1, static_cast<int>(along * stripes));
        const auto& ink = ((stripe % 2 == 0) == dark_first) ? dark : light;
        for (std::size_t c = 0; c < 3; ++c) pixels[(i * w + j) * 3 + c] = ink[c];
      }
    }
    scene.polygons.push_back(quad);
  }
  scene.mask = rasterize(scene.polygons, h, w);
  if (scene.text_fraction() < kMinFraction) {
    throw ContractError("generate_scene: seed " + std::to_string(seed) + " produced too little text");
  }
  scene.image = Tensor({h, w, 3}, std::move(pixels));
  return scene;
}

std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const ModelConfig& config) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(seed * 1000003ULL + i, config));
  return scenes;
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path) {
  const std::string tok = next_token(in);
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(tok, &used);
    if (used != tok.size() || v == 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PNM header near '" + tok + "'");
  }
}

std::vector<unsigned char> read_pnm(const std::string& path, const char* magic, std::size_t channels,
                                    std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (next_token(in) != magic) throw IoError(path + ": expected a binary " + std::string(magic) + " file");
  width = header_number(in, path);
  height = header_number(in, path);
  if (header_number(in, path) != 255) throw IoError(path + ": only 8-bit images (maxval 255) are supported");
  in.get();  // single whitespace byte before the raster
  std::vector<unsigned char> data(height * width * channels);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size())) throw IoError(path + ": truncated raster");
  return data;
}

void write_pnm(const std::string& path, const char* magic, const std::vector<unsigned char>& data, std::size_t height,
               std::size_t width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("failed writing " + path);
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5)); }

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::size_t h = 0, w = 0;
  const auto bytes = read_pnm(path, "P6", 3, h, w);
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = bytes[i] / 255.0;
  return Tensor({h, w, 3}, std::move(v));
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.extent(2) != 3) throw DimensionError("write_ppm: expected H x W x 3, got " + to_string(image.shape()));
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image[i]);
  write_pnm(path, "P6", bytes, image.extent(0), image.extent(1));
}

void write_pgm(const std::string& path, std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) {
    throw DimensionError("write_pgm: " + std::to_string(values.size()) + " values for " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  std::vector<unsigned char> bytes(values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(values[i]);
  write_pnm(path, "P5", bytes, height, width);
}

std::vector<double> read_pgm(const std::string& path, std::size_t& height, std::size_t& width) {
  const auto bytes = read_pnm(path, "P5", 1, height, width);
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = bytes[i] / 255.0;
  return v;
}

}  // namespace rpt
