#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rpt/config.hpp"
#include "rpt/tensor.hpp"

namespace rpt {

struct Point {
  double x = 0.0;  // column, pixels
  double y = 0.0;  // row, pixels
};

// Rotated rectangle, corners in order around the boundary.
using Quad = std::array<Point, 4>;

struct Scene {
  Tensor image;              // H x W x 3 in [0, 1]
  std::vector<double> mask;  // H * W, 1 on text
  std::vector<Quad> polygons;
  std::uint64_t seed = 0;
  std::size_t height = 0, width = 0;

  double text_fraction() const;
};

// Procedural scene: smooth background plus 1-6 striped bars, rotated within
// +-30 degrees. Deterministic in (seed, extents).
Scene generate_scene(std::uint64_t seed, const ModelConfig& config);
std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const ModelConfig& config);

// 1 where the pixel centre lies inside the quad.
std::vector<double> rasterize(const std::vector<Quad>& quads, std::size_t height, std::size_t width);

// Binary PNM. Pixmaps are read into H x W x 3 tensors scaled to [0, 1];
// graymaps are written from values clamped to [0, 1].
Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);
void write_pgm(const std::string& path, std::span<const double> values, std::size_t height, std::size_t width);
std::vector<double> read_pgm(const std::string& path, std::size_t& height, std::size_t& width);

}  // namespace rpt
