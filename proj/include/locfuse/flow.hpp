#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace locfuse {

// Row-major grayscale intensities in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), pixels(std::size_t(w) * h, fill) {}

  double& at(int x, int y) { return pixels[std::size_t(y) * width + x]; }
  double at(int x, int y) const { return pixels[std::size_t(y) * width + x]; }
  void validate() const;
};

// Dense per-pixel displacement (u along x, v along y) from one frame to the
// next. low_confidence is either empty or one flag per pixel.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> u;
  std::vector<double> v;
  std::vector<std::uint8_t> low_confidence;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), u(std::size_t(w) * h, 0.0), v(std::size_t(w) * h, 0.0) {}

  std::size_t index(int x, int y) const { return std::size_t(y) * width + x; }
  void validate() const;
};

struct LucasKanadeOptions {
  int window = 15;             // odd, pixels
  int levels = 3;              // pyramid depth, 1 = no pyramid
  int iterations = 5;          // Gauss-Newton refinements per level
  double min_eigenvalue = 1e-4;  // on the window-averaged structure tensor
};

// Dense pyramidal Lucas-Kanade. Pixels whose window-averaged structure tensor
// has smallest eigenvalue below min_eigenvalue get zero flow and a
// low-confidence flag. Pixels closer than window/2 to the border copy the
// nearest interior estimate.
FlowField lucas_kanade(const Image& prev, const Image& next, const LucasKanadeOptions& options = {});

// Non-overlapping k x k block means per channel; k must divide both sizes.
FlowField mean_pool(const FlowField& field, int k);

// Binary PGM (P5, maxval 255).
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& image);

// Little-endian: "PFLW", u32 width, u32 height, f32 u[w*h], f32 v[w*h].
FlowField read_flow(const std::filesystem::path& path);
void write_flow(const std::filesystem::path& path, const FlowField& field);

}  // namespace locfuse
