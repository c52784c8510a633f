#pragma once

#include <filesystem>
#include <vector>

namespace neurmatch {

// Single-channel image with double-precision pixels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  // Pixel with mirror-reflected coordinates outside the image.
  double reflected(int x, int y) const;
  // Bilinear interpolation with reflected borders; pixel centers sit at
  // integer coordinates.
  double sample(double x, double y) const;

  friend bool operator==(const Image&, const Image&) = default;
};

// Separable Gaussian blur, reflected borders. sigma <= 0 is a no-op.
Image gaussian_blur(const Image& src, double sigma);

// Quantizes [0, 1] to 16-bit grayscale PNG.
void write_png16(const Image& img, const std::filesystem::path& path);
Image read_png16(const std::filesystem::path& path);

}  // namespace neurmatch
