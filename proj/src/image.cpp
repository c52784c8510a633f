#include "neurmatch/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "neurmatch/error.hpp"

namespace neurmatch {
namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

double Image::reflected(int x, int y) const {
  return at(reflect(x, width), reflect(y, height));
}

double Image::sample(double x, double y) const {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  return (1 - ay) * ((1 - ax) * reflected(x0, y0) + ax * reflected(x0 + 1, y0)) +
         ay * ((1 - ax) * reflected(x0, y0 + 1) + ax * reflected(x0 + 1, y0 + 1));
}

Image gaussian_blur(const Image& src, double sigma) {
  if (!(sigma > 0.0)) return src;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  Image tmp(src.width, src.height);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      double acc = 0.0;
      if (x >= r && x + r < src.width) {
        const double* row = &src.pixels[static_cast<std::size_t>(y) * src.width + x - r];
        for (std::size_t i = 0; i < k.size(); ++i) acc += k[i] * row[i];
      } else {
        for (int i = -r; i <= r; ++i) acc += k[i + r] * src.reflected(x + i, y);
      }
      tmp.at(x, y) = acc;
    }
  }
  Image out(src.width, src.height);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.reflected(x, y + i);
      out.at(x, y) = acc;
    }
  }
  return out;
}

void write_png16(const Image& img, const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open " + path.string() + " for writing");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialization failed");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 2);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
      row[2 * x] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
      row[2 * x + 1] = static_cast<png_byte>(q & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png16(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialization failed");
  }
  Image img;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("invalid PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(png, info) != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected 16-bit grayscale PNG: " + path.string());
  }
  img = Image(static_cast<int>(png_get_image_width(png, info)),
              static_cast<int>(png_get_image_height(png, info)));
  row.resize(static_cast<std::size_t>(img.width) * 2);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x) {
      img.at(x, y) = ((row[2 * x] << 8) | row[2 * x + 1]) / 65535.0;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace neurmatch
