#pragma once

#include <string>
#include <vector>

#include "splatflow/gaussian.hpp"

namespace splatflow {

// Float RGB raster, values in [0, 1], row-major, channel-interleaved.
struct Image {
  int width = 0, height = 0;
  std::vector<double> pixels;  // height * width * 3
  Vec3 background = Vec3(1, 1, 1);

  Image() = default;
  Image(int w, int h, const Vec3& bg = Vec3(1, 1, 1))
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3), background(bg) {
    fill(bg);
  }

  void fill(const Vec3& c) {
    for (std::size_t i = 0; i + 2 < pixels.size(); i += 3) {
      pixels[i] = c(0);
      pixels[i + 1] = c(1);
      pixels[i + 2] = c(2);
    }
  }

  double* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const double* at(int x, int y) const {
    return &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
  }
};

// 10*log10(1 / MSE), MSE floored at 1e-10 (identical images report 100 dB).
double psnr(const Image& a, const Image& b);

// 8-bit PNG with 1/2.2 gamma encoding on save and 2.2 decode on load.
void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

// Lossless float32 dump (linear values), for training targets and tests.
void write_image_f32(const Image& img, const std::string& path);
Image read_image_f32(const std::string& path);

}  // namespace splatflow
