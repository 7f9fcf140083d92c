#include "splatflow/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace splatflow {

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("psnr: image dimensions differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = std::max(se / static_cast<double>(a.pixels.size()), 1e-10);
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

struct PngCloser {
  std::FILE* f = nullptr;
  ~PngCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace

void write_png(const Image& img, const std::string& path) {
  PngCloser fc;
  fc.f = std::fopen(path.c_str(), "wb");
  if (!fc.f) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("write_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error for " + path);
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double* p = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(p[c], 0.0, 1.0);
        const double enc = std::pow(v, 1.0 / 2.2);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(enc * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
  PngCloser fc;
  fc.f = std::fopen(path.c_str(), "rb");
  if (!fc.f) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("read_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng error for " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: expected 3 channels after expansion");
  }

  Image img(w, h);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      double* p = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double enc = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
        p[c] = std::pow(enc, 2.2);
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {
constexpr char kF32Magic[8] = {'S', 'F', 'I', 'M', 'G', '0', '0', '1'};
}

void write_image_f32(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_image_f32: cannot open " + path);
  out.write(kF32Magic, 8);
  const std::int32_t wh[2] = {img.width, img.height};
  out.write(reinterpret_cast<const char*>(wh), sizeof(wh));
  std::vector<float> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(img.pixels[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_image_f32: write failed for " + path);
}

Image read_image_f32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_image_f32: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kF32Magic, 8) != 0)
    throw std::runtime_error("read_image_f32: bad magic in " + path);
  std::int32_t wh[2];
  in.read(reinterpret_cast<char*>(wh), sizeof(wh));
  Image img(wh[0], wh[1]);
  std::vector<float> buf(img.pixels.size());
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("read_image_f32: truncated file " + path);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<double>(buf[i]);
  return img;
}

}  // namespace splatflow
