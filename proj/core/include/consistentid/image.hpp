#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cid {

// Interleaved HxWxC image with values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary HxW grid; every value is 0 or 1.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t area() const;
  bool empty() const { return area() == 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

// Values are clamped to [0,1] and rounded to 8 bits. RGB or gray.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Binary PGM (P5), 8-bit, 0 or 255.
void write_pgm(const std::filesystem::path& path, const Mask& mask);
// Any nonzero byte reads as active unless strict is set, in which case values other than
// 0/255 raise ParserFailure.
Mask read_pgm(const std::filesystem::path& path, bool strict = true);

double psnr(const Image& reference, const Image& test);

}  // namespace cid
