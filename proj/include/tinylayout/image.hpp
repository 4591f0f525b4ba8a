#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tinylayout/tensor.hpp"

namespace tinylayout {

// 8-bit RGB, row-major, interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}
  std::uint8_t* pixel(std::size_t x, std::size_t y) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const { return &rgb[(y * width + x) * 3]; }
  bool operator==(const Image&) const = default;
};

// [3, H, W] in [-1, 1] <-> 8-bit. Values outside the range are clamped.
Image tensor_to_image(const Tensor& chw);
Tensor image_to_tensor(const Image& image);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// 8-bit grayscale, min-max normalized (constant maps become 0).
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t width,
               std::size_t height);

}  // namespace tinylayout
