#include "tinylayout/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tinylayout {

Image tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("tensor_to_image: expected [3, H, W], got " + shape_str(chw.shape()));
  const std::size_t h = chw.dim(1), w = chw.dim(2);
  Image img(w, h);
  auto v = chw.values();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double s = (std::clamp(v[(c * h + y) * w + x], -1.0, 1.0) + 1.0) * 127.5;
        img.pixel(x, y)[c] = static_cast<std::uint8_t>(std::lround(s));
      }
  return img;
}

Tensor image_to_tensor(const Image& img) {
  std::vector<double> v(3 * img.width * img.height);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        v[(c * img.height + y) * img.width + x] = img.pixel(x, y)[c] / 127.5 - 1.0;
  return Tensor({3, img.height, img.width}, std::move(v));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write " + path.string() + ": " + pi.message);
}

Image read_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw std::runtime_error("cannot read " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image img(pi.width, pi.height);
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw std::runtime_error("cannot decode " + path.string() + ": " + pi.message);
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t width,
               std::size_t height) {
  if (values.size() != width * height) throw ShapeError("write_pgm: value count does not match the image size");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double s = range > 0.0 ? (v - *lo) / range : 0.0;
    out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(s * 255.0))));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace tinylayout
