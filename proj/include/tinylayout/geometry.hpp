#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>

namespace tinylayout {

// Normalized axis-aligned box, origin top-left, y pointing down.
struct BBox {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }

  bool operator==(const BBox&) const = default;
};

inline BBox make_bbox(double x0, double y0, double x1, double y1) {
  if (!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && x0 < x1 && y0 < y1))
    throw std::invalid_argument("invalid box [" + std::to_string(x0) + ", " + std::to_string(y0) + ", " +
                                std::to_string(x1) + ", " + std::to_string(y1) + "]");
  return BBox{x0, y0, x1, y1};
}

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace tinylayout
