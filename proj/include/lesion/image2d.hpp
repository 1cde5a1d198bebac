#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace lesion {

/// Row-major view of a 2D scalar image.
struct Image2DView {
  std::span<const double> values;
  int width = 0;
  int height = 0;

  double operator()(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

/// Owning row-major 2D image.
struct Image2D {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Image2D() = default;
  Image2D(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  double& operator()(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  double operator()(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  Image2DView view() const { return {values, width, height}; }
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Circle {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
};

/// Row-major binary mask of a single slice (nonzero = foreground).
struct SliceMask {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> values;

  SliceMask() = default;
  SliceMask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}
  unsigned char& operator()(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  unsigned char operator()(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t count() const;
};

inline std::size_t SliceMask::count() const {
  std::size_t n = 0;
  for (unsigned char v : values) n += v != 0;
  return n;
}

}  // namespace lesion
