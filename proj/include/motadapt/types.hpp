#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "motadapt/errors.hpp"

namespace motadapt {

// Dense 2-D grid, row-major. The small value types below are the currency
// between modules: probability maps, binary masks, trimasks, flow fields
// and 8-bit images are all Grid instantiations.
template <typename T>
struct Grid {
  int h = 0;
  int w = 0;
  std::vector<T> v;

  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : h(height), w(width), v(static_cast<size_t>(height) * width, fill) {}

  T& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  const T& at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

  size_t size() const { return v.size(); }
  bool same_dims(int hh, int ww) const { return h == hh && w == ww; }

  bool operator==(const Grid& o) const { return h == o.h && w == o.w && v == o.v; }
};

using ProbabilityMap = Grid<float>;                 // per-pixel foreground probability in [0,1]
using BinaryMask = Grid<uint8_t>;                   // 0 = background, nonzero = foreground
using RgbImage = Grid<std::array<uint8_t, 3>>;
using GrayImage = Grid<uint8_t>;

// Per-pixel (u,v) displacement in pixels/frame.
struct FlowField {
  int h = 0;
  int w = 0;
  std::vector<float> uv;  // interleaved u,v, row-major

  FlowField() = default;
  FlowField(int height, int width)
      : h(height), w(width), uv(static_cast<size_t>(height) * width * 2, 0.0f) {}

  float& u(int y, int x) { return uv[(static_cast<size_t>(y) * w + x) * 2]; }
  float& v(int y, int x) { return uv[(static_cast<size_t>(y) * w + x) * 2 + 1]; }
  float u(int y, int x) const { return uv[(static_cast<size_t>(y) * w + x) * 2]; }
  float v(int y, int x) const { return uv[(static_cast<size_t>(y) * w + x) * 2 + 1]; }
};

enum class TriLabel : uint8_t { NEGATIVE = 0, IGNORE = 1, POSITIVE = 2 };

// Three-way pseudo-label map; the label sets partition the pixels.
using TriMask = Grid<TriLabel>;

}  // namespace motadapt
