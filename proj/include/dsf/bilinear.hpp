#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dsf/common.hpp"

namespace dsf {

// Bilinear read of a row-major h*w grid at continuous pixel coordinates.
// Coordinates must satisfy 0 <= x <= w-1 and 0 <= y <= h-1; integer
// coordinates return the cell value exactly.
template <typename T>
double bilinear_at(int h, int w, const T* data, double x, double y) {
  if (h < 1 || w < 1) throw std::invalid_argument("bilinear_at: empty grid");
  if (!(x >= 0.0 && x <= w - 1.0 && y >= 0.0 && y <= h - 1.0))
    throw std::invalid_argument(
        detail::str("bilinear_at: point (", x, ",", y, ") outside grid ", w, "x", h));
  const int x0 = (w == 1) ? 0 : std::min(static_cast<int>(std::floor(x)), w - 2);
  const int y0 = (h == 1) ? 0 : std::min(static_cast<int>(std::floor(y)), h - 2);
  const int x1 = (w == 1) ? 0 : x0 + 1;
  const int y1 = (h == 1) ? 0 : y0 + 1;
  const double fx = x - x0;
  const double fy = y - y0;
  const double v00 = static_cast<double>(data[y0 * w + x0]);
  const double v01 = static_cast<double>(data[y0 * w + x1]);
  const double v10 = static_cast<double>(data[y1 * w + x0]);
  const double v11 = static_cast<double>(data[y1 * w + x1]);
  return v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy +
         v11 * fx * fy;
}

// Adds v into the four cells backing a bilinear read, weighted by the same
// interpolation coefficients. Used to backpropagate through bilinear_at.
inline void bilinear_scatter(int h, int w, float* grad, double x, double y, double v) {
  const int x0 = (w == 1) ? 0 : std::min(static_cast<int>(std::floor(x)), w - 2);
  const int y0 = (h == 1) ? 0 : std::min(static_cast<int>(std::floor(y)), h - 2);
  const int x1 = (w == 1) ? 0 : x0 + 1;
  const int y1 = (h == 1) ? 0 : y0 + 1;
  const double fx = x - x0;
  const double fy = y - y0;
  grad[y0 * w + x0] += static_cast<float>(v * (1 - fx) * (1 - fy));
  grad[y0 * w + x1] += static_cast<float>(v * fx * (1 - fy));
  grad[y1 * w + x0] += static_cast<float>(v * (1 - fx) * fy);
  grad[y1 * w + x1] += static_cast<float>(v * fx * fy);
}

}  // namespace dsf
