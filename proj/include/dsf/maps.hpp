#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/bilinear.hpp"
#include "dsf/common.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

// Per-pixel stability score in the open interval (0,1), row-major.
struct ActivationMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  ActivationMap() = default;
  ActivationMap(int h, int w, float fill = 0.5f)
      : height(h), width(w), values(check_extent(h, w), fill) {}

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }

 private:
  static std::size_t check_extent(int h, int w) {
    if (h < 1 || w < 1)
      throw std::invalid_argument(detail::str("ActivationMap: bad extent ", w, "x", h));
    return static_cast<std::size_t>(h) * w;
  }
};

inline double bilinear_sample(const ActivationMap& m, double x, double y) {
  return bilinear_at(m.height, m.width, m.values.data(), x, y);
}

// Binary per-pixel stability target: 1 = static scene content.
struct StabilityMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  StabilityMap() = default;
  StabilityMap(int h, int w, std::uint8_t fill = 1)
      : height(h), width(w),
        values(static_cast<std::size_t>(h) * w, fill) {
    if (h < 1 || w < 1)
      throw std::invalid_argument(detail::str("StabilityMap: bad extent ", w, "x", h));
    if (fill > 1) throw std::invalid_argument("StabilityMap: values must be 0 or 1");
  }

  std::uint8_t at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& at(int y, int x) {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

// Semantic category id per pixel plus the id -> name table. Every id in the
// raster must index into the table.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> ids;
  std::vector<std::string> categories;

  std::uint8_t at(int y, int x) const {
    return ids[static_cast<std::size_t>(y) * width + x];
  }

  void validate() const {
    if (height < 1 || width < 1)
      throw std::invalid_argument(detail::str("LabelMap: bad extent ", width, "x", height));
    if (ids.size() != static_cast<std::size_t>(height) * width)
      throw std::invalid_argument("LabelMap: raster size does not match extent");
    for (std::uint8_t id : ids)
      if (id >= categories.size())
        throw std::invalid_argument(
            detail::str("LabelMap: pixel id ", int(id), " has no category (table size ",
                        categories.size(), ")"));
  }
};

inline Tensor to_tensor(const ActivationMap& m) {
  Tensor t(Shape{1, 1, m.height, m.width});
  t.data = m.values;
  return t;
}

inline Tensor to_tensor(const StabilityMap& m) {
  Tensor t(Shape{1, 1, m.height, m.width});
  for (std::size_t i = 0; i < m.values.size(); ++i)
    t.data[i] = static_cast<float>(m.values[i]);
  return t;
}

inline ActivationMap activation_from_tensor(const Tensor& t) {
  if (t.shape.n != 1 || t.shape.c != 1)
    throw std::invalid_argument(
        detail::str("activation_from_tensor: shape ", t.shape.str(), " is not [1,1,h,w]"));
  ActivationMap m(t.shape.h, t.shape.w);
  m.values = t.data;
  return m;
}

}  // namespace dsf
