#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"

namespace dsf {

// Dense 4-D extent in (batch, channels, height, width) order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    return detail::str('[', n, ',', c, ',', h, ',', w, ']');
  }
};

// Row-major float32 tensor. The grad buffer is allocated only while a Graph
// tracks gradients for the value; when present it always matches data size.
struct Tensor {
  Shape shape{};
  std::vector<float> data;
  std::vector<float> grad;

  Tensor() = default;

  explicit Tensor(Shape s, float fill = 0.0f) : shape(s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw std::invalid_argument(detail::str("Tensor: negative extent in shape ", s.str()));
    data.assign(static_cast<std::size_t>(s.numel()), fill);
  }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x;
  }

  float& at(int n, int c, int y, int x) { return data[index(n, c, y, x)]; }
  float at(int n, int c, int y, int x) const { return data[index(n, c, y, x)]; }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }

  void zero_grad() {
    if (has_grad()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace dsf
