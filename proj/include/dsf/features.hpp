#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

// Detected interest point, pixel coordinates, detector response strength.
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double response = 0.0;
};

enum class DescriptorKind : std::uint8_t { float32 = 0, binary = 1 };

// Row-per-keypoint descriptor storage. Binary rows are bit-packed MSB-first
// with zero padding in the trailing byte.
struct DescriptorMatrix {
  DescriptorKind kind = DescriptorKind::float32;
  int count = 0;
  int dim = 0;
  std::vector<float> fdata;
  std::vector<std::uint8_t> bdata;

  static DescriptorMatrix floats(int count, int dim) {
    DescriptorMatrix m;
    m.kind = DescriptorKind::float32;
    m.count = count;
    m.dim = dim;
    m.fdata.assign(static_cast<std::size_t>(count) * dim, 0.0f);
    return m;
  }

  static DescriptorMatrix binary(int count, int dim) {
    DescriptorMatrix m;
    m.kind = DescriptorKind::binary;
    m.count = count;
    m.dim = dim;
    m.bdata.assign(static_cast<std::size_t>(count) * m.row_bytes(), 0);
    return m;
  }

  int row_bytes() const { return (dim + 7) / 8; }

  std::span<const float> frow(int i) const {
    return {fdata.data() + static_cast<std::size_t>(i) * dim,
            static_cast<std::size_t>(dim)};
  }
  std::span<float> frow(int i) {
    return {fdata.data() + static_cast<std::size_t>(i) * dim,
            static_cast<std::size_t>(dim)};
  }
  std::span<const std::uint8_t> brow(int i) const {
    return {bdata.data() + static_cast<std::size_t>(i) * row_bytes(),
            static_cast<std::size_t>(row_bytes())};
  }
  std::span<std::uint8_t> brow(int i) {
    return {bdata.data() + static_cast<std::size_t>(i) * row_bytes(),
            static_cast<std::size_t>(row_bytes())};
  }

  bool bit(int row, int b) const {
    return (brow(row)[static_cast<std::size_t>(b) / 8] >> (7 - b % 8)) & 1;
  }
  void set_bit(int row, int b, bool v) {
    std::uint8_t& byte = brow(row)[static_cast<std::size_t>(b) / 8];
    const std::uint8_t mask = static_cast<std::uint8_t>(1u << (7 - b % 8));
    byte = v ? (byte | mask) : (byte & static_cast<std::uint8_t>(~mask));
  }

  void validate() const {
    if (count < 0 || dim < 1)
      throw std::invalid_argument(
          detail::str("DescriptorMatrix: bad extent ", count, "x", dim));
    if (kind == DescriptorKind::float32) {
      if (fdata.size() != static_cast<std::size_t>(count) * dim || !bdata.empty())
        throw std::invalid_argument("DescriptorMatrix: float storage size mismatch");
    } else {
      if (bdata.size() != static_cast<std::size_t>(count) * row_bytes() ||
          !fdata.empty())
        throw std::invalid_argument("DescriptorMatrix: binary storage size mismatch");
    }
  }
};

// Keypoints plus aligned descriptors for one image. The image extent is kept
// so keypoint coordinates can be normalized for geometry.
struct FeatureSet {
  int width = 0;
  int height = 0;
  std::vector<Keypoint> keypoints;
  DescriptorMatrix descriptors;

  std::size_t size() const { return keypoints.size(); }
  bool empty() const { return keypoints.empty(); }

  void validate() const {
    descriptors.validate();
    if (static_cast<std::size_t>(descriptors.count) != keypoints.size())
      throw std::invalid_argument(
          detail::str("FeatureSet: ", keypoints.size(), " keypoints but ",
                      descriptors.count, " descriptors"));
  }
};

// Builds a new set from the given keypoint indices, preserving order.
inline FeatureSet subset(const FeatureSet& fs, const std::vector<std::size_t>& idx) {
  FeatureSet out;
  out.width = fs.width;
  out.height = fs.height;
  out.keypoints.reserve(idx.size());
  const int n = static_cast<int>(idx.size());
  out.descriptors = fs.descriptors.kind == DescriptorKind::float32
                        ? DescriptorMatrix::floats(n, fs.descriptors.dim)
                        : DescriptorMatrix::binary(n, fs.descriptors.dim);
  for (int i = 0; i < n; ++i) {
    const std::size_t src = idx[static_cast<std::size_t>(i)];
    if (src >= fs.keypoints.size())
      throw std::invalid_argument("subset: index out of range");
    out.keypoints.push_back(fs.keypoints[src]);
    if (fs.descriptors.kind == DescriptorKind::float32) {
      auto s = fs.descriptors.frow(static_cast<int>(src));
      std::copy(s.begin(), s.end(), out.descriptors.frow(i).begin());
    } else {
      auto s = fs.descriptors.brow(static_cast<int>(src));
      std::copy(s.begin(), s.end(), out.descriptors.brow(i).begin());
    }
  }
  return out;
}

// Dense per-pixel descriptor field, channel-major (dim planes of h*w).
struct DescriptorGrid {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<float> data;

  DescriptorGrid() = default;
  DescriptorGrid(int h, int w, int d)
      : height(h), width(w), dim(d),
        data(static_cast<std::size_t>(h) * w * d, 0.0f) {
    if (h < 1 || w < 1 || d < 1)
      throw std::invalid_argument(
          detail::str("DescriptorGrid: bad extent ", w, "x", h, "x", d));
  }

  float& at(int d, int y, int x) {
    return data[(static_cast<std::size_t>(d) * height + y) * width + x];
  }
  float at(int d, int y, int x) const {
    return data[(static_cast<std::size_t>(d) * height + y) * width + x];
  }
};

inline Tensor to_tensor(const DescriptorGrid& g) {
  Tensor t(Shape{1, g.dim, g.height, g.width});
  t.data = g.data;
  return t;
}

}  // namespace dsf
