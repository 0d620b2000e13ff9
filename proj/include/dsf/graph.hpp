#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dsf/bilinear.hpp"
#include "dsf/common.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

using ValueId = std::size_t;

enum class ActivationKind { relu, sigmoid };

// A fixed sampling location on an activation map (pixel coordinates) with a
// constant per-point value attached, e.g. an epipolar residual.
struct SamplePoint {
  double x = 0.0;
  double y = 0.0;
  double value = 0.0;
};

namespace kernels {

// Sigmoid saturates to exactly 1.0f in float arithmetic near x = 17, which
// would leak out of the open interval (0,1). Both precisions clamp to the
// same bounds so the 64-bit reference path computes the same function.
inline constexpr double kSigmoidLo = 1e-38;
inline constexpr double kSigmoidHi = 1.0 - 1e-7;
inline constexpr double kBceLo = 1e-7;
inline constexpr double kBceHi = 1.0 - 1e-7;

template <typename T>
void conv2d(const Shape& xs, const T* x, const Shape& ks, const T* kern, const T* bias,
            T* y) {
  const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
  const int O = ks.n, KH = ks.h, KW = ks.w;
  const int ph = KH / 2, pw = KW / 2;
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          double acc = static_cast<double>(bias[o]);
          for (int c = 0; c < C; ++c) {
            const T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
            const T* kc = kern + (static_cast<std::size_t>(o) * C + c) * KH * KW;
            for (int dy = 0; dy < KH; ++dy) {
              const int yy = i + dy - ph;
              if (yy < 0 || yy >= H) continue;
              for (int dx = 0; dx < KW; ++dx) {
                const int xx = j + dx - pw;
                if (xx < 0 || xx >= W) continue;
                acc += static_cast<double>(xc[yy * W + xx]) *
                       static_cast<double>(kc[dy * KW + dx]);
              }
            }
          }
          y[((static_cast<std::size_t>(n) * O + o) * H + i) * W + j] =
              static_cast<T>(acc);
        }
}

template <typename T>
void pool_down(const Shape& xs, const T* x, T* y) {
  const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
  const int OH = H / 2, OW = W / 2;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
      T* yc = y + (static_cast<std::size_t>(n) * C + c) * OH * OW;
      for (int i = 0; i < OH; ++i)
        for (int j = 0; j < OW; ++j) {
          T best = xc[(2 * i) * W + 2 * j];
          best = std::max(best, xc[(2 * i) * W + 2 * j + 1]);
          best = std::max(best, xc[(2 * i + 1) * W + 2 * j]);
          best = std::max(best, xc[(2 * i + 1) * W + 2 * j + 1]);
          yc[i * OW + j] = best;
        }
    }
}

template <typename T>
void upsample(const Shape& xs, const T* x, T* y) {
  const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
  const int OW = 2 * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
      T* yc = y + (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T v = xc[i * W + j];
          yc[(2 * i) * OW + 2 * j] = v;
          yc[(2 * i) * OW + 2 * j + 1] = v;
          yc[(2 * i + 1) * OW + 2 * j] = v;
          yc[(2 * i + 1) * OW + 2 * j + 1] = v;
        }
    }
}

template <typename T>
void concat_channels(const Shape& as, const T* a, const Shape& bs, const T* b, T* y) {
  const int N = as.n, H = as.h, W = as.w;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    T* yn = y + static_cast<std::size_t>(n) * (as.c + bs.c) * plane;
    const T* an = a + static_cast<std::size_t>(n) * as.c * plane;
    const T* bn = b + static_cast<std::size_t>(n) * bs.c * plane;
    std::copy(an, an + as.c * plane, yn);
    std::copy(bn, bn + bs.c * plane, yn + as.c * plane);
  }
}

template <typename T>
void relu(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void sigmoid(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
    s = std::min(std::max(s, kSigmoidLo), kSigmoidHi);
    y[i] = static_cast<T>(s);
  }
}

template <typename T>
double bce_mean(std::size_t n, const T* pred, const T* target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a =
        std::min(std::max(static_cast<double>(pred[i]), kBceLo), kBceHi);
    const double s = static_cast<double>(target[i]);
    acc -= s * std::log(a) + (1.0 - s) * std::log(1.0 - a);
  }
  return acc / static_cast<double>(n);
}

template <typename T>
double dense_distance(const Shape& ds, const T* a1, const T* d1, const T* a2,
                      const T* d2) {
  const int dim = ds.c, H = ds.h, W = ds.w;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  double sq = 0.0;
  for (int k = 0; k < dim; ++k) {
    double s1 = 0.0, s2 = 0.0;
    const T* d1k = d1 + k * plane;
    const T* d2k = d2 + k * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      s1 += static_cast<double>(a1[p]) * static_cast<double>(d1k[p]);
      s2 += static_cast<double>(a2[p]) * static_cast<double>(d2k[p]);
    }
    const double diff = s1 - s2;
    sq += diff * diff;
  }
  return std::sqrt(sq) / static_cast<double>(plane);
}

template <typename T>
double weighted_point_mean(const Shape& as, const T* act,
                           const std::vector<SamplePoint>& pts) {
  double sw = 0.0, sv = 0.0;
  for (const SamplePoint& p : pts) {
    const double w = bilinear_at(as.h, as.w, act, p.x, p.y);
    sw += w;
    sv += w * p.value;
  }
  if (!(sw > 0.0))
    throw std::runtime_error("weighted_point_mean: sampled weights sum to zero");
  return sv / sw;
}

template <typename T>
void axpby(std::size_t n, double a, const T* x, double b, const T* y, T* out) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<T>(a * static_cast<double>(x[i]) +
                            b * static_cast<double>(y[i]));
}

template <typename T>
void add_const(std::size_t n, const T* x, double c, T* out) {
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<T>(static_cast<double>(x[i]) + c);
}

}  // namespace kernels

// Reverse-mode autodiff over 4-D float tensors. Building an op evaluates it
// immediately; backward() walks the recorded nodes in reverse. Nodes store
// their recipe (op + inputs + attributes) rather than closures so the same
// graph can be re-evaluated in 64-bit precision by eval_reference, which is
// what the finite-difference checker compares against.
class Graph {
 public:
  ValueId leaf(const Tensor& t, bool requires_grad = false) {
    if (t.data.size() != static_cast<std::size_t>(t.shape.numel()))
      throw std::invalid_argument("leaf: data size does not match shape");
    Node node;
    node.op = Op::leaf;
    Tensor copy(t);
    copy.grad.clear();
    return push(std::move(node), std::move(copy), requires_grad);
  }

  ValueId conv2d(ValueId x, ValueId kernel, ValueId bias) {
    const Tensor& xt = value(x);
    const Tensor& kt = value(kernel);
    const Tensor& bt = value(bias);
    const Shape xs = xt.shape, ks = kt.shape, bs = bt.shape;
    if (xs.n < 1 || xs.c < 1 || xs.h < 1 || xs.w < 1)
      throw std::invalid_argument(detail::str("conv2d: bad input shape ", xs.str()));
    if (ks.n < 1 || ks.c != xs.c)
      throw std::invalid_argument(detail::str("conv2d: kernel ", ks.str(),
                                              " does not match input ", xs.str()));
    if (ks.h < 1 || ks.w < 1 || ks.h % 2 == 0 || ks.w % 2 == 0)
      throw std::invalid_argument(
          detail::str("conv2d: kernel extent must be odd, got ", ks.str()));
    if (bs != Shape{1, ks.n, 1, 1})
      throw std::invalid_argument(detail::str("conv2d: bias ", bs.str(),
                                              " must be [1,", ks.n, ",1,1]"));
    Node node;
    node.op = Op::conv2d;
    node.in = {x, kernel, bias};
    Tensor out(Shape{xs.n, ks.n, xs.h, xs.w});
    kernels::conv2d(xs, xt.data.data(), ks, kt.data.data(), bt.data.data(),
                    out.data.data());
    return push(std::move(node), std::move(out), any_grad({x, kernel, bias}));
  }

  ValueId pool_down(ValueId x) {
    const Tensor& xt = value(x);
    const Shape xs = xt.shape;
    if (xs.h < 2 || xs.w < 2 || xs.h % 2 != 0 || xs.w % 2 != 0)
      throw std::invalid_argument(
          detail::str("pool_down: spatial extents must be even, got ", xs.str()));
    Node node;
    node.op = Op::pool_down;
    node.in = {x};
    Tensor out(Shape{xs.n, xs.c, xs.h / 2, xs.w / 2});
    kernels::pool_down(xs, xt.data.data(), out.data.data());
    return push(std::move(node), std::move(out), any_grad({x}));
  }

  ValueId upsample(ValueId x) {
    const Tensor& xt = value(x);
    const Shape xs = xt.shape;
    if (xs.h < 1 || xs.w < 1)
      throw std::invalid_argument(
          detail::str("upsample: empty spatial extents ", xs.str()));
    Node node;
    node.op = Op::upsample;
    node.in = {x};
    Tensor out(Shape{xs.n, xs.c, xs.h * 2, xs.w * 2});
    kernels::upsample(xs, xt.data.data(), out.data.data());
    return push(std::move(node), std::move(out), any_grad({x}));
  }

  ValueId concat_channels(ValueId a, ValueId b) {
    const Shape as = value(a).shape, bs = value(b).shape;
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
      throw std::invalid_argument(detail::str("concat_channels: ", as.str(), " and ",
                                              bs.str(),
                                              " differ in batch or spatial extents"));
    Node node;
    node.op = Op::concat_channels;
    node.in = {a, b};
    Tensor out(Shape{as.n, as.c + bs.c, as.h, as.w});
    kernels::concat_channels(as, value(a).data.data(), bs, value(b).data.data(),
                             out.data.data());
    return push(std::move(node), std::move(out), any_grad({a, b}));
  }

  ValueId relu(ValueId x) {
    const Tensor& xt = value(x);
    Node node;
    node.op = Op::relu;
    node.in = {x};
    Tensor out(xt.shape);
    kernels::relu(xt.data.size(), xt.data.data(), out.data.data());
    return push(std::move(node), std::move(out), any_grad({x}));
  }

  ValueId sigmoid(ValueId x) {
    const Tensor& xt = value(x);
    Node node;
    node.op = Op::sigmoid;
    node.in = {x};
    Tensor out(xt.shape);
    kernels::sigmoid(xt.data.size(), xt.data.data(), out.data.data());
    return push(std::move(node), std::move(out), any_grad({x}));
  }

  ValueId activation(ValueId x, ActivationKind kind) {
    return kind == ActivationKind::relu ? relu(x) : sigmoid(x);
  }

  ValueId bce_mean(ValueId pred, ValueId target) {
    const Tensor& pt = value(pred);
    const Tensor& tt = value(target);
    if (pt.shape != tt.shape)
      throw std::invalid_argument(detail::str("bce_mean: prediction ", pt.shape.str(),
                                              " and target ", tt.shape.str(),
                                              " differ"));
    if (pt.data.empty()) throw std::invalid_argument("bce_mean: empty tensors");
    for (float s : tt.data)
      if (!(s >= 0.0f && s <= 1.0f))
        throw std::invalid_argument(
            detail::str("bce_mean: target value ", s, " outside [0,1]"));
    Node node;
    node.op = Op::bce_mean;
    node.in = {pred, target};
    Tensor out(Shape{1, 1, 1, 1});
    out.data[0] = static_cast<float>(
        kernels::bce_mean(pt.data.size(), pt.data.data(), tt.data.data()));
    return push(std::move(node), std::move(out), any_grad({pred, target}));
  }

  // Distance between two activation-weighted descriptor aggregates,
  // differentiable with respect to both activation maps. The descriptor
  // grids are constants; marking them trainable is rejected rather than
  // silently returning wrong gradients.
  ValueId dense_distance(ValueId a1, ValueId d1, ValueId a2, ValueId d2) {
    const Shape as1 = value(a1).shape, as2 = value(a2).shape;
    const Shape ds1 = value(d1).shape, ds2 = value(d2).shape;
    if (as1.n != 1 || as1.c != 1 || as1 != as2)
      throw std::invalid_argument(detail::str("dense_distance: activation maps ",
                                              as1.str(), " and ", as2.str(),
                                              " must both be [1,1,h,w]"));
    if (ds1 != ds2 || ds1.n != 1 || ds1.c < 1 || ds1.h != as1.h || ds1.w != as1.w)
      throw std::invalid_argument(detail::str(
          "dense_distance: descriptor grids ", ds1.str(), " and ", ds2.str(),
          " must be [1,dim,", as1.h, ",", as1.w, "]"));
    if (requires_grad(d1) || requires_grad(d2))
      throw std::invalid_argument(
          "dense_distance: descriptor grids cannot be trainable");
    Node node;
    node.op = Op::dense_distance;
    node.in = {a1, d1, a2, d2};
    Tensor out(Shape{1, 1, 1, 1});
    out.data[0] = static_cast<float>(
        kernels::dense_distance(ds1, value(a1).data.data(), value(d1).data.data(),
                                value(a2).data.data(), value(d2).data.data()));
    return push(std::move(node), std::move(out), any_grad({a1, a2}));
  }

  // Activation-weighted mean of per-point constants, the sparse counterpart
  // of dense_distance. Weights are bilinear reads of the activation map.
  ValueId weighted_point_mean(ValueId act, std::vector<SamplePoint> points) {
    const Tensor& at = value(act);
    const Shape as = at.shape;
    if (as.n != 1 || as.c != 1 || as.h < 1 || as.w < 1)
      throw std::invalid_argument(detail::str(
          "weighted_point_mean: activation must be [1,1,h,w], got ", as.str()));
    if (points.empty())
      throw std::invalid_argument("weighted_point_mean: empty point list");
    for (const SamplePoint& p : points) {
      if (!(p.x >= 0.0 && p.x <= as.w - 1.0 && p.y >= 0.0 && p.y <= as.h - 1.0))
        throw std::invalid_argument(
            detail::str("weighted_point_mean: point (", p.x, ",", p.y,
                        ") outside map ", as.w, "x", as.h));
      if (!std::isfinite(p.value))
        throw std::invalid_argument("weighted_point_mean: non-finite point value");
    }
    Node node;
    node.op = Op::weighted_point_mean;
    node.in = {act};
    node.points = std::move(points);
    Tensor out(Shape{1, 1, 1, 1});
    out.data[0] = static_cast<float>(
        kernels::weighted_point_mean(as, at.data.data(), node.points));
    const bool rg = requires_grad(act);
    return push(std::move(node), std::move(out), rg);
  }

  ValueId axpby(double a, ValueId x, double b, ValueId y) {
    const Tensor& xt = value(x);
    const Tensor& yt = value(y);
    if (xt.shape != yt.shape)
      throw std::invalid_argument(detail::str("axpby: shapes ", xt.shape.str(),
                                              " and ", yt.shape.str(), " differ"));
    if (!std::isfinite(a) || !std::isfinite(b))
      throw std::invalid_argument("axpby: non-finite coefficient");
    Node node;
    node.op = Op::axpby;
    node.in = {x, y};
    node.a = a;
    node.b = b;
    Tensor out(xt.shape);
    kernels::axpby(xt.data.size(), a, xt.data.data(), b, yt.data.data(),
                   out.data.data());
    return push(std::move(node), std::move(out), any_grad({x, y}));
  }

  ValueId add_const(ValueId x, double c) {
    const Tensor& xt = value(x);
    if (!std::isfinite(c)) throw std::invalid_argument("add_const: non-finite constant");
    Node node;
    node.op = Op::add_const;
    node.in = {x};
    node.a = c;
    Tensor out(xt.shape);
    kernels::add_const(xt.data.size(), xt.data.data(), c, out.data.data());
    return push(std::move(node), std::move(out), any_grad({x}));
  }

  std::size_t node_count() const { return nodes_.size(); }

  const Tensor& value(ValueId id) const {
    check(id);
    return vals_[id];
  }

  double scalar(ValueId id) const {
    const Tensor& t = value(id);
    if (t.shape.numel() != 1)
      throw std::invalid_argument(
          detail::str("scalar: value has shape ", t.shape.str()));
    return static_cast<double>(t.data[0]);
  }

  bool requires_grad(ValueId id) const {
    check(id);
    return reqgrad_[id] != 0;
  }

  const std::vector<float>& grad(ValueId id) const {
    check(id);
    if (!vals_[id].has_grad())
      throw std::logic_error("grad: no gradient tracked for this value");
    return vals_[id].grad;
  }

  std::vector<ValueId> parameter_ids() const {
    std::vector<ValueId> out;
    for (ValueId i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::leaf && reqgrad_[i]) out.push_back(i);
    return out;
  }

  // Accumulates d(loss)/d(value) into the grad buffers of every trainable
  // value the scalar loss depends on. Values outside the path keep zeros.
  void backward(ValueId loss) {
    check(loss);
    if (vals_[loss].shape.numel() != 1)
      throw std::invalid_argument(detail::str("backward: loss must be scalar, got ",
                                              vals_[loss].shape.str()));
    for (ValueId i = 0; i < nodes_.size(); ++i)
      if (reqgrad_[i]) {
        vals_[i].ensure_grad();
        vals_[i].zero_grad();
      }
    if (!reqgrad_[loss]) return;

    std::vector<std::uint8_t> needed(nodes_.size(), 0);
    needed[loss] = 1;
    for (ValueId id = loss + 1; id-- > 0;) {
      if (!needed[id]) continue;
      for (ValueId in : nodes_[id].in) needed[in] = 1;
    }

    vals_[loss].grad[0] = 1.0f;
    for (ValueId id = loss + 1; id-- > 0;) {
      if (!needed[id] || !reqgrad_[id]) continue;
      backward_node(id);
    }
  }

  // Evaluates the scalar value `out` with every node recomputed in double
  // precision, with element `elem` of leaf `leaf_id` offset by `delta`.
  // This is the reference path finite differences are taken against.
  double eval_reference(ValueId out, ValueId leaf_id, std::size_t elem,
                        double delta) const {
    check(out);
    check(leaf_id);
    if (nodes_[leaf_id].op != Op::leaf)
      throw std::invalid_argument("eval_reference: perturbed value is not a leaf");
    if (elem >= vals_[leaf_id].data.size())
      throw std::invalid_argument("eval_reference: element index out of range");
    if (vals_[out].shape.numel() != 1)
      throw std::invalid_argument("eval_reference: output must be scalar");

    std::vector<std::vector<double>> bufs(out + 1);
    for (ValueId id = 0; id <= out; ++id) {
      const Node& node = nodes_[id];
      const Shape s = vals_[id].shape;
      switch (node.op) {
        case Op::leaf: {
          const std::vector<float>& src = vals_[id].data;
          bufs[id].assign(src.begin(), src.end());
          if (id == leaf_id) bufs[id][elem] += delta;
          break;
        }
        case Op::conv2d:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::conv2d(vals_[node.in[0]].shape, bufs[node.in[0]].data(),
                          vals_[node.in[1]].shape, bufs[node.in[1]].data(),
                          bufs[node.in[2]].data(), bufs[id].data());
          break;
        case Op::pool_down:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::pool_down(vals_[node.in[0]].shape, bufs[node.in[0]].data(),
                             bufs[id].data());
          break;
        case Op::upsample:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::upsample(vals_[node.in[0]].shape, bufs[node.in[0]].data(),
                            bufs[id].data());
          break;
        case Op::concat_channels:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::concat_channels(vals_[node.in[0]].shape, bufs[node.in[0]].data(),
                                   vals_[node.in[1]].shape, bufs[node.in[1]].data(),
                                   bufs[id].data());
          break;
        case Op::relu:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::relu(bufs[node.in[0]].size(), bufs[node.in[0]].data(),
                        bufs[id].data());
          break;
        case Op::sigmoid:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::sigmoid(bufs[node.in[0]].size(), bufs[node.in[0]].data(),
                           bufs[id].data());
          break;
        case Op::bce_mean:
          bufs[id].assign(1, kernels::bce_mean(bufs[node.in[0]].size(),
                                               bufs[node.in[0]].data(),
                                               bufs[node.in[1]].data()));
          break;
        case Op::dense_distance:
          bufs[id].assign(
              1, kernels::dense_distance(vals_[node.in[1]].shape,
                                         bufs[node.in[0]].data(),
                                         bufs[node.in[1]].data(),
                                         bufs[node.in[2]].data(),
                                         bufs[node.in[3]].data()));
          break;
        case Op::weighted_point_mean:
          bufs[id].assign(1, kernels::weighted_point_mean(vals_[node.in[0]].shape,
                                                          bufs[node.in[0]].data(),
                                                          node.points));
          break;
        case Op::axpby:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::axpby(bufs[node.in[0]].size(), node.a, bufs[node.in[0]].data(),
                         node.b, bufs[node.in[1]].data(), bufs[id].data());
          break;
        case Op::add_const:
          bufs[id].resize(static_cast<std::size_t>(s.numel()));
          kernels::add_const(bufs[node.in[0]].size(), bufs[node.in[0]].data(),
                             node.a, bufs[id].data());
          break;
      }
    }
    return bufs[out][0];
  }

 private:
  enum class Op : std::uint8_t {
    leaf,
    conv2d,
    pool_down,
    upsample,
    concat_channels,
    relu,
    sigmoid,
    bce_mean,
    dense_distance,
    weighted_point_mean,
    axpby,
    add_const,
  };

  struct Node {
    Op op = Op::leaf;
    std::vector<ValueId> in;
    double a = 0.0;
    double b = 0.0;
    std::vector<SamplePoint> points;
  };

  void check(ValueId id) const {
    if (id >= nodes_.size())
      throw std::invalid_argument(detail::str("graph: unknown value id ", id));
  }

  bool any_grad(std::initializer_list<ValueId> ids) const {
    for (ValueId id : ids)
      if (reqgrad_[id]) return true;
    return false;
  }

  ValueId push(Node node, Tensor out, bool requires_grad) {
    nodes_.push_back(std::move(node));
    vals_.push_back(std::move(out));
    reqgrad_.push_back(requires_grad ? 1 : 0);
    return nodes_.size() - 1;
  }

  float* grad_ptr(ValueId id) {
    return reqgrad_[id] ? vals_[id].grad.data() : nullptr;
  }

  void backward_node(ValueId id) {
    const Node& node = nodes_[id];
    const float* gy = vals_[id].grad.data();
    switch (node.op) {
      case Op::leaf:
        break;
      case Op::conv2d:
        backward_conv2d(node, gy);
        break;
      case Op::pool_down:
        backward_pool(node, id, gy);
        break;
      case Op::upsample:
        backward_upsample(node, id, gy);
        break;
      case Op::concat_channels:
        backward_concat(node, gy);
        break;
      case Op::relu: {
        float* gx = grad_ptr(node.in[0]);
        if (!gx) break;
        const std::vector<float>& x = vals_[node.in[0]].data;
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x[i] > 0.0f) gx[i] += gy[i];
        break;
      }
      case Op::sigmoid: {
        float* gx = grad_ptr(node.in[0]);
        if (!gx) break;
        const std::vector<float>& y = vals_[id].data;
        for (std::size_t i = 0; i < y.size(); ++i) {
          const double v = static_cast<double>(y[i]);
          gx[i] += static_cast<float>(static_cast<double>(gy[i]) * v * (1.0 - v));
        }
        break;
      }
      case Op::bce_mean:
        backward_bce(node, gy[0]);
        break;
      case Op::dense_distance:
        backward_dense_distance(node, gy[0]);
        break;
      case Op::weighted_point_mean:
        backward_weighted_point_mean(node, gy[0]);
        break;
      case Op::axpby: {
        float* gx = grad_ptr(node.in[0]);
        float* gyb = grad_ptr(node.in[1]);
        const std::size_t n = vals_[id].data.size();
        for (std::size_t i = 0; i < n; ++i) {
          if (gx) gx[i] += static_cast<float>(node.a * static_cast<double>(gy[i]));
          if (gyb) gyb[i] += static_cast<float>(node.b * static_cast<double>(gy[i]));
        }
        break;
      }
      case Op::add_const: {
        float* gx = grad_ptr(node.in[0]);
        if (!gx) break;
        const std::size_t n = vals_[id].data.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i];
        break;
      }
    }
  }

  void backward_conv2d(const Node& node, const float* gy) {
    const Shape xs = vals_[node.in[0]].shape;
    const Shape ks = vals_[node.in[1]].shape;
    const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
    const int O = ks.n, KH = ks.h, KW = ks.w;
    const int ph = KH / 2, pw = KW / 2;
    const float* x = vals_[node.in[0]].data.data();
    const float* kern = vals_[node.in[1]].data.data();
    float* gx = grad_ptr(node.in[0]);
    float* gk = grad_ptr(node.in[1]);
    float* gb = grad_ptr(node.in[2]);

    if (gx) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          float* gxc = gx + (static_cast<std::size_t>(n) * C + c) * H * W;
          for (int p = 0; p < H; ++p)
            for (int q = 0; q < W; ++q) {
              double acc = 0.0;
              for (int o = 0; o < O; ++o) {
                const float* go = gy + (static_cast<std::size_t>(n) * O + o) * H * W;
                const float* ko =
                    kern + (static_cast<std::size_t>(o) * C + c) * KH * KW;
                for (int dy = 0; dy < KH; ++dy) {
                  const int i = p - dy + ph;
                  if (i < 0 || i >= H) continue;
                  for (int dx = 0; dx < KW; ++dx) {
                    const int j = q - dx + pw;
                    if (j < 0 || j >= W) continue;
                    acc += static_cast<double>(go[i * W + j]) *
                           static_cast<double>(ko[dy * KW + dx]);
                  }
                }
              }
              gxc[p * W + q] += static_cast<float>(acc);
            }
        }
    }
    if (gk) {
      for (int o = 0; o < O; ++o)
        for (int c = 0; c < C; ++c)
          for (int dy = 0; dy < KH; ++dy)
            for (int dx = 0; dx < KW; ++dx) {
              double acc = 0.0;
              for (int n = 0; n < N; ++n) {
                const float* go = gy + (static_cast<std::size_t>(n) * O + o) * H * W;
                const float* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H; ++i) {
                  const int yy = i + dy - ph;
                  if (yy < 0 || yy >= H) continue;
                  for (int j = 0; j < W; ++j) {
                    const int xx = j + dx - pw;
                    if (xx < 0 || xx >= W) continue;
                    acc += static_cast<double>(go[i * W + j]) *
                           static_cast<double>(xc[yy * W + xx]);
                  }
                }
              }
              gk[(static_cast<std::size_t>(o) * C + c) * KH * KW + dy * KW + dx] +=
                  static_cast<float>(acc);
            }
    }
    if (gb) {
      for (int o = 0; o < O; ++o) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          const float* go = gy + (static_cast<std::size_t>(n) * O + o) * H * W;
          for (int p = 0; p < H * W; ++p) acc += static_cast<double>(go[p]);
        }
        gb[o] += static_cast<float>(acc);
      }
    }
  }

  void backward_pool(const Node& node, ValueId id, const float* gy) {
    float* gx = grad_ptr(node.in[0]);
    if (!gx) return;
    const Shape xs = vals_[node.in[0]].shape;
    const Shape ys = vals_[id].shape;
    const float* x = vals_[node.in[0]].data.data();
    const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
        const std::size_t yoff =
            (static_cast<std::size_t>(n) * C + c) * ys.h * ys.w;
        for (int i = 0; i < ys.h; ++i)
          for (int j = 0; j < ys.w; ++j) {
            // First maximum in row-major scan order wins ties.
            std::size_t best = xoff + (2 * i) * W + 2 * j;
            const std::size_t cand[3] = {xoff + (2 * i) * W + 2 * j + 1,
                                         xoff + (2 * i + 1) * W + 2 * j,
                                         xoff + (2 * i + 1) * W + 2 * j + 1};
            for (std::size_t cidx : cand)
              if (x[cidx] > x[best]) best = cidx;
            gx[best] += gy[yoff + i * ys.w + j];
          }
      }
  }

  void backward_upsample(const Node& node, ValueId, const float* gy) {
    float* gx = grad_ptr(node.in[0]);
    if (!gx) return;
    const Shape xs = vals_[node.in[0]].shape;
    const int N = xs.n, C = xs.c, H = xs.h, W = xs.w;
    const int OW = 2 * W;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
        const std::size_t yoff = (static_cast<std::size_t>(n) * C + c) * 4 * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const double acc =
                static_cast<double>(gy[yoff + (2 * i) * OW + 2 * j]) +
                static_cast<double>(gy[yoff + (2 * i) * OW + 2 * j + 1]) +
                static_cast<double>(gy[yoff + (2 * i + 1) * OW + 2 * j]) +
                static_cast<double>(gy[yoff + (2 * i + 1) * OW + 2 * j + 1]);
            gx[xoff + i * W + j] += static_cast<float>(acc);
          }
      }
  }

  void backward_concat(const Node& node, const float* gy) {
    const Shape as = vals_[node.in[0]].shape;
    const Shape bs = vals_[node.in[1]].shape;
    float* ga = grad_ptr(node.in[0]);
    float* gb = grad_ptr(node.in[1]);
    const std::size_t plane = static_cast<std::size_t>(as.h) * as.w;
    for (int n = 0; n < as.n; ++n) {
      const float* gn = gy + static_cast<std::size_t>(n) * (as.c + bs.c) * plane;
      if (ga) {
        float* gan = ga + static_cast<std::size_t>(n) * as.c * plane;
        for (std::size_t i = 0; i < as.c * plane; ++i) gan[i] += gn[i];
      }
      if (gb) {
        float* gbn = gb + static_cast<std::size_t>(n) * bs.c * plane;
        const float* gsrc = gn + as.c * plane;
        for (std::size_t i = 0; i < bs.c * plane; ++i) gbn[i] += gsrc[i];
      }
    }
  }

  void backward_bce(const Node& node, float g) {
    const std::vector<float>& pred = vals_[node.in[0]].data;
    const std::vector<float>& target = vals_[node.in[1]].data;
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    float* gp = grad_ptr(node.in[0]);
    float* gt = grad_ptr(node.in[1]);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double p = static_cast<double>(pred[i]);
      const double s = static_cast<double>(target[i]);
      if (gp) {
        // Zero outside the clamp: the loss is constant in the prediction there.
        double d = 0.0;
        if (p > kernels::kBceLo && p < kernels::kBceHi)
          d = (-s / p + (1.0 - s) / (1.0 - p)) * inv_n;
        gp[i] += static_cast<float>(static_cast<double>(g) * d);
      }
      if (gt) {
        const double a = std::min(std::max(p, kernels::kBceLo), kernels::kBceHi);
        gt[i] += static_cast<float>(static_cast<double>(g) *
                                    (std::log(1.0 - a) - std::log(a)) * inv_n);
      }
    }
  }

  void backward_dense_distance(const Node& node, float g) {
    const Shape ds = vals_[node.in[1]].shape;
    const int dim = ds.c;
    const std::size_t plane = static_cast<std::size_t>(ds.h) * ds.w;
    const float* a1 = vals_[node.in[0]].data.data();
    const float* d1 = vals_[node.in[1]].data.data();
    const float* a2 = vals_[node.in[2]].data.data();
    const float* d2 = vals_[node.in[3]].data.data();
    std::vector<double> diff(dim, 0.0);
    double sq = 0.0;
    for (int k = 0; k < dim; ++k) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        s1 += static_cast<double>(a1[p]) * static_cast<double>(d1[k * plane + p]);
        s2 += static_cast<double>(a2[p]) * static_cast<double>(d2[k * plane + p]);
      }
      diff[k] = s1 - s2;
      sq += diff[k] * diff[k];
    }
    const double norm = std::sqrt(sq);
    if (norm == 0.0) return;  // subgradient 0 at the kink
    const double scale = static_cast<double>(g) / (norm * static_cast<double>(plane));
    float* ga1 = grad_ptr(node.in[0]);
    float* ga2 = grad_ptr(node.in[2]);
    for (std::size_t p = 0; p < plane; ++p) {
      if (ga1) {
        double acc = 0.0;
        for (int k = 0; k < dim; ++k)
          acc += diff[k] * static_cast<double>(d1[k * plane + p]);
        ga1[p] += static_cast<float>(scale * acc);
      }
      if (ga2) {
        double acc = 0.0;
        for (int k = 0; k < dim; ++k)
          acc += diff[k] * static_cast<double>(d2[k * plane + p]);
        ga2[p] -= static_cast<float>(scale * acc);
      }
    }
  }

  void backward_weighted_point_mean(const Node& node, float g) {
    float* ga = grad_ptr(node.in[0]);
    if (!ga) return;
    const Tensor& at = vals_[node.in[0]];
    const Shape as = at.shape;
    double sw = 0.0, sv = 0.0;
    std::vector<double> w(node.points.size());
    for (std::size_t k = 0; k < node.points.size(); ++k) {
      w[k] = bilinear_at(as.h, as.w, at.data.data(), node.points[k].x,
                         node.points[k].y);
      sw += w[k];
      sv += w[k] * node.points[k].value;
    }
    const double out = sv / sw;
    for (std::size_t k = 0; k < node.points.size(); ++k) {
      const double dw = static_cast<double>(g) * (node.points[k].value - out) / sw;
      bilinear_scatter(as.h, as.w, ga, node.points[k].x, node.points[k].y, dw);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> vals_;
  std::vector<std::uint8_t> reqgrad_;
};

// One plain gradient-descent update, p -= lr * g, computed in double.
inline void sgd_step(std::vector<float>& params, const std::vector<float>& grads,
                     double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument(detail::str("sgd_step: parameter count ",
                                            params.size(), " != gradient count ",
                                            grads.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i] = static_cast<float>(static_cast<double>(params[i]) -
                                   lr * static_cast<double>(grads[i]));
}

inline void sgd_step(Tensor& t, const std::vector<float>& grads, double lr) {
  sgd_step(t.data, grads, lr);
}

// Compares analytic gradients against central differences of the 64-bit
// reference path. Parameters are enumerated leaf-major and sampled at a
// fixed stride; the step is eps*max(1,|v|) per element. Returns the largest
// relative error |analytic - fd| / max(1, |fd|) over the sampled set.
inline double grad_check(Graph& g, ValueId loss, double eps, int max_samples = 48) {
  if (!(eps >= 1e-4 && eps <= 1e-2))
    throw std::invalid_argument(
        detail::str("grad_check: eps ", eps, " outside [1e-4, 1e-2]"));
  if (max_samples < 1) throw std::invalid_argument("grad_check: max_samples < 1");
  const std::vector<ValueId> params = g.parameter_ids();
  std::size_t total = 0;
  for (ValueId p : params) total += g.value(p).data.size();
  if (total == 0)
    throw std::invalid_argument("grad_check: graph has no trainable parameters");

  g.backward(loss);

  const std::size_t samples = std::min<std::size_t>(total, max_samples);
  double worst = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    std::size_t pos = k * total / samples;
    ValueId leaf = params[0];
    for (ValueId p : params) {
      const std::size_t n = g.value(p).data.size();
      if (pos < n) {
        leaf = p;
        break;
      }
      pos -= n;
    }
    const double v = static_cast<double>(g.value(leaf).data[pos]);
    const double delta = eps * std::max(1.0, std::fabs(v));
    const double fp = g.eval_reference(loss, leaf, pos, delta);
    const double fm = g.eval_reference(loss, leaf, pos, -delta);
    const double fd = (fp - fm) / (2.0 * delta);
    const double ga = static_cast<double>(g.grad(leaf)[pos]);
    worst = std::max(worst, std::fabs(ga - fd) / std::max(1.0, std::fabs(fd)));
  }
  return worst;
}

}  // namespace dsf
