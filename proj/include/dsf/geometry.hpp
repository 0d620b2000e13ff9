#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/rng.hpp"

namespace dsf {

// Image point in normalized coordinates: pixel (0..extent-1) mapped to
// [-1, 1] per axis. Doubles throughout; float storage would wreck the
// epipolar residuals of exact synthetic scenes.
struct NormPoint {
  double x = 0.0;
  double y = 0.0;
};

inline double pixel_to_norm(double p, int extent) {
  if (extent < 2)
    throw std::invalid_argument(detail::str("pixel_to_norm: extent ", extent, " < 2"));
  return 2.0 * p / (extent - 1) - 1.0;
}

inline double norm_to_pixel(double v, int extent) {
  if (extent < 2)
    throw std::invalid_argument(detail::str("norm_to_pixel: extent ", extent, " < 2"));
  return (v + 1.0) * 0.5 * (extent - 1);
}

// A putative correspondence between two views, normalized coordinates.
// The weight, when present, is an activation sample at the p1-side keypoint.
struct Match {
  NormPoint p1;
  NormPoint p2;
  std::optional<double> weight;
};

// Row-major 3x3; maps a homogeneous point of view 1 to its epipolar line in
// view 2 (l = F * u1, with u2' * F * u1 = 0 for a perfect correspondence).
using FundamentalMatrix = Eigen::Matrix3d;

struct HartleyFrame {
  std::vector<NormPoint> points;
  Eigen::Matrix3d transform;  // maps raw homogeneous points to the frame
};

// Translates the centroid to the origin and scales the mean radius to
// sqrt(2). Identical points carry no frame and are rejected.
inline HartleyFrame hartley_normalize(const std::vector<NormPoint>& pts) {
  if (pts.empty()) throw std::invalid_argument("hartley_normalize: no points");
  double cx = 0.0, cy = 0.0;
  for (const NormPoint& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_r = 0.0;
  for (const NormPoint& p : pts) mean_r += std::hypot(p.x - cx, p.y - cy);
  mean_r /= static_cast<double>(pts.size());
  if (mean_r <= 0.0)
    throw std::runtime_error("hartley_normalize: points are all identical");
  const double s = std::sqrt(2.0) / mean_r;

  HartleyFrame out;
  out.transform << s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0;
  out.points.reserve(pts.size());
  for (const NormPoint& p : pts)
    out.points.push_back({s * (p.x - cx), s * (p.y - cy)});
  return out;
}

// Least-squares eight-point estimate with rank-2 enforcement. The result is
// scaled to unit Frobenius norm with its largest-magnitude entry positive,
// so equal inputs give byte-equal outputs.
// Scale convention shared by every producer of a fundamental matrix: unit
// Frobenius norm with the largest-magnitude entry positive.
inline FundamentalMatrix canonicalize_f(FundamentalMatrix f) {
  const double norm = f.norm();
  if (!(norm > 0.0) || !f.allFinite())
    throw std::invalid_argument("canonicalize_f: zero or non-finite matrix");
  f /= norm;
  Eigen::Index mr = 0, mc = 0;
  f.cwiseAbs().maxCoeff(&mr, &mc);
  if (f(mr, mc) < 0.0) f = -f;
  return f;
}

inline FundamentalMatrix eight_point(const std::vector<Match>& matches) {
  const std::size_t n = matches.size();
  if (n < 8)
    throw std::invalid_argument(
        detail::str("eight_point: need at least 8 matches, got ", n));

  std::vector<NormPoint> p1, p2;
  p1.reserve(n);
  p2.reserve(n);
  for (const Match& m : matches) {
    p1.push_back(m.p1);
    p2.push_back(m.p2);
  }
  const HartleyFrame f1 = hartley_normalize(p1);
  const HartleyFrame f2 = hartley_normalize(p2);

  Eigen::MatrixXd a(n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = f1.points[i].x, y1 = f1.points[i].y;
    const double x2 = f2.points[i].x, y2 = f2.points[i].y;
    a.row(static_cast<Eigen::Index>(i)) << x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1,
        y2, x1, y1, 1.0;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  // With fewer than 8 independent constraints the nullspace has dimension
  // greater than one and no single solution exists.
  if (sv(7) <= 1e-12 * std::max(sv(0), 1e-300))
    throw std::runtime_error("eight_point: degenerate configuration");
  const Eigen::VectorXd f = svd.matrixV().col(8);

  Eigen::Matrix3d fm;
  fm << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);

  Eigen::JacobiSVD<Eigen::Matrix3d> fsvd(fm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = fsvd.singularValues();
  s(2) = 0.0;
  fm = fsvd.matrixU() * s.asDiagonal() * fsvd.matrixV().transpose();

  const Eigen::Matrix3d out = f2.transform.transpose() * fm * f1.transform;
  if (!(out.norm() > 0.0)) throw std::runtime_error("eight_point: zero solution");
  return canonicalize_f(out);
}

// Distance from point b to the epipolar line of point a.
inline double epipolar_distance(const FundamentalMatrix& f, const NormPoint& a,
                                const NormPoint& b) {
  const Eigen::Vector3d l = f * Eigen::Vector3d(a.x, a.y, 1.0);
  const double den = std::hypot(l(0), l(1));
  if (den <= 0.0)
    throw std::runtime_error(detail::str(
        "epipolar_distance: epipolar line undefined for point (", a.x, ",", a.y, ")"));
  return std::abs(l(0) * b.x + l(1) * b.y + l(2)) / den;
}

// Point-to-line distance averaged over both directions for one match. The
// reverse direction maps through the transpose.
inline double symmetric_epipolar_distance(const FundamentalMatrix& f, const Match& m) {
  return 0.5 * (epipolar_distance(f, m.p1, m.p2) +
                epipolar_distance(f.transpose(), m.p2, m.p1));
}

// Mean symmetric distance over a match set.
inline double reprojection_error(const FundamentalMatrix& f,
                                 const std::vector<Match>& matches) {
  if (matches.empty())
    throw std::invalid_argument("reprojection_error: empty match list");
  double acc = 0.0;
  for (const Match& m : matches) acc += symmetric_epipolar_distance(f, m);
  return acc / static_cast<double>(matches.size());
}

// Activation-weighted mean of per-match symmetric distances.
inline double sparse_distance(const std::vector<Match>& matches,
                              const FundamentalMatrix& f) {
  if (matches.empty()) throw std::invalid_argument("sparse_distance: empty match list");
  double sw = 0.0, acc = 0.0;
  for (const Match& m : matches) {
    if (!m.weight)
      throw std::invalid_argument("sparse_distance: match without weight");
    const double w = *m.weight;
    if (!(w >= 0.0) || !std::isfinite(w))
      throw std::invalid_argument(detail::str("sparse_distance: bad weight ", w));
    sw += w;
    acc += w * symmetric_epipolar_distance(f, m);
  }
  if (sw <= 0.0) throw std::runtime_error("sparse_distance: all weights are zero");
  return acc / sw;
}

struct RansacConfig {
  double threshold = 1e-3;  // symmetric distance, normalized coordinates
  int max_iters = 500;
  std::uint64_t seed = 0;
  bool weighted = false;  // sample matches proportionally to their weight
  double confidence = 0.999;
};

struct RansacResult {
  enum class Status { ok, no_consensus };
  Status status = Status::no_consensus;
  FundamentalMatrix f = FundamentalMatrix::Zero();
  std::vector<std::uint8_t> inliers;
  int inlier_count = 0;
  int iterations = 0;

  bool ok() const { return status == Status::ok; }
};

// Consensus search over minimal eight-point samples with the standard
// adaptive termination. A run that never reaches 8 inliers returns a
// no_consensus result; precondition violations throw instead.
inline RansacResult ransac_fundamental(const std::vector<Match>& matches,
                                       const RansacConfig& cfg) {
  const std::size_t n = matches.size();
  if (n < 8)
    throw std::invalid_argument(
        detail::str("ransac_fundamental: need at least 8 matches, got ", n));
  if (!(cfg.threshold > 0.0))
    throw std::invalid_argument("ransac_fundamental: threshold must be positive");
  if (cfg.max_iters < 1)
    throw std::invalid_argument("ransac_fundamental: max_iters must be positive");
  if (!(cfg.confidence > 0.0 && cfg.confidence < 1.0))
    throw std::invalid_argument("ransac_fundamental: confidence outside (0,1)");

  std::vector<double> cdf;
  if (cfg.weighted) {
    cdf.resize(n);
    double acc = 0.0;
    std::size_t positive = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!matches[i].weight)
        throw std::invalid_argument("ransac_fundamental: weighted mode needs weights");
      const double w = *matches[i].weight;
      if (!(w >= 0.0) || !std::isfinite(w))
        throw std::invalid_argument(
            detail::str("ransac_fundamental: bad weight ", w));
      if (w > 0.0) ++positive;
      acc += w;
      cdf[i] = acc;
    }
    if (positive < 8)
      throw std::runtime_error(
          "ransac_fundamental: fewer than 8 matches with positive weight");
  }

  Rng rng(cfg.seed);
  auto draw_index = [&]() -> std::size_t {
    if (!cfg.weighted) return static_cast<std::size_t>(rng.uniform_index(n));
    const double total = cdf.back();
    const double u = rng.uniform() * total;
    return static_cast<std::size_t>(
        std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  };

  RansacResult best;
  std::vector<Match> sample(8);
  std::vector<std::size_t> picked;
  picked.reserve(8);

  int needed = cfg.max_iters;
  int it = 0;
  while (it < needed) {
    ++it;
    picked.clear();
    // Draw 8 distinct indices; zero-weight matches are never drawn.
    int guard = 0;
    while (picked.size() < 8) {
      const std::size_t idx = draw_index();
      if (std::find(picked.begin(), picked.end(), idx) == picked.end())
        picked.push_back(idx);
      if (++guard > 10000)
        throw std::runtime_error("ransac_fundamental: cannot draw a distinct sample");
    }
    for (std::size_t k = 0; k < 8; ++k) sample[k] = matches[picked[k]];

    FundamentalMatrix f;
    try {
      f = eight_point(sample);
    } catch (const std::runtime_error&) {
      continue;  // degenerate sample, spend the iteration
    }

    std::vector<std::uint8_t> flags(n, 0);
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (symmetric_epipolar_distance(f, matches[i]) < cfg.threshold) {
        flags[i] = 1;
        ++count;
      }
    }
    if (count > best.inlier_count) {
      best.f = f;
      best.inliers = std::move(flags);
      best.inlier_count = count;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double p_all = std::pow(w, 8);
      if (p_all >= 1.0) {
        needed = it;
      } else if (p_all > 0.0) {
        const double k = std::log(1.0 - cfg.confidence) / std::log(1.0 - p_all);
        needed = static_cast<int>(
            std::min<double>(cfg.max_iters, std::max(1.0, std::ceil(k))));
      }
    }
  }
  best.iterations = it;

  if (best.inlier_count < 8) {
    best.status = RansacResult::Status::no_consensus;
    best.f = FundamentalMatrix::Zero();
    best.inliers.assign(n, 0);
    best.inlier_count = 0;
    return best;
  }

  // Refit on the consensus set; fall back to the sample model if the refit
  // degenerates or loses the consensus.
  std::vector<Match> consensus;
  consensus.reserve(static_cast<std::size_t>(best.inlier_count));
  for (std::size_t i = 0; i < n; ++i)
    if (best.inliers[i]) consensus.push_back(matches[i]);
  try {
    const FundamentalMatrix refit = eight_point(consensus);
    std::vector<std::uint8_t> flags(n, 0);
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (symmetric_epipolar_distance(refit, matches[i]) < cfg.threshold) {
        flags[i] = 1;
        ++count;
      }
    }
    if (count >= 8) {
      best.f = refit;
      best.inliers = std::move(flags);
      best.inlier_count = count;
    }
  } catch (const std::runtime_error&) {
  }

  best.status = RansacResult::Status::ok;
  return best;
}

}  // namespace dsf
