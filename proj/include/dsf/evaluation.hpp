#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dsf/common.hpp"

namespace dsf {

// A candidate loop between two sequence positions, scored by geometric
// verification (lower is more confident; +inf means unverified).
struct ScoredPair {
  int a = -1;
  int b = -1;
  double score = std::numeric_limits<double>::infinity();
};

struct LoopPair {
  int a = -1;
  int b = -1;
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

// A verification score paired with whether the pair is a true loop.
struct LabeledScore {
  double score = std::numeric_limits<double>::infinity();
  bool positive = false;
};

namespace detail {

inline std::pair<int, int> canonical_pair(int a, int b, const char* what) {
  if (a < 0 || b < 0 || a == b)
    throw std::invalid_argument(detail::str(what, ": bad pair (", a, ", ", b, ")"));
  return {std::min(a, b), std::max(a, b)};
}

}  // namespace detail

// Joins candidate scores against ground-truth loop pairs (order within a
// pair is irrelevant). True loops absent from the candidate list enter as
// never-detected positives with infinite score.
inline std::vector<LabeledScore> label_scores(const std::vector<ScoredPair>& scored,
                                              const std::vector<LoopPair>& truth) {
  std::set<std::pair<int, int>> positives;
  for (const LoopPair& p : truth)
    positives.insert(detail::canonical_pair(p.a, p.b, "label_scores truth"));
  if (positives.empty())
    throw std::invalid_argument("label_scores: ground truth has no positive pairs");

  std::set<std::pair<int, int>> seen;
  std::vector<LabeledScore> rows;
  rows.reserve(scored.size() + positives.size());
  for (const ScoredPair& s : scored) {
    const auto key = detail::canonical_pair(s.a, s.b, "label_scores candidate");
    if (!seen.insert(key).second)
      throw std::invalid_argument(detail::str("label_scores: duplicate candidate (",
                                              key.first, ", ", key.second, ")"));
    rows.push_back({s.score, positives.count(key) > 0});
  }
  for (const auto& key : positives)
    if (!seen.count(key))
      rows.push_back({std::numeric_limits<double>::infinity(), true});
  return rows;
}

// Precision/recall swept over the distinct finite scores, ascending; an
// entry counts as detected once its score is <= the threshold. Infinite
// scores are never detected, so unverified positives depress recall.
inline std::vector<PrPoint> pr_curve(std::vector<LabeledScore> rows) {
  if (rows.empty()) throw std::invalid_argument("pr_curve: no scores");
  std::size_t total_pos = 0;
  for (const LabeledScore& r : rows) {
    if (std::isnan(r.score)) throw std::invalid_argument("pr_curve: NaN score");
    if (r.positive) ++total_pos;
  }
  if (total_pos == 0)
    throw std::invalid_argument("pr_curve: no positive labels, recall undefined");

  std::vector<double> thresholds;
  for (const LabeledScore& r : rows)
    if (std::isfinite(r.score)) thresholds.push_back(r.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  std::sort(rows.begin(), rows.end(), [](const LabeledScore& a, const LabeledScore& b) {
    return a.score < b.score;
  });

  std::vector<PrPoint> curve;
  curve.reserve(thresholds.size());
  std::size_t next = 0;
  std::size_t detected = 0, tp = 0;
  for (double t : thresholds) {
    while (next < rows.size() && rows[next].score <= t) {
      ++detected;
      if (rows[next].positive) ++tp;
      ++next;
    }
    PrPoint pt;
    pt.threshold = t;
    pt.precision = detected > 0
                       ? static_cast<double>(tp) / static_cast<double>(detected)
                       : 1.0;
    pt.recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    curve.push_back(pt);
  }
  return curve;
}

inline std::vector<PrPoint> pr_curve(const std::vector<ScoredPair>& scored,
                                     const std::vector<LoopPair>& truth) {
  return pr_curve(label_scores(scored, truth));
}

// Trapezoidal area under the precision/recall curve, anchored at recall 0
// with the first point's precision.
inline double auc(std::vector<PrPoint> curve) {
  if (curve.size() < 2)
    throw std::invalid_argument(detail::str("auc: need at least 2 points, got ",
                                            curve.size()));
  std::stable_sort(curve.begin(), curve.end(),
                   [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  double area = 0.0;
  double prev_r = 0.0, prev_p = curve.front().precision;
  for (const PrPoint& pt : curve) {
    area += (pt.recall - prev_r) * 0.5 * (pt.precision + prev_p);
    prev_r = pt.recall;
    prev_p = pt.precision;
  }
  return area;
}

// ---------------------------------------------------------------------------
// Trajectory metrics.

struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

using Trajectory = std::vector<Pose>;

inline void validate_trajectory(const Trajectory& traj) {
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const Eigen::Matrix3d& r = traj[i].rotation;
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity())
                             .cwiseAbs()
                             .maxCoeff();
    if (ortho > 1e-6)
      throw std::invalid_argument(detail::str("trajectory pose ", i,
                                              ": rotation not orthonormal (", ortho,
                                              ")"));
    if (std::abs(r.determinant() - 1.0) > 1e-6)
      throw std::invalid_argument(detail::str("trajectory pose ", i,
                                              ": rotation determinant ",
                                              r.determinant()));
    if (!traj[i].translation.allFinite())
      throw std::invalid_argument(detail::str("trajectory pose ", i,
                                              ": non-finite translation"));
  }
}

namespace detail {

inline std::vector<double> cumulative_path(const Trajectory& t) {
  std::vector<double> acc(t.size(), 0.0);
  for (std::size_t i = 1; i < t.size(); ++i)
    acc[i] = acc[i - 1] + (t[i].translation - t[i - 1].translation).norm();
  return acc;
}

inline double rotation_angle(const Eigen::Matrix3d& r) {
  const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace detail

// Mean relative rotation error in degrees per meter, over every segment that
// first reaches step_m meters of ground-truth path from its start pose.
inline double rotation_error(const Trajectory& gt, const Trajectory& est,
                             double step_m) {
  if (gt.size() != est.size())
    throw std::invalid_argument(detail::str("rotation_error: trajectory lengths ",
                                            gt.size(), " vs ", est.size()));
  if (gt.size() < 2)
    throw std::invalid_argument("rotation_error: need at least two poses");
  if (!(step_m > 0.0))
    throw std::invalid_argument(detail::str("rotation_error: step_m=", step_m));
  validate_trajectory(gt);
  validate_trajectory(est);

  const std::vector<double> path = detail::cumulative_path(gt);
  double total = 0.0;
  int count = 0;
  std::size_t j = 0;
  for (std::size_t i = 0; i + 1 < gt.size(); ++i) {
    if (j < i + 1) j = i + 1;
    while (j < gt.size() && path[j] - path[i] < step_m) ++j;
    if (j == gt.size()) break;
    const double seg = path[j] - path[i];
    const Eigen::Matrix3d rel_gt = gt[i].rotation.transpose() * gt[j].rotation;
    const Eigen::Matrix3d rel_est = est[i].rotation.transpose() * est[j].rotation;
    const double angle = detail::rotation_angle(rel_gt.transpose() * rel_est);
    total += (angle * 180.0 / std::numbers::pi) / seg;
    ++count;
  }
  if (count == 0)
    throw std::invalid_argument(detail::str(
        "rotation_error: no segment reaches ", step_m, " m of ground-truth path"));
  return total / count;
}

// Rigidly aligns the estimate to the ground truth (rotation + translation,
// no scale), then reports the RMS residual as a percentage of the
// ground-truth path length.
inline double offset_deviation(const Trajectory& gt, const Trajectory& est) {
  if (gt.size() != est.size())
    throw std::invalid_argument(detail::str("offset_deviation: trajectory lengths ",
                                            gt.size(), " vs ", est.size()));
  if (gt.size() < 2)
    throw std::invalid_argument("offset_deviation: need at least two poses");
  validate_trajectory(gt);
  validate_trajectory(est);

  const std::size_t n = gt.size();
  Eigen::Vector3d cg = Eigen::Vector3d::Zero(), ce = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    cg += gt[i].translation;
    ce += est[i].translation;
  }
  cg /= static_cast<double>(n);
  ce /= static_cast<double>(n);

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i)
    h += (est[i].translation - ce) * (gt[i].translation - cg).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Eigen::Matrix3d r = svd.matrixV() * d * svd.matrixU().transpose();

  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d aligned = r * (est[i].translation - ce) + cg;
    sq += (aligned - gt[i].translation).squaredNorm();
  }
  const double rms = std::sqrt(sq / static_cast<double>(n));

  const std::vector<double> path = detail::cumulative_path(gt);
  if (!(path.back() > 0.0))
    throw std::invalid_argument("offset_deviation: ground-truth path has zero length");
  return 100.0 * rms / path.back();
}

// Rank-based ROC AUC: the probability that a positively labeled score
// outranks a negatively labeled one, with ties sharing averaged ranks.
inline double activation_quality(const std::vector<double>& scores,
                                 const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument(detail::str("activation_quality: ", scores.size(),
                                            " scores vs ", labels.size(), " labels"));
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1)
      throw std::invalid_argument(detail::str("activation_quality: label ",
                                              int(labels[i]), " at ", i));
    if (std::isnan(scores[i]))
      throw std::invalid_argument(detail::str("activation_quality: NaN score at ", i));
    if (labels[i]) ++n_pos; else ++n_neg;
  }
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument(detail::str("activation_quality: need both classes (",
                                            n_pos, " positive, ", n_neg, " negative)"));

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]]) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) * 0.5) /
         (np * static_cast<double>(n_neg));
}

}  // namespace dsf
