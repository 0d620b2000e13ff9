#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/features.hpp"
#include "dsf/geometry.hpp"
#include "dsf/maps.hpp"

namespace dsf {

namespace detail {

// Shared ordering: higher score first, ties by (y, x, original index) so
// equal inputs produce identical output order everywhere.
inline std::vector<std::size_t> rank_by_score(const std::vector<Keypoint>& kps,
                                              const std::vector<double>& score) {
  std::vector<std::size_t> idx(kps.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    if (kps[a].y != kps[b].y) return kps[a].y < kps[b].y;
    if (kps[a].x != kps[b].x) return kps[a].x < kps[b].x;
    return a < b;
  });
  return idx;
}

inline void check_keypoint_bounds(const FeatureSet& fs) {
  if (fs.width < 1 || fs.height < 1)
    throw std::invalid_argument("selection: feature set lacks image extent");
  for (const Keypoint& kp : fs.keypoints)
    if (!(kp.x >= 0.0 && kp.x <= fs.width - 1.0 && kp.y >= 0.0 &&
          kp.y <= fs.height - 1.0))
      throw std::invalid_argument(detail::str("selection: keypoint (", kp.x, ",",
                                              kp.y, ") outside image ", fs.width,
                                              "x", fs.height));
}

}  // namespace detail

// Baseline: strongest detector responses win.
inline FeatureSet select_topk_response(const FeatureSet& fs, int k) {
  fs.validate();
  if (k < 1) throw std::invalid_argument(detail::str("select_topk_response: k=", k));
  if (fs.empty())
    throw std::invalid_argument("select_topk_response: empty feature set");
  std::vector<double> score(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) score[i] = fs.keypoints[i].response;
  std::vector<std::size_t> idx = detail::rank_by_score(fs.keypoints, score);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k)));
  return subset(fs, idx);
}

// Semantic baseline: discard keypoints whose nearest stability cell is
// dynamic, then rank by response. Everything dynamic yields an empty set,
// which is a valid outcome here rather than an error.
inline FeatureSet semantic_filter_select(const FeatureSet& fs, const StabilityMap& s,
                                         int k) {
  fs.validate();
  if (k < 1) throw std::invalid_argument(detail::str("semantic_filter_select: k=", k));
  if (fs.empty())
    throw std::invalid_argument("semantic_filter_select: empty feature set");
  if (fs.width != s.width || fs.height != s.height)
    throw std::invalid_argument(
        detail::str("semantic_filter_select: features on ", fs.width, "x", fs.height,
                    " vs mask ", s.width, "x", s.height));
  detail::check_keypoint_bounds(fs);

  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const int cx = static_cast<int>(std::lround(fs.keypoints[i].x));
    const int cy = static_cast<int>(std::lround(fs.keypoints[i].y));
    if (s.at(std::min(cy, s.height - 1), std::min(cx, s.width - 1)) == 1)
      kept.push_back(i);
  }
  FeatureSet filtered = subset(fs, kept);
  if (filtered.empty()) return filtered;
  return select_topk_response(filtered, k);
}

struct SelectedFeatures {
  FeatureSet set;
  std::vector<double> weights;  // activation sample per kept keypoint
};

// Activation-driven selection: rank by the bilinear activation sample at
// each keypoint and keep the samples as match weights.
inline SelectedFeatures select_topk_activation(const FeatureSet& fs,
                                               const ActivationMap& a, int k) {
  fs.validate();
  if (k < 1) throw std::invalid_argument(detail::str("select_topk_activation: k=", k));
  if (fs.empty())
    throw std::invalid_argument("select_topk_activation: empty feature set");
  if (fs.width != a.width || fs.height != a.height)
    throw std::invalid_argument(
        detail::str("select_topk_activation: features on ", fs.width, "x", fs.height,
                    " vs activation ", a.width, "x", a.height));
  detail::check_keypoint_bounds(fs);

  std::vector<double> score(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i)
    score[i] = bilinear_sample(a, fs.keypoints[i].x, fs.keypoints[i].y);
  std::vector<std::size_t> idx = detail::rank_by_score(fs.keypoints, score);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k)));

  SelectedFeatures out;
  out.set = subset(fs, idx);
  out.weights.reserve(idx.size());
  for (std::size_t i : idx) out.weights.push_back(score[i]);
  return out;
}

// Fills each match's weight with the activation sampled at its query-side
// keypoint. Match coordinates are normalized; the map extent converts back.
inline std::vector<Match> attach_weights(std::vector<Match> matches,
                                         const ActivationMap& a) {
  for (Match& m : matches) {
    const double px = norm_to_pixel(m.p1.x, a.width);
    const double py = norm_to_pixel(m.p1.y, a.height);
    m.weight = bilinear_sample(a, px, py);
  }
  return matches;
}

}  // namespace dsf
