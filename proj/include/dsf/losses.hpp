#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/features.hpp"
#include "dsf/graph.hpp"
#include "dsf/maps.hpp"

namespace dsf {

// Relative weighting of the two loss terms at a given epoch. Under the
// default schedule the semantic term starts at weight 1 and decays by 0.9
// per epoch while the matching term takes up the remainder; the flipped
// schedule decays the matching weight instead.
struct LossWeights {
  int epoch = 0;
  double w_sem = 1.0;
  double w_mat = 0.0;
};

inline LossWeights alpha_schedule(int epoch, bool semantic_decays = true) {
  if (epoch < 0)
    throw std::invalid_argument(detail::str("alpha_schedule: negative epoch ", epoch));
  const double decayed = std::pow(0.9, static_cast<double>(epoch));
  LossWeights w;
  w.epoch = epoch;
  if (semantic_decays) {
    w.w_sem = decayed;
    w.w_mat = 1.0 - decayed;
  } else {
    w.w_mat = decayed;
    w.w_sem = 1.0 - decayed;
  }
  return w;
}

inline double triplet_loss(double d_qp, double d_qn, double margin) {
  if (!(margin >= 0.0))
    throw std::invalid_argument(detail::str("triplet_loss: bad margin ", margin));
  return std::max(d_qp - d_qn + margin, 0.0);
}

inline double hybrid_loss(double sem, double mat, const LossWeights& w) {
  return w.w_sem * sem + w.w_mat * mat;
}

// Graph builders. Each returns the id of a scalar node.

inline ValueId semantic_loss(Graph& g, ValueId activation, const StabilityMap& target) {
  const Shape as = g.value(activation).shape;
  if (as.h != target.height || as.w != target.width)
    throw std::invalid_argument(
        detail::str("semantic_loss: activation ", as.str(), " vs target ",
                    target.width, "x", target.height));
  const ValueId t = g.leaf(to_tensor(target), false);
  return g.bce_mean(activation, t);
}

inline ValueId dense_distance_loss(Graph& g, ValueId a1, const DescriptorGrid& d1,
                                   ValueId a2, const DescriptorGrid& d2) {
  const ValueId g1 = g.leaf(to_tensor(d1), false);
  const ValueId g2 = g.leaf(to_tensor(d2), false);
  return g.dense_distance(a1, g1, a2, g2);
}

inline ValueId triplet_hinge(Graph& g, ValueId d_qp, ValueId d_qn, double margin) {
  if (!(margin >= 0.0))
    throw std::invalid_argument(detail::str("triplet_hinge: bad margin ", margin));
  const ValueId diff = g.axpby(1.0, d_qp, -1.0, d_qn);
  return g.relu(g.add_const(diff, margin));
}

inline ValueId hybrid_loss(Graph& g, ValueId sem, ValueId mat, const LossWeights& w) {
  return g.axpby(w.w_sem, sem, w.w_mat, mat);
}

// Dense matching payload: externally computed descriptor grids for all
// three images of a triplet.
inline ValueId matching_loss_for_triplet(Graph& g, ValueId a_q, ValueId a_p,
                                         ValueId a_n, const DescriptorGrid& dq,
                                         const DescriptorGrid& dp,
                                         const DescriptorGrid& dn, double margin) {
  const ValueId d_qp = dense_distance_loss(g, a_q, dq, a_p, dp);
  const ValueId d_qn = dense_distance_loss(g, a_q, dq, a_n, dn);
  return triplet_hinge(g, d_qp, d_qn, margin);
}

// Sparse matching payload: per pair, the query-side sampling locations of
// the matches (pixel coordinates) with their symmetric epipolar distances
// under the pair's fitted model.
struct SparsePairData {
  std::vector<SamplePoint> points;
};

struct SparseTripletData {
  SparsePairData query_positive;
  SparsePairData query_negative;
};

inline ValueId matching_loss_for_triplet(Graph& g, ValueId a_q,
                                         const SparseTripletData& data,
                                         double margin) {
  if (data.query_positive.points.empty() || data.query_negative.points.empty())
    throw std::invalid_argument(
        "matching_loss_for_triplet: sparse payload missing matches for a pair");
  const ValueId d_qp = g.weighted_point_mean(a_q, data.query_positive.points);
  const ValueId d_qn = g.weighted_point_mean(a_q, data.query_negative.points);
  return triplet_hinge(g, d_qp, d_qn, margin);
}

}  // namespace dsf
