#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/evaluation.hpp"
#include "dsf/maps.hpp"
#include "dsf/rng.hpp"

namespace dsf {

// True-loop pairs over a frame sequence.
struct LoopGroundTruth {
  int sequence_length = 0;
  std::vector<LoopPair> pairs;

  void validate() const {
    if (sequence_length < 1)
      throw std::invalid_argument(detail::str("LoopGroundTruth: sequence length ",
                                              sequence_length));
    for (const LoopPair& p : pairs)
      if (p.a < 0 || p.b < 0 || p.a == p.b || p.a >= sequence_length ||
          p.b >= sequence_length)
        throw std::invalid_argument(detail::str("LoopGroundTruth: bad pair (", p.a,
                                                ", ", p.b, ") in sequence of ",
                                                sequence_length));
  }
};

// Marks a cell stable iff its category is in the static set. Every name in
// the set must exist in the label map's table.
inline StabilityMap stability_from_labels(const LabelMap& lm,
                                          const std::set<std::string>& static_categories) {
  lm.validate();
  std::set<std::uint8_t> static_ids;
  for (const std::string& name : static_categories) {
    bool found = false;
    for (std::size_t id = 0; id < lm.categories.size(); ++id) {
      if (lm.categories[id] == name) {
        static_ids.insert(static_cast<std::uint8_t>(id));
        found = true;
        break;
      }
    }
    if (!found)
      throw std::invalid_argument(detail::str("stability_from_labels: category '",
                                              name, "' not in the label table"));
  }
  StabilityMap out(lm.height, lm.width, 0);
  for (std::size_t i = 0; i < lm.ids.size(); ++i)
    out.values[i] = static_ids.count(lm.ids[i]) ? 1 : 0;
  return out;
}

struct TripletRecord {
  int query = -1;
  int positive = -1;
  int negative = -1;
};

struct TripletMiningResult {
  std::vector<TripletRecord> triplets;
  int skipped_queries = 0;  // queries with no eligible negative
};

// One triplet per ground-truth pair per requested negative. The negative is
// drawn seeded-uniformly from ids that are not loop partners of the query
// and sit at least `gap` positions from both the query and the positive.
inline TripletMiningResult mine_triplets(const LoopGroundTruth& gt,
                                         int negatives_per_query, int gap,
                                         std::uint64_t seed) {
  gt.validate();
  if (gt.pairs.empty())
    throw std::invalid_argument("mine_triplets: ground truth has no loop pairs");
  if (negatives_per_query < 0)
    throw std::invalid_argument(detail::str("mine_triplets: negatives_per_query=",
                                            negatives_per_query));
  if (gap < 0) throw std::invalid_argument(detail::str("mine_triplets: gap=", gap));

  std::vector<std::set<int>> partners(static_cast<std::size_t>(gt.sequence_length));
  for (const LoopPair& p : gt.pairs) {
    partners[p.a].insert(p.b);
    partners[p.b].insert(p.a);
  }

  TripletMiningResult out;
  if (negatives_per_query == 0) return out;
  Rng rng(seed);
  for (const LoopPair& p : gt.pairs) {
    std::vector<int> eligible;
    for (int id = 0; id < gt.sequence_length; ++id) {
      if (id == p.a || id == p.b) continue;
      if (partners[p.a].count(id)) continue;
      if (std::abs(id - p.a) < gap || std::abs(id - p.b) < gap) continue;
      eligible.push_back(id);
    }
    if (eligible.empty()) {
      ++out.skipped_queries;
      continue;
    }
    for (int n = 0; n < negatives_per_query; ++n) {
      TripletRecord t;
      t.query = p.a;
      t.positive = p.b;
      t.negative = eligible[rng.uniform_index(eligible.size())];
      out.triplets.push_back(t);
    }
  }
  return out;
}

}  // namespace dsf
