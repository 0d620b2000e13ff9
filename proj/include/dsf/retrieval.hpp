#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/features.hpp"
#include "dsf/geometry.hpp"
#include "dsf/maps.hpp"
#include "dsf/rng.hpp"
#include "dsf/selection.hpp"
#include "dsf/serial.hpp"

namespace dsf {

// Sparse word -> weight image signature, L1-normalized.
using BowVector = std::map<int, double>;

struct Vocabulary {
  int k = 0;
  int dim = 0;
  DescriptorKind kind = DescriptorKind::float32;
  std::vector<double> centroids;             // k*dim, row-major
  std::vector<std::uint8_t> bit_centroids;   // k*row_bytes, binary kind only
  std::vector<double> idf;                   // per word, >= 0
  std::uint64_t seed = 0;

  int row_bytes() const { return (dim + 7) / 8; }

  void validate() const {
    if (k < 1 || dim < 1)
      throw std::invalid_argument(detail::str("Vocabulary: bad extent k=", k,
                                              " dim=", dim));
    if (centroids.size() != static_cast<std::size_t>(k) * dim)
      throw std::invalid_argument("Vocabulary: centroid storage size mismatch");
    if (idf.size() != static_cast<std::size_t>(k))
      throw std::invalid_argument("Vocabulary: idf size mismatch");
    for (double v : idf)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw std::invalid_argument(detail::str("Vocabulary: bad idf ", v));
    if (kind == DescriptorKind::binary &&
        bit_centroids.size() != static_cast<std::size_t>(k) * row_bytes())
      throw std::invalid_argument("Vocabulary: bit centroid storage size mismatch");
  }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

inline int hamming(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  int acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += std::popcount(static_cast<unsigned>(a[i] ^ b[i]));
  return acc;
}

struct KmeansOut {
  std::vector<double> centroids;
  std::vector<int> assign;
  int iterations = 0;
};

// Lloyd iterations with k-means++ seeding, <= max_iters rounds, stopping
// when the largest relative centroid shift drops to tol. All arithmetic in
// double; ties resolve to the lowest index.
inline KmeansOut kmeans(const std::vector<double>& data, int n, int dim, int k,
                        std::uint64_t seed, int max_iters = 100, double tol = 1e-6) {
  KmeansOut out;
  out.centroids.assign(static_cast<std::size_t>(k) * dim, 0.0);
  out.assign.assign(static_cast<std::size_t>(n), 0);
  Rng rng(seed);

  const auto row = [&](int i) { return data.data() + static_cast<std::size_t>(i) * dim; };
  auto centroid = [&](int c) {
    return out.centroids.data() + static_cast<std::size_t>(c) * dim;
  };

  // k-means++ seeding.
  {
    const int first = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    std::copy(row(first), row(first) + dim, centroid(0));
    std::vector<double> d2(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) d2[i] = sq_dist(row(i), centroid(0), dim);
    for (int c = 1; c < k; ++c) {
      double total = 0.0;
      for (int i = 0; i < n; ++i) total += d2[i];
      int pick;
      if (total > 0.0) {
        const double u = rng.uniform() * total;
        double acc = 0.0;
        pick = n - 1;
        for (int i = 0; i < n; ++i) {
          acc += d2[i];
          if (u < acc) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
      }
      std::copy(row(pick), row(pick) + dim, centroid(c));
      for (int i = 0; i < n; ++i)
        d2[i] = std::min(d2[i], sq_dist(row(i), centroid(c), dim));
    }
  }

  std::vector<double> sums(static_cast<std::size_t>(k) * dim);
  std::vector<int> counts(static_cast<std::size_t>(k));
  for (int iter = 0; iter < max_iters; ++iter) {
    out.iterations = iter + 1;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(row(i), centroid(0), dim);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(row(i), centroid(c), dim);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      out.assign[i] = best;
    }

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const double* r = row(i);
      double* s = sums.data() + static_cast<std::size_t>(out.assign[i]) * dim;
      for (int d = 0; d < dim; ++d) s[d] += r[d];
      ++counts[out.assign[i]];
    }
    // Re-seed empty clusters with the point farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      int far_i = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        const double d = sq_dist(row(i), centroid(out.assign[i]), dim);
        if (d > far_d) {
          far_d = d;
          far_i = i;
        }
      }
      double* s = sums.data() + static_cast<std::size_t>(c) * dim;
      std::copy(row(far_i), row(far_i) + dim, s);
      counts[c] = 1;
      out.assign[far_i] = c;
    }

    double worst_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      double* cc = centroid(c);
      const double* s = sums.data() + static_cast<std::size_t>(c) * dim;
      double shift2 = 0.0, old2 = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double nv = s[d] / counts[c];
        const double diff = nv - cc[d];
        shift2 += diff * diff;
        old2 += cc[d] * cc[d];
        cc[d] = nv;
      }
      worst_shift = std::max(worst_shift,
                             std::sqrt(shift2) / std::max(1.0, std::sqrt(old2)));
    }
    if (worst_shift <= tol) break;
  }

  // Final assignment against the converged centroids.
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double bd = sq_dist(row(i), centroid(0), dim);
    for (int c = 1; c < k; ++c) {
      const double d = sq_dist(row(i), centroid(c), dim);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    out.assign[i] = best;
  }
  return out;
}

// Unpacks descriptors into the double matrix k-means consumes; binary
// descriptors become 0/1 coordinates on the unit hypercube.
inline std::vector<double> unpack_rows(const DescriptorMatrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.count) * m.dim);
  if (m.kind == DescriptorKind::float32) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<double>(m.fdata[i]);
  } else {
    for (int r = 0; r < m.count; ++r)
      for (int b = 0; b < m.dim; ++b)
        out[static_cast<std::size_t>(r) * m.dim + b] = m.bit(r, b) ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace detail

// Assigns one descriptor to its nearest word: Euclidean for float
// descriptors, Hamming against thresholded centroid bits for binary ones.
inline int assign_word(const Vocabulary& vocab, const DescriptorMatrix& m, int r) {
  if (vocab.kind != m.kind)
    throw std::invalid_argument("assign_word: descriptor kind mismatch");
  if (m.dim != vocab.dim)
    throw std::invalid_argument(detail::str("assign_word: descriptor dim ", m.dim,
                                            " vs vocabulary dim ", vocab.dim));
  if (vocab.kind == DescriptorKind::float32) {
    auto row = m.frow(r);
    std::vector<double> d(row.begin(), row.end());
    int best = 0;
    double bd = detail::sq_dist(d.data(), vocab.centroids.data(), vocab.dim);
    for (int c = 1; c < vocab.k; ++c) {
      const double dd = detail::sq_dist(
          d.data(), vocab.centroids.data() + static_cast<std::size_t>(c) * vocab.dim,
          vocab.dim);
      if (dd < bd) {
        bd = dd;
        best = c;
      }
    }
    return best;
  }
  auto row = m.brow(r);
  int best = 0;
  int bd = detail::hamming(
      row, {vocab.bit_centroids.data(), static_cast<std::size_t>(vocab.row_bytes())});
  for (int c = 1; c < vocab.k; ++c) {
    const int dd = detail::hamming(
        row, {vocab.bit_centroids.data() + static_cast<std::size_t>(c) * vocab.row_bytes(),
              static_cast<std::size_t>(vocab.row_bytes())});
    if (dd < bd) {
      bd = dd;
      best = c;
    }
  }
  return best;
}

// Flat k-means vocabulary over the pooled descriptors of the training
// images, with idf = max(0, ln(N / (1 + n_w))) over those images.
inline Vocabulary build_vocabulary(const std::vector<FeatureSet>& images, int k,
                                   std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument(detail::str("build_vocabulary: k=", k));
  if (images.empty())
    throw std::invalid_argument("build_vocabulary: no training images");

  const DescriptorKind kind = images[0].descriptors.kind;
  const int dim = images[0].descriptors.dim;
  std::size_t total = 0;
  for (const FeatureSet& fs : images) {
    fs.validate();
    if (fs.descriptors.kind != kind || fs.descriptors.dim != dim)
      throw std::invalid_argument(
          "build_vocabulary: mixed descriptor kinds or dimensions");
    total += fs.size();
  }
  if (total < static_cast<std::size_t>(k))
    throw std::invalid_argument(detail::str("build_vocabulary: ", total,
                                            " descriptors for k=", k));

  std::vector<double> pool;
  pool.reserve(total * dim);
  for (const FeatureSet& fs : images) {
    const std::vector<double> rows = detail::unpack_rows(fs.descriptors);
    pool.insert(pool.end(), rows.begin(), rows.end());
  }

  detail::KmeansOut km =
      detail::kmeans(pool, static_cast<int>(total), dim, k, seed);

  Vocabulary vocab;
  vocab.k = k;
  vocab.dim = dim;
  vocab.kind = kind;
  vocab.seed = seed;
  vocab.centroids = std::move(km.centroids);
  if (kind == DescriptorKind::binary) {
    vocab.bit_centroids.assign(static_cast<std::size_t>(k) * vocab.row_bytes(), 0);
    for (int c = 0; c < k; ++c)
      for (int b = 0; b < dim; ++b)
        if (vocab.centroids[static_cast<std::size_t>(c) * dim + b] > 0.5)
          vocab.bit_centroids[static_cast<std::size_t>(c) * vocab.row_bytes() +
                              static_cast<std::size_t>(b) / 8] |=
              static_cast<std::uint8_t>(1u << (7 - b % 8));
  }

  const int n_images = static_cast<int>(images.size());
  std::vector<int> containing(static_cast<std::size_t>(k), 0);
  for (const FeatureSet& fs : images) {
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(k), 0);
    for (int r = 0; r < fs.descriptors.count; ++r)
      seen[assign_word(vocab, fs.descriptors, r)] = 1;
    for (int w = 0; w < k; ++w) containing[w] += seen[w];
  }
  vocab.idf.resize(static_cast<std::size_t>(k));
  for (int w = 0; w < k; ++w)
    vocab.idf[w] = std::max(
        0.0, std::log(static_cast<double>(n_images) / (1.0 + containing[w])));
  vocab.validate();
  return vocab;
}

// tf-idf signature, L1-normalized. An image whose every word has zero idf
// falls back to plain normalized term frequencies; an empty feature set
// yields an empty vector.
inline BowVector quantize(const FeatureSet& fs, const Vocabulary& vocab) {
  vocab.validate();
  fs.validate();
  BowVector v;
  if (fs.empty()) return v;
  std::map<int, int> counts;
  for (int r = 0; r < fs.descriptors.count; ++r)
    ++counts[assign_word(vocab, fs.descriptors, r)];
  const double total = static_cast<double>(fs.descriptors.count);
  double mass = 0.0;
  for (const auto& [word, count] : counts) {
    const double w = (count / total) * vocab.idf[word];
    if (w > 0.0) v[word] = w;
    mass += w;
  }
  if (mass <= 0.0) {
    v.clear();
    for (const auto& [word, count] : counts) v[word] = count / total;
    mass = 1.0;  // term frequencies already sum to 1
    return v;
  }
  for (auto& [word, w] : v) w /= mass;
  return v;
}

// L1 similarity 1 - 0.5*sum|a-b| over the word union. Empty signatures are
// dissimilar to everything, including each other.
inline double bow_similarity(const BowVector& a, const BowVector& b) {
  if (a.empty() || b.empty()) return 0.0;
  double acc = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      acc += std::abs(ia->second);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      acc += std::abs(ib->second);
      ++ib;
    } else {
      acc += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return 1.0 - 0.5 * acc;
}

// Sequence-position-indexed database of signatures.
struct RetrievalIndex {
  std::vector<BowVector> entries;  // id == sequence position
};

struct RankedCandidate {
  int id = -1;
  double similarity = 0.0;
};

// Top-n most similar entries, excluding everything within exclusion_gap of
// the query's own position. Ties rank the lower id first.
inline std::vector<RankedCandidate> query(const RetrievalIndex& index,
                                          const BowVector& signature, int query_pos,
                                          int top_n, int exclusion_gap) {
  if (top_n < 1) throw std::invalid_argument(detail::str("query: top_n=", top_n));
  if (exclusion_gap < 0)
    throw std::invalid_argument(detail::str("query: exclusion_gap=", exclusion_gap));
  std::vector<RankedCandidate> all;
  all.reserve(index.entries.size());
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const int id = static_cast<int>(i);
    if (std::abs(id - query_pos) <= exclusion_gap) continue;
    all.push_back({id, bow_similarity(signature, index.entries[i])});
  }
  std::sort(all.begin(), all.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
  });
  if (all.size() > static_cast<std::size_t>(top_n)) all.resize(top_n);
  return all;
}

struct MatchingParams {
  double ratio = 0.8;      // float descriptors: Lowe ratio on distances
  int hamming_margin = 16; // binary descriptors: best2 - best1 >= margin
};

struct IndexMatch {
  int a = -1;
  int b = -1;
};

// Mutual nearest neighbours with an ambiguity test against the second-best
// candidate. Brute force; the candidate sets here are a few hundred rows.
inline std::vector<IndexMatch> match_descriptor_indices(const DescriptorMatrix& a,
                                                        const DescriptorMatrix& b,
                                                        const MatchingParams& p = {}) {
  a.validate();
  b.validate();
  if (a.kind != b.kind)
    throw std::invalid_argument("match_descriptor_indices: descriptor kind mismatch");
  if (a.dim != b.dim)
    throw std::invalid_argument(detail::str("match_descriptor_indices: dims ", a.dim,
                                            " vs ", b.dim));
  if (!(p.ratio > 0.0 && p.ratio <= 1.0))
    throw std::invalid_argument(detail::str("match_descriptor_indices: ratio ", p.ratio));

  std::vector<IndexMatch> out;
  if (a.count == 0 || b.count == 0) return out;

  const int na = a.count, nb = b.count;
  std::vector<int> best_b(na, -1);
  std::vector<int> best_a(nb, -1);

  if (a.kind == DescriptorKind::float32) {
    const std::vector<double> da = detail::unpack_rows(a);
    const std::vector<double> db = detail::unpack_rows(b);
    std::vector<double> best_a_d(nb, std::numeric_limits<double>::infinity());
    std::vector<double> d1(na, std::numeric_limits<double>::infinity());
    std::vector<double> d2(na, std::numeric_limits<double>::infinity());
    for (int i = 0; i < na; ++i) {
      const double* ra = da.data() + static_cast<std::size_t>(i) * a.dim;
      for (int j = 0; j < nb; ++j) {
        const double* rb = db.data() + static_cast<std::size_t>(j) * b.dim;
        const double d = detail::sq_dist(ra, rb, a.dim);
        if (d < d1[i]) {
          d2[i] = d1[i];
          d1[i] = d;
          best_b[i] = j;
        } else if (d < d2[i]) {
          d2[i] = d;
        }
        if (d < best_a_d[j]) {
          best_a_d[j] = d;
          best_a[j] = i;
        }
      }
    }
    const double r2 = p.ratio * p.ratio;
    for (int i = 0; i < na; ++i) {
      const int j = best_b[i];
      if (j < 0 || best_a[j] != i) continue;
      if (std::isfinite(d2[i]) && !(d1[i] < r2 * d2[i])) continue;
      out.push_back({i, j});
    }
  } else {
    std::vector<int> best_a_d(nb, std::numeric_limits<int>::max());
    std::vector<int> d1(na, std::numeric_limits<int>::max());
    std::vector<int> d2(na, std::numeric_limits<int>::max());
    for (int i = 0; i < na; ++i) {
      auto ra = a.brow(i);
      for (int j = 0; j < nb; ++j) {
        const int d = detail::hamming(ra, b.brow(j));
        if (d < d1[i]) {
          d2[i] = d1[i];
          d1[i] = d;
          best_b[i] = j;
        } else if (d < d2[i]) {
          d2[i] = d;
        }
        if (d < best_a_d[j]) {
          best_a_d[j] = d;
          best_a[j] = i;
        }
      }
    }
    for (int i = 0; i < na; ++i) {
      const int j = best_b[i];
      if (j < 0 || best_a[j] != i) continue;
      if (d2[i] != std::numeric_limits<int>::max() &&
          d2[i] - d1[i] < p.hamming_margin)
        continue;
      out.push_back({i, j});
    }
  }
  return out;
}

// Same, but materialized as normalized-coordinate correspondences.
inline std::vector<Match> match_descriptors(const FeatureSet& a, const FeatureSet& b,
                                            const MatchingParams& p = {}) {
  a.validate();
  b.validate();
  if (a.width < 2 || a.height < 2 || b.width < 2 || b.height < 2)
    throw std::invalid_argument("match_descriptors: feature set lacks image extent");
  const std::vector<IndexMatch> idx = match_descriptor_indices(a.descriptors,
                                                               b.descriptors, p);
  std::vector<Match> out;
  out.reserve(idx.size());
  for (const IndexMatch& im : idx) {
    Match m;
    m.p1 = {pixel_to_norm(a.keypoints[im.a].x, a.width),
            pixel_to_norm(a.keypoints[im.a].y, a.height)};
    m.p2 = {pixel_to_norm(b.keypoints[im.b].x, b.width),
            pixel_to_norm(b.keypoints[im.b].y, b.height)};
    out.push_back(m);
  }
  return out;
}

struct VerifyConfig {
  MatchingParams matching;
  RansacConfig ransac;
  int min_matches = 8;
};

// Outcome of geometric verification for one retrieved candidate. Unverified
// pairs carry an infinite score so they always rank last.
struct LoopScore {
  int candidate_id = -1;
  double similarity = 0.0;
  double verification_score = std::numeric_limits<double>::infinity();
  int match_count = 0;
  int inlier_count = 0;
  bool verified = false;
};

// Matches the two sets, optionally weights matches by the query activation,
// runs the consensus search, and scores the pair by the mean symmetric
// epipolar distance of the surviving inliers.
inline LoopScore verify_loop(const FeatureSet& query_fs, const FeatureSet& cand_fs,
                             const ActivationMap* query_activation,
                             const VerifyConfig& cfg) {
  if (cfg.min_matches < 8)
    throw std::invalid_argument("verify_loop: min_matches must be at least 8");
  LoopScore out;
  if (query_fs.empty() || cand_fs.empty()) return out;
  std::vector<Match> matches = match_descriptors(query_fs, cand_fs, cfg.matching);
  out.match_count = static_cast<int>(matches.size());
  if (out.match_count < cfg.min_matches) return out;

  RansacConfig rc = cfg.ransac;
  rc.weighted = query_activation != nullptr;
  if (query_activation) matches = attach_weights(std::move(matches), *query_activation);

  RansacResult res;
  try {
    res = ransac_fundamental(matches, rc);
  } catch (const std::runtime_error&) {
    return out;  // e.g. too few positively weighted matches
  }
  if (!res.ok()) return out;

  std::vector<Match> inliers;
  inliers.reserve(static_cast<std::size_t>(res.inlier_count));
  for (std::size_t i = 0; i < matches.size(); ++i)
    if (res.inliers[i]) inliers.push_back(matches[i]);
  out.verification_score = reprojection_error(res.f, inliers);
  out.inlier_count = res.inlier_count;
  out.verified = true;
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary file: magic "DSFV", u32 k, u32 dim, u8 kind, f64 centroids,
// packed centroid bits for the binary kind, f64 idf, u64 seed.

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  vocab.validate();
  ByteWriter w;
  w.magic("DSFV");
  w.u32(static_cast<std::uint32_t>(vocab.k));
  w.u32(static_cast<std::uint32_t>(vocab.dim));
  w.u8(static_cast<std::uint8_t>(vocab.kind));
  for (double c : vocab.centroids) w.f64(c);
  if (vocab.kind == DescriptorKind::binary)
    w.raw(vocab.bit_centroids.data(), vocab.bit_centroids.size());
  for (double v : vocab.idf) w.f64(v);
  w.u64(vocab.seed);
  w.save(path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("DSFV");
  Vocabulary vocab;
  const std::uint32_t k = r.u32();
  const std::uint32_t dim = r.u32();
  if (k == 0 || k > (1u << 20)) r.fail(detail::str("bad vocabulary size ", k));
  if (dim == 0 || dim > (1u << 16)) r.fail(detail::str("bad descriptor dim ", dim));
  vocab.k = static_cast<int>(k);
  vocab.dim = static_cast<int>(dim);
  const std::uint8_t kind = r.u8();
  if (kind > 1) r.fail(detail::str("bad descriptor kind ", int(kind)));
  vocab.kind = static_cast<DescriptorKind>(kind);
  vocab.centroids.resize(static_cast<std::size_t>(k) * dim);
  for (double& c : vocab.centroids) {
    c = r.f64();
    if (!std::isfinite(c)) r.fail("non-finite centroid");
  }
  if (vocab.kind == DescriptorKind::binary)
    vocab.bit_centroids = r.bytes(static_cast<std::size_t>(k) * vocab.row_bytes());
  vocab.idf.resize(k);
  for (double& v : vocab.idf) {
    v = r.f64();
    if (!(v >= 0.0) || !std::isfinite(v)) r.fail("bad idf value");
  }
  vocab.seed = r.u64();
  r.require_exhausted();
  vocab.validate();
  return vocab;
}

}  // namespace dsf
