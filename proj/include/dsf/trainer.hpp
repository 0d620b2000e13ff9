#pragma once

// Epoch loop over triplets: hybrid semantic + matching objective, per-triplet
// SGD, stepped learning rate, checkpoint/resume. Everything is a deterministic
// function of (initial weights, training set, config, seed); per-epoch RNG
// streams are derived from the seed so a resumed run replays an uninterrupted
// one bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/data.hpp"
#include "dsf/features.hpp"
#include "dsf/geometry.hpp"
#include "dsf/graph.hpp"
#include "dsf/losses.hpp"
#include "dsf/maps.hpp"
#include "dsf/network.hpp"
#include "dsf/retrieval.hpp"
#include "dsf/rng.hpp"
#include "dsf/selection.hpp"
#include "dsf/serial.hpp"
#include "dsf/tensor.hpp"

namespace dsf {

enum class DistanceMode { dense, sparse };

struct TrainConfig {
  int max_epochs = 50;
  double lr = 1e-3;
  std::vector<int> lr_decay_epochs = {20, 30, 40};
  double lr_decay_factor = 0.1;
  double margin = 0.3;
  DistanceMode mode = DistanceMode::dense;
  std::uint64_t seed = 0;
  // Checkpoints are written to checkpoint_path after every
  // checkpoint_interval-th completed epoch (0 disables them).
  int checkpoint_interval = 0;
  std::string checkpoint_path;
  // Sparse mode only: features kept per image when pairs are re-matched.
  int select_k = 20;
  MatchingParams matching;
  RansacConfig ransac;
  bool semantic_decays = true;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.max_epochs < 1)
    throw std::invalid_argument(detail::str("train config: max_epochs ", cfg.max_epochs));
  if (!(cfg.lr > 0.0))
    throw std::invalid_argument(detail::str("train config: lr ", cfg.lr));
  if (!(cfg.lr_decay_factor > 0.0))
    throw std::invalid_argument(
        detail::str("train config: decay factor ", cfg.lr_decay_factor));
  for (std::size_t i = 1; i < cfg.lr_decay_epochs.size(); ++i)
    if (cfg.lr_decay_epochs[i] <= cfg.lr_decay_epochs[i - 1])
      throw std::invalid_argument("train config: decay epochs must be strictly increasing");
  if (!(cfg.margin >= 0.0))
    throw std::invalid_argument(detail::str("train config: margin ", cfg.margin));
  if (cfg.checkpoint_interval < 0)
    throw std::invalid_argument(
        detail::str("train config: checkpoint interval ", cfg.checkpoint_interval));
  if (cfg.checkpoint_interval > 0 && cfg.checkpoint_path.empty())
    throw std::invalid_argument("train config: checkpoint interval set without a path");
  if (cfg.mode == DistanceMode::sparse && cfg.select_k < 1)
    throw std::invalid_argument(detail::str("train config: select_k ", cfg.select_k));
}

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0)
    throw std::invalid_argument(detail::str("lr_at_epoch: negative epoch ", epoch));
  int steps = 0;
  for (int d : cfg.lr_decay_epochs)
    if (epoch >= d) ++steps;
  return cfg.lr * std::pow(cfg.lr_decay_factor, static_cast<double>(steps));
}

// One training image. `semantic` may be left empty only for images no triplet
// touches; `grid` is required in dense mode, `features` in sparse mode.
struct TrainImage {
  Tensor input;
  StabilityMap semantic;
  FeatureSet features;
  DescriptorGrid grid;
  bool has_grid = false;
};

struct TrainingSet {
  std::vector<TrainImage> images;
  std::vector<TripletRecord> triplets;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double w_sem = 0.0;
  double w_mat = 0.0;
  double mean_sem = 0.0;
  double mean_mat = 0.0;
  double mean_hybrid = 0.0;
  // Bookkeeping beyond the CSV columns: triplets that contributed to the
  // means, and sparse-mode triplets dropped for lack of a matched pair.
  int processed = 0;
  int skipped = 0;
};

inline constexpr const char* kLossLogHeader =
    "epoch,lr,w_sem,w_mat,mean_sem,mean_mat,mean_hybrid";

inline void save_loss_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::string out = std::string(kLossLogHeader) + "\n";
  for (const EpochLog& row : log)
    out += detail::str(row.epoch, ",", detail::format_double(row.lr), ",",
                       detail::format_double(row.w_sem), ",",
                       detail::format_double(row.w_mat), ",",
                       detail::format_double(row.mean_sem), ",",
                       detail::format_double(row.mean_mat), ",",
                       detail::format_double(row.mean_hybrid), "\n");
  write_file_text(path, out);
}

inline std::vector<EpochLog> load_loss_log(const std::string& path) {
  const std::vector<std::string> lines = detail::split_lines(read_file_text(path));
  if (lines.empty() || lines[0] != kLossLogHeader)
    throw std::runtime_error(detail::str(path, ": expected header '", kLossLogHeader, "'"));
  std::vector<EpochLog> log;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> f = detail::split_on(lines[i], ',');
    if (f.size() != 7)
      throw std::runtime_error(
          detail::str(path, " line ", i + 1, ": expected 7 fields, got ", f.size()));
    EpochLog row;
    std::uint64_t e = 0;
    if (!detail::parse_uint(f[0], 1000000, e))
      throw std::runtime_error(detail::str(path, " line ", i + 1, ": bad epoch '", f[0], "'"));
    row.epoch = static_cast<int>(e);
    double* cols[6] = {&row.lr,       &row.w_sem,    &row.w_mat,
                       &row.mean_sem, &row.mean_mat, &row.mean_hybrid};
    for (int c = 0; c < 6; ++c) {
      if (!detail::parse_double(f[c + 1], *cols[c]) || !std::isfinite(*cols[c]))
        throw std::runtime_error(
            detail::str(path, " line ", i + 1, ": bad value '", f[c + 1], "'"));
    }
    log.push_back(row);
  }
  return log;
}

// `epoch` records how many epochs are complete, so it feeds straight back
// into train() as start_epoch.
inline void checkpoint(const Model& model, int epoch, const std::string& path) {
  if (epoch < 0)
    throw std::invalid_argument(detail::str("checkpoint: negative epoch ", epoch));
  save_weights(model, path, detail::str("epoch=", epoch, "\n"));
}

struct ResumeState {
  Model model;
  int epoch = 0;
};

inline ResumeState resume(const std::string& path) {
  LoadedWeights lw = load_weights_full(path);
  auto it = lw.extra_keys.find("epoch");
  if (it == lw.extra_keys.end())
    throw std::runtime_error(detail::str(path, ": weight file has no epoch record"));
  std::uint64_t e = 0;
  if (!detail::parse_uint(it->second, 1000000, e))
    throw std::runtime_error(detail::str(path, ": bad epoch value '", it->second, "'"));
  return ResumeState{std::move(lw.model), static_cast<int>(e)};
}

namespace detail {

// Matched pair payload for the sparse objective: query-side pixel positions
// and their symmetric epipolar distances under the pair's fitted F.
struct PairPayload {
  bool ok = false;
  SparsePairData data;
};

inline std::uint64_t pair_stream_key(int a, int b) {
  const std::uint64_t lo = static_cast<std::uint64_t>(std::min(a, b));
  const std::uint64_t hi = static_cast<std::uint64_t>(std::max(a, b));
  return ((lo + 1) << 32) | hi;
}

inline void validate_training_set(const Model& model, const TrainingSet& set,
                                  const TrainConfig& cfg) {
  if (set.triplets.empty()) throw std::invalid_argument("train: no triplets");
  const int n = static_cast<int>(set.images.size());
  std::set<int> used;
  for (std::size_t t = 0; t < set.triplets.size(); ++t) {
    const TripletRecord& tr = set.triplets[t];
    for (int id : {tr.query, tr.positive, tr.negative})
      if (id < 0 || id >= n)
        throw std::invalid_argument(
            str("train: triplet ", t, " references image ", id, " of ", n));
    if (tr.positive == tr.query || tr.negative == tr.query)
      throw std::invalid_argument(
          str("train: triplet ", t, " reuses query image ", tr.query));
    used.insert({tr.query, tr.positive, tr.negative});
  }
  for (int id : used) {
    const TrainImage& img = set.images[static_cast<std::size_t>(id)];
    model.check_input_shape(img.input.shape);
    if (img.semantic.height == 0 || img.semantic.width == 0)
      throw std::invalid_argument(str("train: image ", id, " has no stability map"));
    if (img.semantic.height != img.input.shape.h || img.semantic.width != img.input.shape.w)
      throw std::invalid_argument(
          str("train: image ", id, " stability map ", img.semantic.width, "x",
              img.semantic.height, " vs input ", img.input.shape.w, "x",
              img.input.shape.h));
    if (cfg.mode == DistanceMode::dense) {
      if (!img.has_grid)
        throw std::invalid_argument(str("train: image ", id, " has no descriptor grid"));
      if (img.grid.height != img.input.shape.h || img.grid.width != img.input.shape.w)
        throw std::invalid_argument(
            str("train: image ", id, " descriptor grid ", img.grid.width, "x",
                img.grid.height, " vs input ", img.input.shape.w, "x",
                img.input.shape.h));
    } else {
      if (img.features.width != img.input.shape.w ||
          img.features.height != img.input.shape.h)
        throw std::invalid_argument(
            str("train: image ", id, " feature extent ", img.features.width, "x",
                img.features.height, " vs input ", img.input.shape.w, "x",
                img.input.shape.h));
    }
  }
}

}  // namespace detail

// Runs epochs [start_epoch, cfg.max_epochs) and returns one log row per epoch.
// start_epoch == cfg.max_epochs is a completed run and a no-op.
inline std::vector<EpochLog> train(Model& model, const TrainingSet& set,
                                   const TrainConfig& cfg, int start_epoch = 0) {
  validate(cfg);
  if (start_epoch < 0 || start_epoch > cfg.max_epochs)
    throw std::invalid_argument(detail::str("train: start epoch ", start_epoch,
                                            " outside [0, ", cfg.max_epochs, "]"));
  detail::validate_training_set(model, set, cfg);

  std::vector<EpochLog> log;
  for (int e = start_epoch; e < cfg.max_epochs; ++e) {
    const LossWeights w = alpha_schedule(e, cfg.semantic_decays);
    const double lr = lr_at_epoch(cfg, e);
    const bool use_mat = w.w_mat > 0.0;

    // Sparse pairs are re-matched from the current activations once per
    // epoch and held fixed while the weights move within it.
    std::map<std::pair<int, int>, detail::PairPayload> payloads;
    if (cfg.mode == DistanceMode::sparse && use_mat) {
      std::map<int, ActivationMap> acts;
      std::map<int, SelectedFeatures> picks;
      auto prepare = [&](int id) {
        if (acts.count(id)) return;
        const TrainImage& img = set.images[static_cast<std::size_t>(id)];
        ActivationMap a = model.forward(img.input);
        if (!img.features.empty())
          picks.emplace(id, select_topk_activation(img.features, a, cfg.select_k));
        acts.emplace(id, std::move(a));
      };
      auto pair_payload = [&](int q, int o) {
        const std::pair<int, int> key{q, o};
        if (payloads.count(key)) return;
        detail::PairPayload& p = payloads[key];
        if (!picks.count(q) || !picks.count(o)) return;
        const ActivationMap& aq = acts.at(q);
        const std::vector<Match> raw =
            match_descriptors(picks.at(q).set, picks.at(o).set, cfg.matching);
        if (raw.size() < 8) return;
        RansacConfig rc = cfg.ransac;
        rc.weighted = true;
        rc.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(e),
                           detail::pair_stream_key(q, o));
        RansacResult fit;
        try {
          fit = ransac_fundamental(attach_weights(raw, aq), rc);
        } catch (const std::runtime_error&) {
          return;
        }
        if (!fit.ok()) return;
        p.data.points.reserve(raw.size());
        for (const Match& m : raw) {
          SamplePoint s;
          s.x = norm_to_pixel(m.p1.x, aq.width);
          s.y = norm_to_pixel(m.p1.y, aq.height);
          s.value = symmetric_epipolar_distance(fit.f, m);
          p.data.points.push_back(s);
        }
        p.ok = true;
      };
      for (const TripletRecord& t : set.triplets) {
        prepare(t.query);
        prepare(t.positive);
        prepare(t.negative);
        pair_payload(t.query, t.positive);
        pair_payload(t.query, t.negative);
      }
    }

    std::vector<std::size_t> order(set.triplets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(mix_seed(cfg.seed, static_cast<std::uint64_t>(e), 17));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

    EpochLog row;
    row.epoch = e;
    row.lr = lr;
    row.w_sem = w.w_sem;
    row.w_mat = w.w_mat;
    double sum_sem = 0.0, sum_mat = 0.0, sum_hyb = 0.0;

    for (std::size_t idx : order) {
      const TripletRecord& t = set.triplets[idx];
      const detail::PairPayload* qp = nullptr;
      const detail::PairPayload* qn = nullptr;
      if (cfg.mode == DistanceMode::sparse && use_mat) {
        qp = &payloads.at({t.query, t.positive});
        qn = &payloads.at({t.query, t.negative});
        if (!qp->ok || !qn->ok) {
          ++row.skipped;
          continue;
        }
      }

      const TrainImage& img_q = set.images[static_cast<std::size_t>(t.query)];
      Graph g;
      const std::vector<ValueId> params = model.register_params(g, true);
      const ValueId a_q = model.forward_graph(g, g.leaf(img_q.input, false), params);
      const ValueId sem = semantic_loss(g, a_q, img_q.semantic);

      ValueId total;
      double mat_value = 0.0;
      if (use_mat) {
        ValueId mat;
        if (cfg.mode == DistanceMode::dense) {
          const TrainImage& img_p = set.images[static_cast<std::size_t>(t.positive)];
          const TrainImage& img_n = set.images[static_cast<std::size_t>(t.negative)];
          const ValueId a_p = model.forward_graph(g, g.leaf(img_p.input, false), params);
          const ValueId a_n = model.forward_graph(g, g.leaf(img_n.input, false), params);
          mat = matching_loss_for_triplet(g, a_q, a_p, a_n, img_q.grid, img_p.grid,
                                          img_n.grid, cfg.margin);
        } else {
          mat = matching_loss_for_triplet(
              g, a_q, SparseTripletData{qp->data, qn->data}, cfg.margin);
        }
        total = hybrid_loss(g, sem, mat, w);
        mat_value = g.scalar(mat);
      } else {
        // w_mat is zero only when w_sem is exactly 1, so the hybrid loss
        // collapses to the semantic term.
        total = sem;
      }

      g.backward(total);
      std::size_t pi = 0;
      for (ConvParam& l : model.layers()) {
        sgd_step(l.kernel, g.grad(params[pi]), lr);
        sgd_step(l.bias, g.grad(params[pi + 1]), lr);
        pi += 2;
      }

      sum_sem += g.scalar(sem);
      sum_mat += mat_value;
      sum_hyb += g.scalar(total);
      ++row.processed;
    }

    if (row.processed > 0) {
      row.mean_sem = sum_sem / row.processed;
      row.mean_mat = sum_mat / row.processed;
      row.mean_hybrid = sum_hyb / row.processed;
    }
    log.push_back(row);

    const int done = e + 1;
    if (cfg.checkpoint_interval > 0 &&
        (done % cfg.checkpoint_interval == 0 || done == cfg.max_epochs))
      checkpoint(model, done, cfg.checkpoint_path);
  }
  return log;
}

}  // namespace dsf
