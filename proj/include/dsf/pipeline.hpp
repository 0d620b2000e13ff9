#pragma once

// End-to-end place-recognition experiment over one corpus: per-frame feature
// selection, vocabulary + TF-IDF retrieval, geometric verification, and a
// PR/AUC summary, repeated for each selection variant. Variant names follow
// the CLI surface: "trad" ranks by detector response, "seman" filters by the
// semantic label mask first, "ours" ranks by the learned activation map and
// also weights the verification sampler with it.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/data.hpp"
#include "dsf/evaluation.hpp"
#include "dsf/features.hpp"
#include "dsf/io.hpp"
#include "dsf/maps.hpp"
#include "dsf/network.hpp"
#include "dsf/retrieval.hpp"
#include "dsf/rng.hpp"
#include "dsf/selection.hpp"
#include "dsf/synthetic.hpp"

namespace dsf {

struct PipelineConfig {
  int select_k = 20;
  int vocab_k = 256;
  std::uint64_t vocab_seed = 7;
  int top_n = 3;
  int exclusion_gap = 5;
  MatchingParams matching;
  RansacConfig ransac;  // base seed; each verified pair derives its own
  int min_matches = 8;
  std::vector<std::string> variants = {"trad", "seman", "ours"};
  std::string sequence_name = "synthetic";
};

struct VariantReport {
  std::string name;
  bool ran = false;
  std::string skip_reason;
  std::vector<LoopResultRow> results;
  std::vector<PrPoint> curve;
  double auc_value = 0.0;
};

struct PipelineReport {
  std::string sequence_name;
  std::vector<VariantReport> variants;
};

namespace detail {

inline bool known_variant(const std::string& name) {
  return name == "trad" || name == "seman" || name == "ours";
}

// One selected feature set per frame; activations are kept only for the
// variant that weights verification with them.
struct VariantFrames {
  std::vector<FeatureSet> sets;
  std::vector<ActivationMap> acts;
  bool has_acts = false;
};

inline VariantFrames select_variant_frames(const Corpus& corpus, const Model* model,
                                           const std::string& name,
                                           const PipelineConfig& cfg) {
  VariantFrames out;
  out.sets.reserve(corpus.frames.size());
  if (name == "ours") {
    out.has_acts = true;
    out.acts.reserve(corpus.frames.size());
  }
  for (const CorpusFrame& frame : corpus.frames) {
    if (frame.features.empty()) {
      out.sets.push_back(frame.features);
      if (out.has_acts) out.acts.emplace_back();
      continue;
    }
    if (name == "trad") {
      out.sets.push_back(select_topk_response(frame.features, cfg.select_k));
    } else if (name == "seman") {
      const StabilityMap mask =
          stability_from_labels(frame.labels, corpus.static_categories);
      out.sets.push_back(semantic_filter_select(frame.features, mask, cfg.select_k));
    } else {
      ActivationMap act = model->forward(image_to_tensor(frame.image));
      SelectedFeatures sel = select_topk_activation(frame.features, act, cfg.select_k);
      out.sets.push_back(std::move(sel.set));
      out.acts.push_back(std::move(act));
    }
  }
  return out;
}

}  // namespace detail

// Runs the requested variants over the corpus. A variant whose inputs are
// absent (no trained model for "ours", no label categories for "seman") is
// skipped and flagged rather than failing the whole run.
inline PipelineReport run_pipeline(const Corpus& corpus, const Model* model,
                                   const PipelineConfig& cfg) {
  if (cfg.select_k < 1 || cfg.vocab_k < 1 || cfg.top_n < 1 || cfg.exclusion_gap < 0)
    throw std::invalid_argument("run_pipeline: bad selection/retrieval sizes");
  if (corpus.frames.empty()) throw std::invalid_argument("run_pipeline: empty corpus");
  if (cfg.variants.empty()) throw std::invalid_argument("run_pipeline: no variants");
  corpus.loops.validate();

  PipelineReport report;
  report.sequence_name = cfg.sequence_name;
  for (const std::string& name : cfg.variants) {
    if (!detail::known_variant(name))
      throw std::invalid_argument(detail::str("run_pipeline: unknown variant '", name,
                                              "' (expected trad, seman, or ours)"));
    VariantReport vr;
    vr.name = name;
    if (name == "ours" && model == nullptr) {
      vr.skip_reason = "no trained weights";
      report.variants.push_back(std::move(vr));
      continue;
    }
    if (name == "seman") {
      bool labeled = true;
      for (const CorpusFrame& f : corpus.frames)
        if (f.labels.categories.empty()) {
          labeled = false;
          break;
        }
      if (!labeled) {
        vr.skip_reason = "no semantic labels";
        report.variants.push_back(std::move(vr));
        continue;
      }
    }

    const detail::VariantFrames frames =
        detail::select_variant_frames(corpus, model, name, cfg);
    const Vocabulary vocab = build_vocabulary(frames.sets, cfg.vocab_k, cfg.vocab_seed);
    RetrievalIndex index;
    index.entries.reserve(frames.sets.size());
    for (const FeatureSet& fs : frames.sets) index.entries.push_back(quantize(fs, vocab));

    const int n = static_cast<int>(frames.sets.size());
    for (int q = 0; q < n; ++q) {
      const std::vector<RankedCandidate> ranked =
          query(index, index.entries[static_cast<std::size_t>(q)], q, cfg.top_n,
                cfg.exclusion_gap);
      for (const RankedCandidate& cand : ranked) {
        VerifyConfig vc{cfg.matching, cfg.ransac, cfg.min_matches};
        vc.ransac.seed = mix_seed(cfg.ransac.seed, static_cast<std::uint64_t>(q),
                                  static_cast<std::uint64_t>(cand.id));
        const ActivationMap* act =
            frames.has_acts ? &frames.acts[static_cast<std::size_t>(q)] : nullptr;
        const LoopScore score =
            verify_loop(frames.sets[static_cast<std::size_t>(q)],
                        frames.sets[static_cast<std::size_t>(cand.id)], act, vc);
        LoopResultRow row;
        row.query_id = q;
        row.candidate_id = cand.id;
        row.similarity = cand.similarity;
        row.verif_score = score.verification_score;
        row.inliers = score.inlier_count;
        vr.results.push_back(row);
      }
    }

    // A pair retrieved from both directions would be a duplicate detection;
    // the better (lower) verification score represents it.
    std::map<std::pair<int, int>, double> best;
    for (const LoopResultRow& row : vr.results) {
      const std::pair<int, int> key = std::minmax(row.query_id, row.candidate_id);
      auto it = best.find(key);
      if (it == best.end() || row.verif_score < it->second)
        best[key] = row.verif_score;
    }
    std::vector<ScoredPair> scored;
    scored.reserve(best.size());
    for (const auto& [key, score] : best) scored.push_back({key.first, key.second, score});

    vr.curve = pr_curve(scored, corpus.loops.pairs);
    // Fewer than two verified detections leaves no curve to integrate; that
    // is a valid (if useless) outcome for a variant, scored as zero area.
    vr.auc_value = vr.curve.size() >= 2 ? auc(vr.curve) : 0.0;
    vr.ran = true;
    report.variants.push_back(std::move(vr));
  }
  return report;
}

// One row per sequence, one AUC column per variant; skipped variants are
// flagged in place of a number.
inline std::string report_csv(const PipelineReport& report) {
  std::string header = "sequence";
  std::string row = report.sequence_name;
  for (const VariantReport& v : report.variants) {
    header += "," + v.name;
    if (v.ran) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", v.auc_value);
      row += std::string(",") + buf;
    } else {
      row += ",skipped";
    }
  }
  return header + "\n" + row + "\n";
}

inline void save_pipeline_outputs(const PipelineReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  for (const VariantReport& v : report.variants) {
    if (!v.ran) continue;
    save_loop_results(v.results, (base / (v.name + "_results.csv")).string());
    save_pr_csv(v.curve, v.auc_value, (base / (v.name + "_pr.csv")).string());
  }
  write_file_text((base / "report.csv").string(), report_csv(report));
}

}  // namespace dsf
