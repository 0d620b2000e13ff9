#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsf/common.hpp"
#include "dsf/data.hpp"
#include "dsf/features.hpp"
#include "dsf/geometry.hpp"
#include "dsf/io.hpp"
#include "dsf/maps.hpp"
#include "dsf/rng.hpp"

namespace dsf {

namespace detail {

inline Eigen::Matrix3d small_rotation(double yaw, double pitch, double roll) {
  Eigen::Matrix3d ry, rx, rz;
  ry << std::cos(yaw), 0, std::sin(yaw), 0, 1, 0, -std::sin(yaw), 0, std::cos(yaw);
  rx << 1, 0, 0, 0, std::cos(pitch), -std::sin(pitch), 0, std::sin(pitch),
      std::cos(pitch);
  rz << std::cos(roll), -std::sin(roll), 0, std::sin(roll), std::cos(roll), 0, 0, 0, 1;
  return rz * rx * ry;
}

struct Camera {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();  // world-to-camera
  Eigen::Vector3d c = Eigen::Vector3d::Zero();      // center, world frame
};

// Projects into normalized image coordinates; false when behind the camera
// or outside the margin-shrunk frustum.
inline bool project(const Camera& cam, const Eigen::Vector3d& p, double margin,
                    NormPoint& out) {
  const Eigen::Vector3d pc = cam.r * (p - cam.c);
  if (pc.z() < 1.0) return false;
  out.x = pc.x() / pc.z();
  out.y = pc.y() / pc.z();
  return std::abs(out.x) <= margin && std::abs(out.y) <= margin;
}

// F mapping view-1 points to view-2 epipolar lines for cam1 = identity.
inline FundamentalMatrix analytic_f(const Camera& cam2) {
  const Eigen::Vector3d t = -cam2.r * cam2.c;
  Eigen::Matrix3d tx;
  tx << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  return canonicalize_f(tx * cam2.r);
}

inline std::vector<float> gaussian_vec(Rng& rng, int dim, double scale = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(dim));
  for (float& x : v) x = static_cast<float>(scale * rng.gaussian());
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Two-view scene with exact epipolar ground truth.

struct SceneConfig {
  int n_static = 40;
  int n_dynamic = 0;
  double noise = 0.0;  // descriptor perturbation per view
  std::uint64_t seed = 0;
  int image_width = 64;
  int image_height = 64;
  int descriptor_dim = 16;
  DescriptorKind descriptor_kind = DescriptorKind::float32;
  double baseline = 0.5;
  double dynamic_displacement = 0.05;  // fraction of the point-box extent
  double min_violation = 0.01;         // symmetric distance floor for dynamics
};

struct SyntheticScene {
  FeatureSet view1, view2;
  std::vector<Match> matches;  // aligned with feature order
  std::vector<std::uint8_t> true_inliers;
  FundamentalMatrix f_true = FundamentalMatrix::Zero();
  StabilityMap stability1, stability2;
};

inline SyntheticScene generate_scene(const SceneConfig& cfg) {
  if (cfg.n_static < 8)
    throw std::invalid_argument(detail::str("generate_scene: n_static=", cfg.n_static,
                                            ", need at least 8"));
  if (cfg.n_dynamic < 0 || !(cfg.noise >= 0.0) || cfg.descriptor_dim < 1)
    throw std::invalid_argument("generate_scene: bad noise or descriptor settings");
  if (cfg.image_width < 2 || cfg.image_height < 2)
    throw std::invalid_argument(detail::str("generate_scene: image extent ",
                                            cfg.image_width, "x", cfg.image_height));
  if (cfg.baseline == 0.0)
    throw std::invalid_argument("generate_scene: zero baseline, pose pair degenerate");

  Rng rng(cfg.seed);
  detail::Camera cam1;
  detail::Camera cam2;
  cam2.r = detail::small_rotation(0.08, 0.03, 0.02);
  cam2.c = Eigen::Vector3d(cfg.baseline, 0.15 * cfg.baseline, -0.1 * cfg.baseline);

  const double kMargin = 0.92;
  const double kExtent = 4.4;  // point box spans [-2.2, 2.2] in x and y
  auto sample_visible = [&](Eigen::Vector3d& p, NormPoint& n1, NormPoint& n2) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      p = Eigen::Vector3d(rng.uniform(-2.2, 2.2), rng.uniform(-2.2, 2.2),
                          rng.uniform(4.0, 8.0));
      if (detail::project(cam1, p, kMargin, n1) && detail::project(cam2, p, kMargin, n2))
        return;
    }
    throw std::logic_error("generate_scene: could not place a mutually visible point");
  };

  const FundamentalMatrix f = detail::analytic_f(cam2);
  const int total = cfg.n_static + cfg.n_dynamic;

  SyntheticScene scene;
  scene.f_true = f;
  scene.view1.width = scene.view2.width = cfg.image_width;
  scene.view1.height = scene.view2.height = cfg.image_height;
  scene.view1.descriptors = cfg.descriptor_kind == DescriptorKind::float32
                                ? DescriptorMatrix::floats(total, cfg.descriptor_dim)
                                : DescriptorMatrix::binary(total, cfg.descriptor_dim);
  scene.view2.descriptors = scene.view1.descriptors;
  scene.stability1 = StabilityMap(cfg.image_height, cfg.image_width, 1);
  scene.stability2 = StabilityMap(cfg.image_height, cfg.image_width, 1);

  // Smooth world-to-descriptor map: per-dimension random frequency and phase.
  std::vector<Eigen::Vector3d> freq(static_cast<std::size_t>(cfg.descriptor_dim));
  std::vector<double> phase(static_cast<std::size_t>(cfg.descriptor_dim));
  for (int k = 0; k < cfg.descriptor_dim; ++k) {
    freq[k] = Eigen::Vector3d(rng.gaussian(), rng.gaussian(), rng.gaussian());
    phase[k] = rng.uniform(0.0, 6.283185307179586);
  }
  auto base_descriptor = [&](const Eigen::Vector3d& p) {
    std::vector<double> d(static_cast<std::size_t>(cfg.descriptor_dim));
    for (int k = 0; k < cfg.descriptor_dim; ++k)
      d[k] = std::sin(freq[k].dot(p) + phase[k]);
    return d;
  };

  auto emit_feature = [&](int idx, const NormPoint& n1, const NormPoint& n2,
                          const std::vector<double>& base) {
    Keypoint k1, k2;
    k1.x = norm_to_pixel(n1.x, cfg.image_width);
    k1.y = norm_to_pixel(n1.y, cfg.image_height);
    k2.x = norm_to_pixel(n2.x, cfg.image_width);
    k2.y = norm_to_pixel(n2.y, cfg.image_height);
    k1.response = k2.response = rng.uniform(0.3, 1.0);
    scene.view1.keypoints.push_back(k1);
    scene.view2.keypoints.push_back(k2);

    for (int view = 0; view < 2; ++view) {
      DescriptorMatrix& m = view == 0 ? scene.view1.descriptors
                                      : scene.view2.descriptors;
      if (cfg.descriptor_kind == DescriptorKind::float32) {
        auto row = m.frow(idx);
        for (int k = 0; k < cfg.descriptor_dim; ++k)
          row[k] = static_cast<float>(base[k] + cfg.noise * rng.gaussian());
      } else {
        for (int k = 0; k < cfg.descriptor_dim; ++k) {
          bool bit = base[k] > 0.0;
          if (cfg.noise > 0.0 && rng.uniform() < cfg.noise) bit = !bit;
          m.set_bit(idx, k, bit);
        }
      }
    }

    Match match;
    match.p1 = {pixel_to_norm(k1.x, cfg.image_width),
                pixel_to_norm(k1.y, cfg.image_height)};
    match.p2 = {pixel_to_norm(k2.x, cfg.image_width),
                pixel_to_norm(k2.y, cfg.image_height)};
    scene.matches.push_back(match);
  };

  for (int i = 0; i < cfg.n_static; ++i) {
    Eigen::Vector3d p;
    NormPoint n1, n2;
    sample_visible(p, n1, n2);
    emit_feature(i, n1, n2, base_descriptor(p));
    scene.true_inliers.push_back(1);
  }

  const double disp = cfg.dynamic_displacement * kExtent;
  auto mark_unstable = [&](StabilityMap& s, double px, double py) {
    const int cx = static_cast<int>(std::lround(px));
    const int cy = static_cast<int>(std::lround(py));
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x >= 0 && x < s.width && y >= 0 && y < s.height) s.at(y, x) = 0;
      }
  };

  for (int i = 0; i < cfg.n_dynamic; ++i) {
    const int idx = cfg.n_static + i;
    Eigen::Vector3d p;
    NormPoint n1, n2;
    sample_visible(p, n1, n2);

    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const Eigen::Vector3d d1(rng.gaussian(), rng.gaussian(), rng.gaussian());
      const Eigen::Vector3d d2(rng.gaussian(), rng.gaussian(), rng.gaussian());
      NormPoint m1, m2;
      if (!detail::project(cam1, p + disp * d1.normalized(), kMargin, m1)) continue;
      if (!detail::project(cam2, p + disp * d2.normalized(), kMargin, m2)) continue;
      Match probe;
      probe.p1 = m1;
      probe.p2 = m2;
      if (symmetric_epipolar_distance(f, probe) < cfg.min_violation) continue;
      emit_feature(idx, m1, m2, base_descriptor(p));
      scene.true_inliers.push_back(0);
      mark_unstable(scene.stability1, scene.view1.keypoints.back().x,
                    scene.view1.keypoints.back().y);
      mark_unstable(scene.stability2, scene.view2.keypoints.back().x,
                    scene.view2.keypoints.back().y);
      placed = true;
    }
    if (!placed)
      throw std::logic_error(
          "generate_scene: could not realize a dynamic point violating the "
          "epipolar constraint");
  }

  scene.view1.validate();
  scene.view2.validate();
  return scene;
}

// Smooth random per-pixel descriptor field: each channel is a small sum of
// seeded sinusoids, so nearby pixels carry nearby descriptors.
inline DescriptorGrid synth_descriptor_grid(int height, int width, int dim,
                                            std::uint64_t seed) {
  DescriptorGrid grid(height, width, dim);
  Rng rng(seed);
  for (int d = 0; d < dim; ++d) {
    const double fx1 = rng.uniform(0.05, 0.4), fy1 = rng.uniform(0.05, 0.4);
    const double fx2 = rng.uniform(0.05, 0.4), fy2 = rng.uniform(0.05, 0.4);
    const double p1 = rng.uniform(0.0, 6.283185307179586);
    const double p2 = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        grid.at(d, y, x) = static_cast<float>(std::sin(fx1 * x + fy1 * y + p1) +
                                              0.5 * std::cos(fx2 * x - fy2 * y + p2));
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Sequence corpus: a looped tour over synthetic places whose frames carry
// static background, parked cars (static geometry, dynamic semantic label),
// and moving cars (dynamic geometry, descriptors shared across places).

struct CorpusConfig {
  int frames = 200;
  int places = 50;
  int width = 48;
  int height = 48;
  int holdout = 40;  // trailing frames excluded from training
  std::uint64_t seed = 42;
  int descriptor_dim = 16;
  int bg_features = 40;
  int sparse_bg_features = 5;
  int sparse_places = 15;  // places 0..sparse_places-1 get the sparse count
  int parked_per_place = 10;
  int moving_per_frame = 20;
  double descriptor_noise = 0.02;

  int visits() const { return places > 0 ? frames / places : 0; }

  void validate() const {
    if (frames < 2 || places < 1 || frames % places != 0 || visits() < 2)
      throw std::invalid_argument(detail::str("CorpusConfig: ", frames,
                                              " frames over ", places,
                                              " places does not give >= 2 visits each"));
    if (width < 8 || height < 8 || width > 4096 || height > 4096)
      throw std::invalid_argument(detail::str("CorpusConfig: extent ", width, "x",
                                              height));
    if (holdout < 0 || holdout >= frames)
      throw std::invalid_argument(detail::str("CorpusConfig: holdout ", holdout));
    if (descriptor_dim < 2 || bg_features < 0 || sparse_bg_features < 0 ||
        sparse_places < 0 || sparse_places > places || parked_per_place < 0 ||
        moving_per_frame < 0 || !(descriptor_noise >= 0.0))
      throw std::invalid_argument("CorpusConfig: bad feature settings");
  }
};

struct CorpusFrame {
  int place = -1;
  int visit = -1;
  Image image;
  LabelMap labels;
  StabilityMap truth;  // true stability: parked cars are static here
  FeatureSet features;
};

struct Corpus {
  CorpusConfig cfg;
  std::vector<CorpusFrame> frames;
  LoopGroundTruth loops;  // every same-place frame pair
  std::set<std::string> static_categories{"background"};
};

namespace detail {

struct PlaceModel {
  std::vector<Camera> cameras;  // one per visit
  std::vector<Eigen::Vector3d> bg_points, parked_points;
  std::vector<std::vector<double>> bg_desc, parked_desc;
  std::vector<double> bg_resp, parked_resp;
  double tex_phase[3] = {0, 0, 0};
};

// Everything that stays fixed across revisits of one place. Parked cars use
// a half place-specific, half car-pool descriptor so they match only within
// the place; moving cars (generated per frame) use the pool directly.
inline PlaceModel build_place(const CorpusConfig& cfg, int place,
                              const std::vector<std::vector<double>>& car_pool) {
  PlaceModel pm;
  for (int v = 0; v < cfg.visits(); ++v) {
    Rng rc(mix_seed(cfg.seed, 3000 + place, v));
    Camera cam;
    cam.c = Eigen::Vector3d(rc.uniform(-0.35, 0.35), rc.uniform(-0.25, 0.25),
                            rc.uniform(-0.3, 0.3));
    cam.r = small_rotation(rc.uniform(-0.05, 0.05), rc.uniform(-0.05, 0.05),
                           rc.uniform(-0.05, 0.05));
    pm.cameras.push_back(cam);
  }

  Rng rp(mix_seed(cfg.seed, 2000 + place));
  pm.tex_phase[0] = rp.uniform(0.0, 6.283185307179586);
  pm.tex_phase[1] = rp.uniform(0.0, 6.283185307179586);
  pm.tex_phase[2] = rp.uniform(0.0, 6.283185307179586);

  // The lateral extent roughly matches depth times the frustum half-angle,
  // so accepted points cover the whole frame instead of a central window.
  auto sample_point = [&](Eigen::Vector3d& p) {
    NormPoint n;
    for (int attempt = 0; attempt < 2000; ++attempt) {
      p = Eigen::Vector3d(rp.uniform(-4.5, 4.5), rp.uniform(-4.5, 4.5),
                          rp.uniform(4.5, 7.5));
      bool ok = true;
      for (const Camera& cam : pm.cameras)
        ok = ok && project(cam, p, 0.9, n);
      if (ok) return;
    }
    throw std::logic_error("build_place: could not place a point visible from "
                           "every visit");
  };

  const int n_bg = place < cfg.sparse_places ? cfg.sparse_bg_features
                                             : cfg.bg_features;
  // Background descriptors cluster around a place-specific center. Words of
  // a quantized vocabulary then specialize per place, which is what makes
  // the bag-of-words signatures discriminative at this corpus size.
  std::vector<float> center = gaussian_vec(rp, cfg.descriptor_dim);
  for (int i = 0; i < n_bg; ++i) {
    Eigen::Vector3d p;
    sample_point(p);
    pm.bg_points.push_back(p);
    std::vector<double> d(static_cast<std::size_t>(cfg.descriptor_dim));
    for (int k = 0; k < cfg.descriptor_dim; ++k)
      d[k] = center[k] + 0.35 * rp.gaussian();
    pm.bg_desc.push_back(std::move(d));
    pm.bg_resp.push_back(rp.uniform(0.2, 0.5));
  }
  for (int i = 0; i < cfg.parked_per_place; ++i) {
    Eigen::Vector3d p;
    sample_point(p);
    pm.parked_points.push_back(p);
    std::vector<double> d(static_cast<std::size_t>(cfg.descriptor_dim));
    const std::vector<double>& pool = car_pool[i % car_pool.size()];
    for (int k = 0; k < cfg.descriptor_dim; ++k)
      d[k] = 0.5 * pool[k] + 0.5 * rp.gaussian();
    pm.parked_desc.push_back(std::move(d));
    pm.parked_resp.push_back(rp.uniform(0.5, 0.8));
  }
  return pm;
}

inline void paint_block(Image& img, double px, double py, int half,
                        bool checker, int base, int alt) {
  const int cx = static_cast<int>(std::lround(px));
  const int cy = static_cast<int>(std::lround(py));
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      const int x = cx + dx, y = cy + dy;
      if (x < 0 || x >= img.width || y < 0 || y >= img.height) continue;
      const int v = checker ? (((x + y) & 1) ? base : alt) : base;
      img.at(y, x) = static_cast<std::uint8_t>(v);
    }
}

inline void mark_rect(std::vector<std::uint8_t>& raster, int w, int h, double px,
                      double py, int half, std::uint8_t value) {
  const int cx = static_cast<int>(std::lround(px));
  const int cy = static_cast<int>(std::lround(py));
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      const int x = cx + dx, y = cy + dy;
      if (x >= 0 && x < w && y >= 0 && y < h)
        raster[static_cast<std::size_t>(y) * w + x] = value;
    }
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.cfg = cfg;

  const int kCarTypes = std::max(1, cfg.moving_per_frame);
  std::vector<std::vector<double>> car_pool;
  for (int t = 0; t < kCarTypes; ++t) {
    Rng rt(mix_seed(cfg.seed, 777, t));
    std::vector<float> g = detail::gaussian_vec(rt, cfg.descriptor_dim);
    car_pool.emplace_back(g.begin(), g.end());
  }

  std::vector<detail::PlaceModel> places;
  places.reserve(static_cast<std::size_t>(cfg.places));
  for (int p = 0; p < cfg.places; ++p)
    places.push_back(detail::build_place(cfg, p, car_pool));

  const int parked_half = 2;  // 5x5 solid block
  const int moving_half = 2;  // 5x5 checker block

  for (int i = 0; i < cfg.frames; ++i) {
    const int place = i % cfg.places;
    const int visit = i / cfg.places;
    const detail::PlaceModel& pm = places[place];
    const detail::Camera& cam = pm.cameras[visit];
    Rng rf(mix_seed(cfg.seed, 4000 + i));

    CorpusFrame frame;
    frame.place = place;
    frame.visit = visit;

    // Background texture: smooth place-specific interference pattern, with a
    // small camera-dependent drift so revisits are not pixel-identical.
    frame.image = Image(cfg.height, cfg.width);
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        const double xs = x + 6.0 * cam.c.x();
        const double ys = y + 6.0 * cam.c.y();
        double v = 128.0 + 50.0 * std::sin(0.55 * xs + pm.tex_phase[0]) *
                               std::cos(0.35 * ys + pm.tex_phase[1]) +
                   20.0 * std::sin(0.9 * (xs + ys) + pm.tex_phase[2]);
        frame.image.at(y, x) =
            static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }

    const int n_bg = static_cast<int>(pm.bg_points.size());
    const int n_parked = static_cast<int>(pm.parked_points.size());
    const int total = n_bg + n_parked + cfg.moving_per_frame;
    frame.features.width = cfg.width;
    frame.features.height = cfg.height;
    frame.features.descriptors = DescriptorMatrix::floats(total, cfg.descriptor_dim);

    std::vector<std::uint8_t> label_raster(
        static_cast<std::size_t>(cfg.height) * cfg.width, 0);
    std::vector<std::uint8_t> truth_raster(
        static_cast<std::size_t>(cfg.height) * cfg.width, 1);

    int idx = 0;
    auto add_feature = [&](const NormPoint& n, double response,
                           const std::vector<double>& base) {
      Keypoint k;
      k.x = norm_to_pixel(n.x, cfg.width);
      k.y = norm_to_pixel(n.y, cfg.height);
      k.response = response;
      frame.features.keypoints.push_back(k);
      auto row = frame.features.descriptors.frow(idx);
      for (int d = 0; d < cfg.descriptor_dim; ++d)
        row[d] = static_cast<float>(base[d] + cfg.descriptor_noise * rf.gaussian());
      ++idx;
      return k;
    };

    for (int b = 0; b < n_bg; ++b) {
      NormPoint n;
      if (!detail::project(cam, pm.bg_points[b], 0.95, n))
        throw std::logic_error("generate_corpus: background point left the view");
      add_feature(n, pm.bg_resp[b], pm.bg_desc[b]);
    }
    for (int s = 0; s < n_parked; ++s) {
      NormPoint n;
      if (!detail::project(cam, pm.parked_points[s], 0.95, n))
        throw std::logic_error("generate_corpus: parked point left the view");
      const Keypoint k = add_feature(n, pm.parked_resp[s], pm.parked_desc[s]);
      detail::paint_block(frame.image, k.x, k.y, parked_half, false,
                          25 + 8 * (s % 3), 0);
      detail::mark_rect(label_raster, cfg.width, cfg.height, k.x, k.y, parked_half, 1);
    }
    for (int mv = 0; mv < cfg.moving_per_frame; ++mv) {
      Eigen::Vector3d p;
      NormPoint n;
      bool ok = false;
      for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
        p = Eigen::Vector3d(rf.uniform(-4.5, 4.5), rf.uniform(-4.5, 4.5),
                            rf.uniform(4.5, 7.5));
        ok = detail::project(cam, p, 0.88, n);
      }
      if (!ok)
        throw std::logic_error("generate_corpus: could not place a moving car");
      // Response band sits strictly above the parked range, so a response
      // ranking that keeps at most moving_per_frame features sees only cars
      // in motion.
      const Keypoint k = add_feature(n, rf.uniform(0.85, 1.0),
                                     car_pool[mv % car_pool.size()]);
      detail::paint_block(frame.image, k.x, k.y, moving_half, true, 230, 70);
      detail::mark_rect(label_raster, cfg.width, cfg.height, k.x, k.y, moving_half, 1);
      detail::mark_rect(truth_raster, cfg.width, cfg.height, k.x, k.y, moving_half, 0);
    }

    frame.labels.height = cfg.height;
    frame.labels.width = cfg.width;
    frame.labels.ids = std::move(label_raster);
    frame.labels.categories = {"background", "car"};
    frame.truth = StabilityMap(cfg.height, cfg.width, 1);
    frame.truth.values = std::move(truth_raster);
    frame.features.validate();
    corpus.frames.push_back(std::move(frame));
  }

  corpus.loops.sequence_length = cfg.frames;
  for (int a = 0; a < cfg.frames; ++a)
    for (int b = a + 1; b < cfg.frames; ++b)
      if (a % cfg.places == b % cfg.places) corpus.loops.pairs.push_back({a, b});
  corpus.loops.validate();
  return corpus;
}

// ---------------------------------------------------------------------------
// On-disk corpus layout: corpus.cfg, loops.csv, labels/categories.tsv, and
// per-frame files under frames/, labels/, truth/, feats/.

namespace detail {

inline std::string frame_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d", i);
  return buf;
}

}  // namespace detail

inline void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  const CorpusConfig& cfg = corpus.cfg;
  cfg.validate();
  if (static_cast<int>(corpus.frames.size()) != cfg.frames)
    throw std::invalid_argument(detail::str("save_corpus: ", corpus.frames.size(),
                                            " frames but config promises ",
                                            cfg.frames));
  fs::create_directories(fs::path(dir) / "frames");
  fs::create_directories(fs::path(dir) / "labels");
  fs::create_directories(fs::path(dir) / "truth");
  fs::create_directories(fs::path(dir) / "feats");

  std::string cfg_text = detail::str(
      "frames=", cfg.frames, "\nplaces=", cfg.places, "\nwidth=", cfg.width,
      "\nheight=", cfg.height, "\nholdout=", cfg.holdout, "\nseed=", cfg.seed,
      "\ndescriptor_dim=", cfg.descriptor_dim, "\nbg_features=", cfg.bg_features,
      "\nsparse_bg_features=", cfg.sparse_bg_features,
      "\nsparse_places=", cfg.sparse_places,
      "\nparked_per_place=", cfg.parked_per_place,
      "\nmoving_per_frame=", cfg.moving_per_frame,
      "\ndescriptor_noise=", detail::format_double(cfg.descriptor_noise), "\n");
  write_file_text((fs::path(dir) / "corpus.cfg").string(), cfg_text);
  save_loops(corpus.loops.pairs, (fs::path(dir) / "loops.csv").string());

  for (int i = 0; i < cfg.frames; ++i) {
    const CorpusFrame& f = corpus.frames[i];
    const std::string stem = detail::frame_stem(i);
    write_pgm(f.image, (fs::path(dir) / "frames" / (stem + ".pgm")).string());
    Image label_img(f.labels.height, f.labels.width);
    label_img.pixels = f.labels.ids;
    write_pgm(label_img, (fs::path(dir) / "labels" / (stem + ".pgm")).string());
    save_stability(f.truth, (fs::path(dir) / "truth" / (stem + ".pgm")).string());
    save_feature_set(f.features,
                     (fs::path(dir) / "feats" / (stem + ".kp.tsv")).string(),
                     (fs::path(dir) / "feats" / (stem + ".desc.bin")).string());
  }
  save_categories(corpus.frames.empty() ? std::vector<std::string>{"background", "car"}
                                        : corpus.frames[0].labels.categories,
                  (fs::path(dir) / "labels" / "categories.tsv").string());
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string cfg_path = (fs::path(dir) / "corpus.cfg").string();
  const std::map<std::string, std::string> kv =
      detail::parse_kv_block(read_file_text(cfg_path), cfg_path);

  CorpusConfig cfg;
  cfg.frames = static_cast<int>(detail::kv_uint(kv, "frames", cfg_path, 100000));
  cfg.places = static_cast<int>(detail::kv_uint(kv, "places", cfg_path, 100000));
  cfg.width = static_cast<int>(detail::kv_uint(kv, "width", cfg_path, 4096));
  cfg.height = static_cast<int>(detail::kv_uint(kv, "height", cfg_path, 4096));
  cfg.holdout = static_cast<int>(detail::kv_uint(kv, "holdout", cfg_path, 100000));
  cfg.seed = detail::kv_uint(kv, "seed", cfg_path, UINT64_MAX);
  cfg.descriptor_dim =
      static_cast<int>(detail::kv_uint(kv, "descriptor_dim", cfg_path, 65536));
  cfg.bg_features = static_cast<int>(detail::kv_uint(kv, "bg_features", cfg_path, 4096));
  cfg.sparse_bg_features =
      static_cast<int>(detail::kv_uint(kv, "sparse_bg_features", cfg_path, 4096));
  cfg.sparse_places =
      static_cast<int>(detail::kv_uint(kv, "sparse_places", cfg_path, 100000));
  cfg.parked_per_place =
      static_cast<int>(detail::kv_uint(kv, "parked_per_place", cfg_path, 4096));
  cfg.moving_per_frame =
      static_cast<int>(detail::kv_uint(kv, "moving_per_frame", cfg_path, 4096));
  auto it = kv.find("descriptor_noise");
  if (it == kv.end() || !detail::parse_double(it->second, cfg.descriptor_noise) ||
      !(cfg.descriptor_noise >= 0.0))
    throw std::runtime_error(detail::str(cfg_path, ": bad descriptor_noise"));
  cfg.validate();

  Corpus corpus;
  corpus.cfg = cfg;
  const std::vector<std::string> categories =
      load_categories((fs::path(dir) / "labels" / "categories.tsv").string());

  for (int i = 0; i < cfg.frames; ++i) {
    const std::string stem = detail::frame_stem(i);
    CorpusFrame f;
    f.place = i % cfg.places;
    f.visit = i / cfg.places;
    f.image = read_pgm((fs::path(dir) / "frames" / (stem + ".pgm")).string());
    if (f.image.width != cfg.width || f.image.height != cfg.height)
      throw std::runtime_error(detail::str(dir, ": frame ", i,
                                           " extent disagrees with corpus.cfg"));
    const Image label_img =
        read_pgm((fs::path(dir) / "labels" / (stem + ".pgm")).string());
    f.labels.height = label_img.height;
    f.labels.width = label_img.width;
    f.labels.ids = label_img.pixels;
    f.labels.categories = categories;
    f.labels.validate();
    f.truth = load_stability((fs::path(dir) / "truth" / (stem + ".pgm")).string());
    f.features = load_feature_set(
        (fs::path(dir) / "feats" / (stem + ".kp.tsv")).string(),
        (fs::path(dir) / "feats" / (stem + ".desc.bin")).string(), cfg.width,
        cfg.height);
    corpus.frames.push_back(std::move(f));
  }

  corpus.loops.sequence_length = cfg.frames;
  corpus.loops.pairs = load_loops((fs::path(dir) / "loops.csv").string());
  corpus.loops.validate();
  return corpus;
}

}  // namespace dsf
