#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dsf/geometry.hpp"
#include "dsf/synthetic.hpp"

using namespace dsf;

namespace {

std::vector<Match> scene_static_matches(std::uint64_t seed, int n = 24) {
  SceneConfig sc;
  sc.n_static = n;
  sc.seed = seed;
  const SyntheticScene scene = generate_scene(sc);
  return scene.matches;
}

double max_algebraic_residual(const FundamentalMatrix& f,
                              const std::vector<Match>& matches) {
  double worst = 0.0;
  for (const Match& m : matches) {
    const Eigen::Vector3d a(m.p1.x, m.p1.y, 1.0), b(m.p2.x, m.p2.y, 1.0);
    worst = std::max(worst, std::abs(b.dot(f * a)));
  }
  return worst;
}

}  // namespace

TEST_CASE("pixel and normalized coordinates invert each other", "[geometry]") {
  CHECK(norm_to_pixel(-1.0, 48) == Catch::Approx(0.0));
  CHECK(norm_to_pixel(1.0, 48) == Catch::Approx(47.0));
  CHECK(pixel_to_norm(23.5, 48) == Catch::Approx(0.0));
  for (double v : {-0.73, -0.1, 0.0, 0.42, 0.99})
    CHECK(pixel_to_norm(norm_to_pixel(v, 31), 31) == Catch::Approx(v));
  CHECK_THROWS_AS(norm_to_pixel(0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(pixel_to_norm(0.0, 0), std::invalid_argument);
}

TEST_CASE("hartley_normalize centers points at mean radius sqrt(2)", "[geometry]") {
  std::vector<NormPoint> pts = {{0.3, -0.4}, {-0.5, 0.1}, {0.7, 0.7}, {-0.2, -0.6}};
  const HartleyFrame frame = hartley_normalize(pts);
  double cx = 0.0, cy = 0.0, mean_r = 0.0;
  for (const NormPoint& p : frame.points) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(frame.points.size());
  cy /= static_cast<double>(frame.points.size());
  for (const NormPoint& p : frame.points) mean_r += std::hypot(p.x - cx, p.y - cy);
  mean_r /= static_cast<double>(frame.points.size());
  CHECK(cx == Catch::Approx(0.0).margin(1e-12));
  CHECK(cy == Catch::Approx(0.0).margin(1e-12));
  CHECK(mean_r == Catch::Approx(std::sqrt(2.0)));

  // Points already in that frame transform to themselves.
  const double r = 1.0;  // both at radius 1 with mean sqrt(2) after scaling
  std::vector<NormPoint> centered = {{r, r}, {-r, -r}};
  const HartleyFrame id_frame = hartley_normalize(centered);
  CHECK(id_frame.points[0].x == Catch::Approx(1.0));
  CHECK(id_frame.points[0].y == Catch::Approx(1.0));
  CHECK_THROWS_AS(hartley_normalize({}), std::invalid_argument);
  CHECK_THROWS_AS(hartley_normalize({{0.5, 0.5}, {0.5, 0.5}}), std::runtime_error);
}

TEST_CASE("canonicalize_f fixes scale and sign", "[geometry]") {
  FundamentalMatrix f;
  f << 0, 0, 1, 0, 0, -2, -1, 2, 0;
  const FundamentalMatrix c = canonicalize_f(f);
  CHECK(c.norm() == Catch::Approx(1.0));
  double mx = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) mx = std::max(mx, std::abs(c(i, j)));
  int mr, mc;
  c.cwiseAbs().maxCoeff(&mr, &mc);
  CHECK(c(mr, mc) > 0.0);
  // Scaled or negated inputs land on the same representative.
  CHECK((canonicalize_f(-3.0 * f) - c).norm() == Catch::Approx(0.0).margin(1e-15));
  CHECK_THROWS_AS(canonicalize_f(FundamentalMatrix::Zero()), std::invalid_argument);
}

TEST_CASE("eight_point recovers exact two-view geometry", "[geometry]") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    const std::vector<Match> matches = scene_static_matches(seed);
    REQUIRE(matches.size() >= 8);
    const FundamentalMatrix f = eight_point(matches);
    CHECK(max_algebraic_residual(f, matches) < 1e-9);
    // Rank deficiency: the smallest singular value collapses.
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(f);
    CHECK(svd.singularValues()(2) < 1e-12);
  }
  CHECK_THROWS_AS(eight_point(std::vector<Match>(7)), std::invalid_argument);
}

TEST_CASE("eight_point rejects rank-deficient correspondence sets", "[geometry]") {
  // All points identical in view 1: the design matrix loses rank.
  std::vector<Match> degenerate(8);
  for (std::size_t i = 0; i < degenerate.size(); ++i) {
    degenerate[i].p1 = {0.1, 0.2};
    degenerate[i].p2 = {0.1 * static_cast<double>(i), -0.3};
  }
  CHECK_THROWS_AS(eight_point(degenerate), std::runtime_error);
}

TEST_CASE("epipolar distances match brute-force formulas", "[geometry]") {
  const std::vector<Match> matches = scene_static_matches(7);
  const FundamentalMatrix f = eight_point(matches);

  double acc = 0.0;
  for (const Match& m : matches) {
    const Eigen::Vector3d p1(m.p1.x, m.p1.y, 1.0), p2(m.p2.x, m.p2.y, 1.0);
    const Eigen::Vector3d l2 = f * p1;           // line in view 2
    const Eigen::Vector3d l1 = f.transpose() * p2;  // line in view 1
    const double d2 = std::abs(l2.dot(p2)) / std::hypot(l2(0), l2(1));
    const double d1 = std::abs(l1.dot(p1)) / std::hypot(l1(0), l1(1));

    CHECK(epipolar_distance(f, m.p1, m.p2) == Catch::Approx(d2).margin(1e-12));
    const double sym = symmetric_epipolar_distance(f, m);
    CHECK(sym == Catch::Approx(0.5 * (d1 + d2)).margin(1e-12));
    acc += 0.5 * (d1 + d2);
  }
  CHECK(reprojection_error(f, matches) ==
        Catch::Approx(acc / static_cast<double>(matches.size())).margin(1e-12));
  CHECK_THROWS_AS(reprojection_error(f, {}), std::invalid_argument);
}

TEST_CASE("epipolar_distance refuses an undefined line", "[geometry]") {
  // F mapping this point to the zero line: use a matrix whose first two rows
  // are zero so l = (0, 0, z).
  FundamentalMatrix f = FundamentalMatrix::Zero();
  f(2, 2) = 1.0;
  CHECK_THROWS_AS(epipolar_distance(f, {0.0, 0.0}, {0.1, 0.1}), std::runtime_error);
}

TEST_CASE("sparse_distance weights per-match distances", "[geometry]") {
  const std::vector<Match> matches = scene_static_matches(9, 12);
  const FundamentalMatrix f = eight_point(matches);

  std::vector<Match> weighted = matches;
  double sw = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < weighted.size(); ++i) {
    const double w = 0.1 * static_cast<double>(i + 1);
    weighted[i].weight = w;
    sw += w;
    acc += w * symmetric_epipolar_distance(f, weighted[i]);
  }
  CHECK(sparse_distance(weighted, f) == Catch::Approx(acc / sw).margin(1e-12));

  // A zero-weight outlier cannot shift the result.
  std::vector<Match> with_outlier = weighted;
  Match outlier = weighted[0];
  outlier.p2.x += 0.4;
  outlier.weight = 0.0;
  with_outlier.push_back(outlier);
  CHECK(sparse_distance(with_outlier, f) ==
        Catch::Approx(sparse_distance(weighted, f)).margin(1e-12));

  std::vector<Match> unweighted = matches;
  CHECK_THROWS_AS(sparse_distance(unweighted, f), std::invalid_argument);
  std::vector<Match> zeroed = weighted;
  for (Match& m : zeroed) m.weight = 0.0;
  CHECK_THROWS_AS(sparse_distance(zeroed, f), std::runtime_error);
}

TEST_CASE("ransac recovers the exact inlier partition", "[geometry]") {
  int exact = 0;
  const int runs = 20;
  for (int s = 0; s < runs; ++s) {
    SceneConfig sc;
    sc.n_static = 28;
    sc.n_dynamic = 12;
    sc.seed = 100 + static_cast<std::uint64_t>(s);
    const SyntheticScene scene = generate_scene(sc);

    RansacConfig rc;
    rc.seed = 55 + static_cast<std::uint64_t>(s);
    const RansacResult res = ransac_fundamental(scene.matches, rc);
    REQUIRE(res.ok());
    if (res.inliers == scene.true_inliers) ++exact;
  }
  CHECK(exact >= runs - 1);
}

TEST_CASE("ransac is deterministic for a fixed seed", "[geometry]") {
  SceneConfig sc;
  sc.n_static = 24;
  sc.n_dynamic = 10;
  sc.seed = 77;
  const SyntheticScene scene = generate_scene(sc);
  RansacConfig rc;
  rc.seed = 5;
  const RansacResult a = ransac_fundamental(scene.matches, rc);
  const RansacResult b = ransac_fundamental(scene.matches, rc);
  REQUIRE(a.ok());
  CHECK(a.inliers == b.inliers);
  CHECK((a.f - b.f).norm() == 0.0);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("ransac reports no consensus on structureless matches", "[geometry]") {
  Rng rng(3);
  std::vector<Match> junk(9);
  for (Match& m : junk) {
    m.p1 = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
    m.p2 = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
  }
  RansacConfig rc;
  rc.max_iters = 40;
  // A minimal sample fits its own 8 matches only before the rank-2 step;
  // after it, random geometry leaves residuals far above this threshold.
  rc.threshold = 1e-6;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    rc.seed = seed;
    const RansacResult res = ransac_fundamental(junk, rc);
    REQUIRE_FALSE(res.ok());
    CHECK(res.inlier_count == 0);
    CHECK(res.f.norm() == 0.0);
  }
}

TEST_CASE("weighted sampling never draws zero-weight matches", "[geometry]") {
  SceneConfig sc;
  sc.n_static = 16;
  sc.n_dynamic = 20;
  sc.seed = 13;
  const SyntheticScene scene = generate_scene(sc);

  std::vector<Match> weighted = scene.matches;
  for (std::size_t i = 0; i < weighted.size(); ++i)
    weighted[i].weight = scene.true_inliers[i] ? 1.0 : 0.0;

  RansacConfig rc;
  rc.weighted = true;
  rc.seed = 21;
  const RansacResult res = ransac_fundamental(weighted, rc);
  REQUIRE(res.ok());
  CHECK(res.inliers == scene.true_inliers);

  // Fewer than 8 positive weights cannot seed a sample.
  for (std::size_t i = 8; i < weighted.size(); ++i) weighted[i].weight = 0.0;
  weighted[0].weight = 0.0;
  CHECK_THROWS_AS(ransac_fundamental(weighted, rc), std::runtime_error);
}

TEST_CASE("ransac validates its configuration", "[geometry]") {
  const std::vector<Match> matches = scene_static_matches(31, 10);
  RansacConfig rc;
  rc.threshold = 0.0;
  CHECK_THROWS_AS(ransac_fundamental(matches, rc), std::invalid_argument);
  rc = {};
  rc.max_iters = 0;
  CHECK_THROWS_AS(ransac_fundamental(matches, rc), std::invalid_argument);
  rc = {};
  rc.confidence = 1.0;
  CHECK_THROWS_AS(ransac_fundamental(matches, rc), std::invalid_argument);
  CHECK_THROWS_AS(ransac_fundamental(std::vector<Match>(7), rc),
                  std::invalid_argument);
}

TEST_CASE("scene generator honors its own ground truth", "[geometry]") {
  SceneConfig sc;
  sc.n_static = 30;
  sc.n_dynamic = 8;
  sc.seed = 3;
  const SyntheticScene scene = generate_scene(sc);
  REQUIRE(scene.matches.size() == 38);
  for (std::size_t i = 0; i < scene.matches.size(); ++i) {
    const double d = symmetric_epipolar_distance(scene.f_true, scene.matches[i]);
    if (scene.true_inliers[i])
      CHECK(d < 1e-12);
    else
      CHECK(d >= sc.min_violation);
  }
}
