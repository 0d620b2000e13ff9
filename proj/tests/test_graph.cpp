#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dsf/graph.hpp"
#include "dsf/rng.hpp"

using namespace dsf;

namespace {

Tensor make(const Shape& s, std::initializer_list<float> vals) {
  Tensor t(s);
  REQUIRE(vals.size() == t.data.size());
  std::copy(vals.begin(), vals.end(), t.data.begin());
  return t;
}

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("conv2d matches a hand-computed same-padding example", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  // k(0,0)=1, k(1,1)=2, k(2,2)=3, everything else zero.
  const ValueId k =
      g.leaf(make(Shape{1, 1, 3, 3}, {1, 0, 0, 0, 2, 0, 0, 0, 3}));
  const ValueId b = g.leaf(make(Shape{1, 1, 1, 1}, {0.5f}));
  const ValueId y = g.conv2d(x, k, b);
  const std::vector<float>& out = g.value(y).data;
  CHECK(out[0] == Catch::Approx(14.5));  // 2*1 + 3*4
  CHECK(out[1] == Catch::Approx(4.5));   // 2*2, diagonal neighbours padded away
  CHECK(out[2] == Catch::Approx(6.5));   // 2*3
  CHECK(out[3] == Catch::Approx(9.5));   // 2*4 + 1*1
}

TEST_CASE("conv2d sums over input channels per output channel", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 2, 1, 1}, {3, 5}));
  const ValueId k = g.leaf(make(Shape{2, 2, 1, 1}, {1, 2, 3, 4}));
  const ValueId b = g.leaf(make(Shape{1, 2, 1, 1}, {0.5f, -1.0f}));
  const ValueId y = g.conv2d(x, k, b);
  CHECK(g.value(y).data[0] == Catch::Approx(13.5));
  CHECK(g.value(y).data[1] == Catch::Approx(28.0));
}

TEST_CASE("conv2d rejects even kernels and mismatched bias", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(Tensor(Shape{1, 1, 4, 4}));
  const ValueId k_even = g.leaf(Tensor(Shape{1, 1, 2, 2}));
  const ValueId b = g.leaf(Tensor(Shape{1, 1, 1, 1}));
  CHECK_THROWS_AS(g.conv2d(x, k_even, b), std::invalid_argument);
  const ValueId k = g.leaf(Tensor(Shape{2, 1, 3, 3}));
  CHECK_THROWS_AS(g.conv2d(x, k, b), std::invalid_argument);  // bias for 1 of 2
}

TEST_CASE("pool_down keeps each block maximum and routes gradient to its first occurrence",
          "[graph]") {
  Graph g;
  const ValueId x =
      g.leaf(make(Shape{1, 1, 2, 4}, {5, 5, 1, 2, 4, 3, 2, 2}), true);
  const ValueId p = g.pool_down(x);
  REQUIRE(g.value(p).shape == (Shape{1, 1, 1, 2}));
  CHECK(g.value(p).data[0] == 5.0f);
  CHECK(g.value(p).data[1] == 2.0f);

  // Scalarize through a weighted mean; only the routing pattern matters.
  const ValueId loss =
      g.weighted_point_mean(p, {SamplePoint{0, 0, 10.0}, SamplePoint{1, 0, 0.0}});
  g.backward(loss);
  const std::vector<float>& gx = g.grad(x);
  // Tie between x[0] and x[1]: the scan-order first one gets everything.
  CHECK(gx[0] != 0.0f);
  CHECK(gx[1] == 0.0f);
  CHECK(gx[4] == 0.0f);
  // Max 2 of the right block first appears at x[3].
  CHECK(gx[3] != 0.0f);
  CHECK(gx[6] == 0.0f);
  CHECK(gx[7] == 0.0f);
}

TEST_CASE("upsample repeats each cell twice per axis", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 2}, {1, 3}));
  const ValueId u = g.upsample(x);
  REQUIRE(g.value(u).shape == (Shape{1, 1, 2, 4}));
  const std::vector<float> want = {1, 1, 3, 3, 1, 1, 3, 3};
  CHECK(g.value(u).data == want);
}

TEST_CASE("concat_channels stacks the second input after the first", "[graph]") {
  Graph g;
  const ValueId a = g.leaf(make(Shape{1, 1, 1, 2}, {1, 2}));
  const ValueId b = g.leaf(make(Shape{1, 2, 1, 2}, {3, 4, 5, 6}));
  const ValueId c = g.concat_channels(a, b);
  REQUIRE(g.value(c).shape == (Shape{1, 3, 1, 2}));
  const std::vector<float> want = {1, 2, 3, 4, 5, 6};
  CHECK(g.value(c).data == want);
  const ValueId bad = g.leaf(Tensor(Shape{1, 1, 2, 2}));
  CHECK_THROWS_AS(g.concat_channels(a, bad), std::invalid_argument);
}

TEST_CASE("relu zeroes negatives and blocks their gradient", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 3}, {-1, 0, 2}), true);
  const ValueId r = g.relu(x);
  const std::vector<float> want = {0, 0, 2};
  CHECK(g.value(r).data == want);
  const ValueId loss =
      g.weighted_point_mean(r, {SamplePoint{2, 0, 4.0}, SamplePoint{2, 0, 8.0}});
  g.backward(loss);
  CHECK(g.grad(x)[0] == 0.0f);
  CHECK(g.grad(x)[1] == 0.0f);  // gradient at exactly zero is dropped
}

TEST_CASE("sigmoid saturates strictly inside the unit interval", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 3}, {0.0f, 200.0f, -200.0f}));
  const ValueId s = g.sigmoid(x);
  const std::vector<float>& out = g.value(s).data;
  CHECK(out[0] == 0.5f);
  CHECK(out[1] < 1.0f);
  CHECK(out[1] >= 1.0f - 2e-7f);
  CHECK(out[2] > 0.0f);
  CHECK(std::isfinite(out[2]));
}

TEST_CASE("bce_mean of an undecided prediction is ln 2", "[graph]") {
  Graph g;
  const ValueId p = g.leaf(make(Shape{1, 1, 1, 4}, {0.5f, 0.5f, 0.5f, 0.5f}));
  const ValueId t = g.leaf(make(Shape{1, 1, 1, 4}, {0, 1, 1, 0}));
  const ValueId l = g.bce_mean(p, t);
  CHECK(g.scalar(l) == Catch::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("bce_mean clamps saturated predictions to a finite loss", "[graph]") {
  Graph g;
  const ValueId p = g.leaf(make(Shape{1, 1, 1, 2}, {1.0f, 0.0f}));
  const ValueId t = g.leaf(make(Shape{1, 1, 1, 2}, {0.0f, 1.0f}));
  const ValueId l = g.bce_mean(p, t);
  CHECK(std::isfinite(g.scalar(l)));
  CHECK(g.scalar(l) > 10.0);  // -ln(1e-7) averaged over both elements
  const ValueId bad_t = g.leaf(make(Shape{1, 1, 1, 2}, {1.5f, 0.0f}));
  CHECK_THROWS_AS(g.bce_mean(p, bad_t), std::invalid_argument);
}

TEST_CASE("dense_distance matches its aggregate formula", "[graph]") {
  Graph g;
  const Shape as{1, 1, 1, 2};
  const Shape ds{1, 2, 1, 2};
  const ValueId a1 = g.leaf(make(as, {0.5f, 1.0f}));
  const ValueId a2 = g.leaf(make(as, {1.0f, 0.25f}));
  const ValueId d1 = g.leaf(make(ds, {1, 2, 3, 4}));
  const ValueId d2 = g.leaf(make(ds, {2, 0, 1, 1}));
  const ValueId out = g.dense_distance(a1, d1, a2, d2);

  // Aggregates: s1 = (0.5*1 + 1*2, 0.5*3 + 1*4) = (2.5, 5.5)
  //             s2 = (1*2 + 0.25*0, 1*1 + 0.25*1) = (2, 1.25)
  const double diff0 = 2.5 - 2.0, diff1 = 5.5 - 1.25;
  const double want = std::sqrt(diff0 * diff0 + diff1 * diff1) / 2.0;
  CHECK(g.scalar(out) == Catch::Approx(want).epsilon(1e-6));
}

TEST_CASE("dense_distance refuses trainable descriptor grids", "[graph]") {
  Graph g;
  const Shape as{1, 1, 1, 2};
  const Shape ds{1, 1, 1, 2};
  const ValueId a1 = g.leaf(Tensor(as));
  const ValueId a2 = g.leaf(Tensor(as));
  const ValueId d1 = g.leaf(Tensor(ds), true);
  const ValueId d2 = g.leaf(Tensor(ds));
  CHECK_THROWS_AS(g.dense_distance(a1, d1, a2, d2), std::invalid_argument);
}

TEST_CASE("weighted_point_mean interpolates its weights bilinearly", "[graph]") {
  Graph g;
  const ValueId a = g.leaf(make(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  const ValueId out = g.weighted_point_mean(
      a, {SamplePoint{0.5, 0.5, 7.0}, SamplePoint{1.0, 0.0, 3.0}});
  // Center sample averages all four cells: 2.5. Corner sample reads 2.
  CHECK(g.scalar(out) == Catch::Approx((2.5 * 7 + 2.0 * 3) / 4.5).epsilon(1e-6));
}

TEST_CASE("weighted_point_mean rejects zero total weight and out-of-range points",
          "[graph]") {
  Graph g;
  const ValueId zero = g.leaf(Tensor(Shape{1, 1, 2, 2}));
  CHECK_THROWS_AS(g.weighted_point_mean(zero, {SamplePoint{0, 0, 1.0}}),
                  std::runtime_error);
  const ValueId a = g.leaf(make(Shape{1, 1, 2, 2}, {1, 1, 1, 1}));
  CHECK_THROWS_AS(g.weighted_point_mean(a, {SamplePoint{2.5, 0, 1.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(g.weighted_point_mean(a, {}), std::invalid_argument);
}

TEST_CASE("axpby and add_const follow their affine definitions", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 1}, {5}), true);
  const ValueId y = g.leaf(make(Shape{1, 1, 1, 1}, {7}), true);
  const ValueId lin = g.axpby(2.0, x, -3.0, y);
  CHECK(g.scalar(lin) == Catch::Approx(-11.0));
  const ValueId shifted = g.add_const(lin, 4.0);
  CHECK(g.scalar(shifted) == Catch::Approx(-7.0));
  g.backward(shifted);
  CHECK(g.grad(x)[0] == Catch::Approx(2.0));
  CHECK(g.grad(y)[0] == Catch::Approx(-3.0));
}

TEST_CASE("a value consumed twice accumulates both gradient paths", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 1}, {1.5f}), true);
  const ValueId s = g.axpby(1.0, x, 2.0, x);
  CHECK(g.scalar(s) == Catch::Approx(4.5));
  g.backward(s);
  CHECK(g.grad(x)[0] == Catch::Approx(3.0));
}

TEST_CASE("backward demands a scalar loss and tracked gradients", "[graph]") {
  Graph g;
  const ValueId x = g.leaf(make(Shape{1, 1, 1, 2}, {1, 2}), true);
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
  const ValueId fixed = g.leaf(make(Shape{1, 1, 1, 1}, {3}));
  CHECK_THROWS_AS(g.grad(fixed), std::logic_error);
}

TEST_CASE("leaf rejects data that does not fill its shape", "[graph]") {
  Tensor t(Shape{1, 1, 2, 2});
  t.data.pop_back();
  Graph g;
  CHECK_THROWS_AS(g.leaf(t), std::invalid_argument);
}

TEST_CASE("gradients agree with central differences across operator chains",
          "[graph]") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    Graph g;
    const ValueId x = g.leaf(random_tensor(Shape{1, 2, 4, 4}, rng), true);
    const ValueId k1 = g.leaf(random_tensor(Shape{3, 2, 3, 3}, rng, -0.5, 0.5), true);
    const ValueId b1 = g.leaf(random_tensor(Shape{1, 3, 1, 1}, rng, -0.1, 0.1), true);
    const ValueId c1 = g.relu(g.conv2d(x, k1, b1));
    const ValueId down = g.pool_down(c1);
    const ValueId up = g.upsample(down);
    const ValueId cat = g.concat_channels(up, c1);
    const ValueId k2 = g.leaf(random_tensor(Shape{1, 6, 1, 1}, rng, -0.5, 0.5), true);
    const ValueId b2 = g.leaf(random_tensor(Shape{1, 1, 1, 1}, rng, -0.1, 0.1), true);
    const ValueId head = g.sigmoid(g.conv2d(cat, k2, b2));
    Tensor target(Shape{1, 1, 4, 4});
    for (float& v : target.data) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    const ValueId loss = g.bce_mean(head, g.leaf(target));
    g.backward(loss);
    CHECK(grad_check(g, loss, 1e-3) < 1e-3);
  }
}

TEST_CASE("weighted_point_mean gradients agree with central differences", "[graph]") {
  Rng rng(99);
  Graph g;
  Tensor act(Shape{1, 1, 4, 4});
  for (float& v : act.data) v = static_cast<float>(rng.uniform(0.2, 1.0));
  const ValueId a = g.leaf(act, true);
  std::vector<SamplePoint> pts;
  for (int i = 0; i < 6; ++i)
    pts.push_back({rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(-2.0, 2.0)});
  const ValueId loss = g.weighted_point_mean(a, pts);
  g.backward(loss);
  CHECK(grad_check(g, loss, 1e-3) < 1e-3);
}

TEST_CASE("dense_distance gradients agree with central differences", "[graph]") {
  Rng rng(7);
  Graph g;
  Tensor a1(Shape{1, 1, 3, 3}), a2(Shape{1, 1, 3, 3});
  for (float& v : a1.data) v = static_cast<float>(rng.uniform(0.1, 1.0));
  for (float& v : a2.data) v = static_cast<float>(rng.uniform(0.1, 1.0));
  const ValueId i1 = g.leaf(a1, true);
  const ValueId i2 = g.leaf(a2, true);
  const ValueId d1 = g.leaf(random_tensor(Shape{1, 4, 3, 3}, rng));
  const ValueId d2 = g.leaf(random_tensor(Shape{1, 4, 3, 3}, rng));
  const ValueId loss = g.dense_distance(i1, d1, i2, d2);
  g.backward(loss);
  CHECK(grad_check(g, loss, 1e-3) < 1e-3);
}

TEST_CASE("the double-precision replay tracks the forward pass", "[graph]") {
  Rng rng(21);
  Graph g;
  const ValueId x = g.leaf(random_tensor(Shape{1, 1, 4, 4}, rng), true);
  const ValueId k = g.leaf(random_tensor(Shape{1, 1, 3, 3}, rng), true);
  const ValueId b = g.leaf(random_tensor(Shape{1, 1, 1, 1}, rng), true);
  const ValueId out = g.sigmoid(g.conv2d(x, k, b));
  Tensor target(Shape{1, 1, 4, 4});
  const ValueId loss = g.bce_mean(out, g.leaf(target));
  const double replay = g.eval_reference(loss, x, 0, 0.0);
  CHECK(replay == Catch::Approx(g.scalar(loss)).epsilon(1e-5));
}

TEST_CASE("sgd_step applies the negative scaled gradient", "[graph]") {
  Tensor t(Shape{1, 1, 1, 2});
  t.data = {1.0f, -2.0f};
  sgd_step(t, {0.5f, -1.0f}, 0.1);
  CHECK(t.data[0] == Catch::Approx(0.95f));
  CHECK(t.data[1] == Catch::Approx(-1.9f));
  CHECK_THROWS_AS(sgd_step(t, {1.0f}, 0.1), std::invalid_argument);
}
