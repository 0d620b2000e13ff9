#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dsf/losses.hpp"
#include "dsf/rng.hpp"

using namespace dsf;

namespace {

ValueId random_activation(Graph& g, int h, int w, Rng& rng) {
  Tensor logits(Shape{1, 1, h, w});
  for (float& v : logits.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return g.sigmoid(g.leaf(logits, true));
}

DescriptorGrid random_grid(int h, int w, int d, Rng& rng) {
  DescriptorGrid grid(h, w, d);
  for (float& v : grid.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return grid;
}

}  // namespace

TEST_CASE("alpha_schedule decays one weight and feeds the other", "[losses]") {
  const LossWeights w0 = alpha_schedule(0);
  CHECK(w0.w_sem == 1.0);
  CHECK(w0.w_mat == 0.0);

  const LossWeights w1 = alpha_schedule(1);
  CHECK(w1.w_sem == Catch::Approx(0.9));
  CHECK(w1.w_mat == Catch::Approx(0.1));

  const LossWeights w10 = alpha_schedule(10);
  CHECK(w10.w_sem == Catch::Approx(std::pow(0.9, 10)));
  CHECK(w10.w_sem + w10.w_mat == Catch::Approx(1.0));

  const LossWeights flipped = alpha_schedule(3, false);
  CHECK(flipped.w_mat == Catch::Approx(std::pow(0.9, 3)));
  CHECK(flipped.w_sem == Catch::Approx(1.0 - std::pow(0.9, 3)));

  CHECK_THROWS_AS(alpha_schedule(-1), std::invalid_argument);
}

TEST_CASE("triplet_loss hinges at the margin", "[losses]") {
  CHECK(triplet_loss(0.2, 0.5, 0.3) == 0.0);          // satisfied exactly
  CHECK(triplet_loss(0.2, 0.4, 0.3) == Catch::Approx(0.1));
  CHECK(triplet_loss(0.9, 0.1, 0.5) == Catch::Approx(1.3));
  CHECK(triplet_loss(0.0, 1.0, 0.0) == 0.0);
  CHECK_THROWS_AS(triplet_loss(0.1, 0.2, -0.01), std::invalid_argument);
}

TEST_CASE("hybrid_loss mixes the two terms by schedule weight", "[losses]") {
  LossWeights w;
  w.w_sem = 0.25;
  w.w_mat = 0.75;
  CHECK(hybrid_loss(0.8, 0.4, w) == Catch::Approx(0.25 * 0.8 + 0.75 * 0.4));

  Graph g;
  Tensor sem_t(Shape{1, 1, 1, 1}), mat_t(Shape{1, 1, 1, 1});
  sem_t.data[0] = 0.8f;
  mat_t.data[0] = 0.4f;
  const ValueId mixed = hybrid_loss(g, g.leaf(sem_t), g.leaf(mat_t), w);
  CHECK(g.value(mixed).data[0] == Catch::Approx(0.8 * 0.25 + 0.4 * 0.75));
}

TEST_CASE("semantic_loss reduces to ln 2 for an uninformative map", "[losses]") {
  Graph g;
  Tensor half(Shape{1, 1, 4, 4});
  for (float& v : half.data) v = 0.5f;
  const ValueId act = g.leaf(half, false);
  const StabilityMap target(4, 4, 1);
  const ValueId loss = g.bce_mean(act, g.leaf(to_tensor(target), false));
  const ValueId via_builder = semantic_loss(g, act, target);
  CHECK(g.value(loss).data[0] == Catch::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(g.value(via_builder).data[0] == g.value(loss).data[0]);
}

TEST_CASE("semantic_loss rejects mismatched extents", "[losses]") {
  Graph g;
  const ValueId act = g.leaf(Tensor(Shape{1, 1, 4, 4}), false);
  CHECK_THROWS_AS(semantic_loss(g, act, StabilityMap(4, 6)), std::invalid_argument);
}

TEST_CASE("semantic_loss is perfectly minimized by the target itself", "[losses]") {
  Graph g;
  StabilityMap target(2, 3, 0);
  target.values = {1, 0, 1, 0, 1, 1};
  Tensor pred(Shape{1, 1, 2, 3});
  for (std::size_t i = 0; i < target.values.size(); ++i)
    pred.data[i] = static_cast<float>(target.values[i]);
  const ValueId loss = semantic_loss(g, g.leaf(pred, false), target);
  // Predictions clamp at 1e-7 from the rails, so the floor is near zero.
  CHECK(g.value(loss).data[0] < 1e-5);
}

TEST_CASE("triplet_hinge matches its scalar counterpart and cuts gradients when "
          "satisfied", "[losses]") {
  Graph g;
  Tensor dp_t(Shape{1, 1, 1, 1}), dn_t(Shape{1, 1, 1, 1});
  dp_t.data[0] = 0.6f;
  dn_t.data[0] = 0.2f;
  const ValueId dp = g.leaf(dp_t, true);
  const ValueId dn = g.leaf(dn_t, true);
  const ValueId hinge = g.relu(g.add_const(g.axpby(1.0, dp, -1.0, dn), 0.3));
  const ValueId built = triplet_hinge(g, dp, dn, 0.3);
  CHECK(g.value(hinge).data[0] == Catch::Approx(triplet_loss(0.6, 0.2, 0.3)));
  CHECK(g.value(built).data[0] == g.value(hinge).data[0]);

  g.backward(built);
  CHECK(g.grad(dp)[0] == Catch::Approx(1.0));
  CHECK(g.grad(dn)[0] == Catch::Approx(-1.0));

  // Satisfied triplet: the hinge sits at zero and passes no gradient.
  Graph g2;
  Tensor far(Shape{1, 1, 1, 1});
  far.data[0] = 2.0f;
  const ValueId dp2 = g2.leaf(dp_t, true);
  const ValueId dn2 = g2.leaf(far, true);
  const ValueId built2 = triplet_hinge(g2, dp2, dn2, 0.3);
  CHECK(g2.value(built2).data[0] == 0.0f);
  g2.backward(built2);
  CHECK(g2.grad(dp2)[0] == 0.0);
  CHECK_THROWS_AS(triplet_hinge(g2, dp2, dn2, -0.1), std::invalid_argument);
}

TEST_CASE("dense matching loss differentiates through both distances", "[losses]") {
  Rng rng(21);
  Graph g;
  const int h = 6, w = 6, d = 4;
  const ValueId a_q = random_activation(g, h, w, rng);
  const ValueId a_p = random_activation(g, h, w, rng);
  const ValueId a_n = random_activation(g, h, w, rng);
  const DescriptorGrid dq = random_grid(h, w, d, rng);
  const DescriptorGrid dp = random_grid(h, w, d, rng);
  const DescriptorGrid dn = random_grid(h, w, d, rng);

  const ValueId loss = matching_loss_for_triplet(g, a_q, a_p, a_n, dq, dp, dn, 5.0);
  REQUIRE(g.value(loss).data[0] > 0.0f);  // margin keeps the hinge active
  g.backward(loss);
  CHECK(grad_check(g, loss, 1e-3) < 1e-3);
}

TEST_CASE("sparse matching loss differentiates through the point samples",
          "[losses]") {
  Rng rng(22);
  Graph g;
  const ValueId a_q = random_activation(g, 8, 8, rng);

  SparseTripletData data;
  for (int i = 0; i < 6; ++i) {
    SamplePoint sp;
    sp.x = rng.uniform(0.5, 6.5);
    sp.y = rng.uniform(0.5, 6.5);
    sp.value = rng.uniform(0.0, 0.2);
    data.query_positive.points.push_back(sp);
    sp.x = rng.uniform(0.5, 6.5);
    sp.y = rng.uniform(0.5, 6.5);
    sp.value = rng.uniform(0.3, 0.9);
    data.query_negative.points.push_back(sp);
  }

  const ValueId loss = matching_loss_for_triplet(g, a_q, data, 1.0);
  REQUIRE(g.value(loss).data[0] > 0.0f);
  g.backward(loss);
  CHECK(grad_check(g, loss, 1e-3) < 1e-3);

  SparseTripletData missing = data;
  missing.query_negative.points.clear();
  Graph g2;
  const ValueId a2 = random_activation(g2, 8, 8, rng);
  CHECK_THROWS_AS(matching_loss_for_triplet(g2, a2, missing, 1.0),
                  std::invalid_argument);
}

TEST_CASE("dense_distance_loss equals the hand formula on tiny grids", "[losses]") {
  Graph g;
  Tensor act1(Shape{1, 1, 1, 2}), act2(Shape{1, 1, 1, 2});
  act1.data = {1.0f, 0.5f};
  act2.data = {0.25f, 1.0f};
  DescriptorGrid grid1(1, 2, 2), grid2(1, 2, 2);
  grid1.data = {1, 0, 0, 2};  // channel-major: d(0,0)=(1,0), d(0,1)=(0,2)
  grid2.data = {2, 2, 2, 0};  // d(0,0)=(2,2), d(0,1)=(2,0)

  // Weighted sums: a1*d1 = (1,1), a2*d2 = (2.5, 0.5); normalized by h*w=2.
  const ValueId loss = dense_distance_loss(g, g.leaf(act1, true), grid1,
                                           g.leaf(act2, true), grid2);
  const double want = std::hypot(1.0 - 2.5, 1.0 - 0.5) / 2.0;
  CHECK(g.value(loss).data[0] == Catch::Approx(want));
}
