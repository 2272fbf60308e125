#include <doctest.h>

#include <cmath>

#include "cfsfl/errors.hpp"
#include "cfsfl/virtual_user.hpp"
#include "support.hpp"

using namespace cfsfl;
using cfsfl::testing::random_matrix;

namespace {

VirtualUserConfig small_config(std::size_t n_items) {
  VirtualUserConfig c;
  c.n_items = n_items;
  c.fusion_dim = 5;
  c.reward_hidden = 6;
  c.feedback_dim = 4;
  return c;
}

ParamSet init_params(const VirtualUserConfig& c, std::uint64_t seed) {
  ParamSet p;
  CounterRng rng{seed};
  add_virtual_user_params(p, c, rng);
  return p;
}

}  // namespace

TEST_CASE("virtual user parameter layout") {
  const auto p = init_params(small_config(8), 1);
  CHECK(p.at("fusion.B").dims() == std::vector<std::size_t>{8, 5});
  CHECK(p.owner("fusion.B") == Owner::fusion);
  CHECK(p.at("phi.l1.W").dims() == std::vector<std::size_t>{5, 6});
  CHECK(p.at("phi.out.W").dims() == std::vector<std::size_t>{6, 1});
  CHECK(p.owner("phi.l3.W") == Owner::phi);
  CHECK(p.at("psi.l1.W").dims() == std::vector<std::size_t>{6, 4});
  CHECK(p.at("psi.out.W").dims() == std::vector<std::size_t>{4, 4});
  CHECK(p.owner("psi.l2.W") == Owner::psi);
}

TEST_CASE("fusion matches an explicit loop over the table") {
  const std::size_t M = 8;
  const auto p = init_params(small_config(M), 2);
  const std::vector<ItemList> rows = {{1, 5, 6}, {}, {0}};
  const std::vector<const ItemList*> ptr = {&rows[0], &rows[1], &rows[2]};
  const Matrix w = observation_weights(ptr, M);
  const Matrix a = random_matrix(3, M, 3).cwiseAbs();

  Graph g(p, false);
  const Matrix h = fuse(g, w, g.constant(a)).value();
  const Matrix B = p.at("fusion.B").matrix();
  for (std::size_t r = 0; r < 3; ++r) {
    for (Eigen::Index c = 0; c < 5; ++c) {
      double want = 0.0;
      for (auto i : rows[r]) want += B(i, c) / static_cast<double>(rows[r].size());
      for (std::size_t j = 0; j < M; ++j) want += a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) * B(static_cast<Eigen::Index>(j), c);
      CHECK(h(static_cast<Eigen::Index>(r), c) == doctest::Approx(want).epsilon(1e-12));
    }
  }

  const std::vector<ItemList> bad = {{9}};
  const std::vector<const ItemList*> bad_ptr = {&bad[0]};
  CHECK_THROWS_AS(observation_weights(bad_ptr, M), ShapeError);
}

TEST_CASE("fusion is affine in the recommendation") {
  const std::size_t M = 7;
  const auto p = init_params(small_config(M), 4);
  const Matrix w = random_matrix(2, M, 5).cwiseAbs();
  const Matrix a1 = random_matrix(2, M, 6);
  const Matrix a2 = random_matrix(2, M, 7);
  Graph g(p, false);
  const Matrix h0 = fuse(g, w, g.constant(Matrix::Zero(2, M))).value();
  const Matrix h1 = fuse(g, w, g.constant(a1)).value() - h0;
  const Matrix h2 = fuse(g, w, g.constant(a2)).value() - h0;
  const Matrix h12 = fuse(g, w, g.constant(a1 + 2.5 * a2)).value() - h0;
  CHECK((h12 - (h1 + 2.5 * h2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("reward lies in the unit interval with a finite log") {
  auto p = init_params(small_config(6), 8);
  Graph g(p, false);
  const auto r0 = estimate_reward(g, g.constant(random_matrix(10, 5, 9)));
  CHECK(r0.cols() == 1);
  CHECK((r0.value().array() > 0.0).all());
  CHECK((r0.value().array() < 1.0).all());
  for (double s : {1e3, -1e3}) {
    const auto logit = reward_logit(g, g.constant(s * random_matrix(10, 5, 9)));
    const auto sat = ops::sigmoid(logit).value();
    CHECK(((sat.array() >= 0.0) && (sat.array() <= 1.0)).all());
    CHECK(ops::log_sigmoid(logit).value().allFinite());
    CHECK(ops::log_sigmoid(ops::scale(logit, -1.0)).value().allFinite());
  }
  const Matrix h = random_matrix(4, 5, 10);
  const Matrix logit = reward_logit(g, g.constant(h)).value();
  const Matrix r = estimate_reward(g, g.constant(h)).value();
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(r(i, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-logit(i, 0)))));
}

TEST_CASE("feedback path gives no gradient to the reward estimator") {
  auto p = init_params(small_config(6), 11);
  const Matrix w = random_matrix(3, 6, 12).cwiseAbs();
  const Matrix a = random_matrix(3, 6, 13).cwiseAbs();
  Graph g(p);
  const auto h = fuse(g, w, g.constant(a));
  const auto v = generate_feedback(g, h, estimate_reward(g, h));
  CHECK(v.cols() == 4);
  g.backward(ops::sum(ops::mul_const(v, random_matrix(3, 4, 14))));
  const auto grads = g.gradients();
  for (const auto& n : p.names(Owner::phi)) CHECK(grads.at(n).matrix().isZero());
  double psi_mass = 0.0;
  for (const auto& n : p.names(Owner::psi)) psi_mass += grads.at(n).matrix().cwiseAbs().sum();
  CHECK(psi_mass > 0.0);
  CHECK(grads.at("fusion.B").matrix().cwiseAbs().sum() > 0.0);
  CHECK_THROWS_AS(generate_feedback(g, h, g.constant(Matrix::Zero(2, 1))), ShapeError);
}

TEST_CASE("virtual user gradients match finite differences") {
  auto p = init_params(small_config(6), 15);
  const Matrix w = random_matrix(3, 6, 16).cwiseAbs();
  const Matrix a = random_matrix(3, 6, 17).cwiseAbs();
  const Matrix mix = random_matrix(3, 4, 18);
  auto loss = [&](Graph& g) {
    const auto h = fuse(g, w, g.constant(a));
    const auto r = estimate_reward(g, h);
    const auto v = generate_feedback(g, h, r);
    return ops::add(ops::sum(ops::log(r)), ops::sum(ops::mul_const(v, mix)));
  };
  // The table and psi see every path, including the one through r into F.
  GradCheckOptions options;
  options.only = p.names(Owner::psi);
  options.only.push_back("fusion.B");
  CHECK(grad_check(loss, p, options).max_relative_error < 1e-6);

  // phi only sees the direct reward term.
  options.only = p.names(Owner::phi);
  CHECK(grad_check([&](Graph& g) { return ops::sum(ops::log(estimate_reward(g, fuse(g, w, g.constant(a))))); }, p,
                   options)
            .max_relative_error < 1e-6);
}

TEST_CASE("feedback gradient follows the reward into the fused state") {
  // Freezing phi, or not, must not change the gradient that reaches the table.
  auto p = init_params(small_config(6), 19);
  const Matrix w = random_matrix(3, 6, 20).cwiseAbs();
  const Matrix a = random_matrix(3, 6, 21).cwiseAbs();
  const Matrix mix = random_matrix(3, 4, 22);
  auto table_grad = [&](bool freeze_phi) {
    Graph g(p);
    if (freeze_phi) g.freeze(Owner::phi);
    const auto h = fuse(g, w, g.constant(a));
    g.backward(ops::sum(ops::mul_const(generate_feedback(g, h, estimate_reward(g, h)), mix)));
    return Matrix(g.gradients().at("fusion.B").matrix());
  };
  CHECK((table_grad(true) - table_grad(false)).cwiseAbs().maxCoeff() < 1e-12);
}
