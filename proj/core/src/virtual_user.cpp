#include "cfsfl/virtual_user.hpp"

#include <algorithm>
#include <cmath>

namespace cfsfl {

void VirtualUserConfig::validate() const {
  if (n_items == 0 || fusion_dim == 0 || reward_hidden == 0 || feedback_dim == 0) {
    throw ParameterError("virtual user dimensions must be positive");
  }
}

void add_virtual_user_params(ParamSet& params, const VirtualUserConfig& config, CounterRng& rng) {
  config.validate();
  const double limit = std::sqrt(6.0 / static_cast<double>(config.n_items + config.fusion_dim));
  Tensor table({config.n_items, config.fusion_dim});
  for (double& x : table.data()) x = (2.0 * rng.uniform() - 1.0) * limit;
  params.add("fusion.B", Owner::fusion, std::move(table));

  const std::size_t f = config.fusion_dim;
  const std::size_t r = config.reward_hidden;
  add_dense_params(params, "phi.l1", Owner::phi, f, r, Activation::relu, rng);
  add_dense_params(params, "phi.l2", Owner::phi, r, r, Activation::relu, rng);
  add_dense_params(params, "phi.l3", Owner::phi, r, r, Activation::relu, rng);
  add_dense_params(params, "phi.out", Owner::phi, r, 1, Activation::sigmoid, rng);

  const std::size_t d = config.feedback_dim;
  add_dense_params(params, "psi.l1", Owner::psi, f + 1, d, Activation::relu, rng);
  add_dense_params(params, "psi.l2", Owner::psi, d, d, Activation::relu, rng);
  add_dense_params(params, "psi.out", Owner::psi, d, d, Activation::identity, rng);
}

Matrix observation_weights(std::span<const ItemList* const> rows, std::size_t n_items) {
  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_items));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(1, rows[r]->size()));
    for (auto i : *rows[r]) {
      if (i < 0 || static_cast<std::size_t>(i) >= n_items) throw ShapeError("item index outside vocabulary");
      w(static_cast<Eigen::Index>(r), i) = scale;
    }
  }
  return w;
}

Var fuse(Graph& g, const Matrix& obs_weights, Var preference) {
  if (obs_weights.rows() != preference.rows() || obs_weights.cols() != preference.cols()) {
    throw ShapeError("fuse: observation weights and preference differ in shape");
  }
  Var table = g.param("fusion.B");
  if (table.rows() != preference.cols()) throw ShapeError("fuse: lookup table rows differ from item count");
  return ops::matmul(ops::add(g.constant(obs_weights), preference), table);
}

namespace {

// Same layer as dense() with the weights entering as constants.
Var dense_fixed(Graph& g, Var x, const std::string& prefix, Activation act) {
  const ParamSet& p = *g.params();
  return ops::activate(
      ops::affine(x, g.constant(p.at(prefix + ".W").matrix()), g.constant(p.at(prefix + ".b").matrix())), act);
}

template <typename Layer>
Var reward_mlp(Graph& g, Var fused, Layer layer) {
  Var x = layer(g, fused, "phi.l1", Activation::relu);
  x = layer(g, x, "phi.l2", Activation::relu);
  x = layer(g, x, "phi.l3", Activation::relu);
  return layer(g, x, "phi.out", Activation::identity);
}

}  // namespace

Var reward_logit(Graph& g, Var fused) {
  return reward_mlp(g, fused, [](Graph& gr, Var x, const char* p, Activation a) { return dense(gr, x, p, a); });
}

Var estimate_reward(Graph& g, Var fused) { return ops::sigmoid(reward_logit(g, fused)); }

Var generate_feedback(Graph& g, Var fused, Var reward) {
  if (reward.cols() != 1 || reward.rows() != fused.rows()) throw ShapeError("generate_feedback: reward must be n x 1");
  // With phi trainable on this graph, rebuild r from constant phi weights so
  // the gradient still reaches h but stops short of phi.
  if (g.recording() && !g.frozen(Owner::phi)) {
    reward = ops::sigmoid(
        reward_mlp(g, fused, [](Graph& gr, Var x, const char* p, Activation a) { return dense_fixed(gr, x, p, a); }));
  }
  Var x = dense(g, ops::concat_cols(fused, reward), "psi.l1", Activation::relu);
  x = dense(g, x, "psi.l2", Activation::relu);
  return dense(g, x, "psi.out", Activation::identity);
}

}  // namespace cfsfl
