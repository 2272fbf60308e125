#pragma once

// The virtual user: a shared item lookup table fusing observation and
// recommendation, a reward estimator and a feedback generator.

#include <cstddef>
#include <span>

#include "cfsfl/dataio.hpp"
#include "cfsfl/diffcore.hpp"

namespace cfsfl {

struct VirtualUserConfig {
  std::size_t n_items = 0;
  std::size_t fusion_dim = 64;
  std::size_t reward_hidden = 128;
  std::size_t feedback_dim = 128;

  void validate() const;
};

/// fusion.B (items x fusion_dim), phi.l1..l3 (ReLU) + phi.out (-> 1) and
/// psi.l1 (fusion_dim + 1 -> feedback_dim, ReLU), psi.l2 (ReLU), psi.out.
void add_virtual_user_params(ParamSet& params, const VirtualUserConfig& config, CounterRng& rng);

/// Rows of 1 / max(1, |x|) on observed items: the averaging weights of the
/// observation half of the fusion function.
Matrix observation_weights(std::span<const ItemList* const> rows, std::size_t n_items);

/// h = (1/max(1,|x|)) sum_{j in x} B_j + B^T a, i.e. (W_obs + a) B.
Var fuse(Graph& g, const Matrix& obs_weights, Var preference);

/// Pre-sigmoid reward g(h): 64 -> 128 -> 128 -> 128 (ReLU) -> 1.
Var reward_logit(Graph& g, Var fused);

/// sigmoid(g(h)). May round to exactly 0 or 1 for extreme logits; losses
/// use reward_logit through log_sigmoid instead of log(reward).
Var estimate_reward(Graph& g, Var fused);

/// F([h; r]) where `reward` is estimate_reward(g, fused). r is treated as a
/// constant with respect to phi only: gradients flow through it into h, but
/// never into phi.
Var generate_feedback(Graph& g, Var fused, Var reward);

}  // namespace cfsfl
