#pragma once

// The closed recommender <-> virtual user loop: T-step unrolling, the
// collaborative and adversarial losses, and the three-stage training driver.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfsfl/dataio.hpp"
#include "cfsfl/diffcore.hpp"
#include "cfsfl/recommender.hpp"
#include "cfsfl/virtual_user.hpp"

namespace cfsfl {

struct ModelConfig {
  RecommenderConfig recommender;
  VirtualUserConfig virtual_user;

  // Keeps the shared dimensions (item count, feedback width) consistent.
  static ModelConfig for_items(std::size_t n_items);
  void validate() const;
};

struct ModelBundle {
  ModelConfig config;
  ParamSet params;
};

ModelBundle make_model(const ModelConfig& config, std::uint64_t seed);

/// Dense per-batch views of a set of users' observed items.
struct UserBatch {
  Matrix x_norm;       // unit L2 rows
  Matrix x_binary;     // indicator rows
  Matrix obs_weights;  // 1/max(1,|x|) on observed items
  std::vector<std::uint64_t> keys;  // per-user noise stream ids

  std::size_t size() const { return keys.size(); }
};

UserBatch make_batch(std::span<const ItemList* const> rows, std::size_t n_items, std::span<const std::uint64_t> keys);
UserBatch make_batch(const std::vector<ItemList>& rows, std::size_t n_items);

enum class UnrollMode { train, eval };

/// Graph handles of one unrolled step. For the bare recommender (T = 0) only
/// the policy fields are set.
struct StepVars {
  PolicyOutput policy;
  Var fused;
  Var reward_logit;
  Var reward;
  Var feedback;  // normalized v^t
};

struct UnrolledVars {
  Var v0;
  std::vector<StepVars> steps;  // max(T, 1) entries

  const StepVars& last() const { return steps.back(); }
};

/// v^0 = 0; for t = 1..T: a^t = pi(x, v^{t-1}), h^t = fuse(x, a^t),
/// r^t = R(h^t), v^t = normalize(F(h^t, r^t)). Train mode samples the latent
/// per step and draws one input-dropout mask per user and trajectory, which
/// both the policy input and the fusion observation see; eval mode is
/// deterministic and uses the full observation.
UnrolledVars unroll(Graph& g, const ModelConfig& config, const UserBatch& batch, std::size_t T, UnrollMode mode,
                    std::uint64_t noise_key = 0);

struct TrajectoryStep {
  Eigen::RowVectorXd preference;
  Eigen::RowVectorXd feedback;
  double reward = 0.0;
};

struct Trajectory {
  Eigen::RowVectorXd v0;
  std::vector<TrajectoryStep> steps;  // empty for T = 0
  Eigen::RowVectorXd final_preference;
};

/// Value-level unroll for a single user.
Trajectory unroll(const ModelBundle& model, const ItemList& x_row, std::size_t T, UnrollMode mode,
                  std::uint64_t noise_key = 0);

/// Final-step preference matrix (one row per user), no gradient recording.
Matrix infer_preferences(const ModelBundle& model, const UserBatch& batch, std::size_t T);

struct CollaborativeTerms {
  Var total;
  Var elbo_sum;
  Var mean_log_reward;
  Var entropy;  // mean entropy of the final preference rows
  UnrolledVars trajectory;
};

/// sum_i elbo_i(a_i^T) - mean_i log r_i^T - entropy_weight * H(pi), taken at
/// the final step. Freezes phi on `g`.
CollaborativeTerms loss_collaborative(Graph& g, const ModelConfig& config, const UserBatch& batch, std::size_t T,
                                      double beta, double entropy_weight, UnrollMode mode,
                                      std::uint64_t noise_key = 0);

struct AdversarialTerms {
  Var objective;  // to maximize
  double mean_reward_expert = 0.0;
  double mean_reward_policy = 0.0;
};

/// mean log r(x, x/|x|) over expert users + mean log(1 - r(x, a)) over policy
/// users with their (constant) actions. Freezes everything except phi.
AdversarialTerms loss_adversarial(Graph& g, const UserBatch& expert, const UserBatch& policy,
                                  const Matrix& policy_actions);

/// Expert action rows x / |x|.
Matrix expert_actions(const UserBatch& batch);

struct TrainingConfig {
  std::size_t T = 8;
  std::size_t batch_size = 500;
  std::size_t stage1_epochs = 150;
  std::size_t stage2_epochs = 10;
  std::size_t stage3_epochs = 50;
  double entropy_weight = 0.0;
  double l2_penalty = 0.01;
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const;
};

struct LossReport {
  std::size_t epoch = 0;  // 1-based within the stage
  int stage = 0;
  double loss_rec = 0.0;     // mean per-user negative ELBO
  double loss_collab = 0.0;  // mean per-batch collaborative loss
  double loss_adv = 0.0;     // mean per-batch discriminator objective
  double mean_reward_expert = 0.0;
  double mean_reward_policy = 0.0;
  std::optional<double> val_ndcg100;
};

/// Thrown when a loss becomes non-finite; carries where it happened.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(int stage, std::size_t epoch, std::size_t batch, const std::string& what);
  int stage;
  std::size_t epoch;
  std::size_t batch;
};

struct TrainHooks {
  std::function<void(const LossReport&)> on_epoch;
  // Called after each stage completes (also for stages with zero epochs).
  std::function<void(int stage, const ModelBundle&)> on_stage_end;
  // Returns validation NDCG@100 for the current model at the given stage.
  std::function<double(const ModelBundle&, int stage)> validate;
};

struct TrainResult {
  ModelBundle model;
  std::vector<LossReport> reports;
};

/// Stage 1 pre-trains the recommender on the ELBO, stage 2 pre-trains the
/// reward estimator against the frozen recommender, stage 3 alternates one
/// (theta, psi, B) step on the collaborative loss with one phi step on the
/// adversarial objective. Stages before `first_stage` are skipped (resume).
/// Parameters are rounded to checkpoint precision at every stage boundary so
/// a resumed run continues bit-identically.
TrainResult train(const TrainingConfig& config, const InteractionMatrix& train_data, ModelBundle model,
                  int first_stage = 1, const TrainHooks& hooks = {});

/// Rounds every parameter to the nearest float32.
void round_to_storage_precision(ParamSet& params);

/// Sum of squared recommender weight matrices (biases excluded).
Var recommender_weight_penalty(Graph& g);

}  // namespace cfsfl
