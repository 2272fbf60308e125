#include "cfsfl/loop_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cfsfl {

namespace {

constexpr std::uint64_t kInitTag = 0x494e4954;
constexpr std::uint64_t kDropoutTag = 0x44524f50;
constexpr std::uint64_t kLatentTag = 0x4c41544e;
constexpr std::uint64_t kEpochTag = 0x45504f43;
constexpr std::uint64_t kBatchTag = 0x42415443;

std::size_t as_size(Eigen::Index i) { return static_cast<std::size_t>(i); }

}  // namespace

ModelConfig ModelConfig::for_items(std::size_t n_items) {
  ModelConfig c;
  c.recommender.n_items = n_items;
  c.virtual_user.n_items = n_items;
  c.virtual_user.feedback_dim = c.recommender.feedback_dim;
  return c;
}

void ModelConfig::validate() const {
  recommender.validate();
  virtual_user.validate();
  if (recommender.n_items != virtual_user.n_items) throw ParameterError("recommender and virtual user item counts differ");
  if (recommender.feedback_dim != virtual_user.feedback_dim) {
    throw ParameterError("recommender and feedback generator disagree on the feedback width");
  }
}

void round_to_storage_precision(ParamSet& params) {
  for (auto& [name, entry] : params) {
    for (double& x : entry.value.data()) x = static_cast<double>(static_cast<float>(x));
  }
}

ModelBundle make_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle model{config, {}};
  CounterRng rng{seed, kInitTag};
  add_recommender_params(model.params, config.recommender, rng);
  add_virtual_user_params(model.params, config.virtual_user, rng);
  // Start from values the checkpoint format stores exactly.
  round_to_storage_precision(model.params);
  return model;
}

UserBatch make_batch(std::span<const ItemList* const> rows, std::size_t n_items, std::span<const std::uint64_t> keys) {
  if (rows.size() != keys.size()) throw ShapeError("make_batch: one key per row required");
  UserBatch b;
  b.x_binary = binary_rows(rows, n_items);
  b.x_norm = b.x_binary;
  b.obs_weights = b.x_binary;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto n = static_cast<double>(rows[r]->size());
    if (n > 0) {
      b.x_norm.row(static_cast<Eigen::Index>(r)) /= std::sqrt(n);
      b.obs_weights.row(static_cast<Eigen::Index>(r)) /= n;
    }
  }
  b.keys.assign(keys.begin(), keys.end());
  return b;
}

UserBatch make_batch(const std::vector<ItemList>& rows, std::size_t n_items) {
  std::vector<const ItemList*> ptrs;
  std::vector<std::uint64_t> keys;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ptrs.push_back(&rows[i]);
    keys.push_back(i);
  }
  return make_batch(ptrs, n_items, keys);
}

UnrolledVars unroll(Graph& g, const ModelConfig& config, const UserBatch& batch, std::size_t T, UnrollMode mode,
                    std::uint64_t noise_key) {
  const auto& rec = config.recommender;
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (batch.x_norm.rows() != n || as_size(batch.x_norm.cols()) != rec.n_items) {
    throw ShapeError("unroll: batch does not match the model's item vocabulary");
  }
  UnrolledVars out;
  Var x = g.constant(batch.x_norm);
  out.v0 = g.constant(Matrix::Zero(n, static_cast<Eigen::Index>(rec.feedback_dim)));
  Var v = out.v0;

  // Train mode corrupts the observation once per trajectory: the policy sees
  // the dropped-out x at every step and the fusion sees the same surviving
  // items, so the feedback channel cannot leak what dropout removed.
  Matrix drop;
  const Matrix* drop_ptr = nullptr;
  Matrix corrupted_obs;
  const Matrix* obs = &batch.obs_weights;
  if (mode == UnrollMode::train && rec.input_dropout_rate > 0.0) {
    std::vector<std::uint64_t> drop_keys(batch.size());
    for (std::size_t u = 0; u < batch.size(); ++u) drop_keys[u] = mix_key({noise_key, batch.keys[u], kDropoutTag});
    drop = dropout_mask(drop_keys, rec.n_items, rec.input_dropout_rate);
    drop_ptr = &drop;
    corrupted_obs = batch.x_binary.cwiseProduct((drop.array() > 0.0).cast<double>().matrix());
    for (Eigen::Index r = 0; r < n; ++r) {
      const double kept = corrupted_obs.row(r).sum();
      if (kept > 0.0) corrupted_obs.row(r) /= kept;
    }
    obs = &corrupted_obs;
  }

  const std::size_t n_steps = std::max<std::size_t>(T, 1);
  out.steps.reserve(n_steps);
  for (std::size_t t = 1; t <= n_steps; ++t) {
    Matrix noise;
    const Matrix* noise_ptr = nullptr;
    if (mode == UnrollMode::train) {
      std::vector<std::uint64_t> noise_keys(batch.size());
      for (std::size_t u = 0; u < batch.size(); ++u) noise_keys[u] = mix_key({noise_key, batch.keys[u], t, kLatentTag});
      noise = gaussian_noise(noise_keys, rec.latent);
      noise_ptr = &noise;
    }
    StepVars step;
    step.policy = policy_forward(g, rec, x, v, mode == UnrollMode::train ? LatentMode::sample : LatentMode::mean,
                                 drop_ptr, noise_ptr);
    if (T > 0) {
      step.fused = fuse(g, *obs, step.policy.preference);
      step.reward_logit = reward_logit(g, step.fused);
      step.reward = ops::sigmoid(step.reward_logit);
      step.feedback = ops::normalize_rows(generate_feedback(g, step.fused, step.reward));
      v = step.feedback;
    }
    out.steps.push_back(step);
  }
  return out;
}

Trajectory unroll(const ModelBundle& model, const ItemList& x_row, std::size_t T, UnrollMode mode,
                  std::uint64_t noise_key) {
  const ItemList* row = &x_row;
  const std::uint64_t key = 0;
  UserBatch batch = make_batch(std::span<const ItemList* const>(&row, 1), model.config.recommender.n_items,
                               std::span<const std::uint64_t>(&key, 1));
  Graph g(model.params, /*record=*/false);
  UnrolledVars vars = unroll(g, model.config, batch, T, mode, noise_key);
  Trajectory out;
  out.v0 = vars.v0.value().row(0);
  if (T > 0) {
    for (const auto& s : vars.steps) {
      out.steps.push_back({s.policy.preference.value().row(0), s.feedback.value().row(0), s.reward.value()(0, 0)});
    }
  }
  out.final_preference = vars.last().policy.preference.value().row(0);
  return out;
}

Matrix infer_preferences(const ModelBundle& model, const UserBatch& batch, std::size_t T) {
  Graph g(model.params, /*record=*/false);
  return unroll(g, model.config, batch, T, UnrollMode::eval).last().policy.preference.value();
}

CollaborativeTerms loss_collaborative(Graph& g, const ModelConfig& config, const UserBatch& batch, std::size_t T,
                                      double beta, double entropy_weight, UnrollMode mode, std::uint64_t noise_key) {
  if (batch.size() == 0) throw ContractError("loss_collaborative: empty batch");
  if (T == 0) throw ContractError("loss_collaborative: needs at least one unrolled step");
  g.freeze(Owner::phi);

  CollaborativeTerms terms;
  terms.trajectory = unroll(g, config, batch, T, mode, noise_key);
  const StepVars& last = terms.trajectory.last();
  terms.elbo_sum = elbo_loss(g, batch.x_binary, last.policy.logits, last.policy.enc, beta);
  terms.mean_log_reward = ops::mean(ops::log_sigmoid(last.reward_logit));
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  terms.entropy = ops::scale(ops::sum(ops::mul(last.policy.preference, ops::log_softmax(last.policy.logits))), -inv_n);
  terms.total = ops::sub(terms.elbo_sum, terms.mean_log_reward);
  if (entropy_weight != 0.0) terms.total = ops::sub(terms.total, ops::scale(terms.entropy, entropy_weight));
  return terms;
}

Matrix expert_actions(const UserBatch& batch) {
  Matrix a = batch.x_binary;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double n = a.row(r).sum();
    if (n > 0) a.row(r) /= n;
  }
  return a;
}

AdversarialTerms loss_adversarial(Graph& g, const UserBatch& expert, const UserBatch& policy,
                                  const Matrix& policy_actions) {
  if (expert.size() == 0 || policy.size() == 0) throw ContractError("loss_adversarial: empty batch");
  if (policy_actions.rows() != static_cast<Eigen::Index>(policy.size())) {
    throw ShapeError("loss_adversarial: one action row per policy user required");
  }
  g.freeze(Owner::theta);
  g.freeze(Owner::psi);
  g.freeze(Owner::fusion);

  Var expert_logit = reward_logit(g, fuse(g, expert.obs_weights, g.constant(expert_actions(expert))));
  Var policy_logit = reward_logit(g, fuse(g, policy.obs_weights, g.constant(policy_actions)));

  AdversarialTerms terms;
  terms.objective = ops::add(ops::mean(ops::log_sigmoid(expert_logit)),
                             ops::mean(ops::log_sigmoid(ops::scale(policy_logit, -1.0))));
  terms.mean_reward_expert = activate(expert_logit.value(), Activation::sigmoid).mean();
  terms.mean_reward_policy = activate(policy_logit.value(), Activation::sigmoid).mean();
  return terms;
}

Var recommender_weight_penalty(Graph& g) {
  const ParamSet* params = g.params();
  if (params == nullptr) throw ContractError("graph has no bound parameters");
  Var total;
  for (const auto& name : params->names(Owner::theta)) {
    if (!name.ends_with(".W")) continue;
    Var term = ops::sum_squares(g.param(name));
    total = total.valid() ? ops::add(total, term) : term;
  }
  if (!total.valid()) total = g.constant(Matrix::Zero(1, 1));
  return total;
}

// ---------------------------------------------------------------------------
// Training

void TrainingConfig::validate() const {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  if (T == 0 && stage3_epochs > 0) throw ParameterError("stage 3 needs T >= 1");
  if (!(l2_penalty >= 0.0)) throw ParameterError("l2_penalty must be >= 0");
  if (!(adam.lr > 0.0)) throw ParameterError("learning rate must be positive");
}

TrainingDiverged::TrainingDiverged(int stage_, std::size_t epoch_, std::size_t batch_, const std::string& what)
    : NumericError("non-finite " + what + " at stage " + std::to_string(stage_) + ", epoch " + std::to_string(epoch_) +
                   ", batch " + std::to_string(batch_)),
      stage(stage_),
      epoch(epoch_),
      batch(batch_) {}

namespace {

class Trainer {
 public:
  Trainer(const TrainingConfig& config, const InteractionMatrix& data, ModelBundle& model, const TrainHooks& hooks,
          std::vector<LossReport>& reports)
      : cfg_(config), data_(data), model_(model), hooks_(hooks), reports_(reports) {
    for (std::size_t u = 0; u < data.n_users; ++u) {
      if (!data.rows[u].empty()) users_.push_back(u);
    }
    if (users_.empty()) throw DataError("no training user has any interaction");
    n_batches_ = (users_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  void stage1() {
    AdamState adam{cfg_.adam, 0, {}, {}};
    const std::size_t total_updates = cfg_.stage1_epochs * n_batches_;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg_.stage1_epochs; ++epoch) {
      const auto order = epoch_order(1, epoch);
      double elbo_total = 0.0;
      for (std::size_t b = 0; b < n_batches_; ++b) {
        const UserBatch batch = batch_at(order, b);
        const double beta = beta_at(model_.config.recommender, step++, total_updates);
        Graph g(model_.params);
        g.freeze(Owner::phi);
        g.freeze(Owner::psi);
        g.freeze(Owner::fusion);
        const auto vars = unroll(g, model_.config, batch, 0, UnrollMode::train, noise_key(1, epoch, b));
        const auto& policy = vars.last().policy;
        Var elbo = elbo_loss(g, batch.x_binary, policy.logits, policy.enc, beta);
        Var loss = add_penalty(g, elbo);
        require_finite(loss, 1, epoch, b, "stage-1 loss");
        g.backward(loss);
        adam_step(model_.params, g.gradients().restricted_to(model_.params, {Owner::theta}), adam);
        elbo_total += elbo.scalar();
      }
      LossReport r{epoch, 1, 0.0, 0.0, 0.0, 0.0, 0.0, std::nullopt};
      r.loss_rec = elbo_total / static_cast<double>(users_.size());
      finish_epoch(r, 1);
    }
    end_stage(1);
  }

  void stage2() {
    AdamState adam{cfg_.adam, 0, {}, {}};
    for (std::size_t epoch = 1; epoch <= cfg_.stage2_epochs; ++epoch) {
      const auto order = epoch_order(2, epoch);
      Accumulator acc;
      for (std::size_t b = 0; b < n_batches_; ++b) {
        const UserBatch batch = batch_at(order, b);
        discriminator_step(batch, infer_preferences(model_, batch, 0), adam, 2, epoch, b, acc);
      }
      LossReport r{epoch, 2, 0.0, 0.0, 0.0, 0.0, 0.0, std::nullopt};
      acc.fill(r, n_batches_);
      finish_epoch(r, 2);
    }
    end_stage(2);
  }

  void stage3() {
    AdamState gen_adam{cfg_.adam, 0, {}, {}};
    AdamState disc_adam{cfg_.adam, 0, {}, {}};
    const double beta = model_.config.recommender.beta_max;
    for (std::size_t epoch = 1; epoch <= cfg_.stage3_epochs; ++epoch) {
      const auto order = epoch_order(3, epoch);
      Accumulator acc;
      double elbo_total = 0.0;
      for (std::size_t b = 0; b < n_batches_; ++b) {
        const UserBatch batch = batch_at(order, b);
        Matrix policy_actions;
        {
          Graph g(model_.params);
          const auto terms = loss_collaborative(g, model_.config, batch, cfg_.T, beta, cfg_.entropy_weight,
                                                UnrollMode::train, noise_key(3, epoch, b));
          Var loss = add_penalty(g, terms.total);
          require_finite(loss, 3, epoch, b, "collaborative loss");
          g.backward(loss);
          adam_step(model_.params,
                    g.gradients().restricted_to(model_.params, {Owner::theta, Owner::psi, Owner::fusion}), gen_adam);
          elbo_total += terms.elbo_sum.scalar();
          acc.collab += terms.total.scalar();
          policy_actions = terms.trajectory.last().policy.preference.value();
        }
        discriminator_step(batch, policy_actions, disc_adam, 3, epoch, b, acc);
      }
      LossReport r{epoch, 3, 0.0, 0.0, 0.0, 0.0, 0.0, std::nullopt};
      r.loss_rec = elbo_total / static_cast<double>(users_.size());
      acc.fill(r, n_batches_);
      finish_epoch(r, 3);
    }
    end_stage(3);
  }

 private:
  struct Accumulator {
    double collab = 0.0;
    double adv = 0.0;
    double reward_expert = 0.0;
    double reward_policy = 0.0;

    void fill(LossReport& r, std::size_t n) const {
      const auto d = static_cast<double>(n);
      r.loss_collab = collab / d;
      r.loss_adv = adv / d;
      r.mean_reward_expert = reward_expert / d;
      r.mean_reward_policy = reward_policy / d;
    }
  };

  // Expert and policy pairs share the batch's observations; only the
  // action differs (x/|x| versus the recommender's output).
  void discriminator_step(const UserBatch& batch, const Matrix& actions, AdamState& adam, int stage,
                          std::size_t epoch, std::size_t b, Accumulator& acc) {
    Graph g(model_.params);
    const auto terms = loss_adversarial(g, batch, batch, actions);
    Var loss = ops::scale(terms.objective, -1.0);
    require_finite(loss, stage, epoch, b, "adversarial objective");
    g.backward(loss);
    adam_step(model_.params, g.gradients().restricted_to(model_.params, {Owner::phi}), adam);
    acc.adv += terms.objective.scalar();
    acc.reward_expert += terms.mean_reward_expert;
    acc.reward_policy += terms.mean_reward_policy;
  }

  Var add_penalty(Graph& g, Var loss) const {
    if (cfg_.l2_penalty == 0.0) return loss;
    return ops::add(loss, ops::scale(recommender_weight_penalty(g), cfg_.l2_penalty));
  }

  static void require_finite(Var loss, int stage, std::size_t epoch, std::size_t batch, const std::string& what) {
    if (!std::isfinite(loss.scalar())) throw TrainingDiverged(stage, epoch, batch, what);
  }

  std::vector<std::size_t> epoch_order(int stage, std::size_t epoch) const {
    std::vector<std::size_t> order = users_;
    CounterRng rng{cfg_.seed, kEpochTag, static_cast<std::uint64_t>(stage), epoch};
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
  }

  UserBatch batch_at(const std::vector<std::size_t>& order, std::size_t b) const {
    const std::size_t begin = b * cfg_.batch_size;
    const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
    std::vector<const ItemList*> rows;
    std::vector<std::uint64_t> keys;
    for (std::size_t k = begin; k < end; ++k) {
      rows.push_back(&data_.rows[order[k]]);
      keys.push_back(order[k]);
    }
    return make_batch(rows, data_.n_items, keys);
  }

  std::uint64_t noise_key(int stage, std::size_t epoch, std::size_t batch) const {
    return mix_key({cfg_.seed, kBatchTag, static_cast<std::uint64_t>(stage), epoch, batch});
  }

  void finish_epoch(LossReport& r, int stage) {
    if (hooks_.validate && stage != 2) r.val_ndcg100 = hooks_.validate(model_, stage);
    reports_.push_back(r);
    if (hooks_.on_epoch) hooks_.on_epoch(r);
  }

  void end_stage(int stage) {
    round_to_storage_precision(model_.params);
    if (hooks_.on_stage_end) hooks_.on_stage_end(stage, model_);
  }

  const TrainingConfig& cfg_;
  const InteractionMatrix& data_;
  ModelBundle& model_;
  const TrainHooks& hooks_;
  std::vector<LossReport>& reports_;
  std::vector<std::size_t> users_;
  std::size_t n_batches_ = 0;
};

}  // namespace

TrainResult train(const TrainingConfig& config, const InteractionMatrix& train_data, ModelBundle model,
                  int first_stage, const TrainHooks& hooks) {
  config.validate();
  model.config.validate();
  if (train_data.n_items != model.config.recommender.n_items) {
    throw ShapeError("training data has " + std::to_string(train_data.n_items) + " items, model expects " +
                     std::to_string(model.config.recommender.n_items));
  }
  if (first_stage < 1 || first_stage > 4) throw ParameterError("first_stage must lie in [1, 4]");

  TrainResult result;
  Trainer trainer(config, train_data, model, hooks, result.reports);
  if (first_stage <= 1) trainer.stage1();
  if (first_stage <= 2) trainer.stage2();
  if (first_stage <= 3) trainer.stage3();
  result.model = std::move(model);
  return result;
}

}  // namespace cfsfl
