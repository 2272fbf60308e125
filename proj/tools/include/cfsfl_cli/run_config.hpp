#pragma once

// Flat dotted-key run configuration shared by every verb. JSON files and
// --set overrides use the same keys; every key has a default and unknown
// keys are rejected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfsfl/dataio.hpp"
#include "cfsfl/loop_engine.hpp"

namespace cfsfl::cli {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;

  std::string data_input;       // data.input: interaction CSV for prep
  std::string data_dir = "data";  // data.dir: prepared dataset directory
  std::string output_dir = "run";  // output.dir: checkpoints and metrics

  bool prep_synthetic = false;
  double prep_rating_threshold = 4.0;
  std::size_t prep_min_items_per_user = 5;
  std::size_t prep_min_users_per_item = 0;

  std::size_t synthetic_n_users = 2000;
  std::size_t synthetic_n_items = 300;
  std::size_t synthetic_rank = 8;
  double synthetic_avg_items_per_user = 20.0;

  std::size_t split_n_val_users = 200;
  std::size_t split_n_test_users = 200;
  double split_fold_in_fraction = 0.8;

  std::string model_kind = "vae";
  std::size_t model_hidden = 600;
  std::size_t model_latent = 200;
  std::size_t model_feedback_dim = 128;
  std::size_t model_fusion_dim = 64;
  std::size_t model_reward_hidden = 128;
  double model_input_dropout_rate = 0.5;
  double model_beta_max = 0.2;
  std::size_t model_beta_anneal_steps = 0;

  std::size_t train_T = 8;
  std::size_t train_batch_size = 500;
  std::size_t train_stage1_epochs = 150;
  std::size_t train_stage2_epochs = 10;
  std::size_t train_stage3_epochs = 50;
  double train_entropy_weight = 0.0;
  double train_l2_penalty = 0.01;
  double train_lr = 1e-3;
  double train_beta1 = 0.9;
  double train_beta2 = 0.999;
  double train_epsilon = 1e-8;
  bool train_validate = true;

  std::vector<std::size_t> eval_k_list{20, 50, 100};
  std::vector<std::size_t> eval_T_list;  // empty: use train.T
  std::string eval_split = "test";
  std::size_t eval_batch_size = 500;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  // Applies "key=value" using the key's type; throws ConfigError.
  void set(const std::string& key, const std::string& value);
  void set(const std::string& assignment);
  nlohmann::json to_json() const;
  static std::vector<std::string> keys();

  PreprocessOptions preprocess_options() const;
  SplitOptions split_options() const;
  SyntheticOptions synthetic_options() const;
  ModelConfig model_config(std::size_t n_items) const;
  TrainingConfig training_config() const;
  // Throws ConfigError on out-of-range values.
  void validate() const;
};

}  // namespace cfsfl::cli
