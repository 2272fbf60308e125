#include "cfsfl_cli/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <variant>

#include "cfsfl/errors.hpp"

namespace cfsfl::cli {

namespace {

struct Unused {};
// size_t and uint64_t coincide on LP64 platforms; keep the alternatives distinct.
using SizeSlot = std::conditional_t<std::is_same_v<std::size_t, std::uint64_t>, Unused*, std::size_t*>;
using Slot = std::variant<std::uint64_t*, SizeSlot, double*, bool*, std::string*, std::vector<std::size_t>*>;

struct Field {
  const char* key;
  Slot slot;
};

template <typename Config>
std::vector<Field> fields(Config& c) {
  return {
      {"seed", &c.seed},
      {"data.input", &c.data_input},
      {"data.dir", &c.data_dir},
      {"output.dir", &c.output_dir},
      {"prep.synthetic", &c.prep_synthetic},
      {"prep.rating_threshold", &c.prep_rating_threshold},
      {"prep.min_items_per_user", &c.prep_min_items_per_user},
      {"prep.min_users_per_item", &c.prep_min_users_per_item},
      {"synthetic.n_users", &c.synthetic_n_users},
      {"synthetic.n_items", &c.synthetic_n_items},
      {"synthetic.rank", &c.synthetic_rank},
      {"synthetic.avg_items_per_user", &c.synthetic_avg_items_per_user},
      {"split.n_val_users", &c.split_n_val_users},
      {"split.n_test_users", &c.split_n_test_users},
      {"split.fold_in_fraction", &c.split_fold_in_fraction},
      {"model.kind", &c.model_kind},
      {"model.hidden", &c.model_hidden},
      {"model.latent", &c.model_latent},
      {"model.feedback_dim", &c.model_feedback_dim},
      {"model.fusion_dim", &c.model_fusion_dim},
      {"model.reward_hidden", &c.model_reward_hidden},
      {"model.input_dropout_rate", &c.model_input_dropout_rate},
      {"model.beta_max", &c.model_beta_max},
      {"model.beta_anneal_steps", &c.model_beta_anneal_steps},
      {"train.T", &c.train_T},
      {"train.batch_size", &c.train_batch_size},
      {"train.stage1_epochs", &c.train_stage1_epochs},
      {"train.stage2_epochs", &c.train_stage2_epochs},
      {"train.stage3_epochs", &c.train_stage3_epochs},
      {"train.entropy_weight", &c.train_entropy_weight},
      {"train.l2_penalty", &c.train_l2_penalty},
      {"train.lr", &c.train_lr},
      {"train.beta1", &c.train_beta1},
      {"train.beta2", &c.train_beta2},
      {"train.epsilon", &c.train_epsilon},
      {"train.validate", &c.train_validate},
      {"eval.k_list", &c.eval_k_list},
      {"eval.T_list", &c.eval_T_list},
      {"eval.split", &c.eval_split},
      {"eval.batch_size", &c.eval_batch_size},
  };
}

Field* find(std::vector<Field>& fs, const std::string& key) {
  for (auto& f : fs) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return value;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
  }
  return out;
}

bool non_negative_integer(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

void assign_json(const Field& f, const nlohmann::json& v) {
  const std::string key = f.key;
  try {
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Unused>) {
          } else if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(key + " must be a boolean");
            *p = v.get<bool>();
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(key + " must be a string");
            *p = v.get<std::string>();
          } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError(key + " must be a number");
            *p = v.get<double>();
          } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
            if (!v.is_array()) throw ConfigError(key + " must be an array of non-negative integers");
            p->clear();
            for (const auto& e : v) {
              if (!non_negative_integer(e)) throw ConfigError(key + " must be an array of non-negative integers");
              p->push_back(e.get<std::size_t>());
            }
          } else {
            if (!non_negative_integer(v)) throw ConfigError(key + " must be a non-negative integer");
            *p = v.get<T>();
          }
        },
        f.slot);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  RunConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.emplace_back(f.key);
  return out;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object with flat dotted keys");
  RunConfig c;
  auto fs = fields(c);
  for (const auto& [key, value] : j.items()) {
    Field* f = find(fs, key);
    if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
    assign_json(*f, value);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto fs = fields(*this);
  Field* f = find(fs, key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Unused>) {
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value == "true" || value == "1") {
            *p = true;
          } else if (value == "false" || value == "0") {
            *p = false;
          } else {
            throw ConfigError("invalid boolean '" + value + "' for " + key);
          }
        } else if constexpr (std::is_same_v<T, std::string>) {
          *p = value;
        } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
          *p = parse_list(key, value);
        } else {
          *p = parse_number<T>(key, value);
        }
      },
      f->slot);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  auto& self = const_cast<RunConfig&>(*this);
  for (const auto& f : fields(self)) {
    std::visit(
        [&](auto* p) {
          if constexpr (!std::is_same_v<std::remove_pointer_t<decltype(p)>, Unused>) j[f.key] = *p;
        },
        f.slot);
  }
  return j;
}

PreprocessOptions RunConfig::preprocess_options() const {
  return {prep_rating_threshold, prep_min_items_per_user, prep_min_users_per_item};
}

SplitOptions RunConfig::split_options() const {
  return {split_n_val_users, split_n_test_users, split_fold_in_fraction, seed};
}

SyntheticOptions RunConfig::synthetic_options() const {
  return {synthetic_n_users, synthetic_n_items, synthetic_rank, synthetic_avg_items_per_user, seed};
}

ModelConfig RunConfig::model_config(std::size_t n_items) const {
  ModelConfig m = ModelConfig::for_items(n_items);
  try {
    m.recommender.kind = recommender_kind_from_string(model_kind);
  } catch (const std::exception&) {
    throw ConfigError("model.kind must be 'vae' or 'dae', got '" + model_kind + "'");
  }
  m.recommender.hidden = model_hidden;
  m.recommender.latent = model_latent;
  m.recommender.feedback_dim = model_feedback_dim;
  m.recommender.input_dropout_rate = model_input_dropout_rate;
  m.recommender.beta_max = model_beta_max;
  m.recommender.beta_anneal_steps = model_beta_anneal_steps;
  m.virtual_user.feedback_dim = model_feedback_dim;
  m.virtual_user.fusion_dim = model_fusion_dim;
  m.virtual_user.reward_hidden = model_reward_hidden;
  return m;
}

TrainingConfig RunConfig::training_config() const {
  TrainingConfig t;
  t.T = train_T;
  t.batch_size = train_batch_size;
  t.stage1_epochs = train_stage1_epochs;
  t.stage2_epochs = train_stage2_epochs;
  t.stage3_epochs = train_stage3_epochs;
  t.entropy_weight = train_entropy_weight;
  t.l2_penalty = train_l2_penalty;
  t.seed = seed;
  t.adam = {train_lr, train_beta1, train_beta2, train_epsilon};
  return t;
}

void RunConfig::validate() const {
  try {
    model_config(1).validate();
    training_config().validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (!(split_fold_in_fraction > 0.0 && split_fold_in_fraction < 1.0)) {
    throw ConfigError("split.fold_in_fraction must lie in (0, 1)");
  }
  if (eval_k_list.empty()) throw ConfigError("eval.k_list must not be empty");
  for (auto k : eval_k_list) {
    if (k == 0) throw ConfigError("eval.k_list entries must be >= 1");
  }
  if (eval_split != "test" && eval_split != "validation") throw ConfigError("eval.split must be 'test' or 'validation'");
  if (eval_batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
}

}  // namespace cfsfl::cli
