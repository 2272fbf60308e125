#pragma once

// The recommender policy: a multinomial VAE (or denoising autoencoder) over
// the concatenated user state [x_norm; v], plus top-k selection.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cfsfl/dataio.hpp"
#include "cfsfl/diffcore.hpp"

namespace cfsfl {

enum class RecommenderKind { vae, dae };
enum class LatentMode { sample, mean };

std::string_view to_string(RecommenderKind kind);
RecommenderKind recommender_kind_from_string(std::string_view s);

struct RecommenderConfig {
  RecommenderKind kind = RecommenderKind::vae;
  std::size_t n_items = 0;
  std::size_t feedback_dim = 128;
  std::size_t hidden = 600;
  std::size_t latent = 200;
  double input_dropout_rate = 0.5;
  double beta_max = 0.2;
  // 0 means "anneal over the whole pre-training stage".
  std::size_t beta_anneal_steps = 0;

  void validate() const;
  std::size_t input_width() const { return n_items + feedback_dim; }
};

/// Policy input for one user: the observation scaled to unit L2 norm and the
/// feedback embedding (unit norm, or all zeros).
struct UserState {
  Eigen::RowVectorXd x_norm;
  Eigen::RowVectorXd v;
};

UserState make_user_state(const ItemList& items, std::size_t n_items, const Eigen::RowVectorXd& v);

// Batch builders; one row per user.
Matrix binary_rows(std::span<const ItemList* const> rows, std::size_t n_items);
Matrix unit_norm_rows(std::span<const ItemList* const> rows, std::size_t n_items);

// Entries 0 or 1/(1-rate), one independent stream per row key.
Matrix dropout_mask(std::span<const std::uint64_t> row_keys, std::size_t cols, double rate);
// Standard normal entries, one independent stream per row key.
Matrix gaussian_noise(std::span<const std::uint64_t> row_keys, std::size_t cols);

/// Adds theta.* parameters. Names: theta.enc (input -> hidden, tanh),
/// theta.mu / theta.logvar (hidden -> latent) or theta.code for the DAE,
/// theta.dec1 (latent -> hidden, tanh), theta.dec2 (hidden -> items).
void add_recommender_params(ParamSet& params, const RecommenderConfig& config, CounterRng& rng);

struct Encoded {
  Var mu;
  Var logvar;  // invalid for the DAE
};

/// [x_norm; v] -> hidden tanh -> (mu, logvar). `dropout` (same shape as
/// x_norm, may be null) multiplies x_norm only.
Encoded encode(Graph& g, const RecommenderConfig& config, Var x_norm, Var v, const Matrix* dropout);

/// mu + exp(logvar / 2) * noise in sample mode, mu in mean mode. The DAE code
/// passes through unchanged.
Var reparameterize(Graph& g, const Encoded& enc, LatentMode mode, const Matrix* noise);

/// z -> hidden tanh -> item logits. softmax(logits) is the preference vector.
Var decode_logits(Graph& g, Var z);
Var decode(Graph& g, Var z);

struct PolicyOutput {
  Encoded enc;
  Var z;
  Var logits;
  Var preference;
};

PolicyOutput policy_forward(Graph& g, const RecommenderConfig& config, Var x_norm, Var v, LatentMode mode,
                            const Matrix* dropout, const Matrix* noise);

/// Summed over batch rows: -sum_{j in x} log softmax(logits)_j + beta * KL.
/// `x_binary` holds the indicator rows. Throws ContractError on an empty row.
Var elbo_loss(Graph& g, const Matrix& x_binary, Var logits, const Encoded& enc, double beta);

// Per-row KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 sum(exp(lv) + mu^2 - 1 - lv).
Var kl_divergence(Graph& g, const Encoded& enc);

/// Linear warm-up of the KL weight.
double beta_at(const RecommenderConfig& config, std::size_t step, std::size_t default_anneal_steps);

struct TopK {
  std::vector<ItemIndex> items;
  bool short_list = false;  // fewer than k candidates were available
};

/// The k highest scores outside `history` (ascending item indices), by
/// descending score with ties to the lower index.
TopK recommend_top_k(std::span<const double> scores, const ItemList& history, std::size_t k);

}  // namespace cfsfl
