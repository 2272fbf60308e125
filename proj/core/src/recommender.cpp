#include "cfsfl/recommender.hpp"

#include <algorithm>
#include <cmath>

namespace cfsfl {

std::string_view to_string(RecommenderKind kind) { return kind == RecommenderKind::vae ? "vae" : "dae"; }

RecommenderKind recommender_kind_from_string(std::string_view s) {
  if (s == "vae") return RecommenderKind::vae;
  if (s == "dae") return RecommenderKind::dae;
  throw ParameterError("unknown recommender kind '" + std::string(s) + "' (expected vae or dae)");
}

void RecommenderConfig::validate() const {
  if (n_items == 0 || feedback_dim == 0 || hidden == 0 || latent == 0) {
    throw ParameterError("recommender dimensions must be positive");
  }
  if (!(input_dropout_rate >= 0.0 && input_dropout_rate < 1.0)) {
    throw ParameterError("input_dropout_rate must lie in [0, 1)");
  }
  if (!(beta_max >= 0.0)) throw ParameterError("beta_max must be >= 0");
}

UserState make_user_state(const ItemList& items, std::size_t n_items, const Eigen::RowVectorXd& v) {
  UserState s;
  s.x_norm = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(n_items));
  if (!items.empty()) {
    const double w = 1.0 / std::sqrt(static_cast<double>(items.size()));
    for (auto i : items) s.x_norm(i) = w;
  }
  const double n = v.norm();
  s.v = n > 0.0 ? Eigen::RowVectorXd(v / n) : Eigen::RowVectorXd::Zero(v.size());
  return s;
}

Matrix binary_rows(std::span<const ItemList* const> rows, std::size_t n_items) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_items));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (auto i : *rows[r]) {
      if (i < 0 || static_cast<std::size_t>(i) >= n_items) throw ShapeError("item index outside vocabulary");
      x(static_cast<Eigen::Index>(r), i) = 1.0;
    }
  }
  return x;
}

Matrix unit_norm_rows(std::span<const ItemList* const> rows, std::size_t n_items) {
  Matrix x = binary_rows(rows, n_items);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!rows[r]->empty()) x.row(static_cast<Eigen::Index>(r)) /= std::sqrt(static_cast<double>(rows[r]->size()));
  }
  return x;
}

Matrix dropout_mask(std::span<const std::uint64_t> row_keys, std::size_t cols, double rate) {
  Matrix m(static_cast<Eigen::Index>(row_keys.size()), static_cast<Eigen::Index>(cols));
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t r = 0; r < row_keys.size(); ++r) {
    CounterRng rng(row_keys[r]);
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.uniform() < rate ? 0.0 : keep_scale;
    }
  }
  return m;
}

Matrix gaussian_noise(std::span<const std::uint64_t> row_keys, std::size_t cols) {
  Matrix m(static_cast<Eigen::Index>(row_keys.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < row_keys.size(); ++r) {
    CounterRng rng(row_keys[r]);
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rng.normal();
  }
  return m;
}

void add_recommender_params(ParamSet& params, const RecommenderConfig& config, CounterRng& rng) {
  config.validate();
  add_dense_params(params, "theta.enc", Owner::theta, config.input_width(), config.hidden, Activation::tanh, rng);
  if (config.kind == RecommenderKind::vae) {
    add_dense_params(params, "theta.mu", Owner::theta, config.hidden, config.latent, Activation::identity, rng);
    add_dense_params(params, "theta.logvar", Owner::theta, config.hidden, config.latent, Activation::identity, rng);
  } else {
    add_dense_params(params, "theta.code", Owner::theta, config.hidden, config.latent, Activation::tanh, rng);
  }
  add_dense_params(params, "theta.dec1", Owner::theta, config.latent, config.hidden, Activation::tanh, rng);
  add_dense_params(params, "theta.dec2", Owner::theta, config.hidden, config.n_items, Activation::identity, rng);
}

Encoded encode(Graph& g, const RecommenderConfig& config, Var x_norm, Var v, const Matrix* dropout) {
  if (static_cast<std::size_t>(x_norm.cols()) != config.n_items ||
      static_cast<std::size_t>(v.cols()) != config.feedback_dim || x_norm.rows() != v.rows()) {
    throw ShapeError("encode: state is " + std::to_string(x_norm.rows()) + "x" + std::to_string(x_norm.cols()) +
                     " / " + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) + ", expected n x " +
                     std::to_string(config.n_items) + " / n x " + std::to_string(config.feedback_dim));
  }
  Var x = dropout != nullptr ? ops::mul_const(x_norm, *dropout) : x_norm;
  Var hidden = dense(g, ops::concat_cols(x, v), "theta.enc", Activation::tanh);
  if (config.kind == RecommenderKind::dae) return {dense(g, hidden, "theta.code", Activation::tanh), Var{}};
  return {dense(g, hidden, "theta.mu", Activation::identity), dense(g, hidden, "theta.logvar", Activation::identity)};
}

Var reparameterize(Graph& g, const Encoded& enc, LatentMode mode, const Matrix* noise) {
  (void)g;
  if (mode == LatentMode::mean || !enc.logvar.valid()) return enc.mu;
  if (noise == nullptr) throw ContractError("sample mode needs a noise matrix");
  if (noise->rows() != enc.mu.rows() || noise->cols() != enc.mu.cols()) throw ShapeError("noise shape mismatch");
  Var sigma = ops::exp(ops::scale(enc.logvar, 0.5));
  return ops::add(enc.mu, ops::mul_const(sigma, *noise));
}

Var decode_logits(Graph& g, Var z) {
  Var hidden = dense(g, z, "theta.dec1", Activation::tanh);
  return dense(g, hidden, "theta.dec2", Activation::identity);
}

Var decode(Graph& g, Var z) { return ops::softmax(decode_logits(g, z)); }

PolicyOutput policy_forward(Graph& g, const RecommenderConfig& config, Var x_norm, Var v, LatentMode mode,
                            const Matrix* dropout, const Matrix* noise) {
  PolicyOutput out;
  out.enc = encode(g, config, x_norm, v, dropout);
  out.z = reparameterize(g, out.enc, mode, noise);
  out.logits = decode_logits(g, out.z);
  out.preference = ops::softmax(out.logits);
  return out;
}

Var kl_divergence(Graph& g, const Encoded& enc) {
  (void)g;
  // 0.5 * (exp(lv) + mu^2 - 1 - lv), summed per row
  Var terms = ops::sub(ops::add(ops::exp(enc.logvar), ops::mul(enc.mu, enc.mu)), ops::add_scalar(enc.logvar, 1.0));
  return ops::scale(ops::row_sum(terms), 0.5);
}

Var elbo_loss(Graph& g, const Matrix& x_binary, Var logits, const Encoded& enc, double beta) {
  if (!(beta >= 0.0)) throw ContractError("elbo_loss: beta must be >= 0");
  if (x_binary.rows() != logits.rows() || x_binary.cols() != logits.cols()) throw ShapeError("elbo_loss: shape mismatch");
  for (Eigen::Index r = 0; r < x_binary.rows(); ++r) {
    if (x_binary.row(r).sum() <= 0.0) throw ContractError("elbo_loss: empty interaction row");
  }
  Var nll = ops::scale(ops::sum(ops::mul_const(ops::log_softmax(logits), x_binary)), -1.0);
  if (!enc.logvar.valid() || beta == 0.0) return nll;
  return ops::add(nll, ops::scale(ops::sum(kl_divergence(g, enc)), beta));
}

double beta_at(const RecommenderConfig& config, std::size_t step, std::size_t default_anneal_steps) {
  const std::size_t span = config.beta_anneal_steps > 0 ? config.beta_anneal_steps : default_anneal_steps;
  if (span == 0) return config.beta_max;
  return config.beta_max * std::min(1.0, static_cast<double>(step) / static_cast<double>(span));
}

TopK recommend_top_k(std::span<const double> scores, const ItemList& history, std::size_t k) {
  if (k == 0) throw ContractError("recommend_top_k: k must be >= 1");
  std::vector<char> excluded(scores.size(), 0);
  for (auto i : history) {
    if (i >= 0 && static_cast<std::size_t>(i) < scores.size()) excluded[static_cast<std::size_t>(i)] = 1;
  }
  std::vector<ItemIndex> candidates;
  candidates.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!excluded[i]) candidates.push_back(static_cast<ItemIndex>(i));
  }
  TopK out;
  out.short_list = candidates.size() < k;
  const std::size_t take = std::min(k, candidates.size());
  auto better = [&](ItemIndex a, ItemIndex b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                    better);
  candidates.resize(take);
  out.items = std::move(candidates);
  return out;
}

}  // namespace cfsfl
