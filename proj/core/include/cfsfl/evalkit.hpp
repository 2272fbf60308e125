#pragma once

// Top-k ranking metrics with binary relevance and the held-out user
// evaluation protocol.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cfsfl/dataio.hpp"
#include "cfsfl/loop_engine.hpp"

namespace cfsfl {

enum class Metric { recall, ndcg };

std::string_view to_string(Metric m);

struct MetricResult {
  Metric metric = Metric::recall;
  std::size_t k = 0;
  double value = 0.0;
  std::size_t n_users_evaluated = 0;
  bool operator==(const MetricResult&) const = default;
};

/// |top-k ∩ relevant| / min(k, |relevant|). nullopt signals "skip this user"
/// (empty relevant set). `relevant` need not be sorted.
std::optional<double> recall_at_k(std::span<const ItemIndex> ranked, std::span<const ItemIndex> relevant, std::size_t k);

/// DCG over the first k positions with gains 1/log2(p+1), divided by the DCG
/// of min(k, |relevant|) leading hits.
std::optional<double> ndcg_at_k(std::span<const ItemIndex> ranked, std::span<const ItemIndex> relevant, std::size_t k);

struct EvaluationResult {
  std::vector<MetricResult> metrics;  // recall@k then ndcg@k for each k, in k_list order
  std::size_t skipped_users = 0;

  // Throws ContractError when the (metric, k) pair was not evaluated.
  double value(Metric metric, std::size_t k) const;
};

/// Scores for a batch of held-out users, one row per user over all items.
using BatchScorer = std::function<Matrix(std::span<const HeldOutUser> users)>;

struct EvaluationOptions {
  std::size_t batch_size = 500;
  // 0 uses worker_threads().
  std::size_t threads = 0;
};

/// Ranks all items except each user's fold-in items and scores the ranking
/// against the held-out items. Users with no held-out items are skipped and
/// counted. Per-user results are summed in user order, so the outcome does
/// not depend on the thread count.
EvaluationResult evaluate_rankings(const BatchScorer& scorer, const std::vector<HeldOutUser>& users,
                                   std::size_t n_items, std::span<const std::size_t> k_list,
                                   const EvaluationOptions& options = {});

/// evaluate_rankings with the model's final preference after a T-step
/// eval-mode unroll from the fold-in items.
EvaluationResult evaluate_model(const ModelBundle& model, const std::vector<HeldOutUser>& users, std::size_t T,
                                std::span<const std::size_t> k_list, const EvaluationOptions& options = {});

/// Worker cap: CFSFL_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t worker_threads();

}  // namespace cfsfl
