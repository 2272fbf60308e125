#include "cfsfl/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

namespace cfsfl {

std::string_view to_string(Metric m) { return m == Metric::recall ? "recall" : "ndcg"; }

namespace {

std::vector<ItemIndex> sorted_copy(std::span<const ItemIndex> items) {
  std::vector<ItemIndex> s(items.begin(), items.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

bool contains(const std::vector<ItemIndex>& sorted, ItemIndex i) {
  return std::binary_search(sorted.begin(), sorted.end(), i);
}

}  // namespace

std::optional<double> recall_at_k(std::span<const ItemIndex> ranked, std::span<const ItemIndex> relevant,
                                  std::size_t k) {
  if (k == 0) throw ContractError("recall_at_k: k must be >= 1");
  const auto rel = sorted_copy(relevant);
  if (rel.empty()) return std::nullopt;
  std::size_t hits = 0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t p = 0; p < n; ++p) hits += contains(rel, ranked[p]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(std::min(k, rel.size()));
}

std::optional<double> ndcg_at_k(std::span<const ItemIndex> ranked, std::span<const ItemIndex> relevant,
                                std::size_t k) {
  if (k == 0) throw ContractError("ndcg_at_k: k must be >= 1");
  const auto rel = sorted_copy(relevant);
  if (rel.empty()) return std::nullopt;
  double dcg = 0.0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t p = 0; p < n; ++p) {
    if (contains(rel, ranked[p])) dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  }
  double ideal = 0.0;
  const std::size_t m = std::min(k, rel.size());
  for (std::size_t p = 0; p < m; ++p) ideal += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  return dcg / ideal;
}

double EvaluationResult::value(Metric metric, std::size_t k) const {
  for (const auto& m : metrics) {
    if (m.metric == metric && m.k == k) return m.value;
  }
  throw ContractError(std::string(to_string(metric)) + "@" + std::to_string(k) + " was not evaluated");
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("CFSFL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      // ignore malformed values
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

EvaluationResult evaluate_rankings(const BatchScorer& scorer, const std::vector<HeldOutUser>& users,
                                   std::size_t n_items, std::span<const std::size_t> k_list,
                                   const EvaluationOptions& options) {
  if (k_list.empty()) throw ContractError("evaluate: empty k list");
  for (auto k : k_list) {
    if (k == 0) throw ContractError("evaluate: k must be >= 1");
  }
  const std::size_t k_max = *std::max_element(k_list.begin(), k_list.end());
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n_batches = (users.size() + batch_size - 1) / batch_size;

  // per user: recall for each k, then ndcg for each k; NaN marks a skipped user
  const std::size_t width = 2 * k_list.size();
  std::vector<double> per_user(users.size() * width, std::nan(""));

  auto run_batch = [&](std::size_t b) {
    const std::size_t begin = b * batch_size;
    const std::size_t end = std::min(users.size(), begin + batch_size);
    const std::span<const HeldOutUser> chunk(users.data() + begin, end - begin);
    const Matrix scores = scorer(chunk);
    if (scores.rows() != static_cast<Eigen::Index>(chunk.size()) ||
        scores.cols() != static_cast<Eigen::Index>(n_items)) {
      throw ShapeError("scorer returned " + std::to_string(scores.rows()) + "x" + std::to_string(scores.cols()) +
                       " for " + std::to_string(chunk.size()) + " users and " + std::to_string(n_items) + " items");
    }
    for (std::size_t u = 0; u < chunk.size(); ++u) {
      const auto& user = chunk[u];
      if (user.held_out.empty()) continue;
      const Eigen::RowVectorXd row = scores.row(static_cast<Eigen::Index>(u));
      const TopK top = recommend_top_k(std::span<const double>(row.data(), n_items), user.fold_in, k_max);
      double* out = &per_user[(begin + u) * width];
      for (std::size_t j = 0; j < k_list.size(); ++j) {
        out[j] = *recall_at_k(top.items, user.held_out, k_list[j]);
        out[k_list.size() + j] = *ndcg_at_k(top.items, user.held_out, k_list[j]);
      }
    }
  };

  const std::size_t n_threads =
      std::min(n_batches, options.threads > 0 ? options.threads : worker_threads());
  if (n_threads <= 1) {
    for (std::size_t b = 0; b < n_batches; ++b) run_batch(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < n_threads; ++t) {
      workers.emplace_back([&] {
        for (std::size_t b = next++; b < n_batches; b = next++) {
          try {
            run_batch(b);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    workers.clear();
    if (failure) std::rethrow_exception(failure);
  }

  EvaluationResult result;
  std::vector<double> sums(width, 0.0);
  std::size_t evaluated = 0;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const double* row = &per_user[u * width];
    if (std::isnan(row[0])) {
      ++result.skipped_users;
      continue;
    }
    ++evaluated;
    for (std::size_t j = 0; j < width; ++j) sums[j] += row[j];
  }
  const double denom = evaluated > 0 ? static_cast<double>(evaluated) : 1.0;
  for (std::size_t j = 0; j < k_list.size(); ++j) {
    result.metrics.push_back({Metric::recall, k_list[j], sums[j] / denom, evaluated});
  }
  for (std::size_t j = 0; j < k_list.size(); ++j) {
    result.metrics.push_back({Metric::ndcg, k_list[j], sums[k_list.size() + j] / denom, evaluated});
  }
  return result;
}

EvaluationResult evaluate_model(const ModelBundle& model, const std::vector<HeldOutUser>& users, std::size_t T,
                                std::span<const std::size_t> k_list, const EvaluationOptions& options) {
  const std::size_t n_items = model.config.recommender.n_items;
  BatchScorer scorer = [&](std::span<const HeldOutUser> chunk) {
    std::vector<const ItemList*> rows;
    std::vector<std::uint64_t> keys;
    for (std::size_t u = 0; u < chunk.size(); ++u) {
      rows.push_back(&chunk[u].fold_in);
      keys.push_back(u);
    }
    return infer_preferences(model, make_batch(rows, n_items, keys), T);
  };
  return evaluate_rankings(scorer, users, n_items, k_list, options);
}

}  // namespace cfsfl
