#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "cfsfl/dataio.hpp"
#include "cfsfl/evalkit.hpp"
#include "cfsfl/loop_engine.hpp"

using namespace cfsfl;

namespace {

// Default architecture on a 300-item synthetic catalogue.
struct Fixture {
  InteractionMatrix data;
  ModelBundle model;
  UserBatch batch;

  explicit Fixture(std::size_t n_users) {
    data = generate_synthetic({n_users, 300, 8, 20.0, 1});
    model = make_model(ModelConfig::for_items(300), 1);
    batch = make_batch(data.rows, 300);
  }
};

const Fixture& fixture() {
  static const Fixture f(500);
  return f;
}

void BM_InferPreferences(benchmark::State& state) {
  const auto& f = fixture();
  const auto T = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(infer_preferences(f.model, f.batch, T));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * f.batch.size()));
}
BENCHMARK(BM_InferPreferences)->Arg(0)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_CollaborativeStep(benchmark::State& state) {
  const auto& f = fixture();
  const auto T = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    Graph g(f.model.params);
    auto terms = loss_collaborative(g, f.model.config, f.batch, T, 0.2, 0.0, UnrollMode::train, 3);
    g.backward(terms.total);
    benchmark::DoNotOptimize(g.gradients());
  }
}
BENCHMARK(BM_CollaborativeStep)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_ElboStep(benchmark::State& state) {
  const auto& f = fixture();
  const auto& rc = f.model.config.recommender;
  const Matrix v = Matrix::Zero(static_cast<Eigen::Index>(f.batch.size()), static_cast<Eigen::Index>(rc.feedback_dim));
  for (auto _ : state) {
    Graph g(f.model.params);
    const auto out = policy_forward(g, rc, g.constant(f.batch.x_norm), g.constant(v), LatentMode::mean, nullptr, nullptr);
    g.backward(elbo_loss(g, f.batch.x_binary, out.logits, out.enc, 0.2));
    benchmark::DoNotOptimize(g.gradients());
  }
}
BENCHMARK(BM_ElboStep)->Unit(benchmark::kMillisecond);

void BM_TopKMetrics(benchmark::State& state) {
  CounterRng rng{5};
  std::vector<double> scores(300);
  for (auto& s : scores) s = rng.uniform();
  ItemList history, held;
  for (ItemIndex i = 0; i < 300; i += 15) history.push_back(i);
  for (ItemIndex i = 7; i < 300; i += 60) held.push_back(i);
  const auto k = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    const auto top = recommend_top_k(scores, history, k);
    benchmark::DoNotOptimize(recall_at_k(top.items, held, k));
    benchmark::DoNotOptimize(ndcg_at_k(top.items, held, k));
  }
}
BENCHMARK(BM_TopKMetrics)->Arg(20)->Arg(100);

}  // namespace

BENCHMARK_MAIN();
