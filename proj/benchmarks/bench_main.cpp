#include <benchmark/benchmark.h>

#include <vector>

#include "msf/autodiff.hpp"
#include "msf/graph.hpp"
#include "msf/masking.hpp"
#include "msf/model.hpp"
#include "msf/mso.hpp"
#include "msf/rng.hpp"
#include "msf/training.hpp"

namespace {

using namespace msf;

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed, "bench");
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Blockwise sparse x dense over B = 32 windows of N nodes with 32 features.
void BM_SparseDense(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const SparseMatrix a = random_in_degree_graph(n, 3, 1).adjacency().row_normalized();
  const Tensor x = random_tensor({32 * n, 32}, 2);
  Tensor out(x.shape());
  for (auto _ : state) {
    a.apply(x.data(), x.rows(), x.cols(), out.data(), false, false);
    benchmark::DoNotOptimize(out.storage().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(a.nnz() * 32 * 32));
}
BENCHMARK(BM_SparseDense)->RangeMultiplier(4)->Range(16, 1024);

void BM_DenseMatmul(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({rows, 64}, 3), b = random_tensor({64, 192}, 4);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(matmul(tape.constant(a), tape.constant(b)).value().storage().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * 64 * 192));
}
BENCHMARK(BM_DenseMatmul)->RangeMultiplier(4)->Range(64, 4096);

void BM_KmisSelect(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const WeightedDigraph g = random_in_degree_graph(n, 3, 5);
  for (auto _ : state) benchmark::DoNotOptimize(kmis_select(g, 1).num_coarse());
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_KmisSelect)->RangeMultiplier(4)->Range(16, 4096)->Complexity();

void BM_BuildHierarchy(benchmark::State& state) {
  const WeightedDigraph g = random_in_degree_graph(static_cast<std::size_t>(state.range(0)), 3, 6);
  for (auto _ : state) benchmark::DoNotOptimize(build_hierarchy(g, 3).levels());
}
BENCHMARK(BM_BuildHierarchy)->Arg(100)->Arg(1000);

void BM_BlockMask(benchmark::State& state) {
  const std::size_t n = 100, steps = 10000;
  const MsoDataset d = generate_mso(random_in_degree_graph(n, 3, 0), 2, steps, 5, 0);
  const MaskConfig cfg{0.05, 0.005, 8, 48, {1.0}, true, 1};
  for (auto _ : state) benchmark::DoNotOptimize(simulate_block({steps, n, 1}, cfg, &d.mixing).mask.size());
}
BENCHMARK(BM_BlockMask)->Unit(benchmark::kMillisecond);

ModelConfig bench_model(std::size_t hidden) {
  ModelConfig c;
  c.nodes = 20;
  c.window = 27;
  c.horizon = 4;
  c.hidden = hidden;
  c.embedding = 8;
  c.temporal_layers = 3;
  c.temporal_factor = 3;
  c.spatial_levels = 2;
  c.decoder_hidden = {32, 32};
  return c;
}

Batch bench_batch(const ModelConfig& c, std::size_t size) {
  Batch b;
  b.size = size;
  const std::size_t rows = c.window * size * c.nodes, out = c.horizon * size * c.nodes;
  b.x = random_tensor({rows, 1}, 7);
  b.mask = Tensor({rows, 1}, 1.0);
  b.exog = Tensor({rows, 0});
  b.target = random_tensor({out, 1}, 8);
  b.target_mask = Tensor({out, 1}, 1.0);
  return b;
}

// One training step (forward, backward, optimizer) at batch size 32.
void BM_TrainStep(benchmark::State& state) {
  const ModelConfig c = bench_model(static_cast<std::size_t>(state.range(0)));
  MultiscaleForecaster m(c, build_hierarchy(random_in_degree_graph(c.nodes, 3, 9), c.spatial_levels), 1);
  const Batch b = bench_batch(c, 32);
  OptimState opt(m.parameters());
  for (auto _ : state) {
    m.parameters().zero_grad();
    Tape tape;
    tape.backward(masked_mae_loss(m.forward(tape, b).prediction, b.target, b.target_mask));
    adamw_step(m.parameters(), opt, AdamWHyper{1e-4});
  }
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Predict(benchmark::State& state) {
  const ModelConfig c = bench_model(static_cast<std::size_t>(state.range(0)));
  MultiscaleForecaster m(c, build_hierarchy(random_in_degree_graph(c.nodes, 3, 9), c.spatial_levels), 1);
  const Batch b = bench_batch(c, 32);
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(b).storage().data());
}
BENCHMARK(BM_Predict)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
