#include <benchmark/benchmark.h>

#include <random>

#include "bsatnp/attention.hpp"
#include "bsatnp/bias.hpp"
#include "bsatnp/memory.hpp"

using namespace bsatnp;

namespace {

Tensor<float> uniform(Shape shape, std::mt19937_64& rng, float lo, float hi) {
  Tensor<float> t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (float& x : t.values()) x = u(rng);
  return t;
}

struct Case {
  Tensor<float> q, k, v, qs, ks, a, b;
  ScanProblem<float> problem;
  AttentionConfig cfg;

  Case(std::size_t nk, std::size_t nq, std::size_t heads, std::size_t block, bool bias) {
    std::mt19937_64 rng(nk * 31 + nq);
    const std::size_t d = 32;
    q = uniform({nq, heads * d}, rng, -1, 1);
    k = uniform({nk, heads * d}, rng, -1, 1);
    v = uniform({nk, heads * d}, rng, -1, 1);
    qs = uniform({nq, 2}, rng, -2, 2);
    ks = uniform({nk, 2}, rng, -2, 2);
    a = uniform({heads, 5}, rng, 0, 0.5);
    b = uniform({heads, 5}, rng, 0.5, 50);
    problem.q = q.data();
    problem.k = k.data();
    problem.v = v.data();
    problem.nq = nq;
    problem.nk = nk;
    if (bias) problem.bias.push_back({BiasKind::rbf, qs.data(), 2, ks.data(), 2, 2, a.data(), b.data(), 5});
    cfg.block_q = cfg.block_k = block;
    cfg.heads = heads;
    cfg.head_dim = cfg.value_dim = d;
  }
};

void BM_ScanForward(benchmark::State& state) {
  Case c(state.range(0), state.range(1), 1, 64, state.range(2) != 0);
  Tensor<float> out({c.problem.nq, c.cfg.value_dim});
  std::size_t peak = 0;
  for (auto _ : state) {
    PeakMemoryScope scope;
    bsa_forward_into(c.problem, c.cfg, out.data(), static_cast<ScanStats<float>*>(nullptr));
    benchmark::DoNotOptimize(out.data());
    peak = scope.peak_bytes();
  }
  state.counters["peak_bytes"] = static_cast<double>(peak);
  state.SetItemsProcessed(state.iterations() * state.range(1));
}

void BM_NaiveForward(benchmark::State& state) {
  Case c(state.range(0), state.range(1), 1, 64, true);
  std::size_t peak = 0;
  for (auto _ : state) {
    PeakMemoryScope scope;
    auto out = naive_biased_attention(c.q, c.k, c.v, rbf_bias_tile(c.qs, c.ks, c.a, c.b));
    benchmark::DoNotOptimize(out.data());
    peak = scope.peak_bytes();
  }
  state.counters["peak_bytes"] = static_cast<double>(peak);
  state.SetItemsProcessed(state.iterations() * state.range(1));
}

void BM_ScanBlockSize(benchmark::State& state) {
  Case c(2048, 512, 1, state.range(0), true);
  Tensor<float> out({c.problem.nq, c.cfg.value_dim});
  for (auto _ : state) {
    bsa_forward_into(c.problem, c.cfg, out.data(), static_cast<ScanStats<float>*>(nullptr));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * 512);
}

void BM_ScanBackward(benchmark::State& state) {
  Case c(state.range(0), state.range(0), 2, 64, true);
  ScanStats<float> stats;
  const Tensor<float> out = bsa_forward(c.problem, c.cfg, &stats);
  std::mt19937_64 rng(3);
  const Tensor<float> d_out = uniform(out.shape(), rng, -1, 1);
  for (auto _ : state) {
    auto g = bsa_backward(c.problem, c.cfg, out, stats, d_out);
    benchmark::DoNotOptimize(g.q.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_ScanForward)
    ->ArgNames({"nk", "nq", "bias"})
    ->Args({512, 1024, 1})
    ->Args({4096, 1024, 1})
    ->Args({8192, 1024, 1})
    ->Args({4096, 1024, 0})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NaiveForward)
    ->ArgNames({"nk", "nq"})
    ->Args({512, 1024})
    ->Args({4096, 1024})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScanBlockSize)->ArgName("block")->RangeMultiplier(2)->Range(16, 256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScanBackward)->ArgName("n")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
