#include <benchmark/benchmark.h>

#include "bsatnp/config.hpp"
#include "bsatnp/oracle.hpp"

using namespace bsatnp;

namespace {

// One optimizer-free training step of the desk model: forward, loss, backward.
void BM_DeskStep(benchmark::State& state) {
  const RunConfig rc = RunConfig::desk();
  auto params = init_params<float>(rc.model, 0);
  const auto batch = rc.stream().batch(0).cast<float>();
  for (auto _ : state) {
    params.zero_grad();
    Tape<float> tape;
    auto loss = build_loss(tape, params, rc.model, batch);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
  }
}

void BM_DeskPredict(benchmark::State& state) {
  const RunConfig rc = RunConfig::desk();
  const auto params = init_params<float>(rc.model, 0);
  const auto batch = rc.stream().batch(0).cast<float>();
  for (auto _ : state) {
    auto out = predict(params, rc.model, batch);
    benchmark::DoNotOptimize(out.front().mu.data());
  }
}

void BM_GpBatch(benchmark::State& state) {
  TaskStream s;
  s.gp = GpTaskConfig::desk();
  std::size_t i = 0;
  for (auto _ : state) {
    auto b = s.batch(i++);
    benchmark::DoNotOptimize(b.tasks.data());
  }
}

void BM_SirRollout(benchmark::State& state) {
  const SirConfig cfg;
  Rng rng(1);
  for (auto _ : state) {
    auto r = sir_simulate(cfg, rng);
    benchmark::DoNotOptimize(r.states.data());
  }
}

void BM_OracleNll(benchmark::State& state) {
  GpTaskConfig cfg = GpTaskConfig::desk();
  cfg.n_test = 256;
  Rng rng(2);
  const auto g = gp_sample_task(cfg, 0.3, state.range(0), rng);
  for (auto _ : state) benchmark::DoNotOptimize(oracle_nll(g.task, g.lengthscale, 0.1));
}

}  // namespace

BENCHMARK(BM_DeskStep)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DeskPredict)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GpBatch)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SirRollout)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OracleNll)->ArgName("n_ctx")->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
