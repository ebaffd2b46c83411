// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "dmavg/dma.hpp"
#include "dmavg/toy_denoiser.hpp"

namespace {

using namespace dmavg;

std::shared_ptr<ToyDenoiser> bench_model(int side) {
  ToyDenoiserConfig c;
  c.shape = {3, side, side};
  c.num_concepts = 3;
  return ToyDenoiser::initialize(c, 1);
}

void BM_Forward(benchmark::State& state) {
  const auto model = bench_model(static_cast<int>(state.range(0)));
  const auto lat = init_latents(static_cast<int>(state.range(1)), model->latent_shape(), 2);
  const auto cond = ConditioningSpec::for_concept(0);
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(lat.latents, 500, 0, cond));
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_Forward)->Args({16, 1})->Args({16, 64})->Args({32, 64});

void BM_AlignLatent(benchmark::State& state) {
  const auto model = bench_model(16);
  const auto cond = ConditioningSpec::for_concept(0);
  const auto lat = init_latents(2, model->latent_shape(), 3);
  const auto tape = model->record(lat.latents.row(1), 500, 0, cond, "bottleneck");
  const std::vector<double> target(tape->activation().begin(), tape->activation().end());
  AlignmentProblem p;
  p.model = model.get();
  p.cond = &cond;
  p.tap = "bottleneck";
  p.timestep = 500;
  p.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(align_latent(p, lat.latents.row(0), target));
}
BENCHMARK(BM_AlignLatent)->Arg(20);

void BM_SampleDdim(benchmark::State& state) {
  const auto model = bench_model(16);
  const auto lat = init_latents(static_cast<int>(state.range(0)), model->latent_shape(), 4);
  const auto schedule = schedule_for(*model, 20);
  const auto cond = ConditioningSpec::for_concept(1);
  for (auto _ : state) benchmark::DoNotOptimize(sample_ddim(*model, lat.latents, schedule, cond, {7.0}));
}
BENCHMARK(BM_SampleDdim)->Arg(8)->Arg(64);

void BM_DmaStep(benchmark::State& state) {
  const auto model = bench_model(16);
  DmaConfig c;
  c.latent_count = 64;
  c.iterations = 20;
  for (auto _ : state) {
    state.PauseTiming();
    DmaRunner runner(model, ConditioningSpec::for_concept(0), c);
    state.ResumeTiming();
    runner.step();
  }
}
BENCHMARK(BM_DmaStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
