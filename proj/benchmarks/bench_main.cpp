#include <benchmark/benchmark.h>

#include "mixttt/analysis.hpp"
#include "mixttt/aux_tasks.hpp"
#include "mixttt/engine.hpp"
#include "mixttt/mixup.hpp"
#include "mixttt/network.hpp"
#include "mixttt/synth.hpp"

using namespace mixttt;

namespace {

SplitNetworkState desk_state() { return build_network(NetworkSpec::desk_default(), 7); }

Tensor random_batch(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, 3, 32, 32});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

static void BM_ForwardFeatures(benchmark::State& state) {
  SplitNetworkState net = desk_state();
  const Tensor batch = random_batch(static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) {
    Tensor f = forward_features(net, batch, Mode::eval);
    benchmark::DoNotOptimize(f.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardFeatures)->Arg(16)->Arg(64)->Arg(256);

static void BM_ForwardBackward(benchmark::State& state) {
  SplitNetworkState net = desk_state();
  const Tensor batch = random_batch(static_cast<std::size_t>(state.range(0)), 5);
  std::vector<std::uint32_t> labels(batch.dim(0));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint32_t>(i % 4);
  AuxCrossEntropyLoss loss(labels);
  for (auto _ : state) {
    ForwardCache cache;
    ForwardResult out = forward_all(net, batch, Mode::eval, false, cache);
    OutputGrads og;
    loss.evaluate(out, &og);
    Gradients g = backward(net, cache, og, false);
    benchmark::DoNotOptimize(g.flat.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(64)->Arg(128);

static void BM_RotationEpisode(benchmark::State& state) {
  SplitNetworkState net = desk_state();
  const Tensor train = random_batch(256, 9);
  const TrainPartnerPool pool(&train);
  const Tensor test = random_batch(1, 11);
  EpisodeConfig ec;
  ec.task = AuxTaskSpec::rotation_default();
  ec.steps = 10;
  ec.mix_batch = static_cast<std::size_t>(state.range(0));
  ec.mix_enabled = true;
  for (auto _ : state) {
    EpisodeResult er = ttt_episode(net, test, ec, &pool);
    benchmark::DoNotOptimize(er.predictions.data());
  }
}
BENCHMARK(BM_RotationEpisode)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_BuildMixedBatch(benchmark::State& state) {
  const Tensor train = random_batch(512, 13);
  const TrainPartnerPool pool(&train);
  const Tensor test = random_batch(1, 15);
  const MixupRatioSpec spec{0.7, 1.0, RatioGranularity::per_pair};
  Rng rng(17);
  for (auto _ : state) {
    MixedBatch mb = build_mixed_batch(test, pool, spec, 32, rng);
    benchmark::DoNotOptimize(mb.inputs.data());
  }
}
BENCHMARK(BM_BuildMixedBatch);

static void BM_DaviesBouldin(benchmark::State& state) {
  Rng rng(19);
  const std::size_t n = 1000, d = 64;
  Tensor features({n, d});
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % 10);
    for (std::size_t k = 0; k < d; ++k)
      features.at(i, k) = rng.normal() + static_cast<double>(labels[i]);
  }
  for (auto _ : state) {
    double v = davies_bouldin(features, labels);
    benchmark::DoNotOptimize(v);
  }
}
BENCHMARK(BM_DaviesBouldin);

static void BM_Project2d(benchmark::State& state) {
  Rng rng(23);
  Tensor features({1000, 64});
  for (std::size_t i = 0; i < features.numel(); ++i) features[i] = rng.normal();
  for (auto _ : state) {
    Tensor p = project_2d(features);
    benchmark::DoNotOptimize(p.data());
  }
}
BENCHMARK(BM_Project2d);

static void BM_SynthDataset(benchmark::State& state) {
  for (auto _ : state) {
    Dataset ds = make_synthetic_dataset(100, 3);
    benchmark::DoNotOptimize(ds.images.data());
  }
}
BENCHMARK(BM_SynthDataset)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
