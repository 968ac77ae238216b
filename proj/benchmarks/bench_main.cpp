#include <benchmark/benchmark.h>

#include <span>

#include "rankmask/autodiff.hpp"
#include "rankmask/bilevel.hpp"
#include "rankmask/passage_mask.hpp"
#include "rankmask/reader.hpp"
#include "rankmask/rng.hpp"
#include "rankmask/taskgen.hpp"

using namespace rankmask;

namespace {

ad::Tensor filled(ad::Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform() - 0.5;
  return t;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const ad::Tensor a = filled({m, 32}, 1), b = filled({32, 32}, 2);
  for (auto _ : state) {
    ad::Graph g;
    ad::Var x = g.leaf(a), w = g.leaf(b);
    g.backward(ad::sum(ad::matmul(x, w)));
    benchmark::DoNotOptimize(g.grad(w).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m) * 32 * 32);
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(176)->Arg(1760);

struct Fixture {
  Dataset data = generate(TaskConfig{});
  CandidateSpace space = default_space(10);
  Schedules schedules = Schedules::constant(0.5, 0.05, 0.9, 10, 1000);
};

void BM_InnerStep(benchmark::State& state) {
  Fixture f;
  TrainOptions options;
  options.mode = static_cast<MaskMode>(state.range(0));
  ReaderParams params = ReaderParams::init(ReaderConfig{.rank_aware = true}, f.data.config.vocab, f.data.config.classes, 1);
  const MaskParams w = MaskParams::zeros(1, f.space.size());
  BilevelState st(1, w);
  const std::span<const Example> batch(f.data.train.data(), options.batch_size);
  for (auto _ : state) {
    benchmark::DoNotOptimize(inner_step(params, w, batch, f.schedules, st, f.space, options).loss);
  }
  state.SetLabel(std::string(mask_mode_name(options.mode)));
}
BENCHMARK(BM_InnerStep)
    ->Arg(static_cast<int>(MaskMode::none))
    ->Arg(static_cast<int>(MaskMode::pm))
    ->Unit(benchmark::kMillisecond);

void BM_ValidationGradient(benchmark::State& state) {
  Fixture f;
  const ReaderParams params = ReaderParams::init(ReaderConfig{.rank_aware = true}, f.data.config.vocab, f.data.config.classes, 1);
  const MaskParams w = MaskParams::zeros(1, f.space.size());
  const std::span<const Example> batch(f.data.val.data(), 100);
  for (auto _ : state) benchmark::DoNotOptimize(validation_gradient(params, w, batch, f.space, 0).loss);
}
BENCHMARK(BM_ValidationGradient)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  Fixture f;
  const ReaderParams params = ReaderParams::init(ReaderConfig{.rank_aware = true}, f.data.config.vocab, f.data.config.classes, 1);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(f.data.test, params));
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
