#include <benchmark/benchmark.h>

#include "vlmattack/augmentation.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/evaluation.hpp"
#include "vlmattack/objectives.hpp"
#include "vlmattack/optimizers.hpp"

using namespace vlmattack;

namespace {

ImageTensor noise(ImageShape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = uniform01(rng);
  return ImageTensor(shape, std::move(v));
}

VisionBackend backend(const char* id, int side, int grid) {
  BackendConfig c;
  c.id = id;
  c.input = {side, side, 3};
  c.grid_h = grid;
  c.grid_w = grid;
  return BackendRegistry::instance().create(c);
}

void BM_EncoderForward(benchmark::State& state, const char* id) {
  const int side = static_cast<int>(state.range(0));
  const auto b = backend(id, side, 8);
  const auto x = noise({side, side, 3}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(b.encoder->encode(x));
  state.SetItemsProcessed(state.iterations());
}

void BM_EncoderBackward(benchmark::State& state, const char* id) {
  const int side = static_cast<int>(state.range(0));
  const auto b = backend(id, side, 8);
  const auto x = noise({side, side, 3}, 2);
  const Eigen::MatrixXd g = Eigen::MatrixXd::Ones(b.encoder->spec().feature_dim, 65);
  for (auto _ : state) benchmark::DoNotOptimize(b.encoder->backward(x, g));
}

void BM_ProjectLinf(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const auto x = noise({side, side, 3}, 3);
  const auto d = noise({side, side, 3}, 4);
  std::vector<double> delta(d.data().begin(), d.data().end());
  for (auto& v : delta) v = (v - 0.5) * 0.2;
  for (auto _ : state) benchmark::DoNotOptimize(project_linf(x, delta, 16.0 / 255.0));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(x.size() * sizeof(double)));
}

void BM_ContrastiveStep(benchmark::State& state) {
  const auto b = backend("conv", 64, 8);
  const auto x = noise({64, 64, 3}, 5);
  const ContrastiveObjective loss(b.encoder, x, noise({64, 64, 3}, 6), 0.3);
  AttackConfig cfg;
  cfg.steps = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(contrastive_adv(x, loss, cfg, TransformConfig{}, StepRule::sign));
  }
}

void BM_Bleu(benchmark::State& state) {
  const std::string a = "a large red balloon is floating above the green field on a sunny day";
  const std::string b = "there is a red apple lying on the green grass in the sun";
  for (auto _ : state) benchmark::DoNotOptimize(eval::word_overlap_scores(a, b));
}

}  // namespace

BENCHMARK_CAPTURE(BM_EncoderForward, avgpool, "avgpool")->Arg(64)->Arg(224);
BENCHMARK_CAPTURE(BM_EncoderForward, conv, "conv")->Arg(64)->Arg(224);
BENCHMARK_CAPTURE(BM_EncoderBackward, avgpool, "avgpool")->Arg(64)->Arg(224);
BENCHMARK_CAPTURE(BM_EncoderBackward, conv, "conv")->Arg(64)->Arg(224);
BENCHMARK(BM_ProjectLinf)->Arg(64)->Arg(224);
BENCHMARK(BM_ContrastiveStep);
BENCHMARK(BM_Bleu);

BENCHMARK_MAIN();
