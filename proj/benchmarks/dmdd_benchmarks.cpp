#include <benchmark/benchmark.h>

#include <random>

#include "dmdd/autograd.hpp"
#include "dmdd/backbone.hpp"
#include "dmdd/distillation.hpp"
#include "dmdd/metrics.hpp"
#include "dmdd/segmentation_head.hpp"
#include "dmdd/synthesis.hpp"

using namespace dmdd;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = u(rng);
    return t;
}

void BM_Conv3x3Forward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    const int s = static_cast<int>(state.range(1));
    const ag::Var x(uniform({c, s, s}, 1));
    const ag::Var w(uniform({c, c, 3, 3}, 2));
    const ag::Var b(Tensor::zeros({c}));
    ag::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(ag::conv2d(x, w, b, 1, 1));
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(c) * c * 9 * s * s);
}
BENCHMARK(BM_Conv3x3Forward)->Args({16, 32})->Args({32, 16})->Args({64, 8});

void BM_Conv3x3Backward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    const int s = static_cast<int>(state.range(1));
    const Tensor xv = uniform({c, s, s}, 1), wv = uniform({c, c, 3, 3}, 2);
    for (auto _ : state) {
        const ag::Var x(xv), w(wv, true);
        ag::backward(ag::sum(ag::conv2d(x, w, ag::Var(), 1, 1)));
        benchmark::DoNotOptimize(w.grad());
    }
}
BENCHMARK(BM_Conv3x3Backward)->Args({16, 32})->Args({64, 8});

void BM_PerlinNoise(benchmark::State& state) {
    const int s = static_cast<int>(state.range(0));
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(perlin_noise_raw(s, s, 8, 8, seed++));
}
BENCHMARK(BM_PerlinNoise)->Arg(64)->Arg(256);

void BM_Pro(benchmark::State& state) {
    const int s = static_cast<int>(state.range(0));
    std::vector<Tensor> maps, masks;
    for (int i = 0; i < 8; ++i) {
        Tensor m = Tensor::zeros({1, s, s});
        for (int y = s / 4; y < s / 2; ++y)
            for (int x = s / 3; x < s / 2 + i; ++x) m.at(0, y, x) = 1.0;
        maps.push_back(uniform({1, s, s}, 10 + i, 0.0, 1.0));
        masks.push_back(m);
    }
    for (auto _ : state) benchmark::DoNotOptimize(pro(maps, masks));
}
BENCHMARK(BM_Pro)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_ToyStudentForward(benchmark::State& state) {
    const BackboneSpec spec = BackboneSpec::toy(64);
    const Teacher teacher(Trunk::build(spec));
    const Student student(teacher.trunk(), spec, StudentConfig{{true, true}, true, 0.01, 0});
    const Tensor image = uniform({3, 64, 64}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(student.forward(image));
}
BENCHMARK(BM_ToyStudentForward)->Unit(benchmark::kMillisecond);

void BM_HeadFuse(benchmark::State& state) {
    HeadConfig cfg;
    cfg.input_size = static_cast<int>(state.range(0));
    const SegmentationHead head(cfg);
    const ag::Var stack(uniform({8, cfg.input_size, cfg.input_size}, 4, 0.0, 2.0));
    ag::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(head.fuse(stack));
}
BENCHMARK(BM_HeadFuse)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
