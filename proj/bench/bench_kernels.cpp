// Serial reference vs OpenMP kernels, plus one full training step per backend.

#include "pivot/kernels.hpp"
#include "pivot/model.hpp"
#include "pivot/rng.hpp"

#include <benchmark/benchmark.h>

using namespace pivot;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix m(r, c);
    for (auto& x : m.data) x = g(rng);
    return m;
}

template <void (*Kernel)(const Matrix&, const Matrix&, Matrix&)>
void bm_matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 64, 1);
    const Matrix b = random_matrix(64, 256, 2);
    Matrix c(n, 256);
    for (auto _ : state) {
        Kernel(a, b, c);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 256));
}

template <void (*Kernel)(const Matrix&, const Matrix&, Matrix&)>
void bm_matmul_tn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 64, 1);
    const Matrix b = random_matrix(n, 256, 2);
    Matrix c(64, 256);
    for (auto _ : state) {
        Kernel(a, b, c);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 256));
}

template <void (*Kernel)(const Matrix&, const Matrix&, Matrix&)>
void bm_matmul_nt(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, 256, 1);
    const Matrix b = random_matrix(64, 256, 2);
    Matrix c(n, 64);
    for (auto _ : state) {
        Kernel(a, b, c);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 256));
}

void bm_train_step(benchmark::State& state) {
    kernels::set_backend(state.range(0) == 0 ? kernels::Backend::serial : kernels::Backend::openmp);
    ModelConfig c;
    c.num_steps = 50;
    c.path_sizes = {3, 9, 27};
    c.pooling = Pooling::tfenc;
    const ModelParams params = init_params(c, 7);
    Rng rng(3);
    std::normal_distribution<double> g(0.0, 0.125);
    std::vector<Embedding> clips(16 * 12, Embedding(c.dim));
    for (auto& e : clips)
        for (auto& x : e) x = g(rng);
    std::vector<SequenceExample> examples(16);
    for (std::size_t v = 0; v < examples.size(); ++v) {
        for (std::size_t i = 0; i < 12; ++i) {
            examples[v].clips.emplace_back(clips[v * 12 + i]);
            examples[v].step_labels.push_back({static_cast<int>((v + i) % 50)});
        }
        examples[v].path_targets = {static_cast<int>(v % 3), static_cast<int>(v % 9), static_cast<int>(v % 27)};
    }
    const Batch batch = make_batch(examples, c);
    for (auto _ : state) {
        Rng drop(11);
        auto out = pretrain_loss_and_grad(params, c, batch, {}, &drop);
        benchmark::DoNotOptimize(out.losses.joint);
    }
    kernels::set_backend(kernels::Backend::openmp);
}

} // namespace

BENCHMARK(bm_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(512);
BENCHMARK(bm_matmul<kernels::omp::matmul>)->Name("matmul/omp")->Arg(64)->Arg(512);
BENCHMARK(bm_matmul_tn<kernels::serial::matmul_tn>)->Name("matmul_tn/serial")->Arg(64)->Arg(512);
BENCHMARK(bm_matmul_tn<kernels::omp::matmul_tn>)->Name("matmul_tn/omp")->Arg(64)->Arg(512);
BENCHMARK(bm_matmul_nt<kernels::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(64)->Arg(512);
BENCHMARK(bm_matmul_nt<kernels::omp::matmul_nt>)->Name("matmul_nt/omp")->Arg(64)->Arg(512);
BENCHMARK(bm_train_step)->Name("train_step")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
