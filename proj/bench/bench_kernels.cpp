// Serial reference kernels against the OpenMP versions, plus one training
// step of the micro model. Run with OMP_NUM_THREADS to vary the thread count.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "esi/kernels.hpp"
#include "esi/objectives.hpp"
#include "esi/pretrainer.hpp"

namespace {

namespace k = esi::kernels;

std::vector<float> random_vector(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> z(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = z(rng);
  return v;
}

enum class Impl { serial, openmp };

template <Impl impl>
void BM_gemm_nn(benchmark::State& state) {
  const int64_t M = state.range(0), N = state.range(1), K = state.range(2);
  const auto A = random_vector(M * K, 1), B = random_vector(K * N, 2);
  std::vector<float> C(M * N);
  for (auto _ : state) {
    if constexpr (impl == Impl::serial) k::reference::gemm_nn(M, N, K, A.data(), B.data(), C.data(), false);
    else k::gemm_nn(M, N, K, A.data(), B.data(), C.data(), false);
    benchmark::DoNotOptimize(C.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <Impl impl>
void BM_gemm_nt(benchmark::State& state) {
  const int64_t M = state.range(0), N = state.range(1), K = state.range(2);
  const auto A = random_vector(M * K, 1), B = random_vector(N * K, 2);
  std::vector<float> C(M * N);
  for (auto _ : state) {
    if constexpr (impl == Impl::serial) k::reference::gemm_nt(M, N, K, A.data(), B.data(), C.data(), false);
    else k::gemm_nt(M, N, K, A.data(), B.data(), C.data(), false);
    benchmark::DoNotOptimize(C.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <Impl impl>
void BM_gemm_tn(benchmark::State& state) {
  const int64_t M = state.range(0), N = state.range(1), K = state.range(2);
  const auto A = random_vector(K * M, 1), B = random_vector(K * N, 2);
  std::vector<float> C(M * N);
  for (auto _ : state) {
    if constexpr (impl == Impl::serial) k::reference::gemm_tn(M, N, K, A.data(), B.data(), C.data(), false);
    else k::gemm_tn(M, N, K, A.data(), B.data(), C.data(), false);
    benchmark::DoNotOptimize(C.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <Impl impl>
void BM_depthwise_conv1d(benchmark::State& state) {
  const int64_t B = 32, L = state.range(0), C = state.range(1), K = 7;
  const auto x = random_vector(B * L * C, 1), w = random_vector(K * C, 2), bias = random_vector(C, 3);
  std::vector<float> y(B * L * C);
  for (auto _ : state) {
    if constexpr (impl == Impl::serial)
      k::reference::depthwise_conv1d(B, L, C, K, x.data(), w.data(), bias.data(), y.data());
    else k::depthwise_conv1d(B, L, C, K, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * B * L * C);
}

template <Impl impl>
void BM_layer_norm(benchmark::State& state) {
  const int64_t rows = state.range(0), C = state.range(1);
  const auto x = random_vector(rows * C, 1), g = random_vector(C, 2), b = random_vector(C, 3);
  std::vector<float> y(rows * C), mean(rows), rstd(rows);
  for (auto _ : state) {
    if constexpr (impl == Impl::serial)
      k::reference::layer_norm(rows, C, x.data(), g.data(), b.data(), 1e-6f, y.data(), mean.data(), rstd.data());
    else k::layer_norm(rows, C, x.data(), g.data(), b.data(), 1e-6f, y.data(), mean.data(), rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * C);
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({128, 128, 128})->Args({512, 64, 64})->Args({1024, 256, 64})->Args({256, 256, 1024});
}

// One forward/backward/AdamW step of the micro model on a batch of 32
// synthetic 12-lead, 500-sample records.
void BM_micro_train_step(benchmark::State& state) {
  using namespace esi;
  auto cfg = TrainConfig::preset("micro");
  std::vector<std::string> texts;
  for (int i = 0; i < 32; ++i)
    texts.push_back(i % 2 ? "sinus rhythm with normal axis and narrow qrs."
                          : "right bundle branch block with prolonged qrs duration.");
  EsiModel<float> model(cfg, Vocabulary::build(texts, 1));
  AdamW<float> opt(0.9, 0.999, 1e-8, 0.01);
  const auto signals = random_vector(32 * 12 * 500, 4);
  Tensor<float> batch({32, 12, 500}, signals);
  const auto tb = model.tokenize(texts);
  const auto targets = shift_targets(tb);
  for (auto _ : state) {
    const auto enc = model.signal().encode(batch);
    const auto l_con = contrastive_loss(enc.pooled, model.text().encode(tb), model.log_sigma());
    const auto l_cap = captioning_loss(model.decoder().caption_logits(enc.tokens, tb), targets);
    auto loss = total_loss(l_con, l_cap, cfg.loss);
    model.params().zero_grad();
    backward(loss);
    opt.step(model.params(), 1e-4, 1.0);
    benchmark::DoNotOptimize(loss.item());
  }
  state.counters["threads"] = omp_get_max_threads();
}

}  // namespace

BENCHMARK(BM_gemm_nn<Impl::serial>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_nn<Impl::openmp>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_nt<Impl::serial>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_nt<Impl::openmp>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_tn<Impl::serial>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_gemm_tn<Impl::openmp>)->Apply(gemm_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_depthwise_conv1d<Impl::serial>)->Args({125, 16})->Args({32, 64})->Args({156, 96})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_depthwise_conv1d<Impl::openmp>)->Args({125, 16})->Args({32, 64})->Args({156, 96})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_layer_norm<Impl::serial>)->Args({4000, 16})->Args({1024, 64})->Args({4992, 96})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_layer_norm<Impl::openmp>)->Args({4000, 16})->Args({1024, 64})->Args({4992, 96})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_micro_train_step)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
