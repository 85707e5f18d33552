// Serial reference vs OpenMP kernels. Arg 0 selects serial, 1 parallel.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "kbdistill/kernels.hpp"

using namespace kbd;

namespace {

Exec exec_of(const benchmark::State& s) { return s.range(0) ? Exec::parallel : Exec::serial; }

std::vector<Real> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> d;
  std::vector<Real> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void BM_gemv(benchmark::State& state) {
  const std::size_t rows = 2000, cols = 300;
  const auto w = random_values(rows * cols, 1);
  const auto x = random_values(cols, 2);
  std::vector<Real> y(rows);
  for (auto _ : state) {
    kernels::gemv(exec_of(state), w.data(), rows, cols, x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_record_scores(benchmark::State& state) {
  const std::size_t vocab = 2000, dim = 200;
  const auto e = random_values(vocab * dim, 3);
  const kernels::TableView table{e.data(), vocab, dim};
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::uint32_t> id(0, vocab - 1);
  kernels::WeightedIds history;
  for (int i = 0; i < 60; ++i) {
    history.ids.push_back(id(rng));
    history.weights.push_back(1.0);
  }
  std::vector<std::vector<std::uint32_t>> records(8);
  for (auto& r : records)
    for (int k = 0; k < 6; ++k) r.push_back(id(rng));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::record_scores(exec_of(state), table, history, records));
}

void BM_pair_cosine_sum(benchmark::State& state) {
  const std::size_t vocab = 2000, dim = 200;
  const auto e = random_values(vocab * dim, 5);
  const kernels::TableView table{e.data(), vocab, dim};
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::uint32_t> id(0, vocab - 1);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs(10000);
  for (auto& p : pairs) p = {id(rng), id(rng)};
  for (auto _ : state) benchmark::DoNotOptimize(kernels::pair_cosine_sum(exec_of(state), table, pairs));
}

void BM_pair_cosine_sum_backward(benchmark::State& state) {
  const std::size_t vocab = 2000, dim = 200;
  const auto e = random_values(vocab * dim, 7);
  const kernels::TableView table{e.data(), vocab, dim};
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::uint32_t> id(0, vocab - 1);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs(10000);
  for (auto& p : pairs) p = {id(rng), id(rng)};
  std::vector<Real> grad(vocab * dim);
  for (auto _ : state) {
    kernels::pair_cosine_sum_backward(exec_of(state), table, pairs, 1.0, grad.data());
    benchmark::DoNotOptimize(grad.data());
  }
}

}  // namespace

BENCHMARK(BM_gemv)->Arg(0)->Arg(1);
BENCHMARK(BM_record_scores)->Arg(0)->Arg(1);
BENCHMARK(BM_pair_cosine_sum)->Arg(0)->Arg(1);
BENCHMARK(BM_pair_cosine_sum_backward)->Arg(0)->Arg(1);

BENCHMARK_MAIN();
