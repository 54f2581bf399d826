#include <random>

#include <benchmark/benchmark.h>

#include "cfl/head.hpp"
#include "cfl/linalg.hpp"

namespace {

cfl::Matrix random_matrix(std::size_t r, std::size_t c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  cfl::Matrix m(r, c);
  for (double& v : m.data()) v = n(rng);
  return m;
}

void BM_SolveSpd(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const cfl::Matrix a = cfl::add_diagonal(cfl::gram(random_matrix(d, 2 * d, 1)), 1.0);
  const cfl::Matrix b = random_matrix(d, 4, 2);
  for (auto _ : state) benchmark::DoNotOptimize(cfl::solve_spd(a, b));
}
BENCHMARK(BM_SolveSpd)->Arg(16)->Arg(64)->Arg(128);

void BM_RidgeSolution(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const cfl::Matrix phi = random_matrix(33, n, 3);
  const cfl::Matrix y = random_matrix(4, n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(cfl::ridge_solution(y, phi, 1.0));
}
BENCHMARK(BM_RidgeSolution)->Arg(8)->Arg(64)->Arg(720);

void BM_SymEigen(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const cfl::Matrix a = cfl::gram(random_matrix(d, d, 5));
  for (auto _ : state) benchmark::DoNotOptimize(cfl::sym_eigen(a));
}
BENCHMARK(BM_SymEigen)->Arg(8)->Arg(32);

}  // namespace
