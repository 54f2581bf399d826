#include <benchmark/benchmark.h>

#include "cfl/backbone.hpp"
#include "cfl/data.hpp"
#include "cfl/optim.hpp"
#include "cfl/theory.hpp"

namespace {

void BM_ForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto bb = cfl::init_backbone({8, 32, 32}, cfl::Activation::relu, cfl::Parameterization::standard, 1);
  auto data = cfl::gen_regression_task(batch * 2, 8, 2, 16, 0.0, 2);
  const cfl::Matrix x = cfl::column_block(data.train.x, 0, batch);
  const cfl::Matrix g(32, batch, 1.0);
  for (auto _ : state) {
    auto fr = cfl::forward(bb, x);
    benchmark::DoNotOptimize(cfl::backward(bb, fr.tape, g));
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(8)->Arg(64)->Arg(256);

void BM_Algorithm1Step(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  cfl::TrainConfig cfg;
  cfg.lambda = 1.0;
  auto data = cfl::gen_regression_task(1000, 8, 2, 16, 0.0, 3);
  cfl::Model model = cfl::init_model(cfg, 8, 2);
  auto opt = cfl::make_optimizer(cfl::OptimizerKind::sgd);
  const cfl::Matrix x = cfl::column_block(data.train.x, 0, batch);
  const cfl::Matrix y = cfl::column_block(data.train.y, 0, batch);
  for (auto _ : state) benchmark::DoNotOptimize(cfl::step_algorithm1(model, x, y, 1e-4, 1.0, opt));
}
BENCHMARK(BM_Algorithm1Step)->Arg(8)->Arg(64)->Arg(720);

void BM_FlowRk4Step(benchmark::State& state) {
  auto data = cfl::gen_regression_task(100, 6, 2, 8, 0.0, 4);
  cfl::FlowState fs = cfl::make_flow_state(cfl::column_block(data.train.x, 0, 8), cfl::default_kernel(6, 5), 1e-3);
  const cfl::Matrix y = cfl::column_block(data.train.y, 0, 8);
  const double dt = cfl::default_dt(fs.xi);
  for (auto _ : state) fs = cfl::rk4_step(fs, y, dt);
}
BENCHMARK(BM_FlowRk4Step);

}  // namespace
