#include <benchmark/benchmark.h>

#include "flexihaz/likelihood.hpp"
#include "flexihaz/mlp.hpp"
#include "flexihaz/simstudy.hpp"
#include "flexihaz/survdata.hpp"

using namespace flexihaz;

namespace {

nn::MlpParams network(int depth, int width) {
  std::vector<int> widths{4};
  for (int l = 0; l < depth; ++l) widths.push_back(width);
  widths.push_back(1);
  return nn::init_params(widths, 1);
}

void BM_ForwardBatch(benchmark::State& state) {
  const auto params = network(5, 20);
  const auto B = static_cast<Eigen::Index>(state.range(0));
  const Eigen::MatrixXd inputs = Eigen::MatrixXd::Random(4, B);
  nn::BatchCache cache;
  Eigen::RowVectorXd out;
  for (auto _ : state) {
    nn::forward_batch(params, inputs, cache, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * B);
}
BENCHMARK(BM_ForwardBatch)->Arg(1024)->Arg(16384);

void BM_ForwardBackwardBatch(benchmark::State& state) {
  const auto params = network(5, 20);
  auto grads = params.zeros_like();
  const auto B = static_cast<Eigen::Index>(state.range(0));
  const Eigen::MatrixXd inputs = Eigen::MatrixXd::Random(4, B);
  const Eigen::RowVectorXd upstream = Eigen::RowVectorXd::Ones(B);
  nn::BatchCache cache;
  Eigen::RowVectorXd out;
  for (auto _ : state) {
    nn::forward_batch(params, inputs, cache, out);
    nn::backward_batch(params, cache, upstream, grads);
    benchmark::DoNotOptimize(grads.biases.back().data());
  }
  state.SetItemsProcessed(state.iterations() * B);
}
BENCHMARK(BM_ForwardBackwardBatch)->Arg(1024)->Arg(16384);

void BM_NegLoglik(benchmark::State& state) {
  SimConfig sim;
  sim.n = static_cast<std::size_t>(state.range(0));
  sim.seed = 1;
  const Dataset data = simulate(sim);
  const ExpandedRows rows = expand(data, build_grid(data, 128, sim.tau));
  ModelState s;
  s.g_params = network(5, 20);
  s.theta = sim.theta_true;
  for (auto _ : state) {
    benchmark::DoNotOptimize(neg_loglik(s, rows, data).neg_loglik);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows.size()));
}
BENCHMARK(BM_NegLoglik)->Arg(200)->Arg(1000);

void BM_LossGradients(benchmark::State& state) {
  SimConfig sim;
  sim.n = 1000;
  sim.seed = 1;
  const Dataset data = simulate(sim);
  const ExpandedRows rows = expand(data, build_grid(data, 128, sim.tau));
  ModelState s;
  s.g_params = network(5, 20);
  s.theta = sim.theta_true;
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_gradients(s, rows, data).theta_grad.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows.size()));
}
BENCHMARK(BM_LossGradients);

}  // namespace

BENCHMARK_MAIN();
