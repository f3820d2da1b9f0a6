#include <benchmark/benchmark.h>

#include "bncde/control_path.hpp"
#include "bncde/model.hpp"
#include "bncde/nets.hpp"
#include "bncde/rng.hpp"
#include "bncde/simulator.hpp"
#include "bncde/solvers.hpp"
#include "bncde/tape.hpp"

using namespace bncde;
using Vec = Eigen::VectorXd;

static void BM_FillNormal(benchmark::State& state) {
  Rng rng(1);
  Vec buf(state.range(0));
  for (auto _ : state) {
    solvers::fill_normal(rng, buf.data(), buf.size());
    benchmark::DoNotOptimize(buf.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FillNormal)->Arg(4016);

static void BM_HermiteEval(benchmark::State& state) {
  Rng rng(2);
  controlpath::SamplePath s;
  s.timestamps = Vec::LinSpaced(40, 0.0, 55.0);
  s.channels = Eigen::MatrixXd::Random(40, 10);
  const auto path = controlpath::build_hermite(s);
  double t = 0.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(path.eval(t));
    t += 0.37;
    if (t > 55.0) t = 0.0;
  }
}
BENCHMARK(BM_HermiteEval);

static void BM_MlpTapeBackward(benchmark::State& state) {
  // Drift-network-shaped tape step: forward plus reverse sweep.
  Rng rng(3);
  nets::MlpSpec spec;
  spec.layer_sizes = {static_cast<int>(state.range(0)) + 1, 8, 16, 8,
                      static_cast<int>(state.range(0))};
  const auto w = nets::init_uniform(spec, rng);
  const Vec x = Vec::Random(state.range(0));
  for (auto _ : state) {
    autodiff::Tape tape;
    const auto wid = tape.leaf(w.data);
    const auto out = nets::mlp_apply_time(tape, spec, wid, tape.constant(x), 0.5);
    tape.backward(tape.squared_norm(out));
    benchmark::DoNotOptimize(tape.grad(wid).data());
  }
}
BENCHMARK(BM_MlpTapeBackward)->Arg(512)->Arg(4016);

static void BM_EulerMaruyamaStep(benchmark::State& state) {
  const auto grid = solvers::make_grid({}, 55.0, 0.5);
  auto drift = [](const Vec& w, double) -> Vec { return -w; };
  solvers::SdeOptions opts{0.001, false, 1.0};
  Rng rng(4);
  const Vec nu = Vec::Zero(state.range(0));
  for (auto _ : state) {
    const auto s = solvers::euler_maruyama(drift, drift, nu, grid, opts, rng);
    benchmark::DoNotOptimize(s.kl_accumulator);
  }
  state.SetItemsProcessed(state.iterations() * grid.num_steps());
}
BENCHMARK(BM_EulerMaruyamaStep)->Arg(512);

static void BM_PosteriorPredictive(benchmark::State& state) {
  sim::SimConfig scfg;
  scfg.n_train = 2;
  scfg.n_val = 1;
  scfg.n_test = 1;
  scfg.seed = 5;
  scfg.growth_offset = 0.0;
  const auto ds = sim::generate_dataset(scfg);

  model::ModelConfig cfg;
  cfg.d_z = 8;
  cfg.cde_hidden = {32, 32};
  cfg.sde_hidden = {8, 16, 8};
  const auto m = model::make_model(cfg, ds.stats);
  for (auto _ : state) {
    const auto pp = model::posterior_predictive(m, ds.train[0], 1,
                                                static_cast<int>(state.range(0)), 7);
    benchmark::DoNotOptimize(pp.components.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PosteriorPredictive)->Arg(10)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
