#include <benchmark/benchmark.h>

#include "momentflow/fit.hpp"
#include "momentflow/oracle.hpp"
#include "momentflow/propagate.hpp"

using namespace momentflow;

namespace {

struct Fixture {
    NetworkModel net;
    PosteriorSpec diag_spec;
    Vector x;

    explicit Fixture(const std::vector<std::size_t>& sizes) {
        SeededRng rng(1, 0);
        net = make_mlp(sizes, Activation::relu, Task::classification, rng);
        for (std::size_t idx : linear_layer_indices(net)) {
            const auto& l = flatten_layers(net)[idx]->as<LinearLayer>();
            DiagonalPosterior d;
            d.var_weight = Matrix(l.weight.rows, l.weight.cols, 1e-3);
            d.var_bias.assign(l.bias.size(), 1e-3);
            diag_spec.layers.emplace(idx, std::move(d));
        }
        SeededRng xr(2, 0);
        x = standard_normal(xr, sizes.front());
    }
};

const Fixture& mnist_mlp() {
    static Fixture f({784, 128, 64, 10});
    return f;
}

const Fixture& small_mlp() {
    static Fixture f({16, 32, 8});
    return f;
}

void BM_map_forward(benchmark::State& state) {
    const Fixture& f = mnist_mlp();
    for (auto _ : state) benchmark::DoNotOptimize(forward(f.net, f.x));
}
BENCHMARK(BM_map_forward);

void BM_analytic_diag(benchmark::State& state) {
    const Fixture& f = mnist_mlp();
    PropagationConfig cfg;
    for (auto _ : state)
        benchmark::DoNotOptimize(propagate_network(
            f.net, f.diag_spec, MomentState::deterministic_input(f.x), cfg));
}
BENCHMARK(BM_analytic_diag);

void BM_analytic_full_small(benchmark::State& state) {
    const Fixture& f = small_mlp();
    PropagationConfig cfg;
    cfg.activation_cov_mode = CovMode::full;
    for (auto _ : state)
        benchmark::DoNotOptimize(propagate_network(
            f.net, f.diag_spec, MomentState::deterministic_input(f.x), cfg));
}
BENCHMARK(BM_analytic_full_small);

void BM_mc_predict(benchmark::State& state) {
    const Fixture& f = mnist_mlp();
    McConfig cfg;
    cfg.num_samples = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(mc_predict(f.net, f.diag_spec, f.x, cfg));
}
BENCHMARK(BM_mc_predict)->Arg(10)->Arg(100);

void BM_kfac_row_cov(benchmark::State& state) {
    SeededRng rng(3, 0);
    Matrix a(65, 65), b(32, 32);
    for (double& v : a.data) v = rng.next_normal();
    for (double& v : b.data) v = rng.next_normal();
    KfacPosterior p;
    p.a_factor = matadd(matmul(a, transpose(a)), Matrix::identity(65));
    p.b_factor = matadd(matmul(b, transpose(b)), Matrix::identity(32));
    p.prior_precision = 1.0;
    p.convention = KfacConvention::row;
    invert_kfac_posterior(p);
    for (auto _ : state) benchmark::DoNotOptimize(kfac_row_cov(p, 3, 7));
}
BENCHMARK(BM_kfac_row_cov);

}  // namespace

BENCHMARK_MAIN();
