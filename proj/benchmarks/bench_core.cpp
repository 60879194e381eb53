#include "slipsense/attention.hpp"
#include "slipsense/fusion.hpp"
#include "slipsense/gmm.hpp"
#include "slipsense/model.hpp"
#include "slipsense/vmm.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace slipsense;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

void BM_DenseAttention(benchmark::State& state)
{
    const auto L = state.range(0);
    const auto Q = gaussian(L, 16, 1);
    const auto K = gaussian(L, 16, 2);
    const auto V = gaussian(L, 16, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dense_attention(Q, K, V));
    }
}
BENCHMARK(BM_DenseAttention)->Arg(50)->Arg(100)->Arg(400);

void BM_ProbSparseAttention(benchmark::State& state)
{
    const auto L = state.range(0);
    const auto Q = gaussian(L, 16, 1);
    const auto K = gaussian(L, 16, 2);
    const auto V = gaussian(L, 16, 3);
    const std::size_t u = query_budget(5.0, static_cast<std::size_t>(L));
    for (auto _ : state) {
        benchmark::DoNotOptimize(probsparse_attention(Q, K, V, u));
    }
}
BENCHMARK(BM_ProbSparseAttention)->Arg(50)->Arg(100)->Arg(400);

void BM_KalmanStep(benchmark::State& state)
{
    const KfConfig cfg;
    KfState s;
    const Eigen::Vector2d z(0.01, 0.1);
    for (auto _ : state) {
        s = kf_step(s, cfg, 15.0, 0.02, z);
        benchmark::DoNotOptimize(s);
    }
}
BENCHMARK(BM_KalmanStep);

void BM_ModelForward(benchmark::State& state)
{
    const ModelConfig cfg;
    const MlEstimator model(cfg);
    const auto batch = static_cast<std::size_t>(state.range(0));
    const auto X = gaussian(static_cast<Eigen::Index>(batch * cfg.window.L), kInputDim, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward_batch(X, batch));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_ModelForward)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state)
{
    const ModelConfig cfg;
    MlEstimator model(cfg);
    const std::size_t batch = 64;
    const auto X = gaussian(static_cast<Eigen::Index>(batch * cfg.window.L), kInputDim, 5);
    const Eigen::VectorXd y = 0.02 * gaussian(static_cast<Eigen::Index>(batch * (cfg.window.F + 1)), 1, 6);
    ad::Adam adam(1e-3);
    for (auto _ : state) {
        model.parameters().zero_grad();
        ad::Tape t;
        t.backward(ad::studentt_nll_loss(t, model.build(t, X, batch), y, cfg.output_scale, 1.0 / batch));
        adam.step(model.parameters());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

void BM_DfForward(benchmark::State& state)
{
    const DfParams p = DfParams::init(1);
    const Eigen::Matrix<double, 6, 1> x = gaussian(6, 1, 7);
    for (auto _ : state) {
        benchmark::DoNotOptimize(df_forward(x, p));
    }
}
BENCHMARK(BM_DfForward);

void BM_EmFit(benchmark::State& state)
{
    const auto X = gaussian(5000, 7, 8);
    EmOptions opt;
    opt.K = static_cast<std::size_t>(state.range(0));
    opt.max_iter = 50;
    for (auto _ : state) {
        benchmark::DoNotOptimize(em_fit(X, opt));
    }
}
BENCHMARK(BM_EmFit)->Arg(2)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_GfConditionalMode(benchmark::State& state)
{
    const auto X = gaussian(4000, 7, 9);
    EmOptions opt;
    opt.K = 8;
    opt.max_iter = 30;
    const auto fit = em_fit(X, opt);
    const GmmRegressor reg(fit.model, 6);
    const Eigen::VectorXd h = gaussian(6, 1, 10);
    for (auto _ : state) {
        benchmark::DoNotOptimize(reg.condition(h).mode());
    }
}
BENCHMARK(BM_GfConditionalMode);

} // namespace

BENCHMARK_MAIN();
