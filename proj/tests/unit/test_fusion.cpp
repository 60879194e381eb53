#include "slipsense/error.hpp"
#include "slipsense/fusion.hpp"
#include "slipsense/numeric.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

using namespace slipsense;

namespace {

FusionInput random_h(std::mt19937_64& rng, double spread = 0.03)
{
    std::normal_distribution<double> n(0.0, spread);
    return {n(rng), std::abs(n(rng)), n(rng), std::abs(n(rng)), n(rng), std::abs(n(rng))};
}

std::vector<FusionRow> rows(std::size_t count, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<FusionRow> out(count);
    for (auto& r : out) {
        r.h = random_h(rng);
    }
    return out;
}

// Plain re-evaluation of the three-branch rule.
double rule(const FusionInput& h, double v, double delta_th, double v_th)
{
    if (h.delta_ml <= delta_th) {
        return h.beta_ml;
    }
    const double vm = v <= v_th ? h.beta_vm1 : h.beta_vm2;
    return vm * h.delta_ml + h.beta_ml * (1.0 - h.delta_ml);
}

} // namespace

TEST(Calibration, RankProperties)
{
    const UncertaintyCalibration cal({0.5, 0.1, 0.9, 0.3, 0.7});
    EXPECT_DOUBLE_EQ(cal.normalize(0.5), 0.5);
    EXPECT_EQ(cal.normalize(0.05), 0.0);
    EXPECT_EQ(cal.normalize(2.0), 1.0);

    std::mt19937_64 rng(1);
    std::lognormal_distribution<double> ln(0.0, 1.0);
    std::vector<double> sample(301);
    for (auto& v : sample) {
        v = ln(rng);
    }
    const UncertaintyCalibration big(sample);
    std::vector<double> sorted = sample;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_DOUBLE_EQ(big.normalize(sorted[150]), 0.5);
    std::vector<double> probes(500);
    for (auto& v : probes) {
        v = ln(rng);
    }
    std::sort(probes.begin(), probes.end());
    for (std::size_t i = 1; i < probes.size(); ++i) {
        EXPECT_LE(big.normalize(probes[i - 1]), big.normalize(probes[i]));
    }
}

TEST(Calibration, UnfittedThrows)
{
    const UncertaintyCalibration cal;
    EXPECT_FALSE(cal.fitted());
    EXPECT_THROW(cal.normalize(1.0), StateError);
}

TEST(ExpertFusion, Examples)
{
    ExpertFusionConfig cfg;
    cfg.delta_th = 0.3;
    FusionInput h{deg2rad(1.0), 0.5, deg2rad(-4.0), 0.0, deg2rad(2.0), 0.0};
    EXPECT_NEAR(rad2deg(expert_fuse(h, cfg.v_th + 1.0, cfg)), 1.5, 1e-12);

    h.delta_ml = 1.0;
    EXPECT_EQ(expert_fuse(h, cfg.v_th, cfg), h.beta_vm1);
    EXPECT_EQ(expert_fuse_detail(h, cfg.v_th, cfg).branch, EfBranch::vm1);

    h.delta_ml = 0.3;
    EXPECT_EQ(expert_fuse(h, 30.0, cfg), h.beta_ml);
    EXPECT_EQ(expert_fuse_detail(h, 30.0, cfg).branch, EfBranch::ml);
}

TEST(ExpertFusion, ConvexAndBranchExact)
{
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ExpertFusionConfig cfg;
    for (int i = 0; i < 20000; ++i) {
        FusionInput h = random_h(rng);
        h.delta_ml = u(rng);
        const double v = 15.0 * u(rng);
        const auto r = expert_fuse_detail(h, v, cfg);
        ASSERT_DOUBLE_EQ(r.beta, rule(h, v, cfg.delta_th, cfg.v_th));
        const EfBranch expect = h.delta_ml <= cfg.delta_th ? EfBranch::ml : (v <= cfg.v_th ? EfBranch::vm1 : EfBranch::vm2);
        ASSERT_EQ(r.branch, expect);
        const double vm = v <= cfg.v_th ? h.beta_vm1 : h.beta_vm2;
        ASSERT_GE(r.beta, std::min(h.beta_ml, vm) - 1e-15);
        ASSERT_LE(r.beta, std::max(h.beta_ml, vm) + 1e-15);
    }
}

TEST(FusionRows, CountAlignmentAndCsvRoundTrip)
{
    WindowConfig w;
    w.L = 10;
    w.B = 2;
    w.F = 2;
    std::vector<Scenario> sc(2);
    for (std::size_t s = 0; s < 2; ++s) {
        for (std::size_t i = 0; i < 30 + 7 * s; ++i) {
            SensorFrame f;
            f.v_s = 10.0 + static_cast<double>(i);
            sc[s].frames.push_back(f);
            sc[s].beta_gt.push_back(0.001 * static_cast<double>(i + 100 * s));
        }
    }
    std::vector<std::vector<EstimateWithUncertainty>> ml(2);
    std::vector<BranchTrace> vmm(2);
    for (std::size_t s = 0; s < 2; ++s) {
        const std::size_t n = sc[s].size();
        ml[s].resize(window_count(n, w), {0.1, 0.2});
        vmm[s].beta_vm1.assign(n, 0.3);
        vmm[s].delta_vm1.assign(n, 0.4);
        vmm[s].beta_vm2.assign(n, 0.5);
        vmm[s].delta_vm2.assign(n, 0.6);
    }
    const auto r = build_fusion_rows(sc, ml, vmm, w);
    ASSERT_EQ(r.size(), window_count(30, w) + window_count(37, w));
    EXPECT_EQ(r.front().t, w.L);
    EXPECT_EQ(r.front().y, sc[0].beta_gt[w.L]);
    EXPECT_EQ(r.back().scenario, 1u);
    EXPECT_EQ(r.back().v_s, sc[1].frames[r.back().t].v_s);

    ml[1].pop_back();
    EXPECT_THROW(build_fusion_rows(sc, ml, vmm, w), DataError);

    const auto file = std::filesystem::temp_directory_path() / "slipsense_fusion_rows.csv";
    write_fusion_csv(file, r);
    const auto back = read_fusion_csv(file);
    ASSERT_EQ(back.size(), r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(back[i].h.vector(), r[i].h.vector());
        EXPECT_EQ(back[i].y, r[i].y);
        EXPECT_EQ(back[i].t, r[i].t);
    }
}

TEST(DeepFusion, ZeroWeightsGiveFinalBias)
{
    DfParams p = DfParams::zeros();
    p.params.get("l3.b").value(0, 0) = 0.42;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (int i = 0; i < 10; ++i) {
        Eigen::Matrix<double, 6, 1> x;
        for (auto& v : x) {
            v = n(rng);
        }
        EXPECT_EQ(df_forward(x, p), 0.42);
    }
}

TEST(DeepFusion, ZeroInputIsConstant)
{
    const DfParams p = DfParams::init(4);
    const Eigen::Matrix<double, 6, 1> zero = Eigen::Matrix<double, 6, 1>::Zero();
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    const double ref = df_forward(zero, p);
    for (int i = 0; i < 10; ++i) {
        Eigen::Matrix<double, 6, 1> x;
        for (auto& v : x) {
            v = n(rng);
        }
        EXPECT_EQ(df_forward(0.0 * x, p), ref);
    }
}

TEST(DeepFusion, GraphMatchesForwardAndGradients)
{
    DfParams p = DfParams::init(5);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    Eigen::MatrixXd X(40, 6);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
        X.data()[i] = n(rng);
    }
    Eigen::MatrixXd y(40, 1);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        y.data()[i] = n(rng);
    }
    {
        ad::Tape t(false);
        const Eigen::MatrixXd out = t.value(df_graph(t, X, p));
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            EXPECT_NEAR(out(i, 0), df_forward(X.row(i).transpose(), p), 1e-14);
        }
    }
    auto graph = [&](ad::Tape& t) { return ad::mean_squared_error(t, df_graph(t, X, p), y); };
    const auto r = slipsense::testing::check_parameter_gradients(
        p.params,
        [&] {
            ad::Tape t(false);
            return t.value(graph(t))(0, 0);
        },
        [&] {
            ad::Tape t;
            t.backward(graph(t));
        },
        p.params.scalar_count(), 6);
    EXPECT_EQ(r.checked, p.params.scalar_count());
    EXPECT_LT(r.worst_rel, 1e-4);
}

TEST(DeepFusion, LearnsIdentityOnMlEstimate)
{
    auto train = rows(20000, 10);
    auto val = rows(4000, 11);
    for (auto* s : {&train, &val}) {
        for (auto& r : *s) {
            r.y = r.h.beta_ml;
        }
    }
    DfTrainOptions opt;
    opt.batch = 100;
    const auto res = train_df(train, val, opt);
    EXPECT_LT(df_mse_deg2(res.model, val), 1e-6);
    ASSERT_EQ(res.log.size(), opt.epochs);
    for (std::size_t e = 1; e < 10; ++e) {
        EXPECT_LT(res.log[e].train_mse, res.log[0].train_mse);
    }
}

TEST(DeepFusion, ConstantTargetConvergesToMean)
{
    auto train = rows(3000, 12);
    auto val = rows(500, 13);
    const double target = deg2rad(2.5);
    for (auto* s : {&train, &val}) {
        for (auto& r : *s) {
            r.y = target;
        }
    }
    DfTrainOptions opt;
    opt.lr = 1e-2;
    opt.batch = 100;
    const auto res = train_df(train, val, opt);
    std::mt19937_64 rng(14);
    for (int i = 0; i < 20; ++i) {
        EXPECT_NEAR(rad2deg(res.model.predict(random_h(rng))), 2.5, 0.02);
    }
}

TEST(DeepFusion, DeterministicAndOrderInsensitiveUpToSeed)
{
    auto train = rows(1000, 15);
    auto val = rows(200, 16);
    for (auto* s : {&train, &val}) {
        for (auto& r : *s) {
            r.y = 0.5 * r.h.beta_vm2 + 0.5 * r.h.beta_ml;
        }
    }
    DfTrainOptions opt;
    opt.epochs = 5;
    opt.batch = 100;
    const auto a = train_df(train, val, opt);
    const auto b = train_df(train, val, opt);
    for (std::size_t i = 0; i < a.model.net.params.size(); ++i) {
        EXPECT_EQ(a.model.net.params[i].value, b.model.net.params[i].value);
    }
}

TEST(DeepFusion, RejectsEmptyAndBadSchedule)
{
    const auto some = rows(10, 17);
    const std::vector<FusionRow> none;
    EXPECT_THROW(train_df(none, some, DfTrainOptions{}), DataError);
    EXPECT_THROW(train_df(some, none, DfTrainOptions{}), DataError);
    DfTrainOptions bad;
    bad.lr_final = 2.0 * bad.lr;
    EXPECT_THROW(train_df(some, some, bad), ConfigError);
}

TEST(DeepFusion, AblationMasksDropOneSource)
{
    const auto cases = ablation_cases();
    ASSERT_EQ(cases.size(), 3u);
    for (const auto& c : cases) {
        EXPECT_EQ(std::count(c.keep.begin(), c.keep.end(), true), 4);
    }
    DfModel m;
    m.keep = cases[0].keep;
    const FusionInput h{1, 2, 3, 4, 5, 6};
    const auto x = m.features(h);
    for (int i = 0; i < 6; ++i) {
        if (!m.keep[static_cast<std::size_t>(i)]) {
            EXPECT_EQ(x[i], 0.0);
        }
    }
}
