#include "slipsense/error.hpp"
#include "slipsense/model.hpp"
#include "slipsense/numeric.hpp"
#include "slipsense/serialize.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace slipsense;

namespace {

ModelConfig tiny()
{
    ModelConfig c;
    c.window.L = 8;
    c.window.B = 2;
    c.window.F = 1;
    c.d = 8;
    c.heads = 2;
    c.u_factor = 2.0;
    c.seed = 3;
    return c;
}

// Scenario with noisy inputs. `beta` maps (frame index, rng) to the target.
template <typename Target>
Scenario toy(std::size_t n, std::uint64_t seed, Target beta, double p_br = 0.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> u(0.0, 1.0);
    Scenario s;
    s.id = "toy" + std::to_string(seed);
    for (std::size_t i = 0; i < n; ++i) {
        SensorFrame f;
        f.t = static_cast<double>(i) / 50.0;
        f.v_s = 10.0 + u(rng);
        f.theta_sw = 0.1 * u(rng);
        f.yaw_rate_obd = 0.05 * u(rng);
        f.a_y = u(rng);
        f.p_br = p_br;
        f.v_fl = f.v_fr = f.v_rl = f.v_rr = f.v_s;
        s.frames.push_back(f);
        s.beta_gt.push_back(beta(i, rng));
    }
    return s;
}

Eigen::MatrixXd window_of(const Scenario& s, std::size_t end, const WindowConfig& w)
{
    Eigen::MatrixXd X(static_cast<Eigen::Index>(w.L), static_cast<Eigen::Index>(kInputDim));
    fill_window_inputs(s, end, w, X);
    return X;
}

double gaussian_nll(double mu, double sigma, double y)
{
    const double r = (y - mu) / sigma;
    return 0.5 * std::log(2.0 * std::numbers::pi) + std::log(sigma) + 0.5 * r * r;
}

} // namespace

TEST(StudentT, HandValue)
{
    // -ln(Gamma(2) / (sqrt(3 pi) Gamma(1.5)))
    const double oracle = 0.5 * std::log(3.0 * std::numbers::pi) + std::lgamma(1.5) - std::lgamma(2.0);
    EXPECT_NEAR(studentt_nll(0.0, 1.0, 3.0, 0.0), oracle, 1e-14);
    EXPECT_NEAR(studentt_nll(0.0, 1.0, 3.0, 0.0), 1.0009, 1e-3);
}

TEST(StudentT, GaussianLimit)
{
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::uniform_real_distribution<double> s(0.05, 3.0);
    for (int i = 0; i < 1000; ++i) {
        const double mu = u(rng);
        const double sigma = s(rng);
        const double y = mu + sigma * u(rng);
        EXPECT_NEAR(studentt_nll(mu, sigma, 1e6, y), gaussian_nll(mu, sigma, y), 1e-3);
    }
}

TEST(StudentT, MinimisedAtTarget)
{
    const double y = 0.3;
    const double at = studentt_nll(y, 0.2, 4.0, y);
    for (double d : {1e-4, 1e-2, 0.5}) {
        EXPECT_GT(studentt_nll(y + d, 0.2, 4.0, y), at);
        EXPECT_GT(studentt_nll(y - d, 0.2, 4.0, y), at);
    }
}

TEST(StudentT, SequenceSumAndLengthCheck)
{
    const std::vector<StudentTParams> p = {{0.0, 1.0, 3.0}, {0.1, 0.5, 7.0}};
    const std::vector<double> y = {0.0, 0.3};
    EXPECT_NEAR(studentt_nll(p, y), studentt_nll(0.0, 1.0, 3.0, 0.0) + studentt_nll(0.1, 0.5, 7.0, 0.3), 1e-15);
    EXPECT_THROW(studentt_nll(p, std::vector<double>{1.0}), DataError);
}

TEST(StudentT, LossGradientIncludingDegreesOfFreedom)
{
    std::mt19937_64 rng(2);
    ad::ParameterSet ps;
    std::normal_distribution<double> n(0.0, 1.0);
    ad::Matrix o(50, 3);
    for (Eigen::Index i = 0; i < o.size(); ++i) {
        o.data()[i] = n(rng);
    }
    auto& head = ps.add("head", o);
    Eigen::VectorXd y(50);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        y[i] = 0.02 * n(rng);
    }
    const double s = std::numbers::pi / 180.0;
    const auto r = slipsense::testing::check_parameter_gradients(
        ps,
        [&] {
            ad::Tape t(false);
            return t.value(ad::studentt_nll_loss(t, t.parameter(head), y, s, 0.5))(0, 0);
        },
        [&] {
            ad::Tape t;
            t.backward(ad::studentt_nll_loss(t, t.parameter(head), y, s, 0.5));
        },
        150, 3);
    EXPECT_EQ(r.checked, 150u);
    EXPECT_LT(r.worst_rel, 1e-4);
}

TEST(Uncertainty, VarianceAndFloor)
{
    EXPECT_DOUBLE_EQ(predict_with_uncertainty({0.1, 1.0, 4.0}).delta, 2.0);
    EXPECT_DOUBLE_EQ(predict_with_uncertainty({0.1, 1.0, 4.0}).beta, 0.1);
    EXPECT_NEAR(predict_with_uncertainty({0.0, 0.3, 1e9}).delta, 0.09, 1e-9);
    EXPECT_DOUBLE_EQ(predict_with_uncertainty({0.0, 0.01, 5.0}, true).delta, 1.0);
    EXPECT_DOUBLE_EQ(predict_with_uncertainty({0.0, 2.0, 4.0}, true).delta, 8.0);
}

TEST(Distill, HalvesLengthAndKeepsConstants)
{
    ad::Tape t(false);
    Eigen::MatrixXd x = Eigen::MatrixXd::Constant(2 * 10, 4, 0.7);
    // centre tap identity, no bias: interior rows stay constant
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(12, 4);
    W.middleRows(4, 4).setIdentity();
    const auto out = t.value(distill(t, t.constant(x), t.constant(W), t.constant(Eigen::MatrixXd::Zero(1, 4)), 10));
    EXPECT_EQ(out.rows(), 10);
    EXPECT_EQ(out.cols(), 4);
    EXPECT_LT((out.array() - 0.7).abs().maxCoeff(), 1e-15);
}

TEST(Distill, OddLengthRepeatsLastRow)
{
    ad::Tape t(false);
    Eigen::MatrixXd x(5, 1);
    x << 1, 4, 2, 3, 9;
    const auto out = t.value(ad::maxpool_time(t, t.constant(x), 5));
    ASSERT_EQ(out.rows(), 3);
    EXPECT_EQ(out(0, 0), 4.0);
    EXPECT_EQ(out(1, 0), 3.0);
    EXPECT_EQ(out(2, 0), 9.0);
}

TEST(Distill, MaxPoolIsMonotone)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd x(8, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = std::abs(n(rng));
    }
    ad::Tape t(false);
    const Eigen::MatrixXd base = t.value(ad::maxpool_time(t, t.constant(x), 8));
    for (Eigen::Index r = 0; r < 8; ++r) {
        Eigen::MatrixXd y = x;
        y.row(r) *= 2.0;
        const Eigen::MatrixXd more = t.value(ad::maxpool_time(t, t.constant(y), 8));
        EXPECT_TRUE((more.array() >= base.array()).all());
    }
}

TEST(Distill, HundredStepWindowHalves)
{
    ModelConfig c;
    c.window.L = 100;
    EXPECT_EQ(c.distilled_len(), 50u);
}

TEST(Forward, ShapesAndConstantHead)
{
    ModelConfig c = tiny();
    c.output_scale = 1.0;
    MlEstimator m(c);
    const Scenario s = toy(40, 1, [](std::size_t, auto&) { return 0.0; });
    const auto X = window_of(s, 20, c.window);
    EXPECT_EQ(m.forward(X).size(), c.window.F + 1);

    m.parameters().get("head.W").value.setZero();
    m.parameters().get("head.b").value.setZero();
    for (const auto& p : m.forward(X)) {
        EXPECT_EQ(p.mu, 0.0);
        EXPECT_DOUBLE_EQ(p.sigma, softplus(0.0));
        EXPECT_DOUBLE_EQ(p.nu, 3.0 + softplus(0.0));
    }
}

TEST(Forward, PositionalEncodingMakesOrderMatter)
{
    const ModelConfig c = tiny();
    const MlEstimator m(c);
    const Scenario s = toy(40, 2, [](std::size_t, auto&) { return 0.0; });
    const auto X = window_of(s, 20, c.window);
    Eigen::MatrixXd Y = X;
    Y.row(0).swap(Y.row(3)); // encoder-only rows
    const auto a = m.forward(X);
    const auto b = m.forward(Y);
    EXPECT_NE(a[0].mu, b[0].mu);
}

TEST(Forward, BatchMatchesSingleWindows)
{
    const ModelConfig c = tiny();
    const MlEstimator m(c);
    const Scenario s = toy(60, 3, [](std::size_t, auto&) { return 0.0; });
    const std::vector<Scenario> one = {s};
    const auto refs = enumerate_windows(one, c.window);
    const auto P = m.forward_batch(stack_windows(one, refs, c.window, 0, 4), 4);
    for (std::size_t w = 0; w < 4; ++w) {
        const auto single = m.forward(window_of(s, refs[w].end, c.window));
        for (std::size_t k = 0; k <= c.window.F; ++k) {
            EXPECT_NEAR(P(static_cast<Eigen::Index>(w * (c.window.F + 1) + k), 0), single[k].mu, 1e-14);
        }
    }
}

TEST(Forward, FullModelGradients)
{
    const ModelConfig c = tiny();
    MlEstimator m(c);
    // non-trivial head so every path carries gradient
    std::mt19937_64 rng(7);
    m.parameters().get("head.W").value = ad::xavier_uniform(8, 3, rng);
    std::vector<Scenario> data = {toy(60, 4, [](std::size_t i, auto&) { return 0.01 * std::sin(0.2 * i); })};
    m.scaler() = InputScaler::fit(data);
    const auto refs = enumerate_windows(data, c.window);
    const std::size_t batch = 3;
    const auto X = stack_windows(data, refs, c.window, 0, batch);
    Eigen::VectorXd y(static_cast<Eigen::Index>(batch * (c.window.F + 1)));
    for (std::size_t w = 0; w < batch; ++w) {
        for (std::size_t k = 0; k <= c.window.F; ++k) {
            y[static_cast<Eigen::Index>(w * (c.window.F + 1) + k)] = data[0].beta_gt[refs[w].end + k];
        }
    }
    auto graph = [&](ad::Tape& t) { return ad::studentt_nll_loss(t, m.build(t, X, batch), y, c.output_scale); };
    const auto r = slipsense::testing::check_parameter_gradients(
        m.parameters(),
        [&] {
            ad::Tape t(false);
            return t.value(graph(t))(0, 0);
        },
        [&] {
            ad::Tape t;
            t.backward(graph(t));
        },
        60, 11);
    EXPECT_EQ(r.checked, 60u);
    EXPECT_LT(r.worst_rel, 1e-4);
}

TEST(Forward, RejectsBadShapes)
{
    const MlEstimator m(tiny());
    EXPECT_THROW(m.forward(Eigen::MatrixXd::Zero(7, 9)), Error);
    ModelConfig bad = tiny();
    bad.heads = 3;
    EXPECT_THROW(MlEstimator{bad}, ConfigError);
}

TEST(Training, ConstantTargetIsLearned)
{
    const ModelConfig c = tiny();
    const auto constant = [](std::size_t, auto&) { return deg2rad(1.5); };
    std::vector<Scenario> train;
    for (std::uint64_t i = 0; i < 4; ++i) {
        train.push_back(toy(120, 10 + i, constant));
    }
    const std::vector<Scenario> val = {toy(120, 20, constant)};
    TrainOptions opt;
    opt.lr = 1e-3;
    opt.batch = 32;
    opt.epochs = 30;
    opt.train_stride = 1;
    opt.val_stride = 1;
    const auto r = train_ml(train, val, c, opt);
    EXPECT_LT(score_ml(r.model, val).mae_deg, 0.05);
    ASSERT_EQ(r.log.size(), 30u);
    for (std::size_t e = 0; e + 5 < r.log.size(); ++e) {
        EXPECT_LE(r.log[e + 5].train_nll, r.log[e].train_nll) << "epoch " << e + 1;
    }
}

TEST(Training, LearnsHeteroscedasticNoise)
{
    const ModelConfig c = tiny();
    // brake pressure flags the noisy regime
    const auto quiet = [](std::size_t, auto& rng) { return deg2rad(0.05) * std::normal_distribution<double>()(rng); };
    const auto loud = [](std::size_t, auto& rng) { return deg2rad(1.0) * std::normal_distribution<double>()(rng); };
    std::vector<Scenario> train;
    for (std::uint64_t i = 0; i < 3; ++i) {
        train.push_back(toy(150, 30 + i, quiet, 0.0));
        train.push_back(toy(150, 40 + i, loud, 20.0));
    }
    const std::vector<Scenario> val = {toy(150, 50, quiet, 0.0), toy(150, 51, loud, 20.0)};
    TrainOptions opt;
    opt.lr = 5e-3;
    opt.batch = 32;
    opt.epochs = 15;
    opt.train_stride = 1;
    const auto r = train_ml(train, val, c, opt);
    const auto mean_delta = [&](const Scenario& s) {
        double sum = 0.0;
        const auto p = predict_scenario(r.model, s);
        for (const auto& e : p) {
            sum += e.delta;
        }
        return sum / static_cast<double>(p.size());
    };
    EXPECT_GT(mean_delta(val[1]), mean_delta(val[0]));
}

TEST(Training, LeakAndEmptySplitsRejected)
{
    const ModelConfig c = tiny();
    const std::vector<Scenario> none;
    const std::vector<Scenario> one = {toy(40, 1, [](std::size_t, auto&) { return 0.0; })};
    EXPECT_THROW(train_ml(none, one, c, TrainOptions{}), DataError);
    EXPECT_THROW(train_ml(one, none, c, TrainOptions{}), DataError);

    // a target copied into an input channel must be caught
    Scenario leak = toy(60, 2, [](std::size_t i, auto&) { return 0.001 * static_cast<double>(i); });
    for (std::size_t i = 0; i < leak.size(); ++i) {
        leak.frames[i].a_y = leak.beta_gt[i];
    }
    const std::vector<Scenario> leaky = {leak};
    TrainOptions opt;
    opt.epochs = 1;
    EXPECT_THROW(train_ml(leaky, one, c, opt), DataError);
}

TEST(Training, DeterministicForFixedSeed)
{
    const ModelConfig c = tiny();
    const auto target = [](std::size_t i, auto&) { return 0.01 * std::sin(0.1 * static_cast<double>(i)); };
    const std::vector<Scenario> train = {toy(100, 60, target), toy(100, 61, target)};
    const std::vector<Scenario> val = {toy(100, 62, target)};
    TrainOptions opt;
    opt.epochs = 2;
    const auto a = train_ml(train, val, c, opt);
    const auto b = train_ml(train, val, c, opt);
    for (std::size_t i = 0; i < a.model.parameters().size(); ++i) {
        EXPECT_EQ(a.model.parameters()[i].value, b.model.parameters()[i].value);
    }
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    const ModelConfig c = tiny();
    const auto target = [](std::size_t i, auto&) { return 0.01 * std::cos(0.1 * static_cast<double>(i)); };
    const std::vector<Scenario> train = {toy(100, 70, target)};
    const std::vector<Scenario> val = {toy(100, 71, target)};
    TrainOptions opt;
    opt.epochs = 2;
    auto r = train_ml(train, val, c, opt);
    const auto file = std::filesystem::temp_directory_path() / "slipsense_test_ml.ckpt.json";
    save_ml_checkpoint(file, r.model, &r.optimizer, r.log);
    ad::Adam restored;
    const MlEstimator back = load_ml_checkpoint(file, &restored);
    const auto p0 = predict_scenario(r.model, val[0]);
    const auto p1 = predict_scenario(back, val[0]);
    ASSERT_EQ(p0.size(), p1.size());
    for (std::size_t i = 0; i < p0.size(); ++i) {
        EXPECT_EQ(p0[i].beta, p1[i].beta);
        EXPECT_EQ(p0[i].delta, p1[i].delta);
    }
    EXPECT_EQ(restored.steps(), r.optimizer.steps());
    EXPECT_EQ(restored.second_moments().back(), r.optimizer.second_moments().back());

    write_text(file, "{\"format\": \"something else\"}");
    EXPECT_THROW(load_ml_checkpoint(file), DataError);
    std::filesystem::remove(file);
}
