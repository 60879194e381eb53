#include "slipsense/fusion.hpp"

#include "slipsense/dataset.hpp"
#include "slipsense/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

namespace slipsense {

UncertaintyCalibration::UncertaintyCalibration(std::vector<double> values) : sorted_(std::move(values))
{
    for (double v : sorted_) {
        if (!std::isfinite(v)) {
            throw DataError("uncertainty calibration: non-finite value");
        }
    }
    std::sort(sorted_.begin(), sorted_.end());
}

double UncertaintyCalibration::normalize(double delta_raw) const
{
    if (!fitted()) {
        throw StateError("uncertainty calibration used before fitting");
    }
    const auto lo = std::lower_bound(sorted_.begin(), sorted_.end(), delta_raw);
    const auto hi = std::upper_bound(lo, sorted_.end(), delta_raw);
    const double below = static_cast<double>(lo - sorted_.begin());
    const double equal = static_cast<double>(hi - lo);
    const double r = (below + 0.5 * equal) / static_cast<double>(sorted_.size());
    return std::clamp(r, 0.0, 1.0);
}

double UncertaintyCalibration::quantile(double q) const
{
    if (!fitted()) {
        throw StateError("uncertainty calibration used before fitting");
    }
    q = std::clamp(q, 0.0, 1.0);
    const double pos = q * static_cast<double>(sorted_.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const auto j = std::min(i + 1, sorted_.size() - 1);
    return sorted_[i] + (pos - static_cast<double>(i)) * (sorted_[j] - sorted_[i]);
}

void ExpertFusionConfig::validate() const
{
    if (!(delta_th > 0.0 && delta_th < 1.0)) {
        throw ConfigError("expert fusion: delta_th must lie in (0, 1)");
    }
    if (!(v_th > 0.0) || !std::isfinite(v_th)) {
        throw ConfigError("expert fusion: v_th must be positive");
    }
}

std::string_view to_string(EfBranch b) noexcept
{
    switch (b) {
    case EfBranch::ml:
        return "ml";
    case EfBranch::vm1:
        return "vm1";
    case EfBranch::vm2:
        return "vm2";
    }
    return "ml";
}

EfResult expert_fuse_detail(const FusionInput& h, double v_s, const ExpertFusionConfig& cfg)
{
    const double w = h.delta_ml;
    if (w <= cfg.delta_th) {
        return {h.beta_ml, EfBranch::ml};
    }
    if (v_s <= cfg.v_th) {
        return {h.beta_vm1 * w + h.beta_ml * (1.0 - w), EfBranch::vm1};
    }
    return {h.beta_vm2 * w + h.beta_ml * (1.0 - w), EfBranch::vm2};
}

std::vector<FusionRow> build_fusion_rows(std::span<const Scenario> scenarios,
                                         std::span<const std::vector<EstimateWithUncertainty>> ml,
                                         std::span<const BranchTrace> vmm, const WindowConfig& window)
{
    if (ml.size() != scenarios.size() || vmm.size() != scenarios.size()) {
        throw DataError("fusion dataset: branch outputs do not match the scenario count");
    }
    std::vector<FusionRow> rows;
    std::size_t skipped = 0;
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        const auto& sc = scenarios[s];
        const std::size_t n = window_count(sc.size(), window);
        if (ml[s].size() != n || vmm[s].size() != sc.size()) {
            throw DataError("fusion dataset: misaligned branch outputs for scenario '" + sc.id + "'");
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t t = first_window_end(window) + i;
            FusionRow r;
            r.h = {ml[s][i].beta,      ml[s][i].delta,      vmm[s].beta_vm1[t],
                   vmm[s].delta_vm1[t], vmm[s].beta_vm2[t], vmm[s].delta_vm2[t]};
            r.y = sc.beta_gt[t];
            r.v_s = sc.frames[t].v_s;
            r.a_y = sc.frames[t].a_y;
            r.scenario = s;
            r.t = t;
            if (!r.h.valid() || !std::isfinite(r.y)) {
                ++skipped;
                continue;
            }
            rows.push_back(r);
        }
    }
    if (skipped > 0) {
        spdlog::warn("fusion dataset: dropped {} rows with non-finite values", skipped);
    }
    return rows;
}

std::vector<FusionRow> build_fusion_dataset(const MlEstimator& model, const KfConfig& kf,
                                            std::span<const Scenario> scenarios, bool floor_at_one)
{
    std::vector<std::vector<EstimateWithUncertainty>> ml;
    std::vector<BranchTrace> vmm;
    ml.reserve(scenarios.size());
    vmm.reserve(scenarios.size());
    for (const auto& s : scenarios) {
        ml.push_back(predict_scenario(model, s, floor_at_one));
        vmm.push_back(run_vmms(s, kf));
    }
    return build_fusion_rows(scenarios, ml, vmm, model.config().window);
}

namespace {

std::filesystem::path meta_path(const std::filesystem::path& file)
{
    auto p = file;
    p.replace_filename(file.stem().string() + "_meta.csv");
    return p;
}

std::vector<std::string_view> split_fields(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& file, std::string_view header)
{
    std::ifstream in(file);
    if (!in) {
        throw DataError("cannot open '" + file.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) || std::string_view(line).substr(0, header.size()) != header) {
        throw DataError("'" + file.string() + "': unexpected header");
    }
    const std::size_t cols = split_fields(header).size();
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto f = split_fields(line);
        if (f.size() != cols) {
            throw DataError("'" + file.string() + "': wrong field count");
        }
        std::vector<double> v(cols);
        for (std::size_t j = 0; j < cols; ++j) {
            v[j] = parse_double(f[j]);
        }
        rows.push_back(std::move(v));
    }
    return rows;
}

} // namespace

void write_fusion_csv(const std::filesystem::path& file, std::span<const FusionRow> rows)
{
    std::ofstream out(file);
    std::ofstream meta(meta_path(file));
    if (!out || !meta) {
        throw DataError("cannot write '" + file.string() + "'");
    }
    out << kFusionCsvHeader << '\n';
    meta << kFusionMetaHeader << '\n';
    for (const auto& r : rows) {
        out << format_double(r.h.beta_ml) << ',' << format_double(r.h.delta_ml) << ','
            << format_double(r.h.beta_vm1) << ',' << format_double(r.h.delta_vm1) << ','
            << format_double(r.h.beta_vm2) << ',' << format_double(r.h.delta_vm2) << ',' << format_double(r.y)
            << '\n';
        meta << r.scenario << ',' << r.t << ',' << format_double(r.v_s) << ',' << format_double(r.a_y) << '\n';
    }
    if (!out || !meta) {
        throw DataError("write failed for '" + file.string() + "'");
    }
}

std::vector<FusionRow> read_fusion_csv(const std::filesystem::path& file)
{
    const auto main = read_numeric_csv(file, kFusionCsvHeader);
    const auto meta = read_numeric_csv(meta_path(file), kFusionMetaHeader);
    if (main.size() != meta.size()) {
        throw DataError("'" + file.string() + "': metadata row count differs");
    }
    std::vector<FusionRow> rows(main.size());
    for (std::size_t i = 0; i < main.size(); ++i) {
        const auto& m = main[i];
        rows[i].h = {m[0], m[1], m[2], m[3], m[4], m[5]};
        rows[i].y = m[6];
        rows[i].scenario = static_cast<std::size_t>(meta[i][0]);
        rows[i].t = static_cast<std::size_t>(meta[i][1]);
        rows[i].v_s = meta[i][2];
        rows[i].a_y = meta[i][3];
    }
    return rows;
}

HScaler fit_h_scaler(std::span<const FusionRow> rows)
{
    if (rows.size() < 2) {
        throw DataError("feature scaler needs at least two rows");
    }
    Eigen::Matrix<double, 6, 1> sum = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& r : rows) {
        sum += r.h.vector();
    }
    HScaler sc;
    sc.mean = sum / static_cast<double>(rows.size());
    Eigen::Matrix<double, 6, 1> sq = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& r : rows) {
        sq += (r.h.vector() - sc.mean).cwiseAbs2();
    }
    for (int j = 0; j < 6; ++j) {
        const double sd = std::sqrt(sq[j] / static_cast<double>(rows.size()));
        sc.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    return sc;
}

// --- deep fusion ---------------------------------------------------------------

namespace {
constexpr int kDfDims[4] = {6, 20, 10, 1};
const char* const kDfLayers[3] = {"l1", "l2", "l3"};
} // namespace

DfParams DfParams::init(std::uint64_t seed)
{
    DfParams p;
    std::mt19937_64 rng(mix_seed(seed, 0x6466ULL));
    for (int i = 0; i < 3; ++i) {
        const std::string n = kDfLayers[i];
        p.params.add(n + ".W", ad::xavier_uniform(kDfDims[i], kDfDims[i + 1], rng));
        p.params.add(n + ".b", ad::Matrix::Zero(1, kDfDims[i + 1]));
    }
    return p;
}

DfParams DfParams::zeros()
{
    DfParams p;
    for (int i = 0; i < 3; ++i) {
        const std::string n = kDfLayers[i];
        p.params.add(n + ".W", ad::Matrix::Zero(kDfDims[i], kDfDims[i + 1]));
        p.params.add(n + ".b", ad::Matrix::Zero(1, kDfDims[i + 1]));
    }
    return p;
}

double df_forward(const Eigen::Matrix<double, 6, 1>& x, const DfParams& p)
{
    const auto& ps = p.params;
    Eigen::RowVectorXd a = x.transpose();
    for (int i = 0; i < 3; ++i) {
        const std::string n = kDfLayers[i];
        a = a * ps.get(n + ".W").value + ps.get(n + ".b").value;
        if (i < 2) {
            a = a.cwiseMax(0.0);
        }
    }
    return a[0];
}

ad::Var df_graph(ad::Tape& t, const Eigen::MatrixXd& X, DfParams& p)
{
    auto a = t.constant(X);
    for (int i = 0; i < 3; ++i) {
        const std::string n = kDfLayers[i];
        a = ad::affine(t, a, t.parameter(p.params.get(n + ".W")), t.parameter(p.params.get(n + ".b")));
        if (i < 2) {
            a = ad::relu(t, a);
        }
    }
    return a;
}

Eigen::Matrix<double, 6, 1> DfModel::features(const FusionInput& h) const
{
    Eigen::Matrix<double, 6, 1> x = scaler.apply(h.vector());
    for (int j = 0; j < 6; ++j) {
        if (!keep[static_cast<std::size_t>(j)]) {
            x[j] = 0.0;
        }
    }
    return x;
}

double DfModel::predict(const FusionInput& h) const
{
    return output_scale * df_forward(features(h), net);
}

double df_mse_deg2(const DfModel& model, std::span<const FusionRow> rows)
{
    if (rows.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (const auto& r : rows) {
        const double e = rad2deg(model.predict(r.h) - r.y);
        s += e * e;
    }
    return s / static_cast<double>(rows.size());
}

namespace {

double batch_mse(const DfModel& model, std::span<const FusionRow> rows)
{
    // output units squared
    double s = 0.0;
    for (const auto& r : rows) {
        const double e = df_forward(model.features(r.h), model.net) - r.y / model.output_scale;
        s += e * e;
    }
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

} // namespace

DfTrainResult train_df(std::span<const FusionRow> train, std::span<const FusionRow> val, const DfTrainOptions& opt)
{
    if (train.empty() || val.empty()) {
        throw DataError("train_df: training and validation rows must be non-empty");
    }
    if (opt.batch == 0 || opt.epochs == 0 || !(opt.lr > 0.0) || !(opt.lr_final > 0.0) || opt.lr_final > opt.lr) {
        throw ConfigError("train_df: batch, epochs and lr must be positive with lr_final <= lr");
    }
    DfModel model;
    model.net = DfParams::init(opt.seed);
    model.scaler = fit_h_scaler(train);
    model.keep = opt.keep;

    const auto n = static_cast<Eigen::Index>(train.size());
    Eigen::MatrixXd X(n, 6);
    Eigen::VectorXd Y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        X.row(i) = model.features(train[static_cast<std::size_t>(i)].h).transpose();
        Y[i] = train[static_cast<std::size_t>(i)].y / model.output_scale;
    }

    DfTrainResult result{model, {}, 0};
    ad::Adam adam(opt.lr);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(mix_seed(opt.seed, 0x64667472ULL));
    double best = std::numeric_limits<double>::infinity();
    double initial = std::numeric_limits<double>::quiet_NaN();
    int above = 0;
    Eigen::MatrixXd Xb;
    Eigen::MatrixXd Yb;
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double phase = opt.epochs == 1 ? 1.0 : static_cast<double>(epoch - 1) / static_cast<double>(opt.epochs - 1);
        adam.set_learning_rate(opt.lr_final + 0.5 * (opt.lr - opt.lr_final) * (1.0 + std::cos(std::numbers::pi * phase)));
        double loss_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += opt.batch) {
            const auto count = static_cast<Eigen::Index>(std::min(opt.batch, order.size() - first));
            Xb.resize(count, 6);
            Yb.resize(count, 1);
            for (Eigen::Index i = 0; i < count; ++i) {
                const auto r = order[first + static_cast<std::size_t>(i)];
                Xb.row(i) = X.row(r);
                Yb(i, 0) = Y[r];
            }
            model.net.params.zero_grad();
            ad::Tape tape;
            const auto loss = ad::mean_squared_error(tape, df_graph(tape, Xb, model.net), Yb);
            const double lv = tape.value(loss)(0, 0);
            if (!std::isfinite(lv)) {
                throw NumericalError("train_df: non-finite loss in epoch " + std::to_string(epoch));
            }
            if (std::isnan(initial)) {
                initial = lv;
            }
            tape.backward(loss);
            adam.step(model.net.params);
            loss_sum += lv * static_cast<double>(count);
        }
        DfEpochLog log{epoch, loss_sum / static_cast<double>(n), batch_mse(model, val)};
        result.log.push_back(log);
        spdlog::debug("df epoch {:>3}  train_mse {:.6g}  val_mse {:.6g}", epoch, log.train_mse, log.val_mse);
        if (!std::isfinite(log.val_mse)) {
            throw NumericalError("train_df: non-finite validation loss in epoch " + std::to_string(epoch));
        }
        if (log.val_mse < best) {
            best = log.val_mse;
            result.model = model;
            result.best_epoch = epoch;
        }
        if (log.train_mse > 10.0 * initial) {
            if (++above >= 3) {
                throw NumericalError("train_df: loss diverged (above 10x the initial loss for 3 epochs)");
            }
        } else {
            above = 0;
        }
    }
    spdlog::info("train_df: best epoch {} with validation MSE {:.6g}", result.best_epoch, best);
    return result;
}

std::vector<AblationCase> ablation_cases()
{
    return {
        {"ml+vm1", {true, true, true, true, false, false}},
        {"ml+vm2", {true, true, false, false, true, true}},
        {"vm1+vm2", {false, false, true, true, true, true}},
    };
}

} // namespace slipsense
