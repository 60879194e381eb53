#include "slipsense/pipeline.hpp"

#include "slipsense/dataset.hpp"
#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"
#include "slipsense/serialize.hpp"
#include "slipsense/vehsim.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>

namespace slipsense {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string_view to_string(Stage s) noexcept
{
    switch (s) {
    case Stage::simulate: return "simulate";
    case Stage::train_ml: return "train-ml";
    case Stage::build_fusion: return "build-fusion";
    case Stage::train_df: return "train-df";
    case Stage::train_gf: return "train-gf";
    case Stage::evaluate: return "evaluate";
    case Stage::validate_hypothesis: return "validate-hypothesis";
    case Stage::ablate: return "ablate";
    }
    return "unknown";
}

Stage stage_from_string(std::string_view name)
{
    std::string n(name);
    std::replace(n.begin(), n.end(), '_', '-');
    for (Stage s : all_stages()) {
        if (to_string(s) == n) {
            return s;
        }
    }
    throw ConfigError("unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> all_stages()
{
    return {Stage::simulate, Stage::train_ml,  Stage::build_fusion,        Stage::train_df,
            Stage::train_gf, Stage::evaluate, Stage::validate_hypothesis, Stage::ablate};
}

fs::path RunPaths::ml_fold(std::size_t fold) const
{
    return ml_fold_dir / ("fold" + std::to_string(fold) + ".ckpt.json");
}

RunPaths RunPaths::under(const fs::path& root)
{
    RunPaths p;
    p.root = root;
    p.data = root / "data";
    p.ml_ckpt = root / "ml.ckpt.json";
    p.ml_fold_dir = root / "ml_folds";
    p.fusion_dir = root / "fusion";
    p.df_ckpt = root / "df.ckpt.json";
    p.gf_ckpt = root / "gf.ckpt.json";
    p.report_dir = root / "report";
    return p;
}

fs::path RunPaths::fusion_split(std::string_view split) const
{
    return fusion_dir / ("fusion_" + std::string(split) + ".csv");
}

fs::path default_run_root()
{
    if (const char* env = std::getenv("SLIPSENSE_RUN_ROOT"); env != nullptr && *env != '\0') {
        return fs::path(env);
    }
    return fs::path("runs");
}

namespace {

void require(const fs::path& artifact, Stage producer)
{
    if (!fs::exists(artifact)) {
        throw DependencyError("missing artifact '" + artifact.string() + "'; run '" + std::string(to_string(producer)) +
                              "' first");
    }
}

fs::path dataset_manifest(const RunPaths& paths)
{
    return paths.data / "manifest.csv";
}

std::vector<Scenario> load_data(const RunPaths& paths)
{
    require(dataset_manifest(paths), Stage::simulate);
    return read_dataset(paths.data);
}

void ensure_parent(const fs::path& file)
{
    if (file.has_parent_path()) {
        fs::create_directories(file.parent_path());
    }
}

json matrix_json(const Eigen::Matrix2d& m)
{
    return json::array({m(0, 0), m(0, 1), m(1, 0), m(1, 1)});
}

Eigen::Matrix2d matrix_from_json(const json& j)
{
    if (!j.is_array() || j.size() != 4) {
        throw DataError("fusion context: expected a 2x2 matrix");
    }
    Eigen::Matrix2d m;
    m << j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>();
    return m;
}

json correlation_json(const CorrelationTest& c)
{
    return {{"n", c.n},
            {"r", c.r},
            {"t_star", c.t_star},
            {"p_value", c.p_value},
            {"critical", c.critical},
            {"reject_at_99", c.reject_at_99}};
}

json metrics_json(const Metrics& m)
{
    return {{"mae_deg", m.mae}, {"mse_deg2", m.mse}, {"me_deg", m.me}, {"count", m.count}};
}

void write_json(const fs::path& file, const json& j)
{
    ensure_parent(file);
    write_text(file, j.dump(2) + "\n");
}

} // namespace

Splits split_scenarios(std::vector<Scenario> all, const RunConfig& cfg)
{
    Splits s;
    s.indices = scenario_split(all.size(), cfg.split, cfg.split_seed());
    s.train = select(all, s.indices.train);
    s.val = select(all, s.indices.val);
    s.test = select(all, s.indices.test);
    return s;
}

FusionInput expert_input(const FusionInput& h, const FusionData& data)
{
    FusionInput out = h;
    out.delta_ml = data.context.ef_raw ? std::clamp(h.delta_ml, 0.0, 1.0) : data.calibration.normalize(h.delta_ml);
    return out;
}

std::string file_hash(const fs::path& file)
{
    return hex64(fnv1a64(read_text(file)));
}

// --- stages --------------------------------------------------------------------

std::vector<Scenario> stage_simulate(const RunConfig& cfg, const RunPaths& paths)
{
    auto scenarios = generate_dataset(cfg.dataset_spec());
    write_dataset(paths.data, scenarios);
    spdlog::info("simulate: {} scenarios written to {}", scenarios.size(), paths.data.string());
    return scenarios;
}

TrainResult stage_train_ml(const RunConfig& cfg, const RunPaths& paths)
{
    const Splits s = split_scenarios(load_data(paths), cfg);
    spdlog::info("train-ml: {} train / {} val scenarios", s.train.size(), s.val.size());
    const auto on_epoch = [](const EpochLog& e) {
        spdlog::info("train-ml: epoch {} train_nll {:.4f} val_nll {:.4f} val_mae {:.4f} deg ({:.1f} s)", e.epoch,
                     e.train_nll, e.val_nll, e.val_mae_deg, e.seconds);
    };
    TrainResult r = train_ml(s.train, s.val, cfg.model_config(), cfg.ml_options(), on_epoch);
    ensure_parent(paths.ml_ckpt);
    save_ml_checkpoint(paths.ml_ckpt, r.model, &r.optimizer, r.log);
    spdlog::info("train-ml: best epoch {} saved to {}", r.best_epoch, paths.ml_ckpt.string());

    fs::remove_all(paths.ml_fold_dir);
    const std::size_t folds = cfg.fusion_folds;
    if (folds >= 2) {
        if (s.train.size() < folds) {
            throw ConfigError("train-ml: fewer training scenarios than fusion.folds");
        }
        fs::create_directories(paths.ml_fold_dir);
        for (std::size_t f = 0; f < folds; ++f) {
            std::vector<Scenario> fit;
            for (std::size_t i = 0; i < s.train.size(); ++i) {
                if (i % folds != f) {
                    fit.push_back(s.train[i]);
                }
            }
            TrainOptions opt = cfg.ml_options();
            opt.seed = mix_seed(opt.seed, f + 1);
            spdlog::info("train-ml: fold {} of {} on {} scenarios", f + 1, folds, fit.size());
            const TrainResult fr = train_ml(fit, s.val, cfg.model_config(), opt, on_epoch);
            save_ml_checkpoint(paths.ml_fold(f), fr.model, nullptr, fr.log);
        }
    }
    return r;
}

FusionData stage_build_fusion(const RunConfig& cfg, const RunPaths& paths)
{
    require(paths.ml_ckpt, Stage::train_ml);
    const Splits s = split_scenarios(load_data(paths), cfg);
    const MlEstimator model = load_ml_checkpoint(paths.ml_ckpt);
    if (model.config().window.L != cfg.model.window.L || model.config().window.F != cfg.model.window.F) {
        throw ConfigError("build-fusion: checkpoint window does not match the configuration");
    }

    KfConfig base = cfg.kf_base();
    base.R = estimate_measurement_noise(s.train, base.model.geometry);
    const TunedKf tuned = tune_process_noise(base, s.val, cfg.kf_grid);
    spdlog::info("build-fusion: Q = diag({:.3g}, {:.3g}), val MAE {:.4f} deg", tuned.config.Q(0, 0),
                 tuned.config.Q(1, 1), rad2deg(tuned.val_mae));

    FusionData d;
    d.context.kf = tuned.config;
    d.context.kf_val_mae_deg = rad2deg(tuned.val_mae);
    d.context.split = s.indices;
    d.context.ef_raw = cfg.ef_raw;
    const bool floor = cfg.ml_delta_floor_at_one;
    if (cfg.fusion_folds >= 2) {
        // training rows come from models that never saw their scenario
        std::vector<MlEstimator> fold_models;
        for (std::size_t f = 0; f < cfg.fusion_folds; ++f) {
            require(paths.ml_fold(f), Stage::train_ml);
            fold_models.push_back(load_ml_checkpoint(paths.ml_fold(f)));
        }
        for (std::size_t i = 0; i < s.train.size(); ++i) {
            auto rows = build_fusion_dataset(fold_models[i % cfg.fusion_folds], tuned.config,
                                             std::span(&s.train[i], 1), floor);
            for (auto& r : rows) {
                r.scenario = i;
            }
            d.train.insert(d.train.end(), rows.begin(), rows.end());
        }
    } else {
        d.train = build_fusion_dataset(model, tuned.config, s.train, floor);
    }
    d.val = build_fusion_dataset(model, tuned.config, s.val, floor);
    d.test = build_fusion_dataset(model, tuned.config, s.test, floor);

    std::vector<double> deltas;
    deltas.reserve(d.val.size());
    for (const auto& r : d.val) {
        deltas.push_back(r.h.delta_ml);
    }
    d.calibration = UncertaintyCalibration(std::move(deltas));
    d.context.delta_th_raw = d.calibration.quantile(cfg.ef_quantile);
    d.context.ef.v_th = kmh2ms(cfg.ef_v_th_kmh);
    d.context.ef.delta_th = cfg.ef_raw ? d.context.delta_th_raw : d.calibration.normalize(d.context.delta_th_raw);
    d.context.ef.validate();

    fs::create_directories(paths.fusion_dir);
    write_fusion_csv(paths.fusion_split("train"), d.train);
    write_fusion_csv(paths.fusion_split("val"), d.val);
    write_fusion_csv(paths.fusion_split("test"), d.test);

    const auto& kf = d.context.kf;
    json ctx;
    ctx["kf"] = {{"Q", matrix_json(kf.Q)},
                 {"R", matrix_json(kf.R)},
                 {"dt", kf.model.dt},
                 {"freeze_speed", kf.model.freeze_speed},
                 {"val_mae_deg", d.context.kf_val_mae_deg}};
    ctx["ef"] = {{"delta_th", d.context.ef.delta_th},
                 {"delta_th_raw", d.context.delta_th_raw},
                 {"quantile", cfg.ef_quantile},
                 {"v_th", d.context.ef.v_th},
                 {"raw", d.context.ef_raw}};
    ctx["split"] = {{"train", s.indices.train}, {"val", s.indices.val}, {"test", s.indices.test}};
    write_json(paths.fusion_context(), ctx);
    spdlog::info("build-fusion: {} / {} / {} rows, delta_th {:.4f}", d.train.size(), d.val.size(), d.test.size(),
                 d.context.ef.delta_th);
    return d;
}

FusionData load_fusion_data(const RunPaths& paths)
{
    require(paths.fusion_context(), Stage::build_fusion);
    for (const char* split : {"train", "val", "test"}) {
        require(paths.fusion_split(split), Stage::build_fusion);
    }
    FusionData d;
    try {
        const json ctx = json::parse(read_text(paths.fusion_context()));
        auto& kf = d.context.kf;
        kf.Q = matrix_from_json(ctx.at("kf").at("Q"));
        kf.R = matrix_from_json(ctx.at("kf").at("R"));
        kf.model.dt = ctx.at("kf").at("dt").get<double>();
        kf.model.freeze_speed = ctx.at("kf").at("freeze_speed").get<double>();
        d.context.kf_val_mae_deg = ctx.at("kf").at("val_mae_deg").get<double>();
        d.context.ef.delta_th = ctx.at("ef").at("delta_th").get<double>();
        d.context.ef.v_th = ctx.at("ef").at("v_th").get<double>();
        d.context.delta_th_raw = ctx.at("ef").at("delta_th_raw").get<double>();
        d.context.ef_raw = ctx.at("ef").at("raw").get<bool>();
        d.context.split.train = ctx.at("split").at("train").get<std::vector<std::size_t>>();
        d.context.split.val = ctx.at("split").at("val").get<std::vector<std::size_t>>();
        d.context.split.test = ctx.at("split").at("test").get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
        throw DataError("fusion context '" + paths.fusion_context().string() + "': " + e.what());
    }
    d.train = read_fusion_csv(paths.fusion_split("train"));
    d.val = read_fusion_csv(paths.fusion_split("val"));
    d.test = read_fusion_csv(paths.fusion_split("test"));
    std::vector<double> deltas;
    deltas.reserve(d.val.size());
    for (const auto& r : d.val) {
        deltas.push_back(r.h.delta_ml);
    }
    d.calibration = UncertaintyCalibration(std::move(deltas));
    return d;
}

DfTrainResult stage_train_df(const RunConfig& cfg, const RunPaths& paths)
{
    const FusionData d = load_fusion_data(paths);
    DfTrainResult r = train_df(d.train, d.val, cfg.df_options());
    ensure_parent(paths.df_ckpt);
    save_df_checkpoint(paths.df_ckpt, r.model, cfg.df_seed());
    const auto& best = r.log.at(r.best_epoch > 0 ? r.best_epoch - 1 : 0);
    spdlog::info("train-df: best epoch {} val MSE {:.5f} deg^2", r.best_epoch, best.val_mse);
    return r;
}

GfFitResult stage_train_gf(const RunConfig& cfg, const RunPaths& paths)
{
    const FusionData d = load_fusion_data(paths);
    GfFitResult r = fit_gf(d.train, d.val, cfg.gf_k, cfg.em_options());
    ensure_parent(paths.gf_ckpt);
    save_gf_checkpoint(paths.gf_ckpt, r.model, cfg.gf_seed());
    for (const auto& [k, ll] : r.val_log_likelihood) {
        spdlog::info("train-gf: K = {} val mean log-likelihood {:.4f}", k, ll);
    }
    spdlog::info("train-gf: chose K = {}", r.chosen_k);
    return r;
}

Evaluation stage_evaluate(const RunConfig& cfg, const RunPaths& paths)
{
    require(paths.df_ckpt, Stage::train_df);
    require(paths.gf_ckpt, Stage::train_gf);
    const FusionData d = load_fusion_data(paths);
    const DfModel df = load_df_checkpoint(paths.df_ckpt);
    const GfModel gf = load_gf_checkpoint(paths.gf_ckpt);
    const double nan = std::numeric_limits<double>::quiet_NaN();

    std::vector<ModelSeries> series = {{"ml", {}, {}},  {"vm1", {}, {}}, {"vm2", {}, {}},
                                       {"ef", {}, {}},  {"df", {}, {}},  {"gf", {}, {}}};
    std::vector<double> gt;
    std::vector<double> v_s;
    std::vector<double> a_y;
    Evaluation ev;
    for (const auto& row : d.test) {
        const FusionInput& h = row.h;
        const FusionInput he = expert_input(h, d);
        const EfResult ef = expert_fuse_detail(he, row.v_s, d.context.ef);
        ev.ef.push_back({ef.branch, ef.beta, he.delta_ml});
        const double betas[6] = {h.beta_ml, h.beta_vm1, h.beta_vm2, ef.beta, df.predict(h), gf.predict(h)};
        const double deltas[6] = {h.delta_ml, h.delta_vm1, h.delta_vm2, nan, nan, nan};
        for (std::size_t m = 0; m < series.size(); ++m) {
            series[m].beta.push_back(betas[m]);
            series[m].delta.push_back(deltas[m]);
        }
        gt.push_back(row.y);
        v_s.push_back(row.v_s);
        a_y.push_back(row.a_y);
    }
    ev.report = make_report(series, gt, v_s, a_y);
    ev.report.extra["ef.delta_th"] = d.context.ef.delta_th;
    ev.report.extra["ef.delta_th_raw"] = d.context.delta_th_raw;
    ev.report.extra["kf.q_beta"] = d.context.kf.Q(0, 0);
    ev.report.extra["kf.q_yaw"] = d.context.kf.Q(1, 1);
    ev.report.extra["kf.r_beta"] = d.context.kf.R(0, 0);
    ev.report.extra["kf.r_yaw"] = d.context.kf.R(1, 1);
    ev.report.extra["gf.components"] = static_cast<double>(gf.gmm.size());

    fs::create_directories(paths.report_dir);
    write_report(paths.report_dir, ev.report);
    write_text(paths.report_dir / "config.txt", cfg.to_text());

    {
        std::ofstream audit(paths.report_dir / "ef_audit.csv", std::ios::binary);
        if (!audit) {
            throw DataError("cannot write EF audit in '" + paths.report_dir.string() + "'");
        }
        audit << "scenario,t,v_s,delta_used,branch,beta_ef\n";
        for (std::size_t i = 0; i < d.test.size(); ++i) {
            audit << d.test[i].scenario << ',' << d.test[i].t << ',' << format_double(d.test[i].v_s) << ','
                  << format_double(ev.ef[i].delta_used) << ',' << to_string(ev.ef[i].branch) << ','
                  << format_double(ev.ef[i].beta) << '\n';
        }
    }

    {
        std::ofstream pred(paths.report_dir / "predictions.csv", std::ios::binary);
        if (!pred) {
            throw DataError("cannot write predictions in '" + paths.report_dir.string() + "'");
        }
        pred << "scenario,t,v_s,a_y,beta_gt";
        for (const auto& m : series) {
            pred << ",beta_" << m.name;
        }
        pred << ",delta_ml\n";
        for (std::size_t i = 0; i < d.test.size(); ++i) {
            pred << d.test[i].scenario << ',' << d.test[i].t << ',' << format_double(v_s[i]) << ','
                 << format_double(a_y[i]) << ',' << format_double(gt[i]);
            for (const auto& m : series) {
                pred << ',' << format_double(m.beta[i]);
            }
            pred << ',' << format_double(d.test[i].h.delta_ml) << '\n';
        }
    }

    if (fs::exists(dataset_manifest(paths))) {
        const auto all = read_dataset(paths.data);
        const auto test = select(all, d.context.split.test);
        try {
            const std::size_t idx = find_maneuver(test, Maneuver::figure_eight);
            const Scenario& sc = test[idx];
            std::vector<ModelSeries> trace;
            for (const auto& m : series) {
                trace.push_back({m.name, {}, {}});
            }
            std::vector<double> t;
            std::vector<double> g;
            for (std::size_t i = 0; i < d.test.size(); ++i) {
                if (d.test[i].scenario != idx) {
                    continue;
                }
                t.push_back(sc.frames[d.test[i].t].t);
                g.push_back(sc.beta_gt[d.test[i].t]);
                for (std::size_t m = 0; m < series.size(); ++m) {
                    trace[m].beta.push_back(series[m].beta[i]);
                    trace[m].delta.push_back(series[m].delta[i]);
                }
            }
            write_trace_csv(paths.report_dir / "figure_eight.csv", t, g, trace);
            write_trace_svg(paths.report_dir / "figure_eight.svg", t, g, trace, "figure-eight " + sc.id);
            ev.trace_scenario = sc.id;
        } catch (const DataError& e) {
            spdlog::warn("evaluate: no figure-eight trace: {}", e.what());
        }
    } else {
        spdlog::warn("evaluate: dataset not found, figure-eight trace skipped");
    }

    for (const auto& name : ev.report.models) {
        const auto& m = ev.report.overall.at(name);
        spdlog::info("evaluate: {:>3} MAE {:.4f} deg  MSE {:.5f} deg^2  ME {:.3f} deg", name, m.mae, m.mse, m.me);
    }
    return ev;
}

HypothesisResult stage_validate_hypothesis(const RunConfig& cfg, const RunPaths& paths)
{
    auto all = load_data(paths);
    KfConfig kf;
    std::vector<Scenario> test;
    if (fs::exists(paths.fusion_context())) {
        const FusionData d = load_fusion_data(paths);
        kf = d.context.kf;
        kf.model.geometry = cfg.data.geometry;
        test = select(all, d.context.split.test);
    } else {
        Splits s = split_scenarios(std::move(all), cfg);
        kf = cfg.kf_base();
        kf.R = estimate_measurement_noise(s.train, kf.model.geometry);
        test = std::move(s.test);
    }
    const ResidualSet res = collect_residuals(test, kf, cfg.model.window);
    HypothesisResult h{residual_correlation(res.vmm1), residual_correlation(res.vmm2)};
    write_json(paths.hypothesis(), {{"vmm1", correlation_json(h.vmm1)}, {"vmm2", correlation_json(h.vmm2)}});
    spdlog::info("validate-hypothesis: VMM1 r = {:.4f}, t* = {:.1f}, reject at 99%: {}", h.vmm1.r, h.vmm1.t_star,
                 h.vmm1.reject_at_99);
    return h;
}

std::vector<AblationRow> stage_ablate(const RunConfig& cfg, const RunPaths& paths)
{
    const FusionData d = load_fusion_data(paths);
    std::vector<AblationCase> cases = ablation_cases();
    cases.insert(cases.begin(), AblationCase{"all", {true, true, true, true, true, true}});
    std::vector<double> gt;
    for (const auto& r : d.test) {
        gt.push_back(r.y);
    }
    std::vector<AblationRow> rows;
    json out = json::object();
    for (const auto& c : cases) {
        DfTrainOptions opt = cfg.df_options();
        opt.keep = c.keep;
        const DfTrainResult r = train_df(d.train, d.val, opt);
        std::vector<double> pred;
        pred.reserve(d.test.size());
        for (const auto& row : d.test) {
            pred.push_back(r.model.predict(row.h));
        }
        rows.push_back({c.name, compute_metrics(pred, gt)});
        out[c.name] = metrics_json(rows.back().metrics);
        spdlog::info("ablate: {} MAE {:.4f} deg", c.name, rows.back().metrics.mae);
    }
    write_json(paths.ablation(), out);
    return rows;
}

// --- orchestration ---------------------------------------------------------------

namespace {

void hash_into(json& target, const fs::path& p)
{
    if (fs::is_regular_file(p)) {
        target[p.generic_string()] = file_hash(p);
        return;
    }
    if (!fs::is_directory(p)) {
        return;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a64("");
    for (const auto& f : files) {
        h = fnv1a64(fs::relative(f, p).generic_string(), h);
        h = fnv1a64(read_text(f), h);
    }
    target[p.generic_string()] = hex64(h);
}

std::vector<fs::path> stage_inputs(Stage s, const RunPaths& p)
{
    const std::vector<fs::path> fusion = {p.fusion_context(), p.fusion_split("train"), p.fusion_split("val"),
                                          p.fusion_split("test")};
    switch (s) {
    case Stage::simulate: return {p.config()};
    case Stage::train_ml: return {p.data};
    case Stage::build_fusion: return {p.data, p.ml_ckpt, p.ml_fold_dir};
    case Stage::train_df:
    case Stage::train_gf:
    case Stage::ablate: return fusion;
    case Stage::evaluate: {
        auto v = fusion;
        v.push_back(p.df_ckpt);
        v.push_back(p.gf_ckpt);
        return v;
    }
    case Stage::validate_hypothesis: return {p.data, p.fusion_context()};
    }
    return {};
}

std::vector<fs::path> stage_outputs(Stage s, const RunPaths& p)
{
    switch (s) {
    case Stage::simulate: return {p.data};
    case Stage::train_ml: return {p.ml_ckpt, p.ml_fold_dir};
    case Stage::build_fusion: return {p.fusion_dir};
    case Stage::train_df: return {p.df_ckpt};
    case Stage::train_gf: return {p.gf_ckpt};
    case Stage::evaluate: return {p.report_dir / "report.json"};
    case Stage::validate_hypothesis: return {p.hypothesis()};
    case Stage::ablate: return {p.ablation()};
    }
    return {};
}

void run_stage(Stage s, const RunConfig& cfg, const RunPaths& paths)
{
    switch (s) {
    case Stage::simulate: stage_simulate(cfg, paths); break;
    case Stage::train_ml: stage_train_ml(cfg, paths); break;
    case Stage::build_fusion: stage_build_fusion(cfg, paths); break;
    case Stage::train_df: stage_train_df(cfg, paths); break;
    case Stage::train_gf: stage_train_gf(cfg, paths); break;
    case Stage::evaluate: stage_evaluate(cfg, paths); break;
    case Stage::validate_hypothesis: stage_validate_hypothesis(cfg, paths); break;
    case Stage::ablate: stage_ablate(cfg, paths); break;
    }
}

} // namespace

void run_pipeline(const RunConfig& cfg, const RunPaths& paths, std::span<const Stage> stages)
{
    cfg.validate();
    fs::create_directories(paths.root);
    const std::string config_text = cfg.to_text();
    write_text(paths.config(), config_text);

    json manifest = json::object();
    if (fs::exists(paths.manifest())) {
        try {
            manifest = json::parse(read_text(paths.manifest()));
        } catch (const json::exception&) {
            spdlog::warn("run: unreadable manifest replaced");
            manifest = json::object();
        }
    }
    const std::string config_hash = hex64(fnv1a64(config_text));
    if (manifest.contains("config_hash") && manifest["config_hash"] != config_hash) {
        spdlog::warn("run: configuration changed since the last run in {}", paths.root.string());
        manifest["stages"] = json::object();
    }
    manifest["config_hash"] = config_hash;

    for (Stage s : stages) {
        const std::string name(to_string(s));
        spdlog::info("stage {}", name);
        run_stage(s, cfg, paths);
        json entry = {{"inputs", json::object()}, {"outputs", json::object()}};
        for (const auto& in : stage_inputs(s, paths)) {
            hash_into(entry["inputs"], in);
        }
        for (const auto& out : stage_outputs(s, paths)) {
            hash_into(entry["outputs"], out);
        }
        manifest["stages"][name] = entry;
        write_json(paths.manifest(), manifest);
    }
}

} // namespace slipsense
