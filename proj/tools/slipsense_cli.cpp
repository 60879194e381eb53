#include "slipsense/error.hpp"
#include "slipsense/pipeline.hpp"
#include "slipsense/run_config.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace slipsense;

namespace {

struct Globals {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
    std::string log_level = "info";
    bool print_config = false;
};

// Per-subcommand path overrides; empty means "use the run directory layout".
struct Overrides {
    std::string data;
    std::string ml_ckpt;
    std::string fusion;
    std::string df_ckpt;
    std::string gf_ckpt;
    std::string report;
    std::optional<double> hours;
    std::string mix;
    std::string stages;
};

RunConfig effective_config(const Globals& g)
{
    RunConfig cfg = g.config_file.empty() ? RunConfig{} : RunConfig::load(g.config_file);
    for (const auto& kv : g.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) {
        cfg.set("seed", std::to_string(*g.seed));
    }
    return cfg;
}

RunPaths resolve_paths(const Globals& g, const RunConfig& cfg)
{
    if (!g.run_dir.empty()) {
        return RunPaths::under(g.run_dir);
    }
    return RunPaths::under(default_run_root() / ("seed-" + std::to_string(cfg.seed)));
}

void apply(RunPaths& p, const Overrides& o)
{
    if (!o.data.empty()) {
        p.data = o.data;
    }
    if (!o.ml_ckpt.empty()) {
        p.ml_ckpt = o.ml_ckpt;
    }
    if (!o.fusion.empty()) {
        p.fusion_dir = o.fusion;
    }
    if (!o.df_ckpt.empty()) {
        p.df_ckpt = o.df_ckpt;
    }
    if (!o.gf_ckpt.empty()) {
        p.gf_ckpt = o.gf_ckpt;
    }
    if (!o.report.empty()) {
        p.report_dir = o.report;
    }
}

std::vector<Stage> parse_stages(const std::string& text)
{
    if (text.empty() || text == "all") {
        return all_stages();
    }
    std::vector<Stage> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        if (end > start) {
            out.push_back(stage_from_string(text.substr(start, end - start)));
        }
        start = end + 1;
    }
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Vehicle sideslip estimation with uncertainty-aware hybrid fusion"};
    app.require_subcommand(0, 1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config_file, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", g.sets, "override one configuration key (key=value), repeatable");
    app.add_option("--seed", g.seed, "master seed, overrides the configuration");
    app.add_option("--run-dir", g.run_dir, "run directory (default $SLIPSENSE_RUN_ROOT/seed-<seed>)");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
    app.add_flag("--print-config", g.print_config, "print the effective configuration and exit");

    Overrides o;
    std::optional<Stage> stage;
    bool run_all = false;

    auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
    sim->add_option("--out", o.data, "dataset directory");
    sim->add_option("--hours", o.hours, "total duration in hours")->check(CLI::PositiveNumber);
    sim->add_option("--mix", o.mix, "maneuver weights, e.g. slalom:1,figure_eight:2");
    sim->callback([&] { stage = Stage::simulate; });

    auto* tml = app.add_subcommand("train-ml", "train the Student-t transformer");
    tml->add_option("--data", o.data, "dataset directory");
    tml->add_option("--out", o.ml_ckpt, "checkpoint file");
    tml->callback([&] { stage = Stage::train_ml; });

    auto* bf = app.add_subcommand("build-fusion", "tune the motion-model filter and write fusion rows");
    bf->add_option("--data", o.data, "dataset directory");
    bf->add_option("--ckpt-ml", o.ml_ckpt, "ML checkpoint");
    bf->add_option("--out", o.fusion, "fusion directory");
    bf->callback([&] { stage = Stage::build_fusion; });

    auto* tdf = app.add_subcommand("train-df", "train the deep-fusion network");
    tdf->add_option("--fusion", o.fusion, "fusion directory");
    tdf->add_option("--out", o.df_ckpt, "checkpoint file");
    tdf->callback([&] { stage = Stage::train_df; });

    auto* tgf = app.add_subcommand("train-gf", "fit the Gaussian-mixture fusion");
    tgf->add_option("--fusion", o.fusion, "fusion directory");
    tgf->add_option("--out", o.gf_ckpt, "checkpoint file");
    tgf->callback([&] { stage = Stage::train_gf; });

    auto* ev = app.add_subcommand("evaluate", "score all estimators on the test split");
    ev->add_option("--ckpt-ml", o.ml_ckpt, "ML checkpoint");
    ev->add_option("--ckpt-df", o.df_ckpt, "deep-fusion checkpoint");
    ev->add_option("--ckpt-gf", o.gf_ckpt, "Gaussian-fusion checkpoint");
    ev->add_option("--data", o.data, "dataset directory");
    ev->add_option("--fusion", o.fusion, "fusion directory");
    ev->add_option("--report", o.report, "report directory");
    ev->callback([&] { stage = Stage::evaluate; });

    auto* hyp = app.add_subcommand("validate-hypothesis", "residual correlation test of the motion models");
    hyp->add_option("--data", o.data, "dataset directory");
    hyp->add_option("--fusion", o.fusion, "fusion directory");
    hyp->callback([&] { stage = Stage::validate_hypothesis; });

    auto* abl = app.add_subcommand("ablate", "refit deep fusion on 2-of-3 branch subsets");
    abl->add_option("--fusion", o.fusion, "fusion directory");
    abl->callback([&] { stage = Stage::ablate; });

    auto* run = app.add_subcommand("run", "run several stages in order");
    run->add_option("--stages", o.stages, "comma separated stages or 'all'");
    run->callback([&] { run_all = true; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    try {
        spdlog::set_level(spdlog::level::from_str(g.log_level));
        if (o.hours) {
            g.sets.push_back("data.hours=" + std::to_string(*o.hours));
        }
        if (!o.mix.empty()) {
            g.sets.push_back("data.mix=" + o.mix);
        }
        const RunConfig cfg = effective_config(g);
        cfg.validate();
        if (g.print_config) {
            std::cout << cfg.to_text();
            return 0;
        }
        if (!stage && !run_all) {
            std::cerr << app.help();
            return static_cast<int>(ExitCode::usage);
        }
        RunPaths paths = resolve_paths(g, cfg);
        apply(paths, o);

        std::vector<Stage> stages = run_all ? parse_stages(o.stages) : std::vector<Stage>{*stage};
        if (stage == Stage::evaluate && !fs::exists(paths.fusion_context()) && fs::exists(paths.ml_ckpt)) {
            stages.insert(stages.begin(), Stage::build_fusion);
        }
        run_pipeline(cfg, paths, stages);
        return 0;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return static_cast<int>(exit_code_for(e));
    }
}
