#pragma once

#include "slipsense/eval.hpp"
#include "slipsense/fusion.hpp"
#include "slipsense/gmm.hpp"
#include "slipsense/model.hpp"
#include "slipsense/run_config.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace slipsense {

enum class Stage {
    simulate,
    train_ml,
    build_fusion,
    train_df,
    train_gf,
    evaluate,
    validate_hypothesis,
    ablate,
};

std::string_view to_string(Stage s) noexcept;
/// Accepts "train-ml" and "train_ml" spellings. Throws ConfigError.
Stage stage_from_string(std::string_view name);
std::vector<Stage> all_stages();

/// Artifact locations. Defaults live under one run directory; every path can
/// be overridden individually.
struct RunPaths {
    std::filesystem::path root;
    std::filesystem::path data;
    std::filesystem::path ml_ckpt;
    std::filesystem::path ml_fold_dir; // out-of-fold models for the fusion training rows
    std::filesystem::path fusion_dir;
    std::filesystem::path df_ckpt;
    std::filesystem::path gf_ckpt;
    std::filesystem::path report_dir;

    static RunPaths under(const std::filesystem::path& root);
    std::filesystem::path config() const { return root / "config.txt"; }
    std::filesystem::path manifest() const { return root / "manifest.json"; }
    std::filesystem::path hypothesis() const { return root / "hypothesis.json"; }
    std::filesystem::path ablation() const { return root / "ablation.json"; }
    std::filesystem::path fusion_context() const { return fusion_dir / "context.json"; }
    std::filesystem::path fusion_split(std::string_view split) const;
    std::filesystem::path ml_fold(std::size_t fold) const;
};

/// Root for run directories: $SLIPSENSE_RUN_ROOT when set, else "runs".
std::filesystem::path default_run_root();

struct Splits {
    std::vector<Scenario> train;
    std::vector<Scenario> val;
    std::vector<Scenario> test;
    SplitIndices indices;
};

Splits split_scenarios(std::vector<Scenario> all, const RunConfig& cfg);

/// Tuned motion-model filter and uncertainty calibration shared by the
/// fusion stages.
struct FusionContext {
    KfConfig kf;
    double kf_val_mae_deg = 0.0;
    ExpertFusionConfig ef;
    double delta_th_raw = 0.0;
    bool ef_raw = false;
    SplitIndices split;
};

struct FusionData {
    FusionContext context;
    std::vector<FusionRow> train;
    std::vector<FusionRow> val;
    std::vector<FusionRow> test;
    UncertaintyCalibration calibration; // fitted on validation delta_ml
};

/// h with delta_ml replaced by the value expert fusion consumes.
FusionInput expert_input(const FusionInput& h, const FusionData& data);

struct EfAuditRow {
    EfBranch branch = EfBranch::ml;
    double beta = 0.0;
    double delta_used = 0.0;
};

struct Evaluation {
    MetricReport report;
    std::vector<EfAuditRow> ef; // one per test row
    std::string trace_scenario;
};

struct HypothesisResult {
    CorrelationTest vmm1;
    CorrelationTest vmm2;
};

struct AblationRow {
    std::string name;
    Metrics metrics;
};

// --- stages --------------------------------------------------------------------

std::vector<Scenario> stage_simulate(const RunConfig& cfg, const RunPaths& paths);
TrainResult stage_train_ml(const RunConfig& cfg, const RunPaths& paths);
FusionData stage_build_fusion(const RunConfig& cfg, const RunPaths& paths);
DfTrainResult stage_train_df(const RunConfig& cfg, const RunPaths& paths);
GfFitResult stage_train_gf(const RunConfig& cfg, const RunPaths& paths);
Evaluation stage_evaluate(const RunConfig& cfg, const RunPaths& paths);
HypothesisResult stage_validate_hypothesis(const RunConfig& cfg, const RunPaths& paths);
std::vector<AblationRow> stage_ablate(const RunConfig& cfg, const RunPaths& paths);

/// Loads fusion rows and context written by build-fusion.
FusionData load_fusion_data(const RunPaths& paths);

/// Writes config.txt, runs the stages in order and records input/output
/// hashes in manifest.json. Throws DependencyError naming a missing artifact.
void run_pipeline(const RunConfig& cfg, const RunPaths& paths, std::span<const Stage> stages);

/// FNV-1a of a file's bytes as hex.
std::string file_hash(const std::filesystem::path& file);

} // namespace slipsense
