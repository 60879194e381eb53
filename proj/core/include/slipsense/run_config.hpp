#pragma once

#include "slipsense/dataset.hpp"
#include "slipsense/fusion.hpp"
#include "slipsense/gmm.hpp"
#include "slipsense/model.hpp"
#include "slipsense/vehsim.hpp"
#include "slipsense/vmm.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace slipsense {

/// Everything that determines a pipeline run. Stage seeds are derived from
/// `seed`, so the text form only carries the master seed.
struct RunConfig {
    std::uint64_t seed = 7;
    DatasetSpec data;
    SplitRatios split;
    ModelConfig model;
    TrainOptions ml;
    bool ml_delta_floor_at_one = false;
    std::size_t fusion_folds = 2; // 0 builds training fusion rows in-sample
    double kf_freeze_speed = 3.0;
    ProcessNoiseSearch kf_grid;
    double ef_quantile = 0.9;
    double ef_v_th_kmh = 20.0;
    bool ef_raw = false;
    DfTrainOptions df;
    std::vector<std::size_t> gf_k = {2, 4, 8, 16};
    EmOptions gf;

    /// Throws ConfigError for out-of-range values.
    void validate() const;

    /// Sets one key from its text value. Throws ConfigError for unknown keys
    /// or malformed values.
    void set(std::string_view key, std::string_view value);

    /// `key = value` lines in schema order, with a comment per key.
    std::string to_text() const;
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& file);

    // Derived stage seeds.
    std::uint64_t data_seed() const noexcept;
    std::uint64_t noise_seed() const noexcept;
    std::uint64_t split_seed() const noexcept;
    std::uint64_t model_seed() const noexcept;
    std::uint64_t ml_seed() const noexcept;
    std::uint64_t df_seed() const noexcept;
    std::uint64_t gf_seed() const noexcept;

    DatasetSpec dataset_spec() const;
    ModelConfig model_config() const;
    TrainOptions ml_options() const;
    DfTrainOptions df_options() const;
    EmOptions em_options() const;
    KfConfig kf_base() const;
};

struct ConfigKey {
    std::string key;
    std::string help;
};

/// Every accepted key, in file order.
std::vector<ConfigKey> config_schema();

} // namespace slipsense
