#pragma once

#include "slipsense/fusion.hpp"
#include "slipsense/gmm.hpp"
#include "slipsense/model.hpp"

#include <filesystem>
#include <string>

namespace slipsense {

/// Versioned JSON checkpoints. Matrices are stored row-major with shortest
/// round-trip decimals, so save -> load reproduces every value exactly.
inline constexpr int kCheckpointVersion = 1;

void save_ml_checkpoint(const std::filesystem::path& file, const MlEstimator& model,
                        const ad::Adam* optimizer = nullptr, std::span<const EpochLog> log = {});
/// Throws DataError for malformed or mismatched files. Restores the optimizer
/// state when `optimizer` is given and the file carries one.
MlEstimator load_ml_checkpoint(const std::filesystem::path& file, ad::Adam* optimizer = nullptr);

void save_df_checkpoint(const std::filesystem::path& file, const DfModel& model, std::uint64_t seed = 0);
DfModel load_df_checkpoint(const std::filesystem::path& file);

void save_gf_checkpoint(const std::filesystem::path& file, const GfModel& model, std::uint64_t seed = 0);
GfModel load_gf_checkpoint(const std::filesystem::path& file);

/// Whole-file read/write helpers.
std::string read_text(const std::filesystem::path& file);
void write_text(const std::filesystem::path& file, const std::string& text);

} // namespace slipsense
