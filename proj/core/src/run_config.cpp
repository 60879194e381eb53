#include "slipsense/run_config.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"
#include "slipsense/serialize.hpp"

#include <functional>
#include <sstream>

namespace slipsense {

namespace {

struct Field {
    const char* key;
    const char* help;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view)> set;
};

double to_double(std::string_view key, std::string_view v)
{
    try {
        return parse_double(v);
    } catch (const DataError&) {
        throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
    }
}

std::size_t to_size(std::string_view key, std::string_view v)
{
    long long x = 0;
    try {
        x = parse_int(v);
    } catch (const DataError&) {
        throw ConfigError("config: '" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
    }
    if (x < 0) {
        throw ConfigError("config: '" + std::string(key) + "' must be non-negative");
    }
    return static_cast<std::size_t>(x);
}

bool to_bool(std::string_view key, std::string_view v)
{
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw ConfigError("config: '" + std::string(key) + "' expects true or false");
}

std::string list_text(const std::vector<double>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + format_double(v[i]);
    }
    return s;
}

std::vector<std::string_view> split_commas(std::string_view v)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (start <= v.size()) {
        const auto pos = v.find(',', start);
        out.push_back(v.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

std::vector<double> to_list(std::string_view key, std::string_view v)
{
    std::vector<double> out;
    for (auto part : split_commas(v)) {
        out.push_back(to_double(key, part));
    }
    return out;
}

#define NUM(name, help, expr)                                                                                      \
    Field                                                                                                          \
    {                                                                                                              \
        name, help, [](const RunConfig& c) { return format_double(static_cast<double>(c.expr)); },                 \
            [](RunConfig& c, std::string_view v) { c.expr = to_double(name, v); }                                 \
    }
#define SIZE(name, help, expr)                                                                                     \
    Field                                                                                                          \
    {                                                                                                              \
        name, help, [](const RunConfig& c) { return std::to_string(c.expr); },                                     \
            [](RunConfig& c, std::string_view v) { c.expr = to_size(name, v); }                                    \
    }
#define BOOL(name, help, expr)                                                                                     \
    Field                                                                                                          \
    {                                                                                                              \
        name, help, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); },                     \
            [](RunConfig& c, std::string_view v) { c.expr = to_bool(name, v); }                                    \
    }

const std::vector<Field>& fields()
{
    static const std::vector<Field> f = {
        Field{"seed", "master seed; every stage seed derives from it",
              [](const RunConfig& c) { return std::to_string(c.seed); },
              [](RunConfig& c, std::string_view v) { c.seed = to_size("seed", v); }},
        NUM("data.hours", "total simulated driving time (h)", data.hours),
        Field{"data.mix", "maneuver weights name:weight,...",
              [](const RunConfig& c) { return format_mix(c.data.mix); },
              [](RunConfig& c, std::string_view v) { c.data.mix = parse_mix(v); }},
        NUM("data.min_duration", "shortest scenario (s)", data.min_duration),
        NUM("data.max_duration", "longest scenario (s)", data.max_duration),
        NUM("vehicle.l", "wheelbase (m)", data.geometry.l),
        NUM("vehicle.l_r", "rear axle to CoG (m)", data.geometry.l_r),
        NUM("vehicle.track_w", "track width (m)", data.geometry.track_w),
        NUM("vehicle.r_s", "steering ratio", data.geometry.r_s),
        NUM("vehicle.mass", "mass (kg)", data.geometry.mass),
        NUM("vehicle.I_z", "yaw inertia (kg m^2)", data.geometry.I_z),
        NUM("vehicle.c_f", "front cornering stiffness (N/rad)", data.geometry.c_f),
        NUM("vehicle.c_r", "rear cornering stiffness (N/rad)", data.geometry.c_r),
        NUM("vehicle.mu_sat", "lateral force saturation level", data.geometry.mu_sat),
        NUM("noise.v_s", "speedometer noise std (m/s)", data.noise.v_s),
        NUM("noise.theta_sw", "steering wheel noise std (rad)", data.noise.theta_sw),
        NUM("noise.yaw_rate", "yaw rate noise std (rad/s)", data.noise.yaw_rate),
        NUM("noise.a_y", "lateral acceleration noise std (m/s^2)", data.noise.a_y),
        NUM("noise.p_br", "brake pressure noise std (bar)", data.noise.p_br),
        NUM("noise.wheel", "wheel speed noise std (m/s)", data.noise.wheel),
        NUM("split.train", "training share of scenarios", split.train),
        NUM("split.val", "validation share of scenarios", split.val),
        NUM("split.test", "test share of scenarios", split.test),
        SIZE("window.L", "observation steps", model.window.L),
        SIZE("window.B", "decoder context steps", model.window.B),
        SIZE("window.F", "forecast steps", model.window.F),
        SIZE("model.d", "embedding dimension", model.d),
        SIZE("model.heads", "attention heads", model.heads),
        SIZE("model.d_ff", "feed-forward width (0 = 2 d)", model.d_ff),
        NUM("model.u_factor", "active query factor c", model.u_factor),
        NUM("model.output_scale", "head output unit (rad)", model.output_scale),
        NUM("ml.lr", "Adam learning rate", ml.lr),
        SIZE("ml.batch", "windows per batch", ml.batch),
        SIZE("ml.epochs", "training epochs", ml.epochs),
        SIZE("ml.train_stride", "use every n-th training window", ml.train_stride),
        SIZE("ml.val_stride", "use every n-th validation window", ml.val_stride),
        NUM("ml.clip_norm", "gradient norm limit", ml.clip_norm),
        BOOL("ml.delta_floor_at_one", "apply max(delta, 1) to the ML uncertainty", ml_delta_floor_at_one),
        NUM("kf.freeze_speed", "transition matrix speed floor (m/s)", kf_freeze_speed),
        Field{"kf.q_beta_grid", "process noise candidates for beta",
              [](const RunConfig& c) { return list_text(c.kf_grid.beta_grid); },
              [](RunConfig& c, std::string_view v) { c.kf_grid.beta_grid = to_list("kf.q_beta_grid", v); }},
        Field{"kf.q_yaw_grid", "process noise candidates for yaw rate",
              [](const RunConfig& c) { return list_text(c.kf_grid.yaw_grid); },
              [](RunConfig& c, std::string_view v) { c.kf_grid.yaw_grid = to_list("kf.q_yaw_grid", v); }},
        NUM("ef.quantile", "validation quantile used as uncertainty threshold", ef_quantile),
        NUM("ef.v_th_kmh", "speed switching VMM1 to VMM2 (km/h)", ef_v_th_kmh),
        BOOL("ef.raw", "blend with the raw ML variance instead of its rank", ef_raw),
        SIZE("fusion.folds", "out-of-fold ML models for the fusion training rows (0 = in-sample)", fusion_folds),
        NUM("df.lr", "Adam learning rate", df.lr),
        NUM("df.lr_final", "learning rate reached by the cosine decay", df.lr_final),
        SIZE("df.batch", "rows per batch", df.batch),
        SIZE("df.epochs", "training epochs", df.epochs),
        Field{"gf.k", "candidate component counts",
              [](const RunConfig& c) {
                  std::string s;
                  for (std::size_t i = 0; i < c.gf_k.size(); ++i) {
                      s += (i ? "," : "") + std::to_string(c.gf_k[i]);
                  }
                  return s;
              },
              [](RunConfig& c, std::string_view v) {
                  c.gf_k.clear();
                  for (auto part : split_commas(v)) {
                      c.gf_k.push_back(to_size("gf.k", part));
                  }
              }},
        SIZE("gf.max_iter", "EM iteration limit", gf.max_iter),
        NUM("gf.tol", "EM stop on mean log-likelihood change", gf.tol),
        NUM("gf.cov_floor", "minimum covariance eigenvalue", gf.cov_floor),
    };
    return f;
}

#undef NUM
#undef SIZE
#undef BOOL

std::string_view trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

std::vector<ConfigKey> config_schema()
{
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) {
        out.push_back({f.key, f.help});
    }
    return out;
}

void RunConfig::set(std::string_view key, std::string_view value)
{
    for (const auto& f : fields()) {
        if (key == f.key) {
            try {
                f.set(*this, trim(value));
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                throw ConfigError("config: '" + std::string(key) + "': " + e.what());
            }
            return;
        }
    }
    throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

std::string RunConfig::to_text() const
{
    std::ostringstream out;
    for (const auto& f : fields()) {
        out << "# " << f.help << '\n' << f.key << " = " << f.get(*this) << '\n';
    }
    return out.str();
}

RunConfig RunConfig::parse(std::string_view text)
{
    RunConfig c;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        auto line = trim(text.substr(start, end - start));
        start = end + 1;
        ++line_no;
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file)
{
    if (!std::filesystem::exists(file)) {
        throw ConfigError("config file '" + file.string() + "' does not exist");
    }
    return parse(read_text(file));
}

void RunConfig::validate() const
{
    if (!(data.hours > 0.0)) {
        throw ConfigError("config: data.hours must be positive");
    }
    if (!(data.min_duration >= 5.0) || data.max_duration < data.min_duration) {
        throw ConfigError("config: scenario durations must satisfy 5 <= min <= max");
    }
    try {
        data.geometry.validate();
        data.noise.validate();
        model_config().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
        throw ConfigError("config: split ratios must sum to 1");
    }
    if (ml.batch == 0 || ml.epochs == 0 || !(ml.lr > 0.0) || ml.train_stride == 0 || ml.val_stride == 0) {
        throw ConfigError("config: ml.batch, ml.epochs, ml.lr and strides must be positive");
    }
    if (!(kf_freeze_speed > 0.0) || kf_grid.beta_grid.empty() || kf_grid.yaw_grid.empty()) {
        throw ConfigError("config: kf settings are invalid");
    }
    for (double q : kf_grid.beta_grid) {
        if (!(q >= 0.0)) {
            throw ConfigError("config: process noise candidates must be non-negative");
        }
    }
    for (double q : kf_grid.yaw_grid) {
        if (!(q >= 0.0)) {
            throw ConfigError("config: process noise candidates must be non-negative");
        }
    }
    if (!(ef_quantile > 0.0 && ef_quantile < 1.0) || !(ef_v_th_kmh > 0.0)) {
        throw ConfigError("config: ef.quantile must lie in (0, 1) and ef.v_th_kmh must be positive");
    }
    if (df.batch == 0 || df.epochs == 0 || !(df.lr > 0.0)) {
        throw ConfigError("config: df.batch, df.epochs and df.lr must be positive");
    }
    if (!(df.lr_final > 0.0) || df.lr_final > df.lr) {
        throw ConfigError("config: df.lr_final must be in (0, df.lr]");
    }
    if (fusion_folds == 1) {
        throw ConfigError("config: fusion.folds must be 0 or at least 2");
    }
    if (gf_k.empty() || gf.max_iter == 0 || !(gf.tol >= 0.0) || !(gf.cov_floor > 0.0)) {
        throw ConfigError("config: gf settings are invalid");
    }
    for (auto k : gf_k) {
        if (k == 0) {
            throw ConfigError("config: gf.k entries must be positive");
        }
    }
}

std::uint64_t RunConfig::data_seed() const noexcept { return seed; }
std::uint64_t RunConfig::noise_seed() const noexcept { return mix_seed(seed, 1); }
std::uint64_t RunConfig::split_seed() const noexcept { return mix_seed(seed, 2); }
std::uint64_t RunConfig::model_seed() const noexcept { return mix_seed(seed, 3); }
std::uint64_t RunConfig::ml_seed() const noexcept { return mix_seed(seed, 4); }
std::uint64_t RunConfig::df_seed() const noexcept { return mix_seed(seed, 5); }
std::uint64_t RunConfig::gf_seed() const noexcept { return mix_seed(seed, 6); }

DatasetSpec RunConfig::dataset_spec() const
{
    DatasetSpec s = data;
    s.seed = data_seed();
    s.noise.seed = noise_seed();
    return s;
}

ModelConfig RunConfig::model_config() const
{
    ModelConfig m = model;
    m.seed = model_seed();
    return m;
}

TrainOptions RunConfig::ml_options() const
{
    TrainOptions o = ml;
    o.seed = ml_seed();
    return o;
}

DfTrainOptions RunConfig::df_options() const
{
    DfTrainOptions o = df;
    o.seed = df_seed();
    return o;
}

EmOptions RunConfig::em_options() const
{
    EmOptions o = gf;
    o.seed = gf_seed();
    return o;
}

KfConfig RunConfig::kf_base() const
{
    KfConfig k;
    k.model.geometry = data.geometry;
    k.model.freeze_speed = kf_freeze_speed;
    return k;
}

} // namespace slipsense
