#include "slipsense/serialize.hpp"

#include "slipsense/error.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace slipsense {

using nlohmann::json;

std::string read_text(const std::filesystem::path& file)
{
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + file.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& file, const std::string& text)
{
    if (file.has_parent_path()) {
        std::filesystem::create_directories(file.parent_path());
    }
    std::ofstream out(file, std::ios::binary);
    if (!out || !(out << text)) {
        throw DataError("cannot write '" + file.string() + "'");
    }
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m)
{
    json data = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            data.push_back(m(i, j));
        }
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Eigen::MatrixXd matrix_from_json(const json& j)
{
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw DataError("checkpoint: matrix size does not match its data");
    }
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j2 = 0; j2 < cols; ++j2) {
            m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)].get<double>();
        }
    }
    return m;
}

json params_to_json(const ad::ParameterSet& ps)
{
    json arr = json::array();
    for (const auto& p : ps) {
        json e = matrix_to_json(p.value);
        e["name"] = p.name;
        arr.push_back(std::move(e));
    }
    return arr;
}

void params_from_json(const json& arr, ad::ParameterSet& ps)
{
    if (arr.size() != ps.size()) {
        throw DataError("checkpoint: parameter count differs from the model");
    }
    for (const auto& e : arr) {
        auto& p = ps.get(e.at("name").get<std::string>());
        auto m = matrix_from_json(e);
        if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
            throw DataError("checkpoint: shape mismatch for parameter '" + p.name + "'");
        }
        p.value = std::move(m);
        p.grad.setZero(p.value.rows(), p.value.cols());
    }
}

json parse_checkpoint(const std::filesystem::path& file, std::string_view kind)
{
    json j;
    try {
        j = json::parse(read_text(file));
    } catch (const json::exception& e) {
        throw DataError("'" + file.string() + "': " + e.what());
    }
    if (j.value("format", std::string()) != kind) {
        throw DataError("'" + file.string() + "' is not a " + std::string(kind) + " checkpoint");
    }
    if (j.value("version", 0) != kCheckpointVersion) {
        throw DataError("'" + file.string() + "': unsupported checkpoint version");
    }
    return j;
}

template <typename F>
auto guarded(const std::filesystem::path& file, F&& f)
{
    try {
        return f();
    } catch (const json::exception& e) {
        throw DataError("'" + file.string() + "': " + e.what());
    }
}

template <int N>
json scaler_to_json(const FeatureScaler<N>& s)
{
    return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + N)},
            {"scale", std::vector<double>(s.scale.data(), s.scale.data() + N)}};
}

template <int N>
FeatureScaler<N> scaler_from_json(const json& j)
{
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto scale = j.at("scale").get<std::vector<double>>();
    if (mean.size() != N || scale.size() != N) {
        throw DataError("checkpoint: scaler has the wrong dimension");
    }
    FeatureScaler<N> s;
    for (int i = 0; i < N; ++i) {
        s.mean[i] = mean[static_cast<std::size_t>(i)];
        s.scale[i] = scale[static_cast<std::size_t>(i)];
    }
    return s;
}

} // namespace

void save_ml_checkpoint(const std::filesystem::path& file, const MlEstimator& model, const ad::Adam* optimizer,
                        std::span<const EpochLog> log)
{
    const auto& c = model.config();
    json j;
    j["format"] = "slipsense-ml";
    j["version"] = kCheckpointVersion;
    j["config"] = {{"L", c.window.L},       {"B", c.window.B}, {"F", c.window.F},
                   {"m", c.window.m},       {"d", c.d},        {"heads", c.heads},
                   {"d_ff", c.d_ff},        {"u_factor", c.u_factor},
                   {"output_scale", c.output_scale}};
    j["seed"] = c.seed;
    const auto& s = model.scaler();
    j["scaler"] = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
                   {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
    j["parameters"] = params_to_json(model.parameters());
    if (optimizer != nullptr) {
        json m = json::array();
        json v = json::array();
        for (const auto& x : optimizer->first_moments()) {
            m.push_back(matrix_to_json(x));
        }
        for (const auto& x : optimizer->second_moments()) {
            v.push_back(matrix_to_json(x));
        }
        j["optimizer"] = {{"name", "adam"}, {"lr", optimizer->learning_rate()}, {"steps", optimizer->steps()},
                          {"m", std::move(m)}, {"v", std::move(v)}};
    }
    json jl = json::array();
    for (const auto& e : log) {
        jl.push_back({{"epoch", e.epoch},
                      {"train_nll", e.train_nll},
                      {"val_nll", e.val_nll},
                      {"val_mae_deg", e.val_mae_deg}});
    }
    j["log"] = std::move(jl);
    write_text(file, j.dump(1) + "\n");
}

MlEstimator load_ml_checkpoint(const std::filesystem::path& file, ad::Adam* optimizer)
{
    const json j = parse_checkpoint(file, "slipsense-ml");
    return guarded(file, [&] {
        const auto& c = j.at("config");
        ModelConfig cfg;
        cfg.window.L = c.at("L").get<std::size_t>();
        cfg.window.B = c.at("B").get<std::size_t>();
        cfg.window.F = c.at("F").get<std::size_t>();
        cfg.window.m = c.at("m").get<std::size_t>();
        cfg.d = c.at("d").get<std::size_t>();
        cfg.heads = c.at("heads").get<std::size_t>();
        cfg.d_ff = c.at("d_ff").get<std::size_t>();
        cfg.u_factor = c.at("u_factor").get<double>();
        cfg.output_scale = c.at("output_scale").get<double>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        MlEstimator model;
        try {
            model = MlEstimator(cfg);
        } catch (const ConfigError& e) {
            throw DataError("'" + file.string() + "': " + e.what());
        }
        const auto mean = j.at("scaler").at("mean").get<std::vector<double>>();
        const auto scale = j.at("scaler").at("scale").get<std::vector<double>>();
        if (mean.size() != kInputDim || scale.size() != kInputDim) {
            throw DataError("'" + file.string() + "': input scaler has the wrong dimension");
        }
        for (std::size_t i = 0; i < kInputDim; ++i) {
            model.scaler().mean[static_cast<Eigen::Index>(i)] = mean[i];
            model.scaler().scale[static_cast<Eigen::Index>(i)] = scale[i];
        }
        params_from_json(j.at("parameters"), model.parameters());
        if (optimizer != nullptr && j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            *optimizer = ad::Adam(o.at("lr").get<double>());
            optimizer->set_steps(o.at("steps").get<long long>());
            for (const auto& x : o.at("m")) {
                optimizer->first_moments().push_back(matrix_from_json(x));
            }
            for (const auto& x : o.at("v")) {
                optimizer->second_moments().push_back(matrix_from_json(x));
            }
        }
        return model;
    });
}

void save_df_checkpoint(const std::filesystem::path& file, const DfModel& model, std::uint64_t seed)
{
    json j;
    j["format"] = "slipsense-df";
    j["version"] = kCheckpointVersion;
    j["seed"] = seed;
    j["layers"] = {6, 20, 10, 1};
    j["scaler"] = scaler_to_json(model.scaler);
    j["keep"] = std::vector<bool>(model.keep.begin(), model.keep.end());
    j["output_scale"] = model.output_scale;
    j["parameters"] = params_to_json(model.net.params);
    write_text(file, j.dump(1) + "\n");
}

DfModel load_df_checkpoint(const std::filesystem::path& file)
{
    const json j = parse_checkpoint(file, "slipsense-df");
    return guarded(file, [&] {
        DfModel m;
        m.net = DfParams::zeros();
        m.scaler = scaler_from_json<6>(j.at("scaler"));
        const auto keep = j.at("keep").get<std::vector<bool>>();
        if (keep.size() != 6) {
            throw DataError("'" + file.string() + "': feature mask has the wrong length");
        }
        std::copy(keep.begin(), keep.end(), m.keep.begin());
        m.output_scale = j.at("output_scale").get<double>();
        params_from_json(j.at("parameters"), m.net.params);
        return m;
    });
}

void save_gf_checkpoint(const std::filesystem::path& file, const GfModel& model, std::uint64_t seed)
{
    json j;
    j["format"] = "slipsense-gf";
    j["version"] = kCheckpointVersion;
    j["seed"] = seed;
    j["scaler"] = scaler_to_json(model.scaler);
    json comps = json::array();
    for (std::size_t k = 0; k < model.gmm.size(); ++k) {
        comps.push_back({{"weight", model.gmm.weights[k]},
                         {"mean", matrix_to_json(model.gmm.means[k])},
                         {"cov", matrix_to_json(model.gmm.covs[k])}});
    }
    j["components"] = std::move(comps);
    write_text(file, j.dump(1) + "\n");
}

GfModel load_gf_checkpoint(const std::filesystem::path& file)
{
    const json j = parse_checkpoint(file, "slipsense-gf");
    return guarded(file, [&] {
        GfModel m;
        m.scaler = scaler_from_json<7>(j.at("scaler"));
        for (const auto& c : j.at("components")) {
            m.gmm.weights.push_back(c.at("weight").get<double>());
            m.gmm.means.push_back(matrix_from_json(c.at("mean")));
            m.gmm.covs.push_back(matrix_from_json(c.at("cov")));
            if (m.gmm.means.back().size() != 7 || m.gmm.covs.back().rows() != 7 || m.gmm.covs.back().cols() != 7) {
                throw DataError("'" + file.string() + "': component has the wrong dimension");
            }
        }
        if (m.gmm.size() == 0) {
            throw DataError("'" + file.string() + "': no mixture components");
        }
        m.prepare();
        return m;
    });
}

} // namespace slipsense
