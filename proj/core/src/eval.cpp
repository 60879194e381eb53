#include "slipsense/eval.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace slipsense {

Metrics compute_metrics(std::span<const double> pred, std::span<const double> gt)
{
    if (pred.size() != gt.size()) {
        throw DataError("compute_metrics: prediction and ground truth lengths differ");
    }
    if (pred.empty()) {
        throw DataError("compute_metrics: no samples");
    }
    Metrics m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = std::abs(rad2deg(pred[i] - gt[i]));
        m.mae += e;
        m.mse += e * e;
        m.me = std::max(m.me, e);
    }
    m.count = pred.size();
    m.mae /= static_cast<double>(m.count);
    m.mse /= static_cast<double>(m.count);
    return m;
}

int condition_of(double v_s, double a_y) noexcept
{
    const bool fast = v_s > kConditionSpeed;
    const bool high = std::abs(a_y) > kConditionLateral;
    return 1 + (fast ? 2 : 0) + (high ? 1 : 0);
}

std::array<std::vector<std::size_t>, 4> conditional_bins(std::span<const double> v_s, std::span<const double> a_y)
{
    if (v_s.size() != a_y.size()) {
        throw DataError("conditional_bins: speed and lateral acceleration lengths differ");
    }
    std::array<std::vector<std::size_t>, 4> out;
    for (std::size_t i = 0; i < v_s.size(); ++i) {
        out[static_cast<std::size_t>(condition_of(v_s[i], a_y[i]) - 1)].push_back(i);
    }
    return out;
}

std::vector<BinPoint> binned_mae_curve(std::span<const double> pred, std::span<const double> gt, double width_deg)
{
    if (pred.size() != gt.size()) {
        throw DataError("binned_mae_curve: prediction and ground truth lengths differ");
    }
    if (!(width_deg > 0.0)) {
        throw ConfigError("binned_mae_curve: bin width must be positive");
    }
    std::map<long long, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const auto bin = static_cast<long long>(std::floor(rad2deg(gt[i]) / width_deg));
        auto& a = acc[bin];
        a.first += std::abs(rad2deg(pred[i] - gt[i]));
        a.second += 1;
    }
    std::vector<BinPoint> out;
    out.reserve(acc.size());
    for (const auto& [bin, a] : acc) {
        BinPoint p;
        p.bin = bin;
        p.lower = static_cast<double>(bin) * width_deg;
        p.upper = p.lower + width_deg;
        p.count = a.second;
        p.mae = a.first / static_cast<double>(a.second);
        p.share = 100.0 * static_cast<double>(a.second) / static_cast<double>(gt.size());
        out.push_back(p);
    }
    return out;
}

CorrelationTest residual_correlation(std::span<const ResidualRecord> records)
{
    const std::size_t n = records.size();
    if (n < 30) {
        throw DataError("residual_correlation: need at least 30 records");
    }
    double mb = 0.0;
    double my = 0.0;
    for (const auto& r : records) {
        mb += r.e_beta;
        my += r.e_yaw;
    }
    mb /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sbb = 0.0;
    double syy = 0.0;
    double sby = 0.0;
    for (const auto& r : records) {
        const double a = r.e_beta - mb;
        const double b = r.e_yaw - my;
        sbb += a * a;
        syy += b * b;
        sby += a * b;
    }
    // constant columns can leave rounding residue in the sums
    const auto constant = [&](auto field) {
        return std::all_of(records.begin(), records.end(),
                           [&](const ResidualRecord& r) { return field(r) == field(records.front()); });
    };
    const bool flat_beta = constant([](const ResidualRecord& r) { return r.e_beta; });
    const bool flat_yaw = constant([](const ResidualRecord& r) { return r.e_yaw; });
    if (flat_beta || flat_yaw || !(sbb > 0.0) || !(syy > 0.0)) {
        throw DataError("residual_correlation: degenerate data (zero variance)");
    }
    CorrelationTest out;
    out.n = n;
    out.r = std::clamp(sby / std::sqrt(sbb * syy), -1.0, 1.0);
    const double dof = static_cast<double>(n - 2);
    const double denom = std::sqrt(std::max(0.0, 1.0 - out.r * out.r));
    out.t_star = denom > 0.0 ? out.r * std::sqrt(dof) / denom
                             : std::copysign(std::numeric_limits<double>::infinity(), out.r);
    const boost::math::students_t dist(dof);
    out.critical = boost::math::quantile(dist, 0.995);
    out.p_value = std::isfinite(out.t_star) ? 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t_star)))
                                            : 0.0;
    out.reject_at_99 = std::abs(out.t_star) > out.critical;
    return out;
}

namespace {

void check_series(std::span<const double> t, std::span<const double> gt, std::span<const ModelSeries> models)
{
    if (t.size() != gt.size()) {
        throw DataError("trace: time and ground truth lengths differ");
    }
    for (const auto& m : models) {
        if (m.beta.size() != t.size() || m.delta.size() != t.size()) {
            throw DataError("trace: series '" + m.name + "' has the wrong length");
        }
    }
}

} // namespace

void write_trace_csv(const std::filesystem::path& file, std::span<const double> t, std::span<const double> gt,
                     std::span<const ModelSeries> models)
{
    check_series(t, gt, models);
    std::ofstream out(file);
    if (!out) {
        throw DataError("cannot write '" + file.string() + "'");
    }
    out << "t,beta_gt";
    for (const auto& m : models) {
        out << ",beta_" << m.name << ",delta_" << m.name;
    }
    out << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) {
        out << format_double(t[i]) << ',' << format_double(gt[i]);
        for (const auto& m : models) {
            out << ',' << format_double(m.beta[i]) << ',' << format_double(m.delta[i]);
        }
        out << '\n';
    }
}

void write_trace_svg(const std::filesystem::path& file, std::span<const double> t, std::span<const double> gt,
                     std::span<const ModelSeries> models, const std::string& title)
{
    check_series(t, gt, models);
    if (t.empty()) {
        throw DataError("trace: no samples to plot");
    }
    constexpr double W = 960.0;
    constexpr double H = 420.0;
    constexpr double left = 60.0;
    constexpr double right = 150.0;
    constexpr double top = 40.0;
    constexpr double bottom = 50.0;
    double lo = rad2deg(gt[0]);
    double hi = lo;
    for (std::size_t i = 0; i < t.size(); ++i) {
        lo = std::min(lo, rad2deg(gt[i]));
        hi = std::max(hi, rad2deg(gt[i]));
        for (const auto& m : models) {
            lo = std::min(lo, rad2deg(m.beta[i]));
            hi = std::max(hi, rad2deg(m.beta[i]));
        }
    }
    if (hi - lo < 1e-9) {
        hi = lo + 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    const double t0 = t.front();
    const double t1 = t.back() > t0 ? t.back() : t0 + 1.0;
    const auto px = [&](double tv) { return left + (tv - t0) / (t1 - t0) * (W - left - right); };
    const auto py = [&](double deg) { return top + (hi - deg) / (hi - lo) * (H - top - bottom); };

    static const char* const colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << title << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << W - left - right << "\" height=\""
        << H - top - bottom << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        svg << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">"
            << std::round(v * 100.0) / 100.0 << "</text>\n";
        const double tv = t0 + (t1 - t0) * k / 4.0;
        svg << "<text x=\"" << px(tv) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\">"
            << std::round(tv * 10.0) / 10.0 << "</text>\n";
    }
    svg << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">t (s)</text>\n";
    svg << "<text x=\"16\" y=\"" << H / 2 << "\" transform=\"rotate(-90 16 " << H / 2
        << ")\" text-anchor=\"middle\">sideslip (deg)</text>\n";

    const auto polyline = [&](const std::vector<double>& deg, const char* color, double width) {
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\" points=\"";
        for (std::size_t i = 0; i < t.size(); ++i) {
            svg << px(t[i]) << ',' << py(deg[i]) << ' ';
        }
        svg << "\"/>\n";
    };
    std::vector<double> deg(t.size());
    std::transform(gt.begin(), gt.end(), deg.begin(), rad2deg);
    polyline(deg, "#000000", 2.0);
    svg << "<text x=\"" << W - right + 10 << "\" y=\"" << top + 12 << "\">ground truth</text>\n";
    for (std::size_t k = 0; k < models.size(); ++k) {
        std::transform(models[k].beta.begin(), models[k].beta.end(), deg.begin(), rad2deg);
        const char* c = colors[k % std::size(colors)];
        polyline(deg, c, 1.2);
        svg << "<text x=\"" << W - right + 10 << "\" y=\"" << top + 12 + 18.0 * static_cast<double>(k + 1)
            << "\" fill=\"" << c << "\">" << models[k].name << "</text>\n";
    }
    svg << "</svg>\n";
    std::ofstream out(file);
    if (!out) {
        throw DataError("cannot write '" + file.string() + "'");
    }
    out << svg.str();
}

std::size_t find_maneuver(std::span<const Scenario> scenarios, Maneuver maneuver)
{
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
        if (scenarios[i].maneuver == maneuver) {
            return i;
        }
    }
    throw DataError("no " + std::string(to_string(maneuver)) + " scenario in the given split");
}

MetricReport make_report(std::span<const ModelSeries> models, std::span<const double> gt,
                         std::span<const double> v_s, std::span<const double> a_y)
{
    MetricReport rep;
    rep.samples = gt.size();
    const auto masks = conditional_bins(v_s, a_y);
    if (v_s.size() != gt.size()) {
        throw DataError("make_report: condition inputs do not match the sample count");
    }
    for (int c = 0; c < 4; ++c) {
        rep.conditions[static_cast<std::size_t>(c)].condition = c + 1;
        rep.conditions[static_cast<std::size_t>(c)].count = masks[static_cast<std::size_t>(c)].size();
    }
    for (const auto& m : models) {
        rep.models.push_back(m.name);
        rep.overall[m.name] = compute_metrics(m.beta, gt);
        rep.curves[m.name] = binned_mae_curve(m.beta, gt);
        for (std::size_t c = 0; c < 4; ++c) {
            const auto& idx = masks[c];
            if (idx.empty()) {
                rep.conditions[c].mae[m.name] = std::numeric_limits<double>::quiet_NaN();
                continue;
            }
            double s = 0.0;
            for (auto i : idx) {
                s += std::abs(rad2deg(m.beta[i] - gt[i]));
            }
            rep.conditions[c].mae[m.name] = s / static_cast<double>(idx.size());
        }
    }
    return rep;
}

std::string MetricReport::to_json() const
{
    nlohmann::json j;
    j["samples"] = samples;
    j["models"] = models;
    for (const auto& [name, m] : overall) {
        j["overall"][name] = {{"mae_deg", m.mae}, {"mse_deg2", m.mse}, {"me_deg", m.me}, {"count", m.count}};
    }
    for (const auto& c : conditions) {
        nlohmann::json row;
        row["condition"] = c.condition;
        row["count"] = c.count;
        for (const auto& [name, v] : c.mae) {
            row["mae_deg"][name] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
        }
        j["conditions"].push_back(row);
    }
    for (const auto& [name, pts] : curves) {
        auto& arr = j["binned_mae"][name];
        arr = nlohmann::json::array();
        for (const auto& p : pts) {
            arr.push_back({{"lower_deg", p.lower}, {"upper_deg", p.upper}, {"mae_deg", p.mae},
                           {"share_pct", p.share}, {"count", p.count}});
        }
    }
    for (const auto& [k, v] : extra) {
        j["extra"][k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    }
    return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& dir, const MetricReport& report)
{
    std::filesystem::create_directories(dir);
    const auto open = [&dir](const char* name) {
        std::ofstream out(dir / name);
        if (!out) {
            throw DataError("cannot write '" + (dir / name).string() + "'");
        }
        return out;
    };
    {
        auto out = open("report.json");
        out << report.to_json();
    }
    {
        auto out = open("table1.csv");
        out << "model,mae_deg,mse_deg2,me_deg,count\n";
        for (const auto& name : report.models) {
            const auto& m = report.overall.at(name);
            out << name << ',' << format_double(m.mae) << ',' << format_double(m.mse) << ',' << format_double(m.me)
                << ',' << m.count << '\n';
        }
    }
    {
        auto out = open("table2.csv");
        out << "condition,count";
        for (const auto& name : report.models) {
            out << ',' << name;
        }
        out << '\n';
        for (const auto& c : report.conditions) {
            out << c.condition << ',' << c.count;
            for (const auto& name : report.models) {
                out << ',' << format_double(c.mae.at(name));
            }
            out << '\n';
        }
    }
    {
        auto out = open("binned_mae.csv");
        out << "model,lower_deg,upper_deg,mae_deg,share_pct,count\n";
        for (const auto& name : report.models) {
            for (const auto& p : report.curves.at(name)) {
                out << name << ',' << format_double(p.lower) << ',' << format_double(p.upper) << ','
                    << format_double(p.mae) << ',' << format_double(p.share) << ',' << p.count << '\n';
            }
        }
    }
}

} // namespace slipsense
