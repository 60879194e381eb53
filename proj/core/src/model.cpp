#include "slipsense/model.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <type_traits>

namespace slipsense {

void ModelConfig::validate() const
{
    window.validate();
    if (d == 0 || heads == 0 || d % heads != 0) {
        throw ConfigError("model: d must be a positive multiple of the head count");
    }
    if (!(u_factor >= 0.0) || !std::isfinite(u_factor)) {
        throw ConfigError("model: u_factor must be a finite non-negative number");
    }
    if (!(output_scale > 0.0) || !std::isfinite(output_scale)) {
        throw ConfigError("model: output_scale must be positive");
    }
}

double studentt_nll(double mu, double sigma, double nu, double y)
{
    const double r = y - mu;
    const double z = r * r / (nu * sigma * sigma);
    return -std::lgamma(0.5 * (nu + 1.0)) + std::lgamma(0.5 * nu) + std::log(sigma) +
           0.5 * std::log(nu * std::numbers::pi) + 0.5 * (nu + 1.0) * std::log1p(z);
}

double studentt_nll(std::span<const StudentTParams> params, std::span<const double> y)
{
    if (params.size() != y.size()) {
        throw DataError("studentt_nll: forecast and target lengths differ");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        total += studentt_nll(params[i].mu, params[i].sigma, params[i].nu, y[i]);
    }
    return total;
}

EstimateWithUncertainty predict_with_uncertainty(const StudentTParams& p, bool floor_at_one)
{
    double var = p.nu / (p.nu - 2.0) * p.sigma * p.sigma;
    if (floor_at_one) {
        var = std::max(var, 1.0);
    }
    return {p.mu, var};
}

InputScaler InputScaler::fit(std::span<const Scenario> scenarios)
{
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(kInputDim);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(kInputDim);
    double n = 0.0;
    for (const auto& s : scenarios) {
        for (const auto& f : s.frames) {
            const auto x = f.features();
            for (std::size_t j = 0; j < kInputDim; ++j) {
                sum[static_cast<Eigen::Index>(j)] += x[j];
                sq[static_cast<Eigen::Index>(j)] += x[j] * x[j];
            }
            n += 1.0;
        }
    }
    if (n < 2.0) {
        throw DataError("input scaler needs at least two frames");
    }
    InputScaler sc;
    sc.mean = (sum / n).transpose();
    for (Eigen::Index j = 0; j < sc.mean.size(); ++j) {
        const double var = std::max(0.0, sq[j] / n - sc.mean[j] * sc.mean[j]);
        const double sd = std::sqrt(var);
        sc.scale[j] = sd > 1e-9 ? sd : 1.0;
    }
    return sc;
}

Eigen::MatrixXd InputScaler::apply(const Eigen::MatrixXd& X) const
{
    return (X.rowwise() - mean).array().rowwise() / scale.array();
}

namespace ad {

Var shift_concat(Tape& t, Var x, std::size_t seq_len)
{
    const auto& in = t.value(x);
    const auto L = static_cast<Eigen::Index>(seq_len);
    if (L == 0 || in.rows() % L != 0) {
        throw StateError("shift_concat: rows not a multiple of the sequence length");
    }
    const Eigen::Index d = in.cols();
    const Eigen::Index batch = in.rows() / L;
    Matrix out = Matrix::Zero(in.rows(), 3 * d);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const Eigen::Index o = b * L;
        out.block(o + 1, 0, L - 1, d) = in.block(o, 0, L - 1, d);
        out.block(o, d, L, d) = in.block(o, 0, L, d);
        out.block(o, 2 * d, L - 1, d) = in.block(o + 1, 0, L - 1, d);
    }
    return t.record(std::move(out), {x}, [x, L, d, batch](Tape& tp, const Matrix& g) {
        Matrix gx = g.middleCols(d, d);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const Eigen::Index o = b * L;
            gx.block(o, 0, L - 1, d) += g.block(o + 1, 0, L - 1, d);
            gx.block(o + 1, 0, L - 1, d) += g.block(o, 2 * d, L - 1, d);
        }
        tp.accumulate(x, gx);
    });
}

Var maxpool_time(Tape& t, Var x, std::size_t seq_len)
{
    const auto& in = t.value(x);
    const auto L = static_cast<Eigen::Index>(seq_len);
    if (L == 0 || in.rows() % L != 0) {
        throw StateError("maxpool_time: rows not a multiple of the sequence length");
    }
    const Eigen::Index half = (L + 1) / 2;
    const Eigen::Index batch = in.rows() / L;
    const Eigen::Index d = in.cols();
    Matrix out(batch * half, d);
    std::vector<Eigen::Index> src(static_cast<std::size_t>(out.size()));
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index j = 0; j < half; ++j) {
            const Eigen::Index r0 = b * L + 2 * j;
            const Eigen::Index r1 = b * L + std::min(2 * j + 1, L - 1);
            for (Eigen::Index c = 0; c < d; ++c) {
                const bool first = in(r0, c) >= in(r1, c);
                out(b * half + j, c) = first ? in(r0, c) : in(r1, c);
                src[static_cast<std::size_t>(c * out.rows() + b * half + j)] = first ? r0 : r1;
            }
        }
    }
    const Eigen::Index in_rows = in.rows();
    return t.record(std::move(out), {x}, [x, src = std::move(src), in_rows, d](Tape& tp, const Matrix& g) {
        Matrix gx = Matrix::Zero(in_rows, d);
        for (Eigen::Index c = 0; c < d; ++c) {
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                gx(src[static_cast<std::size_t>(c * g.rows() + r)], c) += g(r, c);
            }
        }
        tp.accumulate(x, gx);
    });
}

Var studentt_nll_loss(Tape& t, Var head, const Eigen::VectorXd& y, double output_scale, double weight)
{
    const auto& o = t.value(head);
    if (o.cols() != 3 || o.rows() != y.size()) {
        throw StateError("studentt_nll_loss: head must be N x 3 with N targets");
    }
    const double s = output_scale;
    Matrix grad(o.rows(), 3);
    double total = 0.0;
    for (Eigen::Index i = 0; i < o.rows(); ++i) {
        const double mu = s * o(i, 0);
        const double sigma = s * softplus(o(i, 1));
        const double nu = 3.0 + softplus(o(i, 2));
        total += studentt_nll(mu, sigma, nu, y[i]);

        const double r = y[i] - mu;
        const double z = r * r / (nu * sigma * sigma);
        const double w = 1.0 + z;
        const double d_mu = -(nu + 1.0) * r / (nu * sigma * sigma * w);
        const double d_sigma = 1.0 / sigma - (nu + 1.0) * z / (sigma * w);
        const double d_nu = -0.5 * digamma(0.5 * (nu + 1.0)) + 0.5 * digamma(0.5 * nu) + 0.5 / nu +
                            0.5 * std::log1p(z) - 0.5 * (nu + 1.0) * z / (nu * w);
        grad(i, 0) = weight * d_mu * s;
        grad(i, 1) = weight * d_sigma * s * sigmoid(o(i, 1));
        grad(i, 2) = weight * d_nu * sigmoid(o(i, 2));
    }
    Matrix out(1, 1);
    out(0, 0) = weight * total;
    return t.record(std::move(out), {head},
                    [head, grad = std::move(grad)](Tape& tp, const Matrix& g) { tp.accumulate(head, g(0, 0) * grad); });
}

} // namespace ad

ad::Var distill(ad::Tape& t, ad::Var x, ad::Var W, ad::Var b, std::size_t seq_len)
{
    auto c = ad::affine(t, ad::shift_concat(t, x, seq_len), W, b);
    return ad::maxpool_time(t, ad::elu(t, c), seq_len);
}

Eigen::MatrixXd positional_encoding(std::size_t first, std::size_t count, std::size_t d)
{
    Eigen::MatrixXd pe(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(d));
    for (std::size_t p = 0; p < count; ++p) {
        const double pos = static_cast<double>(first + p);
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            pe(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) =
                i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
        }
    }
    return pe;
}

namespace {

void add_linear(ad::ParameterSet& ps, const std::string& name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng)
{
    ps.add(name + ".W", ad::xavier_uniform(in, out, rng));
    ps.add(name + ".b", ad::Matrix::Zero(1, out));
}

void add_norm(ad::ParameterSet& ps, const std::string& name, Eigen::Index d)
{
    ps.add(name + ".g", ad::Matrix::Ones(1, d));
    ps.add(name + ".b", ad::Matrix::Zero(1, d));
}

void add_attention(ad::ParameterSet& ps, const std::string& name, Eigen::Index d, std::mt19937_64& rng)
{
    for (const char* p : {".q", ".k", ".v", ".o"}) {
        add_linear(ps, name + p, d, d, rng);
    }
}

void check_finite(const ad::Tape& t, ad::Var v, const char* layer)
{
    if (!t.value(v).allFinite()) {
        throw NumericalError(std::string("non-finite activation in layer '") + layer + "'");
    }
}

template <typename PS>
struct GraphBuilder {
    ad::Tape& t;
    PS& ps;

    ad::Var p(const std::string& name) { return t.parameter(ps.get(name)); }

    ad::Var linear(ad::Var x, const std::string& name) { return ad::affine(t, x, p(name + ".W"), p(name + ".b")); }

    ad::Var norm(ad::Var x, const std::string& name) { return ad::layer_norm(t, x, p(name + ".g"), p(name + ".b")); }

    ad::Var attention(ad::Var xq, ad::Var xkv, const std::string& name, const AttentionShape& shape)
    {
        auto q = linear(xq, name + ".q");
        auto k = linear(xkv, name + ".k");
        auto v = linear(xkv, name + ".v");
        return linear(ad::multihead_attention(t, q, k, v, shape), name + ".o");
    }

    ad::Var feed_forward(ad::Var x, const std::string& name)
    {
        return linear(ad::gelu(t, linear(x, name + ".ff1")), name + ".ff2");
    }
};

} // namespace

MlEstimator::MlEstimator(const ModelConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(cfg_.seed, 0x6d6cULL));
    const auto d = static_cast<Eigen::Index>(cfg_.d);
    const auto dff = static_cast<Eigen::Index>(cfg_.ff_dim());
    const auto m = static_cast<Eigen::Index>(kInputDim);

    add_linear(params_, "emb.enc", m, d, rng);
    add_linear(params_, "emb.dec", m, d, rng);
    for (const char* layer : {"enc0", "enc1"}) {
        const std::string n = layer;
        add_attention(params_, n + ".attn", d, rng);
        add_norm(params_, n + ".ln1", d);
        add_linear(params_, n + ".ff1", d, dff, rng);
        add_linear(params_, n + ".ff2", dff, d, rng);
        add_norm(params_, n + ".ln2", d);
    }
    add_linear(params_, "distill", 3 * d, d, rng);
    add_attention(params_, "dec.self", d, rng);
    add_norm(params_, "dec.ln1", d);
    add_attention(params_, "dec.cross", d, rng);
    add_norm(params_, "dec.ln2", d);
    add_linear(params_, "dec.ff1", d, dff, rng);
    add_linear(params_, "dec.ff2", dff, d, rng);
    add_norm(params_, "dec.ln3", d);

    params_.add("head.W", ad::xavier_uniform(d, 3, rng, 0.01));
    ad::Matrix hb(1, 3);
    hb << 0.0, softplus_inverse(1.0), softplus_inverse(3.0);
    params_.add("head.b", hb);
}

template <typename Self>
ad::Var MlEstimator::build_impl(Self& self, ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch)
{
    const auto& cfg = self.cfg_;
    const auto L = static_cast<Eigen::Index>(cfg.window.L);
    const auto B = static_cast<Eigen::Index>(cfg.window.B);
    const auto F = static_cast<Eigen::Index>(cfg.window.F);
    const auto n = static_cast<Eigen::Index>(batch);
    if (batch == 0 || X.rows() != n * L || X.cols() != static_cast<Eigen::Index>(kInputDim)) {
        throw StateError("model input must stack batch windows of L x 9");
    }
    const Eigen::MatrixXd Xn = self.scaler_.apply(X);
    const auto d = static_cast<Eigen::Index>(cfg.d);
    GraphBuilder<std::remove_reference_t<decltype((self.params_))>> g{t, self.params_};

    // Encoder embedding.
    const Eigen::MatrixXd pe_enc = positional_encoding(0, cfg.window.L, cfg.d);
    Eigen::MatrixXd pe_stack(n * L, d);
    for (Eigen::Index b = 0; b < n; ++b) {
        pe_stack.middleRows(b * L, L) = pe_enc;
    }
    auto x = ad::add(t, g.linear(t.constant(Xn), "emb.enc"), t.constant(std::move(pe_stack)));

    std::size_t len = cfg.window.L;
    const std::size_t lens[2] = {cfg.window.L, cfg.distilled_len()};
    for (int layer = 0; layer < 2; ++layer) {
        const std::string name = layer == 0 ? "enc0" : "enc1";
        len = lens[layer];
        AttentionShape shape{cfg.heads, len, len, true, cfg.u_factor};
        x = g.norm(ad::add(t, x, g.attention(x, x, name + ".attn", shape)), name + ".ln1");
        check_finite(t, x, layer == 0 ? "enc0.attn" : "enc1.attn");
        x = g.norm(ad::add(t, x, g.feed_forward(x, name)), name + ".ln2");
        check_finite(t, x, layer == 0 ? "enc0.ff" : "enc1.ff");
        if (layer == 0) {
            x = distill(t, x, g.p("distill.W"), g.p("distill.b"), len);
            check_finite(t, x, "distill");
        }
    }
    const auto enc = x;
    const std::size_t enc_len = cfg.distilled_len();

    // Decoder: last B+1 observed rows followed by F zero rows.
    const Eigen::Index Ld = B + 1 + F;
    Eigen::MatrixXd dec_in = Eigen::MatrixXd::Zero(n * Ld, Xn.cols());
    for (Eigen::Index b = 0; b < n; ++b) {
        dec_in.middleRows(b * Ld, B + 1) = Xn.middleRows(b * L + L - 1 - B, B + 1);
    }
    const Eigen::MatrixXd pe_dec = positional_encoding(cfg.window.L - 1 - cfg.window.B, cfg.decoder_len(), cfg.d);
    Eigen::MatrixXd pe_dec_stack(n * Ld, d);
    for (Eigen::Index b = 0; b < n; ++b) {
        pe_dec_stack.middleRows(b * Ld, Ld) = pe_dec;
    }
    auto y = ad::add(t, g.linear(t.constant(std::move(dec_in)), "emb.dec"), t.constant(std::move(pe_dec_stack)));
    AttentionShape self_shape{cfg.heads, cfg.decoder_len(), cfg.decoder_len(), true, cfg.u_factor};
    y = g.norm(ad::add(t, y, g.attention(y, y, "dec.self", self_shape)), "dec.ln1");
    check_finite(t, y, "dec.self");
    AttentionShape cross_shape{cfg.heads, cfg.decoder_len(), enc_len, false, cfg.u_factor};
    y = g.norm(ad::add(t, y, g.attention(y, enc, "dec.cross", cross_shape)), "dec.ln2");
    check_finite(t, y, "dec.cross");
    y = g.norm(ad::add(t, y, g.feed_forward(y, "dec")), "dec.ln3");
    check_finite(t, y, "dec.ff");

    std::vector<Eigen::Index> rows;
    rows.reserve(static_cast<std::size_t>(n * (F + 1)));
    for (Eigen::Index b = 0; b < n; ++b) {
        for (Eigen::Index j = 0; j <= F; ++j) {
            rows.push_back(b * Ld + B + j);
        }
    }
    auto out = g.linear(ad::select_rows(t, y, std::move(rows)), "head");
    check_finite(t, out, "head");
    return out;
}

ad::Var MlEstimator::build(ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch)
{
    return build_impl(*this, t, X, batch);
}

ad::Var MlEstimator::build(ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch) const
{
    return build_impl(*this, t, X, batch);
}

StudentTParams MlEstimator::head_to_params(double o_mu, double o_sigma, double o_nu) const noexcept
{
    const double s = cfg_.output_scale;
    return {s * o_mu, s * softplus(o_sigma), 3.0 + softplus(o_nu)};
}

Eigen::MatrixXd MlEstimator::forward_batch(const Eigen::MatrixXd& X, std::size_t batch) const
{
    ad::Tape t(false);
    const auto& o = t.value(build(t, X, batch));
    Eigen::MatrixXd out(o.rows(), 3);
    for (Eigen::Index i = 0; i < o.rows(); ++i) {
        const auto p = head_to_params(o(i, 0), o(i, 1), o(i, 2));
        out(i, 0) = p.mu;
        out(i, 1) = p.sigma;
        out(i, 2) = p.nu;
    }
    return out;
}

std::vector<StudentTParams> MlEstimator::forward(const Eigen::MatrixXd& X) const
{
    const auto out = forward_batch(X, 1);
    std::vector<StudentTParams> res(static_cast<std::size_t>(out.rows()));
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        res[static_cast<std::size_t>(i)] = {out(i, 0), out(i, 1), out(i, 2)};
    }
    return res;
}

Eigen::MatrixXd stack_windows(std::span<const Scenario> scenarios, std::span<const WindowRef> refs,
                              const WindowConfig& cfg, std::size_t first, std::size_t count)
{
    const auto L = static_cast<Eigen::Index>(cfg.L);
    Eigen::MatrixXd X(static_cast<Eigen::Index>(count) * L, static_cast<Eigen::Index>(kInputDim));
    for (std::size_t i = 0; i < count; ++i) {
        const auto& r = refs[first + i];
        fill_window_inputs(scenarios[r.scenario], r.end, cfg, X.middleRows(static_cast<Eigen::Index>(i) * L, L));
    }
    return X;
}

std::vector<EstimateWithUncertainty> predict_scenario(const MlEstimator& model, const Scenario& scenario,
                                                      bool floor_at_one, std::size_t batch)
{
    const auto& wc = model.config().window;
    const std::size_t n = window_count(scenario.size(), wc);
    if (scenario.size() < wc.min_length()) {
        throw DataError("scenario '" + scenario.id + "' is shorter than one window");
    }
    std::vector<WindowRef> refs(n);
    for (std::size_t i = 0; i < n; ++i) {
        refs[i] = {0, first_window_end(wc) + i};
    }
    const std::span<const Scenario> one(&scenario, 1);
    const std::size_t steps = wc.F + 1;
    std::vector<EstimateWithUncertainty> out;
    out.reserve(n);
    for (std::size_t first = 0; first < n; first += batch) {
        const std::size_t count = std::min(batch, n - first);
        const auto P = model.forward_batch(stack_windows(one, refs, wc, first, count), count);
        for (std::size_t i = 0; i < count; ++i) {
            const auto r = static_cast<Eigen::Index>(i * steps);
            out.push_back(predict_with_uncertainty({P(r, 0), P(r, 1), P(r, 2)}, floor_at_one));
        }
    }
    return out;
}

namespace {

Eigen::VectorXd stack_targets(std::span<const Scenario> scenarios, std::span<const WindowRef> refs,
                              const WindowConfig& cfg, std::size_t first, std::size_t count)
{
    const std::size_t steps = cfg.F + 1;
    Eigen::VectorXd y(static_cast<Eigen::Index>(count * steps));
    for (std::size_t i = 0; i < count; ++i) {
        const auto& r = refs[first + i];
        for (std::size_t j = 0; j < steps; ++j) {
            y[static_cast<Eigen::Index>(i * steps + j)] = scenarios[r.scenario].beta_gt[r.end + j];
        }
    }
    return y;
}

ValidationScore score_refs(const MlEstimator& model, std::span<const Scenario> scenarios,
                           std::span<const WindowRef> refs)
{
    const auto& wc = model.config().window;
    const std::size_t steps = wc.F + 1;
    constexpr std::size_t kBatch = 256;
    ValidationScore s;
    for (std::size_t first = 0; first < refs.size(); first += kBatch) {
        const std::size_t count = std::min(kBatch, refs.size() - first);
        const auto P = model.forward_batch(stack_windows(scenarios, refs, wc, first, count), count);
        const auto y = stack_targets(scenarios, refs, wc, first, count);
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
            s.nll += studentt_nll(P(i, 0), P(i, 1), P(i, 2), y[i]);
        }
        for (std::size_t i = 0; i < count; ++i) {
            const auto r = static_cast<Eigen::Index>(i * steps);
            s.mae_deg += std::abs(rad2deg(P(r, 0) - y[r]));
        }
    }
    s.windows = refs.size();
    if (s.windows > 0) {
        s.nll /= static_cast<double>(s.windows);
        s.mae_deg /= static_cast<double>(s.windows);
    }
    return s;
}

} // namespace

ValidationScore score_ml(const MlEstimator& model, std::span<const Scenario> scenarios, std::size_t stride)
{
    const auto refs = enumerate_windows(scenarios, model.config().window, std::max<std::size_t>(stride, 1));
    return score_refs(model, scenarios, refs);
}

TrainResult train_ml(std::span<const Scenario> train, std::span<const Scenario> val, const ModelConfig& cfg,
                     const TrainOptions& opt, const EpochCallback& on_epoch)
{
    if (train.empty() || val.empty()) {
        throw DataError("train_ml: training and validation splits must be non-empty");
    }
    if (opt.batch == 0 || opt.epochs == 0 || !(opt.lr > 0.0)) {
        throw ConfigError("train_ml: batch, epochs and lr must be positive");
    }
    const auto& wc = cfg.window;
    auto refs = enumerate_windows(train, wc, std::max<std::size_t>(opt.train_stride, 1));
    const auto val_refs = enumerate_windows(val, wc, std::max<std::size_t>(opt.val_stride, 1));
    if (refs.empty() || val_refs.empty()) {
        throw DataError("train_ml: no finite windows in the training or validation split");
    }

    MlEstimator model(cfg);
    model.scaler() = InputScaler::fit(train);
    TrainResult result{model, ad::Adam(opt.lr), {}, 0};
    double best_val = std::numeric_limits<double>::infinity();
    double initial_loss = std::numeric_limits<double>::quiet_NaN();
    int above_limit = 0;
    std::mt19937_64 rng(mix_seed(opt.seed, 0x747261696eULL));
    const auto L = static_cast<Eigen::Index>(wc.L);

    spdlog::info("train_ml: {} training windows, {} validation windows, {} parameters", refs.size(),
                 val_refs.size(), model.parameters().scalar_count());
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(refs.begin(), refs.end(), rng);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t first = 0; first < refs.size(); first += opt.batch) {
            const std::size_t count = std::min(opt.batch, refs.size() - first);
            const auto X = stack_windows(train, refs, wc, first, count);
            for (std::size_t i = 0; i < count; ++i) {
                const auto& r = refs[first + i];
                if (!audit_no_target_leak(X.middleRows(static_cast<Eigen::Index>(i) * L, L), train[r.scenario],
                                          r.end)) {
                    throw DataError("train_ml: ground-truth sideslip found in the model input");
                }
            }
            const auto y = stack_targets(train, refs, wc, first, count);
            auto& ps = model.parameters();
            ps.zero_grad();
            ad::Tape tape;
            const auto head = model.build(tape, X, count);
            const auto loss = ad::studentt_nll_loss(tape, head, y, cfg.output_scale, 1.0 / static_cast<double>(count));
            const double lv = tape.value(loss)(0, 0);
            if (!std::isfinite(lv)) {
                throw NumericalError("train_ml: non-finite loss in epoch " + std::to_string(epoch));
            }
            if (std::isnan(initial_loss)) {
                initial_loss = lv;
            }
            tape.backward(loss);
            ad::clip_grad_norm(ps, opt.clip_norm);
            result.optimizer.step(ps);
            loss_sum += lv * static_cast<double>(count);
            seen += count;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_nll = loss_sum / static_cast<double>(seen);
        const auto vs = score_refs(model, val, val_refs);
        log.val_nll = vs.nll;
        log.val_mae_deg = vs.mae_deg;
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(log);
        spdlog::debug("epoch {:>3}  train_nll {:.5f}  val_nll {:.5f}  val_mae {:.4f} deg  ({:.1f} s)", epoch,
                     log.train_nll, log.val_nll, log.val_mae_deg, log.seconds);
        if (on_epoch) {
            on_epoch(log);
        }
        if (!std::isfinite(log.val_nll)) {
            throw NumericalError("train_ml: non-finite validation loss in epoch " + std::to_string(epoch));
        }
        if (log.val_nll < best_val) {
            best_val = log.val_nll;
            result.model = model;
            result.best_epoch = epoch;
        }
        if (log.train_nll - initial_loss > 9.0 * std::abs(initial_loss)) {
            if (++above_limit >= 3) {
                throw NumericalError("train_ml: loss diverged (above 10x the initial loss for 3 epochs)");
            }
        } else {
            above_limit = 0;
        }
    }
    return result;
}

} // namespace slipsense
