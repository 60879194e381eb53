#include "slipsense/ad.hpp"

#include "slipsense/error.hpp"

#include <cmath>
#include <numbers>

namespace slipsense::ad {

Parameter& ParameterSet::add(std::string name, Matrix init)
{
    if (contains(name)) {
        throw StateError("duplicate parameter '" + name + "'");
    }
    Parameter p;
    p.name = std::move(name);
    p.grad = Matrix::Zero(init.rows(), init.cols());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter& ParameterSet::get(std::string_view name)
{
    for (auto& p : params_) {
        if (p.name == name) {
            return p;
        }
    }
    throw StateError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterSet::get(std::string_view name) const
{
    return const_cast<ParameterSet*>(this)->get(name);
}

bool ParameterSet::contains(std::string_view name) const
{
    for (const auto& p : params_) {
        if (p.name == name) {
            return true;
        }
    }
    return false;
}

std::size_t ParameterSet::scalar_count() const noexcept
{
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += static_cast<std::size_t>(p.value.size());
    }
    return n;
}

void ParameterSet::zero_grad()
{
    for (auto& p : params_) {
        p.grad.setZero(p.value.rows(), p.value.cols());
    }
}

Var Tape::constant(Matrix value)
{
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(Parameter& p)
{
    Node n;
    n.external = &p.value;
    if (grad_enabled_) {
        n.param = &p;
        n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Parameter& p)
{
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Matrix& Tape::value(Var v) const
{
    const auto& n = nodes_[v.id];
    return n.external != nullptr ? *n.external : n.value;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward)
{
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (auto in : inputs) {
            n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
        }
        if (n.requires_grad) {
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var root)
{
    auto& r = nodes_[root.id];
    if (value(root).size() != 1) {
        throw StateError("backward() needs a scalar root");
    }
    if (!r.requires_grad) {
        return;
    }
    r.grad = Matrix::Ones(1, 1);
    r.has_grad = true;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.has_grad) {
            continue;
        }
        if (n.backward) {
            n.backward(*this, n.grad);
        }
        if (n.param != nullptr) {
            n.param->grad += n.grad;
        }
    }
}

Var matmul(Tape& t, Var a, Var b)
{
    Matrix out = t.value(a) * t.value(b);
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            tp.accumulate(a, g * tp.value(b).transpose());
        }
        if (tp.requires_grad(b)) {
            tp.accumulate(b, tp.value(a).transpose() * g);
        }
    });
}

Var add(Tape& t, Var a, Var b)
{
    Matrix out = t.value(a) + t.value(b);
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

Var add_row(Tape& t, Var a, Var row)
{
    Matrix out = t.value(a);
    out.rowwise() += t.value(row).row(0);
    return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(row)) {
            tp.accumulate(row, g.colwise().sum());
        }
    });
}

Var affine(Tape& t, Var x, Var W, Var b)
{
    Matrix out = t.value(x) * t.value(W);
    out.rowwise() += t.value(b).row(0);
    return t.record(std::move(out), {x, W, b}, [x, W, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(x)) {
            tp.accumulate(x, g * tp.value(W).transpose());
        }
        if (tp.requires_grad(W)) {
            tp.accumulate(W, tp.value(x).transpose() * g);
        }
        if (tp.requires_grad(b)) {
            tp.accumulate(b, g.colwise().sum());
        }
    });
}

Var scale(Tape& t, Var a, double s)
{
    Matrix out = s * t.value(a);
    return t.record(std::move(out), {a}, [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, s * g); });
}

Var relu(Tape& t, Var a)
{
    Matrix out = t.value(a).cwiseMax(0.0);
    return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        const auto& x = tp.value(a);
        tp.accumulate(a, (x.array() > 0.0).select(g, 0.0));
    });
}

Var elu(Tape& t, Var a)
{
    const auto& x = t.value(a);
    Matrix out = (x.array() > 0.0).select(x, x.array().exp() - 1.0);
    return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        const auto& in = tp.value(a);
        Matrix d = (in.array() > 0.0).select(Matrix::Ones(in.rows(), in.cols()), in.array().exp());
        tp.accumulate(a, g.cwiseProduct(d));
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

Var gelu(Tape& t, Var a)
{
    const auto& x = t.value(a);
    Matrix th = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh();
    Matrix out = 0.5 * x.array() * (1.0 + th.array());
    return t.record(std::move(out), {a}, [a, th = std::move(th)](Tape& tp, const Matrix& g) {
        const auto& in = tp.value(a).array();
        const auto inner_d = kGeluC * (1.0 + 3.0 * kGeluA * in.square());
        Matrix d = 0.5 * (1.0 + th.array()) + 0.5 * in * (1.0 - th.array().square()) * inner_d;
        tp.accumulate(a, g.cwiseProduct(d));
    });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps)
{
    const auto& in = t.value(x);
    const auto n = static_cast<double>(in.cols());
    Eigen::VectorXd mean = in.rowwise().mean();
    Matrix centered = in.colwise() - mean;
    Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / n) + eps).rsqrt();
    Matrix xhat = centered.array().colwise() * inv_std.array();
    Matrix out = xhat.array().rowwise() * t.value(gain).row(0).array();
    out.rowwise() += t.value(bias).row(0);
    return t.record(std::move(out), {x, gain, bias},
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape& tp,
                                                                                          const Matrix& g) {
                        if (tp.requires_grad(gain)) {
                            tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                        }
                        if (tp.requires_grad(bias)) {
                            tp.accumulate(bias, g.colwise().sum());
                        }
                        if (tp.requires_grad(x)) {
                            Matrix gx = g.array().rowwise() * tp.value(gain).row(0).array();
                            Eigen::VectorXd mean_g = gx.rowwise().mean();
                            Eigen::VectorXd mean_gx = gx.cwiseProduct(xhat).rowwise().sum() / n;
                            Matrix dx = gx.colwise() - mean_g;
                            dx.array() -= xhat.array().colwise() * mean_gx.array();
                            dx = dx.array().colwise() * inv_std.array();
                            tp.accumulate(x, dx);
                        }
                    });
}

Var select_rows(Tape& t, Var a, std::vector<Eigen::Index> rows)
{
    const auto& in = t.value(a);
    Matrix out(static_cast<Eigen::Index>(rows.size()), in.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = in.row(rows[i]);
    }
    const auto in_rows = in.rows();
    return t.record(std::move(out), {a}, [a, rows = std::move(rows), in_rows](Tape& tp, const Matrix& g) {
        Matrix ga = Matrix::Zero(in_rows, g.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        tp.accumulate(a, ga);
    });
}

Var sum(Tape& t, Var a)
{
    Matrix out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
        const auto& in = tp.value(a);
        tp.accumulate(a, Matrix::Constant(in.rows(), in.cols(), g(0, 0)));
    });
}

Var mean_squared_error(Tape& t, Var a, const Matrix& target)
{
    const auto& in = t.value(a);
    if (in.rows() != target.rows() || in.cols() != target.cols()) {
        throw StateError("mean_squared_error: shape mismatch");
    }
    Matrix diff = in - target;
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() / static_cast<double>(diff.size());
    return t.record(std::move(out), {a}, [a, diff = std::move(diff)](Tape& tp, const Matrix& g) {
        tp.accumulate(a, (2.0 * g(0, 0) / static_cast<double>(diff.size())) * diff);
    });
}

void Adam::step(ParameterSet& params)
{
    if (m_.size() != params.size()) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
            v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    }
}

double clip_grad_norm(ParameterSet& params, double max_norm)
{
    double sq = 0.0;
    for (const auto& p : params) {
        sq += p.grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            p.grad *= s;
        }
    }
    return norm;
}

} // namespace slipsense::ad
