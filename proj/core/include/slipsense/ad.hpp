#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>
#include <vector>

/// Minimal reverse-mode differentiation over dense matrices.
///
/// A Tape records every operation of one forward pass as a node holding its
/// value and a closure that pushes the node's gradient into its inputs.
/// Parameters are referenced, never copied; after backward() each parameter
/// has its gradient accumulated into Parameter::grad.
namespace slipsense::ad {

using Matrix = Eigen::MatrixXd;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
};

class ParameterSet {
public:
    Parameter& add(std::string name, Matrix init);
    Parameter& get(std::string_view name);
    const Parameter& get(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const noexcept { return params_.size(); }
    std::size_t scalar_count() const noexcept;
    void zero_grad();

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }

private:
    std::deque<Parameter> params_;
};

struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const noexcept { return id != UINT32_MAX; }
};

class Tape;
using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

class Tape {
public:
    /// When disabled, parameters are recorded as constants and no backward
    /// closures are kept.
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Var constant(Matrix value);
    Var parameter(Parameter& p);
    Var parameter(const Parameter& p); // never receives gradient

    const Matrix& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    /// Records an op result. `backward` is dropped when no input needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);

    template <typename Derived>
    void accumulate(Var v, const Eigen::MatrixBase<Derived>& g)
    {
        auto& n = nodes_[v.id];
        if (!n.requires_grad) {
            return;
        }
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    /// Seeds d(root)/d(root) = 1 (root must be 1x1) and runs the reverse sweep.
    void backward(Var root);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        const Matrix* external = nullptr;
        Matrix grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
        bool has_grad = false;
    };
    std::vector<Node> nodes_;
    bool grad_enabled_;
};

// --- primitive ops -----------------------------------------------------------

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Tape& t, Var a, Var row);
Var scale(Tape& t, Var a, double s);
Var relu(Tape& t, Var a);
Var elu(Tape& t, Var a);
/// tanh approximation of GELU.
Var gelu(Tape& t, Var a);
/// Row-wise layer normalisation with learned gain and bias (1 x n each).
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
Var select_rows(Tape& t, Var a, std::vector<Eigen::Index> rows);
Var sum(Tape& t, Var a);
/// mean((a - target)^2) over all entries, 1 x 1.
Var mean_squared_error(Tape& t, Var a, const Matrix& target);

/// Affine layer: x W + b with W stored (in x out) and b (1 x out).
Var affine(Tape& t, Var x, Var W, Var b);

// --- optimisation ------------------------------------------------------------

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
    }

    void step(ParameterSet& params);

    double learning_rate() const noexcept { return lr_; }
    void set_learning_rate(double lr) noexcept { lr_ = lr; }
    long long steps() const noexcept { return t_; }

    // Exposed for checkpointing.
    std::vector<Matrix>& first_moments() noexcept { return m_; }
    std::vector<Matrix>& second_moments() noexcept { return v_; }
    const std::vector<Matrix>& first_moments() const noexcept { return m_; }
    const std::vector<Matrix>& second_moments() const noexcept { return v_; }
    void set_steps(long long t) noexcept { t_ = t; }

private:
    double lr_, beta1_, beta2_, eps_;
    long long t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

/// Xavier/Glorot uniform initialisation.
template <typename Rng>
Matrix xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng, double gain = 1.0)
{
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(fan_in, fan_out);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            m(i, j) = dist(rng);
        }
    }
    return m;
}

} // namespace slipsense::ad
