#pragma once

#include "slipsense/ad.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace slipsense::testing {

struct GradCheck {
    std::size_t checked = 0;
    double worst_rel = 0.0;
};

// Central differences on randomly chosen scalar entries of the parameter
// set. `loss` must rebuild the graph from the current parameter values;
// `grad` must fill Parameter::grad at the same point.
inline GradCheck check_parameter_gradients(ad::ParameterSet& ps, const std::function<double()>& loss,
                                           const std::function<void()>& grad, std::size_t samples,
                                           std::uint64_t seed, double step = 1e-5, double abs_floor = 1e-7)
{
    ps.zero_grad();
    grad();
    std::vector<std::pair<std::size_t, Eigen::Index>> all;
    for (std::size_t p = 0; p < ps.size(); ++p) {
        for (Eigen::Index i = 0; i < ps[p].value.size(); ++i) {
            all.emplace_back(p, i);
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(std::min(samples, all.size()));

    GradCheck out;
    for (const auto& [p, i] : all) {
        auto& param = ps[p];
        const double analytic = param.grad.data()[i];
        const double orig = param.value.data()[i];
        param.value.data()[i] = orig + step;
        const double up = loss();
        param.value.data()[i] = orig - step;
        const double down = loss();
        param.value.data()[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
        out.worst_rel = std::max(out.worst_rel, std::abs(analytic - numeric) / denom);
        ++out.checked;
    }
    return out;
}

} // namespace slipsense::testing
