#ifndef SWIPE_TESTS_GRADCHECK_HPP
#define SWIPE_TESTS_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <swipe/nn.hpp>

// Central finite-difference oracle for hand-written backward passes.

namespace swipe::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
    int checked = 0;
};

/// Relative error with an absolute floor so near-zero gradients do not blow up.
inline double rel_error(double analytic, double numeric, double floor = 1e-6)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares param->grad (already filled by one backward pass of `loss`) with
/// central differences of `loss` for up to `per_param` random entries of each
/// parameter.
inline GradCheckResult check_params(const std::function<double()>& loss, nn::ParamRefs<double> params,
                                    int per_param = 6, double eps = 1e-5, unsigned seed = 7)
{
    GradCheckResult r;
    std::mt19937 rng(seed);
    for (auto* p : params) {
        const auto n = static_cast<int>(p->value.size());
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            idx[static_cast<std::size_t>(i)] = i;
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<std::size_t>(std::min(n, per_param)));
        for (int i : idx) {
            double& w = p->value.data()[i];
            const double saved = w;
            w = saved + eps;
            const double up = loss();
            w = saved - eps;
            const double down = loss();
            w = saved;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = p->grad.data()[i];
            const double e = rel_error(analytic, numeric);
            ++r.checked;
            if (e > r.max_rel_error) {
                r.max_rel_error = e;
                r.worst = p->name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                          " numeric=" + std::to_string(numeric);
            }
        }
    }
    return r;
}

} // namespace swipe::testing

#endif
