#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ibner/autodiff.hpp"

namespace ibner::ad {

struct GradCheckOptions {
    double epsilon = 1e-5;
    /// Coordinates sampled per parameter; smaller parameters are checked exhaustively.
    std::size_t coords_per_param = 32;
    std::uint64_t seed = 7;
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    double rel_floor = 1e-6;
};

struct GradSample {
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::string worst;  // "name[index]" of the coordinate with max_rel_err
    std::map<std::string, std::vector<GradSample>> per_parameter;

    std::size_t coordinates() const {
        std::size_t n = 0;
        for (const auto& [_, v] : per_parameter) n += v.size();
        return n;
    }
};

using LossFn = std::function<Var(Graph&)>;

/// Compares reverse-mode gradients against central finite differences
/// (f(t+eps) - f(t-eps)) / (2 eps). `loss_fn` must be deterministic: any
/// sampling noise has to be frozen or reseeded on every call.
inline GradReport grad_check(const LossFn& loss_fn, std::span<Parameter* const> params,
                             const GradCheckOptions& opt = {}) {
    if (!(opt.epsilon >= 1e-7 && opt.epsilon <= 1e-3)) {
        throw UsageError("grad_check: epsilon must lie in [1e-7, 1e-3]");
    }

    for (auto* p : params) p->zero_grad();
    {
        Graph g;
        Var loss = loss_fn(g);
        g.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    auto eval = [&](const Parameter& p, std::size_t idx) {
        Graph g(false);
        const double v = loss_fn(g).item();
        if (!std::isfinite(v)) {
            throw NumericError("grad_check: non-finite loss perturbing " + p.name + "[" + std::to_string(idx) + "]");
        }
        return v;
    };

    std::mt19937_64 rng(opt.seed);
    GradReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        const std::size_t n = p.value.size();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > opt.coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        auto& samples = report.per_parameter[p.name];
        for (auto idx : coords) {
            const double orig = p.value[idx];
            p.value[idx] = orig + opt.epsilon;
            const double fp = eval(p, idx);
            p.value[idx] = orig - opt.epsilon;
            const double fm = eval(p, idx);
            p.value[idx] = orig;

            GradSample s{idx, analytic[k][idx], (fp - fm) / (2.0 * opt.epsilon)};
            const double abs_err = std::abs(s.analytic - s.numeric);
            const double denom = std::max({std::abs(s.analytic), std::abs(s.numeric), opt.rel_floor});
            const double rel_err = abs_err / denom;
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            if (rel_err >= report.max_rel_err) {
                report.max_rel_err = rel_err;
                report.worst = p.name + "[" + std::to_string(idx) + "]";
            }
            samples.push_back(s);
        }
    }
    return report;
}

inline GradReport grad_check(const LossFn& loss_fn, std::initializer_list<Parameter*> params,
                             const GradCheckOptions& opt = {}) {
    return grad_check(loss_fn, std::span<Parameter* const>(params.begin(), params.size()), opt);
}

}  // namespace ibner::ad
