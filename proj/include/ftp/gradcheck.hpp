#ifndef FTP_GRADCHECK_HPP
#define FTP_GRADCHECK_HPP

#include "autodiff.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ftp {

struct NamedVar {
    std::string name;
    Var var;
};

struct ParamError {
    std::string name;
    double max_error = 0.0;
    std::size_t worst_index = 0;
};

struct GradcheckReport {
    std::vector<ParamError> params;
    double max_error = 0.0;
    std::string worst_param;
    std::size_t coordinates = 0;

    bool passed(double tolerance) const { return max_error < tolerance; }
};

/// Optional hook applied to each analytic gradient before comparison (negative controls).
using GradHook = std::function<void(const std::string& name, Tensor& grad)>;

/**
 * Compares the reverse-mode gradient of a scalar function with central
 * differences, coordinate by coordinate, for every listed input.
 *
 * `f` is re-evaluated with each input perturbed in place by +/- eps; inputs are
 * restored afterwards. The error for a coordinate is
 * |analytic - numeric| / max(1, |numeric|).
 */
inline GradcheckReport finite_diff_check(const std::function<Var()>& f, std::vector<NamedVar> inputs, double eps,
                                         const GradHook& hook = {}) {
    if (!(eps > 0.0 && eps <= 1e-2)) {
        throw ArgumentError("finite_diff_check: eps must lie in (0, 1e-2], got " + std::to_string(eps));
    }
    for (auto& in : inputs) {
        in.var.set_requires_grad(true);
        in.var.zero_grad();
    }
    Var out = f();
    if (out.value().numel() != 1) {
        throw ContractError("finite_diff_check: function output must be scalar, got " + to_string(out.shape()));
    }
    backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) {
        Tensor g = in.var.grad();
        if (hook) {
            hook(in.name, g);
        }
        analytic.push_back(std::move(g));
    }

    GradcheckReport report;
    NoGradGuard no_grad;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        ParamError pe{inputs[p].name, 0.0, 0};
        Tensor& x = inputs[p].var.mutable_value();
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double saved = x[i];
            x[i] = saved + eps;
            const double up = f().value().item();
            x[i] = saved - eps;
            const double down = f().value().item();
            x[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
            if (err > pe.max_error) {
                pe.max_error = err;
                pe.worst_index = i;
            }
            ++report.coordinates;
        }
        if (report.worst_param.empty() || pe.max_error > report.max_error) {
            report.max_error = pe.max_error;
            report.worst_param = pe.name;
        }
        report.params.push_back(std::move(pe));
    }
    return report;
}

/// Single-input form: returns the max relative error of d f / d x.
inline double finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps) {
    Var leaf(x, true);
    auto report = finite_diff_check([&] { return f(leaf); }, {{"x", leaf}}, eps);
    return report.max_error;
}

}  // namespace ftp

#endif
