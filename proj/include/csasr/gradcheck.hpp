#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "csasr/ops.hpp"
#include "csasr/rng.hpp"
#include "csasr/tensor.hpp"

namespace csasr {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::size_t checked = 0;
    std::string worst;  // "tensor#k[i]" of the worst coordinate

    std::string summary() const {
        return (pass ? "pass" : "FAIL") + std::string(" max_rel_err=") + std::to_string(max_rel_err) +
               " checked=" + std::to_string(checked) + (worst.empty() ? "" : " worst=" + worst);
    }
};

/// Central-difference gradient verification, 64-bit only. `f` maps the
/// given inputs to a scalar loss and must be a pure function of them;
/// it is called once with a tape for the analytic pass and repeatedly
/// without one for the (f(x+h)-f(x-h))/2h probes.
///
/// max_checks_per_tensor == 0 probes every coordinate; a positive value
/// probes that many seeded random coordinates per tensor, which is how
/// the end-to-end model check stays inside its time budget.
inline GradCheckReport grad_check(
    const std::function<TensorPtr<double>(const std::vector<TensorPtr<double>>&, Tape<double>*)>& f,
    const std::vector<TensorPtr<double>>& inputs, double h, double tol, std::size_t max_checks_per_tensor = 0,
    std::uint64_t seed = 0) {
    for (const auto& t : inputs) {
        t->requires_grad = true;
        t->grad.clear();
    }
    Tape<double> tape;
    auto loss = f(inputs, &tape);
    if (loss->numel() != 1) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& t : inputs) {
        t->ensure_grad();
        analytic.push_back(t->grad);
    }

    GradCheckReport report;
    report.pass = true;
    Rng rng(seed);
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& t = inputs[ti];
        std::vector<std::size_t> coords;
        if (max_checks_per_tensor == 0 || t->numel() <= max_checks_per_tensor) {
            coords.resize(t->numel());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            for (std::size_t k = 0; k < max_checks_per_tensor; ++k)
                coords.push_back(static_cast<std::size_t>(rng.uniform_int(t->numel())));
        }
        for (std::size_t i : coords) {
            const double saved = t->data[i];
            t->data[i] = saved + h;
            const double lp = f(inputs, nullptr)->data[0];
            t->data[i] = saved - h;
            const double lm = f(inputs, nullptr)->data[0];
            t->data[i] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = "tensor#" + std::to_string(ti) + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

/// Convenience wrapper for checking one op: the loss is sum(op(x...) * R)
/// with a fixed random projection R so every output element contributes.
inline GradCheckReport grad_check_op(
    const std::function<TensorPtr<double>(const std::vector<TensorPtr<double>>&, Tape<double>*)>& op,
    const std::vector<TensorPtr<double>>& inputs, double h, double tol, std::size_t max_checks_per_tensor = 0,
    std::uint64_t seed = 7) {
    // Probe output shape once to build R.
    auto probe = op(inputs, nullptr);
    auto r = zeros<double>(probe->shape);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    fill_uniform(r, rng, -1.0, 1.0);
    auto f = [op, r](const std::vector<TensorPtr<double>>& xs, Tape<double>* tape) {
        auto y = op(xs, tape);
        return sum_all(mul(y, r, tape), tape);
    };
    return grad_check(f, inputs, h, tol, max_checks_per_tensor, seed);
}

}  // namespace csasr
