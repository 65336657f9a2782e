#pragma once

#include <cbev/ops.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace cbev {

struct GradCheckReport {
    std::string op_name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

using TensorOp = std::function<Tensor(const std::vector<Tensor>&)>;

inline constexpr double kFiniteDifferenceStep = 1e-3;

/// Compares the analytic adjoint of `op` against central finite differences.
///
/// The op output is reduced to a scalar by a fixed random unit-norm projection. Only inputs
/// flagged in `differentiable` (all, when empty) are perturbed. The error metric is
/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
inline GradCheckReport grad_check_inputs(const std::string& name, const TensorOp& op, std::vector<Tensor> inputs,
                                         double tolerance, unsigned seed, std::vector<bool> differentiable = {}) {
    if (differentiable.empty()) differentiable.assign(inputs.size(), true);
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(inputs[i].clone(differentiable[i]));

    Tensor out = op(leaves);
    std::mt19937 rng(seed ^ 0x9e3779b9u);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> projection(out.numel());
    double sq = 0.0;
    for (auto& p : projection) {
        p = normal(rng);
        sq += static_cast<double>(p) * p;
    }
    // Unit-norm direction keeps float32 rounding in the probes well below the tolerance.
    const float inv = sq > 0 ? static_cast<float>(1.0 / std::sqrt(sq)) : 1.0f;
    for (auto& p : projection) p *= inv;

    weighted_sum(out, projection).backward();

    auto project = [&](const std::vector<Tensor>& in) {
        Tensor y = op(in);
        double s = 0.0;
        for (std::size_t i = 0; i < projection.size(); ++i) s += static_cast<double>(projection[i]) * y[i];
        return s;
    };

    double worst = 0.0;
    for (std::size_t t = 0; t < leaves.size(); ++t) {
        if (!differentiable[t]) continue;
        const std::vector<float> analytic = leaves[t].grad();
        for (std::size_t e = 0; e < leaves[t].numel(); ++e) {
            std::vector<Tensor> probe;
            for (const auto& l : leaves) probe.push_back(l.detach());
            const float x0 = leaves[t][e];
            const float xp = x0 + static_cast<float>(kFiniteDifferenceStep);
            const float xm = x0 - static_cast<float>(kFiniteDifferenceStep);
            probe[t].mutable_data()[e] = xp;
            const double fp = project(probe);
            probe[t].mutable_data()[e] = xm;
            const double fm = project(probe);
            const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double err = std::abs(analytic[e] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return {name, worst, tolerance, worst <= tolerance};
}

/// grad_check with standard-normal inputs of the given shapes.
inline GradCheckReport grad_check(const std::string& name, const TensorOp& op, const std::vector<Shape>& input_shapes,
                                  double tolerance, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<Tensor> inputs;
    for (const auto& s : input_shapes) {
        std::vector<float> d(shape_numel(s));
        for (auto& v : d) v = normal(rng);
        inputs.emplace_back(s, std::move(d));
    }
    return grad_check_inputs(name, op, std::move(inputs), tolerance, seed);
}

/// Identity in the forward pass whose adjoint is multiplied by `factor`.
/// Used as a negative control: grad_check must reject it for factor != 1.
inline Tensor corrupt_adjoint(const Tensor& x, float factor) {
    std::vector<float> out(x.data().begin(), x.data().end());
    return detail::make_result("corrupt_adjoint", x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
        float* gx = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
    });
}

} // namespace cbev
