#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "stoplab/ops.hpp"
#include "stoplab/rng.hpp"
#include "stoplab/tensor.hpp"

namespace stoplab {

struct GradCheckFailure {
    std::string tensor;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    double tol = 0.0;
    bool pass = false;
    std::vector<GradCheckFailure> failures;
};

namespace detail {

inline double rel_err_of(double analytic, double numeric) {
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    if (denom < 1e-7) {
        return 0.0; // both vanish; nothing meaningful to compare
    }
    return std::abs(analytic - numeric) / denom;
}

} // namespace detail

// Central-difference gradient check in f64. `f` must rebuild the forward pass
// from scratch on every call (it receives a fresh Graph) and return a scalar
// loss depending on the named input tensors. The finite-difference side is the
// independent oracle: it never touches the backward implementation.
//
// Large tensors are subsampled; at least `min_coords` coordinates per tensor
// are always probed.
template <class F>
GradCheckReport grad_check(F&& f, const std::vector<std::pair<std::string, TensorPtr<double>>>& inputs,
                           double tol, Rng& rng, int min_coords = 64) {
    constexpr double h = 1e-5;
    GradCheckReport report;
    report.tol = tol;

    for (auto& [name, t] : inputs) {
        t->requires_grad = true;
        t->ensure_grad();
        t->zero_grad();
    }
    {
        Graph<double> g;
        auto loss = f(g);
        g.backward(loss);
    }

    Graph<double> fwd(false); // forward evaluations do not need a tape
    auto eval = [&]() -> double {
        fwd.reset();
        return f(fwd)->value[0];
    };

    for (auto& [name, t] : inputs) {
        const std::size_t n = t->value.size();
        std::vector<std::size_t> coords;
        if (n <= static_cast<std::size_t>(min_coords)) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            // distinct uniform subsample
            std::vector<std::size_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            for (int i = 0; i < min_coords; ++i) {
                const std::size_t j =
                    static_cast<std::size_t>(i) +
                    static_cast<std::size_t>(rng.below(static_cast<int>(n - static_cast<std::size_t>(i))));
                std::swap(all[static_cast<std::size_t>(i)], all[j]);
            }
            coords.assign(all.begin(), all.begin() + min_coords);
        }
        for (const std::size_t c : coords) {
            const double saved = t->value[c];
            t->value[c] = saved + h;
            const double plus = eval();
            t->value[c] = saved - h;
            const double minus = eval();
            t->value[c] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            const double analytic = t->grad[c];
            const double rel = detail::rel_err_of(analytic, numeric);
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.coords_checked;
            if (rel > tol) {
                report.failures.push_back({name, c, analytic, numeric, rel});
            }
        }
    }
    report.pass = report.failures.empty();
    return report;
}

} // namespace stoplab
