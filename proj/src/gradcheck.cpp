#include "vlrr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace vlrr {

GradCheckReport finite_diff_check(const std::function<double()>& loss_fn, std::span<Tensor* const> params,
                                  std::span<const Tensor> analytic, std::span<const std::string> names,
                                  const GradCheckOptions& options) {
    if (params.size() != analytic.size()) {
        throw DimensionError("tensor count", params.size(), analytic.size(), "finite_diff_check");
    }
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor& p = *params[t];
        require_same_shape(p, analytic[t], "finite_diff_check");
        const std::size_t n = p.size();
        std::size_t stride = 1;
        if (options.max_coords_per_tensor > 0 && n > options.max_coords_per_tensor) {
            stride = (n + options.max_coords_per_tensor - 1) / options.max_coords_per_tensor;
        }
        for (std::size_t i = 0; i < n; i += stride) {
            const double saved = p[i];
            p[i] = saved + options.step;
            const double up = loss_fn();
            p[i] = saved - options.step;
            const double down = loss_fn();
            p[i] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double exact = analytic[t][i];
            const double denom = std::max({std::abs(exact), std::abs(numeric), options.floor});
            const double err = std::abs(exact - numeric) / denom;
            ++report.coordinates_checked;
            if (err > report.max_relative_error || !std::isfinite(err)) {
                report.max_relative_error = std::isfinite(err) ? err : INFINITY;
                report.worst_tensor = t < names.size() ? names[t] : "#" + std::to_string(t);
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_relative_error < options.tolerance;
    return report;
}

} // namespace vlrr
