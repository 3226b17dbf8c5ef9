#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vlrr/tensor.hpp"

namespace vlrr {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Gradients smaller than this in both routes are compared absolutely.
    double floor = 1e-7;
    // 0 checks every coordinate; otherwise at most this many evenly spaced
    // coordinates per tensor.
    std::size_t max_coords_per_tensor = 0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    std::size_t coordinates_checked = 0;
    bool passed = true;
};

/// Compares analytic gradients with central differences
/// (L(w + h) - L(w - h)) / 2h for the tensors in `params`. The loss is
/// re-evaluated after each in-place perturbation and must be deterministic.
/// Error per coordinate: |a - n| / max(|a|, |n|, floor).
GradCheckReport finite_diff_check(const std::function<double()>& loss_fn, std::span<Tensor* const> params,
                                  std::span<const Tensor> analytic, std::span<const std::string> names = {},
                                  const GradCheckOptions& options = {});

} // namespace vlrr
