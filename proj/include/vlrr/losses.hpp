#pragma once

#include <cstddef>
#include <span>

#include "vlrr/tensor.hpp"

namespace vlrr {

struct LossResult {
    double value = 0.0;
    Tensor grad; // d value / d prediction (or d value / d logits for cross-entropy)
};

/// Cutting-edge parameter of the Huber loss.
struct HuberParams {
    static constexpr double default_c = 1.345;
    double c = default_c;
};

enum class ReconstructionLoss { mse, huber };

// mean over all elements of 0.5 (x - y)^2; gradient (x - y) / N.
LossResult mse_loss(const Tensor& prediction, const Tensor& target);

// Per element: 0.5 r^2 if |r| < c, else c |r| - c^2 / 2, with r = x - y;
// averaged over all elements. At |r| == c the quadratic-branch gradient is used.
LossResult huber_loss(const Tensor& prediction, const Tensor& target, HuberParams params = {});

// Mean of -log p[label] over the batch (log clamped at 1e-12). The gradient
// is that of softmax followed by cross-entropy, taken w.r.t. the logits:
// (p - onehot) / batch.
LossResult cross_entropy_loss(const Tensor& probabilities, std::span<const std::size_t> labels);

} // namespace vlrr
