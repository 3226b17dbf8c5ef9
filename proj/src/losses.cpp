#include "vlrr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vlrr {

LossResult mse_loss(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "mse_loss");
    const std::size_t n = prediction.size();
    LossResult r{0.0, Tensor(prediction.shape())};
    if (n == 0) {
        return r;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = prediction[i] - target[i];
        total += 0.5 * d * d;
        r.grad[i] = d * inv_n;
    }
    r.value = total * inv_n;
    return r;
}

LossResult huber_loss(const Tensor& prediction, const Tensor& target, HuberParams params) {
    if (!(params.c > 0.0)) {
        throw ParameterError("huber_loss: c must be positive, got " + std::to_string(params.c));
    }
    require_same_shape(prediction, target, "huber_loss");
    const std::size_t n = prediction.size();
    LossResult r{0.0, Tensor(prediction.shape())};
    if (n == 0) {
        return r;
    }
    const double c = params.c;
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = prediction[i] - target[i];
        const double a = std::abs(d);
        if (a < c) {
            total += 0.5 * d * d;
        } else {
            total += c * a - 0.5 * c * c;
        }
        const double g = a <= c ? d : std::copysign(c, d);
        r.grad[i] = g * inv_n;
    }
    r.value = total * inv_n;
    return r;
}

LossResult cross_entropy_loss(const Tensor& probabilities, std::span<const std::size_t> labels) {
    if (probabilities.rank() != 2) {
        throw DimensionError("rank", 2, probabilities.rank(), "cross_entropy_loss");
    }
    const std::size_t batch = probabilities.extent(0);
    const std::size_t k = probabilities.extent(1);
    if (labels.size() != batch) {
        throw DimensionError("batch", batch, labels.size(), "cross_entropy_loss");
    }
    LossResult r{0.0, probabilities};
    if (batch == 0) {
        return r;
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] >= k) {
            throw ParameterError("cross_entropy_loss: label " + std::to_string(labels[b]) + " out of range [0, " +
                                 std::to_string(k) + ")");
        }
        total -= std::log(std::max(probabilities[b * k + labels[b]], 1e-12));
        r.grad[b * k + labels[b]] -= 1.0;
    }
    for (double& g : r.grad.values()) {
        g *= inv_b;
    }
    r.value = total * inv_b;
    return r;
}

} // namespace vlrr
