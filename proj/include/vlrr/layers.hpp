#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vlrr/random.hpp"
#include "vlrr/tensor.hpp"

namespace vlrr {

/// Convolution bank: weights (out_channels, in_channels, f, f), bias (out_channels).
/// Stride is always 1 and borders are zero-padded by (f - 1) / 2, so the output
/// keeps the input's spatial size. f must be odd.
struct ConvLayerParams {
    static constexpr std::size_t stride = 1;

    Tensor weights;
    Tensor bias;

    ConvLayerParams() = default;
    ConvLayerParams(Tensor weights, Tensor bias);
    ConvLayerParams(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size);

    std::size_t out_channels() const { return weights.extent(0); }
    std::size_t in_channels() const { return weights.extent(1); }
    std::size_t filter_size() const { return weights.extent(2); }
    std::size_t padding() const { return (filter_size() - 1) / 2; }

    friend bool operator==(const ConvLayerParams&, const ConvLayerParams&) = default;
};

/// Fully connected layer: weights (out_features, in_features), bias (out_features).
struct FcLayerParams {
    Tensor weights;
    Tensor bias;

    FcLayerParams() = default;
    FcLayerParams(Tensor weights, Tensor bias);
    FcLayerParams(std::size_t out_features, std::size_t in_features);

    std::size_t out_features() const { return weights.extent(0); }
    std::size_t in_features() const { return weights.extent(1); }

    friend bool operator==(const FcLayerParams&, const FcLayerParams&) = default;
};

// Zero-mean Gaussian weights with std sqrt(2 / fan_in), zero biases.
ConvLayerParams init_conv(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size,
                          RandomState& rng);
FcLayerParams init_fc(std::size_t out_features, std::size_t in_features, RandomState& rng);

// Filters [first, first + count) of a bank, and the concatenation of two banks
// along the output-channel axis.
ConvLayerParams conv_filter_slice(const ConvLayerParams& layer, std::size_t first, std::size_t count);
ConvLayerParams conv_concat(const ConvLayerParams& head, const ConvLayerParams& tail);

// ----------------------------- convolution -----------------------------

// Input (B, C, H, W) -> (B, out_channels, H, W). Per output element the sum
// starts at the bias and adds input-channel, kernel-row, kernel-column terms
// in that order.
Tensor conv2d_forward(const Tensor& input, const ConvLayerParams& params);

struct ConvGrads {
    Tensor input;   // empty when not requested
    Tensor weights;
    Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& input, const ConvLayerParams& params, const Tensor& grad_out,
                          bool want_input_grad = true);

// ----------------------------- fully connected -----------------------------

// Input of rank >= 2 is treated as (B, product of remaining axes).
Tensor fc_forward(const Tensor& input, const FcLayerParams& params);

struct FcGrads {
    Tensor input; // same shape as the forward input
    Tensor weights;
    Tensor bias;
};

FcGrads fc_backward(const Tensor& input, const FcLayerParams& params, const Tensor& grad_out);

// ----------------------------- elementwise -----------------------------

Tensor relu(const Tensor& input);
// Passes grad where input > 0; the subgradient at 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

// Row-wise softmax of (B, K) logits with max subtraction.
Tensor softmax(const Tensor& logits);

struct DropoutResult {
    Tensor output;
    Tensor mask; // 0 or 1/(1-rate) per element; ones in evaluation mode
};

// Inverted dropout. rate in [0, 1).
DropoutResult dropout(const Tensor& input, double rate, RandomState& rng, bool training);
Tensor dropout_backward(const Tensor& mask, const Tensor& grad_out);

// ----------------------------- optimiser -----------------------------

// Plain SGD: w <- w - lr * g, in place.
void sgd_step(Tensor& param, const Tensor& grad, double learning_rate);
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double learning_rate);

} // namespace vlrr
