#include "vlrr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vlrr/parallel.hpp"

namespace vlrr {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const std::string& where) {
    if (t.rank() != rank) {
        throw DimensionError("rank", rank, t.rank(), where);
    }
}

void check_conv_params(const Tensor& weights, const Tensor& bias) {
    require_rank(weights, 4, "ConvLayerParams");
    require_rank(bias, 1, "ConvLayerParams");
    if (weights.extent(2) != weights.extent(3)) {
        throw DimensionError("filter width", weights.extent(2), weights.extent(3), "ConvLayerParams");
    }
    if (weights.extent(2) % 2 == 0) {
        throw ParameterError("ConvLayerParams: filter size must be odd, got " + std::to_string(weights.extent(2)));
    }
    if (bias.extent(0) != weights.extent(0)) {
        throw DimensionError("bias", weights.extent(0), bias.extent(0), "ConvLayerParams");
    }
}

struct Span2 {
    std::size_t lo;
    std::size_t hi;
};

// Output rows/cols whose tap at offset d (relative to centre) lands inside [0, n).
Span2 valid_range(std::size_t n, std::ptrdiff_t d) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -d);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), static_cast<std::ptrdiff_t>(n) - d);
    if (hi <= lo) {
        return {0, 0};
    }
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

std::size_t flat_features(const Tensor& input, const std::string& where) {
    if (input.rank() < 2) {
        throw DimensionError("rank", 2, input.rank(), where);
    }
    return input.size() / std::max<std::size_t>(input.extent(0), 1);
}

} // namespace

ConvLayerParams::ConvLayerParams(Tensor w, Tensor b) : weights(std::move(w)), bias(std::move(b)) {
    check_conv_params(weights, bias);
}

ConvLayerParams::ConvLayerParams(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size)
    : ConvLayerParams(Tensor({out_channels, in_channels, filter_size, filter_size}), Tensor({out_channels})) {}

FcLayerParams::FcLayerParams(Tensor w, Tensor b) : weights(std::move(w)), bias(std::move(b)) {
    require_rank(weights, 2, "FcLayerParams");
    require_rank(bias, 1, "FcLayerParams");
    if (bias.extent(0) != weights.extent(0)) {
        throw DimensionError("bias", weights.extent(0), bias.extent(0), "FcLayerParams");
    }
}

FcLayerParams::FcLayerParams(std::size_t out_features, std::size_t in_features)
    : FcLayerParams(Tensor({out_features, in_features}), Tensor({out_features})) {}

ConvLayerParams init_conv(std::size_t out_channels, std::size_t in_channels, std::size_t filter_size,
                          RandomState& rng) {
    ConvLayerParams p(out_channels, in_channels, filter_size);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in_channels * filter_size * filter_size));
    for (double& w : p.weights.values()) {
        w = std_dev * rng.normal();
    }
    return p;
}

FcLayerParams init_fc(std::size_t out_features, std::size_t in_features, RandomState& rng) {
    FcLayerParams p(out_features, in_features);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in_features));
    for (double& w : p.weights.values()) {
        w = std_dev * rng.normal();
    }
    return p;
}

ConvLayerParams conv_filter_slice(const ConvLayerParams& layer, std::size_t first, std::size_t count) {
    if (first + count > layer.out_channels()) {
        throw DimensionError("out_channels", layer.out_channels(), first + count, "conv_filter_slice");
    }
    const std::size_t per_filter = layer.in_channels() * layer.filter_size() * layer.filter_size();
    Tensor w({count, layer.in_channels(), layer.filter_size(), layer.filter_size()});
    Tensor b({count});
    std::copy_n(layer.weights.data() + first * per_filter, count * per_filter, w.data());
    std::copy_n(layer.bias.data() + first, count, b.data());
    return ConvLayerParams(std::move(w), std::move(b));
}

ConvLayerParams conv_concat(const ConvLayerParams& head, const ConvLayerParams& tail) {
    if (head.in_channels() != tail.in_channels()) {
        throw DimensionError("in_channels", head.in_channels(), tail.in_channels(), "conv_concat");
    }
    if (head.filter_size() != tail.filter_size()) {
        throw DimensionError("filter_size", head.filter_size(), tail.filter_size(), "conv_concat");
    }
    const std::size_t n = head.out_channels() + tail.out_channels();
    Tensor w({n, head.in_channels(), head.filter_size(), head.filter_size()});
    Tensor b({n});
    std::copy(head.weights.values().begin(), head.weights.values().end(), w.data());
    std::copy(tail.weights.values().begin(), tail.weights.values().end(), w.data() + head.weights.size());
    std::copy(head.bias.values().begin(), head.bias.values().end(), b.data());
    std::copy(tail.bias.values().begin(), tail.bias.values().end(), b.data() + head.bias.size());
    return ConvLayerParams(std::move(w), std::move(b));
}

// ----------------------------- convolution -----------------------------

Tensor conv2d_forward(const Tensor& input, const ConvLayerParams& params) {
    require_rank(input, 4, "conv2d_forward");
    if (input.extent(1) != params.in_channels()) {
        throw DimensionError("channels", params.in_channels(), input.extent(1), "conv2d_forward");
    }
    if (input.extent(2) == 0 || input.extent(3) == 0) {
        throw DimensionError("height/width", 1, 0, "conv2d_forward");
    }
    const std::size_t batch = input.extent(0);
    const std::size_t in_c = input.extent(1);
    const std::size_t h = input.extent(2);
    const std::size_t w = input.extent(3);
    const std::size_t out_c = params.out_channels();
    const std::size_t f = params.filter_size();
    const auto pad = static_cast<std::ptrdiff_t>(params.padding());
    const std::size_t plane = h * w;

    Tensor out({batch, out_c, h, w});
    const double* in_data = input.data();
    const double* wt = params.weights.data();
    double* out_data = out.data();

    parallel_for(batch * out_c, [&](std::size_t job) {
        const std::size_t b = job / out_c;
        const std::size_t o = job % out_c;
        double* dst = out_data + (b * out_c + o) * plane;
        std::fill_n(dst, plane, params.bias[o]);
        for (std::size_t c = 0; c < in_c; ++c) {
            const double* src = in_data + (b * in_c + c) * plane;
            for (std::size_t ky = 0; ky < f; ++ky) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const Span2 ys = valid_range(h, dy);
                for (std::size_t kx = 0; kx < f; ++kx) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                    const Span2 xs = valid_range(w, dx);
                    const double k = wt[((o * in_c + c) * f + ky) * f + kx];
                    for (std::size_t y = ys.lo; y < ys.hi; ++y) {
                        double* row = dst + y * w;
                        const double* srow = src + (y + dy) * w;
                        for (std::size_t x = xs.lo; x < xs.hi; ++x) {
                            row[x] += k * srow[x + dx];
                        }
                    }
                }
            }
        }
    });
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const ConvLayerParams& params, const Tensor& grad_out,
                          bool want_input_grad) {
    require_rank(input, 4, "conv2d_backward");
    if (input.extent(1) != params.in_channels()) {
        throw DimensionError("channels", params.in_channels(), input.extent(1), "conv2d_backward");
    }
    const Shape expected{input.extent(0), params.out_channels(), input.extent(2), input.extent(3)};
    require_same_shape(grad_out, Tensor(expected), "conv2d_backward(grad_out)");

    const std::size_t batch = input.extent(0);
    const std::size_t in_c = input.extent(1);
    const std::size_t h = input.extent(2);
    const std::size_t w = input.extent(3);
    const std::size_t out_c = params.out_channels();
    const std::size_t f = params.filter_size();
    const auto pad = static_cast<std::ptrdiff_t>(params.padding());
    const std::size_t plane = h * w;
    const double* in_data = input.data();
    const double* g_data = grad_out.data();
    const double* wt = params.weights.data();

    ConvGrads grads;
    grads.weights = Tensor(params.weights.shape());
    grads.bias = Tensor(params.bias.shape());

    // Weight and bias gradients: one job per filter, fixed summation order.
    double* gw = grads.weights.data();
    double* gb = grads.bias.data();
    parallel_for(out_c, [&](std::size_t o) {
        std::vector<double> row_acc(w);
        double bias_acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const double* g = g_data + (b * out_c + o) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                bias_acc += g[i];
            }
        }
        gb[o] = bias_acc;
        for (std::size_t c = 0; c < in_c; ++c) {
            for (std::size_t ky = 0; ky < f; ++ky) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const Span2 ys = valid_range(h, dy);
                for (std::size_t kx = 0; kx < f; ++kx) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                    const Span2 xs = valid_range(w, dx);
                    std::fill(row_acc.begin(), row_acc.end(), 0.0);
                    for (std::size_t b = 0; b < batch; ++b) {
                        const double* g = g_data + (b * out_c + o) * plane;
                        const double* src = in_data + (b * in_c + c) * plane;
                        for (std::size_t y = ys.lo; y < ys.hi; ++y) {
                            const double* grow = g + y * w;
                            const double* srow = src + (y + dy) * w;
                            for (std::size_t x = xs.lo; x < xs.hi; ++x) {
                                row_acc[x] += grow[x] * srow[x + dx];
                            }
                        }
                    }
                    double acc = 0.0;
                    for (std::size_t x = 0; x < w; ++x) {
                        acc += row_acc[x];
                    }
                    gw[((o * in_c + c) * f + ky) * f + kx] = acc;
                }
            }
        }
    });

    if (want_input_grad) {
        grads.input = Tensor(input.shape());
        double* gi = grads.input.data();
        parallel_for(batch * in_c, [&](std::size_t job) {
            const std::size_t b = job / in_c;
            const std::size_t c = job % in_c;
            double* dst = gi + (b * in_c + c) * plane;
            for (std::size_t o = 0; o < out_c; ++o) {
                const double* g = g_data + (b * out_c + o) * plane;
                for (std::size_t ky = 0; ky < f; ++ky) {
                    const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                    const Span2 ys = valid_range(h, dy);
                    for (std::size_t kx = 0; kx < f; ++kx) {
                        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                        const Span2 xs = valid_range(w, dx);
                        const double k = wt[((o * in_c + c) * f + ky) * f + kx];
                        for (std::size_t y = ys.lo; y < ys.hi; ++y) {
                            const double* grow = g + y * w;
                            double* drow = dst + (y + dy) * w;
                            for (std::size_t x = xs.lo; x < xs.hi; ++x) {
                                drow[x + dx] += k * grow[x];
                            }
                        }
                    }
                }
            }
        });
    }
    return grads;
}

// ----------------------------- fully connected -----------------------------

Tensor fc_forward(const Tensor& input, const FcLayerParams& params) {
    const std::size_t features = flat_features(input, "fc_forward");
    if (features != params.in_features()) {
        throw DimensionError("features", params.in_features(), features, "fc_forward");
    }
    const std::size_t batch = input.extent(0);
    const std::size_t out_f = params.out_features();
    Tensor out({batch, out_f});
    const double* x_data = input.data();
    const double* wt = params.weights.data();
    double* dst = out.data();
    parallel_for(batch, [&](std::size_t b) {
        const double* x = x_data + b * features;
        for (std::size_t j = 0; j < out_f; ++j) {
            const double* row = wt + j * features;
            // Four interleaved partial sums, combined in a fixed order.
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            std::size_t i = 0;
            for (; i + 4 <= features; i += 4) {
                a0 += row[i] * x[i];
                a1 += row[i + 1] * x[i + 1];
                a2 += row[i + 2] * x[i + 2];
                a3 += row[i + 3] * x[i + 3];
            }
            for (; i < features; ++i) {
                a0 += row[i] * x[i];
            }
            dst[b * out_f + j] = params.bias[j] + ((a0 + a1) + (a2 + a3));
        }
    });
    return out;
}

FcGrads fc_backward(const Tensor& input, const FcLayerParams& params, const Tensor& grad_out) {
    const std::size_t features = flat_features(input, "fc_backward");
    if (features != params.in_features()) {
        throw DimensionError("features", params.in_features(), features, "fc_backward");
    }
    const std::size_t batch = input.extent(0);
    const std::size_t out_f = params.out_features();
    require_same_shape(grad_out, Tensor({batch, out_f}), "fc_backward(grad_out)");

    FcGrads grads;
    grads.input = Tensor(input.shape());
    grads.weights = Tensor(params.weights.shape());
    grads.bias = Tensor(params.bias.shape());
    const double* x_data = input.data();
    const double* g = grad_out.data();
    const double* wt = params.weights.data();
    double* gw = grads.weights.data();
    double* gb = grads.bias.data();
    double* gx = grads.input.data();

    parallel_for(out_f, [&](std::size_t j) {
        double* row = gw + j * features;
        double bias_acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const double gj = g[b * out_f + j];
            bias_acc += gj;
            const double* x = x_data + b * features;
            for (std::size_t i = 0; i < features; ++i) {
                row[i] += gj * x[i];
            }
        }
        gb[j] = bias_acc;
    });
    parallel_for(batch, [&](std::size_t b) {
        double* dst = gx + b * features;
        for (std::size_t j = 0; j < out_f; ++j) {
            const double gj = g[b * out_f + j];
            const double* row = wt + j * features;
            for (std::size_t i = 0; i < features; ++i) {
                dst[i] += gj * row[i];
            }
        }
    });
    return grads;
}

// ----------------------------- elementwise -----------------------------

Tensor relu(const Tensor& input) {
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        out[i] = input[i] > 0.0 ? input[i] : 0.0;
    }
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
    require_same_shape(input, grad_out, "relu_backward");
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        out[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
    }
    return out;
}

Tensor softmax(const Tensor& logits) {
    require_rank(logits, 2, "softmax");
    const std::size_t batch = logits.extent(0);
    const std::size_t k = logits.extent(1);
    Tensor out(logits.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const double* z = logits.data() + b * k;
        double* p = out.data() + b * k;
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            top = std::max(top, z[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] - top);
            total += p[j];
        }
        for (std::size_t j = 0; j < k; ++j) {
            p[j] /= total;
        }
    }
    return out;
}

DropoutResult dropout(const Tensor& input, double rate, RandomState& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    DropoutResult r{input, Tensor(input.shape(), 1.0)};
    if (!training || rate == 0.0) {
        return r;
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < input.size(); ++i) {
        const double m = rng.bernoulli(rate) ? 0.0 : keep_scale;
        r.mask[i] = m;
        r.output[i] = input[i] * m;
    }
    return r;
}

Tensor dropout_backward(const Tensor& mask, const Tensor& grad_out) {
    require_same_shape(mask, grad_out, "dropout_backward");
    Tensor out(grad_out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = grad_out[i] * mask[i];
    }
    return out;
}

// ----------------------------- optimiser -----------------------------

void sgd_step(Tensor& param, const Tensor& grad, double learning_rate) {
    require_same_shape(param, grad, "sgd_step");
    double* w = param.data();
    const double* g = grad.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        w[i] -= learning_rate * g[i];
    }
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double learning_rate) {
    if (params.size() != grads.size()) {
        throw DimensionError("parameter count", params.size(), grads.size(), "sgd_step");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        sgd_step(*params[i], *grads[i], learning_rate);
    }
}

} // namespace vlrr
