#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vlrr/gradcheck.hpp"
#include "vlrr/layers.hpp"
#include "vlrr/models.hpp"
#include "vlrr/random.hpp"
#include "vlrr/tensor.hpp"

namespace testing {

inline vlrr::Tensor random_tensor(const vlrr::Shape& shape, vlrr::RandomState& rng, double scale = 1.0) {
    vlrr::Tensor t(shape);
    for (double& v : t.values()) {
        v = scale * rng.normal();
    }
    return t;
}

// Keeps ReLU pre-activations away from exact zeros so central differences
// never straddle the kink.
template <typename Net>
void jitter_biases(Net& net, vlrr::RandomState& rng) {
    for (const vlrr::ParamRef& p : net.parameters()) {
        if (p.name.ends_with(".bias")) {
            for (double& v : p.tensor->values()) {
                v = 0.1 * rng.normal();
            }
        }
    }
}

template <typename Net>
vlrr::GradCheckReport check_network(Net& net, const std::function<double()>& loss, const Net& grads,
                                    std::size_t coords = 0) {
    std::vector<vlrr::Tensor*> params;
    std::vector<vlrr::Tensor> analytic;
    std::vector<std::string> names;
    for (const vlrr::ParamRef& p : net.parameters()) {
        params.push_back(p.tensor);
        names.push_back(p.name);
    }
    for (const vlrr::ConstParamRef& g : grads.parameters()) {
        analytic.push_back(*g.tensor);
    }
    vlrr::GradCheckOptions o;
    o.max_coords_per_tensor = coords;
    return vlrr::finite_diff_check(loss, params, analytic, names, o);
}

// Direct seven-loop convolution with zero padding. Accumulates bias, then
// input channel, kernel row, kernel column.
inline vlrr::Tensor naive_conv(const vlrr::Tensor& x, const vlrr::ConvLayerParams& p) {
    const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t o = p.weights.extent(0), f = p.weights.extent(2);
    const long pad = static_cast<long>((f - 1) / 2);
    vlrr::Tensor y({b, o, h, w});
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t k = 0; k < o; ++k)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = p.bias[k];
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t u = 0; u < f; ++u)
                            for (std::size_t v = 0; v < f; ++v) {
                                const long yy = static_cast<long>(i + u) - pad;
                                const long xx = static_cast<long>(j + v) - pad;
                                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) {
                                    continue;
                                }
                                acc += p.weights.at({k, ch, u, v}) *
                                       x.at({n, ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)});
                            }
                    y.at({n, k, i, j}) = acc;
                }
    return y;
}

// Records the ReLU sign pattern of every forward pass made during a finite
// difference check. A pattern change means a perturbation crossed a kink and
// the central difference is meaningless for that instance.
struct KinkGuard {
    std::vector<bool> reference;
    bool crossed = false;
    bool armed = false;

    static void append(std::vector<bool>& out, const vlrr::ForwardTrace& t) {
        for (const vlrr::Tensor& pre : t.conv_pre) {
            for (double v : pre.values()) out.push_back(v > 0.0);
        }
        for (double v : t.hidden_pre.values()) out.push_back(v > 0.0);
    }

    void observe(std::initializer_list<const vlrr::ForwardTrace*> traces) {
        std::vector<bool> now;
        for (const auto* t : traces) append(now, *t);
        if (!armed) {
            reference = std::move(now);
            armed = true;
        } else if (now != reference) {
            crossed = true;
        }
    }
};

inline vlrr::NetworkConfig tiny_config(std::size_t classes = 3, std::size_t side = 8) {
    vlrr::NetworkConfig c;
    c.filters = {4, 4, 2};
    c.filter_sizes = {3, 3, 1};
    c.fc_width = 6;
    c.classes = classes;
    c.reconstruction_filter_size = 3;
    c.height = side;
    c.width = side;
    return c;
}

} // namespace testing
