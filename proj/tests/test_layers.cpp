#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "vlrr/layers.hpp"
#include "vlrr/losses.hpp"
#include "vlrr/parallel.hpp"

using namespace vlrr;
using testing::random_tensor;

namespace {

// Scalar probe: L = sum(out * probe), so dL/dout = probe.
double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

} // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(t.at({1, 2}) == 1.5);
    CHECK_THROWS_AS(t.at({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    const Tensor r = t.reshaped({3, 2});
    CHECK(r.shape() == Shape{3, 2});
    CHECK_THROWS(t.reshaped({4, 2}));

    Tensor z({1}, {0.0});
    Tensor nz({1}, {-0.0});
    CHECK(z == nz);
    CHECK_FALSE(bit_equal(z, nz));

    Tensor batch({3, 2}, std::vector<double>{0, 1, 2, 3, 4, 5});
    const std::vector<std::size_t> idx{2, 0};
    CHECK(gather_rows(batch, idx) == Tensor({2, 2}, std::vector<double>{4, 5, 0, 1}));
    CHECK(slice_rows(batch, 1, 2) == Tensor({2, 2}, std::vector<double>{2, 3, 4, 5}));
}

TEST_CASE("conv2d forward matches the direct loop oracle bit for bit") {
    RandomState rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t b = 1 + rng.below(3);
        const std::size_t c = 1 + rng.below(3);
        const std::size_t o = 1 + rng.below(4);
        const std::size_t f = 1 + 2 * rng.below(3);
        const std::size_t h = 1 + rng.below(7);
        const std::size_t w = 1 + rng.below(7);
        ConvLayerParams p(random_tensor({o, c, f, f}, rng), random_tensor({o}, rng));
        const Tensor x = random_tensor({b, c, h, w}, rng);
        const Tensor got = conv2d_forward(x, p);
        const Tensor want = testing::naive_conv(x, p);
        CHECK(bit_equal(got, want));
        CHECK(max_abs_difference(got, want) <= 1e-12);
    }
}

TEST_CASE("conv2d keeps spatial size and rejects even filters") {
    ConvLayerParams p(2, 1, 5);
    const Tensor y = conv2d_forward(Tensor({1, 1, 6, 7}), p);
    CHECK(y.shape() == Shape{1, 2, 6, 7});
    CHECK_THROWS(ConvLayerParams(2, 1, 4));
    CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 6, 6}), p), DimensionError);
}

TEST_CASE("conv2d results do not depend on the thread count") {
    RandomState rng(5);
    ConvLayerParams p(random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng));
    const Tensor x = random_tensor({4, 2, 9, 9}, rng);
    const Tensor g = random_tensor({4, 3, 9, 9}, rng);
    set_thread_count(1);
    const Tensor y1 = conv2d_forward(x, p);
    const ConvGrads g1 = conv2d_backward(x, p, g);
    set_thread_count(3);
    const Tensor y3 = conv2d_forward(x, p);
    const ConvGrads g3 = conv2d_backward(x, p, g);
    set_thread_count(1);
    CHECK(bit_equal(y1, y3));
    CHECK(bit_equal(g1.input, g3.input));
    CHECK(bit_equal(g1.weights, g3.weights));
    CHECK(bit_equal(g1.bias, g3.bias));
}

TEST_CASE("conv2d gradients agree with central differences over 20 shapes") {
    RandomState rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        CAPTURE(trial);
        const std::size_t b = 1 + rng.below(2);
        const std::size_t c = 1 + rng.below(3);
        const std::size_t o = 1 + rng.below(3);
        const std::size_t f = 1 + 2 * rng.below(3);
        const std::size_t h = 2 + rng.below(5);
        const std::size_t w = 2 + rng.below(5);
        ConvLayerParams p(random_tensor({o, c, f, f}, rng), random_tensor({o}, rng));
        Tensor x = random_tensor({b, c, h, w}, rng);
        const Tensor probe = random_tensor({b, o, h, w}, rng);
        const ConvGrads g = conv2d_backward(x, p, probe);
        auto loss = [&] { return dot(conv2d_forward(x, p), probe); };
        Tensor* params[] = {&x, &p.weights, &p.bias};
        const Tensor analytic[] = {g.input, g.weights, g.bias};
        const GradCheckReport r = finite_diff_check(loss, params, analytic);
        CHECK(r.max_relative_error < 1e-4);
    }
}

TEST_CASE("fully connected layer: forward oracle and gradients") {
    RandomState rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        CAPTURE(trial);
        const std::size_t b = 1 + rng.below(3);
        const std::size_t in = 1 + rng.below(11);
        const std::size_t out = 1 + rng.below(5);
        FcLayerParams p(random_tensor({out, in}, rng), random_tensor({out}, rng));
        Tensor x = random_tensor({b, in}, rng);
        const Tensor y = fc_forward(x, p);
        for (std::size_t n = 0; n < b; ++n) {
            for (std::size_t j = 0; j < out; ++j) {
                double s = p.bias[j];
                for (std::size_t i = 0; i < in; ++i) {
                    s += p.weights.at({j, i}) * x.at({n, i});
                }
                CHECK(std::abs(y.at({n, j}) - s) <= 1e-12);
            }
        }
        const Tensor probe = random_tensor({b, out}, rng);
        const FcGrads g = fc_backward(x, p, probe);
        auto loss = [&] { return dot(fc_forward(x, p), probe); };
        Tensor* params[] = {&x, &p.weights, &p.bias};
        const Tensor analytic[] = {g.input, g.weights, g.bias};
        CHECK(finite_diff_check(loss, params, analytic).max_relative_error < 1e-4);
    }
}

TEST_CASE("fc accepts image batches and returns gradients in the input shape") {
    RandomState rng(9);
    FcLayerParams p(random_tensor({3, 2 * 4 * 4}, rng), random_tensor({3}, rng));
    const Tensor x = random_tensor({2, 2, 4, 4}, rng);
    const FcGrads g = fc_backward(x, p, Tensor({2, 3}, 1.0));
    CHECK(g.input.shape() == x.shape());
    CHECK_THROWS_AS(fc_forward(random_tensor({2, 5}, rng), p), DimensionError);
}

TEST_CASE("relu and its subgradient") {
    const Tensor x({4}, std::vector<double>{-1.0, 0.0, 2.0, -0.0});
    CHECK(relu(x) == Tensor({4}, std::vector<double>{0.0, 0.0, 2.0, 0.0}));
    CHECK(relu_backward(x, Tensor({4}, 3.0)) == Tensor({4}, std::vector<double>{0.0, 0.0, 3.0, 0.0}));

    RandomState rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor v = random_tensor({7}, rng);
        for (double& e : v.values()) {
            if (std::abs(e) < 1e-3) e = 0.5; // stay off the kink
        }
        const Tensor probe = random_tensor({7}, rng);
        const Tensor g = relu_backward(v, probe);
        auto loss = [&] { return dot(relu(v), probe); };
        Tensor* params[] = {&v};
        const Tensor analytic[] = {g};
        CHECK(finite_diff_check(loss, params, analytic).max_relative_error < 1e-4);
    }
}

TEST_CASE("softmax rows sum to one and survive large logits") {
    const Tensor p = softmax(Tensor({2, 3}, std::vector<double>{1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0}));
    CHECK(p.all_finite());
    for (std::size_t b = 0; b < 2; ++b) {
        CHECK(std::abs(p.at({b, 0}) + p.at({b, 1}) + p.at({b, 2}) - 1.0) < 1e-15);
    }
    CHECK(p.at({0, 1}) > p.at({0, 0}));
    const double e = std::exp(1.0);
    CHECK(std::abs(p.at({0, 1}) - e / (1.0 + e + 1.0 / e)) < 1e-14);
}

TEST_CASE("softmax cross-entropy gradient over 20 seeds") {
    RandomState rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t b = 1 + rng.below(4);
        const std::size_t k = 2 + rng.below(6);
        Tensor z = random_tensor({b, k}, rng, 3.0);
        std::vector<std::size_t> labels(b);
        for (auto& l : labels) l = rng.below(k);
        const LossResult r = cross_entropy_loss(softmax(z), labels);
        auto loss = [&] { return cross_entropy_loss(softmax(z), labels).value; };
        Tensor* params[] = {&z};
        const Tensor analytic[] = {r.grad};
        CHECK(finite_diff_check(loss, params, analytic).max_relative_error < 1e-4);
    }
}

TEST_CASE("dropout is inverted and unbiased") {
    RandomState rng(13);
    const Tensor x({20000}, 2.0);
    const DropoutResult d = dropout(x, 0.5, rng, true);
    std::size_t kept = 0;
    double mean = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK((d.mask[i] == 0.0 || d.mask[i] == 2.0));
        kept += d.mask[i] != 0.0 ? 1 : 0;
        mean += d.output[i];
    }
    mean /= static_cast<double>(x.size());
    // Binomial(20000, 0.5): sd of the kept fraction is ~0.0035.
    CHECK(std::abs(static_cast<double>(kept) / 20000.0 - 0.5) < 0.02);
    CHECK(std::abs(mean - 2.0) < 0.08);

    const DropoutResult eval = dropout(x, 0.5, rng, false);
    CHECK(eval.output == x);
    CHECK(eval.mask == Tensor(x.shape(), 1.0));
    CHECK(dropout_backward(d.mask, Tensor(x.shape(), 1.0)) == d.mask);
    CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ParameterError);
}

TEST_CASE("dropout with a fixed mask has matching gradients") {
    RandomState rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({3, 5}, rng);
        RandomState mask_rng = rng.substream(static_cast<std::uint64_t>(trial));
        const Tensor mask = dropout(x, 0.5, mask_rng, true).mask;
        const Tensor probe = random_tensor({3, 5}, rng);
        auto loss = [&] {
            Tensor y = x;
            for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
            return dot(y, probe);
        };
        Tensor* params[] = {&x};
        const Tensor analytic[] = {dropout_backward(mask, probe)};
        CHECK(finite_diff_check(loss, params, analytic).max_relative_error < 1e-4);
    }
}

TEST_CASE("sgd step") {
    Tensor w({3}, std::vector<double>{1.0, 2.0, 3.0});
    sgd_step(w, Tensor({3}, std::vector<double>{1.0, -1.0, 0.5}), 0.1);
    CHECK(w == Tensor({3}, std::vector<double>{1.0 - 0.1, 2.0 + 0.1, 3.0 - 0.05}));
    CHECK_THROWS_AS(sgd_step(w, Tensor({2}), 0.1), DimensionError);
}

TEST_CASE("quadratic loss gradient check is tight") {
    RandomState rng(15);
    Tensor w = random_tensor({10}, rng);
    auto loss = [&] { return 0.5 * dot(w, w); };
    Tensor* params[] = {&w};
    const Tensor analytic[] = {w};
    // Central differences are exact for quadratics, so a large step only
    // reduces cancellation.
    GradCheckOptions o;
    o.step = 1e-3;
    CHECK(finite_diff_check(loss, params, analytic, {}, o).max_relative_error < 1e-9);
}

TEST_CASE("He initialisation has the right spread and zero biases") {
    RandomState rng(16);
    const ConvLayerParams c = init_conv(64, 32, 3, rng);
    double ss = 0.0;
    for (double v : c.weights.values()) ss += v * v;
    const double var = ss / static_cast<double>(c.weights.size());
    CHECK(std::abs(var - 2.0 / (32.0 * 9.0)) < 0.05 * 2.0 / (32.0 * 9.0));
    CHECK(c.bias == Tensor({64}));
    const FcLayerParams f = init_fc(10, 50, rng);
    CHECK(f.bias == Tensor({10}));
}

TEST_CASE("conv filter slices concatenate back to the bank") {
    RandomState rng(17);
    const ConvLayerParams p(random_tensor({5, 2, 3, 3}, rng), random_tensor({5}, rng));
    const ConvLayerParams head = conv_filter_slice(p, 0, 2);
    const ConvLayerParams tail = conv_filter_slice(p, 2, 3);
    CHECK(head.out_channels() == 2);
    CHECK(conv_concat(head, tail) == p);
}
