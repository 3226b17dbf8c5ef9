#include <doctest.h>

#include <cmath>

#include "gradient_cases.hpp"
#include "vlrr/checkpoint.hpp"
#include "vlrr/losses.hpp"
#include "vlrr/models.hpp"
#include "vlrr/training.hpp"

using namespace vlrr;
using testing::random_tensor;
using testing::tiny_config;

namespace {

Tensor first_filters(const ConvLayerParams& p, std::size_t k) { return conv_filter_slice(p, 0, k).weights; }

Tensor random_input(RandomState& rng, std::size_t b, std::size_t side = 8) {
    return random_tensor({b, 1, side, side}, rng);
}

} // namespace

TEST_CASE("default Model I has the expected parameter count") {
    // conv1 64x1x5x5+64, conv2 64x64x3x3+64, conv3 32x64x1x1+32,
    // fc4 1024x(32*32*32)+1024, fc5 10x1024+10.
    const std::size_t expected = (64 * 25 + 64) + (64 * 64 * 9 + 64) + (32 * 64 + 32) +
                                 (1024 * 32 * 32 * 32 + 1024) + (10 * 1024 + 10);
    CHECK(expected == 33606378);
    NetworkConfig config;
    config.classes = 10;
    CHECK(parameter_count(build_model_i(config, RandomState(0))) == expected);
}

TEST_CASE("config validation") {
    NetworkConfig c = tiny_config();
    c.filter_sizes[1] = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.classes = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    const CouplingConfig too_many{{5, 0, 0}};
    CHECK_THROWS_AS(too_many.validate(tiny_config()), ConfigError);
    const CouplingConfig k = CouplingConfig::from_ratios(NetworkConfig{}, default_coupling_ratios);
    CHECK(k.shared == std::array<std::size_t, 3>{32, 48, 24});
    CHECK(k.ratios(NetworkConfig{}) == default_coupling_ratios);
}

TEST_CASE("attaching a head to the SR sub-network gives the Model I topology") {
    const NetworkConfig c = tiny_config();
    const RandomState rng(3);
    const SingleNetwork sr = build_sr_subnet(c, rng);
    const SingleNetwork attached = attach_classifier_head(sr, rng.substream("head"));
    CHECK(topology(attached) == topology(build_model_i(c, rng)));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(attached.conv[i] == sr.conv[i]);
    }
    CHECK_FALSE(attached.reconstruction.has_value());
    // Same seed, same head: Model II's classifier starts where Model I's does.
    CHECK(attach_classifier_head(sr, rng).head == build_model_i(c, rng).head);
}

TEST_CASE("dual network structure and parameter counts") {
    const NetworkConfig c = tiny_config();
    const CouplingConfig k{{2, 1, 2}};
    const DualNetwork d = build_pcsrn(c, k, RandomState(4));
    // Shared tensors count once: 2 channels' private filters plus shared ones.
    const std::size_t conv1 = 4 * 9 + 4 + 2 * 9 + 2;   // shared 2 + lr 2 + hr 2 filters of 1x3x3
    const std::size_t conv2 = (4 + 3) * (4 * 9 + 1);   // shared 1 + lr 3 + hr 3 of 4x3x3
    const std::size_t conv3 = (2 + 0) * (4 + 1);       // shared 2, no privates, 4x1x1
    const std::size_t conv4 = 2 * (2 * 9 + 1);
    CHECK(parameter_count(d) == conv1 + conv2 + conv3 + conv4);
    CHECK(d.view(Channel::lr).conv[0].out_channels() == 4);
    CHECK(d.view(Channel::hr).conv[2].out_channels() == 2);
    const DualNetwork h = attach_classifier_heads(d, RandomState(5));
    CHECK_FALSE(h.reconstruction[0].has_value());
    CHECK(h.head[0].has_value());
    CHECK(h.head[1].has_value());
    CHECK_FALSE(h.head[0] == h.head[1]);
    CHECK_THROWS_AS(decouple_for_inference(d), ConfigError);
}

TEST_CASE("a k = 0 LR channel starts as the standalone network") {
    const NetworkConfig c = tiny_config();
    const RandomState rng(6);
    const DualNetwork d = build_pcsrn(c, CouplingConfig{}, rng);
    const SingleNetwork s = build_sr_subnet(c, rng);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(bit_equal(d.view(Channel::lr).conv[i].weights, s.conv[i].weights));
    }
    CHECK(*d.reconstruction[0] == *s.reconstruction);
}

TEST_CASE("model I gradients over 20 kink-free instances") {
    const auto [n, worst] = testing::kink_free_cases(20, [](std::uint64_t s) { return testing::model_i_case(s); });
    CHECK(n == 20);
    CHECK(worst < 1e-4);
}

TEST_CASE("model I gradients with fixed dropout masks") {
    const auto [n, worst] =
        testing::kink_free_cases(20, [](std::uint64_t s) { return testing::model_i_case(s, 0.5); });
    CHECK(n == 20);
    CHECK(worst < 1e-4);
}

TEST_CASE("SR sub-network gradients, MSE and Huber") {
    for (ReconstructionLoss kind : {ReconstructionLoss::mse, ReconstructionLoss::huber}) {
        const auto [n, worst] = testing::kink_free_cases(20, [&](std::uint64_t s) { return testing::sr_case(s, kind); });
        CHECK(n == 20);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("dual PCSRN gradients, reconstruction and classification") {
    const auto [n, worst] = testing::kink_free_cases(20, [](std::uint64_t s) { return testing::dual_case(s); });
    CHECK(n == 20);
    CHECK(worst < 1e-4);
}

TEST_CASE("the kink guard notices a crossing") {
    // A pre-activation placed exactly on the kink must be flagged.
    using namespace vlrr;
    SingleNetwork net = build_model_i(tiny_config(), RandomState(1));
    const Tensor x({1, 1, 8, 8});
    testing::KinkGuard guard;
    auto loss = [&] {
        const ForwardTrace t = forward_channel(net.view(), x);
        guard.observe({&t});
        return t.probabilities[0];
    };
    loss();
    net.conv[0].bias[0] = 1e-9;
    loss();
    CHECK(guard.crossed);
}

TEST_CASE("coupled gradient sums the channels' shared slices") {
    RandomState rng(8);
    const ConvLayerParams g_lr(random_tensor({4, 1, 3, 3}, rng), random_tensor({4}, rng));
    const ConvLayerParams g_hr(random_tensor({4, 1, 3, 3}, rng), random_tensor({4}, rng));
    CoupledConvLayer layer;
    layer.shared = ConvLayerParams(3, 1, 3);
    layer.private_lr = ConvLayerParams(1, 1, 3);
    layer.private_hr = ConvLayerParams(1, 1, 3);
    const CoupledConvLayer g = coupled_backward(layer, g_lr, g_hr);
    Tensor expect = conv_filter_slice(g_lr, 0, 3).weights;
    expect += conv_filter_slice(g_hr, 0, 3).weights;
    CHECK(bit_equal(g.shared.weights, expect));
    CHECK(g.private_lr == conv_filter_slice(g_lr, 3, 1));
    CHECK(g.private_hr == conv_filter_slice(g_hr, 3, 1));
}

TEST_CASE("shared filters stay identical in both channels during training") {
    const NetworkConfig c = tiny_config();
    const CouplingConfig k{{2, 3, 1}};
    DualNetwork net = build_pcsrn(c, k, RandomState(9));
    RandomState rng(10);
    const Tensor lr = random_input(rng, 6);
    const Tensor hr = random_input(rng, 6);
    for (int step = 0; step < 12; ++step) {
        DualNetwork grads = net.zeros_like();
        sr_batch_gradient(net, lr, hr, hr, {}, grads);
        apply_sgd(net, grads, 0.01);
        const ChannelView a = net.view(Channel::lr);
        const ChannelView b = net.view(Channel::hr);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(bit_equal(first_filters(a.conv[i], k.shared[i]), first_filters(b.conv[i], k.shared[i])));
        }
    }
}

TEST_CASE("decoupled inference ignores everything HR-private") {
    const NetworkConfig c = tiny_config();
    DualNetwork net = attach_classifier_heads(build_pcsrn(c, CouplingConfig{{2, 2, 1}}, RandomState(11)),
                                              RandomState(12));
    RandomState rng(13);
    testing::jitter_biases(net, rng);
    const Tensor x = random_input(rng, 4);
    const Tensor before = predict(decouple_for_inference(net), x);
    for (int trial = 0; trial < 5; ++trial) {
        DualNetwork p = net;
        for (int l = 0; l < 3; ++l) {
            for (double& v : p.conv[l].private_hr.weights.values()) v += 10.0 * rng.normal();
            for (double& v : p.conv[l].private_hr.bias.values()) v = rng.normal();
        }
        for (double& v : p.head[1]->hidden.weights.values()) v = rng.normal();
        for (double& v : p.head[1]->output.bias.values()) v = rng.normal();
        CHECK(bit_equal(predict(decouple_for_inference(p), x), before));
    }
    DualNetwork q = net;
    q.conv[0].shared.weights[0] += 1.0;
    CHECK_FALSE(bit_equal(predict(decouple_for_inference(q), x), before));
}

TEST_CASE("checkpoints round trip bit-exactly") {
    const NetworkConfig c = tiny_config();
    RandomState rng(14);
    SingleNetwork single = build_model_i(c, rng);
    testing::jitter_biases(single, rng);
    const auto bytes = encode_checkpoint(single);
    const AnyNetwork back = decode_checkpoint(bytes);
    REQUIRE(std::holds_alternative<SingleNetwork>(back));
    CHECK(std::get<SingleNetwork>(back) == single);
    CHECK(encode_checkpoint(std::get<SingleNetwork>(back)) == bytes);

    DualNetwork dual = attach_classifier_heads(build_pcsrn(c, CouplingConfig{{1, 2, 2}}, rng), rng);
    const auto dual_bytes = encode_checkpoint(dual);
    const AnyNetwork dual_back = decode_checkpoint(dual_bytes);
    REQUIRE(std::holds_alternative<DualNetwork>(dual_back));
    CHECK(std::get<DualNetwork>(dual_back) == dual);

    const TensorArchive archive = decode_archive(dual_bytes, "VLRC");
    CHECK(archive.find("lr.conv1.shared.weight") == archive.find("conv1.shared.weight"));
    CHECK(archive.find("hr.conv1.shared.weight") == archive.find("conv1.shared.weight"));

    DualNetwork sr = build_pcsrn(c, CouplingConfig{{4, 4, 2}}, rng);
    CHECK(std::get<DualNetwork>(decode_checkpoint(encode_checkpoint(sr))) == sr);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto bytes = encode_checkpoint(build_model_i(tiny_config(), RandomState(15)));
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 3)), FormatError);
    auto bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);

    TensorArchive a = decode_archive(bytes, "VLRC");
    for (auto& [name, t] : a.entries) {
        if (name == "fc5.bias") t = Tensor({t.size() + 1});
    }
    CHECK_THROWS_AS(decode_checkpoint(encode_archive(a, "VLRC")), FormatError);
    CHECK_THROWS_AS(decode_archive(bytes, "VLRP"), FormatError);
}

TEST_CASE("pair archives round trip") {
    RandomState rng(16);
    PairSet p;
    p.lr = random_tensor({3, 1, 4, 4}, rng);
    p.hr = random_tensor({3, 1, 4, 4}, rng);
    p.mean = {0.1, 0.2, 0.3};
    p.scale = {1.0, 2.0, 3.0};
    p.labels = {0, 1, 1};
    p.class_count = 2;
    const PairSet q = decode_pair_set(encode_pair_set(p));
    CHECK(bit_equal(q.lr, p.lr));
    CHECK(bit_equal(q.hr, p.hr));
    CHECK(q.mean == p.mean);
    CHECK(q.scale == p.scale);
    CHECK(q.labels == p.labels);
    CHECK(q.class_count == 2);
}
