#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vlrr/layers.hpp"
#include "vlrr/random.hpp"
#include "vlrr/tensor.hpp"

namespace vlrr {

/// Architecture of the three-conv, two-fc network. `classes` is m5 and must
/// match the dataset; `height`/`width` fix the fc4 input size.
struct NetworkConfig {
    std::array<std::size_t, 3> filters{64, 64, 32};
    std::array<std::size_t, 3> filter_sizes{5, 3, 1};
    std::size_t fc_width = 1024;
    std::size_t classes = 10;
    // Filter size of the single-output reconstruction layer (conv4).
    std::size_t reconstruction_filter_size = 5;
    std::size_t height = 32;
    std::size_t width = 32;

    void validate() const;
    std::size_t fc_input() const { return filters[2] * height * width; }

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

using CouplingRatios = std::array<double, 3>;

/// Number of filters shared between the LR and HR channels in conv1..conv3.
struct CouplingConfig {
    std::array<std::size_t, 3> shared{};

    static CouplingConfig from_ratios(const NetworkConfig& config, const CouplingRatios& ratios);
    static CouplingConfig full(const NetworkConfig& config) { return {config.filters}; }
    CouplingRatios ratios(const NetworkConfig& config) const;
    void validate(const NetworkConfig& config) const;

    friend bool operator==(const CouplingConfig&, const CouplingConfig&) = default;
};

inline constexpr CouplingRatios default_coupling_ratios{0.50, 0.75, 0.75};

enum class Channel : std::size_t { lr = 0, hr = 1 };

/// Conv layer pair with k shared filters. Each channel's filter bank is
/// [shared | private_channel]; the shared filters (weights over all input
/// planes, and their biases) exist once and are read by both channels.
struct CoupledConvLayer {
    ConvLayerParams shared;
    ConvLayerParams private_lr;
    ConvLayerParams private_hr;

    std::size_t shared_count() const { return shared.out_channels(); }
    std::size_t filter_count() const { return shared.out_channels() + private_lr.out_channels(); }
    ConvLayerParams effective(Channel channel) const;

    friend bool operator==(const CoupledConvLayer&, const CoupledConvLayer&) = default;
};

// Gradient of a coupled layer from the two channels' full-bank gradients:
// shared = lr[0, k) + hr[0, k) (LR term first), privates copied through.
CoupledConvLayer coupled_backward(const CoupledConvLayer& layer, const ConvLayerParams& grad_lr,
                                  const ConvLayerParams& grad_hr);

struct ClassifierHead {
    FcLayerParams hidden; // fc4
    FcLayerParams output; // fc5

    friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;
};

// ----------------------------- channel pass -----------------------------

/// Effective parameters of one channel: `conv` holds the first depth conv
/// banks; exactly one of reconstruction / head is set.
struct ChannelView {
    std::vector<ConvLayerParams> conv;
    const ConvLayerParams* reconstruction = nullptr;
    const ClassifierHead* head = nullptr;
};

struct ForwardOptions {
    bool training = false;
    double dropout_rate = 0.0;
    RandomState* dropout_rng = nullptr; // required when training with dropout_rate > 0
};

struct ForwardTrace {
    Tensor input;
    std::vector<Tensor> conv_pre;
    std::vector<Tensor> conv_out;
    Tensor reconstruction;
    Tensor hidden_pre;
    Tensor hidden;
    Tensor dropout_mask;
    Tensor dropped;
    Tensor logits;
    Tensor probabilities;
};

ForwardTrace forward_channel(const ChannelView& view, const Tensor& input, const ForwardOptions& options = {});

struct ChannelGrads {
    std::vector<ConvLayerParams> conv; // layers below first_trainable stay default (empty)
    std::optional<ConvLayerParams> reconstruction;
    std::optional<ClassifierHead> head;
};

// grad_top is d loss / d reconstruction or d loss / d logits. Gradients are
// produced for conv layers >= first_trainable only.
ChannelGrads backward_channel(const ChannelView& view, const ForwardTrace& trace, const Tensor& grad_top,
                              std::size_t first_trainable = 0);

// ----------------------------- networks -----------------------------

struct ParamRef {
    std::string name;
    Tensor* tensor;
};

struct ConstParamRef {
    std::string name;
    const Tensor* tensor;
};

/// One-channel network: conv1..conv3 plus either the reconstruction layer
/// (SR sub-network) or the fc4/fc5 classifier head (Model I topology).
struct SingleNetwork {
    NetworkConfig config;
    std::array<ConvLayerParams, 3> conv;
    std::optional<ConvLayerParams> reconstruction;
    std::optional<ClassifierHead> head;

    ChannelView view(std::size_t depth = 3) const;

    std::vector<ParamRef> parameters();
    std::vector<ConstParamRef> parameters() const;

    // Same structure with every tensor zeroed; used as a gradient buffer.
    SingleNetwork zeros_like() const;
    void accumulate(const ChannelGrads& grads);

    friend bool operator==(const SingleNetwork&, const SingleNetwork&) = default;
};

/// Two-channel (LR->HR, HR->HR) network with coupled conv1..conv3 and
/// per-channel reconstruction layers or classifier heads.
struct DualNetwork {
    NetworkConfig config;
    CouplingConfig coupling;
    std::array<CoupledConvLayer, 3> conv;
    std::array<std::optional<ConvLayerParams>, 2> reconstruction;
    std::array<std::optional<ClassifierHead>, 2> head;

    ChannelView view(Channel channel, std::size_t depth = 3) const;

    std::vector<ParamRef> parameters();
    std::vector<ConstParamRef> parameters() const;

    DualNetwork zeros_like() const;
    // Adds both channels' gradients; shared filters get lr + hr.
    void accumulate(const ChannelGrads& lr, const ChannelGrads& hr);

    friend bool operator==(const DualNetwork&, const DualNetwork&) = default;
};

// Parameter name and shape, in parameters() order.
using Topology = std::vector<std::pair<std::string, Shape>>;
Topology topology(const SingleNetwork& net);
Topology topology(const DualNetwork& net);

std::size_t parameter_count(const SingleNetwork& net);
// Shared tensors count once.
std::size_t parameter_count(const DualNetwork& net);

// ----------------------------- builders -----------------------------
//
// Initial weights come from named sub-streams of `rng`:
//   init/conv{1,2,3}, init/conv4, init/fc4, init/fc5 for the (LR) channel and
//   init/hr/... for the HR channel's private filters and heads.
// A k = 0 dual network's LR channel therefore starts bit-identical to a
// single network built from the same seed.

// conv1 -> ReLU -> conv2 -> ReLU -> conv3 -> ReLU -> fc4 -> ReLU -> dropout -> fc5 -> softmax.
SingleNetwork build_model_i(const NetworkConfig& config, const RandomState& rng);

// conv1..conv3 (ReLU) followed by a linear single-output conv4.
SingleNetwork build_sr_subnet(const NetworkConfig& config, const RandomState& rng);

// Drops conv4, keeps conv1..conv3 unchanged and adds a fresh fc4/fc5 head.
SingleNetwork attach_classifier_head(SingleNetwork sr_subnet, const RandomState& rng);

// Two SR channels whose conv layer i shares coupling.shared[i] filters.
DualNetwork build_pcsrn(const NetworkConfig& config, const CouplingConfig& coupling, const RandomState& rng);

// Drops both conv4 layers and gives each channel its own fresh head.
DualNetwork attach_classifier_heads(DualNetwork dual, const RandomState& rng);

// The LR channel (shared + LR-private filters + LR head) as a standalone classifier.
SingleNetwork decouple_for_inference(const DualNetwork& dual);

} // namespace vlrr
