#include "vlrr/models.hpp"

#include <cmath>

namespace vlrr {

namespace {

std::string layer_name(std::size_t i) { return "conv" + std::to_string(i + 1); }

std::size_t input_channels(const NetworkConfig& config, std::size_t layer) {
    return layer == 0 ? 1 : config.filters[layer - 1];
}

void add_into(ConvLayerParams& into, const ConvLayerParams& g) {
    into.weights += g.weights;
    into.bias += g.bias;
}

void add_into(ClassifierHead& into, const ClassifierHead& g) {
    into.hidden.weights += g.hidden.weights;
    into.hidden.bias += g.hidden.bias;
    into.output.weights += g.output.weights;
    into.output.bias += g.output.bias;
}

bool has_filters(const ConvLayerParams& p) { return p.weights.rank() == 4; }

template <typename Ref, typename Net>
std::vector<Ref> single_params(Net& net) {
    std::vector<Ref> out;
    for (std::size_t i = 0; i < 3; ++i) {
        out.push_back({layer_name(i) + ".weight", &net.conv[i].weights});
        out.push_back({layer_name(i) + ".bias", &net.conv[i].bias});
    }
    if (net.reconstruction) {
        out.push_back({"conv4.weight", &net.reconstruction->weights});
        out.push_back({"conv4.bias", &net.reconstruction->bias});
    }
    if (net.head) {
        out.push_back({"fc4.weight", &net.head->hidden.weights});
        out.push_back({"fc4.bias", &net.head->hidden.bias});
        out.push_back({"fc5.weight", &net.head->output.weights});
        out.push_back({"fc5.bias", &net.head->output.bias});
    }
    return out;
}

template <typename Ref, typename Net>
std::vector<Ref> dual_params(Net& net) {
    std::vector<Ref> out;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string n = layer_name(i);
        out.push_back({n + ".shared.weight", &net.conv[i].shared.weights});
        out.push_back({n + ".shared.bias", &net.conv[i].shared.bias});
        out.push_back({n + ".lr.weight", &net.conv[i].private_lr.weights});
        out.push_back({n + ".lr.bias", &net.conv[i].private_lr.bias});
        out.push_back({n + ".hr.weight", &net.conv[i].private_hr.weights});
        out.push_back({n + ".hr.bias", &net.conv[i].private_hr.bias});
    }
    const char* channel_names[2] = {"lr", "hr"};
    for (std::size_t c = 0; c < 2; ++c) {
        const std::string prefix = channel_names[c];
        if (net.reconstruction[c]) {
            out.push_back({prefix + ".conv4.weight", &net.reconstruction[c]->weights});
            out.push_back({prefix + ".conv4.bias", &net.reconstruction[c]->bias});
        }
        if (net.head[c]) {
            out.push_back({prefix + ".fc4.weight", &net.head[c]->hidden.weights});
            out.push_back({prefix + ".fc4.bias", &net.head[c]->hidden.bias});
            out.push_back({prefix + ".fc5.weight", &net.head[c]->output.weights});
            out.push_back({prefix + ".fc5.bias", &net.head[c]->output.bias});
        }
    }
    return out;
}

template <typename Refs>
Topology topology_of(const Refs& refs) {
    Topology t;
    for (const auto& r : refs) {
        t.emplace_back(r.name, r.tensor->shape());
    }
    return t;
}

template <typename Refs>
std::size_t count_of(const Refs& refs) {
    std::size_t n = 0;
    for (const auto& r : refs) {
        n += r.tensor->size();
    }
    return n;
}

ClassifierHead init_head(const NetworkConfig& config, const RandomState& init) {
    RandomState r4 = init.substream("fc4");
    RandomState r5 = init.substream("fc5");
    return {init_fc(config.fc_width, config.fc_input(), r4), init_fc(config.classes, config.fc_width, r5)};
}

ConvLayerParams init_reconstruction(const NetworkConfig& config, const RandomState& init) {
    RandomState r = init.substream("conv4");
    return init_conv(1, config.filters[2], config.reconstruction_filter_size, r);
}

} // namespace

// ----------------------------- configs -----------------------------

void NetworkConfig::validate() const {
    for (std::size_t i = 0; i < 3; ++i) {
        if (filters[i] == 0) {
            throw ConfigError("filter count n" + std::to_string(i + 1) + " must be positive");
        }
        if (filter_sizes[i] == 0 || filter_sizes[i] % 2 == 0) {
            throw ConfigError("filter size f" + std::to_string(i + 1) + " must be a positive odd integer");
        }
    }
    if (reconstruction_filter_size == 0 || reconstruction_filter_size % 2 == 0) {
        throw ConfigError("reconstruction filter size must be a positive odd integer");
    }
    if (fc_width == 0 || classes == 0 || height == 0 || width == 0) {
        throw ConfigError("fc width, class count and image size must be positive");
    }
}

CouplingConfig CouplingConfig::from_ratios(const NetworkConfig& config, const CouplingRatios& ratios) {
    CouplingConfig c;
    for (std::size_t i = 0; i < 3; ++i) {
        if (!(ratios[i] >= 0.0 && ratios[i] <= 1.0)) {
            throw ConfigError("coupled ratio c" + std::to_string(i + 1) + " must lie in [0, 1]");
        }
        c.shared[i] = static_cast<std::size_t>(std::llround(ratios[i] * static_cast<double>(config.filters[i])));
    }
    return c;
}

CouplingRatios CouplingConfig::ratios(const NetworkConfig& config) const {
    CouplingRatios r{};
    for (std::size_t i = 0; i < 3; ++i) {
        r[i] = static_cast<double>(shared[i]) / static_cast<double>(config.filters[i]);
    }
    return r;
}

void CouplingConfig::validate(const NetworkConfig& config) const {
    for (std::size_t i = 0; i < 3; ++i) {
        if (shared[i] > config.filters[i]) {
            throw ConfigError("shared filter count k" + std::to_string(i + 1) + " = " + std::to_string(shared[i]) +
                              " exceeds n" + std::to_string(i + 1) + " = " + std::to_string(config.filters[i]));
        }
    }
}

// ----------------------------- coupled layer -----------------------------

ConvLayerParams CoupledConvLayer::effective(Channel channel) const {
    return conv_concat(shared, channel == Channel::lr ? private_lr : private_hr);
}

CoupledConvLayer coupled_backward(const CoupledConvLayer& layer, const ConvLayerParams& grad_lr,
                                  const ConvLayerParams& grad_hr) {
    const std::size_t k = layer.shared_count();
    const std::size_t n = layer.filter_count();
    if (grad_lr.out_channels() != n) {
        throw DimensionError("out_channels", n, grad_lr.out_channels(), "coupled_backward(lr)");
    }
    if (grad_hr.out_channels() != n) {
        throw DimensionError("out_channels", n, grad_hr.out_channels(), "coupled_backward(hr)");
    }
    CoupledConvLayer g;
    g.shared = conv_filter_slice(grad_lr, 0, k);
    add_into(g.shared, conv_filter_slice(grad_hr, 0, k));
    g.private_lr = conv_filter_slice(grad_lr, k, n - k);
    g.private_hr = conv_filter_slice(grad_hr, k, n - k);
    return g;
}

// ----------------------------- channel pass -----------------------------

ForwardTrace forward_channel(const ChannelView& view, const Tensor& input, const ForwardOptions& options) {
    if ((view.head == nullptr) == (view.reconstruction == nullptr)) {
        throw ConfigError("forward_channel: exactly one of reconstruction layer or classifier head must be set");
    }
    ForwardTrace trace;
    trace.input = input;
    const Tensor* x = &trace.input;
    trace.conv_pre.reserve(view.conv.size());
    trace.conv_out.reserve(view.conv.size());
    for (const ConvLayerParams& layer : view.conv) {
        trace.conv_pre.push_back(conv2d_forward(*x, layer));
        trace.conv_out.push_back(relu(trace.conv_pre.back()));
        x = &trace.conv_out.back();
    }
    if (view.reconstruction != nullptr) {
        trace.reconstruction = conv2d_forward(*x, *view.reconstruction);
        return trace;
    }
    trace.hidden_pre = fc_forward(*x, view.head->hidden);
    trace.hidden = relu(trace.hidden_pre);
    const bool drop = options.training && options.dropout_rate > 0.0;
    if (drop && options.dropout_rng == nullptr) {
        throw ConfigError("forward_channel: dropout in training mode needs a random stream");
    }
    RandomState unused(0);
    DropoutResult d = dropout(trace.hidden, options.dropout_rate, drop ? *options.dropout_rng : unused, drop);
    trace.dropped = std::move(d.output);
    trace.dropout_mask = std::move(d.mask);
    trace.logits = fc_forward(trace.dropped, view.head->output);
    trace.probabilities = softmax(trace.logits);
    return trace;
}

ChannelGrads backward_channel(const ChannelView& view, const ForwardTrace& trace, const Tensor& grad_top,
                              std::size_t first_trainable) {
    const std::size_t depth = view.conv.size();
    ChannelGrads grads;
    grads.conv.resize(depth);
    const Tensor& top_features = depth == 0 ? trace.input : trace.conv_out.back();
    Tensor g;
    if (view.reconstruction != nullptr) {
        ConvGrads gr = conv2d_backward(top_features, *view.reconstruction, grad_top, first_trainable < depth);
        grads.reconstruction = ConvLayerParams(std::move(gr.weights), std::move(gr.bias));
        g = std::move(gr.input);
    } else {
        FcGrads g5 = fc_backward(trace.dropped, view.head->output, grad_top);
        Tensor gh = relu_backward(trace.hidden_pre, dropout_backward(trace.dropout_mask, g5.input));
        FcGrads g4 = fc_backward(top_features, view.head->hidden, gh);
        grads.head = ClassifierHead{FcLayerParams(std::move(g4.weights), std::move(g4.bias)),
                                    FcLayerParams(std::move(g5.weights), std::move(g5.bias))};
        g = std::move(g4.input);
    }
    for (std::size_t i = depth; i-- > first_trainable;) {
        const Tensor& layer_input = i == 0 ? trace.input : trace.conv_out[i - 1];
        Tensor gpre = relu_backward(trace.conv_pre[i], g);
        ConvGrads gc = conv2d_backward(layer_input, view.conv[i], gpre, i > first_trainable);
        grads.conv[i] = ConvLayerParams(std::move(gc.weights), std::move(gc.bias));
        g = std::move(gc.input);
    }
    return grads;
}

// ----------------------------- SingleNetwork -----------------------------

ChannelView SingleNetwork::view(std::size_t depth) const {
    ChannelView v;
    for (std::size_t i = 0; i < depth && i < 3; ++i) {
        v.conv.push_back(conv[i]);
    }
    v.reconstruction = reconstruction ? &*reconstruction : nullptr;
    v.head = head ? &*head : nullptr;
    return v;
}

std::vector<ParamRef> SingleNetwork::parameters() { return single_params<ParamRef>(*this); }

std::vector<ConstParamRef> SingleNetwork::parameters() const { return single_params<ConstParamRef>(*this); }

SingleNetwork SingleNetwork::zeros_like() const {
    SingleNetwork z = *this;
    for (ParamRef& p : z.parameters()) {
        p.tensor->fill(0.0);
    }
    return z;
}

void SingleNetwork::accumulate(const ChannelGrads& grads) {
    for (std::size_t i = 0; i < grads.conv.size() && i < 3; ++i) {
        if (has_filters(grads.conv[i])) {
            add_into(conv[i], grads.conv[i]);
        }
    }
    if (grads.reconstruction) {
        add_into(reconstruction.value(), *grads.reconstruction);
    }
    if (grads.head) {
        add_into(head.value(), *grads.head);
    }
}

// ----------------------------- DualNetwork -----------------------------

ChannelView DualNetwork::view(Channel channel, std::size_t depth) const {
    const auto c = static_cast<std::size_t>(channel);
    ChannelView v;
    for (std::size_t i = 0; i < depth && i < 3; ++i) {
        v.conv.push_back(conv[i].effective(channel));
    }
    v.reconstruction = reconstruction[c] ? &*reconstruction[c] : nullptr;
    v.head = head[c] ? &*head[c] : nullptr;
    return v;
}

std::vector<ParamRef> DualNetwork::parameters() { return dual_params<ParamRef>(*this); }

std::vector<ConstParamRef> DualNetwork::parameters() const { return dual_params<ConstParamRef>(*this); }

DualNetwork DualNetwork::zeros_like() const {
    DualNetwork z = *this;
    for (ParamRef& p : z.parameters()) {
        p.tensor->fill(0.0);
    }
    return z;
}

void DualNetwork::accumulate(const ChannelGrads& lr, const ChannelGrads& hr) {
    for (std::size_t i = 0; i < 3 && i < lr.conv.size() && i < hr.conv.size(); ++i) {
        if (!has_filters(lr.conv[i]) || !has_filters(hr.conv[i])) {
            continue;
        }
        const CoupledConvLayer g = coupled_backward(conv[i], lr.conv[i], hr.conv[i]);
        add_into(conv[i].shared, g.shared);
        add_into(conv[i].private_lr, g.private_lr);
        add_into(conv[i].private_hr, g.private_hr);
    }
    const ChannelGrads* per_channel[2] = {&lr, &hr};
    for (std::size_t c = 0; c < 2; ++c) {
        if (per_channel[c]->reconstruction) {
            add_into(reconstruction[c].value(), *per_channel[c]->reconstruction);
        }
        if (per_channel[c]->head) {
            add_into(head[c].value(), *per_channel[c]->head);
        }
    }
}

Topology topology(const SingleNetwork& net) { return topology_of(net.parameters()); }

Topology topology(const DualNetwork& net) { return topology_of(net.parameters()); }

std::size_t parameter_count(const SingleNetwork& net) { return count_of(net.parameters()); }

std::size_t parameter_count(const DualNetwork& net) { return count_of(net.parameters()); }

// ----------------------------- builders -----------------------------

SingleNetwork build_sr_subnet(const NetworkConfig& config, const RandomState& rng) {
    config.validate();
    const RandomState init = rng.substream("init");
    SingleNetwork net;
    net.config = config;
    for (std::size_t i = 0; i < 3; ++i) {
        RandomState r = init.substream(layer_name(i));
        net.conv[i] = init_conv(config.filters[i], input_channels(config, i), config.filter_sizes[i], r);
    }
    net.reconstruction = init_reconstruction(config, init);
    return net;
}

SingleNetwork build_model_i(const NetworkConfig& config, const RandomState& rng) {
    return attach_classifier_head(build_sr_subnet(config, rng), rng);
}

SingleNetwork attach_classifier_head(SingleNetwork sr_subnet, const RandomState& rng) {
    sr_subnet.reconstruction.reset();
    sr_subnet.head = init_head(sr_subnet.config, rng.substream("init"));
    return sr_subnet;
}

DualNetwork build_pcsrn(const NetworkConfig& config, const CouplingConfig& coupling, const RandomState& rng) {
    config.validate();
    coupling.validate(config);
    const RandomState init = rng.substream("init");
    const RandomState init_hr = init.substream("hr");
    DualNetwork net;
    net.config = config;
    net.coupling = coupling;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t n = config.filters[i];
        const std::size_t k = coupling.shared[i];
        RandomState r_lr = init.substream(layer_name(i));
        RandomState r_hr = init_hr.substream(layer_name(i));
        const ConvLayerParams lr_bank = init_conv(n, input_channels(config, i), config.filter_sizes[i], r_lr);
        const ConvLayerParams hr_bank = init_conv(n, input_channels(config, i), config.filter_sizes[i], r_hr);
        net.conv[i].shared = conv_filter_slice(lr_bank, 0, k);
        net.conv[i].private_lr = conv_filter_slice(lr_bank, k, n - k);
        net.conv[i].private_hr = conv_filter_slice(hr_bank, k, n - k);
    }
    net.reconstruction[0] = init_reconstruction(config, init);
    net.reconstruction[1] = init_reconstruction(config, init_hr);
    return net;
}

DualNetwork attach_classifier_heads(DualNetwork dual, const RandomState& rng) {
    const RandomState init = rng.substream("init");
    dual.reconstruction = {};
    dual.head[0] = init_head(dual.config, init);
    dual.head[1] = init_head(dual.config, init.substream("hr"));
    return dual;
}

SingleNetwork decouple_for_inference(const DualNetwork& dual) {
    if (!dual.head[0]) {
        throw ConfigError("decouple_for_inference: classifier heads have not been attached");
    }
    SingleNetwork net;
    net.config = dual.config;
    for (std::size_t i = 0; i < 3; ++i) {
        net.conv[i] = dual.conv[i].effective(Channel::lr);
    }
    net.head = *dual.head[0];
    return net;
}

} // namespace vlrr
