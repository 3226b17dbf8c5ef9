#include "vlrr/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace vlrr {

namespace {

std::string format_number(double v) {
    if (std::isnan(v)) {
        return "";
    }
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::vector<std::size_t> take(std::span<const std::size_t> pool, std::span<const std::size_t> order,
                              std::size_t first, std::size_t count) {
    std::vector<std::size_t> out(count);
    for (std::size_t j = 0; j < count; ++j) {
        out[j] = pool[order[first + j]];
    }
    return out;
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = i;
    }
    return v;
}

// Rows of `source` at `ids`, each with N(0, sigma^2) noise drawn from its own
// sub-stream of `epoch_stream` keyed by sample id.
Tensor noisy_batch(const Tensor& source, std::span<const std::size_t> ids, double sigma,
                   const RandomState& epoch_stream) {
    Tensor batch = gather_rows(source, ids);
    if (sigma == 0.0) {
        return batch;
    }
    const std::size_t row = batch.size() / std::max<std::size_t>(ids.size(), 1);
    for (std::size_t j = 0; j < ids.size(); ++j) {
        RandomState r = epoch_stream.substream(static_cast<std::uint64_t>(ids[j]));
        double* p = batch.data() + j * row;
        for (std::size_t i = 0; i < row; ++i) {
            p[i] += sigma * r.normal();
        }
    }
    return batch;
}

std::vector<std::size_t> labels_of(const PairSet& pairs, std::span<const std::size_t> ids) {
    std::vector<std::size_t> out(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j) {
        out[j] = pairs.labels[ids[j]];
    }
    return out;
}

void require_pairs(const PairSet& pairs, const NetworkConfig& config, const char* where) {
    if (pairs.size() == 0) {
        throw ConfigError(std::string(where) + ": training data is empty");
    }
    if (pairs.lr.rank() != 4 || pairs.lr.extent(2) != config.height || pairs.lr.extent(3) != config.width) {
        throw ConfigError(std::string(where) + ": image size " + shape_string(pairs.lr.shape()) +
                          " does not match the network input " + std::to_string(config.height) + "x" +
                          std::to_string(config.width));
    }
}

void sgd_conv(ConvLayerParams& p, const ConvLayerParams& g, double lr) {
    sgd_step(p.weights, g.weights, lr);
    sgd_step(p.bias, g.bias, lr);
}

void sgd_coupled(CoupledConvLayer& layer, const ConvLayerParams& grad_lr, const ConvLayerParams& grad_hr,
                 double lr) {
    const CoupledConvLayer g = coupled_backward(layer, grad_lr, grad_hr);
    sgd_conv(layer.shared, g.shared, lr);
    sgd_conv(layer.private_lr, g.private_lr, lr);
    sgd_conv(layer.private_hr, g.private_hr, lr);
}

std::vector<std::size_t> metric_ks(std::size_t classes) {
    return classes >= 5 ? std::vector<std::size_t>{1, 5} : std::vector<std::size_t>{1};
}

Tensor predict_view(const ChannelView& view, const Tensor& inputs) {
    const std::size_t n = inputs.extent(0);
    constexpr std::size_t chunk = 256;
    Tensor out;
    std::size_t classes = 0;
    for (std::size_t first = 0; first < n; first += chunk) {
        const std::size_t count = std::min(chunk, n - first);
        const ForwardTrace trace = forward_channel(view, slice_rows(inputs, first, count));
        if (first == 0) {
            classes = trace.probabilities.extent(1);
            out = Tensor({n, classes});
        }
        std::copy(trace.probabilities.values().begin(), trace.probabilities.values().end(),
                  out.data() + first * classes);
    }
    return out;
}

// ---- SR stage machinery (shared by end-to-end and layerwise training) ----

struct Stage {
    std::size_t depth = 3;
    std::size_t first_trainable = 0;
};

// One SGD step of the single network's first `depth` layers plus `head`.
double sr_step(SingleNetwork& net, const Stage& stage, ConvLayerParams& head, const Tensor& input,
               const Tensor& target, const ReconstructionObjective& objective, double lr) {
    ChannelView view = net.view(stage.depth);
    view.head = nullptr;
    view.reconstruction = &head;
    const ForwardTrace trace = forward_channel(view, input);
    const LossResult loss = reconstruction_loss(objective, trace.reconstruction, target);
    const ChannelGrads g = backward_channel(view, trace, loss.grad, stage.first_trainable);
    for (std::size_t i = stage.first_trainable; i < stage.depth; ++i) {
        sgd_conv(net.conv[i], g.conv[i], lr);
    }
    sgd_conv(head, *g.reconstruction, lr);
    return loss.value;
}

double sr_step(DualNetwork& net, const Stage& stage, std::array<ConvLayerParams*, 2> heads, const Tensor& lr_input,
               const Tensor& hr_input, const Tensor& target, const ReconstructionObjective& objective,
               double lr) {
    const Tensor* inputs[2] = {&lr_input, &hr_input};
    ChannelGrads grads[2];
    double total = 0.0;
    for (std::size_t c = 0; c < 2; ++c) {
        ChannelView view = net.view(static_cast<Channel>(c), stage.depth);
        view.head = nullptr;
        view.reconstruction = heads[c];
        const ForwardTrace trace = forward_channel(view, *inputs[c]);
        const LossResult loss = reconstruction_loss(objective, trace.reconstruction, target);
        grads[c] = backward_channel(view, trace, loss.grad, stage.first_trainable);
        total += loss.value;
    }
    for (std::size_t i = stage.first_trainable; i < stage.depth; ++i) {
        sgd_coupled(net.conv[i], grads[0].conv[i], grads[1].conv[i], lr);
    }
    for (std::size_t c = 0; c < 2; ++c) {
        sgd_conv(*heads[c], *grads[c].reconstruction, lr);
    }
    return total;
}

// Epoch loop over shuffled mini-batches. step(ids, epoch) returns the batch loss.
template <typename Step>
void sr_epochs(std::size_t n, const PretrainConfig& config, const RandomState& rng, const std::string& phase,
               PretrainResult& result, Step&& step) {
    const RandomState shuffle = rng.substream("shuffle");
    const std::vector<std::size_t> all = iota(n);
    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        RandomState s = shuffle.substream(static_cast<std::uint64_t>(epoch));
        const std::vector<std::size_t> order = s.permutation(n);
        double sum = 0.0;
        for (std::size_t first = 0; first < n; first += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - first);
            const std::vector<std::size_t> ids = take(all, order, first, count);
            sum += step(ids, epoch) * static_cast<double>(count);
        }
        const double mean = sum / static_cast<double>(n);
        result.epoch_loss.push_back(mean);
        EpochRecord rec;
        rec.epoch = result.curves.size() + 1;
        rec.phase = phase;
        rec.loss = mean;
        rec.learning_rate = config.learning_rate;
        result.curves.push_back(rec);
    }
}

void run_single_stage(SingleNetwork& net, const Stage& stage, ConvLayerParams& head, const PairSet& pairs,
                      const PretrainConfig& config, const RandomState& rng, const std::string& phase,
                      PretrainResult& result) {
    const RandomState augment = rng.substream("augment");
    sr_epochs(pairs.size(), config, rng, phase, result, [&](const std::vector<std::size_t>& ids, std::size_t epoch) {
        const Tensor input = noisy_batch(pairs.lr, ids, config.noise_sigma, augment.substream(epoch));
        const Tensor target = gather_rows(pairs.hr, ids);
        return sr_step(net, stage, head, input, target, config.objective, config.learning_rate);
    });
}

void run_dual_stage(DualNetwork& net, const Stage& stage, std::array<ConvLayerParams*, 2> heads,
                    const PairSet& pairs, const PretrainConfig& config, const RandomState& rng,
                    const std::string& phase, PretrainResult& result) {
    const RandomState augment = rng.substream("augment");
    const RandomState augment_hr = rng.substream("augment-hr");
    sr_epochs(pairs.size(), config, rng, phase, result, [&](const std::vector<std::size_t>& ids, std::size_t epoch) {
        const Tensor lr_input = noisy_batch(pairs.lr, ids, config.noise_sigma, augment.substream(epoch));
        const Tensor hr_input = noisy_batch(pairs.hr, ids, config.noise_sigma, augment_hr.substream(epoch));
        const Tensor target = gather_rows(pairs.hr, ids);
        return sr_step(net, stage, heads, lr_input, hr_input, target, config.objective, config.learning_rate);
    });
}

ConvLayerParams temporary_head(const NetworkConfig& config, std::size_t stage, const RandomState& rng) {
    RandomState r = rng.substream("init-stage" + std::to_string(stage + 1));
    return init_conv(1, config.filters[stage], config.reconstruction_filter_size, r);
}

} // namespace

// ----------------------------- curves -----------------------------

std::string curves_csv(const Curves& curves) {
    std::string out = "epoch,phase,loss,top1,top5,lr\n";
    for (const EpochRecord& r : curves) {
        out += std::to_string(r.epoch);
        out += ',';
        out += r.phase;
        out += ',';
        out += format_number(r.loss);
        out += ',';
        out += format_number(r.top1);
        out += ',';
        out += format_number(r.top5);
        out += ',';
        out += format_number(r.learning_rate);
        out += '\n';
    }
    return out;
}

// ----------------------------- objectives -----------------------------

LossResult reconstruction_loss(const ReconstructionObjective& objective, const Tensor& prediction,
                               const Tensor& target) {
    return objective.loss == ReconstructionLoss::huber ? huber_loss(prediction, target, objective.huber)
                                                       : mse_loss(prediction, target);
}

double sr_batch_gradient(const SingleNetwork& net, const Tensor& input, const Tensor& target,
                         const ReconstructionObjective& objective, SingleNetwork& grads) {
    if (!net.reconstruction) {
        throw ConfigError("sr_batch_gradient: network has no reconstruction layer");
    }
    const ChannelView view = net.view();
    const ForwardTrace trace = forward_channel(view, input);
    const LossResult loss = reconstruction_loss(objective, trace.reconstruction, target);
    grads.accumulate(backward_channel(view, trace, loss.grad));
    return loss.value;
}

double sr_batch_gradient(const DualNetwork& net, const Tensor& lr_input, const Tensor& hr_input,
                         const Tensor& target, const ReconstructionObjective& objective, DualNetwork& grads) {
    if (!net.reconstruction[0] || !net.reconstruction[1]) {
        throw ConfigError("sr_batch_gradient: network has no reconstruction layers");
    }
    const ChannelView lr_view = net.view(Channel::lr);
    const ChannelView hr_view = net.view(Channel::hr);
    const ForwardTrace lr_trace = forward_channel(lr_view, lr_input);
    const ForwardTrace hr_trace = forward_channel(hr_view, hr_input);
    const LossResult lr_loss = reconstruction_loss(objective, lr_trace.reconstruction, target);
    const LossResult hr_loss = reconstruction_loss(objective, hr_trace.reconstruction, target);
    grads.accumulate(backward_channel(lr_view, lr_trace, lr_loss.grad),
                     backward_channel(hr_view, hr_trace, hr_loss.grad));
    return lr_loss.value + hr_loss.value;
}

double classify_batch_gradient(const SingleNetwork& net, const Tensor& input, std::span<const std::size_t> labels,
                               double dropout_rate, RandomState* dropout_rng, SingleNetwork& grads,
                               Tensor* probabilities) {
    if (!net.head) {
        throw ConfigError("classify_batch_gradient: network has no classifier head");
    }
    const ChannelView view = net.view();
    const ForwardOptions options{dropout_rng != nullptr, dropout_rate, dropout_rng};
    const ForwardTrace trace = forward_channel(view, input, options);
    const LossResult loss = cross_entropy_loss(trace.probabilities, labels);
    grads.accumulate(backward_channel(view, trace, loss.grad));
    if (probabilities != nullptr) {
        *probabilities = trace.probabilities;
    }
    return loss.value;
}

double classify_batch_gradient(const DualNetwork& net, const Tensor& lr_input, const Tensor& hr_input,
                               std::span<const std::size_t> labels, double dropout_rate, RandomState* lr_rng,
                               RandomState* hr_rng, DualNetwork& grads, Tensor* lr_probabilities) {
    if (!net.head[0] || !net.head[1]) {
        throw ConfigError("classify_batch_gradient: network has no classifier heads");
    }
    const ChannelView lr_view = net.view(Channel::lr);
    const ChannelView hr_view = net.view(Channel::hr);
    const ForwardTrace lr_trace = forward_channel(lr_view, lr_input, {lr_rng != nullptr, dropout_rate, lr_rng});
    const ForwardTrace hr_trace = forward_channel(hr_view, hr_input, {hr_rng != nullptr, dropout_rate, hr_rng});
    const LossResult lr_loss = cross_entropy_loss(lr_trace.probabilities, labels);
    const LossResult hr_loss = cross_entropy_loss(hr_trace.probabilities, labels);
    grads.accumulate(backward_channel(lr_view, lr_trace, lr_loss.grad),
                     backward_channel(hr_view, hr_trace, hr_loss.grad));
    if (lr_probabilities != nullptr) {
        *lr_probabilities = lr_trace.probabilities;
    }
    return lr_loss.value + hr_loss.value;
}

template <typename Net>
static void apply_sgd_impl(Net& net, const Net& grads, double learning_rate) {
    const auto params = net.parameters();
    const auto g = grads.parameters();
    if (params.size() != g.size()) {
        throw DimensionError("parameter count", params.size(), g.size(), "apply_sgd");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        sgd_step(*params[i].tensor, *g[i].tensor, learning_rate);
    }
}

void apply_sgd(SingleNetwork& net, const SingleNetwork& grads, double learning_rate) {
    apply_sgd_impl(net, grads, learning_rate);
}

void apply_sgd(DualNetwork& net, const DualNetwork& grads, double learning_rate) {
    apply_sgd_impl(net, grads, learning_rate);
}

// ----------------------------- pre-training -----------------------------

void PretrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("pretrain learning rate must be a finite nonnegative number");
    }
    if (batch_size == 0) {
        throw ConfigError("pretrain batch size must be positive");
    }
    if (!(noise_sigma >= 0.0)) {
        throw ConfigError("pretrain noise sigma must be nonnegative");
    }
    if (!(objective.huber.c > 0.0)) {
        throw ConfigError("huber c must be positive");
    }
}

PretrainResult pretrain_sr(SingleNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                           const RandomState& rng) {
    if (config.mode == PretrainMode::layerwise) {
        return pretrain_layerwise(net, pairs, config, rng);
    }
    config.validate();
    require_pairs(pairs, net.config, "pretrain_sr");
    if (!net.reconstruction) {
        throw ConfigError("pretrain_sr: network has no reconstruction layer");
    }
    PretrainResult result;
    run_single_stage(net, Stage{}, *net.reconstruction, pairs, config, rng, "pretrain", result);
    return result;
}

PretrainResult pretrain_sr(DualNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                           const RandomState& rng) {
    if (config.mode == PretrainMode::layerwise) {
        return pretrain_layerwise(net, pairs, config, rng);
    }
    config.validate();
    require_pairs(pairs, net.config, "pretrain_sr");
    if (!net.reconstruction[0] || !net.reconstruction[1]) {
        throw ConfigError("pretrain_sr: network has no reconstruction layers");
    }
    PretrainResult result;
    run_dual_stage(net, Stage{}, {&*net.reconstruction[0], &*net.reconstruction[1]}, pairs, config, rng,
                   "pretrain", result);
    return result;
}

PretrainResult pretrain_layerwise(SingleNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                                  const RandomState& rng) {
    config.validate();
    require_pairs(pairs, net.config, "pretrain_layerwise");
    if (!net.reconstruction) {
        throw ConfigError("pretrain_layerwise: network has no reconstruction layer");
    }
    PretrainResult result;
    for (std::size_t s = 0; s < 3; ++s) {
        const RandomState stage_rng = rng.substream("stage" + std::to_string(s + 1));
        const Stage stage{s + 1, s};
        const std::string phase = "pretrain-stage" + std::to_string(s + 1);
        if (s < 2) {
            ConvLayerParams head = temporary_head(net.config, s, rng);
            run_single_stage(net, stage, head, pairs, config, stage_rng, phase, result);
        } else {
            run_single_stage(net, stage, *net.reconstruction, pairs, config, stage_rng, phase, result);
        }
    }
    return result;
}

PretrainResult pretrain_layerwise(DualNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                                  const RandomState& rng) {
    config.validate();
    require_pairs(pairs, net.config, "pretrain_layerwise");
    if (!net.reconstruction[0] || !net.reconstruction[1]) {
        throw ConfigError("pretrain_layerwise: network has no reconstruction layers");
    }
    PretrainResult result;
    for (std::size_t s = 0; s < 3; ++s) {
        const RandomState stage_rng = rng.substream("stage" + std::to_string(s + 1));
        const Stage stage{s + 1, s};
        const std::string phase = "pretrain-stage" + std::to_string(s + 1);
        if (s < 2) {
            ConvLayerParams lr_head = temporary_head(net.config, s, rng);
            ConvLayerParams hr_head = temporary_head(net.config, s, rng.substream("hr"));
            run_dual_stage(net, stage, {&lr_head, &hr_head}, pairs, config, stage_rng, phase, result);
        } else {
            run_dual_stage(net, stage, {&*net.reconstruction[0], &*net.reconstruction[1]}, pairs, config,
                           stage_rng, phase, result);
        }
    }
    return result;
}

// ----------------------------- plateau schedule -----------------------------

void PlateauConfig::validate() const {
    if (patience == 0) {
        throw ConfigError("plateau patience must be at least 1");
    }
    if (!(factor > 1.0)) {
        throw ConfigError("plateau factor must exceed 1");
    }
    if (!(floor > 0.0)) {
        throw ConfigError("plateau floor must be positive");
    }
    if (!(min_delta >= 0.0)) {
        throw ConfigError("plateau min_delta must be nonnegative");
    }
}

double plateau_step(PlateauState& state, const PlateauConfig& config, double validation_error) {
    if (state.stop) {
        return state.learning_rate;
    }
    if (validation_error < state.best - config.min_delta) {
        state.best = validation_error;
        state.stale_epochs = 0;
        return state.learning_rate;
    }
    state.best = std::min(state.best, validation_error);
    if (++state.stale_epochs < config.patience) {
        return state.learning_rate;
    }
    state.stale_epochs = 0;
    state.learning_rate /= config.factor;
    ++state.divisions;
    // The relative slack absorbs rounding in repeated division (0.1 / 10^4).
    if (state.learning_rate <= config.floor * (1.0 + 1e-9)) {
        state.learning_rate = config.floor;
        state.stop = true;
    }
    return state.learning_rate;
}

// ----------------------------- fine-tuning -----------------------------

void FinetuneConfig::validate() const {
    plateau.validate();
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("finetune learning rate must be a finite nonnegative number");
    }
    if (batch_size == 0) {
        throw ConfigError("finetune batch size must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1)");
    }
    if (!(noise_sigma >= 0.0)) {
        throw ConfigError("finetune noise sigma must be nonnegative");
    }
}

namespace {

struct EpochTally {
    double loss = 0.0;
    double top1 = 0.0;
    double top5 = 0.0;
    std::size_t count = 0;

    void add(double batch_loss, const Tensor& probabilities, std::span<const std::size_t> labels,
             std::span<const std::size_t> ks) {
        const auto n = static_cast<double>(labels.size());
        const std::vector<double> e = topk_errors(probabilities, labels, ks);
        loss += batch_loss * n;
        top1 += e[0] * n;
        if (ks.size() > 1) {
            top5 += e[1] * n;
        }
        count += labels.size();
    }

    EpochRecord record(std::size_t epoch, const char* phase, bool has_top5, double lr) const {
        const auto n = static_cast<double>(count);
        EpochRecord r;
        r.epoch = epoch;
        r.phase = phase;
        r.loss = loss / n;
        r.top1 = top1 / n;
        if (has_top5) {
            r.top5 = top5 / n;
        }
        r.learning_rate = lr;
        return r;
    }
};

// Shared epoch/schedule loop. train_batch(ids, epoch, tally) performs one SGD
// step at the current rate; validate(ids) returns the LR-channel probabilities.
template <typename TrainBatch, typename Validate>
FinetuneResult finetune_loop(const PairSet& pairs, std::size_t classes, const FinetuneConfig& config,
                             const RandomState& rng, TrainBatch&& train_batch, Validate&& validate) {
    config.validate();
    if (pairs.class_count != classes) {
        throw ConfigError("finetune: dataset has " + std::to_string(pairs.class_count) +
                          " classes but the network outputs " + std::to_string(classes));
    }
    const IndexSplit split = validation_split(pairs.size());
    const std::vector<std::size_t> ks = metric_ks(classes);
    const bool has_top5 = ks.size() > 1;
    const RandomState shuffle = rng.substream("shuffle");
    PlateauState schedule;
    schedule.learning_rate = config.learning_rate;
    FinetuneResult result;
    const std::size_t n = split.train.size();
    for (std::size_t epoch = 0; epoch < config.max_epochs && !schedule.stop && n > 0; ++epoch) {
        const double lr = schedule.learning_rate;
        RandomState s = shuffle.substream(static_cast<std::uint64_t>(epoch));
        const std::vector<std::size_t> order = s.permutation(n);
        EpochTally train;
        for (std::size_t first = 0; first < n; first += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - first);
            const std::vector<std::size_t> ids = take(split.train, order, first, count);
            train_batch(ids, epoch, lr, train);
        }
        result.curves.push_back(train.record(epoch + 1, "train", has_top5, lr));
        double schedule_error = result.curves.back().top1;
        if (!split.validation.empty()) {
            const Tensor probs = validate(split.validation);
            const std::vector<std::size_t> labels = labels_of(pairs, split.validation);
            EpochTally val;
            val.add(cross_entropy_loss(probs, labels).value, probs, labels, ks);
            result.curves.push_back(val.record(epoch + 1, "validation", has_top5, lr));
            schedule_error = result.curves.back().top1;
        }
        plateau_step(schedule, config.plateau, schedule_error);
        ++result.epochs_run;
    }
    result.final_learning_rate = schedule.learning_rate;
    return result;
}

} // namespace

FinetuneResult finetune(SingleNetwork& net, const PairSet& pairs, const FinetuneConfig& config,
                        const RandomState& rng) {
    require_pairs(pairs, net.config, "finetune");
    if (!net.head) {
        throw ConfigError("finetune: classifier head not attached");
    }
    const RandomState augment = rng.substream("augment");
    const RandomState dropout_stream = rng.substream("dropout");
    const std::vector<std::size_t> ks = metric_ks(net.config.classes);
    std::size_t current_epoch = static_cast<std::size_t>(-1);
    RandomState drop(0);
    return finetune_loop(
        pairs, net.config.classes, config, rng,
        [&](const std::vector<std::size_t>& ids, std::size_t epoch, double lr, EpochTally& tally) {
            if (epoch != current_epoch) {
                current_epoch = epoch;
                drop = dropout_stream.substream(static_cast<std::uint64_t>(epoch));
            }
            const Tensor input = noisy_batch(pairs.lr, ids, config.noise_sigma, augment.substream(epoch));
            const std::vector<std::size_t> labels = labels_of(pairs, ids);
            SingleNetwork grads = net.zeros_like();
            Tensor probs;
            const double loss = classify_batch_gradient(net, input, labels, config.dropout_rate,
                                                        config.dropout_rate > 0.0 ? &drop : nullptr, grads, &probs);
            apply_sgd(net, grads, lr);
            tally.add(loss, probs, labels, ks);
        },
        [&](const std::vector<std::size_t>& ids) { return predict(net, gather_rows(pairs.lr, ids)); });
}

FinetuneResult finetune(DualNetwork& net, const PairSet& pairs, const FinetuneConfig& config,
                        const RandomState& rng) {
    require_pairs(pairs, net.config, "finetune");
    if (!net.head[0] || !net.head[1]) {
        throw ConfigError("finetune: classifier heads not attached");
    }
    const RandomState augment = rng.substream("augment");
    const RandomState augment_hr = rng.substream("augment-hr");
    const RandomState dropout_stream = rng.substream("dropout");
    const RandomState dropout_hr_stream = rng.substream("dropout-hr");
    const std::vector<std::size_t> ks = metric_ks(net.config.classes);
    std::size_t current_epoch = static_cast<std::size_t>(-1);
    RandomState drop(0);
    RandomState drop_hr(0);
    return finetune_loop(
        pairs, net.config.classes, config, rng,
        [&](const std::vector<std::size_t>& ids, std::size_t epoch, double lr, EpochTally& tally) {
            if (epoch != current_epoch) {
                current_epoch = epoch;
                drop = dropout_stream.substream(static_cast<std::uint64_t>(epoch));
                drop_hr = dropout_hr_stream.substream(static_cast<std::uint64_t>(epoch));
            }
            const Tensor lr_input = noisy_batch(pairs.lr, ids, config.noise_sigma, augment.substream(epoch));
            const Tensor hr_input = noisy_batch(pairs.hr, ids, config.noise_sigma, augment_hr.substream(epoch));
            const std::vector<std::size_t> labels = labels_of(pairs, ids);
            DualNetwork grads = net.zeros_like();
            Tensor probs;
            const bool drop_on = config.dropout_rate > 0.0;
            const double loss =
                classify_batch_gradient(net, lr_input, hr_input, labels, config.dropout_rate,
                                        drop_on ? &drop : nullptr, drop_on ? &drop_hr : nullptr, grads, &probs);
            apply_sgd(net, grads, lr);
            // Train metrics follow the LR channel, the one kept at test time;
            // the loss column is the summed two-channel objective.
            tally.add(loss, probs, labels, ks);
        },
        [&](const std::vector<std::size_t>& ids) {
            return predict_view(net.view(Channel::lr), gather_rows(pairs.lr, ids));
        });
}

// ----------------------------- evaluation -----------------------------

Tensor predict(const SingleNetwork& net, const Tensor& inputs) {
    if (!net.head) {
        throw ConfigError("predict: network has no classifier head");
    }
    return predict_view(net.view(), inputs);
}

std::vector<double> topk_errors(const Tensor& probabilities, std::span<const std::size_t> labels,
                                std::span<const std::size_t> ks) {
    if (probabilities.rank() != 2) {
        throw DimensionError("rank", 2, probabilities.rank(), "topk_errors");
    }
    const std::size_t n = probabilities.extent(0);
    const std::size_t classes = probabilities.extent(1);
    if (labels.size() != n) {
        throw DimensionError("batch", n, labels.size(), "topk_errors");
    }
    for (std::size_t k : ks) {
        if (k == 0 || k > classes) {
            throw ParameterError("top-k: k = " + std::to_string(k) + " outside 1.." + std::to_string(classes));
        }
    }
    std::vector<std::size_t> misses(ks.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = labels[i];
        if (y >= classes) {
            throw ParameterError("top-k: label " + std::to_string(y) + " out of range");
        }
        const double* p = probabilities.data() + i * classes;
        // Classes ranked ahead of the true one: higher probability, or equal
        // probability and lower index.
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < classes; ++j) {
            if (p[j] > p[y] || (p[j] == p[y] && j < y)) {
                ++ahead;
            }
        }
        for (std::size_t q = 0; q < ks.size(); ++q) {
            if (ahead >= ks[q]) {
                ++misses[q];
            }
        }
    }
    std::vector<double> out(ks.size(), 0.0);
    for (std::size_t q = 0; q < ks.size(); ++q) {
        out[q] = n == 0 ? 0.0 : static_cast<double>(misses[q]) / static_cast<double>(n);
    }
    return out;
}

std::vector<double> evaluate_topk(const SingleNetwork& net, const Tensor& inputs,
                                  std::span<const std::size_t> labels, std::span<const std::size_t> ks) {
    for (std::size_t k : ks) {
        if (k == 0 || k > net.config.classes) {
            throw ParameterError("top-k: k = " + std::to_string(k) + " outside 1.." +
                                 std::to_string(net.config.classes));
        }
    }
    return topk_errors(predict(net, inputs), labels, ks);
}

// ----------------------------- coupled-ratio search -----------------------------

GridSearchResult grid_search_coupled_ratios(const std::function<double(const CouplingRatios&)>& train_eval,
                                            const std::vector<double>& grid) {
    if (grid.empty()) {
        throw ParameterError("grid search needs at least one grid value");
    }
    std::array<std::size_t, 3> position{0, 0, 0};
    auto ratios_at = [&](const std::array<std::size_t, 3>& pos) {
        return CouplingRatios{grid[pos[0]], grid[pos[1]], grid[pos[2]]};
    };
    GridSearchResult result;
    result.best = ratios_at(position);
    result.best_error = train_eval(result.best);
    result.history.push_back({result.best, result.best_error, true});
    for (std::size_t cursor = 3; cursor-- > 0;) {
        while (position[cursor] + 1 < grid.size()) {
            std::array<std::size_t, 3> proposal = position;
            ++proposal[cursor];
            const CouplingRatios r = ratios_at(proposal);
            const double error = train_eval(r);
            const bool accepted = error < result.best_error;
            result.history.push_back({r, error, accepted});
            if (!accepted) {
                break;
            }
            position = proposal;
            result.best = r;
            result.best_error = error;
        }
    }
    return result;
}

} // namespace vlrr
