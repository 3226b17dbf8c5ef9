#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vlrr/data.hpp"
#include "vlrr/losses.hpp"
#include "vlrr/models.hpp"
#include "vlrr/random.hpp"
#include "vlrr/tensor.hpp"

namespace vlrr {

// ----------------------------- curves -----------------------------

/// One CSV row: epoch, phase, loss, top1, top5, lr. NaN metrics are written
/// as empty cells.
struct EpochRecord {
    std::size_t epoch = 0;
    std::string phase;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double top1 = std::numeric_limits<double>::quiet_NaN();
    double top5 = std::numeric_limits<double>::quiet_NaN();
    double learning_rate = 0.0;
};

using Curves = std::vector<EpochRecord>;

std::string curves_csv(const Curves& curves);

// ----------------------------- objectives -----------------------------

struct ReconstructionObjective {
    ReconstructionLoss loss = ReconstructionLoss::mse;
    HuberParams huber;
};

LossResult reconstruction_loss(const ReconstructionObjective& objective, const Tensor& prediction,
                               const Tensor& target);

// Loss of one SR batch and its gradient, added into `grads` (same structure
// as the network, usually zeros_like()). Dual networks take the LR->HR and
// HR->HR channels' inputs separately and return the summed loss.
double sr_batch_gradient(const SingleNetwork& net, const Tensor& input, const Tensor& target,
                         const ReconstructionObjective& objective, SingleNetwork& grads);
double sr_batch_gradient(const DualNetwork& net, const Tensor& lr_input, const Tensor& hr_input,
                         const Tensor& target, const ReconstructionObjective& objective, DualNetwork& grads);

// Cross-entropy of one classification batch. Dropout is applied only when
// the rng pointers are set. Dual networks sum both channels' losses.
double classify_batch_gradient(const SingleNetwork& net, const Tensor& input, std::span<const std::size_t> labels,
                               double dropout_rate, RandomState* dropout_rng, SingleNetwork& grads,
                               Tensor* probabilities = nullptr);
double classify_batch_gradient(const DualNetwork& net, const Tensor& lr_input, const Tensor& hr_input,
                               std::span<const std::size_t> labels, double dropout_rate, RandomState* lr_rng,
                               RandomState* hr_rng, DualNetwork& grads, Tensor* lr_probabilities = nullptr);

// w <- w - lr * g over every parameter of the network.
void apply_sgd(SingleNetwork& net, const SingleNetwork& grads, double learning_rate);
void apply_sgd(DualNetwork& net, const DualNetwork& grads, double learning_rate);

// ----------------------------- pre-training -----------------------------

enum class PretrainMode { end_to_end, layerwise };

struct PretrainConfig {
    ReconstructionObjective objective;
    double learning_rate = 0.1; // 0.01 for coupled networks
    std::size_t batch_size = 128;
    std::size_t max_epochs = 20; // per stage in layerwise mode
    PretrainMode mode = PretrainMode::end_to_end;
    double noise_sigma = 0.05;

    void validate() const;
};

struct PretrainResult {
    std::vector<double> epoch_loss; // mean training loss per epoch (all stages in order)
    Curves curves;
};

/// Minimises the reconstruction loss over shuffled mini-batches. The single
/// network maps pairs.lr to pairs.hr; the dual network's HR channel also maps
/// pairs.hr to itself. Gaussian augmentation noise is added to the
/// (normalised) inputs. Randomness: rng sub-streams "shuffle" and "augment"
/// (plus "augment-hr" for the HR channel), keyed by epoch and sample index.
PretrainResult pretrain_sr(SingleNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                           const RandomState& rng);
PretrainResult pretrain_sr(DualNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                           const RandomState& rng);

/// Greedy layer-by-layer training: stage i trains conv_i with a temporary
/// single-output reconstruction layer on top while conv_1..conv_{i-1} stay
/// frozen. The stage-3 reconstruction layer is the network's own conv4; the
/// stage-1 and stage-2 ones are discarded. Temporary layers are initialised
/// from rng sub-streams "init-stage1"/"init-stage2".
PretrainResult pretrain_layerwise(SingleNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                                  const RandomState& rng);
PretrainResult pretrain_layerwise(DualNetwork& net, const PairSet& pairs, const PretrainConfig& config,
                                  const RandomState& rng);

// ----------------------------- plateau schedule -----------------------------

struct PlateauConfig {
    std::size_t patience = 5;
    double min_delta = 0.001;
    double factor = 10.0;
    double floor = 1e-5;

    void validate() const;
};

struct PlateauState {
    double learning_rate = 0.1;
    double best = std::numeric_limits<double>::infinity();
    std::size_t stale_epochs = 0;
    std::size_t divisions = 0;
    bool stop = false;
};

/// Feeds one epoch's validation error. After `patience` consecutive epochs
/// without an improvement of at least min_delta over the best error, the rate
/// is divided by `factor` and the counter restarts. Reaching the floor clamps
/// the rate there and sets `stop`.
double plateau_step(PlateauState& state, const PlateauConfig& config, double validation_error);

// ----------------------------- fine-tuning -----------------------------

struct FinetuneConfig {
    double learning_rate = 0.1;
    PlateauConfig plateau;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 60;
    double dropout_rate = 0.5;
    double noise_sigma = 0.05;

    void validate() const;
};

struct FinetuneResult {
    Curves curves;
    std::size_t epochs_run = 0;
    double final_learning_rate = 0.0;
};

/// Supervised training with cross-entropy on the validation_split() training
/// part of `pairs`; the held-out part drives the plateau schedule. The single
/// network reads pairs.lr; the dual network's HR channel reads pairs.hr and
/// the loss is the sum of both channels' cross-entropies. Randomness:
/// sub-streams "shuffle", "augment"/"augment-hr", "dropout"/"dropout-hr".
FinetuneResult finetune(SingleNetwork& net, const PairSet& pairs, const FinetuneConfig& config,
                        const RandomState& rng);
FinetuneResult finetune(DualNetwork& net, const PairSet& pairs, const FinetuneConfig& config,
                        const RandomState& rng);

// ----------------------------- evaluation -----------------------------

// Class probabilities in evaluation mode, computed in chunks.
Tensor predict(const SingleNetwork& net, const Tensor& inputs);

/// Fraction of samples whose label is not among the k most probable classes
/// (ties ranked by lower class index), one value per k.
std::vector<double> topk_errors(const Tensor& probabilities, std::span<const std::size_t> labels,
                                std::span<const std::size_t> ks);
std::vector<double> evaluate_topk(const SingleNetwork& net, const Tensor& inputs,
                                  std::span<const std::size_t> labels, std::span<const std::size_t> ks);

// ----------------------------- coupled-ratio search -----------------------------

struct GridTrial {
    CouplingRatios ratios{};
    double error = 0.0;
    bool accepted = false;
};

struct GridSearchResult {
    CouplingRatios best{};
    double best_error = 0.0;
    std::vector<GridTrial> history; // first entry is the starting point
};

inline const std::vector<double> default_ratio_grid{0.0, 0.25, 0.5, 0.75, 1.0};

/// Greedy deep-to-shallow search. Starts with every ratio at grid[0]; the
/// cursor begins at conv3 and proposes the next grid value for its layer. A
/// proposal is kept only if the error strictly decreases; otherwise it is
/// rolled back and the cursor moves one layer shallower. A layer whose ratio
/// reaches the end of the grid also passes the cursor on.
GridSearchResult grid_search_coupled_ratios(const std::function<double(const CouplingRatios&)>& train_eval,
                                            const std::vector<double>& grid = default_ratio_grid);

} // namespace vlrr
