#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlrr/checkpoint.hpp"
#include "vlrr/data.hpp"
#include "vlrr/models.hpp"
#include "vlrr/training.hpp"

namespace vlrr {

enum class ModelVariant { i, ii, iii, iv, v };

std::string variant_name(ModelVariant v); // "I" .. "V"
ModelVariant parse_variant(std::string_view text);
bool is_coupled(ModelVariant v); // III, IV, V

/// One end-to-end run. Plan files are `key = value` lines with `#` comments:
///
///   variant = IV                  # I, II, III, IV or V
///   seed = 7
///   data.train = train.vlrd
///   data.test = test.vlrd
///   out = runs/iv
///   degradation.scale = 4
///   degradation.sigma = 0.05      # augmentation noise
///   degradation.sp_fraction = 0   # salt-and-pepper on training images
///   network.n = 64,64,32
///   network.f = 5,3,1
///   network.m4 = 1024
///   network.f4 = 5
///   coupling.c = 0.5,0.75,0.75    # IV and V only
///   pretrain.loss = mse           # mse (II-IV) or huber (V)
///   pretrain.huber_c = 1.345
///   pretrain.lr = 0.01            # default 0.1 for II, 0.01 for III-V
///   pretrain.batch = 128
///   pretrain.epochs = 20
///   pretrain.mode = end_to_end    # or layerwise
///   finetune.lr = 0.1
///   finetune.batch = 128
///   finetune.epochs = 60
///   finetune.dropout = 0.5
///   finetune.patience = 5
///   finetune.min_delta = 0.001
///   finetune.factor = 10
///   finetune.floor = 1e-5
///
/// Class count and image size come from the training data at run time.
struct ExperimentPlan {
    ModelVariant variant = ModelVariant::i;
    std::uint64_t seed = 0;
    std::string train_path;
    std::string test_path;
    std::string out_dir;
    DegradationSpec degradation;
    NetworkConfig network;
    CouplingRatios coupling{0.0, 0.0, 0.0};
    PretrainConfig pretrain;
    FinetuneConfig finetune;

    // Variant/field consistency and value ranges; throws ConfigError.
    void validate() const;

    friend bool operator==(const ExperimentPlan& a, const ExperimentPlan& b);
};

// Unset variant-dependent fields (coupling, pre-training loss and rate) take
// the variant's defaults; explicit values that contradict the variant are
// rejected.
ExperimentPlan parse_plan(std::string_view text);
std::string serialize_plan(const ExperimentPlan& plan);
ExperimentPlan load_plan(const std::filesystem::path& path);

struct ExperimentOutcome {
    AnyNetwork network;         // dual for III-V, as trained (both heads)
    SingleNetwork classifier;   // what is evaluated: the network itself or its LR channel
    Curves curves;              // pre-training rows, then fine-tuning rows
    std::vector<std::size_t> ks;
    std::vector<double> test_errors; // one per ks entry, on clean LR test inputs
    double validation_top1 = 0.0;    // last validation row
};

// Runs the variant's recipe in memory. Randomness: seed -> "data" (corruption),
// "model" (initial weights), "pretrain", "finetune".
ExperimentOutcome run_experiment(const ExperimentPlan& plan, const ImageDataset& train, const ImageDataset& test);

// Network shape actually used for a dataset: the plan's layers with m5, H, W
// taken from the data.
NetworkConfig effective_network(const ExperimentPlan& plan, const ImageDataset& train);

std::string format_report(const ExperimentPlan& plan, const ExperimentOutcome& outcome);

// ----------------------------- commands -----------------------------
//
// Each command writes human-readable progress to `log` and returns the
// process exit code. User/config errors surface as ConfigError or
// FormatError; the CLI maps those to exit code 2.

struct RunOptions {
    std::string plan_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
};

// Writes <out>/plan.txt, checkpoint.vlrc, curves.csv and report.txt.
int cmd_run(const RunOptions& options, std::ostream& log);

struct EvalOptions {
    std::string checkpoint_path;
    std::string data_path;
    std::size_t scale = 4;
    std::vector<std::size_t> ks{1, 5};
    std::optional<std::string> out_dir; // writes <out>/eval.txt when set
};

int cmd_eval(const EvalOptions& options, std::ostream& log);

struct PrepareOptions {
    std::string input_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::size_t scale = 4;
    double sp_fraction = 0.0;
};

// Writes <out>/hr.vlrd and pairs.vlrp, plus hr_sp.vlrd and pairs_sp.vlrp when
// sp_fraction > 0, and <out>/manifest.txt (also printed) with CRC-32 checksums.
int cmd_prepare(const PrepareOptions& options, std::ostream& log);

struct SearchOptions {
    RunOptions run;
    bool l1_oracle = false; // replace training with |c - (0.5, 0.75, 0.75)|_1
};

// Writes <out>/search.csv with columns k1,k2,k3,c1,c2,c3,top1_error, one
// row per trial in search order. Real trials score the final validation
// top-1 error of a full run.
int cmd_search(const SearchOptions& options, std::ostream& log);

struct SynthOptions {
    std::size_t classes = 8;
    std::size_t train_count = 400;
    std::size_t test_count = 100;
    std::size_t side = 32;
    std::uint64_t seed = 0;
    std::string out_dir;
};

// Writes <out>/train.vlrd and <out>/test.vlrd from the synthetic generator.
int cmd_synth(const SynthOptions& options, std::ostream& log);

// Quick gradient and invariant checks; prints one line per check.
int cmd_selfcheck(std::ostream& log);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

} // namespace vlrr
