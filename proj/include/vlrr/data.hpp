#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vlrr/random.hpp"
#include "vlrr/tensor.hpp"

namespace vlrr {

/// Grayscale images (count, 1, H, W) with values in [0, 1] and class labels.
struct ImageDataset {
    Tensor images;
    std::vector<std::size_t> labels;
    std::size_t class_count = 0;

    std::size_t count() const { return labels.size(); }
    std::size_t height() const { return images.extent(2); }
    std::size_t width() const { return images.extent(3); }

    // Copy of image i as (1, H, W).
    Tensor image(std::size_t i) const;

    // Throws FormatError on inconsistent shapes, labels or pixel range.
    void validate() const;

    ImageDataset subset(std::span<const std::size_t> indices) const;
};

/// How HR images are turned into LR ones: area downsampling by `scale`,
/// nearest-neighbour upscaling back, Gaussian augmentation noise during
/// training, and optional salt-and-pepper corruption of the HR source.
struct DegradationSpec {
    std::size_t scale = 4;
    double gaussian_sigma = 0.05;
    double sp_fraction = 0.0;

    void validate(std::size_t height, std::size_t width) const;
};

/// One normalised training pair. Both images are normalised with the LR
/// image's statistics: original = normalised * scale + mean.
struct LrHrPair {
    Tensor lr; // (1, H, W), NN-upscaled LR at HR size
    Tensor hr; // (1, H, W)
    double mean = 0.0;
    double scale = 1.0;
};

// Mean of each s x s block. Image is (C, H, W) with H, W divisible by s.
Tensor downsample_area(const Tensor& image, std::size_t s);

// Replicates every pixel into an s x s block.
Tensor upscale_nn(const Tensor& image, std::size_t s);

struct Normalized {
    Tensor image;
    double mean = 0.0;
    double scale = 1.0; // std + 1e-8
};

Normalized normalize(const Tensor& image);
Tensor apply_normalization(const Tensor& image, double mean, double scale);
Tensor denormalize(const Tensor& image, double mean, double scale);

LrHrPair make_lr_pair(const Tensor& hr_image, const DegradationSpec& spec);

Tensor add_gaussian_noise(const Tensor& image, double sigma, RandomState& rng);

// round(fraction * pixel_count), the number of pixels corrupt_salt_pepper changes.
std::size_t salt_pepper_count(std::size_t pixel_count, double fraction);

// Picks salt_pepper_count() distinct pixels without replacement and sets each
// to 0 or 1 with equal probability.
Tensor corrupt_salt_pepper(const Tensor& image, double fraction, RandomState& rng);

// ----------------------------- dataset files -----------------------------
//
// Little-endian layout:
//   "VLRD" | u8 version=1 | u32 count | u16 height | u16 width | u8 channels=1
//   | u16 class_count | count*H*W u8 pixels (value = byte / 255) | count u16 labels

std::vector<std::uint8_t> encode_dataset(const ImageDataset& dataset);
ImageDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const ImageDataset& dataset, const std::filesystem::path& path);
ImageDataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ----------------------------- synthetic data -----------------------------

constexpr std::size_t max_synth_classes = 16;

/// Parametric glyphs, one shape family per class (bars, crosses, rings,
/// discs, gratings, outlines, corners, ...) with randomised position, size,
/// thickness, phase, contrast and pixel noise, plus one stray stroke per
/// image. Odd-numbered families are drawn dark on a light background. Sample
/// i has label i % classes and is drawn
/// from its own sub-stream, so any index range can be regenerated alone.
/// Pixels are quantised to multiples of 1/255 so the dataset survives a file
/// round trip unchanged.
ImageDataset synth_images(std::size_t classes, std::size_t first_index, std::size_t count, std::size_t side,
                          const RandomState& rng);

// classes * per_class samples, indices [0, classes * per_class).
ImageDataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t side, const RandomState& rng);

struct SynthSplit {
    ImageDataset train; // indices [0, train_count)
    ImageDataset test;  // held out: indices [train_count, train_count + test_count)
};

SynthSplit synth_split(std::size_t classes, std::size_t train_count, std::size_t test_count, std::size_t side,
                       const RandomState& rng);

// ----------------------------- packed training data -----------------------------

/// All pairs of a dataset packed into batch tensors.
struct PairSet {
    Tensor lr; // (N, 1, H, W) normalised
    Tensor hr; // (N, 1, H, W) normalised with LR statistics
    std::vector<double> mean;
    std::vector<double> scale;
    std::vector<std::size_t> labels;
    std::size_t class_count = 0;

    std::size_t size() const { return labels.size(); }
    PairSet subset(std::span<const std::size_t> indices) const;
};

/// Degrades every image. When spec.sp_fraction > 0 the HR image is corrupted
/// first (sub-stream "corrupt", per image index), before downsampling.
PairSet make_pair_set(const ImageDataset& dataset, const DegradationSpec& spec, const RandomState& rng);

// LR inputs only (normalised), for test-time evaluation.
Tensor make_lr_inputs(const ImageDataset& dataset, std::size_t scale);

struct IndexSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

// Fixed 90/10 split by an index hash; independent of seeds. A set of two or
// more samples always keeps at least one for validation.
IndexSplit validation_split(std::size_t count);

} // namespace vlrr
