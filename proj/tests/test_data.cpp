#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "support.hpp"
#include "vlrr/data.hpp"

using namespace vlrr;
using testing::random_tensor;

namespace {

// Histogram of intensities stretched to the image's own [min, max].
std::vector<double> histogram(const ImageDataset& ds, std::size_t i, std::size_t bins) {
    std::vector<double> h(bins, 0.0);
    const Tensor img = ds.image(i);
    const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
    const double span = std::max(*hi - *lo, 1e-12);
    for (double v : img.values()) {
        const double u = (v - *lo) / span;
        h[std::min(bins - 1, static_cast<std::size_t>(u * static_cast<double>(bins)))] += 1.0;
    }
    for (double& v : h) v /= static_cast<double>(img.size());
    return h;
}

// Nearest class centroid of normalised pixel histograms.
double histogram_baseline_accuracy(const ImageDataset& train, const ImageDataset& test) {
    const std::size_t bins = 8;
    std::vector<std::vector<double>> centroid(train.class_count, std::vector<double>(bins, 0.0));
    std::vector<double> counts(train.class_count, 0.0);
    for (std::size_t i = 0; i < train.count(); ++i) {
        const auto h = histogram(train, i, bins);
        for (std::size_t b = 0; b < bins; ++b) centroid[train.labels[i]][b] += h[b];
        counts[train.labels[i]] += 1.0;
    }
    for (std::size_t k = 0; k < centroid.size(); ++k)
        for (double& v : centroid[k]) v /= counts[k];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.count(); ++i) {
        const auto h = histogram(test, i, bins);
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t k = 0; k < centroid.size(); ++k) {
            double d = 0.0;
            for (std::size_t b = 0; b < bins; ++b) d += (h[b] - centroid[k][b]) * (h[b] - centroid[k][b]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        hits += best == test.labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(test.count());
}

std::size_t changed_pixels(const Tensor& a, const Tensor& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i] ? 1 : 0;
    return n;
}

} // namespace

TEST_CASE("area downsampling and nearest-neighbour upscaling") {
    const Tensor img({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(downsample_area(img, 2) == Tensor({1, 1, 2}, std::vector<double>{3.5, 5.5}));
    const Tensor up = upscale_nn(Tensor({1, 1, 2}, std::vector<double>{1, 2}), 2);
    CHECK(up == Tensor({1, 2, 4}, std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
    CHECK_THROWS_AS(downsample_area(Tensor({1, 6, 6}), 4), DimensionError);
    CHECK_THROWS_AS(downsample_area(Tensor({6, 6}), 2), DimensionError);
}

TEST_CASE("downsample of an upscale is the identity, bit for bit") {
    RandomState rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t s = 1 + rng.below(5);
        const Tensor img = random_tensor({1 + rng.below(2), 1 + rng.below(8), 1 + rng.below(8)}, rng);
        CHECK(bit_equal(downsample_area(upscale_nn(img, s), s), img));
    }
}

TEST_CASE("normalisation round trip") {
    RandomState rng(32);
    const Tensor img = random_tensor({1, 8, 8}, rng);
    const Normalized n = normalize(img);
    double mean = 0.0, sq = 0.0;
    for (double v : n.image.values()) mean += v;
    mean /= 64.0;
    for (double v : n.image.values()) sq += (v - mean) * (v - mean);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(std::sqrt(sq / 64.0) - 1.0) < 1e-6);
    CHECK(max_abs_difference(denormalize(n.image, n.mean, n.scale), img) < 1e-12);
    // Constant images do not divide by zero.
    CHECK(normalize(Tensor({1, 4, 4}, 0.3)).image.all_finite());
}

TEST_CASE("LR/HR pair construction") {
    RandomState rng(33);
    Tensor hr({1, 8, 8});
    for (double& v : hr.values()) v = rng.uniform();
    DegradationSpec spec;
    spec.scale = 4;
    const LrHrPair p = make_lr_pair(hr, spec);
    const Tensor raw_lr = upscale_nn(downsample_area(hr, 4), 4);
    CHECK(max_abs_difference(denormalize(p.lr, p.mean, p.scale), raw_lr) < 1e-12);
    CHECK(max_abs_difference(denormalize(p.hr, p.mean, p.scale), hr) < 1e-12);
    // LR statistics normalise both images.
    const Normalized n = normalize(raw_lr);
    CHECK(p.mean == n.mean);
    CHECK(p.scale == n.scale);
}

TEST_CASE("salt-and-pepper corrupts exactly round(f*HW) distinct pixels") {
    CHECK(salt_pepper_count(1024, 0.15) == 154);
    CHECK(salt_pepper_count(100, 0.0) == 0);
    CHECK(salt_pepper_count(100, 1.0) == 100);
    CHECK(salt_pepper_count(10, 0.25) == 3);
    RandomState rng(34);
    const Tensor grey({1, 32, 32}, 0.5);
    for (int trial = 0; trial < 20; ++trial) {
        RandomState r = rng.substream(static_cast<std::uint64_t>(trial));
        const Tensor c = corrupt_salt_pepper(grey, 0.15, r);
        CHECK(changed_pixels(c, grey) == 154);
        std::size_t salt = 0;
        for (double v : c.values()) {
            CHECK((v == 0.5 || v == 0.0 || v == 1.0));
            salt += v == 1.0 ? 1 : 0;
        }
        CHECK(salt > 30);
        CHECK(salt < 124);
    }
    RandomState r(1);
    CHECK(changed_pixels(corrupt_salt_pepper(grey, 1.0, r), grey) == 1024);
    CHECK_THROWS_AS(corrupt_salt_pepper(grey, 1.5, r), ParameterError);
}

TEST_CASE("gaussian noise statistics") {
    RandomState rng(35);
    const Tensor zero({1, 100, 100});
    const Tensor n = add_gaussian_noise(zero, 0.05, rng);
    double s = 0.0, sq = 0.0;
    for (double v : n.values()) {
        s += v;
        sq += v * v;
    }
    CHECK(std::abs(s / 1e4) < 0.002);
    CHECK(std::abs(std::sqrt(sq / 1e4) - 0.05) < 0.002);
}

TEST_CASE("synthetic data is deterministic, balanced and regenerable by range") {
    const SynthSplit a = synth_split(8, 80, 16, 32, RandomState(3));
    const SynthSplit b = synth_split(8, 80, 16, 32, RandomState(3));
    CHECK(bit_equal(a.train.images, b.train.images));
    CHECK(a.train.labels == b.train.labels);
    CHECK_FALSE(bit_equal(a.train.images, synth_split(8, 80, 16, 32, RandomState(4)).train.images));
    std::vector<std::size_t> per(8, 0);
    for (auto l : a.train.labels) ++per[l];
    CHECK(std::all_of(per.begin(), per.end(), [](std::size_t c) { return c == 10; }));
    const ImageDataset tail = synth_images(8, 80, 16, 32, RandomState(3));
    CHECK(bit_equal(tail.images, a.test.images));
    a.train.validate();
    for (double v : a.train.images.values()) {
        CHECK(std::round(v * 255.0) / 255.0 == v);
    }
    CHECK_THROWS_AS(synth_images(17, 0, 1, 32, RandomState(0)), ParameterError);
}

TEST_CASE("synthetic classes carry learnable structure") {
    const SynthSplit s = synth_split(8, 400, 200, 32, RandomState(5));
    const double acc = histogram_baseline_accuracy(s.train, s.test);
    MESSAGE("histogram nearest-centroid accuracy " << acc);
    CHECK(acc >= 3.0 / 8.0);
}

TEST_CASE("dataset files round trip bit-exactly") {
    const ImageDataset ds = synth_dataset(4, 3, 16, RandomState(6));
    const auto bytes = encode_dataset(ds);
    const ImageDataset back = decode_dataset(bytes);
    CHECK(bit_equal(back.images, ds.images));
    CHECK(back.labels == ds.labels);
    CHECK(back.class_count == ds.class_count);
    CHECK(encode_dataset(back) == bytes);

    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
        CAPTURE(cut);
        CHECK_THROWS_AS(decode_dataset(std::span(bytes).first(cut)), FormatError);
    }
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_dataset(bad), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_dataset(extra), FormatError);
    auto bad_label = bytes;
    bad_label[bad_label.size() - 2] = 9;
    CHECK_THROWS_AS(decode_dataset(bad_label), FormatError);
}

TEST_CASE("pair sets apply corruption to the HR source only when asked") {
    const ImageDataset ds = synth_dataset(2, 4, 16, RandomState(7));
    DegradationSpec clean;
    DegradationSpec dirty;
    dirty.sp_fraction = 0.15;
    const PairSet a = make_pair_set(ds, clean, RandomState(1));
    const PairSet b = make_pair_set(ds, dirty, RandomState(1));
    const PairSet c = make_pair_set(ds, dirty, RandomState(1));
    CHECK(bit_equal(b.hr, c.hr));
    CHECK_FALSE(bit_equal(a.hr, b.hr));
    CHECK(bit_equal(make_lr_inputs(ds, 4), a.lr));
    CHECK(a.labels == ds.labels);
    const std::vector<std::size_t> idx{3, 1};
    const PairSet sub = a.subset(idx);
    CHECK(sub.labels == std::vector<std::size_t>{ds.labels[3], ds.labels[1]});
    CHECK(bit_equal(sub.lr, gather_rows(a.lr, idx)));
}

TEST_CASE("validation split partitions the indices") {
    for (std::size_t n : {std::size_t{2}, std::size_t{5}, std::size_t{40}, std::size_t{400}}) {
        const IndexSplit s = validation_split(n);
        std::set<std::size_t> all(s.train.begin(), s.train.end());
        all.insert(s.validation.begin(), s.validation.end());
        CHECK(all.size() == n);
        CHECK(s.train.size() + s.validation.size() == n);
        CHECK_FALSE(s.validation.empty());
        CHECK_FALSE(s.train.empty());
    }
    const IndexSplit big = validation_split(10000);
    CHECK(std::abs(static_cast<double>(big.validation.size()) / 10000.0 - 0.1) < 0.02);
    CHECK(validation_split(1).validation.empty());
}
