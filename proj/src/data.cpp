#include "vlrr/data.hpp"

#include "bytes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

namespace vlrr {

namespace {

void require_image(const Tensor& image, const std::string& where) {
    if (image.rank() != 3) {
        throw DimensionError("rank", 3, image.rank(), where);
    }
}

constexpr std::array<std::uint8_t, 4> dataset_magic{'V', 'L', 'R', 'D'};
constexpr std::uint8_t dataset_version = 1;

// ---- glyph rendering ----

struct Point {
    double x;
    double y;
};

double segment_distance(Point p, Point a, Point b) {
    const double vx = b.x - a.x;
    const double vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = p.x - (a.x + t * vx);
    const double dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

// Coverage of a stroke of width `thickness` at distance d from its centre line.
double stroke(double d, double thickness) { return std::clamp(thickness / 2.0 - d + 0.5, 0.0, 1.0); }

struct GlyphParams {
    double cx, cy;     // centre
    double radius;     // extent
    double thickness;  // stroke width
    double period;     // gratings
    double phase;      // gratings
    double angle;      // small rotation jitter
    double fg, bg;     // contrast
};

// Shape coverage in [0, 1] of family `family` at pixel centre p.
double glyph_coverage(std::size_t family, const GlyphParams& g, Point p) {
    const double c = std::cos(g.angle);
    const double s = std::sin(g.angle);
    // Rotate into the glyph frame.
    const double rx = c * (p.x - g.cx) + s * (p.y - g.cy);
    const double ry = -s * (p.x - g.cx) + c * (p.y - g.cy);
    const Point q{rx, ry};
    const double r = g.radius;
    const double t = g.thickness;
    switch (family) {
    case 0: // horizontal bar
        return stroke(segment_distance(q, {-r, 0}, {r, 0}), t);
    case 1: // vertical bar
        return stroke(segment_distance(q, {0, -r}, {0, r}), t);
    case 2: // plus
        return stroke(std::min(segment_distance(q, {-r, 0}, {r, 0}), segment_distance(q, {0, -r}, {0, r})), t);
    case 3: // ring
        return stroke(std::abs(std::hypot(q.x, q.y) - r), t);
    case 4: // filled disc
        return std::clamp(r * 0.6 - std::hypot(q.x, q.y) + 0.5, 0.0, 1.0);
    case 5: { // diagonal cross
        const double k = r * std::numbers::sqrt2 / 2.0;
        return stroke(std::min(segment_distance(q, {-k, -k}, {k, k}), segment_distance(q, {-k, k}, {k, -k})), t);
    }
    case 6: // horizontal grating
        return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * p.y / g.period + g.phase);
    case 7: // square outline
        return stroke(std::abs(std::max(std::abs(q.x), std::abs(q.y)) - r * 0.8), t);
    case 8: { // diagonal bar
        const double k = r * std::numbers::sqrt2 / 2.0;
        return stroke(segment_distance(q, {-k, -k}, {k, k}), t);
    }
    case 9: { // anti-diagonal bar
        const double k = r * std::numbers::sqrt2 / 2.0;
        return stroke(segment_distance(q, {-k, k}, {k, -k}), t);
    }
    case 10: // corner opening up-right
        return stroke(std::min(segment_distance(q, {-r, -r}, {-r, r}), segment_distance(q, {-r, r}, {r, r})), t);
    case 11: // corner opening down-left
        return stroke(std::min(segment_distance(q, {-r, -r}, {r, -r}), segment_distance(q, {r, -r}, {r, r})), t);
    case 12: // vertical grating
        return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * p.x / g.period + g.phase);
    case 13: { // checkerboard
        const double a = std::sin(2.0 * std::numbers::pi * p.x / g.period + g.phase);
        const double b = std::sin(2.0 * std::numbers::pi * p.y / g.period + g.phase);
        return a * b > 0.0 ? 1.0 : 0.0;
    }
    case 14: { // triangle outline
        const Point a{0, -r}, b{r * 0.87, r * 0.5}, d{-r * 0.87, r * 0.5};
        return stroke(std::min({segment_distance(q, a, b), segment_distance(q, b, d), segment_distance(q, d, a)}), t);
    }
    default: { // two dots
        const double d1 = std::hypot(q.x - r * 0.6, q.y);
        const double d2 = std::hypot(q.x + r * 0.6, q.y);
        return std::clamp(t * 0.8 - std::min(d1, d2) + 0.5, 0.0, 1.0);
    }
    }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

} // namespace

// ----------------------------- ImageDataset -----------------------------

Tensor ImageDataset::image(std::size_t i) const {
    Tensor one = slice_rows(images, i, 1);
    return one.reshaped({images.extent(1), images.extent(2), images.extent(3)});
}

void ImageDataset::validate() const {
    if (images.rank() != 4) {
        throw FormatError("dataset images must be (count, 1, H, W), got " + shape_string(images.shape()));
    }
    if (images.extent(1) != 1) {
        throw FormatError("dataset images must have one channel, got " + std::to_string(images.extent(1)));
    }
    if (images.extent(0) != labels.size()) {
        throw FormatError("dataset has " + std::to_string(images.extent(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
    }
    if (class_count == 0) {
        throw FormatError("dataset class_count must be positive");
    }
    for (std::size_t label : labels) {
        if (label >= class_count) {
            throw FormatError("label " + std::to_string(label) + " >= class_count " + std::to_string(class_count));
        }
    }
    for (double v : images.values()) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw FormatError("pixel value outside [0, 1]");
        }
    }
}

ImageDataset ImageDataset::subset(std::span<const std::size_t> indices) const {
    ImageDataset out;
    out.images = gather_rows(images, indices);
    out.class_count = class_count;
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        out.labels.push_back(labels.at(i));
    }
    return out;
}

void DegradationSpec::validate(std::size_t height, std::size_t width) const {
    if (scale < 1) {
        throw ParameterError("degradation scale must be >= 1");
    }
    if (height % scale != 0 || width % scale != 0) {
        throw DimensionError("height/width divisible by scale", scale, height % scale != 0 ? height : width,
                             "DegradationSpec");
    }
    if (!(gaussian_sigma >= 0.0)) {
        throw ParameterError("gaussian_sigma must be nonnegative");
    }
    if (!(sp_fraction >= 0.0 && sp_fraction <= 1.0)) {
        throw ParameterError("sp_fraction must lie in [0, 1]");
    }
}

// ----------------------------- resampling -----------------------------

Tensor downsample_area(const Tensor& image, std::size_t s) {
    require_image(image, "downsample_area");
    if (s == 0) {
        throw ParameterError("downsample_area: factor must be positive");
    }
    const std::size_t c = image.extent(0);
    const std::size_t h = image.extent(1);
    const std::size_t w = image.extent(2);
    if (h % s != 0) {
        throw DimensionError("height", (h / s + 1) * s, h, "downsample_area");
    }
    if (w % s != 0) {
        throw DimensionError("width", (w / s + 1) * s, w, "downsample_area");
    }
    const std::size_t oh = h / s;
    const std::size_t ow = w / s;
    const auto n = static_cast<double>(s * s);
    Tensor out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                // Mean as first value plus mean deviation from it, so a constant
                // block reproduces its value exactly for every s.
                const double first = image[(ch * h + y * s) * w + x * s];
                double acc = 0.0;
                for (std::size_t dy = 0; dy < s; ++dy) {
                    for (std::size_t dx = 0; dx < s; ++dx) {
                        acc += image[(ch * h + y * s + dy) * w + x * s + dx] - first;
                    }
                }
                out[(ch * oh + y) * ow + x] = first + acc / n;
            }
        }
    }
    return out;
}

Tensor upscale_nn(const Tensor& image, std::size_t s) {
    require_image(image, "upscale_nn");
    if (s == 0) {
        throw ParameterError("upscale_nn: factor must be positive");
    }
    const std::size_t c = image.extent(0);
    const std::size_t h = image.extent(1);
    const std::size_t w = image.extent(2);
    Tensor out({c, h * s, w * s});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h * s; ++y) {
            for (std::size_t x = 0; x < w * s; ++x) {
                out[(ch * h * s + y) * w * s + x] = image[(ch * h + y / s) * w + x / s];
            }
        }
    }
    return out;
}

Normalized normalize(const Tensor& image) {
    const std::size_t n = image.size();
    Normalized r{Tensor(image.shape()), 0.0, 1.0};
    if (n == 0) {
        return r;
    }
    double sum = 0.0;
    for (double v : image.values()) {
        sum += v;
    }
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (double v : image.values()) {
        sq += (v - mean) * (v - mean);
    }
    r.mean = mean;
    r.scale = std::sqrt(sq / static_cast<double>(n)) + 1e-8;
    r.image = apply_normalization(image, r.mean, r.scale);
    return r;
}

Tensor apply_normalization(const Tensor& image, double mean, double scale) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
        out[i] = (image[i] - mean) / scale;
    }
    return out;
}

Tensor denormalize(const Tensor& image, double mean, double scale) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
        out[i] = image[i] * scale + mean;
    }
    return out;
}

LrHrPair make_lr_pair(const Tensor& hr_image, const DegradationSpec& spec) {
    require_image(hr_image, "make_lr_pair");
    spec.validate(hr_image.extent(1), hr_image.extent(2));
    const Tensor lr_raw = upscale_nn(downsample_area(hr_image, spec.scale), spec.scale);
    Normalized n = normalize(lr_raw);
    LrHrPair pair;
    pair.hr = apply_normalization(hr_image, n.mean, n.scale);
    pair.lr = std::move(n.image);
    pair.mean = n.mean;
    pair.scale = n.scale;
    return pair;
}

Tensor add_gaussian_noise(const Tensor& image, double sigma, RandomState& rng) {
    if (!(sigma >= 0.0)) {
        throw ParameterError("add_gaussian_noise: sigma must be nonnegative");
    }
    Tensor out = image;
    if (sigma == 0.0) {
        return out;
    }
    for (double& v : out.values()) {
        v += sigma * rng.normal();
    }
    return out;
}

std::size_t salt_pepper_count(std::size_t pixel_count, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ParameterError("salt-and-pepper fraction must lie in [0, 1], got " + std::to_string(fraction));
    }
    return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pixel_count)));
}

Tensor corrupt_salt_pepper(const Tensor& image, double fraction, RandomState& rng) {
    const std::size_t n = image.size();
    const std::size_t k = salt_pepper_count(n, fraction);
    Tensor out = image;
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
        out[idx[i]] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    return out;
}

// ----------------------------- dataset files -----------------------------

std::vector<std::uint8_t> encode_dataset(const ImageDataset& dataset) {
    dataset.validate();
    const std::size_t count = dataset.count();
    const std::size_t h = dataset.height();
    const std::size_t w = dataset.width();
    if (count > UINT32_MAX || h > UINT16_MAX || w > UINT16_MAX || dataset.class_count > UINT16_MAX) {
        throw FormatError("dataset too large for the VLRD format");
    }
    std::vector<std::uint8_t> out(dataset_magic.begin(), dataset_magic.end());
    out.reserve(16 + count * h * w + 2 * count);
    detail::put_le<std::uint8_t>(out, dataset_version);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(count));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(h));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(w));
    detail::put_le<std::uint8_t>(out, 1);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dataset.class_count));
    for (double v : dataset.images.values()) {
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    for (std::size_t label : dataset.labels) {
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(label));
    }
    return out;
}

ImageDataset decode_dataset(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes, "VLRD");
    const auto magic = in.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), dataset_magic.begin())) {
        throw FormatError("not a VLRD dataset (bad magic)");
    }
    const auto version = in.get<std::uint8_t>("version");
    if (version != dataset_version) {
        throw FormatError("unsupported VLRD version " + std::to_string(version));
    }
    const std::size_t count = in.get<std::uint32_t>("count");
    const std::size_t h = in.get<std::uint16_t>("height");
    const std::size_t w = in.get<std::uint16_t>("width");
    const std::size_t channels = in.get<std::uint8_t>("channels");
    const std::size_t classes = in.get<std::uint16_t>("class_count");
    if (channels != 1) {
        throw FormatError("VLRD channels must be 1, got " + std::to_string(channels));
    }
    const std::size_t payload = count * h * w + 2 * count;
    if (in.remaining() != payload) {
        throw FormatError("VLRD payload size " + std::to_string(in.remaining()) + " does not match header (" +
                          std::to_string(payload) + " bytes expected)");
    }
    ImageDataset ds;
    ds.class_count = classes;
    ds.images = Tensor({count, 1, h, w});
    const auto pixels = in.take(count * h * w, "pixels");
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        ds.images[i] = static_cast<double>(pixels[i]) / 255.0;
    }
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        ds.labels[i] = in.get<std::uint16_t>("labels");
    }
    ds.validate();
    return ds;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open " + path.string());
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ConfigError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("write failed for " + path.string());
    }
}

void save_dataset(const ImageDataset& dataset, const std::filesystem::path& path) {
    write_file(path, encode_dataset(dataset));
}

ImageDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

// ----------------------------- synthetic data -----------------------------

ImageDataset synth_images(std::size_t classes, std::size_t first_index, std::size_t count, std::size_t side,
                          const RandomState& rng) {
    if (classes == 0 || classes > max_synth_classes) {
        throw ParameterError("synthetic dataset supports 1.." + std::to_string(max_synth_classes) +
                             " classes, got " + std::to_string(classes));
    }
    if (side < 8) {
        throw ParameterError("synthetic images need side >= 8");
    }
    ImageDataset ds;
    ds.class_count = classes;
    ds.images = Tensor({count, 1, side, side});
    ds.labels.resize(count);
    const double sd = static_cast<double>(side);
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t index = first_index + n;
        const std::size_t family = index % classes;
        RandomState r = rng.substream("synth").substream(index);
        GlyphParams g{};
        g.cx = sd / 2.0 + (r.uniform() - 0.5) * 0.4 * sd;
        g.cy = sd / 2.0 + (r.uniform() - 0.5) * 0.4 * sd;
        g.radius = sd * (0.24 + 0.06 * r.uniform());
        g.thickness = sd * (0.09 + 0.03 * r.uniform());
        g.period = sd * (0.22 + 0.15 * r.uniform());
        g.phase = 2.0 * std::numbers::pi * r.uniform();
        g.angle = (r.uniform() - 0.5) * 0.5;
        g.bg = 0.35 * r.uniform();
        g.fg = g.bg + 0.4 + 0.4 * r.uniform();
        if (family % 2 == 1) {
            std::swap(g.fg, g.bg);
        }
        // A short stray stroke shared by no class.
        const Point d0{r.uniform() * sd, r.uniform() * sd};
        const double da = 2.0 * std::numbers::pi * r.uniform();
        const double dl = sd * (0.1 + 0.2 * r.uniform());
        const Point d1{d0.x + dl * std::cos(da), d0.y + dl * std::sin(da)};
        const double dv = g.bg + (g.fg - g.bg) * (0.3 + 0.5 * r.uniform());
        double* px = ds.images.data() + n * side * side;
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t x = 0; x < side; ++x) {
                const Point p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
                const double cov = glyph_coverage(family, g, p);
                const double stray = stroke(segment_distance(p, d0, d1), 1.5);
                const double base = g.bg + (g.fg - g.bg) * cov;
                const double jitter = (r.uniform() - 0.5) * 0.1;
                px[y * side + x] = quantize(std::max(base, stray * dv) + jitter);
            }
        }
        ds.labels[n] = family;
    }
    return ds;
}

ImageDataset synth_dataset(std::size_t classes, std::size_t per_class, std::size_t side, const RandomState& rng) {
    return synth_images(classes, 0, classes * per_class, side, rng);
}

SynthSplit synth_split(std::size_t classes, std::size_t train_count, std::size_t test_count, std::size_t side,
                       const RandomState& rng) {
    return {synth_images(classes, 0, train_count, side, rng),
            synth_images(classes, train_count, test_count, side, rng)};
}

// ----------------------------- packed training data -----------------------------

PairSet PairSet::subset(std::span<const std::size_t> indices) const {
    PairSet out;
    out.lr = gather_rows(lr, indices);
    out.hr = gather_rows(hr, indices);
    out.class_count = class_count;
    for (std::size_t i : indices) {
        out.mean.push_back(mean.at(i));
        out.scale.push_back(scale.at(i));
        out.labels.push_back(labels.at(i));
    }
    return out;
}

PairSet make_pair_set(const ImageDataset& dataset, const DegradationSpec& spec, const RandomState& rng) {
    dataset.validate();
    spec.validate(dataset.height(), dataset.width());
    const std::size_t n = dataset.count();
    const std::size_t plane = dataset.height() * dataset.width();
    PairSet set;
    set.lr = Tensor(dataset.images.shape());
    set.hr = Tensor(dataset.images.shape());
    set.labels = dataset.labels;
    set.class_count = dataset.class_count;
    set.mean.resize(n);
    set.scale.resize(n);
    const RandomState corrupt_stream = rng.substream("corrupt");
    for (std::size_t i = 0; i < n; ++i) {
        Tensor hr = dataset.image(i);
        if (spec.sp_fraction > 0.0) {
            RandomState r = corrupt_stream.substream(i);
            hr = corrupt_salt_pepper(hr, spec.sp_fraction, r);
        }
        const LrHrPair pair = make_lr_pair(hr, spec);
        std::copy(pair.lr.values().begin(), pair.lr.values().end(), set.lr.data() + i * plane);
        std::copy(pair.hr.values().begin(), pair.hr.values().end(), set.hr.data() + i * plane);
        set.mean[i] = pair.mean;
        set.scale[i] = pair.scale;
    }
    return set;
}

Tensor make_lr_inputs(const ImageDataset& dataset, std::size_t scale) {
    DegradationSpec spec;
    spec.scale = scale;
    spec.gaussian_sigma = 0.0;
    return make_pair_set(dataset, spec, RandomState(0)).lr;
}

IndexSplit validation_split(std::size_t count) {
    IndexSplit split;
    for (std::size_t i = 0; i < count; ++i) {
        if (splitmix64(i ^ 0x5eedULL) % 10 == 0) {
            split.validation.push_back(i);
        } else {
            split.train.push_back(i);
        }
    }
    if (split.validation.empty() && split.train.size() >= 2) {
        split.validation.push_back(split.train.back());
        split.train.pop_back();
    }
    return split;
}

} // namespace vlrr
