#include "vlrr/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bytes.hpp"

namespace vlrr {

namespace {

constexpr std::uint8_t archive_version = 1;

void put_name(std::vector<std::uint8_t>& out, const std::string& name) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
        throw FormatError("archive name too long: " + name.substr(0, 32) + "...");
    }
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
}

std::string get_name(detail::ByteReader& in) {
    const std::size_t len = in.get<std::uint16_t>("name length");
    const auto bytes = in.take(len, "name");
    return std::string(bytes.begin(), bytes.end());
}

// ---- network <-> archive ----

Tensor config_tensor(const NetworkConfig& c) {
    return Tensor({11}, {static_cast<double>(c.filters[0]), static_cast<double>(c.filters[1]),
                         static_cast<double>(c.filters[2]), static_cast<double>(c.filter_sizes[0]),
                         static_cast<double>(c.filter_sizes[1]), static_cast<double>(c.filter_sizes[2]),
                         static_cast<double>(c.fc_width), static_cast<double>(c.classes),
                         static_cast<double>(c.reconstruction_filter_size), static_cast<double>(c.height),
                         static_cast<double>(c.width)});
}

NetworkConfig config_from(const TensorArchive& archive) {
    const Tensor& t = archive.get("meta.config");
    if (t.rank() != 1 || t.size() != 11) {
        throw FormatError("checkpoint meta.config must hold 11 values");
    }
    std::array<std::size_t, 11> v{};
    for (std::size_t i = 0; i < 11; ++i) {
        const double x = t[i];
        if (!(x >= 0.0 && x < 1e9 && x == std::floor(x))) {
            throw FormatError("checkpoint meta.config value " + std::to_string(i) + " is not a count");
        }
        v[i] = static_cast<std::size_t>(x);
    }
    NetworkConfig c;
    c.filters = {v[0], v[1], v[2]};
    c.filter_sizes = {v[3], v[4], v[5]};
    c.fc_width = v[6];
    c.classes = v[7];
    c.reconstruction_filter_size = v[8];
    c.height = v[9];
    c.width = v[10];
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint meta.config invalid: ") + e.what());
    }
    return c;
}

const Tensor& expect(const TensorArchive& archive, const std::string& name, const Shape& shape) {
    const Tensor& t = archive.get(name);
    if (t.shape() != shape) {
        throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                          shape_string(shape));
    }
    return t;
}

ConvLayerParams read_conv(const TensorArchive& archive, const std::string& prefix, std::size_t out,
                          std::size_t in, std::size_t f) {
    return ConvLayerParams(expect(archive, prefix + ".weight", {out, in, f, f}),
                           expect(archive, prefix + ".bias", {out}));
}

FcLayerParams read_fc(const TensorArchive& archive, const std::string& prefix, std::size_t out, std::size_t in) {
    return FcLayerParams(expect(archive, prefix + ".weight", {out, in}), expect(archive, prefix + ".bias", {out}));
}

ClassifierHead read_head(const TensorArchive& archive, const std::string& prefix, const NetworkConfig& c) {
    return {read_fc(archive, prefix + "fc4", c.fc_width, c.fc_input()),
            read_fc(archive, prefix + "fc5", c.classes, c.fc_width)};
}

ConvLayerParams read_reconstruction(const TensorArchive& archive, const std::string& prefix,
                                    const NetworkConfig& c) {
    return read_conv(archive, prefix + "conv4", 1, c.filters[2], c.reconstruction_filter_size);
}

std::size_t in_channels(const NetworkConfig& c, std::size_t layer) { return layer == 0 ? 1 : c.filters[layer - 1]; }

template <typename Net>
TensorArchive archive_of(const Net& net) {
    TensorArchive a;
    a.add("meta.config", config_tensor(net.config));
    for (const ConstParamRef& p : net.parameters()) {
        a.add(p.name, *p.tensor);
    }
    return a;
}

void require_entry_count(const TensorArchive& archive, std::size_t param_count) {
    if (archive.entries.size() != param_count + 1) {
        throw FormatError("checkpoint has " + std::to_string(archive.entries.size()) + " entries, expected " +
                          std::to_string(param_count + 1));
    }
}

SingleNetwork single_from(const TensorArchive& archive) {
    SingleNetwork net;
    net.config = config_from(archive);
    const NetworkConfig& c = net.config;
    for (std::size_t i = 0; i < 3; ++i) {
        net.conv[i] = read_conv(archive, "conv" + std::to_string(i + 1), c.filters[i], in_channels(c, i),
                                c.filter_sizes[i]);
    }
    if (archive.contains("conv4.weight")) {
        net.reconstruction = read_reconstruction(archive, "", c);
    }
    if (archive.contains("fc4.weight")) {
        net.head = read_head(archive, "", c);
    }
    if (net.reconstruction.has_value() == net.head.has_value()) {
        throw FormatError("checkpoint must contain exactly one of conv4 or fc4/fc5");
    }
    require_entry_count(archive, std::as_const(net).parameters().size());
    return net;
}

DualNetwork dual_from(const TensorArchive& archive) {
    DualNetwork net;
    net.config = config_from(archive);
    const NetworkConfig& c = net.config;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string name = "conv" + std::to_string(i + 1);
        const Tensor& shared = archive.get(name + ".shared.weight");
        if (shared.rank() != 4 || shared.extent(0) > c.filters[i]) {
            throw FormatError("checkpoint tensor " + name + ".shared.weight has an invalid shape");
        }
        const std::size_t k = shared.extent(0);
        net.coupling.shared[i] = k;
        const std::size_t in = in_channels(c, i);
        const std::size_t f = c.filter_sizes[i];
        net.conv[i].shared = read_conv(archive, name + ".shared", k, in, f);
        net.conv[i].private_lr = read_conv(archive, name + ".lr", c.filters[i] - k, in, f);
        net.conv[i].private_hr = read_conv(archive, name + ".hr", c.filters[i] - k, in, f);
    }
    const char* prefixes[2] = {"lr.", "hr."};
    for (std::size_t ch = 0; ch < 2; ++ch) {
        const std::string p = prefixes[ch];
        if (archive.contains(p + "conv4.weight")) {
            net.reconstruction[ch] = read_reconstruction(archive, p, c);
        }
        if (archive.contains(p + "fc4.weight")) {
            net.head[ch] = read_head(archive, p, c);
        }
        if (net.reconstruction[ch].has_value() == net.head[ch].has_value()) {
            throw FormatError("checkpoint channel " + p + " must contain exactly one of conv4 or fc4/fc5");
        }
    }
    require_entry_count(archive, std::as_const(net).parameters().size());
    return net;
}

} // namespace

// ----------------------------- TensorArchive -----------------------------

void TensorArchive::add(std::string name, Tensor tensor) {
    if (contains(name)) {
        throw FormatError("duplicate archive name " + name);
    }
    entries.emplace_back(std::move(name), std::move(tensor));
}

void TensorArchive::add_alias(std::string name, std::string_view target) {
    if (contains(name)) {
        throw FormatError("duplicate archive name " + name);
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].first == target) {
            aliases.emplace_back(std::move(name), i);
            return;
        }
    }
    throw FormatError("alias target " + std::string(target) + " is not an entry");
}

const Tensor* TensorArchive::find(std::string_view name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) {
            return &t;
        }
    }
    for (const auto& [n, index] : aliases) {
        if (n == name) {
            return &entries.at(index).second;
        }
    }
    return nullptr;
}

const Tensor& TensorArchive::get(std::string_view name) const {
    const Tensor* t = find(name);
    if (t == nullptr) {
        throw FormatError("archive has no tensor named " + std::string(name));
    }
    return *t;
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::string_view magic) {
    std::vector<std::uint8_t> out(magic.begin(), magic.end());
    detail::put_le<std::uint8_t>(out, archive_version);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& [name, t] : archive.entries) {
        put_name(out, name);
        if (t.rank() > std::numeric_limits<std::uint8_t>::max()) {
            throw FormatError("tensor " + name + " has too many axes");
        }
        detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t e : t.shape()) {
            if (e > std::numeric_limits<std::uint32_t>::max()) {
                throw FormatError("tensor " + name + " extent too large");
            }
            detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        }
        for (double v : t.values()) {
            detail::put_f64(out, v);
        }
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.aliases.size()));
    for (const auto& [name, index] : archive.aliases) {
        put_name(out, name);
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(index));
    }
    return out;
}

TensorArchive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic) {
    const std::string format(magic);
    detail::ByteReader in(bytes, format);
    const auto m = in.take(magic.size(), "magic");
    if (!std::equal(m.begin(), m.end(), magic.begin())) {
        throw FormatError("not a " + format + " file (bad magic)");
    }
    const auto version = in.get<std::uint8_t>("version");
    if (version != archive_version) {
        throw FormatError("unsupported " + format + " version " + std::to_string(version));
    }
    TensorArchive archive;
    const std::size_t count = in.get<std::uint32_t>("entry count");
    for (std::size_t i = 0; i < count; ++i) {
        std::string name = get_name(in);
        const std::size_t rank = in.get<std::uint8_t>("rank");
        Shape shape(rank);
        std::size_t size = 1;
        for (std::size_t& e : shape) {
            e = in.get<std::uint32_t>("extent");
            size *= e;
        }
        if (size > in.remaining() / 8) {
            throw FormatError(format + " file truncated while reading values of " + name);
        }
        std::vector<double> values(size);
        for (double& v : values) {
            v = in.get_f64("values");
        }
        archive.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    const std::size_t alias_count = in.get<std::uint32_t>("alias count");
    for (std::size_t i = 0; i < alias_count; ++i) {
        std::string name = get_name(in);
        const std::size_t index = in.get<std::uint32_t>("alias index");
        if (index >= archive.entries.size()) {
            throw FormatError("alias " + name + " points past the last entry");
        }
        archive.add_alias(std::move(name), archive.entries[index].first);
    }
    if (in.remaining() != 0) {
        throw FormatError(format + " file has " + std::to_string(in.remaining()) + " trailing bytes");
    }
    return archive;
}

// ----------------------------- checkpoints -----------------------------

std::vector<std::uint8_t> encode_checkpoint(const SingleNetwork& net) {
    return encode_archive(archive_of(net), "VLRC");
}

std::vector<std::uint8_t> encode_checkpoint(const DualNetwork& net) {
    TensorArchive a = archive_of(net);
    for (std::size_t i = 1; i <= 3; ++i) {
        const std::string name = "conv" + std::to_string(i) + ".shared.";
        for (const char* part : {"weight", "bias"}) {
            a.add_alias("lr." + name + part, name + part);
            a.add_alias("hr." + name + part, name + part);
        }
    }
    return encode_archive(a, "VLRC");
}

AnyNetwork decode_checkpoint(std::span<const std::uint8_t> bytes) {
    const TensorArchive archive = decode_archive(bytes, "VLRC");
    if (archive.contains("conv1.shared.weight")) {
        return dual_from(archive);
    }
    return single_from(archive);
}

void save_checkpoint(const SingleNetwork& net, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(net));
}

void save_checkpoint(const DualNetwork& net, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(net));
}

AnyNetwork load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// ----------------------------- pair archives -----------------------------

std::vector<std::uint8_t> encode_pair_set(const PairSet& pairs) {
    TensorArchive a;
    const std::size_t n = pairs.size();
    a.add("lr", pairs.lr);
    a.add("hr", pairs.hr);
    a.add("mean", Tensor({n}, pairs.mean));
    a.add("scale", Tensor({n}, pairs.scale));
    std::vector<double> labels(pairs.labels.begin(), pairs.labels.end());
    a.add("labels", Tensor({n}, std::move(labels)));
    a.add("classes", Tensor({1}, {static_cast<double>(pairs.class_count)}));
    return encode_archive(a, "VLRP");
}

PairSet decode_pair_set(std::span<const std::uint8_t> bytes) {
    const TensorArchive a = decode_archive(bytes, "VLRP");
    PairSet p;
    p.lr = a.get("lr");
    p.hr = a.get("hr");
    const Tensor& labels = a.get("labels");
    const std::size_t n = labels.size();
    if (p.lr.rank() != 4 || p.lr.extent(0) != n || p.hr.shape() != p.lr.shape()) {
        throw FormatError("pair archive lr/hr shapes do not match the label count");
    }
    const Tensor& mean = expect(a, "mean", {n});
    const Tensor& scale = expect(a, "scale", {n});
    p.mean.assign(mean.values().begin(), mean.values().end());
    p.scale.assign(scale.values().begin(), scale.values().end());
    p.class_count = static_cast<std::size_t>(expect(a, "classes", {1})[0]);
    for (double v : labels.values()) {
        if (!(v >= 0.0 && v < static_cast<double>(p.class_count))) {
            throw FormatError("pair archive label out of range");
        }
        p.labels.push_back(static_cast<std::size_t>(v));
    }
    return p;
}

} // namespace vlrr
