#include "vlrr/experiment.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <ostream>
#include <sstream>

#include "vlrr/gradcheck.hpp"

namespace vlrr {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.push_back(trim(std::string_view(s).substr(start, comma - start)));
        if (comma == std::string::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

double parse_double(const std::string& key, const std::string& text) {
    double v = 0.0;
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size() || !std::isfinite(v)) {
        throw ConfigError("plan key " + key + ": '" + text + "' is not a number");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
        throw ConfigError("plan key " + key + ": '" + text + "' is not a nonnegative integer");
    }
    return v;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
    return static_cast<std::size_t>(parse_u64(key, text));
}

template <typename T, typename Parse>
std::array<T, 3> parse_triple(const std::string& key, const std::string& text, Parse parse) {
    const std::vector<std::string> parts = split_list(text);
    if (parts.size() != 3) {
        throw ConfigError("plan key " + key + " needs three comma-separated values");
    }
    return {parse(key, parts[0]), parse(key, parts[1]), parse(key, parts[2])};
}

template <typename T, typename Format>
std::string join3(const std::array<T, 3>& v, Format format) {
    return format(v[0]) + "," + format(v[1]) + "," + format(v[2]);
}

std::string size_str(std::size_t v) { return std::to_string(v); }

std::string loss_name(ReconstructionLoss l) { return l == ReconstructionLoss::huber ? "huber" : "mse"; }

std::string mode_name(PretrainMode m) { return m == PretrainMode::layerwise ? "layerwise" : "end_to_end"; }

ReconstructionLoss variant_loss(ModelVariant v) {
    return v == ModelVariant::v ? ReconstructionLoss::huber : ReconstructionLoss::mse;
}

double variant_pretrain_lr(ModelVariant v) { return is_coupled(v) ? 0.01 : 0.1; }

bool uses_pretraining(ModelVariant v) { return v != ModelVariant::i; }

std::vector<std::size_t> usable_ks(std::span<const std::size_t> ks, std::size_t classes) {
    std::vector<std::size_t> out;
    for (std::size_t k : ks) {
        if (k >= 1 && k <= classes) {
            out.push_back(k);
        }
    }
    return out;
}

void ensure_dir(const std::string& dir) {
    if (dir.empty()) {
        throw ConfigError("no output directory given");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ImageDataset load_input(const std::string& path, const char* what) {
    if (path.empty()) {
        throw ConfigError(std::string("no ") + what + " dataset given");
    }
    if (!fs::exists(path)) {
        throw ConfigError(std::string(what) + " dataset not found: " + path);
    }
    return load_dataset(path);
}

ExperimentPlan resolved_plan(const RunOptions& options) {
    ExperimentPlan plan = load_plan(options.plan_path);
    if (options.seed) {
        plan.seed = *options.seed;
    }
    if (options.out_dir) {
        plan.out_dir = *options.out_dir;
    }
    plan.validate();
    return plan;
}

void check_pair(const ImageDataset& train, const ImageDataset& test) {
    if (train.class_count != test.class_count) {
        throw ConfigError("train and test datasets disagree on the class count (" +
                          std::to_string(train.class_count) + " vs " + std::to_string(test.class_count) + ")");
    }
    if (train.height() != test.height() || train.width() != test.width()) {
        throw ConfigError("train and test datasets disagree on the image size");
    }
}

} // namespace

// ----------------------------- variants -----------------------------

std::string variant_name(ModelVariant v) {
    switch (v) {
    case ModelVariant::i: return "I";
    case ModelVariant::ii: return "II";
    case ModelVariant::iii: return "III";
    case ModelVariant::iv: return "IV";
    case ModelVariant::v: return "V";
    }
    return "?";
}

ModelVariant parse_variant(std::string_view text) {
    for (ModelVariant v : {ModelVariant::i, ModelVariant::ii, ModelVariant::iii, ModelVariant::iv, ModelVariant::v}) {
        if (text == variant_name(v)) {
            return v;
        }
    }
    throw ConfigError("unknown model variant '" + std::string(text) + "' (expected I, II, III, IV or V)");
}

bool is_coupled(ModelVariant v) {
    return v == ModelVariant::iii || v == ModelVariant::iv || v == ModelVariant::v;
}

// ----------------------------- plans -----------------------------

void ExperimentPlan::validate() const {
    network.validate();
    if (degradation.scale < 2) {
        throw ConfigError("degradation.scale must be at least 2");
    }
    if (!(degradation.gaussian_sigma >= 0.0)) {
        throw ConfigError("degradation.sigma must be nonnegative");
    }
    if (!(degradation.sp_fraction >= 0.0 && degradation.sp_fraction <= 1.0)) {
        throw ConfigError("degradation.sp_fraction must lie in [0, 1]");
    }
    pretrain.validate();
    finetune.validate();
    for (double c : coupling) {
        if (!(c >= 0.0 && c <= 1.0)) {
            throw ConfigError("coupling.c entries must lie in [0, 1]");
        }
    }
    if (variant == ModelVariant::iii && coupling != CouplingRatios{1.0, 1.0, 1.0}) {
        throw ConfigError("variant III is fully coupled; coupling.c must be 1,1,1");
    }
    if (!is_coupled(variant) && coupling != CouplingRatios{0.0, 0.0, 0.0}) {
        throw ConfigError("coupling.c applies to variants IV and V only");
    }
    if (uses_pretraining(variant) && pretrain.objective.loss != variant_loss(variant)) {
        throw ConfigError("variant " + variant_name(variant) + " pre-trains with " +
                          loss_name(variant_loss(variant)) + ", not " + loss_name(pretrain.objective.loss));
    }
}

// Plans compare by their serialised form, which lists every field with a
// round-trip exact number format.
bool operator==(const ExperimentPlan& a, const ExperimentPlan& b) { return serialize_plan(a) == serialize_plan(b); }

ExperimentPlan parse_plan(std::string_view text) {
    std::map<std::string, std::string> kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("plan line " + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = trim(std::string_view(t).substr(0, eq));
        std::string value = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("plan line " + std::to_string(line_no) + ": empty key");
        }
        if (!kv.emplace(key, value).second) {
            throw ConfigError("plan line " + std::to_string(line_no) + ": duplicate key " + key);
        }
    }

    ExperimentPlan p;
    auto take = [&](const std::string& key) -> std::optional<std::string> {
        auto it = kv.find(key);
        if (it == kv.end()) {
            return std::nullopt;
        }
        std::string v = it->second;
        kv.erase(it);
        return v;
    };

    const auto variant = take("variant");
    if (!variant) {
        throw ConfigError("plan is missing the variant key");
    }
    p.variant = parse_variant(*variant);
    if (auto v = take("seed")) p.seed = parse_u64("seed", *v);
    if (auto v = take("data.train")) p.train_path = *v;
    if (auto v = take("data.test")) p.test_path = *v;
    if (auto v = take("out")) p.out_dir = *v;

    if (auto v = take("degradation.scale")) p.degradation.scale = parse_size("degradation.scale", *v);
    if (auto v = take("degradation.sigma")) p.degradation.gaussian_sigma = parse_double("degradation.sigma", *v);
    if (auto v = take("degradation.sp_fraction")) {
        p.degradation.sp_fraction = parse_double("degradation.sp_fraction", *v);
    }

    if (auto v = take("network.n")) p.network.filters = parse_triple<std::size_t>("network.n", *v, parse_size);
    if (auto v = take("network.f")) p.network.filter_sizes = parse_triple<std::size_t>("network.f", *v, parse_size);
    if (auto v = take("network.m4")) p.network.fc_width = parse_size("network.m4", *v);
    if (auto v = take("network.f4")) p.network.reconstruction_filter_size = parse_size("network.f4", *v);

    const auto coupling = take("coupling.c");
    if (coupling) {
        p.coupling = parse_triple<double>("coupling.c", *coupling, parse_double);
    } else if (p.variant == ModelVariant::iii) {
        p.coupling = {1.0, 1.0, 1.0};
    } else if (is_coupled(p.variant)) {
        p.coupling = default_coupling_ratios;
    }

    const auto loss = take("pretrain.loss");
    if (loss) {
        if (*loss == "mse") {
            p.pretrain.objective.loss = ReconstructionLoss::mse;
        } else if (*loss == "huber") {
            p.pretrain.objective.loss = ReconstructionLoss::huber;
        } else {
            throw ConfigError("pretrain.loss must be mse or huber, got '" + *loss + "'");
        }
    } else {
        p.pretrain.objective.loss = variant_loss(p.variant);
    }
    if (auto v = take("pretrain.huber_c")) p.pretrain.objective.huber.c = parse_double("pretrain.huber_c", *v);
    p.pretrain.learning_rate = variant_pretrain_lr(p.variant);
    if (auto v = take("pretrain.lr")) p.pretrain.learning_rate = parse_double("pretrain.lr", *v);
    if (auto v = take("pretrain.batch")) p.pretrain.batch_size = parse_size("pretrain.batch", *v);
    if (auto v = take("pretrain.epochs")) p.pretrain.max_epochs = parse_size("pretrain.epochs", *v);
    if (auto v = take("pretrain.mode")) {
        if (*v == "end_to_end") {
            p.pretrain.mode = PretrainMode::end_to_end;
        } else if (*v == "layerwise") {
            p.pretrain.mode = PretrainMode::layerwise;
        } else {
            throw ConfigError("pretrain.mode must be end_to_end or layerwise, got '" + *v + "'");
        }
    }

    if (auto v = take("finetune.lr")) p.finetune.learning_rate = parse_double("finetune.lr", *v);
    if (auto v = take("finetune.batch")) p.finetune.batch_size = parse_size("finetune.batch", *v);
    if (auto v = take("finetune.epochs")) p.finetune.max_epochs = parse_size("finetune.epochs", *v);
    if (auto v = take("finetune.dropout")) p.finetune.dropout_rate = parse_double("finetune.dropout", *v);
    if (auto v = take("finetune.patience")) p.finetune.plateau.patience = parse_size("finetune.patience", *v);
    if (auto v = take("finetune.min_delta")) p.finetune.plateau.min_delta = parse_double("finetune.min_delta", *v);
    if (auto v = take("finetune.factor")) p.finetune.plateau.factor = parse_double("finetune.factor", *v);
    if (auto v = take("finetune.floor")) p.finetune.plateau.floor = parse_double("finetune.floor", *v);

    if (!kv.empty()) {
        throw ConfigError("unknown plan key " + kv.begin()->first);
    }
    p.pretrain.noise_sigma = p.degradation.gaussian_sigma;
    p.finetune.noise_sigma = p.degradation.gaussian_sigma;
    p.validate();
    return p;
}

std::string serialize_plan(const ExperimentPlan& p) {
    std::ostringstream o;
    o << "variant = " << variant_name(p.variant) << "\n";
    o << "seed = " << p.seed << "\n";
    o << "data.train = " << p.train_path << "\n";
    o << "data.test = " << p.test_path << "\n";
    o << "out = " << p.out_dir << "\n";
    o << "degradation.scale = " << p.degradation.scale << "\n";
    o << "degradation.sigma = " << num(p.degradation.gaussian_sigma) << "\n";
    o << "degradation.sp_fraction = " << num(p.degradation.sp_fraction) << "\n";
    o << "network.n = " << join3(p.network.filters, size_str) << "\n";
    o << "network.f = " << join3(p.network.filter_sizes, size_str) << "\n";
    o << "network.m4 = " << p.network.fc_width << "\n";
    o << "network.f4 = " << p.network.reconstruction_filter_size << "\n";
    if (p.variant == ModelVariant::iv || p.variant == ModelVariant::v) {
        o << "coupling.c = " << join3(p.coupling, num) << "\n";
    }
    o << "pretrain.loss = " << loss_name(p.pretrain.objective.loss) << "\n";
    o << "pretrain.huber_c = " << num(p.pretrain.objective.huber.c) << "\n";
    o << "pretrain.lr = " << num(p.pretrain.learning_rate) << "\n";
    o << "pretrain.batch = " << p.pretrain.batch_size << "\n";
    o << "pretrain.epochs = " << p.pretrain.max_epochs << "\n";
    o << "pretrain.mode = " << mode_name(p.pretrain.mode) << "\n";
    o << "finetune.lr = " << num(p.finetune.learning_rate) << "\n";
    o << "finetune.batch = " << p.finetune.batch_size << "\n";
    o << "finetune.epochs = " << p.finetune.max_epochs << "\n";
    o << "finetune.dropout = " << num(p.finetune.dropout_rate) << "\n";
    o << "finetune.patience = " << p.finetune.plateau.patience << "\n";
    o << "finetune.min_delta = " << num(p.finetune.plateau.min_delta) << "\n";
    o << "finetune.factor = " << num(p.finetune.plateau.factor) << "\n";
    o << "finetune.floor = " << num(p.finetune.plateau.floor) << "\n";
    return o.str();
}

ExperimentPlan load_plan(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("plan file not found: " + path.string());
    }
    const std::vector<std::uint8_t> bytes = read_file(path);
    return parse_plan(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ----------------------------- running -----------------------------

NetworkConfig effective_network(const ExperimentPlan& plan, const ImageDataset& train) {
    NetworkConfig c = plan.network;
    c.classes = train.class_count;
    c.height = train.height();
    c.width = train.width();
    c.validate();
    return c;
}

ExperimentOutcome run_experiment(const ExperimentPlan& plan, const ImageDataset& train, const ImageDataset& test) {
    plan.validate();
    check_pair(train, test);
    const NetworkConfig config = effective_network(plan, train);
    const RandomState root(plan.seed);
    const RandomState model_rng = root.substream("model");
    const RandomState pretrain_rng = root.substream("pretrain");
    const RandomState finetune_rng = root.substream("finetune");
    const PairSet pairs = make_pair_set(train, plan.degradation, root.substream("data"));

    ExperimentOutcome out;
    FinetuneResult tuned;
    switch (plan.variant) {
    case ModelVariant::i: {
        SingleNetwork net = build_model_i(config, model_rng);
        tuned = finetune(net, pairs, plan.finetune, finetune_rng);
        out.classifier = net;
        out.network = std::move(net);
        break;
    }
    case ModelVariant::ii: {
        SingleNetwork sr = build_sr_subnet(config, model_rng);
        PretrainResult pre = pretrain_sr(sr, pairs, plan.pretrain, pretrain_rng);
        out.curves = std::move(pre.curves);
        SingleNetwork net = attach_classifier_head(std::move(sr), model_rng);
        tuned = finetune(net, pairs, plan.finetune, finetune_rng);
        out.classifier = net;
        out.network = std::move(net);
        break;
    }
    case ModelVariant::iii:
    case ModelVariant::iv:
    case ModelVariant::v: {
        const CouplingConfig coupling = plan.variant == ModelVariant::iii
                                            ? CouplingConfig::full(config)
                                            : CouplingConfig::from_ratios(config, plan.coupling);
        DualNetwork dual = build_pcsrn(config, coupling, model_rng);
        PretrainResult pre = pretrain_sr(dual, pairs, plan.pretrain, pretrain_rng);
        out.curves = std::move(pre.curves);
        DualNetwork net = attach_classifier_heads(std::move(dual), model_rng);
        tuned = finetune(net, pairs, plan.finetune, finetune_rng);
        out.classifier = decouple_for_inference(net);
        out.network = std::move(net);
        break;
    }
    }
    const std::size_t offset = out.curves.size();
    for (EpochRecord r : tuned.curves) {
        r.epoch += offset;
        out.curves.push_back(r);
    }
    for (auto it = tuned.curves.rbegin(); it != tuned.curves.rend(); ++it) {
        if (it->phase == "validation") {
            out.validation_top1 = it->top1;
            break;
        }
    }
    const std::vector<std::size_t> default_ks{1, 5};
    out.ks = usable_ks(default_ks, config.classes);
    out.test_errors = evaluate_topk(out.classifier, make_lr_inputs(test, plan.degradation.scale), test.labels, out.ks);
    return out;
}

std::string format_report(const ExperimentPlan& plan, const ExperimentOutcome& outcome) {
    std::ostringstream o;
    o << "variant = " << variant_name(plan.variant) << "\n";
    o << "seed = " << plan.seed << "\n";
    o << "classes = " << outcome.classifier.config.classes << "\n";
    o << "classifier_parameters = " << parameter_count(outcome.classifier) << "\n";
    if (const auto* dual = std::get_if<DualNetwork>(&outcome.network)) {
        const auto& k = dual->coupling.shared;
        o << "shared_filters = " << k[0] << "," << k[1] << "," << k[2] << "\n";
        o << "training_parameters = " << parameter_count(*dual) << "\n";
    }
    std::size_t pre = 0;
    std::size_t tune = 0;
    for (const EpochRecord& r : outcome.curves) {
        if (r.phase.rfind("pretrain", 0) == 0) {
            ++pre;
        } else if (r.phase == "train") {
            ++tune;
        }
    }
    o << "pretrain_epochs = " << pre << "\n";
    o << "finetune_epochs = " << tune << "\n";
    o << "validation_top1 = " << num(outcome.validation_top1) << "\n";
    for (std::size_t q = 0; q < outcome.ks.size(); ++q) {
        o << "test_top" << outcome.ks[q] << " = " << num(outcome.test_errors[q]) << "\n";
    }
    return o.str();
}

// ----------------------------- commands -----------------------------

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
        crc = crc32(crc, bytes.data() + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

int cmd_run(const RunOptions& options, std::ostream& log) {
    const ExperimentPlan plan = resolved_plan(options);
    const ImageDataset train = load_input(plan.train_path, "training");
    const ImageDataset test = load_input(plan.test_path, "test");
    check_pair(train, test);
    ensure_dir(plan.out_dir);
    log << "model " << variant_name(plan.variant) << ", seed " << plan.seed << ", " << train.count()
        << " training images, " << train.class_count << " classes\n";
    const ExperimentOutcome outcome = run_experiment(plan, train, test);
    const fs::path out(plan.out_dir);
    write_text(out / "plan.txt", serialize_plan(plan));
    std::visit([&](const auto& net) { save_checkpoint(net, out / "checkpoint.vlrc"); }, outcome.network);
    write_text(out / "curves.csv", curves_csv(outcome.curves));
    const std::string report = format_report(plan, outcome);
    write_text(out / "report.txt", report);
    log << report;
    return 0;
}

int cmd_eval(const EvalOptions& options, std::ostream& log) {
    if (!fs::exists(options.checkpoint_path)) {
        throw ConfigError("checkpoint not found: " + options.checkpoint_path);
    }
    const ImageDataset data = load_input(options.data_path, "evaluation");
    const AnyNetwork loaded = load_checkpoint(options.checkpoint_path);
    SingleNetwork net;
    if (const auto* dual = std::get_if<DualNetwork>(&loaded)) {
        net = decouple_for_inference(*dual);
    } else {
        net = std::get<SingleNetwork>(loaded);
    }
    if (!net.head) {
        throw ConfigError("checkpoint has no classifier head (an SR pre-training checkpoint?)");
    }
    if (net.config.classes != data.class_count) {
        throw ConfigError("checkpoint predicts " + std::to_string(net.config.classes) +
                          " classes but the dataset has " + std::to_string(data.class_count));
    }
    if (net.config.height != data.height() || net.config.width != data.width()) {
        throw ConfigError("checkpoint expects " + std::to_string(net.config.height) + "x" +
                          std::to_string(net.config.width) + " images");
    }
    DegradationSpec spec;
    spec.scale = options.scale;
    spec.validate(data.height(), data.width());
    const std::vector<std::size_t> ks = usable_ks(options.ks, net.config.classes);
    if (ks.empty()) {
        throw ConfigError("no usable k for " + std::to_string(net.config.classes) + " classes");
    }
    const std::vector<double> errors = evaluate_topk(net, make_lr_inputs(data, options.scale), data.labels, ks);
    std::ostringstream report;
    report << "images = " << data.count() << "\n";
    for (std::size_t q = 0; q < ks.size(); ++q) {
        report << "top" << ks[q] << "_error = " << num(errors[q]) << "\n";
    }
    log << report.str();
    if (options.out_dir) {
        ensure_dir(*options.out_dir);
        write_text(fs::path(*options.out_dir) / "eval.txt", report.str());
    }
    return 0;
}

int cmd_prepare(const PrepareOptions& options, std::ostream& log) {
    const ImageDataset hr = load_input(options.input_path, "input");
    DegradationSpec spec;
    spec.scale = options.scale;
    spec.sp_fraction = options.sp_fraction;
    spec.validate(hr.height(), hr.width());
    ensure_dir(options.out_dir);
    const fs::path out(options.out_dir);
    const RandomState data_rng = RandomState(options.seed).substream("data");

    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
    DegradationSpec clean = spec;
    clean.sp_fraction = 0.0;
    files.emplace_back("hr.vlrd", encode_dataset(hr));
    files.emplace_back("pairs.vlrp", encode_pair_set(make_pair_set(hr, clean, data_rng)));
    const std::size_t plane = hr.height() * hr.width();
    if (spec.sp_fraction > 0.0) {
        ImageDataset corrupted = hr;
        const RandomState corrupt = data_rng.substream("corrupt");
        for (std::size_t i = 0; i < hr.count(); ++i) {
            RandomState r = corrupt.substream(static_cast<std::uint64_t>(i));
            const Tensor img = corrupt_salt_pepper(hr.image(i), spec.sp_fraction, r);
            std::copy(img.values().begin(), img.values().end(), corrupted.images.data() + i * plane);
        }
        files.emplace_back("hr_sp.vlrd", encode_dataset(corrupted));
        files.emplace_back("pairs_sp.vlrp", encode_pair_set(make_pair_set(hr, spec, data_rng)));
    }

    std::ostringstream manifest;
    manifest << "input = " << options.input_path << "\n";
    manifest << "images = " << hr.count() << "\n";
    manifest << "size = " << hr.height() << "x" << hr.width() << "\n";
    manifest << "classes = " << hr.class_count << "\n";
    manifest << "scale = " << spec.scale << "\n";
    manifest << "seed = " << options.seed << "\n";
    manifest << "sp_fraction = " << num(spec.sp_fraction) << "\n";
    manifest << "corrupted_pixels_per_image = " << salt_pepper_count(plane, spec.sp_fraction) << "\n";
    for (const auto& [name, bytes] : files) {
        write_file(out / name, bytes);
        char crc[16];
        std::snprintf(crc, sizeof crc, "%08x", crc32_of(bytes));
        manifest << "file " << name << " bytes=" << bytes.size() << " crc32=" << crc << "\n";
    }
    write_text(out / "manifest.txt", manifest.str());
    log << manifest.str();
    return 0;
}

int cmd_search(const SearchOptions& options, std::ostream& log) {
    const ExperimentPlan plan = resolved_plan(options.run);
    if (plan.variant != ModelVariant::iv && plan.variant != ModelVariant::v) {
        throw ConfigError("search needs a variant IV or V plan");
    }
    std::optional<ImageDataset> train;
    std::optional<ImageDataset> test;
    if (!options.l1_oracle) {
        train = load_input(plan.train_path, "training");
        test = load_input(plan.test_path, "test");
        check_pair(*train, *test);
    }
    ensure_dir(plan.out_dir);
    const NetworkConfig config = train ? effective_network(plan, *train) : plan.network;

    auto trial = [&](const CouplingRatios& c) {
        double error = 0.0;
        if (options.l1_oracle) {
            for (std::size_t i = 0; i < 3; ++i) {
                error += std::abs(c[i] - default_coupling_ratios[i]);
            }
        } else {
            ExperimentPlan p = plan;
            p.coupling = c;
            error = run_experiment(p, *train, *test).validation_top1;
        }
        log << "trial c = " << num(c[0]) << "," << num(c[1]) << "," << num(c[2]) << " error = " << num(error)
            << "\n";
        return error;
    };
    const GridSearchResult result = grid_search_coupled_ratios(trial);

    std::string csv = "k1,k2,k3,c1,c2,c3,top1_error\n";
    for (const GridTrial& t : result.history) {
        const CouplingConfig k = CouplingConfig::from_ratios(config, t.ratios);
        csv += std::to_string(k.shared[0]) + "," + std::to_string(k.shared[1]) + "," + std::to_string(k.shared[2]) +
               "," + num(t.ratios[0]) + "," + num(t.ratios[1]) + "," + num(t.ratios[2]) + "," + num(t.error) + "\n";
    }
    write_text(fs::path(plan.out_dir) / "search.csv", csv);
    log << "best c = " << num(result.best[0]) << "," << num(result.best[1]) << "," << num(result.best[2])
        << " error = " << num(result.best_error) << " after " << result.history.size() << " trials\n";
    return 0;
}

int cmd_synth(const SynthOptions& options, std::ostream& log) {
    ensure_dir(options.out_dir);
    const SynthSplit split =
        synth_split(options.classes, options.train_count, options.test_count, options.side, RandomState(options.seed));
    const fs::path out(options.out_dir);
    save_dataset(split.train, out / "train.vlrd");
    save_dataset(split.test, out / "test.vlrd");
    log << "wrote " << split.train.count() << " training and " << split.test.count() << " test images ("
        << options.classes << " classes, " << options.side << "x" << options.side << ") to " << options.out_dir
        << "\n";
    return 0;
}

// ----------------------------- selfcheck -----------------------------

namespace {

struct CheckLog {
    std::ostream& out;
    bool all = true;

    void line(const std::string& name, bool ok, const std::string& detail) {
        all = all && ok;
        out << (ok ? "ok   " : "FAIL ") << name << "  " << detail << "\n";
    }
};

Tensor random_tensor(const Shape& shape, RandomState& rng) {
    Tensor t(shape);
    for (double& v : t.values()) {
        v = rng.normal();
    }
    return t;
}

// Random biases keep pre-activations off the ReLU kink at exactly zero,
// where one-sided differences disagree with the subgradient.
template <typename Net>
void jitter_biases(Net& net, RandomState& rng) {
    for (const ParamRef& p : net.parameters()) {
        if (p.name.ends_with(".bias")) {
            for (double& v : p.tensor->values()) {
                v = 0.1 * rng.normal();
            }
        }
    }
}

template <typename Net>
GradCheckReport check_network(Net& net, const std::function<double()>& loss, const Net& grads) {
    std::vector<Tensor*> params;
    std::vector<Tensor> analytic;
    std::vector<std::string> names;
    for (const ParamRef& p : net.parameters()) {
        params.push_back(p.tensor);
        names.push_back(p.name);
    }
    for (const ConstParamRef& g : grads.parameters()) {
        analytic.push_back(*g.tensor);
    }
    GradCheckOptions o;
    o.max_coords_per_tensor = 12;
    return finite_diff_check(loss, params, analytic, names, o);
}

std::string error_detail(const GradCheckReport& r) {
    return "max relative error " + num(r.max_relative_error) + " over " + std::to_string(r.coordinates_checked) +
           " coordinates";
}

} // namespace

int cmd_selfcheck(std::ostream& log) {
    CheckLog check{log};
    RandomState rng(2024);
    NetworkConfig small;
    small.filters = {3, 3, 2};
    small.filter_sizes = {3, 3, 1};
    small.fc_width = 6;
    small.classes = 4;
    small.reconstruction_filter_size = 3;
    small.height = 6;
    small.width = 6;

    {
        SingleNetwork net = build_model_i(small, rng.substream("model-i"));
        jitter_biases(net, rng);
        const Tensor x = random_tensor({3, 1, 6, 6}, rng);
        const std::vector<std::size_t> labels{0, 3, 1};
        SingleNetwork grads = net.zeros_like();
        classify_batch_gradient(net, x, labels, 0.0, nullptr, grads);
        auto loss = [&] {
            const ForwardTrace t = forward_channel(net.view(), x);
            return cross_entropy_loss(t.probabilities, labels).value;
        };
        const GradCheckReport r = check_network(net, loss, grads);
        check.line("model I gradient", r.max_relative_error < 1e-4, error_detail(r));
    }
    {
        const CouplingConfig coupling{{1, 2, 1}};
        DualNetwork net = build_pcsrn(small, coupling, rng.substream("pcsrn"));
        jitter_biases(net, rng);
        const Tensor lr = random_tensor({2, 1, 6, 6}, rng);
        const Tensor hr = random_tensor({2, 1, 6, 6}, rng);
        const ReconstructionObjective objective{ReconstructionLoss::huber, {}};
        DualNetwork grads = net.zeros_like();
        sr_batch_gradient(net, lr, hr, hr, objective, grads);
        auto loss = [&] {
            const ForwardTrace a = forward_channel(net.view(Channel::lr), lr);
            const ForwardTrace b = forward_channel(net.view(Channel::hr), hr);
            return reconstruction_loss(objective, a.reconstruction, hr).value +
                   reconstruction_loss(objective, b.reconstruction, hr).value;
        };
        const GradCheckReport r = check_network(net, loss, grads);
        check.line("coupled SR gradient", r.max_relative_error < 1e-4, error_detail(r));
    }
    {
        const double quad = huber_loss(Tensor({1}, {0.5}), Tensor({1}, {0.0})).value;
        const double lin = huber_loss(Tensor({1}, {2.0}), Tensor({1}, {0.0})).value;
        check.line("huber values", std::abs(quad - 0.125) < 1e-12 && std::abs(lin - 1.7854875) < 1e-12,
                   num(quad) + ", " + num(lin));
    }
    {
        const Tensor img = random_tensor({1, 8, 8}, rng);
        const bool identity = bit_equal(downsample_area(upscale_nn(img, 4), 4), img);
        Tensor hr({1, 32, 32}, 0.5);
        RandomState r = rng.substream("sp");
        const Tensor c = corrupt_salt_pepper(hr, 0.15, r);
        std::size_t changed = 0;
        for (std::size_t i = 0; i < c.size(); ++i) {
            changed += c[i] != hr[i] ? 1 : 0;
        }
        check.line("degradation pipeline", identity && changed == 154,
                   "upscale/downsample identity " + std::string(identity ? "holds" : "broken") + ", " +
                       std::to_string(changed) + " corrupted pixels");
    }
    {
        const GridSearchResult r = grid_search_coupled_ratios([](const CouplingRatios& c) {
            double e = 0.0;
            for (std::size_t i = 0; i < 3; ++i) {
                e += std::abs(c[i] - default_coupling_ratios[i]);
            }
            return e;
        });
        check.line("ratio search", r.best == default_coupling_ratios && r.history.size() <= 13,
                   "best " + num(r.best[0]) + "," + num(r.best[1]) + "," + num(r.best[2]) + " in " +
                       std::to_string(r.history.size()) + " trials");
    }
    return check.all ? 0 : 1;
}

} // namespace vlrr
