#pragma once

// Run configuration loaded from YAML. Unknown keys are errors; messages carry
// the file line and column, or the --set override that produced the value.

#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "readood/benchmark.hpp"
#include "readood/calibration.hpp"
#include "readood/scoring.hpp"
#include "readood/training.hpp"

namespace readood {

inline constexpr int kConfigSchemaVersion = 1;

// The small desk-scale network diverges with the decomposed head at lr 0.1.
inline TrainConfig desk_classifier(std::size_t epochs) {
    TrainConfig c = TrainConfig::classifier(epochs);
    c.learning_rate = 0.02;
    return c;
}

struct RunConfig {
    int schema_version = kConfigSchemaVersion;
    std::string preset = "desk";
    Variant variant = Variant::read_md;
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string work_dir = "run";
    BenchmarkSpec benchmark;
    TrainConfig classifier = desk_classifier(60);
    std::array<std::size_t, 3> classifier_widths{16, 32, 64};
    TrainConfig autoencoder = TrainConfig::autoencoder_desk();
    std::size_t ae_bottleneck = 64;
    std::vector<double> epsilon_grid = default_epsilon_grid();
    std::size_t pool_per_kind = 1000;
    std::uint64_t calibration_seed = 1;
    SynthParams synth;
    DetectorOptions options;

    HeadKind head() const { return variant == Variant::read_ed ? HeadKind::decomposed : HeadKind::standard; }
    ClassifierSpec classifier_spec() const { return {benchmark.image, benchmark.classes, classifier_widths, head()}; }
    AutoencoderSpec autoencoder_spec() const { return {benchmark.image, classifier_widths, ae_bottleneck}; }

    static RunConfig paper() {
        RunConfig c;
        c.preset = "paper";
        c.classifier = TrainConfig::classifier_paper();
        c.autoencoder = TrainConfig::autoencoder_paper();
        return c;
    }
    static RunConfig desk() { return RunConfig{}; }
    // Short schedules and smaller splits for test runs on one core.
    static RunConfig quick() {
        RunConfig c;
        c.preset = "quick";
        c.benchmark.n_train = 1200;
        c.benchmark.n_val = 400;
        c.benchmark.n_test = 400;
        c.benchmark.n_ood = 400;
        c.classifier = desk_classifier(30);
        c.autoencoder = TrainConfig::autoencoder(60);
        c.pool_per_kind = 400;
        return c;
    }
    static RunConfig from_preset(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        if (name == "quick") return quick();
        throw ConfigError("unknown preset '" + name + "' (expected quick, desk or paper)");
    }

    void validate() const {
        benchmark.validate();
        classifier.validate();
        autoencoder.validate();
        if (epsilon_grid.empty()) throw ConfigError("calibration.grid must not be empty");
        for (double e : epsilon_grid)
            if (!(e >= 0) || !std::isfinite(e)) throw ConfigError("calibration.grid values must be non-negative");
        if (pool_per_kind == 0) throw ConfigError("calibration.pool_per_kind must be positive");
        if (synth.jigsaw_grid == 0 || benchmark.image.height % synth.jigsaw_grid || benchmark.image.width % synth.jigsaw_grid)
            throw ConfigError("calibration.jigsaw_grid must divide the image size");
        if (synth.pixelate_factor == 0) throw ConfigError("calibration.pixelate_factor must be positive");
        if (!(synth.speckle_sd >= 0)) throw ConfigError("calibration.speckle_sd must be non-negative");
        if (ae_bottleneck == 0) throw ConfigError("autoencoder.bottleneck must be positive");
    }
};

namespace detail {

class ConfigReader {
public:
    ConfigReader(std::string source, std::set<std::string> overridden)
        : source_(std::move(source)), overridden_(std::move(overridden)) {}

    [[noreturn]] void fail(const YAML::Node& n, const std::string& path, const std::string& msg) const {
        std::ostringstream os;
        if (overridden_.count(path)) os << "--set " << path;
        else if (n.IsDefined() && n.Mark().line >= 0)
            os << source_ << ':' << n.Mark().line + 1 << ':' << n.Mark().column + 1;
        else os << source_;
        os << ": " << path << ": " << msg;
        throw ConfigError(os.str());
    }

    template <typename T>
    T scalar(const YAML::Node& n, const std::string& path) const {
        if (!n.IsScalar()) fail(n, path, "expected a scalar value");
        try {
            return n.as<T>();
        } catch (const YAML::Exception&) {
            fail(n, path, "cannot parse '" + n.Scalar() + "'");
        }
    }

    std::size_t count(const YAML::Node& n, const std::string& path) const {
        const auto v = scalar<long long>(n, path);
        if (v < 0) fail(n, path, "must be non-negative");
        return static_cast<std::size_t>(v);
    }

    template <typename T>
    std::vector<T> list(const YAML::Node& n, const std::string& path) const {
        if (!n.IsSequence()) fail(n, path, "expected a list");
        std::vector<T> out;
        for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar<T>(n[i], path + "[" + std::to_string(i) + "]"));
        return out;
    }

    using Handler = std::function<void(const YAML::Node&, const std::string&)>;

    void section(const YAML::Node& n, const std::string& path, const std::map<std::string, Handler>& keys) const {
        if (!n.IsMap()) fail(n, path.empty() ? "<root>" : path, "expected a mapping");
        for (auto it = n.begin(); it != n.end(); ++it) {
            const std::string key = it->first.as<std::string>();
            const std::string full = path.empty() ? key : path + "." + key;
            const auto h = keys.find(key);
            if (h == keys.end()) fail(it->first, full, "unknown key");
            h->second(it->second, full);
        }
    }

private:
    std::string source_;
    std::set<std::string> overridden_;
};

inline void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i, const YAML::Node& value) {
    if (i + 1 == parts.size()) {
        node[parts[i]] = value;
        return;
    }
    if (!node[parts[i]] || node[parts[i]].IsNull()) node[parts[i]] = YAML::Node(YAML::NodeType::Map);
    YAML::Node child = node[parts[i]];
    if (!child.IsMap()) throw ConfigError("--set " + parts[i] + ": not a section");
    set_path(child, parts, i + 1, value);
}

}  // namespace detail

/// Applies `key.path=value` overrides to a YAML tree, returning the overridden paths.
inline std::set<std::string> apply_overrides(YAML::Node& root, const std::vector<std::string>& sets) {
    std::set<std::string> paths;
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        const std::string key = s.substr(0, eq);
        std::vector<std::string> parts;
        std::stringstream ss(key);
        for (std::string p; std::getline(ss, p, '.');) {
            if (p.empty()) throw ConfigError("--set: malformed key '" + key + "'");
            parts.push_back(p);
        }
        YAML::Node value;
        try {
            value = YAML::Load(s.substr(eq + 1));
        } catch (const YAML::Exception& e) {
            throw ConfigError("--set " + key + ": " + e.msg);
        }
        detail::set_path(root, parts, 0, value);
        paths.insert(key);
    }
    return paths;
}

inline RunConfig parse_config(const YAML::Node& root, const std::string& source = "<config>",
                              std::set<std::string> overridden = {}) {
    detail::ConfigReader r(source, std::move(overridden));
    if (!root.IsDefined() || root.IsNull()) return RunConfig{};
    if (!root.IsMap()) r.fail(root, "<root>", "expected a mapping");

    const YAML::Node ver = root["schema_version"];
    if (!ver) throw ConfigError(source + ": missing schema_version (current version is " +
                                std::to_string(kConfigSchemaVersion) + ")");
    if (r.scalar<int>(ver, "schema_version") != kConfigSchemaVersion) {
        r.fail(ver, "schema_version", "unsupported version (expected " + std::to_string(kConfigSchemaVersion) + ")");
    }
    RunConfig c;
    if (const YAML::Node p = root["preset"]) {
        try {
            c = RunConfig::from_preset(r.scalar<std::string>(p, "preset"));
        } catch (const ConfigError& e) {
            r.fail(p, "preset", e.what());
        }
    }

    using H = detail::ConfigReader::Handler;
    auto train_keys = [&](TrainConfig& t) {
        return std::map<std::string, H>{
            {"epochs", [&](auto& n, auto& p) { t.epochs = r.count(n, p); }},
            {"batch_size", [&](auto& n, auto& p) { t.batch_size = r.count(n, p); }},
            {"optimizer",
             [&](auto& n, auto& p) {
                 const auto v = r.scalar<std::string>(n, p);
                 if (v == "sgd") t.optimizer = OptimizerKind::sgd_momentum;
                 else if (v == "adam") t.optimizer = OptimizerKind::adam;
                 else r.fail(n, p, "expected sgd or adam");
             }},
            {"learning_rate", [&](auto& n, auto& p) { t.learning_rate = r.scalar<double>(n, p); }},
            {"momentum", [&](auto& n, auto& p) { t.momentum = r.scalar<double>(n, p); }},
            {"weight_decay", [&](auto& n, auto& p) { t.weight_decay = r.scalar<double>(n, p); }},
            {"beta1", [&](auto& n, auto& p) { t.beta1 = r.scalar<double>(n, p); }},
            {"beta2", [&](auto& n, auto& p) { t.beta2 = r.scalar<double>(n, p); }},
            {"adam_eps", [&](auto& n, auto& p) { t.adam_eps = r.scalar<double>(n, p); }},
            {"lr_drop_epochs",
             [&](auto& n, auto& p) {
                 t.lr_drop_epochs.clear();
                 for (long long v : r.list<long long>(n, p)) {
                     if (v < 0) r.fail(n, p, "epochs must be non-negative");
                     t.lr_drop_epochs.push_back(static_cast<std::size_t>(v));
                 }
             }},
            {"lr_drop_factor", [&](auto& n, auto& p) { t.lr_drop_factor = r.scalar<double>(n, p); }},
            {"random_flip", [&](auto& n, auto& p) { t.random_flip = r.scalar<bool>(n, p); }},
            {"random_crop", [&](auto& n, auto& p) { t.random_crop = r.scalar<bool>(n, p); }},
            {"crop_pad", [&](auto& n, auto& p) { t.crop_pad = r.count(n, p); }},
            {"bn_momentum", [&](auto& n, auto& p) { t.bn_momentum = r.scalar<double>(n, p); }},
            {"seed", [&](auto& n, auto& p) { t.seed = r.scalar<std::uint64_t>(n, p); }},
        };
    };
    // a new epoch count without explicit drops moves the drops to 50% and 75%
    auto rescale_drops = [](const YAML::Node& n, TrainConfig& t) {
        if (n["epochs"] && !n["lr_drop_epochs"] && !t.lr_drop_epochs.empty())
            t.lr_drop_epochs = {t.epochs / 2, t.epochs * 3 / 4};
    };
    auto validated = [&](const YAML::Node& n, const std::string& p, auto&& check) {
        try {
            check();
        } catch (const ConfigError& e) {
            r.fail(n, p, e.what());
        }
    };

    std::map<std::string, H> top{
        {"schema_version", [](auto&, auto&) {}},
        {"preset", [](auto&, auto&) {}},
        {"variant",
         [&](auto& n, auto& p) {
             try {
                 c.variant = parse_variant(r.scalar<std::string>(n, p));
             } catch (const ConfigError& e) {
                 r.fail(n, p, e.what());
             }
         }},
        {"seed", [&](auto& n, auto& p) { c.seed = r.scalar<std::uint64_t>(n, p); }},
        {"data_dir", [&](auto& n, auto& p) { c.data_dir = r.scalar<std::string>(n, p); }},
        {"work_dir", [&](auto& n, auto& p) { c.work_dir = r.scalar<std::string>(n, p); }},
        {"benchmark",
         [&](auto& n, auto& p) {
             auto& b = c.benchmark;
             r.section(n, p,
                       {{"classes", [&](auto& n, auto& p) { b.classes = r.count(n, p); }},
                        {"channels", [&](auto& n, auto& p) { b.image.channels = r.count(n, p); }},
                        {"height", [&](auto& n, auto& p) { b.image.height = r.count(n, p); }},
                        {"width", [&](auto& n, auto& p) { b.image.width = r.count(n, p); }},
                        {"n_train", [&](auto& n, auto& p) { b.n_train = r.count(n, p); }},
                        {"n_val", [&](auto& n, auto& p) { b.n_val = r.count(n, p); }},
                        {"n_test", [&](auto& n, auto& p) { b.n_test = r.count(n, p); }},
                        {"n_ood", [&](auto& n, auto& p) { b.n_ood = r.count(n, p); }},
                        {"noise_lo", [&](auto& n, auto& p) { b.noise_lo = r.scalar<double>(n, p); }},
                        {"noise_hi", [&](auto& n, auto& p) { b.noise_hi = r.scalar<double>(n, p); }}});
             validated(n, p, [&] { b.validate(); });
         }},
        {"classifier",
         [&](auto& n, auto& p) {
             auto keys = train_keys(c.classifier);
             keys["widths"] = [&](auto& n, auto& p) {
                 const auto w = r.list<long long>(n, p);
                 if (w.size() != 3) r.fail(n, p, "expected three widths");
                 for (std::size_t i = 0; i < 3; ++i) {
                     if (w[i] <= 0) r.fail(n, p, "widths must be positive");
                     c.classifier_widths[i] = static_cast<std::size_t>(w[i]);
                 }
             };
             r.section(n, p, keys);
             rescale_drops(n, c.classifier);
             validated(n, p, [&] { c.classifier.validate(); });
         }},
        {"autoencoder",
         [&](auto& n, auto& p) {
             auto keys = train_keys(c.autoencoder);
             keys["bottleneck"] = [&](auto& n, auto& p) { c.ae_bottleneck = r.count(n, p); };
             r.section(n, p, keys);
             rescale_drops(n, c.autoencoder);
             validated(n, p, [&] { c.autoencoder.validate(); });
         }},
        {"calibration",
         [&](auto& n, auto& p) {
             r.section(n, p,
                       {{"grid", [&](auto& n, auto& p) { c.epsilon_grid = r.list<double>(n, p); }},
                        {"pool_per_kind", [&](auto& n, auto& p) { c.pool_per_kind = r.count(n, p); }},
                        {"seed", [&](auto& n, auto& p) { c.calibration_seed = r.scalar<std::uint64_t>(n, p); }},
                        {"speckle_sd", [&](auto& n, auto& p) { c.synth.speckle_sd = r.scalar<double>(n, p); }},
                        {"jigsaw_grid", [&](auto& n, auto& p) { c.synth.jigsaw_grid = r.count(n, p); }},
                        {"pixelate_factor", [&](auto& n, auto& p) { c.synth.pixelate_factor = r.count(n, p); }}});
         }},
        {"scoring",
         [&](auto& n, auto& p) {
             r.section(n, p,
                       {{"score_sign",
                         [&](auto& n, auto& p) {
                             const auto v = r.scalar<std::string>(n, p);
                             if (v == "consistent") c.options.paper_literal_sign = false;
                             else if (v == "paper-literal") c.options.paper_literal_sign = true;
                             else r.fail(n, p, "expected consistent or paper-literal");
                         }},
                        {"stop_gradient", [&](auto& n, auto& p) { c.options.stop_gradient_recon = r.scalar<bool>(n, p); }},
                        {"clamp_perturbed", [&](auto& n, auto& p) { c.options.clamp_perturbed = r.scalar<bool>(n, p); }}});
         }},
    };
    r.section(root, "", top);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return c;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& sets = {}) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path);
    } catch (const YAML::BadFile&) {
        throw ConfigError("cannot open config file " + path);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(path + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                          ": " + e.msg);
    }
    if (!root.IsDefined() || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    const auto paths = apply_overrides(root, sets);
    return parse_config(root, path, paths);
}

/// Defaults plus overrides, for runs without a config file.
inline RunConfig default_config(const std::vector<std::string>& sets = {}) {
    YAML::Node root(YAML::NodeType::Map);
    root["schema_version"] = kConfigSchemaVersion;
    const auto paths = apply_overrides(root, sets);
    return parse_config(root, "<defaults>", paths);
}

/// Config as YAML text (stored in checkpoints).
inline std::string dump_config(const RunConfig& c) {
    YAML::Emitter e;
    auto train = [&](const char* name, const TrainConfig& t, auto&& extra) {
        e << YAML::Key << name << YAML::Value << YAML::BeginMap;
        e << YAML::Key << "epochs" << YAML::Value << t.epochs;
        e << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
        e << YAML::Key << "optimizer" << YAML::Value << (t.optimizer == OptimizerKind::adam ? "adam" : "sgd");
        e << YAML::Key << "learning_rate" << YAML::Value << t.learning_rate;
        e << YAML::Key << "momentum" << YAML::Value << t.momentum;
        e << YAML::Key << "weight_decay" << YAML::Value << t.weight_decay;
        e << YAML::Key << "beta1" << YAML::Value << t.beta1;
        e << YAML::Key << "beta2" << YAML::Value << t.beta2;
        e << YAML::Key << "adam_eps" << YAML::Value << t.adam_eps;
        e << YAML::Key << "lr_drop_epochs" << YAML::Value << YAML::Flow << t.lr_drop_epochs;
        e << YAML::Key << "lr_drop_factor" << YAML::Value << t.lr_drop_factor;
        e << YAML::Key << "random_flip" << YAML::Value << t.random_flip;
        e << YAML::Key << "random_crop" << YAML::Value << t.random_crop;
        e << YAML::Key << "crop_pad" << YAML::Value << t.crop_pad;
        e << YAML::Key << "bn_momentum" << YAML::Value << t.bn_momentum;
        e << YAML::Key << "seed" << YAML::Value << t.seed;
        extra();
        e << YAML::EndMap;
    };
    e.SetDoublePrecision(17);
    e << YAML::BeginMap;
    e << YAML::Key << "schema_version" << YAML::Value << c.schema_version;
    e << YAML::Key << "preset" << YAML::Value << c.preset;
    e << YAML::Key << "variant" << YAML::Value << to_string(c.variant);
    e << YAML::Key << "seed" << YAML::Value << c.seed;
    e << YAML::Key << "data_dir" << YAML::Value << c.data_dir;
    e << YAML::Key << "work_dir" << YAML::Value << c.work_dir;
    e << YAML::Key << "benchmark" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "classes" << YAML::Value << c.benchmark.classes;
    e << YAML::Key << "channels" << YAML::Value << c.benchmark.image.channels;
    e << YAML::Key << "height" << YAML::Value << c.benchmark.image.height;
    e << YAML::Key << "width" << YAML::Value << c.benchmark.image.width;
    e << YAML::Key << "n_train" << YAML::Value << c.benchmark.n_train;
    e << YAML::Key << "n_val" << YAML::Value << c.benchmark.n_val;
    e << YAML::Key << "n_test" << YAML::Value << c.benchmark.n_test;
    e << YAML::Key << "n_ood" << YAML::Value << c.benchmark.n_ood;
    e << YAML::Key << "noise_lo" << YAML::Value << c.benchmark.noise_lo;
    e << YAML::Key << "noise_hi" << YAML::Value << c.benchmark.noise_hi;
    e << YAML::EndMap;
    train("classifier", c.classifier, [&] {
        e << YAML::Key << "widths" << YAML::Value << YAML::Flow
          << std::vector<std::size_t>(c.classifier_widths.begin(), c.classifier_widths.end());
    });
    train("autoencoder", c.autoencoder, [&] { e << YAML::Key << "bottleneck" << YAML::Value << c.ae_bottleneck; });
    e << YAML::Key << "calibration" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "grid" << YAML::Value << YAML::Flow << c.epsilon_grid;
    e << YAML::Key << "pool_per_kind" << YAML::Value << c.pool_per_kind;
    e << YAML::Key << "seed" << YAML::Value << c.calibration_seed;
    e << YAML::Key << "speckle_sd" << YAML::Value << c.synth.speckle_sd;
    e << YAML::Key << "jigsaw_grid" << YAML::Value << c.synth.jigsaw_grid;
    e << YAML::Key << "pixelate_factor" << YAML::Value << c.synth.pixelate_factor;
    e << YAML::EndMap;
    e << YAML::Key << "scoring" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "score_sign" << YAML::Value << (c.options.paper_literal_sign ? "paper-literal" : "consistent");
    e << YAML::Key << "stop_gradient" << YAML::Value << c.options.stop_gradient_recon;
    e << YAML::Key << "clamp_perturbed" << YAML::Value << c.options.clamp_perturbed;
    e << YAML::EndMap;
    e << YAML::EndMap;
    return e.c_str();
}

}  // namespace readood
