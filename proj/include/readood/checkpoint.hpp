#pragma once

// Binary checkpoint: "RDCK", u32 format version, u64 header length, JSON
// header, tensor payload, u32 crc32 over header and payload.

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "readood/scoring.hpp"
#include "readood/tensor_io.hpp"

namespace readood {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'C', 'K'};

struct Checkpoint {
    Variant variant = Variant::read_md;
    std::optional<ClassifierModel> classifier;
    std::optional<AutoencoderModel> autoencoder;
    std::optional<ClassStats> stats;
    std::optional<ComplexityBounds> bounds;
    std::optional<CalibrationResult> calibration;
    DetectorOptions options;
    std::string config_yaml;
    std::uint32_t content_hash = 0;  // filled on save and load

    std::string kind() const {
        if (classifier && autoencoder) return "detector";
        if (classifier) return "classifier";
        if (autoencoder) return "autoencoder";
        return "empty";
    }

    std::size_t parameter_count() const {
        return (classifier ? classifier->network().parameter_count() : 0) +
               (autoencoder ? autoencoder->network().parameter_count() : 0);
    }

    Detector detector() const {
        if (!classifier) throw DataError("checkpoint has no classifier; run train-clf");
        if (!autoencoder) throw DataError("checkpoint has no autoencoder; run train-ae");
        Detector d{variant, *classifier, *autoencoder, stats, bounds, calibration, options};
        return d;
    }

    static Checkpoint of(const Detector& d, std::string config_yaml = {}) {
        return {d.variant, d.classifier, d.autoencoder, d.stats, d.bounds, d.calibration, d.options,
                std::move(config_yaml)};
    }
};

namespace detail {

using Json = nlohmann::ordered_json;

inline Json image_json(const ImageSpec& s) { return {{"channels", s.channels}, {"height", s.height}, {"width", s.width}}; }
inline ImageSpec image_from(const Json& j) {
    return {j.at("channels").get<std::size_t>(), j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>()};
}

struct PayloadWriter {
    Json index = Json::array();
    std::string bytes;

    template <typename T>
    void add(const std::string& name, const Tensor<T>& t) {
        index.push_back({{"name", name}, {"dtype", static_cast<int>(dtype_of<T>())}, {"shape", t.shape()},
                         {"offset", bytes.size()}});
        bytes.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
    }
    void add_bindings(const std::string& prefix, const Bindings<float>& b) {
        for (const auto& [k, v] : b) add(prefix + k, v);
    }
};

struct PayloadReader {
    std::map<std::string, Json> index;
    const std::string& bytes;
    std::set<std::string> used;

    PayloadReader(const Json& idx, const std::string& b) : bytes(b) {
        for (const auto& e : idx) index[e.at("name").get<std::string>()] = e;
    }

    template <typename T>
    Tensor<T> get(const std::string& name) {
        const auto it = index.find(name);
        if (it == index.end()) throw DataError("checkpoint is missing tensor " + name);
        const Json& e = it->second;
        if (e.at("dtype").get<int>() != static_cast<int>(dtype_of<T>())) throw DataError("tensor " + name + " has the wrong dtype");
        Tensor<T> t(e.at("shape").get<Shape>());
        const auto off = e.at("offset").get<std::size_t>();
        const std::size_t n = t.size() * sizeof(T);
        if (off > bytes.size() || n > bytes.size() - off) throw DataError("tensor " + name + " runs past the payload");
        std::memcpy(t.data(), bytes.data() + off, n);
        used.insert(name);
        return t;
    }

    // Overwrites every tensor of `b` with the stored one of equal shape.
    void fill(const std::string& prefix, Bindings<float>& b) {
        for (auto& [k, v] : b) {
            Tensor<float> t = get<float>(prefix + k);
            if (t.shape() != v.shape()) {
                throw DataError("tensor " + prefix + k + " has shape " + to_string(t.shape()) + ", model expects " +
                                to_string(v.shape()));
            }
            v = std::move(t);
        }
    }
};

inline Tensor<double> matrix_tensor(const SquareMatrix& m) { return Tensor<double>(Shape{m.n, m.n}, m.a); }
inline SquareMatrix matrix_from(const Tensor<double>& t) {
    if (t.rank() != 2 || t.dim(0) != t.dim(1)) throw DataError("stored matrix is not square");
    SquareMatrix m(t.dim(0));
    m.a = t.storage();
    return m;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, Checkpoint& ck) {
    using detail::Json;
    detail::PayloadWriter pw;
    Json h;
    h["format_version"] = kCheckpointVersion;
    h["kind"] = ck.kind();
    h["variant"] = to_string(ck.variant);
    if (ck.classifier) {
        const auto& s = ck.classifier->spec();
        h["classifier"] = {{"image", detail::image_json(s.image)}, {"classes", s.classes}, {"widths", s.widths},
                           {"head", to_string(s.head)}};
        pw.add_bindings("clf.param/", ck.classifier->network().params);
        pw.add_bindings("clf.state/", ck.classifier->network().state);
    }
    if (ck.autoencoder) {
        const auto& s = ck.autoencoder->spec();
        h["autoencoder"] = {{"image", detail::image_json(s.image)}, {"widths", s.widths}, {"bottleneck", s.bottleneck}};
        pw.add_bindings("ae.param/", ck.autoencoder->network().params);
        pw.add_bindings("ae.state/", ck.autoencoder->network().state);
    }
    if (ck.stats) {
        const auto& st = *ck.stats;
        h["stats"] = {{"classes", st.classes()}, {"dim", st.dim()}, {"reg", st.reg}};
        Tensor<double> means(Shape{st.classes(), st.dim()});
        for (std::size_t i = 0; i < st.classes(); ++i)
            std::copy(st.means[i].begin(), st.means[i].end(), means.data() + i * st.dim());
        pw.add("stats/means", means);
        pw.add("stats/covariance", detail::matrix_tensor(st.covariance));
        pw.add("stats/precision", detail::matrix_tensor(st.precision));
        pw.add("stats/factor", detail::matrix_tensor(st.factor));
    }
    if (ck.bounds) {
        h["bounds"] = {{"lower", ck.bounds->lower}, {"upper", ck.bounds->upper}, {"trim", ck.bounds->trim},
                       {"compressor", ck.bounds->compressor}};
    }
    if (ck.calibration) {
        const auto& c = *ck.calibration;
        h["calibration"] = {{"epsilon", c.epsilon}, {"tau", c.tau},         {"grid", c.grid},
                            {"mean_fpr", c.mean_fpr}, {"fpr_table", c.fpr_table}, {"id_tpr", c.id_tpr}};
    }
    h["options"] = {{"stop_gradient", ck.options.stop_gradient_recon},
                    {"clamp_perturbed", ck.options.clamp_perturbed},
                    {"score_sign", ck.options.paper_literal_sign ? "paper-literal" : "consistent"}};
    h["config"] = ck.config_yaml;
    h["tensors"] = pw.index;
    const std::string header = h.dump();

    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(header.data()), static_cast<uInt>(header.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(pw.bytes.data()), static_cast<uInt>(pw.bytes.size()));
    ck.content_hash = static_cast<std::uint32_t>(crc);

    const std::uint64_t hlen = header.size(), plen = pw.bytes.size();
    os.write(kCheckpointMagic, 4);
    os.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(reinterpret_cast<const char*>(&plen), 8);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    os.write(pw.bytes.data(), static_cast<std::streamsize>(pw.bytes.size()));
    os.write(reinterpret_cast<const char*>(&ck.content_hash), 4);
    if (!os) throw Error("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
    using detail::Json;
    char magic[4];
    detail::read_exact(is, magic, 4, "checkpoint magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("not a checkpoint file (bad magic)");
    std::uint32_t version;
    std::uint64_t hlen, plen;
    detail::read_exact(is, &version, 4, "checkpoint version");
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    detail::read_exact(is, &hlen, 8, "header length");
    detail::read_exact(is, &plen, 8, "payload length");
    if (hlen > (1ull << 30) || plen > (1ull << 34)) throw DataError("corrupt checkpoint lengths");
    std::string header(hlen, '\0'), payload(plen, '\0');
    detail::read_exact(is, header.data(), hlen, "checkpoint header");
    detail::read_exact(is, payload.data(), plen, "checkpoint payload");
    std::uint32_t stored;
    detail::read_exact(is, &stored, 4, "checkpoint hash");
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(header.data()), static_cast<uInt>(header.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()));
    if (static_cast<std::uint32_t>(crc) != stored) throw DataError("checkpoint content hash mismatch (file corrupt)");

    Checkpoint ck;
    ck.content_hash = stored;
    try {
        const Json h = Json::parse(header);
        detail::PayloadReader pr(h.at("tensors"), payload);
        ck.variant = parse_variant(h.at("variant").get<std::string>());
        Rng scratch(0);
        if (h.contains("classifier")) {
            const auto& j = h.at("classifier");
            const auto head = j.at("head").get<std::string>();
            if (head != "standard" && head != "decomposed") throw DataError("unknown head kind " + head);
            ClassifierSpec s{detail::image_from(j.at("image")), j.at("classes").get<std::size_t>(),
                             j.at("widths").get<std::array<std::size_t, 3>>(),
                             head == "standard" ? HeadKind::standard : HeadKind::decomposed};
            ck.classifier.emplace(s, scratch);
            pr.fill("clf.param/", ck.classifier->network().params);
            pr.fill("clf.state/", ck.classifier->network().state);
        }
        if (h.contains("autoencoder")) {
            const auto& j = h.at("autoencoder");
            AutoencoderSpec s{detail::image_from(j.at("image")), j.at("widths").get<std::array<std::size_t, 3>>(),
                              j.at("bottleneck").get<std::size_t>()};
            ck.autoencoder.emplace(s, scratch);
            pr.fill("ae.param/", ck.autoencoder->network().params);
            pr.fill("ae.state/", ck.autoencoder->network().state);
        }
        if (h.contains("stats")) {
            ClassStats st;
            const Tensor<double> means = pr.get<double>("stats/means");
            if (means.rank() != 2) throw DataError("stored class means must be a matrix");
            for (std::size_t i = 0; i < means.dim(0); ++i)
                st.means.emplace_back(means.data() + i * means.dim(1), means.data() + (i + 1) * means.dim(1));
            st.covariance = detail::matrix_from(pr.get<double>("stats/covariance"));
            st.precision = detail::matrix_from(pr.get<double>("stats/precision"));
            st.factor = detail::matrix_from(pr.get<double>("stats/factor"));
            st.reg = h.at("stats").at("reg").get<double>();
            if (st.covariance.n != means.dim(1)) throw DataError("stored class statistics have inconsistent sizes");
            ck.stats = std::move(st);
        }
        if (h.contains("bounds")) {
            const auto& j = h.at("bounds");
            ck.bounds = ComplexityBounds{j.at("lower").get<double>(), j.at("upper").get<double>(),
                                         j.at("trim").get<double>(), j.at("compressor").get<std::string>()};
            if (ck.bounds->compressor != kCompressorId) {
                throw DataError("complexity bounds were computed with " + ck.bounds->compressor + ", this build uses " +
                                kCompressorId);
            }
        }
        if (h.contains("calibration")) {
            const auto& j = h.at("calibration");
            CalibrationResult c;
            c.epsilon = j.at("epsilon").get<double>();
            c.tau = j.at("tau").get<double>();
            c.grid = j.at("grid").get<std::vector<double>>();
            c.mean_fpr = j.at("mean_fpr").get<std::vector<double>>();
            c.fpr_table = j.at("fpr_table").get<std::vector<std::map<std::string, double>>>();
            c.id_tpr = j.at("id_tpr").get<double>();
            ck.calibration = std::move(c);
        }
        const auto& o = h.at("options");
        ck.options.stop_gradient_recon = o.at("stop_gradient").get<bool>();
        ck.options.clamp_perturbed = o.at("clamp_perturbed").get<bool>();
        ck.options.paper_literal_sign = o.at("score_sign").get<std::string>() == "paper-literal";
        ck.config_yaml = h.at("config").get<std::string>();
        if (pr.used.size() != pr.index.size()) throw DataError("checkpoint has tensors the model does not use");
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    try {
        return read_checkpoint(is);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

}  // namespace readood
