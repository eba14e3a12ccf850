#pragma once

// Ablation-style evaluation of a calibrated detector against named OOD sets.

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "readood/metrics.hpp"
#include "readood/scoring.hpp"

namespace readood {

enum class EvalVariant { cla_only, rec_only, aggregated, adjusted, adjusted_perturbed };

inline constexpr std::array<EvalVariant, 5> kEvalVariants{EvalVariant::cla_only, EvalVariant::rec_only,
                                                          EvalVariant::aggregated, EvalVariant::adjusted,
                                                          EvalVariant::adjusted_perturbed};

inline std::string to_string(EvalVariant v) {
    switch (v) {
        case EvalVariant::cla_only: return "cla-only";
        case EvalVariant::rec_only: return "rec-only";
        case EvalVariant::aggregated: return "aggregated";
        case EvalVariant::adjusted: return "aggregated+adjust";
        case EvalVariant::adjusted_perturbed: return "aggregated+adjust+perturb";
    }
    return "?";
}

inline ScoreOptions score_options(EvalVariant v) {
    switch (v) {
        case EvalVariant::cla_only: return {true, false, false};
        case EvalVariant::rec_only: return {false, true, false};
        case EvalVariant::aggregated: return {true, true, false};
        default: return {true, true, true};
    }
}

struct NamedSet {
    std::string name;
    Tensor<float> images;
};

struct EvalRow {
    std::string id_dataset;
    std::string ood_dataset;
    std::string variant;
    double auroc = 0.0;
    double fpr95 = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    double tau = 0.0;
    double epsilon = 0.0;

    bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
    std::string detector;  // read-md / read-ed
    std::vector<EvalRow> rows;
    std::vector<EvalRow> average;  // one per variant, mean over OOD sets

    const EvalRow& row(const std::string& ood, const std::string& variant) const {
        for (const auto& r : rows)
            if (r.ood_dataset == ood && r.variant == variant) return r;
        throw Error("no report row for " + ood + " / " + variant);
    }
    const EvalRow& mean_row(const std::string& variant) const {
        for (const auto& r : average)
            if (r.variant == variant) return r;
        throw Error("no average row for " + variant);
    }
    bool operator==(const EvalReport&) const = default;
};


/// Score arrays per variant for one batch.
inline std::vector<std::vector<double>> variant_scores(const Detector& det, const Prepared& p,
                                                       std::span<const EvalVariant> variants, double epsilon) {
    std::optional<Tensor<double>> zp;
    std::vector<std::vector<double>> out;
    for (auto v : variants) {
        const Tensor<double>* z = &p.z;
        if (v == EvalVariant::adjusted_perturbed && epsilon > 0) {
            if (!zp) zp = perturbed_latents(det, p, epsilon);
            z = &*zp;
        }
        out.push_back(final_scores(score_latents(det, p, *z, score_options(v))));
    }
    return out;
}

inline EvalReport evaluate_suite(const Detector& det, const NamedSet& id, std::span<const NamedSet> oods,
                                 std::span<const EvalVariant> variants = kEvalVariants) {
    if (!det.calibration) throw Error("detector is not calibrated; run calibrate");
    if (oods.empty()) throw DataError("evaluation needs at least one OOD set");
    const double eps = det.calibration->epsilon;
    auto with_context = [](const std::string& name, auto&& f) {
        try {
            return f();
        } catch (const DataError& e) {
            throw DataError(name + ": " + e.what());
        } catch (const Error& e) {
            throw Error(name + ": " + e.what());
        }
    };
    const auto id_scores = with_context(id.name, [&] { return variant_scores(det, prepare(det, id.images), variants, eps); });
    EvalReport rep;
    rep.detector = to_string(det.variant);
    for (const auto& o : oods) {
        const auto ood_scores =
            with_context(o.name, [&] { return variant_scores(det, prepare(det, o.images), variants, eps); });
        for (std::size_t v = 0; v < variants.size(); ++v) {
            EvalRow r;
            r.id_dataset = id.name;
            r.ood_dataset = o.name;
            r.variant = to_string(variants[v]);
            r.auroc = auroc(id_scores[v], ood_scores[v]);
            r.fpr95 = fpr_at_tpr(id_scores[v], ood_scores[v]);
            r.n_id = id_scores[v].size();
            r.n_ood = ood_scores[v].size();
            r.tau = threshold_at_tpr(id_scores[v]);
            r.epsilon = variants[v] == EvalVariant::adjusted_perturbed ? eps : 0.0;
            rep.rows.push_back(r);
        }
    }
    for (std::size_t v = 0; v < variants.size(); ++v) {
        EvalRow a;
        a.id_dataset = id.name;
        a.ood_dataset = "average";
        a.variant = to_string(variants[v]);
        std::size_t k = 0;
        for (const auto& r : rep.rows) {
            if (r.variant != a.variant) continue;
            a.auroc += r.auroc;
            a.fpr95 += r.fpr95;
            a.n_id = r.n_id;
            a.n_ood += r.n_ood;
            a.tau = r.tau;
            a.epsilon = r.epsilon;
            ++k;
        }
        a.auroc /= static_cast<double>(k);
        a.fpr95 /= static_cast<double>(k);
        rep.average.push_back(a);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report output

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// RFC 4180 field quoting.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline void write_csv(std::ostream& os, const EvalReport& rep) {
    os << "id_dataset,ood_dataset,variant,auroc,fpr95,n_id,n_ood,tau,epsilon\r\n";
    auto line = [&](const EvalRow& r) {
        os << csv_field(r.id_dataset) << ',' << csv_field(r.ood_dataset) << ',' << csv_field(r.variant) << ','
           << format_double(r.auroc) << ',' << format_double(r.fpr95) << ',' << r.n_id << ',' << r.n_ood << ','
           << format_double(r.tau) << ',' << format_double(r.epsilon) << "\r\n";
    };
    for (const auto& r : rep.rows) line(r);
    for (const auto& r : rep.average) line(r);
}

inline nlohmann::ordered_json to_json(const EvalRow& r) {
    nlohmann::ordered_json j;
    j["id_dataset"] = r.id_dataset;
    j["ood_dataset"] = r.ood_dataset;
    j["variant"] = r.variant;
    j["auroc"] = r.auroc;
    j["fpr95"] = r.fpr95;
    j["n_id"] = r.n_id;
    j["n_ood"] = r.n_ood;
    j["tau"] = r.tau;
    j["epsilon"] = r.epsilon;
    return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& rep) {
    nlohmann::ordered_json j;
    j["detector"] = rep.detector;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rep.rows) j["rows"].push_back(to_json(r));
    j["average"] = nlohmann::ordered_json::array();
    for (const auto& r : rep.average) j["average"].push_back(to_json(r));
    return j;
}

/// Human-readable table.
inline void print_report(std::ostream& os, const EvalReport& rep) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s %-28s %8s %8s\n", "ood", "variant", "AUROC", "FPR95");
    os << rep.detector << '\n' << buf;
    for (const auto* rows : {&rep.rows, &rep.average})
        for (const auto& r : *rows) {
            std::snprintf(buf, sizeof buf, "%-12s %-28s %8.4f %8.4f\n", r.ood_dataset.c_str(), r.variant.c_str(),
                          r.auroc, r.fpr95);
            os << buf;
        }
}

/// Histogram of score sets as whitespace-separated columns (bin center, counts...).
inline void write_histogram(std::ostream& os, const std::vector<std::pair<std::string, std::vector<double>>>& sets,
                            std::size_t bins = 50) {
    if (sets.empty() || bins == 0) throw Error("histogram needs score sets and a positive bin count");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [_, s] : sets)
        for (double v : s) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!(hi > lo)) hi = lo + 1;
    const double w = (hi - lo) / static_cast<double>(bins);
    std::vector<std::vector<std::size_t>> counts(sets.size(), std::vector<std::size_t>(bins, 0));
    for (std::size_t k = 0; k < sets.size(); ++k)
        for (double v : sets[k].second) counts[k][std::min(bins - 1, static_cast<std::size_t>((v - lo) / w))]++;
    os << "# score";
    for (const auto& [name, _] : sets) os << ' ' << name;
    os << '\n';
    for (std::size_t b = 0; b < bins; ++b) {
        os << format_double(lo + (static_cast<double>(b) + 0.5) * w);
        for (std::size_t k = 0; k < sets.size(); ++k) os << ' ' << counts[k][b];
        os << '\n';
    }
}

}  // namespace readood
