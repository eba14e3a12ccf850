#pragma once

// Detection metrics over score arrays where higher means more ID-like.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "readood/error.hpp"

namespace readood {

/// Probability that an ID score beats an OOD score, ties at half credit.
/// Rank-sum form, O(n log n).
inline double auroc(std::span<const double> id, std::span<const double> ood) {
    if (id.empty() || ood.empty()) throw DataError("auroc needs non-empty ID and OOD score sets");
    struct Item {
        double v;
        bool is_id;
    };
    std::vector<Item> all;
    all.reserve(id.size() + ood.size());
    for (double v : id) all.push_back({v, true});
    for (double v : ood) all.push_back({v, false});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
    // sum over ID of (#ood below + 0.5 #ood equal), accumulated per tie group
    double wins = 0;
    std::size_t ood_below = 0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i, n_id = 0, n_ood = 0;
        while (j < all.size() && all[j].v == all[i].v) {
            (all[j].is_id ? n_id : n_ood)++;
            ++j;
        }
        wins += static_cast<double>(n_id) * (static_cast<double>(ood_below) + 0.5 * static_cast<double>(n_ood));
        ood_below += n_ood;
        i = j;
    }
    return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

/// Largest threshold accepting at least `tpr` of the ID scores: the
/// (floor((1-tpr) n) + 1)-th smallest score.
inline double threshold_at_tpr(std::span<const double> id, double tpr = 0.95) {
    if (id.empty()) throw DataError("threshold needs a non-empty ID score set");
    if (!(tpr > 0 && tpr <= 1)) throw Error("target TPR must lie in (0, 1]");
    std::vector<double> s(id.begin(), id.end());
    const double n = static_cast<double>(s.size());
    const auto drop = static_cast<std::size_t>(std::floor((1.0 - tpr) * n + 1e-9));
    std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(drop), s.end());
    return s[drop];
}

/// Fraction of `scores` accepted as ID at threshold `tau`.
inline double accept_rate(std::span<const double> scores, double tau) {
    if (scores.empty()) throw DataError("accept rate of an empty score set");
    const auto k = std::count_if(scores.begin(), scores.end(), [tau](double v) { return v >= tau; });
    return static_cast<double>(k) / static_cast<double>(scores.size());
}

inline double fpr_at_tpr(std::span<const double> id, std::span<const double> ood, double tpr = 0.95) {
    if (ood.empty()) throw DataError("fpr_at_tpr needs a non-empty OOD score set");
    return accept_rate(ood, threshold_at_tpr(id, tpr));
}

}  // namespace readood
