// End-to-end acceptance run on the generated benchmark. Prints one PASS/FAIL
// line per criterion and exits nonzero if any fails. "check" lines are
// diagnostics and don't affect the exit status.
// usage: acceptance [log file]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "op_cases.hpp"
#include "readood/checkpoint.hpp"
#include "readood/finite_diff.hpp"
#include "readood/pipeline.hpp"

using namespace readood;

namespace {

// tolerances
constexpr double kGradRelTol = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr int kGradCases = 50;
constexpr double kAurocTol = 1e-9;
constexpr double kMahalanobisRelTol = 1e-5;
constexpr int kScoreSets = 100;
constexpr int kRandomLatents = 1000;
constexpr double kRecHardAuroc = 0.80;
constexpr double kCombineSlack = 0.02;
constexpr double kEasyCharacterized = 0.80;
constexpr double kHardCharacterized = 0.80;
constexpr double kWithinLo = 0.88;
constexpr double kWithinHi = 1.00;
constexpr double kTargetTpr = 0.95;
constexpr double kMinValAccuracy = 0.95;
constexpr double kNoiseRejected = 0.90;
constexpr double kTrainAccepted = 0.90;

double now() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}
const double t_start = now();

std::ofstream log_file;
int failures = 0;

void emit(const std::string& line) {
    std::cout << line << std::endl;
    if (log_file) log_file << line << std::endl;
}

void verdict(const std::string& what, bool pass, const std::string& detail) {
    char t[32];
    std::snprintf(t, sizeof t, " [%.0fs]", now() - t_start);
    emit(what + (pass ? " PASS " : " FAIL ") + detail + t);
}

void criterion(int n, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    verdict("criterion " + std::to_string(n), pass, detail);
}

std::string fmt(double v, int digits = 4) {
    char b[48];
    std::snprintf(b, sizeof b, "%.*g", digits, v);
    return b;
}

// ---------------------------------------------------------------------------
// Oracles

double auroc_pairs(const std::vector<double>& id, const std::vector<double>& ood) {
    double w = 0;
    for (double a : id)
        for (double b : ood) w += a > b ? 1.0 : a == b ? 0.5 : 0.0;
    return w / (double(id.size()) * double(ood.size()));
}

// Largest observed threshold that keeps at least tpr of ID accepted, then the OOD share at or above it.
double fpr_by_counting(const std::vector<double>& id, const std::vector<double>& ood, double tpr) {
    std::vector<double> cand = id;
    std::sort(cand.rbegin(), cand.rend());
    double tau = cand.back();
    for (double c : cand) {
        std::size_t k = 0;
        for (double v : id) k += v >= c;
        if (double(k) >= tpr * double(id.size()) - 1e-9) {
            tau = c;
            break;
        }
    }
    std::size_t f = 0;
    for (double v : ood) f += v >= tau;
    return double(f) / double(ood.size());
}

// v^T A^-1 v by Gaussian elimination with partial pivoting.
double quad_by_elimination(const SquareMatrix& m, const std::vector<double>& v) {
    const std::size_t n = m.n;
    std::vector<std::vector<double>> a(n, std::vector<double>(n + 1));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) a[i][j] = m.a[i * n + j];
        a[i][n] = v[i];
    }
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t p = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
        std::swap(a[c], a[p]);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a[r][c] / a[c][c];
            for (std::size_t j = c; j <= n; ++j) a[r][j] -= f * a[c][j];
        }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = a[i][n];
        for (std::size_t j = i + 1; j < n; ++j) s -= a[i][j] * x[j];
        x[i] = s / a[i][i];
    }
    double q = 0;
    for (std::size_t i = 0; i < n; ++i) q += v[i] * x[i];
    return q;
}

// ---------------------------------------------------------------------------

void check_gradients() {
    double worst = 0;
    std::string worst_at;
    std::size_t kinds = 0;
    for (auto [op, training] : testing::op_kinds()) {
        ++kinds;
        Rng rng(5000 + static_cast<int>(op) * 2 + training);
        for (int t = 0; t < kGradCases; ++t) {
            auto c = testing::make_op_case(op, training, rng);
            const auto grads = gradient(c.graph, Feed<double>(c.bindings), c.loss, c.wrt, c.options);
            for (const auto& name : c.wrt) {
                const auto fd = finite_difference_gradient<double>(
                    [&](const Tensor<double>& v) {
                        auto bb = c.bindings;
                        bb[name] = v;
                        return evaluate(c.graph, Feed<double>(bb), c.options).value(c.loss).item();
                    },
                    c.bindings.at(name), kFdStep);
                const double e = relative_error(grads.at(name), fd);
                if (!(e <= worst)) worst = e, worst_at = c.label + " wrt " + name;
            }
        }
    }
    criterion(1, worst < kGradRelTol,
              std::to_string(kinds) + " op kinds x " + std::to_string(kGradCases) + " cases, max relative error " +
                  fmt(worst) + " (" + worst_at + "), tolerance " + fmt(kGradRelTol));
}

void check_oracles(const ClassStats& trained) {
    Rng rng(77);
    double worst_auroc = 0;
    std::size_t fpr_mismatch = 0;
    for (int s = 0; s < kScoreSets; ++s) {
        const std::size_t n = 20 + uniform_index(rng, 200), m = 1 + uniform_index(rng, 200);
        const bool coarse = s % 2 == 0;  // integer scores give plenty of ties
        auto draw = [&](double shift) { return coarse ? std::round(normal(rng, shift, 3.0)) : normal(rng, shift, 1.0); };
        std::vector<double> id(n), ood(m);
        for (auto& v : id) v = draw(1.0);
        for (auto& v : ood) v = draw(0.0);
        worst_auroc = std::max(worst_auroc, std::abs(auroc(id, ood) - auroc_pairs(id, ood)));
        fpr_mismatch += fpr_at_tpr(id, ood, kTargetTpr) != fpr_by_counting(id, ood, kTargetTpr);
    }
    double worst_mahal = 0;
    auto mahal = [&](const ClassStats& st, const std::vector<double>& v) {
        const double q = st.mahalanobis_sq(v), o = quad_by_elimination(st.covariance.plus_identity(st.reg), v);
        worst_mahal = std::max(worst_mahal, std::abs(q - o) / std::max(1.0, std::abs(o)));
    };
    for (int t = 0; t < kRandomLatents; ++t) {
        std::vector<double> v(trained.dim());
        for (auto& x : v) x = normal(rng);
        mahal(trained, v);
    }
    for (int t = 0; t < kScoreSets; ++t) {
        const std::size_t d = 2 + uniform_index(rng, 20);
        const auto z = random_normal<double>({3 * d, d}, rng);
        std::vector<std::size_t> labels(3 * d, 0);
        const auto st = ClassStats::fit(z, labels, 1);
        std::vector<double> v(d);
        for (auto& x : v) x = normal(rng);
        mahal(st, v);
    }
    criterion(2, worst_auroc <= kAurocTol && fpr_mismatch == 0 && worst_mahal <= kMahalanobisRelTol,
              "AUROC max |rank - pairwise| " + fmt(worst_auroc) + " on " + std::to_string(kScoreSets) +
                  " sets; fpr_at_tpr mismatches " + std::to_string(fpr_mismatch) + "; Mahalanobis max relative gap " +
                  fmt(worst_mahal));
}

void check_reduction(const ClassStats& trained) {
    ClassStats eye;
    eye.means = trained.means;
    eye.set_covariance(SquareMatrix::identity(trained.dim()), 0.0);
    Tensor<double> centers(Shape{trained.classes(), trained.dim()});
    for (std::size_t k = 0; k < trained.classes(); ++k)
        for (std::size_t t = 0; t < trained.dim(); ++t) centers[k * trained.dim() + t] = trained.means[k][t];
    Rng rng(78);
    std::size_t bad = 0;
    for (int t = 0; t < kRandomLatents; ++t) {
        const std::size_t k = uniform_index(rng, trained.classes());
        std::vector<double> z(trained.dim());
        for (std::size_t j = 0; j < z.size(); ++j) z[j] = trained.means[k][j] + normal(rng);
        const auto a = score_cla_md(z, eye), b = score_cla_ed(z, centers);
        bad += a.score != b.score || a.nearest != b.nearest;
    }
    criterion(3, bad == 0,
              std::to_string(bad) + " of " + std::to_string(kRandomLatents) +
                  " latents differ between identity-covariance Mahalanobis and Euclidean scores (trained means)");
}

void check_decomposed_head(const ClassifierModel& clf) {
    Rng rng(79);
    const auto& c = clf.centers();
    const std::size_t k = c.dim(0), d = c.dim(1);
    Tensor<float> z(Shape{std::size_t(kRandomLatents), d});
    for (int i = 0; i < kRandomLatents; ++i) {
        const std::size_t near = uniform_index(rng, k);
        for (std::size_t j = 0; j < d; ++j) z[i * d + j] = c[near * d + j] + static_cast<float>(normal(rng));
    }
    const auto pred = predict_from_logits(head_logits(clf, z));
    const auto zd = z.cast<double>();
    std::size_t bad = 0;
    for (int i = 0; i < kRandomLatents; ++i) {
        const std::span<const double> zi(zd.data() + i * d, d);
        bad += pred[i].label != score_cla_ed(zi, c).nearest;
    }
    criterion(10, bad == 0,
              std::to_string(bad) + " of " + std::to_string(kRandomLatents) +
                  " random latents where the head's prediction differs from the nearest learned center");
}

std::size_t count_character(const std::vector<double>& cx, const ComplexityBounds& b, OodCharacter want) {
    return std::count_if(cx.begin(), cx.end(), [&](double c) { return characterize(c, b) == want; });
}

double id_fraction(const std::vector<ScoreBreakdown>& rows) {
    return double(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.verdict == Verdict::id; })) /
           double(rows.size());
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

void show_report(const EvalReport& rep) {
    std::ostringstream os;
    readood::print_report(os, rep);
    std::istringstream is(os.str());
    for (std::string line; std::getline(is, line);) emit("  " + line);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1) log_file.open(argv[1]);
    try {
        check_gradients();

        const RunConfig base = RunConfig::desk();
        RunConfig md_cfg = base, ed_cfg = base;
        md_cfg.variant = Variant::read_md;
        ed_cfg.variant = Variant::read_ed;
        emit("benchmark seed " + std::to_string(base.seed) + ": train " + std::to_string(base.benchmark.n_train) +
             ", val " + std::to_string(base.benchmark.n_val) + ", test " + std::to_string(base.benchmark.n_test) +
             ", ood " + std::to_string(base.benchmark.n_ood) + " per suite; classifier " +
             std::to_string(base.classifier.epochs) + " epochs, autoencoder " + std::to_string(base.autoencoder.epochs) +
             " epochs");
        const Benchmark b = generate_benchmark(base.seed, base.benchmark);

        ClassifierModel clf_md = fit_classifier(md_cfg, b.train);
        ClassifierModel clf_ed = fit_classifier(ed_cfg, b.train);
        const double acc_md = accuracy(clf_md, b.val), acc_ed = accuracy(clf_ed, b.val);
        verdict("check val-accuracy", acc_md >= kMinValAccuracy && acc_ed >= kMinValAccuracy,
                "standard head " + fmt(acc_md) + ", decomposed head " + fmt(acc_ed) + ", minimum " +
                    fmt(kMinValAccuracy));
        check_decomposed_head(clf_ed);

        // The autoencoder's seed stream does not depend on the variant, so one training serves both.
        emit("training autoencoder");
        const AutoencoderModel ae = fit_autoencoder(md_cfg, b.train);

        Detector md = assemble_detector(md_cfg, clf_md, ae, b.train);
        Detector ed = assemble_detector(ed_cfg, clf_ed, ae, b.train);
        check_oracles(*md.stats);
        check_reduction(*md.stats);

        emit("calibrating");
        calibrate_detector(md_cfg, md, b.val.images);
        calibrate_detector(ed_cfg, ed, b.val.images);

        const NamedSet id{"test", b.test.images};
        const EvalReport rep_md = evaluate_suite(md, id, b.ood);
        const EvalReport rep_ed = evaluate_suite(ed, id, b.ood);
        show_report(rep_md);
        show_report(rep_ed);

        {
            const double a_md = rep_md.row("hard", "rec-only").auroc, a_ed = rep_ed.row("hard", "rec-only").auroc;
            criterion(4, a_md >= kRecHardAuroc && a_ed >= kRecHardAuroc,
                      "rec-only AUROC vs hard: read-md " + fmt(a_md) + ", read-ed " + fmt(a_ed) + ", minimum " +
                          fmt(kRecHardAuroc));
        }
        {
            bool ok = true;
            std::string d;
            for (const auto* r : {&rep_md, &rep_ed}) {
                const double agg = r->mean_row("aggregated").fpr95, cla = r->mean_row("cla-only").fpr95,
                             rec = r->mean_row("rec-only").fpr95;
                ok = ok && agg <= std::min(cla, rec) + kCombineSlack;
                d += r->detector + " mean FPR aggregated " + fmt(agg) + " vs cla-only " + fmt(cla) + ", rec-only " +
                     fmt(rec) + "; ";
            }
            criterion(5, ok, d + "slack " + fmt(kCombineSlack));
        }
        {
            bool ok = true;
            std::string d = "easy suite FPR@95TPR ";
            for (const auto* r : {&rep_md, &rep_ed}) {
                const double adj = r->row("easy", "aggregated+adjust").fpr95, raw = r->row("easy", "aggregated").fpr95;
                ok = ok && adj <= raw;
                d += r->detector + " adjusted " + fmt(adj) + " vs unadjusted " + fmt(raw) + "; ";
            }
            criterion(6, ok, d);
        }
        {
            const auto& bounds = *md.bounds;
            const auto easy = complexities(b.suite("easy").images), hard = complexities(b.suite("hard").images),
                       test = complexities(b.test.images);
            const double fe = double(count_character(easy, bounds, OodCharacter::easy)) / double(easy.size());
            const double fh = double(count_character(hard, bounds, OodCharacter::hard)) / double(hard.size());
            const double fw = double(count_character(test, bounds, OodCharacter::within)) / double(test.size());
            criterion(7, fe >= kEasyCharacterized && fh >= kHardCharacterized && fw >= kWithinLo && fw <= kWithinHi,
                      "band [" + fmt(bounds.lower, 6) + ", " + fmt(bounds.upper, 6) + "] bits/dim; easy suite " +
                          fmt(fe) + " easy, hard suite " + fmt(fh) + " hard, ID test " + fmt(fw) + " within");
        }
        {
            bool ok = true;
            std::string d;
            for (auto* det : {&md, &ed}) {
                const RunConfig& cfg = det == &md ? md_cfg : ed_cfg;
                const auto& cal = *det->calibration;
                const double tpr = id_fraction(detect(*det, b.val.images));
                // Same seed, same pool as calibration used.
                Rng rng(cfg.calibration_seed);
                const auto cd = prepare_calibration(*det, b.val.images,
                                                    build_pool(b.val.images, rng, cfg.pool_per_kind, cfg.synth));
                const double f_star = evaluate_epsilon(*det, cd, cal.epsilon).mean_fpr;
                const double f_zero = evaluate_epsilon(*det, cd, 0.0).mean_fpr;
                ok = ok && tpr >= kTargetTpr && f_star <= f_zero;
                d += to_string(det->variant) + " eps* " + fmt(cal.epsilon) + " tau " + fmt(cal.tau, 6) +
                     " counted val TPR " + fmt(tpr) + ", pool FPR at eps* " + fmt(f_star) + " vs eps=0 " +
                     fmt(f_zero) + "; ";
                if (cal.epsilon > 0) {
                    const auto p = prepare(*det, b.val.images);
                    const double m0 = mean(final_scores(score_latents(*det, p, p.z, ScoreOptions{})));
                    const double m1 = mean(
                        final_scores(score_latents(*det, p, perturbed_latents(*det, p, cal.epsilon), ScoreOptions{})));
                    verdict("check " + to_string(det->variant) + "-perturbation-raises-id-scores", m1 > m0,
                            "mean ID val score " + fmt(m0, 6) + " at eps=0, " + fmt(m1, 6) + " at eps*");
                } else {
                    emit("check " + to_string(det->variant) + "-perturbation-raises-id-scores n/a (eps* = 0)");
                }
            }
            criterion(8, ok, d);
        }
        {
            Rng rng(80);
            const auto noise = random_uniform<float>(base.benchmark.image.batch_shape(100), rng);
            const auto train_head = b.train.images.slice0(0, 100);
            for (const auto* det : {&md, &ed}) {
                const double rej = 1.0 - id_fraction(detect(*det, noise));
                const double acc = id_fraction(detect(*det, train_head));
                verdict("check " + to_string(det->variant) + "-sanity",
                        rej >= kNoiseRejected && acc >= kTrainAccepted,
                        "uniform noise judged OOD " + fmt(rej) + ", training images judged ID " + fmt(acc));
            }
        }
        {
            // Persistence: the trained detectors through a checkpoint file.
            bool ok = true;
            std::string d;
            for (const auto* det : {&md, &ed}) {
                const std::string path = "acceptance_" + to_string(det->variant) + ".rdck";
                Checkpoint ck = Checkpoint::of(*det);
                save_checkpoint(path, ck);
                const Detector back = load_checkpoint(path).detector();
                const auto x = b.test.images.slice0(0, 64);
                const auto s0 = detect(*det, x), s1 = detect(back, x);
                bool same = true;
                for (std::size_t i = 0; i < s0.size(); ++i)
                    same = same && std::memcmp(&s0[i].final_score, &s1[i].final_score, sizeof(double)) == 0 &&
                           s0[i].score_cla == s1[i].score_cla && s0[i].score_rec_raw == s1[i].score_rec_raw;
                const bool rep_same = evaluate_suite(back, id, b.ood) == (det == &md ? rep_md : rep_ed);
                ok = ok && same && rep_same;
                d += to_string(det->variant) + " probe scores " + (same ? "bitwise equal" : "differ") + ", report " +
                     (rep_same ? "identical" : "differs") + " after reload; ";
            }
            // Determinism: whole pipeline twice from the seed on a small configuration.
            RunConfig small = RunConfig::quick();
            small.benchmark.image = {3, 16, 16};
            small.benchmark.n_train = 200;
            small.benchmark.n_val = small.benchmark.n_test = small.benchmark.n_ood = 60;
            small.classifier = desk_classifier(4);
            small.classifier.batch_size = 32;
            small.autoencoder = TrainConfig::autoencoder(4);
            small.autoencoder.batch_size = 32;
            small.pool_per_kind = 60;
            small.epsilon_grid = {0, 0.001, 0.01};
            const EvalReport r1 = run_benchmark_pipeline(small), r2 = run_benchmark_pipeline(small);
            ok = ok && r1 == r2;
            d += std::string("two fixed-seed pipeline runs ") + (r1 == r2 ? "identical" : "differ");
            criterion(9, ok, d);
        }
    } catch (const std::exception& e) {
        emit(std::string("error: ") + e.what());
        return 1;
    }
    emit(std::to_string(failures) + " of 10 criteria failing");
    return failures == 0 ? 0 : 1;
}
