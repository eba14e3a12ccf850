// read-ood: train, calibrate and run the READ detector from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "readood/benchmark.hpp"
#include "readood/calibration.hpp"
#include "readood/checkpoint.hpp"
#include "readood/config.hpp"
#include "readood/evaluation.hpp"
#include "readood/pipeline.hpp"
#include "readood/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace readood;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3 };

struct Global {
    std::string config;
    std::vector<std::string> sets;
    bool quiet = false;
};

RunConfig load(const Global& g) { return g.config.empty() ? default_config(g.sets) : load_config(g.config, g.sets); }

void log(const Global& g, const std::string& msg) {
    if (!g.quiet) std::cerr << msg << '\n';
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_parent(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

Checkpoint need_checkpoint(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) throw DataError(path + " not found; run " + producer + " first");
    return load_checkpoint(path);
}

Dataset need_split(const std::string& data_dir, const std::string& split, bool labels) {
    const std::string stem = in_dir(data_dir, split);
    if (!fs::exists(stem + ".images.rtn")) throw DataError(stem + ".images.rtn not found; run gen-data first");
    return load_dataset(stem, labels);
}

EpochHook progress(const Global& g, const std::string& what, std::size_t epochs) {
    const std::size_t every = std::max<std::size_t>(1, epochs / 10);
    return [&g, what, epochs, every](std::size_t e, double loss) {
        if ((e + 1) % every == 0 || e + 1 == epochs) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu loss %.6g", what.c_str(), e + 1, epochs, loss);
            log(g, buf);
        }
    };
}

// ---------------------------------------------------------------------------

int gen_data(const Global& g, std::string out) {
    const RunConfig cfg = load(g);
    if (out.empty()) out = cfg.data_dir;
    fs::create_directories(out);
    const Benchmark b = generate_benchmark(cfg.seed, cfg.benchmark);
    save_dataset(in_dir(out, "train"), b.train);
    save_dataset(in_dir(out, "val"), b.val);
    save_dataset(in_dir(out, "test"), b.test);
    for (const auto& s : b.ood) save_dataset(in_dir(out, "ood-" + s.name), Dataset{s.images, {}});
    log(g, "wrote benchmark to " + out);
    return kOk;
}

int train_clf(const Global& g, std::string data, std::string out) {
    const RunConfig cfg = load(g);
    if (data.empty()) data = cfg.data_dir;
    if (out.empty()) out = in_dir(cfg.work_dir, "classifier.rdck");
    const Dataset train = need_split(data, "train", true);
    double last = 0;
    auto hook = progress(g, "classifier", cfg.classifier.epochs);
    ClassifierModel clf = fit_classifier(cfg, train, [&](std::size_t e, double l) {
        last = l;
        hook(e, l);
    });
    if (fs::exists(in_dir(data, "val.images.rtn"))) {
        log(g, "validation accuracy " + format_double(accuracy(clf, load_dataset(in_dir(data, "val"), true))));
    }
    Checkpoint ck;
    ck.variant = cfg.variant;
    ck.classifier = std::move(clf);
    ck.options = cfg.options;
    ck.config_yaml = dump_config(cfg);
    ensure_parent(out);
    save_checkpoint(out, ck);
    log(g, "final loss " + format_double(last) + "; wrote " + out);
    return kOk;
}

int train_ae(const Global& g, std::string data, std::string out) {
    const RunConfig cfg = load(g);
    if (data.empty()) data = cfg.data_dir;
    if (out.empty()) out = in_dir(cfg.work_dir, "autoencoder.rdck");
    const Dataset train = need_split(data, "train", false);
    double last = 0;
    auto hook = progress(g, "autoencoder", cfg.autoencoder.epochs);
    AutoencoderModel ae = fit_autoencoder(cfg, train, [&](std::size_t e, double l) {
        last = l;
        hook(e, l);
    });
    Checkpoint ck;
    ck.variant = cfg.variant;
    ck.autoencoder = std::move(ae);
    ck.options = cfg.options;
    ck.config_yaml = dump_config(cfg);
    ensure_parent(out);
    save_checkpoint(out, ck);
    log(g, "final loss " + format_double(last) + "; wrote " + out);
    return kOk;
}

int fit_stats(const Global& g, std::string data, std::string clf_path, std::string ae_path, std::string out) {
    const RunConfig cfg = load(g);
    if (data.empty()) data = cfg.data_dir;
    if (clf_path.empty()) clf_path = in_dir(cfg.work_dir, "classifier.rdck");
    if (ae_path.empty()) ae_path = in_dir(cfg.work_dir, "autoencoder.rdck");
    if (out.empty()) out = in_dir(cfg.work_dir, "detector.rdck");
    auto clf = need_checkpoint(clf_path, "train-clf");
    auto ae = need_checkpoint(ae_path, "train-ae");
    if (!clf.classifier) throw DataError(clf_path + " holds no classifier; run train-clf first");
    if (!ae.autoencoder) throw DataError(ae_path + " holds no autoencoder; run train-ae first");
    if (clf.classifier->head() != cfg.head()) {
        throw ConfigError("variant " + to_string(cfg.variant) + " needs a classifier with a " + to_string(cfg.head()) +
                          " head but " + clf_path + " has a " + to_string(clf.classifier->head()) +
                          " head; rerun train-clf with this variant");
    }
    const Dataset train = need_split(data, "train", true);
    Detector det = assemble_detector(cfg, *clf.classifier, *ae.autoencoder, train);
    if (det.stats) log(g, "class statistics regularization " + format_double(det.stats->reg));
    log(g, "complexity band [" + format_double(det.bounds->lower) + ", " + format_double(det.bounds->upper) + "]");
    auto ck = Checkpoint::of(det, dump_config(cfg));
    ensure_parent(out);
    save_checkpoint(out, ck);
    log(g, "wrote " + out);
    return kOk;
}

int calibrate_cmd(const Global& g, std::string data, std::string det_path, std::string out) {
    const RunConfig cfg = load(g);
    if (data.empty()) data = cfg.data_dir;
    if (det_path.empty()) det_path = in_dir(cfg.work_dir, "detector.rdck");
    if (out.empty()) out = det_path;
    auto ck = need_checkpoint(det_path, "fit-stats");
    Detector det = ck.detector();
    if (!det.bounds) throw DataError(det_path + " has no complexity bounds; run fit-stats first");
    det.options = cfg.options;
    const Dataset val = need_split(data, "val", false);
    const auto c = calibrate_detector(cfg, det, val.images);
    for (std::size_t i = 0; i < c.grid.size(); ++i) {
        log(g, "epsilon " + format_double(c.grid[i]) + " mean FPR " + format_double(c.mean_fpr[i]));
    }
    log(g, "selected epsilon " + format_double(c.epsilon) + " tau " + format_double(c.tau) + " ID TPR " +
               format_double(c.id_tpr));
    ck = Checkpoint::of(det, dump_config(cfg));
    ensure_parent(out);
    save_checkpoint(out, ck);
    log(g, "wrote " + out);
    return kOk;
}

Detector calibrated_detector(const std::string& path) {
    const auto ck = need_checkpoint(path, "fit-stats");
    Detector det = ck.detector();
    if (!det.bounds) throw DataError(path + " has no complexity bounds; run fit-stats first");
    if (!det.calibration) throw DataError(path + " is not calibrated; run calibrate first");
    return det;
}

int score_cmd(const Global& g, std::string det_path, const std::string& input, const std::string& out) {
    const RunConfig cfg = load(g);
    if (det_path.empty()) det_path = in_dir(cfg.work_dir, "detector.rdck");
    Detector det = calibrated_detector(det_path);
    const Tensor<float> x = load_images(input);
    const auto rows = detect(det, x);
    std::ofstream file;
    if (!out.empty()) {
        ensure_parent(out);
        file.open(out, std::ios::binary);
        if (!file) throw DataError("cannot write " + out);
    }
    std::ostream& os = out.empty() ? std::cout : file;
    const double sign = cfg.options.paper_literal_sign ? -1.0 : 1.0;
    os << "sample_id,score_cla,score_rec_raw,complexity,lambda,final_score,verdict,predicted_class\r\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        os << i << ',' << format_double(r.score_cla) << ',' << format_double(r.score_rec_raw) << ','
           << format_double(r.complexity) << ',' << format_double(r.lambda) << ','
           << format_double(sign * r.final_score) << ',' << to_string(r.verdict) << ','
           << r.predicted_class << "\r\n";
    }
    std::size_t n_id = 0;
    for (const auto& r : rows) n_id += r.verdict == Verdict::id;
    log(g, std::to_string(n_id) + " of " + std::to_string(rows.size()) + " samples accepted as ID");
    return kOk;
}

int evaluate_cmd(const Global& g, std::string data, std::string det_path, std::string prefix,
                 const std::vector<std::string>& ood_args, const std::string& histogram) {
    const RunConfig cfg = load(g);
    if (data.empty()) data = cfg.data_dir;
    if (det_path.empty()) det_path = in_dir(cfg.work_dir, "detector.rdck");
    if (prefix.empty()) prefix = in_dir(cfg.work_dir, "report");
    Detector det = calibrated_detector(det_path);
    const Dataset test = need_split(data, "test", false);
    std::vector<NamedSet> oods;
    if (ood_args.empty()) {
        for (const char* s : {"easy", "medium", "hard"}) oods.push_back({s, need_split(data, std::string("ood-") + s, false).images});
    } else {
        for (const auto& a : ood_args) {
            const auto eq = a.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("--ood expects NAME=PATH, got " + a);
            oods.push_back({a.substr(0, eq), load_images(a.substr(eq + 1))});
        }
    }
    const NamedSet id{"test", test.images};
    const auto rep = evaluate_suite(det, id, oods);
    print_report(std::cout, rep);
    ensure_parent(prefix);
    {
        std::ofstream os(prefix + ".csv", std::ios::binary);
        write_csv(os, rep);
        std::ofstream js(prefix + ".json", std::ios::binary);
        js << to_json(rep).dump(2) << '\n';
        if (!os || !js) throw DataError("cannot write report files at " + prefix);
    }
    log(g, "wrote " + prefix + ".csv and " + prefix + ".json");
    if (!histogram.empty()) {
        std::vector<std::pair<std::string, std::vector<double>>> sets;
        sets.emplace_back(id.name, final_scores(detect(det, id.images)));
        for (const auto& o : oods) sets.emplace_back(o.name, final_scores(detect(det, o.images)));
        ensure_parent(histogram);
        std::ofstream hs(histogram, std::ios::binary);
        write_histogram(hs, sets);
        log(g, "wrote " + histogram);
    }
    return kOk;
}

int inspect(const std::string& path) {
    if (!fs::exists(path)) throw DataError(path + " not found");
    const auto ck = load_checkpoint(path);
    std::cout << "format version: " << kCheckpointVersion << '\n'
              << "kind: " << ck.kind() << '\n'
              << "variant: " << to_string(ck.variant) << '\n'
              << "parameters: " << ck.parameter_count() << '\n';
    if (ck.classifier) {
        const auto& s = ck.classifier->spec();
        std::cout << "classifier: " << to_string(s.head) << " head, " << s.classes << " classes, latent "
                  << ck.classifier->latent_dim() << '\n';
    }
    if (ck.autoencoder) std::cout << "autoencoder: bottleneck " << ck.autoencoder->spec().bottleneck << '\n';
    if (ck.stats) std::cout << "class stats: " << ck.stats->classes() << " classes, reg " << format_double(ck.stats->reg) << '\n';
    if (ck.bounds) std::cout << "complexity band: [" << format_double(ck.bounds->lower) << ", " << format_double(ck.bounds->upper) << "]\n";
    if (ck.calibration) {
        std::cout << "epsilon: " << format_double(ck.calibration->epsilon) << '\n'
                  << "tau: " << format_double(ck.calibration->tau) << '\n';
    } else {
        std::cout << "calibration: none\n";
    }
    char hash[16];
    std::snprintf(hash, sizeof hash, "%08x", ck.content_hash);
    std::cout << "content hash: " << hash << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"READ out-of-distribution detector"};
    app.require_subcommand(1);
    app.fallthrough();
    Global g;
    app.add_option("-c,--config", g.config, "YAML run config (defaults are used without one)");
    app.add_option("--set", g.sets, "override a config value, e.g. --set classifier.epochs=10")->take_all();
    app.add_flag("-q,--quiet", g.quiet, "no progress output");

    std::string data, out, clf, ae, det, input, prefix, histogram, ckpt;
    std::vector<std::string> oods;
    std::function<int()> run;

    auto* gen = app.add_subcommand("gen-data", "write the synthetic benchmark as TensorFiles");
    gen->add_option("-o,--out", out, "output directory (default data_dir)");
    gen->callback([&] { run = [&] { return gen_data(g, out); }; });

    auto* tc = app.add_subcommand("train-clf", "train the classifier");
    tc->add_option("-d,--data", data, "dataset directory (default data_dir)");
    tc->add_option("-o,--out", out, "checkpoint path (default work_dir/classifier.rdck)");
    tc->callback([&] { run = [&] { return train_clf(g, data, out); }; });

    auto* ta = app.add_subcommand("train-ae", "train the autoencoder");
    ta->add_option("-d,--data", data, "dataset directory (default data_dir)");
    ta->add_option("-o,--out", out, "checkpoint path (default work_dir/autoencoder.rdck)");
    ta->callback([&] { run = [&] { return train_ae(g, data, out); }; });

    auto* fs_cmd = app.add_subcommand("fit-stats", "fit class statistics and complexity bounds on the training set");
    fs_cmd->add_option("-d,--data", data, "dataset directory (default data_dir)");
    fs_cmd->add_option("--classifier", clf, "classifier checkpoint");
    fs_cmd->add_option("--autoencoder", ae, "autoencoder checkpoint");
    fs_cmd->add_option("-o,--out", out, "detector checkpoint (default work_dir/detector.rdck)");
    fs_cmd->callback([&] { run = [&] { return fit_stats(g, data, clf, ae, out); }; });

    auto* cal = app.add_subcommand("calibrate", "choose epsilon and tau on ID validation data");
    cal->add_option("-d,--data", data, "dataset directory (default data_dir)");
    cal->add_option("--detector", det, "detector checkpoint (default work_dir/detector.rdck)");
    cal->add_option("-o,--out", out, "output checkpoint (default: overwrite the input)");
    cal->callback([&] { run = [&] { return calibrate_cmd(g, data, det, out); }; });

    auto* sc = app.add_subcommand("score", "score images and print one CSV row per sample");
    sc->add_option("--detector", det, "detector checkpoint (default work_dir/detector.rdck)");
    sc->add_option("-i,--input", input, "image TensorFile [N,C,H,W]")->required();
    sc->add_option("-o,--out", out, "CSV path (default stdout)");
    sc->callback([&] { run = [&] { return score_cmd(g, det, input, out); }; });

    auto* ev = app.add_subcommand("evaluate", "AUROC and FPR@95TPR on the test split against OOD sets");
    ev->add_option("-d,--data", data, "dataset directory (default data_dir)");
    ev->add_option("--detector", det, "detector checkpoint (default work_dir/detector.rdck)");
    ev->add_option("--ood", oods, "OOD set as NAME=PATH (default the generated easy/medium/hard suites)");
    ev->add_option("-o,--out", prefix, "report path prefix (default work_dir/report)");
    ev->add_option("--histogram", histogram, "also write a score histogram");
    ev->callback([&] { run = [&] { return evaluate_cmd(g, data, det, prefix, oods, histogram); }; });

    auto* ins = app.add_subcommand("inspect-ckpt", "print checkpoint metadata");
    ins->add_option("checkpoint", ckpt, "checkpoint path")->required();
    ins->callback([&] { run = [&] { return inspect(ckpt); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }
    try {
        return run();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
