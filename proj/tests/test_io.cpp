#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "readood/benchmark.hpp"
#include "readood/checkpoint.hpp"
#include "readood/config.hpp"
#include "readood/tensor_io.hpp"

namespace readood {
namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("readood_test_" + std::to_string(::getpid()) + "_" +
                                                  ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

template <typename T>
void expect_roundtrip(const Tensor<T>& t) {
    std::stringstream ss;
    write_tensor(ss, t);
    const auto back = read_tensor<T>(ss);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * sizeof(T)), 0);
}

TEST(TensorFile, RoundTripAllDtypes) {
    Rng rng(1);
    expect_roundtrip(quantize_u8(random_uniform<float>({2, 3, 4}, rng, 0.0, 1.0)));
    expect_roundtrip(random_normal<float>({5, 7}, rng));
    expect_roundtrip(random_normal<double>({3, 1, 2, 2}, rng));
    expect_roundtrip(Tensor<double>::scalar(-0.0));
    Tensor<float> odd(Shape{2});
    odd[0] = std::numeric_limits<float>::denorm_min();
    odd[1] = -std::numeric_limits<float>::max();
    expect_roundtrip(odd);
}

TEST(TensorFile, LayoutIsDocumented) {
    std::stringstream ss;
    write_tensor(ss, Tensor<std::uint8_t>(Shape{2, 1}, std::vector<std::uint8_t>{7, 9}));
    const std::string b = ss.str();
    ASSERT_EQ(b.size(), 4u + 2 + 8 + 2);
    EXPECT_EQ(b.substr(0, 4), "RTN1");
    EXPECT_EQ(b[4], 0);
    EXPECT_EQ(b[5], 2);
    EXPECT_EQ(b[6], 2);
    EXPECT_EQ(b[10], 1);
    EXPECT_EQ(b[14], 7);
}

TEST(TensorFile, RejectsBadInput) {
    std::stringstream empty;
    EXPECT_THROW(read_any_tensor(empty), DataError);
    std::stringstream bad("XXXX\x01\x00");
    EXPECT_THROW(read_any_tensor(bad), DataError);
    std::stringstream dtype(std::string("RTN1\x07\x00", 6));
    EXPECT_THROW(read_any_tensor(dtype), DataError);
    std::stringstream full;
    write_tensor(full, Tensor<float>(Shape{4}, 1.0f));
    std::stringstream cut(full.str().substr(0, full.str().size() - 2));
    EXPECT_THROW(read_any_tensor(cut), DataError);
    std::stringstream f32;
    write_tensor(f32, Tensor<float>(Shape{1}));
    EXPECT_THROW(read_tensor<double>(f32), DataError);
}

TEST(TensorFile, ImagesValidated) {
    TempDir d;
    save_tensor(d.file("flat.rtn"), Tensor<float>(Shape{4}, 0.5f));
    EXPECT_THROW(load_images(d.file("flat.rtn")), DataError);
    save_tensor(d.file("big.rtn"), Tensor<float>(Shape{1, 1, 2, 2}, 2.0f));
    EXPECT_THROW(load_images(d.file("big.rtn")), DataError);
    save_tensor(d.file("ok.rtn"), quantize_u8(Tensor<float>(Shape{1, 1, 2, 2}, 1.0f)));
    EXPECT_EQ(load_images(d.file("ok.rtn"))[0], 1.0f);
    std::ofstream(d.file("empty.rtn")).close();
    EXPECT_THROW(load_images(d.file("empty.rtn")), DataError);
    EXPECT_THROW(load_images(d.file("missing.rtn")), DataError);
}

TEST(Dataset, SaveLoad) {
    TempDir d;
    Dataset ds{quantize_u8(Tensor<float>(Shape{3, 1, 4, 4}, 0.2f)).cast<float>(), {0, 2, 1}};
    for (auto& v : ds.images.values()) v /= 255.0f;
    save_dataset(d.file("x"), ds);
    const auto back = load_dataset(d.file("x"), true);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.images, ds.images);
}

TEST(Idx, ImportsImagesAndLabels) {
    TempDir d;
    {
        std::ofstream os(d.file("img.idx"), std::ios::binary);
        const unsigned char head[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
        os.write(reinterpret_cast<const char*>(head), sizeof head);
        const unsigned char px[] = {0, 255, 0, 0, 51, 51, 51, 51};
        os.write(reinterpret_cast<const char*>(px), sizeof px);
        std::ofstream ls(d.file("lab.idx"), std::ios::binary);
        const unsigned char lh[] = {0, 0, 8, 1, 0, 0, 0, 2, 3, 1};
        ls.write(reinterpret_cast<const char*>(lh), sizeof lh);
    }
    const auto x = load_idx_images(d.file("img.idx"));
    EXPECT_EQ(x.shape(), (Shape{2, 1, 2, 2}));
    EXPECT_EQ(x[1], 1.0f);
    EXPECT_FLOAT_EQ(x[4], 0.2f);
    EXPECT_EQ(load_idx_labels(d.file("lab.idx")), (std::vector<std::size_t>{3, 1}));
}

// ---------------------------------------------------------------------------

Detector probe_detector(Variant v) {
    Rng rng(3);
    const ImageSpec im{3, 16, 16};
    Detector d;
    d.variant = v;
    d.classifier = ClassifierModel(
        ClassifierSpec{im, 3, {8, 12, 16}, v == Variant::read_ed ? HeadKind::decomposed : HeadKind::standard}, rng);
    d.autoencoder = AutoencoderModel(AutoencoderSpec{im, {8, 8, 8}, 16}, rng);
    auto train = random_uniform<float>({40, 3, 16, 16}, rng, 0.0, 1.0);
    std::vector<std::size_t> y;
    for (std::size_t i = 0; i < 40; ++i) y.push_back(i % 3);
    if (v == Variant::read_md) d.stats = ClassStats::fit(latents(d.classifier, train), y, 3);
    d.bounds = fit_bounds(complexities(train));
    d.calibration = CalibrationResult{0.002, -3.25, {0, 0.002}, {{{"invert", 0.5}}, {{"invert", 0.25}}}, {0.5, 0.25}, 0.95};
    return d;
}

TEST(Checkpoint, RoundTripGivesBitIdenticalScores) {
    for (auto v : {Variant::read_md, Variant::read_ed}) {
        auto d = probe_detector(v);
        Rng rng(8);
        const auto probe = random_uniform<float>({5, 3, 16, 16}, rng, 0.0, 1.0);
        const auto before = detect(d, probe);
        auto ck = Checkpoint::of(d, "schema_version: 1\n");
        std::stringstream ss;
        write_checkpoint(ss, ck);
        const auto back = read_checkpoint(ss);
        EXPECT_EQ(back.content_hash, ck.content_hash);
        EXPECT_EQ(back.kind(), "detector");
        EXPECT_EQ(back.config_yaml, "schema_version: 1\n");
        const auto after = detect(back.detector(), probe);
        for (std::size_t i = 0; i < before.size(); ++i) {
            EXPECT_EQ(before[i].final_score, after[i].final_score);
            EXPECT_EQ(before[i].score_cla, after[i].score_cla);
            EXPECT_EQ(before[i].verdict, after[i].verdict);
        }
        EXPECT_EQ(back.calibration->fpr_table, d.calibration->fpr_table);
        EXPECT_EQ(back.calibration->tau, d.calibration->tau);
    }
}

TEST(Checkpoint, PartialKinds) {
    auto d = probe_detector(Variant::read_md);
    Checkpoint c;
    c.classifier = d.classifier;
    std::stringstream ss;
    write_checkpoint(ss, c);
    const auto back = read_checkpoint(ss);
    EXPECT_EQ(back.kind(), "classifier");
    EXPECT_FALSE(back.stats.has_value());
    EXPECT_THROW(back.detector(), DataError);
    EXPECT_EQ(back.parameter_count(), d.classifier.network().parameter_count());
}

TEST(Checkpoint, DetectsCorruption) {
    auto d = probe_detector(Variant::read_md);
    auto ck = Checkpoint::of(d);
    std::stringstream ss;
    write_checkpoint(ss, ck);
    std::string bytes = ss.str();
    bytes[bytes.size() / 2] ^= 0x5a;
    std::stringstream bad(bytes);
    EXPECT_THROW(read_checkpoint(bad), DataError);
    std::stringstream cut(ss.str().substr(0, 100));
    EXPECT_THROW(read_checkpoint(cut), DataError);
    std::stringstream wrong("RTN1....");
    EXPECT_THROW(read_checkpoint(wrong), DataError);
}

// ---------------------------------------------------------------------------

RunConfig parse_text(const std::string& text, std::vector<std::string> sets = {}) {
    YAML::Node root = YAML::Load(text);
    const auto paths = apply_overrides(root, sets);
    return parse_config(root, "run.yaml", paths);
}

TEST(Config, DefaultsAndPresets) {
    const auto c = parse_text("schema_version: 1\n");
    EXPECT_EQ(c.preset, "desk");
    EXPECT_EQ(c.classifier.epochs, 60u);
    const auto p = parse_text("schema_version: 1\npreset: paper\n");
    EXPECT_EQ(p.classifier.epochs, 200u);
    EXPECT_EQ(p.autoencoder.epochs, 2000u);
    EXPECT_EQ(p.classifier.learning_rate, 0.1);
    EXPECT_EQ(parse_text("schema_version: 1\npreset: quick\n").classifier.epochs, 30u);
}

TEST(Config, ReadsSections) {
    const auto c = parse_text(R"(schema_version: 1
variant: read-ed
seed: 42
classifier:
  epochs: 12
  lr_drop_epochs: [6, 9]
  widths: [8, 16, 32]
autoencoder:
  bottleneck: 32
  optimizer: adam
calibration:
  grid: [0, 0.01]
scoring:
  score_sign: paper-literal
  stop_gradient: false
)");
    EXPECT_EQ(c.variant, Variant::read_ed);
    EXPECT_EQ(c.head(), HeadKind::decomposed);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.classifier.epochs, 12u);
    EXPECT_EQ(c.classifier.lr_drop_epochs, (std::vector<std::size_t>{6, 9}));
    EXPECT_EQ(c.classifier_widths[2], 32u);
    EXPECT_EQ(c.ae_bottleneck, 32u);
    EXPECT_EQ(c.epsilon_grid, (std::vector<double>{0, 0.01}));
    EXPECT_TRUE(c.options.paper_literal_sign);
    EXPECT_FALSE(c.options.stop_gradient_recon);
}

std::string config_error(const std::string& text, std::vector<std::string> sets = {}) {
    try {
        parse_text(text, sets);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

TEST(Config, UnknownKeyReportsLine) {
    const auto msg = config_error("schema_version: 1\nclassifier:\n  epochs: 3\n  epoch: 4\n");
    EXPECT_NE(msg.find("run.yaml:4:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("classifier.epoch"), std::string::npos) << msg;
}

TEST(Config, BadValuesReportLine) {
    auto msg = config_error("schema_version: 1\nseed: abc\n");
    EXPECT_NE(msg.find("run.yaml:2:7"), std::string::npos) << msg;
    msg = config_error("schema_version: 1\nvariant: read-xx\n");
    EXPECT_NE(msg.find("run.yaml:2"), std::string::npos) << msg;
    msg = config_error("schema_version: 1\nclassifier:\n  epochs: 4\n  lr_drop_epochs: [9]\n");
    EXPECT_NE(msg.find("run.yaml:3"), std::string::npos) << msg;
    EXPECT_NE(config_error("schema_version: 2\n"), "");
    EXPECT_NE(config_error("seed: 1\n").find("schema_version"), std::string::npos);
    EXPECT_NE(config_error("schema_version: 1\ncalibration:\n  grid: [-1]\n"), "");
}

TEST(Config, Overrides) {
    const auto c = parse_text("schema_version: 1\nclassifier:\n  epochs: 3\n",
                              {"classifier.epochs=7", "calibration.grid=[0, 0.5]", "variant=read-ed"});
    EXPECT_EQ(c.classifier.epochs, 7u);
    EXPECT_EQ(c.classifier.lr_drop_epochs, (std::vector<std::size_t>{3, 5}));
    EXPECT_EQ(c.epsilon_grid, (std::vector<double>{0, 0.5}));
    EXPECT_EQ(c.variant, Variant::read_ed);
    const auto msg = config_error("schema_version: 1\n", {"classifier.epochz=7"});
    EXPECT_NE(msg.find("--set classifier.epochz"), std::string::npos) << msg;
    EXPECT_NE(config_error("schema_version: 1\n", {"novalue"}), "");
}

TEST(Config, DumpRoundTrips) {
    auto c = parse_text("schema_version: 1\npreset: quick\nvariant: read-ed\nseed: 5\n", {"calibration.grid=[0, 0.0005]"});
    const auto again = parse_text(dump_config(c));
    EXPECT_EQ(dump_config(again), dump_config(c));
    EXPECT_EQ(again.epsilon_grid, c.epsilon_grid);
    EXPECT_EQ(again.classifier.learning_rate, c.classifier.learning_rate);
}

// ---------------------------------------------------------------------------

TEST(Benchmark, DeterministicAndShaped) {
    BenchmarkSpec s;
    s.n_train = 24;
    s.n_val = s.n_test = 8;
    s.n_ood = 6;
    const auto a = generate_benchmark(3, s), b = generate_benchmark(3, s);
    EXPECT_EQ(a.train.images, b.train.images);
    EXPECT_EQ(a.ood[2].images, b.ood[2].images);
    EXPECT_EQ(a.train.images.shape(), (Shape{24, 3, 32, 32}));
    EXPECT_EQ(a.ood.size(), 3u);
    EXPECT_NE(a.train.images, generate_benchmark(4, s).train.images);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(std::count(a.train.labels.begin(), a.train.labels.end(), k), 6);
    for (float v : a.ood[2].images.values()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Benchmark, ComplexityOrdering) {
    BenchmarkSpec s;
    s.n_train = 100;
    s.n_val = s.n_test = 4;
    s.n_ood = 100;
    const auto b = generate_benchmark(11, s);
    auto mean = [](const Tensor<float>& x) {
        const auto c = complexities(x);
        return std::accumulate(c.begin(), c.end(), 0.0) / double(c.size());
    };
    const double id = mean(b.train.images);
    EXPECT_LT(mean(b.suite("easy").images), id);
    EXPECT_LT(id, mean(b.suite("hard").images));
}

TEST(Benchmark, InvalidSpec) {
    BenchmarkSpec s;
    s.classes = 7;
    EXPECT_THROW(generate_benchmark(1, s), ConfigError);
    s = {};
    s.n_val = 0;
    EXPECT_THROW(generate_benchmark(1, s), ConfigError);
}

}  // namespace
}  // namespace readood
