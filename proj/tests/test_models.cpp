#include <gtest/gtest.h>

#include <cmath>

#include "readood/models.hpp"
#include "readood/training.hpp"

namespace readood {
namespace {

ImageSpec small_image() { return {3, 16, 16}; }

TEST(Classifier, OutputShapes) {
    Rng rng(1);
    ClassifierModel m(ClassifierSpec{small_image(), 4}, rng);
    auto x = random_uniform<float>({5, 3, 16, 16}, rng, 0.0, 1.0);
    auto out = clf_forward(m, x);
    EXPECT_EQ(out.z.shape(), (Shape{5, 64}));
    EXPECT_EQ(out.logits.shape(), (Shape{5, 4}));
    EXPECT_EQ(extract_latent(m, x), out.z);
}

TEST(Classifier, LatentIsNonNegative) {
    Rng rng(2);
    ClassifierModel m(ClassifierSpec{small_image(), 3}, rng);
    auto z = extract_latent(m, random_uniform<float>({4, 3, 16, 16}, rng, 0.0, 1.0));
    for (float v : z.values()) EXPECT_GE(v, 0.0f);
}

TEST(Classifier, RejectsWrongImageShape) {
    Rng rng(1);
    ClassifierModel m(ClassifierSpec{small_image(), 4}, rng);
    EXPECT_THROW(clf_forward(m, Tensor<float>(Shape{2, 1, 16, 16})), ShapeError);
}

TEST(Classifier, StandardHeadHasNoCenters) {
    Rng rng(1);
    ClassifierModel m(ClassifierSpec{small_image(), 4}, rng);
    EXPECT_THROW(m.centers(), Error);
}

TEST(Classifier, HeadLogitsMatchFullForward) {
    Rng rng(4);
    for (auto head : {HeadKind::standard, HeadKind::decomposed}) {
        ClassifierModel m(ClassifierSpec{small_image(), 4, {16, 32, 64}, head}, rng);
        auto out = clf_forward(m, random_uniform<float>({6, 3, 16, 16}, rng, 0.0, 1.0));
        EXPECT_EQ(head_logits(m, out.z), out.logits);
    }
}

// argmax of h/g with g in (0,1) is the nearest center
TEST(Classifier, DecomposedArgmaxIsNearestCenter) {
    Rng rng(5);
    ClassifierModel m(ClassifierSpec{small_image(), 4, {16, 32, 64}, HeadKind::decomposed}, rng);
    auto z = random_normal<float>({200, 64}, rng, 1.0);
    const auto preds = predict_from_logits(head_logits(m, z));
    const auto& c = m.centers();
    for (std::size_t i = 0; i < 200; ++i) {
        std::size_t best = 0;
        double bd = INFINITY;
        for (std::size_t k = 0; k < 4; ++k) {
            double d = 0;
            for (std::size_t t = 0; t < 64; ++t) d += std::pow(double(z[i * 64 + t]) - c[k * 64 + t], 2);
            if (d < bd) bd = d, best = k;
        }
        EXPECT_EQ(preds[i].label, best);
    }
}

TEST(Prediction, PosteriorIsSoftmaxAndTiesGoLow) {
    auto p = predict_from_logits(Tensor<float>(Shape{1, 3}, std::vector<float>{2, 2, 1}));
    EXPECT_EQ(p[0].label, 0u);
    double s = 0;
    for (double v : p[0].posterior) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Autoencoder, ReconInUnitIntervalAndShape) {
    Rng rng(1);
    AutoencoderModel m(AutoencoderSpec{small_image()}, rng);
    auto x = random_uniform<float>({3, 3, 16, 16}, rng, 0.0, 1.0);
    auto r = ae_forward(m, x);
    EXPECT_EQ(r.shape(), x.shape());
    for (float v : r.values()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Autoencoder, ZeroDecoderGivesHalfImage) {
    Rng rng(1);
    AutoencoderModel m(AutoencoderSpec{small_image()}, rng);
    for (auto& [name, t] : m.network().params)
        if (name.starts_with("dec.")) t = Tensor<float>(t.shape(), 0.0f);
    auto r = ae_forward(m, random_uniform<float>({2, 3, 16, 16}, rng, 0.0, 1.0));
    for (float v : r.values()) EXPECT_EQ(v, 0.5f);
}

TEST(Losses, CrossEntropyExample) {
    Tensor<double> logits(Shape{1, 2}, std::vector<double>{1, 0});
    const std::vector<std::size_t> y{0};
    EXPECT_NEAR(cross_entropy_loss(logits, y), 0.313262, 1e-6);
}

TEST(Losses, CrossEntropyUniformIsLogK) {
    Tensor<double> logits(Shape{2, 4});
    const std::vector<std::size_t> y{1, 3};
    EXPECT_NEAR(cross_entropy_loss(logits, y), std::log(4.0), 1e-12);
}

TEST(Losses, CrossEntropyRejectsBadLabel) {
    Tensor<double> logits(Shape{1, 2});
    const std::vector<std::size_t> y{2};
    EXPECT_THROW(cross_entropy_loss(logits, y), Error);
}

TEST(Losses, MseExample) {
    EXPECT_DOUBLE_EQ(mse_loss(Tensor<double>(Shape{1, 4}), Tensor<double>(Shape{1, 4}, 0.5)), 1.0);
    Tensor<double> x(Shape{1, 2}, std::vector<double>{1, 1}), r(Shape{1, 2}, std::vector<double>{0, 2});
    EXPECT_DOUBLE_EQ(mse_loss(x, r), 2.0);
    EXPECT_EQ(mse_loss(x, x), 0.0);
}

TEST(Losses, MseLoopOracle) {
    Rng rng(2);
    const auto x = random_normal<double>({5, 3, 4, 4}, rng), r = random_normal<double>({5, 3, 4, 4}, rng);
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - r[i]) * (x[i] - r[i]);
    EXPECT_NEAR(mse_loss(x, r), s / 5, 1e-6);
    EXPECT_THROW(mse_loss(x, Tensor<double>(Shape{5, 48})), ShapeError);
}

TEST(TrainConfig, ClassifierScheduleDrops) {
    auto c = TrainConfig::classifier(200);
    EXPECT_DOUBLE_EQ(c.lr_at(0), 0.1);
    EXPECT_NEAR(c.lr_at(100), 0.01, 1e-15);
    EXPECT_NEAR(c.lr_at(150), 0.001, 1e-15);
    EXPECT_EQ(TrainConfig::classifier_paper().epochs, 200u);
    EXPECT_EQ(TrainConfig::autoencoder_paper().epochs, 2000u);
    EXPECT_EQ(TrainConfig::autoencoder_paper().optimizer, OptimizerKind::adam);
}

TEST(TrainConfig, ValidationErrors) {
    auto c = TrainConfig::classifier(10);
    c.learning_rate = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig::classifier(10);
    c.lr_drop_epochs = {8, 4};
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig::classifier(10);
    c.lr_drop_epochs = {20};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Augment, ZeroOffsetNoFlipIsIdentityAndFlipMirrors) {
    Rng rng(1);
    auto x = random_uniform<float>({1, 2, 4, 4}, rng, 0.0, 1.0);
    Tensor<float> y(x.shape()), f(x.shape());
    augment_into(x.data(), y.data(), 2, 4, 4, false, 2, 2, 2);
    EXPECT_EQ(y, x);
    augment_into(x.data(), f.data(), 2, 4, 4, true, 0, 0, 0);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(f[(c * 4 + i) * 4 + j], x[(c * 4 + i) * 4 + 3 - j]);
}

TEST(Optimizer, SgdMomentumStep) {
    TrainConfig c = TrainConfig::classifier(10);
    c.weight_decay = 0;
    Optimizer opt(c, {});
    Bindings<float> p{{"w", Tensor<float>::vector({1.0f})}};
    std::map<std::string, Tensor<float>> g{{"w", Tensor<float>::vector({1.0f})}};
    opt.step(p, g, 0.1);
    EXPECT_FLOAT_EQ(p["w"][0], 0.9f);
    opt.step(p, g, 0.1);  // v = 0.9 + 1
    EXPECT_FLOAT_EQ(p["w"][0], 0.9f - 0.19f);
}

TEST(Optimizer, AdamFirstStepIsLr) {
    TrainConfig c = TrainConfig::autoencoder(10);
    Optimizer opt(c, {});
    Bindings<float> p{{"w", Tensor<float>::vector({1.0f})}};
    std::map<std::string, Tensor<float>> g{{"w", Tensor<float>::vector({3.0f})}};
    opt.step(p, g, 1e-3);
    EXPECT_NEAR(p["w"][0], 1.0 - 1e-3, 1e-6);
}

TEST(Training, ClassifierLossDecreasesAndIsDeterministic) {
    Rng rng(3);
    Dataset d;
    d.images = Tensor<float>(Shape{32, 3, 16, 16});
    for (std::size_t i = 0; i < 32; ++i) {
        d.labels.push_back(i % 2);
        for (std::size_t p = 0; p < 3 * 256; ++p)
            d.images[i * 768 + p] = static_cast<float>((i % 2 ? 0.8 : 0.2) + 0.05 * normal(rng));
    }
    auto cfg = TrainConfig::classifier(6);
    cfg.batch_size = 8;
    cfg.lr_drop_epochs.clear();
    Rng r1(9), r2(9);
    ClassifierModel a(ClassifierSpec{small_image(), 2}, r1), b(ClassifierSpec{small_image(), 2}, r2);
    auto ra = train_classifier(a, d, cfg);
    std::vector<double> hooked;
    auto rb = train_classifier(b, d, cfg, [&](std::size_t e, double l) {
        EXPECT_EQ(e, hooked.size());
        hooked.push_back(l);
        EXPECT_EQ(predict(b, d.images.slice0(0)).size(), 1u);  // the model is usable mid-training
    });
    EXPECT_EQ(ra.loss_curve, rb.loss_curve);
    EXPECT_EQ(hooked, rb.loss_curve);
    EXPECT_LT(ra.loss_curve.back(), ra.loss_curve.front());
    for (const auto& [k, v] : a.network().params) EXPECT_EQ(v, b.network().params.at(k)) << k;
    const auto preds = predict(a, d.images);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < 32; ++i) ok += preds[i].label == d.labels[i];
    EXPECT_EQ(ok, 32u);
}

TEST(Training, AutoencoderOverfitsOneImage) {
    Rng rng(1);
    Dataset d;
    d.images = Tensor<float>(Shape{2, 3, 16, 16});
    for (std::size_t p = 0; p < 768; ++p) {
        const float v = 0.3f + 0.4f * static_cast<float>((p / 16 + p % 16) % 2);
        d.images[p] = d.images[768 + p] = v;
    }
    AutoencoderModel m(AutoencoderSpec{small_image()}, rng);
    auto cfg = TrainConfig::autoencoder(300);
    cfg.batch_size = 2;
    cfg.random_crop = cfg.random_flip = false;
    train_autoencoder(m, d, cfg);
    const auto r = ae_forward(m, d.images.slice0(0));
    double mse = 0;
    for (std::size_t p = 0; p < 768; ++p) mse += std::pow(r[p] - d.images[p], 2);
    EXPECT_LT(mse / 768, 1e-3);
}

TEST(Training, RejectsUnlabeledAndTinyData) {
    Rng rng(1);
    ClassifierModel m(ClassifierSpec{small_image(), 2}, rng);
    Dataset d{Tensor<float>(Shape{4, 3, 16, 16}), {}};
    EXPECT_THROW(train_classifier(m, d, TrainConfig::classifier(2)), DataError);
    d.labels = {0, 1, 0, 5};
    EXPECT_THROW(train_classifier(m, d, TrainConfig::classifier(2)), Error);
}

}  // namespace
}  // namespace readood
