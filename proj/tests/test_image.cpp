#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "lle/image.hpp"
#include "lle/rng.hpp"

using namespace lle;

TEST(Rng, EngineMatchesStandardSequence) {
    // The standard fixes the 10000th output of a default-seeded mt19937_64.
    Rng rng(5489u);
    std::uint64_t v = 0;
    for (int i = 0; i < 10000; ++i) v = rng.next();
    EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, UniformMapping) {
    std::mt19937_64 ref(42);
    Rng rng(42);
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t x = ref();
        EXPECT_EQ(rng.uniform01(), std::ldexp(static_cast<double>(x >> 11), -53));
    }
}

TEST(Rng, IndexAndNormalMappings) {
    std::mt19937_64 ref(7);
    Rng rng(7);
    EXPECT_EQ(rng.uniform_index(13), ref() % 13);
    const double u1 = 1.0 - std::ldexp(static_cast<double>(ref() >> 11), -53);
    const double u2 = std::ldexp(static_cast<double>(ref() >> 11), -53);
    EXPECT_DOUBLE_EQ(rng.normal(), std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2));
}

TEST(Rng, DerivedSeedsDiffer) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 4; ++s)
        for (std::uint64_t i = 0; i < 50; ++i) seen.insert(derive_seed(9, s, i));
    EXPECT_EQ(seen.size(), 200u);
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}

TEST(Image, ShapeChecks) {
    EXPECT_THROW(Image(2, 2, std::vector<double>(5)), ShapeError);
    Image a(2, 3), b(3, 2);
    EXPECT_THROW(require_same_shape(a, b, "x"), ShapeError);
    EXPECT_NO_THROW(require_same_shape(a, Image(2, 3), "x"));
}

TEST(Image, MeanIntensity) {
    Image img(1, 2);
    img.at(0, 0, 0) = 1.0;
    img.at(0, 1, 2) = 0.5;
    EXPECT_DOUBLE_EQ(mean_intensity(img), 255.0 * 1.5 / 6.0);
}

TEST(Image, PadToReplicatesEdgesCentred) {
    Image img(1, 2);
    img.at(0, 0, 0) = 0.25;
    img.at(0, 1, 0) = 0.75;
    const Image p = pad_to(img, 4);
    ASSERT_EQ(p.height(), 4u);
    ASSERT_EQ(p.width(), 4u);
    // Original sits at top = 1, left = 1.
    const double expect[4] = {0.25, 0.25, 0.75, 0.75};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(p.at(y, x, 0), expect[x]);
}

TEST(Image, CenterCrop) {
    Image img(4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) img.at(y, x, 1) = static_cast<double>(y * 4 + x);
    const Image c = center_crop(img, 2);
    EXPECT_EQ(c.at(0, 0, 1), 5.0);
    EXPECT_EQ(c.at(1, 1, 1), 10.0);
}

TEST(Image, RandomCropReplaysFromSeed) {
    Image img(10, 7);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = static_cast<double>(i);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 ref(seed);
        const std::size_t top = ref() % (10 - 4 + 1);
        const std::size_t left = ref() % (7 - 4 + 1);
        EXPECT_EQ(random_crop(img, 4, seed), crop(img, top, left, 4, 4));
    }
}

TEST(Image, RandomCropOfSmallImagePadsFirst) {
    Image img(2, 2, 0.5);
    const Image c = random_crop(img, 5, 3);
    EXPECT_EQ(c.height(), 5u);
    for (double v : c.data()) EXPECT_EQ(v, 0.5);
}

TEST(Degrade, QuantizeRoundsHalfAway) {
    EXPECT_EQ(quantize(2.5 / 255.0, 8), 3.0 / 255.0);
    EXPECT_EQ(quantize(1.0, 8), 1.0);
    EXPECT_EQ(quantize(0.26, 2), 1.0 / 3.0);
}

TEST(Degrade, AttenuationOnePercent) {
    Image img(1, 1);
    img.at(0, 0, 0) = 1.0;    // 2.55 -> 3
    img.at(0, 0, 1) = 0.5;    // 1.275 -> 1
    img.at(0, 0, 2) = 0.19;   // 0.4845 -> 0
    DegradeConfig cfg;
    cfg.attenuation = 0.01;
    const Image d = synth_low_light(img, cfg);
    EXPECT_EQ(d.at(0, 0, 0), 3.0 / 255.0);
    EXPECT_EQ(d.at(0, 0, 1), 1.0 / 255.0);
    EXPECT_EQ(d.at(0, 0, 2), 0.0);
}

TEST(Degrade, UnquantizedAndZeroAttenuation) {
    Image img(2, 2, 0.8);
    DegradeConfig cfg;
    cfg.attenuation = 0.01;
    cfg.quantize_bits.reset();
    const Image dim = synth_low_light(img, cfg);
    for (double v : dim.data()) EXPECT_EQ(v, 0.01 * 0.8);
    cfg.attenuation = 0.0;
    const Image black = synth_low_light(img, cfg);
    for (double v : black.data()) EXPECT_EQ(v, 0.0);
}

TEST(Degrade, NoiseIsSeededAndClamped) {
    Image img(8, 8, 0.5);
    DegradeConfig cfg;
    cfg.attenuation = 0.01;
    cfg.read_noise_sigma = 0.05;
    cfg.quantize_bits.reset();
    cfg.seed = 11;
    const Image a = synth_low_light(img, cfg);
    EXPECT_EQ(a, synth_low_light(img, cfg));
    Rng rng(11);
    EXPECT_EQ(a.data()[0], std::clamp(0.005 + 0.05 * rng.normal(), 0.0, 1.0));
    for (double v : a.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Degrade, RejectsBadConfig) {
    DegradeConfig cfg;
    cfg.attenuation = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.attenuation = 0.1;
    cfg.read_noise_sigma = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.read_noise_sigma = 0.0;
    cfg.quantize_bits = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Tier, Presets) {
    EXPECT_DOUBLE_EQ(tier_by_name("LL-N").target_mean_255, 3.2);
    EXPECT_DOUBLE_EQ(tier_by_name("LL-H").target_mean_255, 1.4);
    EXPECT_DOUBLE_EQ(tier_by_name("LL-E").target_mean_255, 0.9);
    EXPECT_THROW(tier_by_name("LL-X"), ConfigError);
}

TEST(Tier, FitAttenuationHitsTarget) {
    Rng rng(3);
    std::vector<Image> set;
    for (int i = 0; i < 4; ++i) {
        Image img(16, 16);
        for (double& v : img.data()) v = rng.uniform01();
        set.push_back(img);
    }
    DegradeConfig base;
    base.quantize_bits.reset();
    const auto fit = fit_attenuation(set, tier_by_name("LL-E"), base);
    EXPECT_NEAR(fit.achieved_mean_255, 0.9, 0.05);
    double bright_mean = 0.0;
    for (const auto& img : set) bright_mean += mean_intensity(img) / set.size();
    EXPECT_NEAR(fit.attenuation, 0.9 / bright_mean, 1e-6);

    const auto q = fit_attenuation(set, tier_by_name("LL-N"));
    EXPECT_NEAR(q.achieved_mean_255, 3.2, 0.05);
}

TEST(Tier, UnreachableTargetThrows) {
    std::vector<Image> set{Image(4, 4, 0.002)};
    EXPECT_THROW(fit_attenuation(set, tier_by_name("LL-N")), UnreachableError);
}
