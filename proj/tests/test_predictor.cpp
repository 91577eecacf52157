#include <gtest/gtest.h>

#include <fstream>

#include "lle/predictor.hpp"
#include "test_util.hpp"

using namespace lle;
using lle::testing::random_image;
using lle::testing::TempDir;

namespace {

PredictorArch tiny_arch() {
    PredictorArch a;
    a.input_size = 4;
    a.layers = {{3, 2, 4, true, true}, {3, 2, 8, false, false}};
    a.dropout_after = 1;
    return a;
}

double probe_loss(const PredictorModel& m, const std::vector<Image>& crops, const std::vector<ParamVector>& g, std::uint64_t seed) {
    const auto raw = predict(m, crops, seed).raw;
    double l = 0.0;
    for (std::size_t b = 0; b < raw.size(); ++b)
        for (std::size_t k = 0; k < kNumParams; ++k) l += raw[b][k] * g[b][k];
    return l;
}

}  // namespace

TEST(Arch, DefaultLayout) {
    const auto a = PredictorArch::default_arch();
    ASSERT_EQ(a.layers.size(), 6u);
    const int channels[6] = {16, 32, 64, 128, 256, 8};
    for (int i = 0; i < 6; ++i) {
        EXPECT_EQ(a.layers[i].out_channels, channels[i]);
        EXPECT_EQ(a.layers[i].batch_norm, i < 3);
        EXPECT_EQ(a.layers[i].kernel, 3);
        EXPECT_EQ(a.layers[i].stride, 2);
    }
    EXPECT_EQ(a.dropout_after, 5);
    EXPECT_EQ(a.dropout_rate, 0.5);
    const auto shapes = a.shapes();
    const int sizes[6] = {128, 64, 32, 16, 8, 4};
    for (int i = 0; i < 6; ++i) EXPECT_EQ(shapes[i].out_height, sizes[i]);
}

TEST(Arch, ParameterCountByHand) {
    // conv k*k*cin*cout + cout, plus scale and shift on the three normalised layers.
    const std::size_t expect = (27 * 16 + 16 + 32) + (144 * 32 + 32 + 64) + (288 * 64 + 64 + 128) + (576 * 128 + 128) +
                               (1152 * 256 + 256) + (2304 * 8 + 8);
    EXPECT_EQ(expect, 411272u);
    EXPECT_EQ(PredictorArch::default_arch().parameter_count(), expect);
    EXPECT_EQ(init_predictor(PredictorArch::default_arch(), 1).parameter_count(), expect);
}

TEST(Arch, ValidationAndJson) {
    auto a = PredictorArch::default_arch();
    a.layers.back().out_channels = 7;
    EXPECT_THROW(a.validate(), ConfigError);
    a = PredictorArch::default_arch();
    a.input_size = 0;
    EXPECT_THROW(a.validate(), ConfigError);
    a = tiny_arch();
    nlohmann::json j = a;
    EXPECT_EQ(j.get<PredictorArch>(), a);
}

TEST(Init, SeededAndBounded) {
    const auto a = init_predictor(PredictorArch::default_arch(), 3);
    EXPECT_EQ(a, init_predictor(PredictorArch::default_arch(), 3));
    EXPECT_FALSE(a == init_predictor(PredictorArch::default_arch(), 4));
    const double b1 = std::sqrt(6.0 / (1.01 * 27));
    for (double w : a.layers[0].weight) EXPECT_LE(std::abs(w), b1);
    const double b6 = 0.1 * std::sqrt(3.0 / 2304);
    for (double w : a.layers[5].weight) EXPECT_LE(std::abs(w), b6);
    for (double v : a.layers[0].running_var) EXPECT_EQ(v, 1.0);
}

TEST(Predict, ShapeAndDeterminism) {
    Rng rng(1);
    auto m = init_predictor(tiny_arch(), 9);
    std::vector<Image> crops{random_image(4, 4, rng), random_image(4, 4, rng)};
    EXPECT_EQ(predict(m, crops, 5).raw, predict(m, crops, 5).raw);
    EXPECT_THROW(predict(m, std::vector<Image>{Image(5, 4)}), ShapeError);
    m.training = false;
    // Eval mode: dropout is the identity and batch composition does not matter.
    const auto full = predict(m, crops, 1).raw;
    EXPECT_EQ(full, predict(m, crops, 2).raw);
    EXPECT_EQ(full[1], predict_one(m, crops[1]));
}

TEST(Predict, EvalModeHandComputedSingleLayer) {
    PredictorArch a;
    a.input_size = 1;
    a.layers = {{1, 1, 8, false, false}};
    auto m = init_predictor(a, 0);
    m.training = false;
    for (std::size_t o = 0; o < 8; ++o) {
        for (std::size_t c = 0; c < 3; ++c) m.layers[0].weight[o * 3 + c] = 0.1 * static_cast<double>(o + c);
        m.layers[0].bias[o] = -0.5;
    }
    Image px(1, 1);
    px.data()[0] = 1.0;
    px.data()[1] = 2.0;
    px.data()[2] = 3.0;
    const auto raw = predict_one(m, px);
    for (std::size_t o = 0; o < 8; ++o) EXPECT_NEAR(raw[o], 0.1 * (o * 6.0 + 8.0) - 0.5, 1e-12);
}

TEST(Backward, MatchesFiniteDifferences) {
    Rng rng(21);
    auto model = init_predictor(tiny_arch(), 4);
    // Non-trivial affine parameters so every path is exercised.
    for (auto t : model.trainable())
        for (double& v : t) v += rng.uniform(-0.3, 0.3);
    std::vector<Image> crops{random_image(4, 4, rng), random_image(4, 4, rng)};
    std::vector<ParamVector> g(2);
    for (auto& gv : g)
        for (auto& v : gv) v = rng.uniform(-1, 1);
    const std::uint64_t seed = 77;
    const auto pred = predict(model, crops, seed);
    const auto grads = backward(model, pred.cache, g);
    auto tensors = model.trainable();
    const auto names = model.trainable_names();
    ASSERT_EQ(grads.size(), tensors.size());
    for (std::size_t t = 0; t < tensors.size(); ++t)
        for (std::size_t i = 0; i < tensors[t].size(); ++i) {
            const double keep = tensors[t][i];
            tensors[t][i] = keep + 1e-4;
            const double hi = probe_loss(model, crops, g, seed);
            tensors[t][i] = keep - 1e-4;
            const double lo = probe_loss(model, crops, g, seed);
            tensors[t][i] = keep;
            const double fd = (hi - lo) / 2e-4;
            EXPECT_NEAR(grads[t][i], fd, 1e-5 + 1e-3 * std::abs(fd)) << names[t] << "[" << i << "]";
        }
}

TEST(Backward, EvalModeMatchesFiniteDifferences) {
    Rng rng(22);
    auto model = init_predictor(tiny_arch(), 5);
    model.training = false;
    for (auto& v : model.layers[0].running_mean) v = rng.uniform(-0.2, 0.2);
    for (auto& v : model.layers[0].running_var) v = rng.uniform(0.5, 2.0);
    std::vector<Image> crops{random_image(4, 4, rng)};
    std::vector<ParamVector> g(1);
    for (auto& v : g[0]) v = rng.uniform(-1, 1);
    const auto grads = backward(model, predict(model, crops).cache, g);
    auto tensors = model.trainable();
    for (std::size_t t = 0; t < tensors.size(); ++t)
        for (std::size_t i = 0; i < tensors[t].size(); ++i) {
            const double keep = tensors[t][i];
            tensors[t][i] = keep + 1e-4;
            const double hi = probe_loss(model, crops, g, 0);
            tensors[t][i] = keep - 1e-4;
            const double lo = probe_loss(model, crops, g, 0);
            tensors[t][i] = keep;
            EXPECT_NEAR(grads[t][i], (hi - lo) / 2e-4, 1e-5 + 1e-3 * std::abs((hi - lo) / 2e-4));
        }
}

TEST(Backward, ThreadCountDoesNotChangeBits) {
    Rng rng(3);
    auto model = init_predictor(tiny_arch(), 6);
    std::vector<Image> crops;
    for (int i = 0; i < 5; ++i) crops.push_back(random_image(4, 4, rng));
    std::vector<ParamVector> g(5);
    for (auto& gv : g) gv.fill(0.25);
    const auto p1 = predict(model, crops, 8, 1);
    const auto p3 = predict(model, crops, 8, 3);
    EXPECT_EQ(p1.raw, p3.raw);
    EXPECT_EQ(backward(model, p1.cache, g, 1), backward(model, p3.cache, g, 3));
}

TEST(RunningStats, MomentumAndUnbiasedVariance) {
    PredictorArch a;
    a.input_size = 1;
    a.layers = {{1, 1, 8, true, false}};
    auto m = init_predictor(a, 0);
    for (double& w : m.layers[0].weight) w = 0.0;
    for (std::size_t o = 0; o < 8; ++o) m.layers[0].weight[o * 3] = 1.0;  // output = red channel
    std::vector<Image> crops{Image(1, 1, 1.0), Image(1, 1, 3.0)};
    const auto pred = predict(m, crops);
    update_running_stats(m, pred.cache);
    // batch mean 2, biased var 1, unbiased 2.
    EXPECT_NEAR(m.layers[0].running_mean[0], 0.9 * 0.0 + 0.1 * 2.0, 1e-15);
    EXPECT_NEAR(m.layers[0].running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
    // Normalised with the biased variance: (1 - 2) / sqrt(1 + eps).
    EXPECT_NEAR(pred.raw[0][0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    PredictorArch a;
    a.input_size = 1;
    a.layers = {{1, 1, 8, false, false}};
    auto m = init_predictor(a, 0);
    const auto before = m.layers[0].weight;
    auto st = make_adam(m, 1e-3);
    auto g = zero_gradients(m);
    for (std::size_t i = 0; i < g[0].size(); ++i) g[0][i] = (i % 2 ? -1.0 : 1.0) * 0.5;
    adam_step(m, st, g);
    // Bias-corrected first step: m_hat = g, v_hat = g^2.
    for (std::size_t i = 0; i < before.size(); ++i) {
        const double step = 1e-3 * 0.5 / (0.5 + 1e-8);
        EXPECT_NEAR(m.layers[0].weight[i], before[i] - (i % 2 ? -step : step), 1e-15);
    }
    EXPECT_EQ(m.layers[0].bias, std::vector<double>(8, 0.0));
    EXPECT_EQ(m.step, 1);
}

TEST(Adam, SecondStepByHand) {
    PredictorArch a;
    a.input_size = 1;
    a.layers = {{1, 1, 8, false, false}};
    auto m = init_predictor(a, 0);
    const double w0 = m.layers[0].bias[0];
    auto st = make_adam(m);
    auto g = zero_gradients(m);
    g[1][0] = 2.0;
    adam_step(m, st, g);
    g[1][0] = -1.0;
    adam_step(m, st, g);
    const double m1 = 0.1 * 2.0, v1 = 0.001 * 4.0;
    const double s1 = 1e-4 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
    const double m2 = 0.9 * m1 + 0.1 * -1.0, v2 = 0.999 * v1 + 0.001 * 1.0;
    const double s2 = 1e-4 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    EXPECT_NEAR(m.layers[0].bias[0], w0 - s1 - s2, 1e-16);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
    auto m = init_predictor(tiny_arch(), 0);
    const auto before = m;
    auto st = make_adam(m);
    auto g = zero_gradients(m);
    g[2][1] = std::numeric_limits<double>::infinity();
    try {
        adam_step(m, st, g);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer1.bn_scale"), std::string::npos) << e.what();
    }
    EXPECT_EQ(m, before);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir tmp("ckpt");
    auto m = init_predictor(PredictorArch::default_arch(), 12);
    m.step = 40;
    m.layers[1].running_var[3] = 0.123456789;
    save_checkpoint(m, tmp.path() / "m.ckpt");
    auto back = load_checkpoint(tmp.path() / "m.ckpt");
    EXPECT_FALSE(back.training);
    back.training = m.training;
    EXPECT_EQ(back, m);
}

TEST(Checkpoint, LayoutHeader) {
    TempDir tmp("ckpt_layout");
    const auto m = init_predictor(tiny_arch(), 1);
    save_checkpoint(m, tmp.path() / "m.ckpt");
    std::ifstream in(tmp.path() / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 8), "LLEPRED1");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.substr(16, len));
    EXPECT_EQ(header.at("tensors").size(), 8u);
    std::size_t floats = 0;
    for (const auto& t : header.at("tensors")) floats += t.at("size").get<std::size_t>();
    EXPECT_EQ(bytes.size(), 16 + len + 8 * floats);
}

TEST(Checkpoint, CorruptFilesRejected) {
    TempDir tmp("ckpt_bad");
    const auto m = init_predictor(tiny_arch(), 1);
    const auto path = tmp.path() / "m.ckpt";
    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream(tmp.path() / name, std::ios::binary) << data;
        return tmp.path() / name;
    };
    EXPECT_THROW(load_checkpoint(write("magic", "XXXXXXXX" + bytes.substr(8))), DecodeError);
    EXPECT_THROW(load_checkpoint(write("cut", bytes.substr(0, bytes.size() - 9))), DecodeError);
    EXPECT_THROW(load_checkpoint(write("hdr", bytes.substr(0, 20))), DecodeError);
    EXPECT_THROW(load_checkpoint(tmp.path() / "absent"), IoError);
    // Negative running variance in the last stored float of layer 1.
    auto neg = bytes;
    const std::size_t len = bytes.size() - 8 * (m.layers[1].weight.size() + m.layers[1].bias.size());
    const double minus = -1.0;
    std::memcpy(neg.data() + len - 8, &minus, 8);
    EXPECT_THROW(load_checkpoint(write("neg", neg)), DecodeError);
}
