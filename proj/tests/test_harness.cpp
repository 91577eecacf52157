#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "lle/lle.hpp"
#include "test_util.hpp"

using namespace lle;
using lle::testing::random_image;
using lle::testing::TempDir;

namespace {

Dataset small_dataset(std::size_t n, std::size_t size, std::uint64_t seed, double alpha = 0.01) {
    DegradeConfig d;
    d.attenuation = alpha;
    d.quantize_bits.reset();
    d.seed = seed;
    return make_pairs(generate_sources(n, size, size, seed), d);
}

TrainConfig tiny_train(int crop) {
    TrainConfig cfg;
    cfg.crop_size = crop;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST(Dataset, SceneGeneratorIsSeededAndOnByteGrid) {
    const auto a = generate_scene(24, 20, 4);
    EXPECT_EQ(a.image, generate_scene(24, 20, 4).image);
    EXPECT_EQ(a.blobs.size(), 3u);
    for (double v : a.image.data()) EXPECT_EQ(v, std::round(v * 255.0) / 255.0);
    EXPECT_FALSE(a.image == generate_scene(24, 20, 5).image);
}

TEST(Dataset, WriteLoadRoundTrip) {
    TempDir tmp("ds");
    DegradeConfig d;
    d.seed = 3;
    const auto ds = make_tier_pairs(generate_sources(3, 16, 16, 1), tier_by_name("LL-H"), d);
    write_dataset(ds, tmp.path());
    const auto back = load_dataset(tmp.path());
    ASSERT_EQ(back.size(), 3u);
    EXPECT_EQ(back.tier, "LL-H");
    EXPECT_DOUBLE_EQ(back.target_mean_255, 1.4);
    EXPECT_DOUBLE_EQ(back.degrade.attenuation, ds.degrade.attenuation);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back.pairs[i].name, ds.pairs[i].name);
        EXPECT_EQ(back.pairs[i].dark, ds.pairs[i].dark);
        EXPECT_EQ(back.pairs[i].bright, ds.pairs[i].bright);
        EXPECT_EQ(back.pairs[i].keypoints, ds.pairs[i].keypoints);
    }
}

TEST(Dataset, MissingPairIsAnError) {
    TempDir tmp("ds_missing");
    DegradeConfig d;
    write_dataset(make_pairs(generate_sources(2, 8, 8, 1), d), tmp.path());
    std::filesystem::remove(tmp.path() / "dark" / "scene_0001.png");
    EXPECT_THROW(load_dataset(tmp.path()), IoError);
    EXPECT_THROW(load_dataset(tmp.path() / "nowhere"), IoError);
}

TEST(Format, SixSignificantDigits) {
    EXPECT_EQ(format6(0.1234567891), "0.123457");
    EXPECT_EQ(format6(1234567.0), "1.23457e+06");
    EXPECT_EQ(format6(2.0), "2");
}

TEST(Psnr, ClampsAndCaps) {
    Image a(1, 1, 0.5), b(1, 1, 0.5);
    EXPECT_EQ(psnr(a, b), 100.0);
    Image c(1, 1, 1.5), d(1, 1, 0.9);
    EXPECT_NEAR(psnr(c, d), -10.0 * std::log10(0.01), 1e-9);
}

TEST(Grid, DefaultsContainIdentity) {
    const auto g = GridSpec::default_grid();
    EXPECT_EQ(g.size(), 1575u);
    EXPECT_EQ(g.a.size(), 9u);
    EXPECT_EQ(g.gamma.size(), 7u);
    EXPECT_EQ(g.a.front(), 1.0);
    EXPECT_EQ(g.a.back(), 256.0);
    EXPECT_EQ(g.a[6], 64.0);
    EXPECT_EQ(g.gamma[3], 1.0);
    EXPECT_EQ(g.sigma1.front(), 0.1);
    EXPECT_EQ(g.sigma2.front(), 0.01);
    EXPECT_NO_THROW(g.validate());
    GridSpec bad = g;
    bad.gamma = {0.5, 2.0};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = g;
    bad.a.push_back(300.0);
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Grid, IdentityOnlyGridReturnsIdentity) {
    const auto ds = small_dataset(1, 10, 2);
    const auto task = make_task({});
    const TaskReference ref{&ds.pairs[0].bright, nullptr};
    const auto r = grid_search(ds.pairs[0].dark, ref, GridSpec::identity_only(), PipelineSpec{}, *task);
    EXPECT_EQ(r.params, LLEParams::identity());
    EXPECT_EQ(r.index, 0u);
    EXPECT_DOUBLE_EQ(r.loss, task->loss(pipeline_apply(ds.pairs[0].dark, LLEParams::identity(), PipelineSpec{}), ref));
    EXPECT_EQ(r.loss, r.identity_loss);
}

TEST(Grid, MatchesUncachedBruteForceAndBreaksTiesEarly) {
    Rng rng(3);
    const Image bright = random_image(6, 6, rng);
    const Image dark = exposure(bright, 0.05);
    GridSpec g{{1.0, 4.0, 16.0, 64.0}, {0.5, 1.0, 2.0}, {0.1, 1.0}, {0.01, 0.3}};
    const auto task = make_task({});
    const TaskReference ref{&bright, nullptr};
    for (const auto& spec : {PipelineSpec::parse("EGS"), PipelineSpec::parse("SGE"), PipelineSpec::parse("GS")}) {
        const auto r = grid_search(dark, ref, g, spec, *task);
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = 0, i = 0;
        for (double a : g.a)
            for (double gm : g.gamma)
                for (double s1 : g.sigma1)
                    for (double s2 : g.sigma2) {
                        const LLEParams p{a, gm, {s1, s1, s1}, {s2, s2, s2}};
                        const double l = task->loss(pipeline_apply(dark, p, spec), ref);
                        if (l < best) {
                            best = l;
                            best_i = i;
                        }
                        ++i;
                    }
        EXPECT_EQ(r.loss, best) << spec.order_string();
        EXPECT_EQ(r.index, best_i) << spec.order_string();
    }
    // Without S or E in the pipeline, every (a, sigma) setting ties; the
    // earliest index wins.
    const auto r = grid_search(dark, ref, g, PipelineSpec::parse("G"), *task);
    EXPECT_EQ(r.params.a, 1.0);
    EXPECT_EQ(r.params.sigma1[0], 0.1);
    EXPECT_EQ(r.params.sigma2[0], 0.01);
}

TEST(Grid, NeverWorseThanIdentity) {
    const auto ds = small_dataset(3, 12, 9);
    GridSpec g{{1.0, 10.0, 100.0}, {0.5, 1.0}, {0.1, 2.0}, {0.01, 0.5}};
    for (auto kind : {TaskKind::RefMSE, TaskKind::FeatureMSE, TaskKind::BlobHeatmap}) {
        const auto task = make_task({kind, 1});
        const auto targets = prepare_targets(ds, *task);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto r = grid_search(ds.pairs[i].dark, targets.reference(ds, i), g, PipelineSpec{}, *task);
            EXPECT_LE(r.loss, r.identity_loss);
        }
    }
}

TEST(Train, ZeroImagesLeavesModelUnchanged) {
    Dataset empty;
    auto cfg = tiny_train(16);
    cfg.epochs = 1;
    const auto task = make_task({});
    const auto r = train(cfg, empty, *task);
    EXPECT_TRUE(r.history.epoch_loss.empty());
    auto init = init_predictor(cfg.effective_arch(), cfg.seed);
    init.training = false;
    EXPECT_EQ(r.model, init);
}

TEST(Train, DeterministicAndThreadIndependent) {
    const auto ds = small_dataset(5, 16, 1);
    auto cfg = tiny_train(16);
    const auto task = make_task({});
    const auto a = train(cfg, ds, *task);
    const auto b = train(cfg, ds, *task);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.history.epoch_loss, b.history.epoch_loss);
    cfg.threads = 3;
    const auto c = train(cfg, ds, *task);
    EXPECT_EQ(a.model, c.model);
    EXPECT_EQ(a.model.step, 6);  // 3 batches x 2 epochs
    EXPECT_EQ(a.history.epoch_loss.size(), 2u);
}

TEST(Train, DefaultsMatchDocumentedValues) {
    const TrainConfig cfg;
    EXPECT_EQ(cfg.learning_rate, 1e-4);
    EXPECT_EQ(cfg.epochs, 10);
    EXPECT_EQ(cfg.batch_size, 8);
    EXPECT_EQ(cfg.crop_size, 256);
}

TEST(Train, NonFiniteLossReportsImageAndParams) {
    auto ds = small_dataset(2, 8, 1);
    ds.pairs[1].bright.data()[4] = std::numeric_limits<double>::quiet_NaN();
    const auto task = make_task({});
    try {
        train(tiny_train(8), ds, *task);
        FAIL();
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("scene_0001"), std::string::npos) << msg;
        EXPECT_NE(msg.find("gamma"), std::string::npos) << msg;
    }
}

TEST(Train, MissingKeypointsForBlobTask) {
    auto ds = small_dataset(2, 8, 1);
    ds.pairs[0].keypoints.clear();
    const auto task = make_task({TaskKind::BlobHeatmap, 0});
    EXPECT_THROW(train(tiny_train(8), ds, *task), ConfigError);
}

TEST(Evaluate, RepeatOrderDoesNotMatterAndOracleDominatesIdentity) {
    const auto ds = small_dataset(3, 16, 2);
    const auto task = make_task({});
    const auto trained = train(tiny_train(16), ds, *task).model;
    EvalConfig ec;
    ec.crop_size = 16;
    ec.repeat_seeds = {11, 22, 33};
    ec.grid = GridSpec{{1.0, 16.0, 128.0}, {0.5, 1.0}, {0.1}, {0.01, 0.1}};
    const auto a = evaluate(trained, ds, *task, ec);
    ec.repeat_seeds = {33, 11, 22};
    const auto b = evaluate(trained, ds, *task, ec);
    auto ja = report_json(a), jb = report_json(b);
    ja.erase("metadata");
    jb.erase("metadata");
    EXPECT_EQ(ja.dump(), jb.dump());
    EXPECT_EQ(report_table(a), report_table(b));
    for (const auto& im : a.images) EXPECT_LE(*im.oracle_loss, im.identity_loss);
    EXPECT_EQ(a.metadata.at("repeats"), 3);
}

TEST(Evaluate, CenterModeIsDeterministicAndIdentityRowPresent) {
    const auto ds = small_dataset(2, 12, 3);
    const auto task = make_task({});
    const auto model = init_predictor(tiny_train(12).effective_arch(), 1);
    EvalConfig ec;
    ec.crop_size = 12;
    ec.repeats = 1;
    const auto a = evaluate(model, ds, *task, ec);
    const auto b = evaluate(model, ds, *task, ec);
    EXPECT_EQ(report_table(a), report_table(b));
    EXPECT_NE(report_table(a).find("identity"), std::string::npos);
    EXPECT_GT(a.identity_loss, 0.0);
    // Evaluating a train-mode model uses eval-mode statistics.
    auto tm = model;
    tm.training = true;
    EXPECT_EQ(report_table(evaluate(tm, ds, *task, ec)), report_table(a));
}

TEST(Ablate, SingleVariantEqualsTrainPlusEvaluate) {
    const auto ds = small_dataset(4, 16, 4);
    const auto test = small_dataset(2, 16, 40);
    const auto task = make_task({});
    const auto cfg = tiny_train(16);
    const auto table = ablate(ds, {{"T", &test}}, cfg, {PipelineSpec{}}, *task, 2);
    ASSERT_EQ(table.rows.size(), 1u);
    EXPECT_EQ(table.tiers, (std::vector<std::string>{"T", "All"}));
    const auto model = train(cfg, ds, *task).model;
    EvalConfig ec;
    ec.repeats = 2;
    ec.crop_size = 16;
    ec.seed = cfg.seed;
    const auto rep = evaluate(model, test, *task, ec);
    EXPECT_EQ(table.rows[0].tier_loss[0], rep.predictor_loss);
    EXPECT_EQ(table.rows[0].tier_loss[1], rep.predictor_loss);
}

TEST(Ablate, ParallelVariantsMatchSequential) {
    const auto ds = small_dataset(3, 16, 4);
    const auto test = small_dataset(2, 16, 41);
    const auto task = make_task({});
    std::vector<PipelineSpec> v{PipelineSpec::parse("EGS"), PipelineSpec::parse("GES"), PipelineSpec::parse("SEG")};
    const auto seq = ablate(ds, {{"T", &test}}, tiny_train(16), v, *task, 1, 1);
    const auto par = ablate(ds, {{"T", &test}}, tiny_train(16), v, *task, 1, 3);
    EXPECT_EQ(ablation_table_text(seq), ablation_table_text(par));
    EXPECT_EQ(ablation_json(seq).dump(), ablation_json(par).dump());
    EXPECT_EQ(seq.rows[1].order, "GES");
}

TEST(Table, AlignedAndStable) {
    const auto t = format_table({"name", "x"}, {{"a", "1"}, {"long", "22"}});
    EXPECT_EQ(t, "name   x\n--------\na      1\nlong  22\n");
}

TEST(Enhance, ExplicitGainInvertsDarkening) {
    DegradeConfig d;
    d.attenuation = 0.01;
    d.quantize_bits.reset();
    const auto ds = make_pairs(generate_sources(3, 24, 24, 8), d);
    LLEParams p = LLEParams::identity();
    p.a = 100.0;
    for (const auto& pair : ds.pairs) EXPECT_GE(psnr(pipeline_apply(pair.dark, p, PipelineSpec{}), pair.bright), 30.0) << pair.name;
    // 8-bit darkening loses too much for the same gain.
    d.quantize_bits = 8;
    const auto q = make_pairs(generate_sources(3, 24, 24, 8), d);
    EXPECT_LT(psnr(pipeline_apply(q.pairs[0].dark, p, PipelineSpec{}), q.pairs[0].bright), 30.0);
}
