#pragma once

// End-to-end predictor training, per-image grid-search oracle, evaluation
// reports and operator ablations.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lle/dataset.hpp"
#include "lle/downstream.hpp"
#include "lle/error.hpp"
#include "lle/image.hpp"
#include "lle/isp.hpp"
#include "lle/parallel.hpp"
#include "lle/predictor.hpp"
#include "lle/rng.hpp"

namespace lle {

/// Fixed 6-significant-digit formatting used by every report and table.
inline std::string format6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Per-sample reference data prepared once per dataset for a task.
struct PreparedTargets {
    std::vector<Heatmap> heatmaps;

    TaskReference reference(const Dataset& ds, std::size_t i) const {
        TaskReference ref;
        ref.bright = &ds.pairs[i].bright;
        if (!heatmaps.empty()) ref.heatmap = &heatmaps[i];
        return ref;
    }
};

inline PreparedTargets prepare_targets(const Dataset& ds, const DownstreamTask& task) {
    PreparedTargets t;
    if (task.needs_heatmap()) {
        for (const auto& p : ds.pairs) {
            if (p.keypoints.empty()) throw ConfigError("blob_heatmap task: pair '" + p.name + "' has no keypoints");
            t.heatmaps.push_back(render_heatmap(p.bright.height(), p.bright.width(), p.keypoints));
        }
    }
    return t;
}

/// PSNR in dB of the export-clamped image against the reference, capped at 100.
inline double psnr(const Image& img, const Image& ref) {
    require_same_shape(img, ref, "psnr");
    double sum = 0.0;
    const auto a = img.data(), b = ref.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::clamp(a[i], 0.0, 1.0) - b[i];
        sum += d * d;
    }
    const double mse = a.empty() ? 0.0 : sum / static_cast<double>(a.size());
    if (mse <= 1e-10) return 100.0;
    return -10.0 * std::log10(mse);
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 10;
    int batch_size = 8;
    int crop_size = 256;
    std::uint64_t seed = 0;
    PipelineSpec spec;
    TaskConfig task;
    std::string train_dir;
    std::string test_dir;
    int threads = 1;
    /// Architecture; input_size is forced to crop_size.
    PredictorArch arch = PredictorArch::default_arch();

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (crop_size < 1) throw ConfigError("crop size must be >= 1");
        spec.validate();
    }

    PredictorArch effective_arch() const {
        PredictorArch a = arch;
        a.input_size = crop_size;
        return a;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr", c.learning_rate},   {"epochs", c.epochs},        {"batch", c.batch_size},
                       {"crop", c.crop_size},      {"seed", c.seed},            {"pipeline", c.spec},
                       {"task", c.task},           {"train_dir", c.train_dir},  {"test_dir", c.test_dir},
                       {"threads", c.threads},     {"arch", c.effective_arch()}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.learning_rate = j.value("lr", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch", c.batch_size);
    c.crop_size = j.value("crop", c.crop_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("pipeline")) c.spec = j.at("pipeline").get<PipelineSpec>();
    if (j.contains("task")) c.task = j.at("task").get<TaskConfig>();
    c.train_dir = j.value("train_dir", c.train_dir);
    c.test_dir = j.value("test_dir", c.test_dir);
    c.threads = j.value("threads", c.threads);
    if (j.contains("arch")) c.arch = j.at("arch").get<PredictorArch>();
}

struct TrainHistory {
    std::vector<double> epoch_loss;
};

struct TrainResult {
    PredictorModel model;
    TrainHistory history;
};

/// Called after every optimiser step with (epoch, step, batch mean loss).
using TrainProgress = std::function<void(int, std::int64_t, double)>;

/// Trains a predictor end to end. Per sample: random crop of the dark image
/// -> predicted raw parameters -> squash -> forward-mode JVP of the pipeline
/// on the full dark image -> task loss and its raw-parameter gradient. The
/// batch gradient is the mean over samples in manifest order; one Adam step
/// per batch. Deterministic for a fixed seed.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const DownstreamTask& task,
                         const TrainProgress& progress = {}) {
    cfg.validate();
    const std::uint64_t task_digest = task.digest();
    const auto targets = prepare_targets(data, task);

    TrainResult result;
    result.model = init_predictor(cfg.effective_arch(), cfg.seed);
    result.model.training = true;
    auto& model = result.model;
    AdamState adam = make_adam(model, cfg.learning_rate);

    const std::size_t n = data.size();
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    std::int64_t batch_index = 0;
    for (int epoch = 0; epoch < cfg.epochs && n > 0; ++epoch) {
        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t end = std::min(n, start + batch);
            const std::size_t bsz = end - start;
            std::vector<Image> crops;
            for (std::size_t i = start; i < end; ++i)
                crops.push_back(random_crop(data.pairs[i].dark, static_cast<std::size_t>(cfg.crop_size),
                                            derive_seed(cfg.seed, 1 + static_cast<std::uint64_t>(epoch), i)));
            const auto pred = predict(model, crops, derive_seed(cfg.seed, 0xD50F, static_cast<std::uint64_t>(batch_index)),
                                      cfg.threads);

            std::vector<ParamVector> grad_raw(bsz);
            std::vector<double> losses(bsz);
            parallel_for(bsz, cfg.threads, [&](std::size_t b0, std::size_t b1) {
                for (std::size_t b = b0; b < b1; ++b) {
                    const std::size_t i = start + b;
                    const auto sq = squash(pred.raw[b]);
                    const auto bundle = pipeline_jvp(data.pairs[i].dark, sq.params, sq.dparams_draw, cfg.spec);
                    const auto lg = task.loss_jvp(bundle, targets.reference(data, i));
                    bool finite = std::isfinite(lg.loss);
                    for (double d : lg.dloss_draw) finite = finite && std::isfinite(d);
                    if (!finite)
                        throw NumericError("non-finite loss on image '" + data.pairs[i].name + "' at epoch " +
                                           std::to_string(epoch) + " with params " + nlohmann::json(sq.params).dump());
                    losses[b] = lg.loss;
                    for (std::size_t k = 0; k < kNumParams; ++k) grad_raw[b][k] = lg.dloss_draw[k] / static_cast<double>(bsz);
                }
            });

            const auto grads = backward(model, pred.cache, grad_raw, cfg.threads);
            update_running_stats(model, pred.cache);
            adam_step(model, adam, grads);
            double batch_sum = 0.0;
            for (double l : losses) batch_sum += l;
            epoch_sum += batch_sum;
            if (progress) progress(epoch, model.step, batch_sum / static_cast<double>(bsz));
            ++batch_index;
        }
        result.history.epoch_loss.push_back(epoch_sum / static_cast<double>(n));
    }
    if (task.digest() != task_digest) throw Error("downstream task assets changed during training");
    model.training = false;
    return result;
}

// ---------------------------------------------------------------------------
// Grid search.

struct GridSpec {
    std::vector<double> a, gamma, sigma1, sigma2;

    /// n log-spaced points over [lo, hi]; a point within 1e-9 of 1 snaps to 1.
    static std::vector<double> log_space(double lo, double hi, int n) {
        std::vector<double> v;
        for (int i = 0; i < n; ++i) {
            double x = n == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
            if (std::abs(x - 1.0) < 1e-9) x = 1.0;
            v.push_back(std::clamp(x, lo, hi));
        }
        v.front() = lo;
        if (n > 1) v.back() = hi;
        return v;
    }

    /// a: 9 points over [1, 256]; gamma: 7 over [0.2, 5]; sigma1, sigma2: 5 each
    /// (tied across channels). 1575 points.
    static GridSpec default_grid() {
        return {log_space(kExposureBounds.lo, kExposureBounds.hi, 9), log_space(kGammaBounds.lo, kGammaBounds.hi, 7),
                log_space(kSigma1Bounds.lo, kSigma1Bounds.hi, 5), log_space(kSigma2Bounds.lo, kSigma2Bounds.hi, 5)};
    }

    static GridSpec identity_only() { return {{1.0}, {1.0}, {kSigma1Bounds.lo}, {kSigma2Bounds.lo}}; }

    std::size_t size() const { return a.size() * gamma.size() * sigma1.size() * sigma2.size(); }

    void validate() const {
        auto check = [](const std::vector<double>& v, ParamBounds b, const char* name) {
            if (v.empty()) throw ConfigError(std::string("grid for ") + name + " is empty");
            for (double x : v)
                if (!(x >= b.lo && x <= b.hi)) throw ConfigError(std::string("grid value for ") + name + " outside bounds");
        };
        check(a, kExposureBounds, "a");
        check(gamma, kGammaBounds, "gamma");
        check(sigma1, kSigma1Bounds, "sigma1");
        check(sigma2, kSigma2Bounds, "sigma2");
        auto has = [](const std::vector<double>& v, double x) { return std::find(v.begin(), v.end(), x) != v.end(); };
        if (!has(a, 1.0) || !has(gamma, 1.0) || !has(sigma1, kSigma1Bounds.lo) || !has(sigma2, kSigma2Bounds.lo))
            throw ConfigError("grid must contain the identity point (a=1, gamma=1, minimal sigma1 and sigma2)");
    }

    LLEParams point(std::size_t ia, std::size_t ig, std::size_t is1, std::size_t is2) const {
        return {a[ia], gamma[ig], {sigma1[is1], sigma1[is1], sigma1[is1]}, {sigma2[is2], sigma2[is2], sigma2[is2]}};
    }
};

inline void to_json(nlohmann::json& j, const GridSpec& g) {
    j = nlohmann::json{{"a", g.a}, {"gamma", g.gamma}, {"sigma1", g.sigma1}, {"sigma2", g.sigma2}};
}

inline void from_json(const nlohmann::json& j, GridSpec& g) {
    j.at("a").get_to(g.a);
    j.at("gamma").get_to(g.gamma);
    j.at("sigma1").get_to(g.sigma1);
    j.at("sigma2").get_to(g.sigma2);
}

struct GridResult {
    LLEParams params;
    double loss = std::numeric_limits<double>::infinity();
    std::size_t index = 0;
    double identity_loss = 0.0;
};

/// Exhaustive search; iteration order a (outermost), gamma, sigma1, sigma2.
/// Ties keep the earliest index. Intermediate operator outputs are reused
/// while the parameters they depend on are unchanged.
inline GridResult grid_search(const Image& img, const TaskReference& ref, const GridSpec& grid, const PipelineSpec& spec,
                              const DownstreamTask& task, int threads = 1) {
    grid.validate();
    spec.validate();
    GridResult best;
    const std::size_t stages = spec.order.size();
    std::vector<Image> stage_out(stages);
    std::vector<std::array<double, 2>> stage_key(stages, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    auto key_of = [](Operator op, const LLEParams& p) -> std::array<double, 2> {
        switch (op) {
            case Operator::Exposure: return {p.a, 0.0};
            case Operator::Gamma: return {p.gamma, 0.0};
            case Operator::Smoothing: return {p.sigma1[0], p.sigma2[0]};
        }
        return {0.0, 0.0};
    };

    const LLEParams identity = LLEParams::identity();
    std::size_t index = 0;
    for (std::size_t ia = 0; ia < grid.a.size(); ++ia)
        for (std::size_t ig = 0; ig < grid.gamma.size(); ++ig)
            for (std::size_t i1 = 0; i1 < grid.sigma1.size(); ++i1)
                for (std::size_t i2 = 0; i2 < grid.sigma2.size(); ++i2, ++index) {
                    const LLEParams p = grid.point(ia, ig, i1, i2);
                    bool dirty = false;
                    for (std::size_t s = 0; s < stages; ++s) {
                        const auto key = key_of(spec.order[s], p);
                        if (dirty || key != stage_key[s]) {
                            dirty = true;
                            const Image& in = s == 0 ? img : stage_out[s - 1];
                            stage_out[s] = apply_operator(in, spec.order[s], p, spec.window_half_width, threads);
                            stage_key[s] = key;
                        }
                    }
                    const double loss = task.loss(stage_out.back(), ref);
                    if (p == identity) best.identity_loss = loss;
                    if (loss < best.loss) {
                        best.loss = loss;
                        best.params = p;
                        best.index = index;
                    }
                }
    return best;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalConfig {
    int repeats = 3;
    int crop_size = 256;
    std::uint64_t seed = 0;
    PipelineSpec spec;
    /// When set, every image also gets a grid-search oracle row.
    std::optional<GridSpec> grid;
    /// Explicit per-repeat crop seeds; derived from `seed` when empty.
    std::vector<std::uint64_t> repeat_seeds;
    int threads = 1;

    std::vector<std::uint64_t> effective_repeat_seeds() const {
        if (!repeat_seeds.empty()) return repeat_seeds;
        std::vector<std::uint64_t> s;
        for (int r = 0; r < repeats; ++r) s.push_back(derive_seed(seed, 0xE7A1, static_cast<std::uint64_t>(r)));
        return s;
    }
};

struct ImageReport {
    std::string name;
    double identity_loss = 0.0, identity_psnr = 0.0;
    double predictor_loss = 0.0, predictor_psnr = 0.0;  // mean over random-crop repeats
    double center_loss = 0.0, center_psnr = 0.0;        // deterministic centre crop
    LLEParams center_params;
    std::optional<double> oracle_loss, oracle_psnr;
    std::optional<LLEParams> oracle_params;
};

struct RunReport {
    std::vector<ImageReport> images;
    double identity_loss = 0.0, identity_psnr = 0.0;
    double predictor_loss = 0.0, predictor_psnr = 0.0;
    double center_loss = 0.0, center_psnr = 0.0;
    std::optional<double> oracle_loss, oracle_psnr;
    nlohmann::json metadata = nlohmann::json::object();
};

/// Sum of values in sorted order, so the result is independent of input order.
inline double order_free_mean(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Scores a trained predictor against the identity-parameter baseline (and,
/// optionally, the grid-search oracle) on every pair. Predictor metrics are
/// averaged over seeded random crops; a centre-crop variant is also reported.
inline RunReport evaluate(const PredictorModel& trained, const Dataset& data, const DownstreamTask& task, const EvalConfig& cfg) {
    if (cfg.repeats < 1 && cfg.repeat_seeds.empty()) throw ConfigError("evaluate: repeats must be >= 1");
    cfg.spec.validate();
    const auto start_time = std::chrono::steady_clock::now();
    PredictorModel model = trained;
    model.training = false;
    const auto targets = prepare_targets(data, task);
    const auto seeds = cfg.effective_repeat_seeds();
    const auto crop = static_cast<std::size_t>(cfg.crop_size);

    RunReport report;
    report.images.resize(data.size());
    parallel_for(data.size(), cfg.threads, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const auto& pair = data.pairs[i];
            const auto ref = targets.reference(data, i);
            ImageReport& r = report.images[i];
            r.name = pair.name;

            const Image base = pipeline_apply(pair.dark, LLEParams::identity(), cfg.spec);
            r.identity_loss = task.loss(base, ref);
            r.identity_psnr = psnr(base, pair.bright);

            std::vector<double> losses, psnrs;
            for (auto s : seeds) {
                const auto raw = predict_one(model, random_crop(pair.dark, crop, derive_seed(s, i)));
                const Image out = pipeline_apply(pair.dark, squash(raw).params, cfg.spec);
                losses.push_back(task.loss(out, ref));
                psnrs.push_back(psnr(out, pair.bright));
            }
            r.predictor_loss = order_free_mean(losses);
            r.predictor_psnr = order_free_mean(psnrs);

            r.center_params = squash(predict_one(model, center_crop(pair.dark, crop))).params;
            const Image centre = pipeline_apply(pair.dark, r.center_params, cfg.spec);
            r.center_loss = task.loss(centre, ref);
            r.center_psnr = psnr(centre, pair.bright);

            if (cfg.grid) {
                const auto g = grid_search(pair.dark, ref, *cfg.grid, cfg.spec, task);
                r.oracle_loss = g.loss;
                r.oracle_params = g.params;
                r.oracle_psnr = psnr(pipeline_apply(pair.dark, g.params, cfg.spec), pair.bright);
            }
        }
    });

    auto mean_of = [&](auto field) {
        double s = 0.0;
        for (const auto& r : report.images) s += field(r);
        return report.images.empty() ? 0.0 : s / static_cast<double>(report.images.size());
    };
    report.identity_loss = mean_of([](const ImageReport& r) { return r.identity_loss; });
    report.identity_psnr = mean_of([](const ImageReport& r) { return r.identity_psnr; });
    report.predictor_loss = mean_of([](const ImageReport& r) { return r.predictor_loss; });
    report.predictor_psnr = mean_of([](const ImageReport& r) { return r.predictor_psnr; });
    report.center_loss = mean_of([](const ImageReport& r) { return r.center_loss; });
    report.center_psnr = mean_of([](const ImageReport& r) { return r.center_psnr; });
    if (cfg.grid) {
        report.oracle_loss = mean_of([](const ImageReport& r) { return *r.oracle_loss; });
        report.oracle_psnr = mean_of([](const ImageReport& r) { return *r.oracle_psnr; });
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    report.metadata = {{"seed", cfg.seed}, {"repeats", seeds.size()}, {"pipeline", cfg.spec}, {"task", task_name(task.kind())},
                       {"wall_time_s", wall}};
    return report;
}

inline nlohmann::json params_json(const LLEParams& p) {
    nlohmann::json j;
    j["a"] = format6(p.a);
    j["gamma"] = format6(p.gamma);
    j["sigma1"] = {format6(p.sigma1[0]), format6(p.sigma1[1]), format6(p.sigma1[2])};
    j["sigma2"] = {format6(p.sigma2[0]), format6(p.sigma2[1]), format6(p.sigma2[2])};
    return j;
}

/// JSON form with every number rendered through format6 so the text is
/// byte-stable for fixed inputs.
inline nlohmann::json report_json(const RunReport& r) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& im : r.images) {
        nlohmann::json j{{"name", im.name},
                         {"identity_loss", format6(im.identity_loss)},
                         {"identity_psnr", format6(im.identity_psnr)},
                         {"predictor_loss", format6(im.predictor_loss)},
                         {"predictor_psnr", format6(im.predictor_psnr)},
                         {"center_loss", format6(im.center_loss)},
                         {"center_psnr", format6(im.center_psnr)},
                         {"center_params", params_json(im.center_params)}};
        if (im.oracle_loss) {
            j["oracle_loss"] = format6(*im.oracle_loss);
            j["oracle_psnr"] = format6(*im.oracle_psnr);
            j["oracle_params"] = params_json(*im.oracle_params);
        }
        images.push_back(std::move(j));
    }
    nlohmann::json agg{{"identity_loss", format6(r.identity_loss)},   {"identity_psnr", format6(r.identity_psnr)},
                       {"predictor_loss", format6(r.predictor_loss)}, {"predictor_psnr", format6(r.predictor_psnr)},
                       {"center_loss", format6(r.center_loss)},       {"center_psnr", format6(r.center_psnr)}};
    if (r.oracle_loss) {
        agg["oracle_loss"] = format6(*r.oracle_loss);
        agg["oracle_psnr"] = format6(*r.oracle_psnr);
    }
    return nlohmann::json{{"aggregate", agg}, {"images", images}, {"metadata", r.metadata}};
}

/// Plain-text table with right-aligned columns.
inline std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
    std::ostringstream out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < header.size(); ++c) {
            const std::string& cell = c < row.size() ? row[c] : std::string();
            if (c) out << "  ";
            if (c == 0)
                out << cell << std::string(width[c] - cell.size(), ' ');
            else
                out << std::string(width[c] - cell.size(), ' ') << cell;
        }
        out << '\n';
    };
    emit(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& row : rows) emit(row);
    return out.str();
}

inline std::string report_table(const RunReport& r) {
    std::vector<std::string> header{"image", "identity", "predictor", "center", "psnr_id", "psnr_pred"};
    if (r.oracle_loss) {
        header.push_back("oracle");
        header.push_back("psnr_oracle");
    }
    std::vector<std::vector<std::string>> rows;
    auto row_of = [&](const std::string& name, double il, double pl, double cl, double ip, double pp, std::optional<double> ol,
                      std::optional<double> op) {
        std::vector<std::string> row{name, format6(il), format6(pl), format6(cl), format6(ip), format6(pp)};
        if (r.oracle_loss) {
            row.push_back(format6(ol.value_or(0.0)));
            row.push_back(format6(op.value_or(0.0)));
        }
        return row;
    };
    for (const auto& im : r.images)
        rows.push_back(row_of(im.name, im.identity_loss, im.predictor_loss, im.center_loss, im.identity_psnr, im.predictor_psnr,
                              im.oracle_loss, im.oracle_psnr));
    rows.push_back(row_of("mean", r.identity_loss, r.predictor_loss, r.center_loss, r.identity_psnr, r.predictor_psnr,
                          r.oracle_loss, r.oracle_psnr));
    return format_table(header, rows);
}

// ---------------------------------------------------------------------------
// Ablation.

struct TierSet {
    std::string name;
    const Dataset* data = nullptr;
};

struct AblationRow {
    std::string order;
    std::vector<double> tier_loss;  // per tier, then the union ("All") last
    std::vector<double> tier_psnr;
    TrainHistory history;
};

struct AblationTable {
    std::vector<std::string> tiers;  // tier names followed by "All"
    std::vector<AblationRow> rows;
    double identity_loss = 0.0;
};

/// Trains one predictor per pipeline variant from the same seed and settings
/// and scores each on every test tier plus their union. Variants may train
/// concurrently (`threads`); each run is itself single-threaded, so results
/// do not depend on the thread count.
inline AblationTable ablate(const Dataset& train_set, const std::vector<TierSet>& test_tiers, const TrainConfig& cfg,
                            const std::vector<PipelineSpec>& variants, const DownstreamTask& task, int repeats = 3,
                            int threads = 1) {
    AblationTable table;
    for (const auto& t : test_tiers) table.tiers.push_back(t.name);
    table.tiers.push_back("All");
    table.rows.resize(variants.size());
    parallel_for(variants.size(), threads, [&](std::size_t v0, std::size_t v1) {
        for (std::size_t v = v0; v < v1; ++v) {
            TrainConfig vc = cfg;
            vc.spec = variants[v];
            vc.threads = 1;
            auto trained = train(vc, train_set, task);
            AblationRow& row = table.rows[v];
            row.order = variants[v].order_string();
            row.history = trained.history;
            double all_loss = 0.0, all_psnr = 0.0;
            std::size_t all_n = 0;
            for (const auto& tier : test_tiers) {
                EvalConfig ec;
                ec.repeats = repeats;
                ec.crop_size = cfg.crop_size;
                ec.seed = cfg.seed;
                ec.spec = variants[v];
                const auto rep = evaluate(trained.model, *tier.data, task, ec);
                row.tier_loss.push_back(rep.predictor_loss);
                row.tier_psnr.push_back(rep.predictor_psnr);
                all_loss += rep.predictor_loss * static_cast<double>(tier.data->size());
                all_psnr += rep.predictor_psnr * static_cast<double>(tier.data->size());
                all_n += tier.data->size();
            }
            row.tier_loss.push_back(all_n ? all_loss / static_cast<double>(all_n) : 0.0);
            row.tier_psnr.push_back(all_n ? all_psnr / static_cast<double>(all_n) : 0.0);
        }
    });
    return table;
}

inline std::string ablation_table_text(const AblationTable& t) {
    std::vector<std::string> header{"order"};
    for (const auto& name : t.tiers) header.push_back(name);
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : t.rows) {
        std::vector<std::string> row{r.order};
        for (double l : r.tier_loss) row.push_back(format6(l));
        rows.push_back(std::move(row));
    }
    return format_table(header, rows);
}

inline nlohmann::json ablation_json(const AblationTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
        nlohmann::json loss, ps;
        for (std::size_t i = 0; i < t.tiers.size(); ++i) {
            loss[t.tiers[i]] = format6(r.tier_loss[i]);
            ps[t.tiers[i]] = format6(r.tier_psnr[i]);
        }
        nlohmann::json hist = nlohmann::json::array();
        for (double h : r.history.epoch_loss) hist.push_back(format6(h));
        rows.push_back({{"order", r.order}, {"test_loss", loss}, {"test_psnr", ps}, {"train_history", hist}});
    }
    return nlohmann::json{{"tiers", t.tiers}, {"rows", rows}};
}

}  // namespace lle
