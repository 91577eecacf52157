// lle: dataset synthesis, training, enhancement, grid search, ablation and
// evaluation for the low-light enhancement pipeline.
//
// Settings resolve as: command-line flag > LLE_<KEY> environment variable >
// --config JSON file > built-in default. The resolved settings are written to
// <out>/config.json by every command that has an output directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lle/lle.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct OptionDef {
    std::string key;
    json fallback;
    std::string help;
};

// One registered subcommand: its options (all resolved into one JSON object).
struct Command {
    CLI::App* app = nullptr;
    std::vector<OptionDef> defs;
    std::map<std::string, std::string> raw;
    std::map<std::string, bool> flags;
    std::vector<std::string> positional;
};

std::string env_name(const std::string& key) {
    std::string s = "LLE_";
    for (char ch : key) s += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return s;
}

// Converts a textual value to the JSON type of `like`.
json coerce(const std::string& key, const std::string& text, const json& like) {
    try {
        if (like.is_boolean()) {
            if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
            if (text == "0" || text == "false" || text == "no" || text == "off") return false;
            throw lle::ConfigError("invalid boolean '" + text + "' for " + key);
        }
        if (like.is_number_unsigned()) return std::stoull(text);
        if (like.is_number_integer()) return std::stoll(text);
        if (like.is_number_float()) return std::stod(text);
    } catch (const std::logic_error&) {
        throw lle::ConfigError("invalid value '" + text + "' for " + key);
    }
    return text;
}

json resolve(const Command& cmd, const std::string& config_path, const std::string& name) {
    json cfg = json::object();
    for (const auto& d : cmd.defs) cfg[d.key] = d.fallback;

    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw lle::IoError(config_path + ": cannot open config file");
        json file;
        try {
            in >> file;
        } catch (const json::exception& e) {
            throw lle::DecodeError(config_path + ": " + e.what());
        }
        if (!file.is_object()) throw lle::ConfigError(config_path + ": config must be a JSON object");
        // Top-level keys apply to every command; a section named after the
        // command overrides them.
        for (const json* section : {&file, file.contains(name) ? &file.at(name) : nullptr}) {
            if (!section || !section->is_object()) continue;
            for (const auto& d : cmd.defs)
                if (section->contains(d.key)) cfg[d.key] = section->at(d.key);
        }
    }
    for (const auto& d : cmd.defs)
        if (const char* v = std::getenv(env_name(d.key).c_str())) cfg[d.key] = coerce(d.key, v, d.fallback);
    for (const auto& [key, text] : cmd.raw) {
        const auto* opt = cmd.app->get_option_no_throw("--" + key);
        if (opt && opt->count() > 0) {
            const auto it = std::find_if(cmd.defs.begin(), cmd.defs.end(), [&](const OptionDef& d) { return d.key == key; });
            cfg[key] = coerce(key, text, it->fallback);
        }
    }
    for (const auto& [key, on] : cmd.flags)
        if (on) cfg[key] = true;
    if (!cmd.positional.empty()) cfg["inputs"] = cmd.positional;
    return cfg;
}

void add_options(Command& cmd, std::vector<OptionDef> defs) {
    for (auto& d : defs) {
        const std::string help = d.help + " (env " + env_name(d.key) + ", default " + d.fallback.dump() + ")";
        if (d.fallback.is_boolean()) {
            cmd.flags[d.key] = false;
            cmd.app->add_flag("--" + d.key, cmd.flags[d.key], help);
        } else {
            cmd.raw[d.key];
            cmd.app->add_option("--" + d.key, cmd.raw[d.key], help);
        }
        cmd.defs.push_back(std::move(d));
    }
}

std::vector<OptionDef> common_defs() {
    return {{"out", "", "output directory"},
            {"seed", std::uint64_t{0}, "random seed"},
            {"order", "EGS", "operator order, letters from E (exposure), G (gamma), S (bilateral)"},
            {"window", 2, "bilateral window half-width"},
            {"threads", 1, "worker threads"}};
}

std::vector<OptionDef> task_defs() {
    return {{"task", "ref_mse", "downstream task: ref_mse, feature_mse or blob_heatmap"},
            {"task-seed", std::uint64_t{0}, "seed of the frozen feature network"}};
}

std::vector<OptionDef> train_defs() {
    return {{"lr", 1e-4, "Adam learning rate"},
            {"epochs", 10, "training epochs"},
            {"batch", 8, "batch size"},
            {"crop", 256, "predictor crop size"}};
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Writes via a temporary file so a crash never leaves a truncated artifact.
void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw lle::IoError(tmp.string() + ": cannot open for writing");
        out << text;
        if (!out) throw lle::IoError(tmp.string() + ": write failed");
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path require_out(const json& cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    if (out.empty()) throw lle::ConfigError("--out is required");
    fs::create_directories(out);
    fs::remove(fs::path(out) / "INVALID");
    return out;
}

lle::PipelineSpec spec_of(const json& cfg) {
    return lle::PipelineSpec::parse(cfg.at("order").get<std::string>(), cfg.at("window").get<int>());
}

lle::TaskConfig task_of(const json& cfg) {
    return {lle::task_from_name(cfg.at("task").get<std::string>()), cfg.at("task-seed").get<std::uint64_t>()};
}

lle::TrainConfig train_config_of(const json& cfg) {
    lle::TrainConfig tc;
    tc.learning_rate = cfg.at("lr").get<double>();
    tc.epochs = cfg.at("epochs").get<int>();
    tc.batch_size = cfg.at("batch").get<int>();
    tc.crop_size = cfg.at("crop").get<int>();
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    tc.spec = spec_of(cfg);
    tc.task = task_of(cfg);
    tc.threads = cfg.at("threads").get<int>();
    if (cfg.contains("train")) tc.train_dir = cfg.at("train").get<std::string>();
    if (cfg.contains("test")) tc.test_dir = cfg.at("test").get<std::string>();
    tc.validate();
    return tc;
}

lle::Dataset require_dataset(const json& cfg, const std::string& key) {
    const std::string dir = cfg.at(key).get<std::string>();
    if (dir.empty()) throw lle::ConfigError("--" + key + " is required");
    return lle::load_dataset(dir);
}

std::string config_digest(const json& cfg) { return lle::hex64(lle::fnv1a(cfg.dump())); }

void write_report(const fs::path& out, const std::string& stem, const lle::RunReport& report, const json& cfg) {
    lle::RunReport r = report;
    r.metadata["config_digest"] = config_digest(cfg);
    write_json(out / (stem + ".json"), lle::report_json(r));
    write_text(out / (stem + ".txt"), lle::report_table(r));
}

// ---------------------------------------------------------------------------

int cmd_synth(const json& cfg) {
    const fs::path out = require_out(cfg);
    const auto seed = cfg.at("seed").get<std::uint64_t>();

    std::vector<lle::BrightSource> sources;
    const std::string bright = cfg.at("bright").get<std::string>();
    const int generate = cfg.at("generate").get<int>();
    if (!bright.empty() && generate > 0) throw lle::ConfigError("use either --bright or --generate, not both");
    if (!bright.empty()) {
        sources = lle::load_bright_dir(bright);
    } else if (generate > 0) {
        const auto size = static_cast<std::size_t>(cfg.at("size").get<int>());
        sources = lle::generate_sources(static_cast<std::size_t>(generate), size, size, seed);
    } else {
        throw lle::ConfigError("synth needs --bright DIR or --generate N");
    }

    lle::DegradeConfig degrade;
    degrade.attenuation = cfg.at("attenuation").get<double>();
    degrade.read_noise_sigma = cfg.at("noise").get<double>();
    const int bits = cfg.at("bits").get<int>();
    if (bits > 0)
        degrade.quantize_bits = bits;
    else
        degrade.quantize_bits.reset();
    degrade.seed = seed;
    degrade.validate();

    const std::string tier = cfg.at("tier").get<std::string>();
    auto make = [&](std::span<const lle::BrightSource> src) {
        return tier == "none" ? lle::make_pairs(src, degrade) : lle::make_tier_pairs(src, lle::tier_by_name(tier), degrade);
    };

    const auto holdout = static_cast<std::size_t>(cfg.at("holdout").get<int>());
    json summary;
    if (holdout > 0) {
        if (holdout >= sources.size()) throw lle::ConfigError("--holdout must be smaller than the number of images");
        const std::span<const lle::BrightSource> all(sources);
        const auto split_at = sources.size() - holdout;
        // The attenuation is fitted on the training split and reused for the
        // test split so both share one degradation.
        lle::Dataset train = make(all.first(split_at));
        lle::DegradeConfig test_degrade = train.degrade;
        test_degrade.seed = lle::derive_seed(seed, 0x74657374ULL);
        lle::Dataset test = lle::make_pairs(all.subspan(split_at), test_degrade);
        test.tier = train.tier;
        test.target_mean_255 = train.target_mean_255;
        lle::write_dataset(train, out / "train");
        lle::write_dataset(test, out / "test");
        summary = {{"train", train.size()}, {"test", test.size()}, {"attenuation", train.degrade.attenuation},
                   {"achieved_mean_255", train.achieved_mean_255}};
    } else {
        lle::Dataset ds = make(sources);
        lle::write_dataset(ds, out);
        summary = {{"pairs", ds.size()}, {"attenuation", ds.degrade.attenuation}, {"achieved_mean_255", ds.achieved_mean_255}};
    }
    std::cout << summary.dump() << '\n';
    return 0;
}

int cmd_train(const json& cfg, int verbosity) {
    const fs::path out = require_out(cfg);
    const auto tc = train_config_of(cfg);
    const auto data = require_dataset(cfg, "train");
    const auto task = lle::make_task(tc.task);
    lle::TrainProgress progress;
    if (verbosity > 0)
        progress = [](int epoch, std::int64_t step, double loss) {
            std::cerr << "epoch " << epoch << " step " << step << " loss " << lle::format6(loss) << '\n';
        };
    const auto result = lle::train(tc, data, *task, progress);
    lle::save_checkpoint(result.model, out / "model.ckpt");
    json hist = json::array();
    for (double l : result.history.epoch_loss) hist.push_back(lle::format6(l));
    write_json(out / "history.json", {{"epoch_loss", hist}});

    if (!tc.test_dir.empty()) {
        lle::EvalConfig ec;
        ec.repeats = cfg.at("repeats").get<int>();
        ec.crop_size = tc.crop_size;
        ec.seed = tc.seed;
        ec.spec = tc.spec;
        ec.threads = tc.threads;
        const auto report = lle::evaluate(result.model, lle::load_dataset(tc.test_dir), *task, ec);
        write_report(out, "report", report, cfg);
        std::cout << lle::report_table(report);
    }
    return 0;
}

lle::ParamVector parse_param_list(const std::string& text) {
    const auto parts = split(text, ',');
    if (parts.size() != lle::kNumParams)
        throw lle::ConfigError("--params needs 8 comma-separated values: a,gamma,s1r,s1g,s1b,s2r,s2g,s2b");
    lle::ParamVector v{};
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = coerce("--params", parts[i], 0.0).get<double>();
    return v;
}

int cmd_enhance(const json& cfg) {
    const fs::path out = require_out(cfg);
    const auto spec = spec_of(cfg);
    const std::string ckpt = cfg.at("checkpoint").get<std::string>();
    const std::string params_text = cfg.at("params").get<std::string>();
    if (ckpt.empty() == params_text.empty()) throw lle::ConfigError("enhance needs exactly one of --checkpoint or --params");
    const auto inputs = cfg.value("inputs", std::vector<std::string>{});
    if (inputs.empty()) throw lle::ConfigError("enhance needs at least one input image");

    std::optional<lle::PredictorModel> model;
    std::optional<lle::LLEParams> fixed;
    if (!ckpt.empty()) {
        model = lle::load_checkpoint(ckpt);
    } else {
        fixed = lle::LLEParams::from_vector(parse_param_list(params_text));
        fixed->validate();
    }
    const bool random = cfg.at("random-crop").get<bool>();
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    const int threads = cfg.at("threads").get<int>();

    json sidecar = json::array();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const fs::path in = inputs[i];
        const lle::Image img = lle::load_image(in);
        lle::LLEParams p;
        if (fixed) {
            p = *fixed;
        } else {
            const auto size = static_cast<std::size_t>(model->arch.input_size);
            const auto crop = random ? lle::random_crop(img, size, lle::derive_seed(seed, 0xE7A1, i)) : lle::center_crop(img, size);
            p = lle::squash(lle::predict_one(*model, crop)).params;
        }
        const fs::path dst = out / (in.stem().string() + ".png");
        lle::save_image(lle::pipeline_apply(img, p, spec, threads), dst);
        sidecar.push_back({{"input", in.string()}, {"output", dst.string()}, {"params", p}});
    }
    write_json(out / "params.json", sidecar);
    return 0;
}

int cmd_gridsearch(const json& cfg) {
    const fs::path out = require_out(cfg);
    const auto spec = spec_of(cfg);
    const auto data = require_dataset(cfg, "data");
    const auto task = lle::make_task(task_of(cfg));
    lle::GridSpec grid = lle::GridSpec::default_grid();
    if (const std::string g = cfg.at("grid").get<std::string>(); !g.empty()) {
        std::ifstream in(g);
        if (!in) throw lle::IoError(g + ": cannot open grid file");
        grid = json::parse(in).get<lle::GridSpec>();
    }
    grid.validate();
    const auto targets = lle::prepare_targets(data, *task);
    std::vector<lle::GridResult> results(data.size());
    lle::parallel_for(data.size(), cfg.at("threads").get<int>(), [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i)
            results[i] = lle::grid_search(data.pairs[i].dark, targets.reference(data, i), grid, spec, *task);
    });
    json rows = json::array();
    std::vector<std::vector<std::string>> table;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& r = results[i];
        const double ps = lle::psnr(lle::pipeline_apply(data.pairs[i].dark, r.params, spec), data.pairs[i].bright);
        rows.push_back({{"name", data.pairs[i].name},
                        {"oracle_loss", lle::format6(r.loss)},
                        {"identity_loss", lle::format6(r.identity_loss)},
                        {"oracle_psnr", lle::format6(ps)},
                        {"grid_index", r.index},
                        {"params", lle::params_json(r.params)}});
        table.push_back({data.pairs[i].name, lle::format6(r.identity_loss), lle::format6(r.loss), lle::format6(ps),
                         lle::format6(r.params.a), lle::format6(r.params.gamma), lle::format6(r.params.sigma1[0]),
                         lle::format6(r.params.sigma2[0])});
    }
    write_json(out / "gridsearch.json",
               {{"grid_points", grid.size()}, {"config_digest", config_digest(cfg)}, {"images", rows}});
    const auto text = lle::format_table({"image", "identity", "oracle", "psnr", "a", "gamma", "sigma1", "sigma2"}, table);
    write_text(out / "gridsearch.txt", text);
    std::cout << text;
    return 0;
}

std::vector<lle::PipelineSpec> variants_of(const std::string& orders, int window) {
    std::vector<lle::PipelineSpec> all = lle::all_pipeline_variants(window);
    auto filter = [&](auto pred) {
        std::vector<lle::PipelineSpec> v;
        for (const auto& s : all)
            if (pred(s)) v.push_back(s);
        return v;
    };
    if (orders == "all") return filter([](const lle::PipelineSpec& s) { return s.order.size() == 3; });
    if (orders == "subsets")
        return filter([](const lle::PipelineSpec& s) {
            const auto o = s.order_string();
            return o == "EG" || o == "ES" || o == "GS" || o == "EGS";
        });
    if (orders == "every") return all;
    std::vector<lle::PipelineSpec> v;
    for (const auto& o : split(orders, ',')) v.push_back(lle::PipelineSpec::parse(o, window));
    if (v.empty()) throw lle::ConfigError("--orders is empty");
    return v;
}

int cmd_ablate(const json& cfg, int verbosity) {
    const fs::path out = require_out(cfg);
    const auto tc = train_config_of(cfg);
    const auto train_set = require_dataset(cfg, "train");
    const auto test_dirs = split(cfg.at("test").get<std::string>(), ',');
    if (test_dirs.empty()) throw lle::ConfigError("--test needs at least one dataset directory");
    std::vector<lle::Dataset> tests;
    for (const auto& d : test_dirs) tests.push_back(lle::load_dataset(d));
    std::vector<lle::TierSet> tiers;
    for (std::size_t i = 0; i < tests.size(); ++i) {
        std::string name = tests[i].tier;
        for (std::size_t j = 0; j < i; ++j)
            if (tiers[j].name == name) name += "#" + std::to_string(i);
        tiers.push_back({name, &tests[i]});
    }
    const auto variants = variants_of(cfg.at("orders").get<std::string>(), cfg.at("window").get<int>());
    const auto task = lle::make_task(tc.task);
    if (verbosity > 0) std::cerr << "training " << variants.size() << " variants\n";
    const auto table = lle::ablate(train_set, tiers, tc, variants, *task, cfg.at("repeats").get<int>(), tc.threads);
    json j = lle::ablation_json(table);
    j["config_digest"] = config_digest(cfg);
    write_json(out / "ablation.json", j);
    const auto text = lle::ablation_table_text(table);
    write_text(out / "ablation.txt", text);
    std::cout << text;
    return 0;
}

int cmd_eval(const json& cfg) {
    const fs::path out = require_out(cfg);
    const std::string ckpt = cfg.at("checkpoint").get<std::string>();
    if (ckpt.empty()) throw lle::ConfigError("--checkpoint is required");
    const auto model = lle::load_checkpoint(ckpt);
    const auto data = require_dataset(cfg, "data");
    const auto task = lle::make_task(task_of(cfg));
    lle::EvalConfig ec;
    ec.repeats = cfg.at("repeats").get<int>();
    ec.crop_size = model.arch.input_size;
    ec.seed = cfg.at("seed").get<std::uint64_t>();
    ec.spec = spec_of(cfg);
    ec.threads = cfg.at("threads").get<int>();
    if (cfg.at("oracle").get<bool>()) ec.grid = lle::GridSpec::default_grid();
    const auto report = lle::evaluate(model, data, *task, ec);
    write_report(out, "report", report, cfg);
    std::cout << lle::report_table(report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-light enhancement: synthesis, training, enhancement, grid search, ablation, evaluation"};
    app.require_subcommand(1);
    std::string config_path;
    int verbosity = 0;
    app.add_option("--config", config_path, "JSON config file (env LLE_CONFIG)")->envname("LLE_CONFIG");
    app.add_flag("-v,--verbose", verbosity, "progress output on stderr (repeatable)");

    std::map<std::string, Command> cmds;
    auto reg = [&](const std::string& name, const std::string& help, std::vector<OptionDef> defs) -> Command& {
        Command& c = cmds[name];
        c.app = app.add_subcommand(name, help);
        c.app->fallthrough();
        auto all = common_defs();
        all.insert(all.end(), defs.begin(), defs.end());
        add_options(c, std::move(all));
        return c;
    };

    reg("synth", "write a paired dark/bright dataset",
        {{"bright", "", "directory of bright PNG/PPM images"},
         {"generate", 0, "generate N procedural bright scenes instead"},
         {"size", 256, "side length of generated scenes"},
         {"tier", "LL-E", "severity tier LL-N, LL-H, LL-E, or none to use --attenuation"},
         {"attenuation", 0.01, "attenuation when --tier none"},
         {"noise", 0.0, "read-noise standard deviation"},
         {"bits", 8, "quantisation bit depth; 0 disables"},
         {"holdout", 0, "write the last N images to OUT/test and the rest to OUT/train"}});

    auto train_opts = train_defs();
    for (auto& d : task_defs()) train_opts.push_back(d);
    auto with = [](std::vector<OptionDef> a, std::vector<OptionDef> b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    reg("train", "train the parameter predictor",
        with(train_opts, {{"train", "", "training dataset directory"},
                          {"test", "", "optional test dataset to evaluate after training"},
                          {"repeats", 3, "random-crop evaluations to average"}}));
    Command& enhance = reg("enhance", "enhance images with a checkpoint or explicit parameters",
                           {{"checkpoint", "", "predictor checkpoint"},
                            {"params", "", "explicit parameters a,gamma,s1r,s1g,s1b,s2r,s2g,s2b"},
                            {"random-crop", false, "predict from a seeded random crop instead of the centre crop"}});
    enhance.app->add_option("inputs", enhance.positional, "input images");
    reg("gridsearch", "per-image exhaustive parameter search",
        with(task_defs(), {{"data", "", "dataset directory"}, {"grid", "", "optional grid JSON {a, gamma, sigma1, sigma2}"}}));
    reg("ablate", "train one predictor per operator order and tabulate test losses",
        with(train_opts, {{"train", "", "training dataset directory"},
                          {"test", "", "comma-separated test dataset directories (one per tier)"},
                          {"orders", "all", "all (6 orderings), subsets, every, or a comma list such as EGS,GES"},
                          {"repeats", 3, "random-crop evaluations to average"}}));
    reg("eval", "evaluate a checkpoint against the identity baseline",
        with(task_defs(), {{"checkpoint", "", "predictor checkpoint"},
                           {"data", "", "dataset directory"},
                           {"repeats", 3, "random-crop evaluations to average"},
                           {"oracle", false, "add a grid-search oracle column"}}));

    CLI11_PARSE(app, argc, argv);

    std::string name;
    fs::path out_dir;
    try {
        for (auto& [n, c] : cmds)
            if (c.app->parsed()) name = n;
        const json cfg = resolve(cmds.at(name), config_path, name);
        if (const auto o = cfg.at("out").get<std::string>(); !o.empty()) {
            out_dir = o;
            fs::create_directories(out_dir);
            json echo = cfg;
            echo["command"] = name;
            write_json(out_dir / "config.json", echo);
        }
        if (verbosity > 0) std::cerr << name << ' ' << cfg.dump() << '\n';
        if (name == "synth") return cmd_synth(cfg);
        if (name == "train") return cmd_train(cfg, verbosity);
        if (name == "enhance") return cmd_enhance(cfg);
        if (name == "gridsearch") return cmd_gridsearch(cfg);
        if (name == "ablate") return cmd_ablate(cfg, verbosity);
        if (name == "eval") return cmd_eval(cfg);
        throw lle::ConfigError("unknown command");
    } catch (const std::exception& e) {
        std::cerr << "lle " << name << ": error: " << e.what() << '\n';
        if (!out_dir.empty()) {
            std::error_code ec;
            std::ofstream(out_dir / "INVALID") << e.what() << '\n';
        }
        return 1;
    }
}
