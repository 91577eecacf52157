#pragma once

// Paired bright/dark datasets: procedural bright scenes, synthetic low-light
// pairing, and the on-disk layout
//
//   <dir>/bright/<name>.png
//   <dir>/dark/<name>.png
//   <dir>/manifest.json

#include <algorithm>
#include <array>
#include <cstdio>
#include <numbers>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lle/codec.hpp"
#include "lle/downstream.hpp"
#include "lle/error.hpp"
#include "lle/image.hpp"
#include "lle/rng.hpp"

namespace lle {

struct Scene {
    Image image;
    std::vector<Keypoint> blobs;
};

/// Random bright scene on the /255 grid: a two-colour gradient background,
/// flat rectangles and discs, and a few bright Gaussian blobs whose centres
/// are returned as keypoints.
inline Scene generate_scene(std::size_t height, std::size_t width, std::uint64_t seed, int blob_count = 3) {
    Rng rng(seed);
    Scene scene;
    Image& img = scene.image;
    img = Image(height, width);
    const double h = static_cast<double>(height), w = static_cast<double>(width);

    std::array<double, 3> c0{}, c1{};
    for (auto& v : c0) v = rng.uniform(0.05, 0.5);
    for (auto& v : c1) v = rng.uniform(0.05, 0.5);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ux = std::cos(angle), uy = std::sin(angle);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double t = 0.5 + 0.5 * ((x / w - 0.5) * ux + (y / h - 0.5) * uy);
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = c0[c] + (c1[c] - c0[c]) * t;
        }

    const int shapes = 3 + static_cast<int>(rng.uniform_index(5));
    for (int s = 0; s < shapes; ++s) {
        std::array<double, 3> col{};
        for (auto& v : col) v = rng.uniform(0.0, 0.95);
        const bool disc = rng.uniform01() < 0.5;
        const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
        const double rx = rng.uniform(0.05, 0.3) * w, ry = rng.uniform(0.05, 0.3) * h;
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double dx = (static_cast<double>(x) - cx) / rx, dy = (static_cast<double>(y) - cy) / ry;
                const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (inside)
                    for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
            }
    }

    for (int b = 0; b < blob_count; ++b) {
        const double margin = std::min(w, h) * 0.1;
        Keypoint kp{rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)};
        const double sigma = rng.uniform(1.5, 3.0);
        const double amp = rng.uniform(0.5, 0.9);
        const int r = static_cast<int>(std::ceil(3.0 * sigma));
        for (int y = static_cast<int>(kp.y) - r; y <= static_cast<int>(kp.y) + r; ++y)
            for (int x = static_cast<int>(kp.x) - r; x <= static_cast<int>(kp.x) + r; ++x) {
                if (y < 0 || x < 0 || y >= static_cast<int>(height) || x >= static_cast<int>(width)) continue;
                const double dx = x - kp.x, dy = y - kp.y;
                const double g = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) += g;
            }
        scene.blobs.push_back(kp);
    }

    for (double& v : img.data()) v = quantize(std::clamp(v, 0.0, 1.0), 8);
    return scene;
}

struct ImagePair {
    std::string name;
    Image dark;
    Image bright;
    std::vector<Keypoint> keypoints;
    std::uint64_t noise_seed = 0;
};

struct Dataset {
    std::string tier = "custom";
    double target_mean_255 = 0.0;
    double achieved_mean_255 = 0.0;
    DegradeConfig degrade;
    std::vector<ImagePair> pairs;

    std::size_t size() const { return pairs.size(); }
};

struct BrightSource {
    std::string name;
    Image image;
    std::vector<Keypoint> keypoints;
};

/// Degrades every bright image with `degrade` (per-pair noise seeds derived
/// from degrade.seed and the pair index).
inline Dataset make_pairs(std::span<const BrightSource> sources, const DegradeConfig& degrade) {
    Dataset ds;
    ds.degrade = degrade;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        ImagePair pair;
        pair.name = sources[i].name;
        pair.bright = sources[i].image;
        pair.keypoints = sources[i].keypoints;
        pair.noise_seed = derive_seed(degrade.seed, 0x6e6f697365ULL, i);
        DegradeConfig cfg = degrade;
        cfg.seed = pair.noise_seed;
        pair.dark = synth_low_light(pair.bright, cfg);
        for (double v : pair.dark.data()) sum += v;
        count += pair.dark.size();
        ds.pairs.push_back(std::move(pair));
    }
    ds.achieved_mean_255 = count ? 255.0 * sum / static_cast<double>(count) : 0.0;
    return ds;
}

/// Fits the attenuation to a tier preset over the whole bright set, then pairs.
inline Dataset make_tier_pairs(std::span<const BrightSource> sources, const TierPreset& tier, DegradeConfig degrade) {
    std::vector<Image> bright;
    for (const auto& s : sources) bright.push_back(s.image);
    const auto fit = fit_attenuation(bright, tier, degrade);
    degrade.attenuation = fit.attenuation;
    Dataset ds = make_pairs(sources, degrade);
    ds.tier = tier.name;
    ds.target_mean_255 = tier.target_mean_255;
    return ds;
}

/// `count` procedural scenes named scene_0000, scene_0001, ...
inline std::vector<BrightSource> generate_sources(std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed,
                                                  std::size_t first_index = 0) {
    std::vector<BrightSource> out;
    for (std::size_t i = first_index; i < first_index + count; ++i) {
        auto scene = generate_scene(height, width, derive_seed(seed, 0x7363656e65ULL, i));
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04zu", i);
        out.push_back({name, std::move(scene.image), std::move(scene.blobs)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O.

inline void to_json(nlohmann::json& j, const DegradeConfig& d) {
    j = nlohmann::json{{"attenuation", d.attenuation},
                       {"read_noise_sigma", d.read_noise_sigma},
                       {"quantize_bits", d.quantize_bits ? nlohmann::json(*d.quantize_bits) : nlohmann::json(nullptr)},
                       {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, DegradeConfig& d) {
    j.at("attenuation").get_to(d.attenuation);
    d.read_noise_sigma = j.value("read_noise_sigma", 0.0);
    if (j.contains("quantize_bits") && !j.at("quantize_bits").is_null())
        d.quantize_bits = j.at("quantize_bits").get<int>();
    else
        d.quantize_bits.reset();
    d.seed = j.value("seed", std::uint64_t{0});
}

inline nlohmann::json manifest_json(const Dataset& ds) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : ds.pairs) {
        nlohmann::json kps = nlohmann::json::array();
        for (const auto& k : p.keypoints) kps.push_back({k.x, k.y});
        pairs.push_back({{"name", p.name},
                         {"bright", "bright/" + p.name + ".png"},
                         {"dark", "dark/" + p.name + ".png"},
                         {"noise_seed", p.noise_seed},
                         {"keypoints", kps}});
    }
    return nlohmann::json{{"version", 1},
                          {"tier", ds.tier},
                          {"target_mean_255", ds.target_mean_255},
                          {"achieved_mean_255", ds.achieved_mean_255},
                          {"degrade", ds.degrade},
                          {"pairs", pairs}};
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "bright");
    fs::create_directories(dir / "dark");
    for (const auto& p : ds.pairs) {
        save_image(p.bright, dir / "bright" / (p.name + ".png"));
        save_image(p.dark, dir / "dark" / (p.name + ".png"));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError((dir / "manifest.json").string() + ": cannot open for writing");
    out << manifest_json(ds).dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IoError(manifest_path.string() + ": cannot open dataset manifest");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(manifest_path.string() + ": " + e.what());
    }
    Dataset ds;
    ds.tier = j.value("tier", std::string("custom"));
    ds.target_mean_255 = j.value("target_mean_255", 0.0);
    ds.achieved_mean_255 = j.value("achieved_mean_255", 0.0);
    if (j.contains("degrade")) ds.degrade = j.at("degrade").get<DegradeConfig>();
    for (const auto& pj : j.at("pairs")) {
        ImagePair p;
        p.name = pj.at("name").get<std::string>();
        const auto dark = dir / pj.at("dark").get<std::string>();
        const auto bright = dir / pj.at("bright").get<std::string>();
        if (!std::filesystem::exists(dark) || !std::filesystem::exists(bright))
            throw IoError("dataset pair '" + p.name + "' is missing its dark or bright image");
        p.dark = load_image(dark);
        p.bright = load_image(bright);
        require_same_shape(p.dark, p.bright, "dataset pair " + p.name);
        p.noise_seed = pj.value("noise_seed", std::uint64_t{0});
        for (const auto& k : pj.value("keypoints", nlohmann::json::array())) p.keypoints.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

/// Loads every decodable .png / .ppm in a directory, sorted by file name.
inline std::vector<BrightSource> load_bright_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError(dir.string() + ": not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = detail::lower_extension(e.path());
        if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<BrightSource> out;
    for (const auto& f : files) out.push_back({f.stem().string(), load_image(f), {}});
    if (out.empty()) throw ConfigError(dir.string() + ": no PNG or PPM images found");
    return out;
}

}  // namespace lle
