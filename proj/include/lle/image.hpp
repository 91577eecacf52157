#pragma once

// RGB raster container, cropping, synthetic low-light degradation and
// intensity statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lle/error.hpp"
#include "lle/rng.hpp"

namespace lle {

/// H x W x 3 raster, row-major with interleaved RGB samples. Stored 8-bit
/// values v map to v / 255; there is no sRGB linearisation.
class Image {
public:
    static constexpr std::size_t channels = 3;

    Image() = default;
    Image(std::size_t height, std::size_t width, double fill = 0.0)
        : height_(height), width_(width), data_(height * width * channels, fill) {}
    Image(std::size_t height, std::size_t width, std::vector<double> data)
        : height_(height), width_(width), data_(std::move(data)) {
        if (data_.size() != height_ * width_ * channels)
            throw ShapeError("image data length " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(height_) + "x" + std::to_string(width_) + "x3");
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t pixels() const { return height_ * width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data_[(y * width_ + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data_[(y * width_ + x) * channels + c]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const Image& other) const { return height_ == other.height_ && width_ == other.width_; }

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Image& a, const Image& b, std::string_view what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape " + std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                         " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

/// Mean sample value on the 0-255 scale.
inline double mean_intensity(const Image& img) {
    if (img.empty()) return 0.0;
    double sum = 0.0;
    for (double v : img.data()) sum += v;
    return 255.0 * sum / static_cast<double>(img.size());
}

/// Grows the image to at least size x size by edge replication, centring the
/// original content.
inline Image pad_to(const Image& img, std::size_t size) {
    const std::size_t h = std::max(img.height(), size);
    const std::size_t w = std::max(img.width(), size);
    if (h == img.height() && w == img.width()) return img;
    if (img.empty()) throw ShapeError("cannot pad an empty image");
    const std::size_t top = (h - img.height()) / 2;
    const std::size_t left = (w - img.width()) / 2;
    Image out(h, w);
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t sy = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(top), 0,
                                                          static_cast<std::ptrdiff_t>(img.height()) - 1);
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(left),
                                                              0, static_cast<std::ptrdiff_t>(img.width()) - 1);
            for (std::size_t c = 0; c < Image::channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    if (top + height > img.height() || left + width > img.width()) throw ShapeError("crop window outside image");
    Image out(height, width);
    for (std::size_t y = 0; y < height; ++y) {
        const auto src = img.data().subspan(((top + y) * img.width() + left) * Image::channels, width * Image::channels);
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(y * width * Image::channels));
    }
    return out;
}

struct CropOffset {
    std::size_t top = 0;
    std::size_t left = 0;
};

/// Offsets of random_crop on an image already padded to at least `size`:
/// top = draw1 % (H - size + 1), left = draw2 % (W - size + 1), draws from Rng(seed).
inline CropOffset random_crop_offset(std::size_t height, std::size_t width, std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    CropOffset off;
    off.top = rng.uniform_index(height - size + 1);
    off.left = rng.uniform_index(width - size + 1);
    return off;
}

inline Image random_crop(const Image& img, std::size_t size, std::uint64_t seed) {
    if (size == 0) throw ShapeError("crop size must be positive");
    const Image padded = pad_to(img, size);
    const auto off = random_crop_offset(padded.height(), padded.width(), size, seed);
    return crop(padded, off.top, off.left, size, size);
}

inline Image center_crop(const Image& img, std::size_t size) {
    if (size == 0) throw ShapeError("crop size must be positive");
    const Image padded = pad_to(img, size);
    return crop(padded, (padded.height() - size) / 2, (padded.width() - size) / 2, size, size);
}

struct DegradeConfig {
    double attenuation = 0.01;
    double read_noise_sigma = 0.0;
    /// Output bit depth in [1, 16]; nullopt leaves samples unquantised.
    std::optional<int> quantize_bits = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(attenuation >= 0.0) || attenuation > 1.0 || !std::isfinite(attenuation))
            throw ConfigError("attenuation must lie in [0, 1], got " + std::to_string(attenuation));
        if (!(read_noise_sigma >= 0.0) || !std::isfinite(read_noise_sigma))
            throw ConfigError("read_noise_sigma must be >= 0");
        if (quantize_bits && (*quantize_bits < 1 || *quantize_bits > 16))
            throw ConfigError("quantize_bits must lie in [1, 16], got " + std::to_string(*quantize_bits));
    }
};

/// Rounds onto the uniform grid of 2^bits - 1 levels over [0, 1], half away from zero.
inline double quantize(double v, int bits) {
    const double levels = static_cast<double>((1u << bits) - 1u);
    return std::round(v * levels) / levels;
}

/// out = quantize(clamp(attenuation * img + N(0, sigma^2), 0, 1)). Noise is
/// drawn in sample order from Rng(cfg.seed) and skipped entirely when sigma = 0.
inline Image synth_low_light(const Image& img, const DegradeConfig& cfg) {
    cfg.validate();
    Image out = img;
    Rng rng(cfg.seed);
    const bool noisy = cfg.read_noise_sigma > 0.0;
    for (double& v : out.data()) {
        double x = cfg.attenuation * v;
        if (noisy) x += cfg.read_noise_sigma * rng.normal();
        x = std::clamp(x, 0.0, 1.0);
        if (cfg.quantize_bits) x = quantize(x, *cfg.quantize_bits);
        v = x;
    }
    return out;
}

struct TierPreset {
    std::string name;
    double target_mean_255 = 0.0;
};

/// Low-light severity tiers characterised by mean pixel intensity (0-255 scale).
inline const std::vector<TierPreset>& tier_presets() {
    static const std::vector<TierPreset> presets{{"LL-N", 3.2}, {"LL-H", 1.4}, {"LL-E", 0.9}};
    return presets;
}

inline TierPreset tier_by_name(std::string_view name) {
    for (const auto& t : tier_presets())
        if (t.name == name) return t;
    throw ConfigError("unknown tier '" + std::string(name) + "' (expected LL-N, LL-H or LL-E)");
}

struct AttenuationFit {
    double attenuation = 1.0;
    double achieved_mean_255 = 0.0;
};

/// Bisection on the attenuation so the degraded set's mean intensity matches
/// the tier target. Noise is disabled while fitting; quantisation follows
/// `base`. When quantisation makes the target unreachable to within `tol`,
/// the closer of the two bracketing attenuations is returned.
inline AttenuationFit fit_attenuation(std::span<const Image> bright_set, const TierPreset& tier,
                                      const DegradeConfig& base = {}, double tol = 0.05) {
    if (bright_set.empty()) throw ConfigError("fit_attenuation: empty bright set");
    DegradeConfig cfg = base;
    cfg.read_noise_sigma = 0.0;
    auto mean_at = [&](double alpha) {
        cfg.attenuation = alpha;
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& img : bright_set) {
            const Image dark = synth_low_light(img, cfg);
            for (double v : dark.data()) sum += v;
            count += dark.size();
        }
        return count == 0 ? 0.0 : 255.0 * sum / static_cast<double>(count);
    };

    const double target = tier.target_mean_255;
    const double top = mean_at(1.0);
    if (top + tol < target)
        throw UnreachableError("tier " + tier.name + " target mean " + std::to_string(target) +
                               " unreachable: achievable range is [0, " + std::to_string(top) + "]");

    // Invariant: mean_at(lo) < target <= mean_at(hi).
    double lo = 0.0, hi = 1.0;
    double mean_lo = 0.0, mean_hi = top;
    if (top < target) return {1.0, top};
    for (int iter = 0; iter < 64 && hi - lo > 1e-12; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double m = mean_at(mid);
        if (m < target) {
            lo = mid;
            mean_lo = m;
        } else {
            hi = mid;
            mean_hi = m;
        }
        if (std::abs(mean_hi - target) <= tol * 1e-3) break;
    }
    if (lo > 0.0 && std::abs(mean_lo - target) < std::abs(mean_hi - target)) return {lo, mean_lo};
    return {hi, mean_hi};
}

}  // namespace lle
