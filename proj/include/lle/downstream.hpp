#pragma once

// Frozen differentiable downstream tasks. Each maps an enhanced image (and its
// 8 forward-mode tangents) to a scalar loss and the loss's derivative along
// every raw enhancement parameter. Task assets never change after
// construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lle/error.hpp"
#include "lle/image.hpp"
#include "lle/isp.hpp"
#include "lle/rng.hpp"

namespace lle {

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

/// K single-channel maps sharing one resolution.
struct Heatmap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::vector<double>> maps;

    std::size_t keypoints() const { return maps.size(); }
};

/// (1/K) * sum_i ||P_i - X_i||^2 with the norm a sum of squared differences.
inline double heatmap_mse_loss(const Heatmap& pred, const Heatmap& gt) {
    if (pred.maps.empty()) throw ShapeError("heatmap_mse_loss: K must be >= 1");
    if (pred.maps.size() != gt.maps.size() || pred.height != gt.height || pred.width != gt.width)
        throw ShapeError("heatmap_mse_loss: heatmap shapes differ");
    double total = 0.0;
    for (std::size_t k = 0; k < pred.maps.size(); ++k) {
        const auto& p = pred.maps[k];
        const auto& x = gt.maps[k];
        if (p.size() != pred.height * pred.width || x.size() != p.size()) throw ShapeError("heatmap_mse_loss: map size mismatch");
        double sum = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] - x[i]) * (p[i] - x[i]);
        total += sum;
    }
    return total / static_cast<double>(pred.maps.size());
}

struct LossAndGrad {
    double loss = 0.0;
    ParamVector dloss_draw{};
};

inline double ref_mse(const Image& img, const Image& ref) {
    require_same_shape(img, ref, "ref_mse_loss");
    const auto a = img.data();
    const auto b = ref.data();
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
    return a.empty() ? 0.0 : sum / static_cast<double>(a.size());
}

/// Mean squared error against a reference image with the exact directional
/// derivative (2/N) sum (img - ref) * tangent_k along each tangent.
inline LossAndGrad ref_mse_loss(const Image& img, const Image& ref, std::span<const Image> tangents) {
    require_same_shape(img, ref, "ref_mse_loss");
    if (tangents.size() != kNumParams) throw ShapeError("ref_mse_loss: expected 8 tangents");
    for (const auto& t : tangents) require_same_shape(img, t, "ref_mse_loss tangent");
    LossAndGrad out;
    const auto a = img.data();
    const auto b = ref.data();
    if (a.empty()) return out;
    const double n = static_cast<double>(a.size());
    std::vector<double> resid(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        resid[i] = a[i] - b[i];
        sum += resid[i] * resid[i];
    }
    out.loss = sum / n;
    for (std::size_t k = 0; k < kNumParams; ++k) {
        const auto t = tangents[k].data();
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) d += resid[i] * t[i];
        out.dloss_draw[k] = 2.0 * d / n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frozen random convolutional feature extractor.

struct FeatureStage {
    int in_channels = 3;
    int out_channels = 8;
    int kernel = 3;
    int stride = 2;
    std::vector<double> weight;  // [out][in][k][k]
    std::vector<double> bias;    // [out]
};

/// Planar feature tensor [channel][y][x].
struct FeatureMap {
    int channels = 0, height = 0, width = 0;
    std::vector<double> values;
};

class FeatureNet {
public:
    static constexpr double kSlope = 0.1;

    explicit FeatureNet(std::vector<FeatureStage> stages) : stages_(std::move(stages)) {
        int c = 3;
        for (const auto& s : stages_) {
            if (s.in_channels != c) throw ConfigError("feature net stage channel mismatch");
            if (s.weight.size() != static_cast<std::size_t>(s.out_channels * s.in_channels * s.kernel * s.kernel) ||
                s.bias.size() != static_cast<std::size_t>(s.out_channels))
                throw ConfigError("feature net stage tensor size mismatch");
            c = s.out_channels;
        }
    }

    /// Two 3x3 stride-2 conv + leaky ReLU stages (3 -> 8 -> 8 channels) with
    /// weights U(-b, b), b = sqrt(3 / fan_in), and zero bias.
    static FeatureNet random(std::uint64_t seed) {
        Rng rng(seed);
        std::vector<FeatureStage> stages;
        int c = 3;
        for (int i = 0; i < 2; ++i) {
            FeatureStage s{c, 8, 3, 2, {}, {}};
            const double bound = std::sqrt(3.0 / (c * 9));
            s.weight.resize(static_cast<std::size_t>(8 * c * 9));
            for (double& w : s.weight) w = rng.uniform(-bound, bound);
            s.bias.assign(8, 0.0);
            stages.push_back(std::move(s));
            c = 8;
        }
        return FeatureNet(std::move(stages));
    }

    /// Two 1x1 stride-1 identity stages; equals RefMSE on non-negative images.
    static FeatureNet identity() {
        std::vector<FeatureStage> stages;
        for (int i = 0; i < 2; ++i) {
            FeatureStage s{3, 3, 1, 1, std::vector<double>(9, 0.0), std::vector<double>(3, 0.0)};
            for (int c = 0; c < 3; ++c) s.weight[c * 3 + c] = 1.0;
            stages.push_back(std::move(s));
        }
        return FeatureNet(std::move(stages));
    }

    const std::vector<FeatureStage>& stages() const { return stages_; }

    /// Features of img plus the tangent of the features along each input
    /// tangent. Leaky-ReLU tangents are gated by the activation mask.
    FeatureMap forward(const Image& img, std::span<const Image> tangents = {},
                       std::vector<FeatureMap>* tangent_out = nullptr) const {
        FeatureMap x = planar(img);
        std::vector<FeatureMap> t;
        for (const auto& ti : tangents) t.push_back(planar(ti));
        for (const auto& s : stages_) {
            FeatureMap z = conv(x, s, true);
            for (auto& tk : t) tk = conv(tk, s, false);
            for (std::size_t i = 0; i < z.values.size(); ++i) {
                if (z.values[i] < 0.0) {
                    z.values[i] *= kSlope;
                    for (auto& tk : t) tk.values[i] *= kSlope;
                }
            }
            x = std::move(z);
        }
        if (tangent_out) *tangent_out = std::move(t);
        return x;
    }

    /// FNV-1a over all weights and biases.
    std::uint64_t digest() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&](double v) {
            unsigned char bytes[8];
            std::memcpy(bytes, &v, 8);
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& s : stages_) {
            for (double v : s.weight) mix(v);
            for (double v : s.bias) mix(v);
        }
        return h;
    }

private:
    static FeatureMap planar(const Image& img) {
        FeatureMap f{3, static_cast<int>(img.height()), static_cast<int>(img.width()), std::vector<double>(img.size())};
        const std::size_t px = img.pixels();
        for (std::size_t p = 0; p < px; ++p)
            for (std::size_t c = 0; c < 3; ++c) f.values[c * px + p] = img.data()[p * 3 + c];
        return f;
    }

    static FeatureMap conv(const FeatureMap& in, const FeatureStage& s, bool with_bias) {
        const int pad = s.kernel / 2;
        FeatureMap out;
        out.channels = s.out_channels;
        out.height = (in.height + 2 * pad - s.kernel) / s.stride + 1;
        out.width = (in.width + 2 * pad - s.kernel) / s.stride + 1;
        out.values.assign(static_cast<std::size_t>(out.channels) * out.height * out.width, 0.0);
        for (int co = 0; co < s.out_channels; ++co) {
            double* dst = out.values.data() + static_cast<std::size_t>(co) * out.height * out.width;
            if (with_bias) std::fill(dst, dst + out.height * out.width, s.bias[co]);
            for (int ci = 0; ci < s.in_channels; ++ci) {
                const double* src = in.values.data() + static_cast<std::size_t>(ci) * in.height * in.width;
                for (int ky = 0; ky < s.kernel; ++ky)
                    for (int kx = 0; kx < s.kernel; ++kx) {
                        const double w = s.weight[((co * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx];
                        for (int oy = 0; oy < out.height; ++oy) {
                            const int iy = oy * s.stride - pad + ky;
                            if (iy < 0 || iy >= in.height) continue;
                            const double* row = src + static_cast<std::size_t>(iy) * in.width;
                            double* orow = dst + static_cast<std::size_t>(oy) * out.width;
                            for (int ox = 0; ox < out.width; ++ox) {
                                const int ix = ox * s.stride - pad + kx;
                                if (ix >= 0 && ix < in.width) orow[ox] += w * row[ix];
                            }
                        }
                    }
            }
        }
        return out;
    }

    std::vector<FeatureStage> stages_;
};

/// MSE between feature maps of img and ref with directional derivatives.
inline LossAndGrad feature_mse_loss(const Image& img, const Image& ref, const FeatureNet& net, std::span<const Image> tangents) {
    require_same_shape(img, ref, "feature_mse_loss");
    if (!tangents.empty() && tangents.size() != kNumParams) throw ShapeError("feature_mse_loss: expected 8 tangents");
    std::vector<FeatureMap> ft;
    const FeatureMap fa = net.forward(img, tangents, &ft);
    const FeatureMap fb = net.forward(ref);
    LossAndGrad out;
    const double n = static_cast<double>(fa.values.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < fa.values.size(); ++i) sum += (fa.values[i] - fb.values[i]) * (fa.values[i] - fb.values[i]);
    out.loss = sum / n;
    for (std::size_t k = 0; k < ft.size(); ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < fa.values.size(); ++i) d += (fa.values[i] - fb.values[i]) * ft[k].values[i];
        out.dloss_draw[k] = 2.0 * d / n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Difference-of-Gaussians blob detector.

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

/// Separable normalised Gaussian blur with edge replication.
inline std::vector<double> blur(const std::vector<double>& plane, std::size_t h, std::size_t w, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(plane.size()), out(plane.size());
    const auto ih = static_cast<int>(h), iw = static_cast<int>(w);
    for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * plane[y * w + std::clamp(x + i, 0, iw - 1)];
            tmp[y * w + x] = s;
        }
    for (int y = 0; y < ih; ++y)
        for (int x = 0; x < iw; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp(y + i, 0, ih - 1) * w + x];
            out[y * w + x] = s;
        }
    return out;
}

inline std::vector<double> luminance(const Image& img) {
    std::vector<double> lum(img.pixels());
    for (std::size_t p = 0; p < lum.size(); ++p)
        lum[p] = (img.data()[p * 3] + img.data()[p * 3 + 1] + img.data()[p * 3 + 2]) / 3.0;
    return lum;
}

inline std::vector<double> dog_response(const std::vector<double>& lum, std::size_t h, std::size_t w) {
    auto inner = blur(lum, h, w, 1.0);
    const auto outer = blur(lum, h, w, 2.0);
    for (std::size_t i = 0; i < inner.size(); ++i) inner[i] -= outer[i];
    return inner;
}

}  // namespace detail

inline constexpr double kBlobSigmaInner = 1.0;
inline constexpr double kBlobSigmaOuter = 2.0;
inline constexpr double kHeatmapSigma = 2.0;

/// Difference-of-Gaussians response before clipping (linear in the input).
inline std::vector<double> blob_response(const Image& img) {
    return detail::dog_response(detail::luminance(img), img.height(), img.width());
}

/// K = 1 heatmap: DoG(sigma 1, sigma 2) of the channel-mean luminance with
/// negative responses clipped to zero.
inline Heatmap blob_detector(const Image& img) {
    Heatmap hm{img.height(), img.width(), {blob_response(img)}};
    for (double& v : hm.maps[0]) v = std::max(v, 0.0);
    return hm;
}

/// Ground-truth map: max over keypoints of unit-peak Gaussians (sigma 2 px).
inline Heatmap render_heatmap(std::size_t height, std::size_t width, std::span<const Keypoint> keypoints,
                              double sigma = kHeatmapSigma) {
    Heatmap hm{height, width, {std::vector<double>(height * width, 0.0)}};
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            double best = 0.0;
            for (const auto& kp : keypoints) {
                const double dx = static_cast<double>(x) - kp.x, dy = static_cast<double>(y) - kp.y;
                best = std::max(best, std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
            }
            hm.maps[0][y * width + x] = best;
        }
    return hm;
}

inline LossAndGrad blob_heatmap_loss(const Image& img, const Heatmap& gt, std::span<const Image> tangents) {
    if (gt.maps.size() != 1 || gt.height != img.height() || gt.width != img.width())
        throw ShapeError("blob_heatmap_loss: ground-truth heatmap shape mismatch");
    if (!tangents.empty() && tangents.size() != kNumParams) throw ShapeError("blob_heatmap_loss: expected 8 tangents");
    const auto response = blob_response(img);
    Heatmap pred{img.height(), img.width(), {response}};
    for (double& v : pred.maps[0]) v = std::max(v, 0.0);
    LossAndGrad out;
    out.loss = heatmap_mse_loss(pred, gt);
    for (std::size_t k = 0; k < tangents.size(); ++k) {
        const auto tr = blob_response(tangents[k]);
        double d = 0.0;
        for (std::size_t i = 0; i < tr.size(); ++i)
            if (response[i] > 0.0) d += (pred.maps[0][i] - gt.maps[0][i]) * tr[i];
        out.dloss_draw[k] = 2.0 * d;  // K = 1
    }
    return out;
}

// ---------------------------------------------------------------------------
// Task selection.

enum class TaskKind { RefMSE, FeatureMSE, BlobHeatmap };

inline std::string task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::RefMSE: return "ref_mse";
        case TaskKind::FeatureMSE: return "feature_mse";
        case TaskKind::BlobHeatmap: return "blob_heatmap";
    }
    return "?";
}

inline TaskKind task_from_name(const std::string& name) {
    if (name == "ref_mse") return TaskKind::RefMSE;
    if (name == "feature_mse") return TaskKind::FeatureMSE;
    if (name == "blob_heatmap") return TaskKind::BlobHeatmap;
    throw ConfigError("unknown task '" + name + "' (expected ref_mse, feature_mse or blob_heatmap)");
}

struct TaskConfig {
    TaskKind kind = TaskKind::RefMSE;
    std::uint64_t seed = 0;
    friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TaskConfig& t) { j = nlohmann::json{{"task", task_name(t.kind)}, {"seed", t.seed}}; }

inline void from_json(const nlohmann::json& j, TaskConfig& t) {
    t.kind = task_from_name(j.value("task", std::string("ref_mse")));
    t.seed = j.value("seed", std::uint64_t{0});
}

/// Per-sample frozen reference data.
struct TaskReference {
    const Image* bright = nullptr;
    const Heatmap* heatmap = nullptr;
};

/// Frozen loss evaluator. Implementations are immutable after construction.
class DownstreamTask {
public:
    virtual ~DownstreamTask() = default;
    virtual TaskKind kind() const = 0;
    virtual double loss(const Image& img, const TaskReference& ref) const = 0;
    virtual LossAndGrad loss_jvp(const TangentBundle& bundle, const TaskReference& ref) const = 0;
    /// Digest of frozen assets (0 when there are none).
    virtual std::uint64_t digest() const { return 0; }
    bool needs_heatmap() const { return kind() == TaskKind::BlobHeatmap; }
};

namespace detail {

inline const Image& require_bright(const TaskReference& ref) {
    if (!ref.bright) throw ConfigError("task requires a bright reference image");
    return *ref.bright;
}

inline const Heatmap& require_heatmap(const TaskReference& ref) {
    if (!ref.heatmap) throw ConfigError("blob_heatmap task requires keypoints for every pair");
    return *ref.heatmap;
}

class RefMseTask final : public DownstreamTask {
public:
    TaskKind kind() const override { return TaskKind::RefMSE; }
    double loss(const Image& img, const TaskReference& ref) const override { return ref_mse(img, require_bright(ref)); }
    LossAndGrad loss_jvp(const TangentBundle& b, const TaskReference& ref) const override {
        return ref_mse_loss(b.value, require_bright(ref), b.tangents);
    }
};

class FeatureMseTask final : public DownstreamTask {
public:
    explicit FeatureMseTask(FeatureNet net) : net_(std::move(net)) {}
    TaskKind kind() const override { return TaskKind::FeatureMSE; }
    double loss(const Image& img, const TaskReference& ref) const override {
        return feature_mse_loss(img, require_bright(ref), net_, {}).loss;
    }
    LossAndGrad loss_jvp(const TangentBundle& b, const TaskReference& ref) const override {
        return feature_mse_loss(b.value, require_bright(ref), net_, b.tangents);
    }
    std::uint64_t digest() const override { return net_.digest(); }

private:
    FeatureNet net_;
};

class BlobHeatmapTask final : public DownstreamTask {
public:
    TaskKind kind() const override { return TaskKind::BlobHeatmap; }
    double loss(const Image& img, const TaskReference& ref) const override {
        return heatmap_mse_loss(blob_detector(img), require_heatmap(ref));
    }
    LossAndGrad loss_jvp(const TangentBundle& b, const TaskReference& ref) const override {
        return blob_heatmap_loss(b.value, require_heatmap(ref), b.tangents);
    }
};

}  // namespace detail

inline std::unique_ptr<DownstreamTask> make_task(const TaskConfig& cfg) {
    switch (cfg.kind) {
        case TaskKind::RefMSE: return std::make_unique<detail::RefMseTask>();
        case TaskKind::FeatureMSE: return std::make_unique<detail::FeatureMseTask>(FeatureNet::random(cfg.seed));
        case TaskKind::BlobHeatmap: return std::make_unique<detail::BlobHeatmapTask>();
    }
    throw ConfigError("unknown task kind");
}

}  // namespace lle
