#pragma once

// Differentiable enhancement operators (exposure, gamma, bilateral smoothing),
// their composition in a configurable order, and exact forward-mode
// directional derivatives with respect to the 8 raw predictor outputs.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lle/error.hpp"
#include "lle/image.hpp"
#include "lle/parallel.hpp"

namespace lle {

inline constexpr std::size_t kNumParams = 8;
using ParamVector = std::array<double, kNumParams>;

/// Index of each scalar in the flattened parameter vector.
namespace param {
inline constexpr std::size_t exposure = 0;
inline constexpr std::size_t gamma = 1;
inline constexpr std::size_t sigma1 = 2;  // + channel
inline constexpr std::size_t sigma2 = 5;  // + channel
}  // namespace param

struct ParamBounds {
    double lo;
    double hi;
};

inline constexpr ParamBounds kExposureBounds{1.0, 256.0};
inline constexpr ParamBounds kGammaBounds{0.2, 5.0};
inline constexpr ParamBounds kSigma1Bounds{0.1, 5.0};
inline constexpr ParamBounds kSigma2Bounds{0.01, 1.0};

inline constexpr ParamBounds bounds_of(std::size_t index) {
    if (index == param::exposure) return kExposureBounds;
    if (index == param::gamma) return kGammaBounds;
    if (index < param::sigma2) return kSigma1Bounds;
    return kSigma2Bounds;
}

/// Gamma base floor keeping ln(base) finite at black pixels.
inline constexpr double kGammaFloor = 1e-6;

/// The 8 enhancement hyperparameters: exposure gain, gamma exponent and
/// per-channel spatial/range standard deviations of the bilateral filter.
struct LLEParams {
    double a = 1.0;
    double gamma = 1.0;
    std::array<double, 3> sigma1{0.1, 0.1, 0.1};
    std::array<double, 3> sigma2{0.01, 0.01, 0.01};

    ParamVector to_vector() const {
        return {a, gamma, sigma1[0], sigma1[1], sigma1[2], sigma2[0], sigma2[1], sigma2[2]};
    }

    static LLEParams from_vector(const ParamVector& v) {
        return {v[0], v[1], {v[2], v[3], v[4]}, {v[5], v[6], v[7]}};
    }

    /// Throws ConfigError naming the first component outside its bounds.
    void validate() const {
        static constexpr std::array<const char*, kNumParams> names{"a",         "gamma",     "sigma1[0]", "sigma1[1]",
                                                                  "sigma1[2]", "sigma2[0]", "sigma2[1]", "sigma2[2]"};
        const auto v = to_vector();
        for (std::size_t i = 0; i < kNumParams; ++i) {
            const auto b = bounds_of(i);
            if (!std::isfinite(v[i]) || v[i] < b.lo || v[i] > b.hi)
                throw ConfigError(std::string("parameter ") + names[i] + " = " + std::to_string(v[i]) + " outside [" +
                                  std::to_string(b.lo) + ", " + std::to_string(b.hi) + "]");
        }
    }

    /// Near-identity setting used as the unenhanced baseline.
    static LLEParams identity() { return {}; }

    friend bool operator==(const LLEParams&, const LLEParams&) = default;
};

inline void to_json(nlohmann::json& j, const LLEParams& p) {
    j = nlohmann::json{{"a", p.a}, {"gamma", p.gamma}, {"sigma1", p.sigma1}, {"sigma2", p.sigma2}};
}

inline void from_json(const nlohmann::json& j, LLEParams& p) {
    j.at("a").get_to(p.a);
    j.at("gamma").get_to(p.gamma);
    j.at("sigma1").get_to(p.sigma1);
    j.at("sigma2").get_to(p.sigma2);
}

// ---------------------------------------------------------------------------
// Squashing raw predictor outputs onto the parameter box.

struct Squashed {
    LLEParams params;
    /// Elementwise d(param) / d(raw).
    ParamVector dparams_draw{};
};

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// theta = lo * (hi / lo)^s(x) with s the logistic function.
inline Squashed squash(const ParamVector& raw) {
    ParamVector theta{};
    Squashed out;
    for (std::size_t i = 0; i < kNumParams; ++i) {
        if (!std::isfinite(raw[i])) throw DomainError("squash: non-finite raw parameter " + std::to_string(i));
        const auto b = bounds_of(i);
        const double log_ratio = std::log(b.hi / b.lo);
        const double s = logistic(raw[i]);
        theta[i] = b.lo * std::exp(log_ratio * s);
        out.dparams_draw[i] = theta[i] * log_ratio * s * (1.0 - s);
    }
    out.params = LLEParams::from_vector(theta);
    return out;
}

/// Inverse of squash for parameters strictly inside their bounds.
inline ParamVector unsquash(const LLEParams& params) {
    const auto theta = params.to_vector();
    ParamVector raw{};
    for (std::size_t i = 0; i < kNumParams; ++i) {
        const auto b = bounds_of(i);
        const double s = std::log(theta[i] / b.lo) / std::log(b.hi / b.lo);
        if (!(s > 0.0 && s < 1.0)) throw DomainError("unsquash: parameter " + std::to_string(i) + " not strictly inside bounds");
        raw[i] = std::log(s / (1.0 - s));
    }
    return raw;
}

// ---------------------------------------------------------------------------
// Pipeline description.

enum class Operator { Exposure, Gamma, Smoothing };

inline char operator_letter(Operator op) {
    switch (op) {
        case Operator::Exposure: return 'E';
        case Operator::Gamma: return 'G';
        case Operator::Smoothing: return 'S';
    }
    return '?';
}

inline Operator operator_from_letter(char ch) {
    switch (ch) {
        case 'E': case 'e': return Operator::Exposure;
        case 'G': case 'g': return Operator::Gamma;
        case 'S': case 's': return Operator::Smoothing;
        default: throw ConfigError(std::string("unknown operator '") + ch + "' (expected E, G or S)");
    }
}

struct PipelineSpec {
    std::vector<Operator> order{Operator::Exposure, Operator::Gamma, Operator::Smoothing};
    int window_half_width = 2;

    void validate() const {
        if (order.empty()) throw ConfigError("pipeline order must not be empty");
        if (order.size() > 3) throw ConfigError("pipeline order has more than three operators");
        for (std::size_t i = 0; i < order.size(); ++i)
            for (std::size_t j = i + 1; j < order.size(); ++j)
                if (order[i] == order[j]) throw ConfigError(std::string("duplicate operator '") + operator_letter(order[i]) + "'");
        if (window_half_width < 1) throw ConfigError("window half-width must be >= 1");
    }

    /// Compact form such as "EGS".
    std::string order_string() const {
        std::string s;
        for (auto op : order) s += operator_letter(op);
        return s;
    }

    static PipelineSpec parse(std::string_view order, int window_half_width = 2) {
        PipelineSpec spec;
        spec.order.clear();
        for (char ch : order) spec.order.push_back(operator_from_letter(ch));
        spec.window_half_width = window_half_width;
        spec.validate();
        return spec;
    }

    friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

inline void to_json(nlohmann::json& j, const PipelineSpec& spec) {
    std::vector<std::string> letters;
    for (auto op : spec.order) letters.emplace_back(1, operator_letter(op));
    j = nlohmann::json{{"order", letters}, {"w", spec.window_half_width}};
}

inline void from_json(const nlohmann::json& j, PipelineSpec& spec) {
    std::string order;
    const auto& o = j.at("order");
    if (o.is_string()) {
        order = o.get<std::string>();
    } else {
        for (const auto& letter : o) order += letter.get<std::string>();
    }
    spec = PipelineSpec::parse(order, j.value("w", 2));
}

/// Every ordering of every nonempty operator subset (15 specs).
inline std::vector<PipelineSpec> all_pipeline_variants(int window_half_width = 2) {
    static constexpr std::array<std::string_view, 15> orders{"E",   "G",   "S",   "EG",  "GE",  "ES",  "SE", "GS",
                                                             "SG",  "EGS", "ESG", "GES", "GSE", "SEG", "SGE"};
    std::vector<PipelineSpec> specs;
    for (auto o : orders) specs.push_back(PipelineSpec::parse(o, window_half_width));
    return specs;
}

// ---------------------------------------------------------------------------
// Forward operators.

inline Image exposure(const Image& img, double a) {
    if (!std::isfinite(a)) throw DomainError("exposure: non-finite gain");
    Image out = img;
    for (double& v : out.data()) v *= a;
    return out;
}

inline Image gamma(const Image& img, double g) {
    if (!std::isfinite(g) || g <= 0.0) throw DomainError("gamma: exponent must be positive and finite");
    Image out = img;
    for (double& v : out.data()) {
        if (!(v >= 0.0)) throw DomainError("gamma: negative or NaN input sample " + std::to_string(v));
        v = std::pow(std::max(v, kGammaFloor), g);
    }
    return out;
}

namespace detail {

/// exp(x) for x <= 0, within a few ulp of std::exp down to x = -708 (and
/// ~1e-308 below that). Branch-free so the bilateral inner loops vectorise.
inline double exp_nonpositive(double x) {
    constexpr double log2e = 1.4426950408889634;
    constexpr double ln2_hi = 6.93147180369123816490e-01;
    constexpr double ln2_lo = 1.90821492927058770002e-10;
    constexpr double shifter = 0x1.8p52;
    x = std::max(x, -708.0);
    double kd = x * log2e + shifter;
    const auto ki = std::bit_cast<std::uint64_t>(kd);
    kd -= shifter;
    const double r = (x - kd * ln2_hi) - kd * ln2_lo;
    // Taylor series to r^13; |r| <= ln2 / 2.
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const double scale = std::bit_cast<double>((ki + 1023) << 52);
    return p * scale;
}

/// One channel padded by `pad` pixels of edge replication on every side.
struct PaddedPlane {
    std::size_t height = 0, width = 0, pad = 0, stride = 0;
    std::vector<double> values;

    const double* row(std::ptrdiff_t y) const {
        return values.data() + static_cast<std::size_t>(y + static_cast<std::ptrdiff_t>(pad)) * stride + pad;
    }
};

inline PaddedPlane pad_channel(const Image& img, std::size_t channel, std::size_t pad) {
    PaddedPlane p;
    p.height = img.height();
    p.width = img.width();
    p.pad = pad;
    p.stride = img.width() + 2 * pad;
    p.values.resize((img.height() + 2 * pad) * p.stride);
    const auto h = static_cast<std::ptrdiff_t>(img.height());
    const auto w = static_cast<std::ptrdiff_t>(img.width());
    const auto ip = static_cast<std::ptrdiff_t>(pad);
    for (std::ptrdiff_t y = -ip; y < h + ip; ++y) {
        const auto sy = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y, 0, h - 1));
        double* dst = p.values.data() + static_cast<std::size_t>(y + ip) * p.stride;
        for (std::ptrdiff_t x = -ip; x < w + ip; ++x) {
            const auto sx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x, 0, w - 1));
            dst[x + ip] = img.at(sy, sx, channel);
        }
    }
    return p;
}

struct BilateralChannel {
    double sigma1 = 1.0;
    double sigma2 = 1.0;
    int half_width = 2;
};

/// Tangent directions entering one channel of the bilateral filter.
struct ChannelTangents {
    struct Direction {
        std::size_t index;            // parameter index
        const PaddedPlane* input;     // upstream tangent plane or nullptr if zero
        double dsigma1 = 0.0;         // d sigma1 / d raw along this direction
        double dsigma2 = 0.0;         // d sigma2 / d raw along this direction
    };
    std::vector<Direction> directions;
};

/// Filters rows [row_begin, row_end) of one channel. Writes value (and, when
/// `tangents` is given, one output tangent per direction) with the pixel
/// stride of an interleaved Image. Per-pixel sums run over taps in a fixed
/// order, so results do not depend on how rows are split across threads.
inline void bilateral_rows(const PaddedPlane& plane, const BilateralChannel& cfg, std::size_t row_begin, std::size_t row_end,
                           std::size_t channel, std::span<double> out, const ChannelTangents* tangents,
                           std::span<Image*> out_tangents) {
    const int w = cfg.half_width;
    const std::size_t width = plane.width;
    const double neg_inv_2s1sq = -1.0 / (2.0 * cfg.sigma1 * cfg.sigma1);
    const double neg_inv_2s2sq = -1.0 / (2.0 * cfg.sigma2 * cfg.sigma2);
    const double inv_s2sq = 1.0 / (cfg.sigma2 * cfg.sigma2);
    const double inv_s1cube = 1.0 / (cfg.sigma1 * cfg.sigma1 * cfg.sigma1);
    const double inv_s2cube = 1.0 / (cfg.sigma2 * cfg.sigma2 * cfg.sigma2);

    const std::size_t ndir = tangents ? tangents->directions.size() : 0;
    std::vector<double> num(width), den(width), lo(width), hi(width);
    std::vector<double> weight, diff;
    std::vector<double> acc_lf, acc_l, acc_t;  // sum w*ldot*f_q, sum w*ldot, sum w*fdot_q per direction
    if (ndir > 0) {
        weight.resize(width);
        diff.resize(width);
        acc_lf.resize(ndir * width);
        acc_l.resize(ndir * width);
        acc_t.resize(ndir * width);
    }

    for (std::size_t i = row_begin; i < row_end; ++i) {
        std::fill(num.begin(), num.end(), 0.0);
        std::fill(den.begin(), den.end(), 0.0);
        std::fill(acc_lf.begin(), acc_lf.end(), 0.0);
        std::fill(acc_l.begin(), acc_l.end(), 0.0);
        std::fill(acc_t.begin(), acc_t.end(), 0.0);
        const auto yi = static_cast<std::ptrdiff_t>(i);
        const double* fc = plane.row(yi);
        std::copy(fc, fc + width, lo.begin());
        std::copy(fc, fc + width, hi.begin());

        for (int m = -w; m <= w; ++m) {
            for (int n = -w; n <= w; ++n) {
                const double dist2 = static_cast<double>(m * m + n * n);
                const double spatial = std::exp(dist2 * neg_inv_2s1sq);
                const double* fq = plane.row(yi + m) + n;
                for (std::size_t j = 0; j < width; ++j) {
                    lo[j] = fq[j] < lo[j] ? fq[j] : lo[j];
                    hi[j] = fq[j] > hi[j] ? fq[j] : hi[j];
                }
                if (ndir == 0) {
                    for (std::size_t j = 0; j < width; ++j) {
                        const double d = fc[j] - fq[j];
                        const double wt = spatial * exp_nonpositive(d * d * neg_inv_2s2sq);
                        num[j] += wt * fq[j];
                        den[j] += wt;
                    }
                    continue;
                }
                for (std::size_t j = 0; j < width; ++j) {
                    const double d = fc[j] - fq[j];
                    const double wt = spatial * exp_nonpositive(d * d * neg_inv_2s2sq);
                    num[j] += wt * fq[j];
                    den[j] += wt;
                    weight[j] = wt;
                    diff[j] = d;
                }
                for (std::size_t k = 0; k < ndir; ++k) {
                    const auto& dir = tangents->directions[k];
                    // d(log w)/d(raw) = dist2/s1^3 * s1' + d^2/s2^3 * s2' - d * (fdot_p - fdot_q) / s2^2
                    const double from_s1 = dist2 * inv_s1cube * dir.dsigma1;
                    const double from_s2 = inv_s2cube * dir.dsigma2;
                    double* lf = acc_lf.data() + k * width;
                    double* l = acc_l.data() + k * width;
                    if (dir.input) {
                        const double* tc = dir.input->row(yi);
                        const double* tq = dir.input->row(yi + m) + n;
                        double* t = acc_t.data() + k * width;
                        for (std::size_t j = 0; j < width; ++j) {
                            const double d = diff[j];
                            const double ldot = from_s1 + d * d * from_s2 - d * (tc[j] - tq[j]) * inv_s2sq;
                            const double wl = weight[j] * ldot;
                            lf[j] += wl * fq[j];
                            l[j] += wl;
                            t[j] += weight[j] * tq[j];
                        }
                    } else {
                        for (std::size_t j = 0; j < width; ++j) {
                            const double d = diff[j];
                            const double wl = weight[j] * (from_s1 + d * d * from_s2);
                            lf[j] += wl * fq[j];
                            l[j] += wl;
                        }
                    }
                }
            }
        }

        for (std::size_t j = 0; j < width; ++j) {
            // The ratio is a convex combination; clamp away rounding that
            // could step outside the window's range.
            const double g = std::clamp(num[j] / den[j], lo[j], hi[j]);
            out[(i * width + j) * Image::channels + channel] = g;
            for (std::size_t k = 0; k < ndir; ++k) {
                const double gdot = (acc_lf[k * width + j] + acc_t[k * width + j] - g * acc_l[k * width + j]) / den[j];
                out_tangents[k]->at(i, j, channel) = gdot;
            }
        }
    }
}

inline void check_bilateral_args(const std::array<double, 3>& sigma1, const std::array<double, 3>& sigma2, int w) {
    if (w < 1) throw ConfigError("bilateral: window half-width must be >= 1");
    for (int c = 0; c < 3; ++c)
        if (!(sigma1[c] > 0.0) || !(sigma2[c] > 0.0) || !std::isfinite(sigma1[c]) || !std::isfinite(sigma2[c]))
            throw DomainError("bilateral: sigmas must be positive and finite");
}

}  // namespace detail

/// Edge-preserving smoothing applied independently per RGB channel over a
/// (2w+1)^2 window with edge replication at the borders.
inline Image bilateral(const Image& img, const std::array<double, 3>& sigma1, const std::array<double, 3>& sigma2, int w,
                       int threads = 1) {
    detail::check_bilateral_args(sigma1, sigma2, w);
    Image out(img.height(), img.width());
    if (img.empty()) return out;
    for (std::size_t c = 0; c < Image::channels; ++c) {
        const auto plane = detail::pad_channel(img, c, static_cast<std::size_t>(w));
        const detail::BilateralChannel cfg{sigma1[c], sigma2[c], w};
        parallel_for(img.height(), threads, [&](std::size_t begin, std::size_t end) {
            detail::bilateral_rows(plane, cfg, begin, end, c, out.data(), nullptr, {});
        });
    }
    return out;
}

inline Image apply_operator(const Image& img, Operator op, const LLEParams& params, int window_half_width, int threads = 1) {
    switch (op) {
        case Operator::Exposure: return exposure(img, params.a);
        case Operator::Gamma: return gamma(img, params.gamma);
        case Operator::Smoothing: return bilateral(img, params.sigma1, params.sigma2, window_half_width, threads);
    }
    return img;
}

/// Applies the operators to the full image in spec order. No clamping.
inline Image pipeline_apply(const Image& img, const LLEParams& params, const PipelineSpec& spec, int threads = 1) {
    spec.validate();
    Image cur = img;
    for (auto op : spec.order) cur = apply_operator(cur, op, params, spec.window_half_width, threads);
    return cur;
}

// ---------------------------------------------------------------------------
// Forward-mode derivatives.

/// Pipeline output with its derivative along each raw parameter.
struct TangentBundle {
    Image value;
    std::array<Image, kNumParams> tangents;
};

namespace detail {

/// Tracks which (parameter, channel) tangent planes are identically zero.
using ActiveMask = std::array<std::array<bool, 3>, kNumParams>;

inline void exposure_jvp(TangentBundle& b, ActiveMask& active, double a, double da_draw) {
    if (!std::isfinite(a)) throw DomainError("exposure: non-finite gain");
    for (std::size_t k = 0; k < kNumParams; ++k) {
        if (k == param::exposure) continue;
        for (double& t : b.tangents[k].data()) t *= a;
    }
    auto val = b.value.data();
    auto ta = b.tangents[param::exposure].data();
    for (std::size_t i = 0; i < val.size(); ++i) {
        ta[i] = a * ta[i] + val[i] * da_draw;
        val[i] *= a;
    }
    active[param::exposure] = {true, true, true};
}

inline void gamma_jvp(TangentBundle& b, ActiveMask& active, double g, double dg_draw) {
    if (!std::isfinite(g) || g <= 0.0) throw DomainError("gamma: exponent must be positive and finite");
    auto val = b.value.data();
    for (std::size_t i = 0; i < val.size(); ++i) {
        const double x = val[i];
        if (!(x >= 0.0)) throw DomainError("gamma: negative or NaN input sample " + std::to_string(x));
        const double base = std::max(x, kGammaFloor);
        const double y = std::pow(base, g);
        const double dy_dx = x > kGammaFloor ? g * y / x : 0.0;
        for (std::size_t k = 0; k < kNumParams; ++k) {
            double& t = b.tangents[k].data()[i];
            t *= dy_dx;
            if (k == param::gamma) t += y * std::log(base) * dg_draw;
        }
        val[i] = y;
    }
    active[param::gamma] = {true, true, true};
}

inline void bilateral_jvp(TangentBundle& b, ActiveMask& active, const LLEParams& p, const ParamVector& dtheta, int w,
                          int threads) {
    check_bilateral_args(p.sigma1, p.sigma2, w);
    Image out(b.value.height(), b.value.width());
    std::array<Image, kNumParams> out_t;
    for (auto& t : out_t) t = Image(b.value.height(), b.value.width());
    const auto pad = static_cast<std::size_t>(w);

    for (std::size_t c = 0; c < Image::channels; ++c) {
        const auto plane = pad_channel(b.value, c, pad);
        std::vector<PaddedPlane> inputs;
        inputs.reserve(kNumParams);
        ChannelTangents dirs;
        std::vector<Image*> targets;
        for (std::size_t k = 0; k < kNumParams; ++k) {
            const bool s1 = k == param::sigma1 + c;
            const bool s2 = k == param::sigma2 + c;
            if (!active[k][c] && !s1 && !s2) continue;
            const PaddedPlane* in = nullptr;
            if (active[k][c]) {
                inputs.push_back(pad_channel(b.tangents[k], c, pad));
                in = &inputs.back();
            }
            dirs.directions.push_back({k, in, s1 ? dtheta[k] : 0.0, s2 ? dtheta[k] : 0.0});
            targets.push_back(&out_t[k]);
        }
        const BilateralChannel cfg{p.sigma1[c], p.sigma2[c], w};
        parallel_for(b.value.height(), threads, [&](std::size_t begin, std::size_t end) {
            bilateral_rows(plane, cfg, begin, end, c, out.data(), &dirs, targets);
        });
        active[param::sigma1 + c][c] = true;
        active[param::sigma2 + c][c] = true;
    }
    b.value = std::move(out);
    b.tangents = std::move(out_t);
}

}  // namespace detail

/// Forward-mode JVP of pipeline_apply(img, params, spec) where the tangent
/// seed of each parameter is dparams_draw[k] (the squash derivative).
inline TangentBundle pipeline_jvp(const Image& img, const LLEParams& params, const ParamVector& dparams_draw,
                                  const PipelineSpec& spec, int threads = 1) {
    spec.validate();
    TangentBundle b;
    b.value = img;
    for (auto& t : b.tangents) t = Image(img.height(), img.width());
    detail::ActiveMask active{};
    for (auto op : spec.order) {
        switch (op) {
            case Operator::Exposure:
                detail::exposure_jvp(b, active, params.a, dparams_draw[param::exposure]);
                break;
            case Operator::Gamma:
                detail::gamma_jvp(b, active, params.gamma, dparams_draw[param::gamma]);
                break;
            case Operator::Smoothing:
                detail::bilateral_jvp(b, active, params, dparams_draw, spec.window_half_width, threads);
                break;
        }
    }
    return b;
}

/// JVP with respect to the raw (unsquashed) parameter vector.
inline TangentBundle pipeline_jvp(const Image& img, const ParamVector& raw, const PipelineSpec& spec, int threads = 1) {
    const auto sq = squash(raw);
    return pipeline_jvp(img, sq.params, sq.dparams_draw, spec, threads);
}

}  // namespace lle
