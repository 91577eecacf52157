#pragma once

// Fully convolutional parameter predictor: conv -> (batch norm) -> leaky ReLU
// stack, dropout after one layer, global average pooling to the 8 raw
// enhancement parameters. Reverse-mode gradients and Adam live here too.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lle/error.hpp"
#include "lle/image.hpp"
#include "lle/isp.hpp"
#include "lle/parallel.hpp"
#include "lle/rng.hpp"

namespace lle {

struct ConvLayerSpec {
    int kernel = 3;
    int stride = 2;
    int out_channels = 16;
    bool batch_norm = false;
    bool leaky_relu = true;

    friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct LayerShape {
    int in_channels, in_height, in_width;
    int out_channels, out_height, out_width;
    int kernel, stride, pad;

    int cols_rows() const { return in_channels * kernel * kernel; }
    int out_pixels() const { return out_height * out_width; }
    int in_pixels() const { return in_height * in_width; }

    friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct PredictorArch {
    int input_channels = 3;
    int input_size = 256;
    std::vector<ConvLayerSpec> layers;
    /// 1-based index of the layer followed by dropout; 0 disables dropout.
    int dropout_after = 0;
    double dropout_rate = 0.5;
    double leaky_slope = 0.1;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    /// Six stride-2 3x3 convolutions: 16, 32, 64 channels with batch norm,
    /// then 128, 256 (followed by dropout 0.5), then 8 linear outputs.
    static PredictorArch default_arch() {
        PredictorArch arch;
        arch.layers = {
            {3, 2, 16, true, true},   {3, 2, 32, true, true},   {3, 2, 64, true, true},
            {3, 2, 128, false, true}, {3, 2, 256, false, true}, {3, 2, 8, false, false},
        };
        arch.dropout_after = 5;
        return arch;
    }

    int output_dim() const { return layers.empty() ? 0 : layers.back().out_channels; }

    void validate() const {
        if (layers.empty()) throw ConfigError("predictor arch has no layers");
        if (output_dim() != static_cast<int>(kNumParams))
            throw ConfigError("predictor output dimension must be 8, got " + std::to_string(output_dim()));
        if (input_size < 1 || input_channels < 1) throw ConfigError("predictor input shape must be positive");
        for (const auto& l : layers)
            if (l.kernel < 1 || l.stride < 1 || l.out_channels < 1) throw ConfigError("invalid conv layer spec");
        if (dropout_after < 0 || dropout_after > static_cast<int>(layers.size()))
            throw ConfigError("dropout_after out of range");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    }

    std::vector<LayerShape> shapes() const {
        std::vector<LayerShape> out;
        int c = input_channels, h = input_size, w = input_size;
        for (const auto& l : layers) {
            const int pad = l.kernel / 2;
            const int oh = (h + 2 * pad - l.kernel) / l.stride + 1;
            const int ow = (w + 2 * pad - l.kernel) / l.stride + 1;
            if (oh < 1 || ow < 1) throw ConfigError("predictor input too small for its layer stack");
            out.push_back({c, h, w, l.out_channels, oh, ow, l.kernel, l.stride, pad});
            c = l.out_channels;
            h = oh;
            w = ow;
        }
        return out;
    }

    /// k^2 * c_in * c_out + c_out per conv, plus 2 * c_out per batch-norm layer.
    std::size_t parameter_count() const {
        std::size_t total = 0;
        int c_in = input_channels;
        for (const auto& l : layers) {
            total += static_cast<std::size_t>(l.kernel * l.kernel * c_in * l.out_channels + l.out_channels);
            if (l.batch_norm) total += 2 * static_cast<std::size_t>(l.out_channels);
            c_in = l.out_channels;
        }
        return total;
    }

    friend bool operator==(const PredictorArch&, const PredictorArch&) = default;
};

inline void to_json(nlohmann::json& j, const PredictorArch& a) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : a.layers)
        layers.push_back({{"k", l.kernel}, {"s", l.stride}, {"c", l.out_channels}, {"bn", l.batch_norm}, {"leaky_relu", l.leaky_relu}});
    j = nlohmann::json{{"input_channels", a.input_channels}, {"input_size", a.input_size}, {"layers", layers},
                       {"dropout_after", a.dropout_after}, {"dropout_rate", a.dropout_rate}, {"leaky_slope", a.leaky_slope},
                       {"bn_momentum", a.bn_momentum}, {"bn_eps", a.bn_eps}};
}

inline void from_json(const nlohmann::json& j, PredictorArch& a) {
    a = PredictorArch{};
    j.at("input_channels").get_to(a.input_channels);
    j.at("input_size").get_to(a.input_size);
    for (const auto& l : j.at("layers"))
        a.layers.push_back({l.at("k").get<int>(), l.at("s").get<int>(), l.at("c").get<int>(), l.at("bn").get<bool>(),
                            l.at("leaky_relu").get<bool>()});
    j.at("dropout_after").get_to(a.dropout_after);
    j.at("dropout_rate").get_to(a.dropout_rate);
    j.at("leaky_slope").get_to(a.leaky_slope);
    j.at("bn_momentum").get_to(a.bn_momentum);
    j.at("bn_eps").get_to(a.bn_eps);
}

struct ConvLayerParams {
    std::vector<double> weight;  // [out][in][k][k]
    std::vector<double> bias;    // [out]
    std::vector<double> bn_scale, bn_shift;           // [out] when batch-normalised
    std::vector<double> running_mean, running_var;    // [out] when batch-normalised

    friend bool operator==(const ConvLayerParams&, const ConvLayerParams&) = default;
};

struct PredictorModel {
    PredictorArch arch;
    std::vector<ConvLayerParams> layers;
    bool training = true;
    std::uint64_t seed = 0;
    std::int64_t step = 0;

    /// Trainable tensors in declared order: per layer weight, bias, then
    /// bn_scale and bn_shift on normalised layers.
    std::vector<std::span<double>> trainable() {
        std::vector<std::span<double>> out;
        for (auto& l : layers) {
            out.emplace_back(l.weight);
            out.emplace_back(l.bias);
            if (!l.bn_scale.empty()) {
                out.emplace_back(l.bn_scale);
                out.emplace_back(l.bn_shift);
            }
        }
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer" + std::to_string(i + 1) + ".";
            names.push_back(p + "weight");
            names.push_back(p + "bias");
            if (!layers[i].bn_scale.empty()) {
                names.push_back(p + "bn_scale");
                names.push_back(p + "bn_shift");
            }
        }
        return names;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size() + l.bn_scale.size() + l.bn_shift.size();
        return n;
    }

    friend bool operator==(const PredictorModel&, const PredictorModel&) = default;
};

/// Gradients with the same layout as PredictorModel::trainable().
using GradientSet = std::vector<std::vector<double>>;

inline GradientSet zero_gradients(PredictorModel& model) {
    GradientSet g;
    for (auto t : model.trainable()) g.emplace_back(t.size(), 0.0);
    return g;
}

/// Weights ~ U(-b, b) with b = sqrt(6 / ((1 + slope^2) * fan_in)) (He uniform
/// for leaky ReLU); the final linear layer uses b = 0.1 * sqrt(3 / fan_in) so
/// initial predictions start near the centre of the parameter box. Biases and
/// batch-norm shifts are zero, scales one, running stats (0, 1).
inline PredictorModel init_predictor(const PredictorArch& arch, std::uint64_t seed) {
    arch.validate();
    PredictorModel model;
    model.arch = arch;
    model.seed = seed;
    Rng rng(seed);
    const auto shapes = arch.shapes();
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& spec = arch.layers[i];
        const auto& s = shapes[i];
        const double fan_in = s.cols_rows();
        const bool last = i + 1 == arch.layers.size();
        const double bound = last ? 0.1 * std::sqrt(3.0 / fan_in)
                                  : std::sqrt(6.0 / ((1.0 + arch.leaky_slope * arch.leaky_slope) * fan_in));
        ConvLayerParams p;
        p.weight.resize(static_cast<std::size_t>(s.out_channels) * s.cols_rows());
        for (double& w : p.weight) w = rng.uniform(-bound, bound);
        p.bias.assign(s.out_channels, 0.0);
        if (spec.batch_norm) {
            p.bn_scale.assign(s.out_channels, 1.0);
            p.bn_shift.assign(s.out_channels, 0.0);
            p.running_mean.assign(s.out_channels, 0.0);
            p.running_var.assign(s.out_channels, 1.0);
        }
        model.layers.push_back(std::move(p));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Forward / backward.

/// Everything the backward pass needs from a forward call.
struct ForwardCache {
    std::size_t batch = 0;
    bool training = false;
    std::uint64_t dropout_seed = 0;
    std::vector<LayerShape> shapes;
    /// Per layer, per sample: im2col of the layer input, [rows][out_pixels].
    std::vector<std::vector<std::vector<double>>> cols;
    /// Per layer: normalised pre-affine values, [sample][channel][pixel].
    std::vector<std::vector<double>> xhat;
    /// Per layer: 1 / sqrt(var + eps) actually used.
    std::vector<std::vector<double>> inv_std;
    /// Per layer: batch mean / biased variance (train mode only).
    std::vector<std::vector<double>> batch_mean, batch_var;
    /// Per layer: value entering the activation, [sample][channel][pixel].
    std::vector<std::vector<double>> pre_activation;
    /// Dropout multipliers (0 or 1/(1-p)) for the dropout layer, or empty.
    std::vector<double> dropout_mask;
};

struct Prediction {
    std::vector<ParamVector> raw;
    ForwardCache cache;
};

namespace detail {

inline void im2col(const double* input, const LayerShape& s, double* cols) {
    const int k = s.kernel;
    const int op = s.out_pixels();
    for (int c = 0; c < s.in_channels; ++c) {
        const double* plane = input + static_cast<std::size_t>(c) * s.in_pixels();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * op;
                for (int oy = 0; oy < s.out_height; ++oy) {
                    const int iy = oy * s.stride - s.pad + ky;
                    double* dst = row + oy * s.out_width;
                    if (iy < 0 || iy >= s.in_height) {
                        std::fill(dst, dst + s.out_width, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * s.in_width;
                    for (int ox = 0; ox < s.out_width; ++ox) {
                        const int ix = ox * s.stride - s.pad + kx;
                        dst[ox] = (ix < 0 || ix >= s.in_width) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

inline void col2im(const double* cols, const LayerShape& s, double* input_grad) {
    const int k = s.kernel;
    const int op = s.out_pixels();
    std::fill(input_grad, input_grad + static_cast<std::size_t>(s.in_channels) * s.in_pixels(), 0.0);
    for (int c = 0; c < s.in_channels; ++c) {
        double* plane = input_grad + static_cast<std::size_t>(c) * s.in_pixels();
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * op;
                for (int oy = 0; oy < s.out_height; ++oy) {
                    const int iy = oy * s.stride - s.pad + ky;
                    if (iy < 0 || iy >= s.in_height) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * s.in_width;
                    const double* src = row + oy * s.out_width;
                    for (int ox = 0; ox < s.out_width; ++ox) {
                        const int ix = ox * s.stride - s.pad + kx;
                        if (ix >= 0 && ix < s.in_width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

/// Four-way unrolled dot product with a fixed summation order.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

/// Image (HWC) -> CHW planes.
inline std::vector<double> to_planar(const Image& img) {
    std::vector<double> out(img.size());
    const std::size_t px = img.pixels();
    const auto src = img.data();
    for (std::size_t p = 0; p < px; ++p)
        for (std::size_t c = 0; c < Image::channels; ++c) out[c * px + p] = src[p * Image::channels + c];
    return out;
}

}  // namespace detail

/// Forward pass over a batch of crops. In training mode batch norm uses batch
/// statistics and dropout draws its mask from Rng(dropout_seed) in
/// [sample][channel][pixel] order; in eval mode running statistics are used
/// and dropout is the identity. The model itself is not modified; call
/// update_running_stats() to fold the batch statistics in.
inline Prediction predict(const PredictorModel& model, std::span<const Image> crops, std::uint64_t dropout_seed = 0,
                          int threads = 1) {
    const auto& arch = model.arch;
    const auto shapes = arch.shapes();
    const std::size_t n = crops.size();
    for (const auto& crop : crops)
        if (crop.height() != static_cast<std::size_t>(arch.input_size) || crop.width() != static_cast<std::size_t>(arch.input_size))
            throw ShapeError("predictor expects " + std::to_string(arch.input_size) + "x" + std::to_string(arch.input_size) +
                             " crops, got " + std::to_string(crop.height()) + "x" + std::to_string(crop.width()));

    Prediction pred;
    auto& cache = pred.cache;
    cache.batch = n;
    cache.training = model.training;
    cache.dropout_seed = dropout_seed;
    cache.shapes = shapes;
    const std::size_t nl = shapes.size();
    cache.cols.resize(nl);
    cache.xhat.resize(nl);
    cache.inv_std.resize(nl);
    cache.batch_mean.resize(nl);
    cache.batch_var.resize(nl);
    cache.pre_activation.resize(nl);

    std::vector<std::vector<double>> act(n);
    for (std::size_t b = 0; b < n; ++b) act[b] = detail::to_planar(crops[b]);

    for (std::size_t li = 0; li < nl; ++li) {
        const auto& s = shapes[li];
        const auto& spec = arch.layers[li];
        const auto& p = model.layers[li];
        const std::size_t rows = s.cols_rows();
        const std::size_t op = s.out_pixels();
        const std::size_t oc = s.out_channels;
        const std::size_t per_sample = oc * op;

        cache.cols[li].assign(n, {});
        std::vector<double> z(n * per_sample);
        parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
            for (std::size_t b = begin; b < end; ++b) {
                auto& cols = cache.cols[li][b];
                cols.resize(rows * op);
                detail::im2col(act[b].data(), s, cols.data());
                double* zb = z.data() + b * per_sample;
                for (std::size_t co = 0; co < oc; ++co) {
                    double* zrow = zb + co * op;
                    std::fill(zrow, zrow + op, p.bias[co]);
                    const double* wrow = p.weight.data() + co * rows;
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double wv = wrow[r];
                        const double* crow = cols.data() + r * op;
                        for (std::size_t q = 0; q < op; ++q) zrow[q] += wv * crow[q];
                    }
                }
            }
        });

        if (spec.batch_norm) {
            auto& xhat = cache.xhat[li];
            auto& inv_std = cache.inv_std[li];
            xhat.resize(z.size());
            inv_std.resize(oc);
            std::vector<double> mean(oc), var(oc);
            if (model.training) {
                const double count = static_cast<double>(n * op);
                for (std::size_t c = 0; c < oc; ++c) {
                    double sum = 0.0;
                    for (std::size_t b = 0; b < n; ++b) {
                        const double* zr = z.data() + b * per_sample + c * op;
                        for (std::size_t q = 0; q < op; ++q) sum += zr[q];
                    }
                    mean[c] = sum / count;
                    double sq = 0.0;
                    for (std::size_t b = 0; b < n; ++b) {
                        const double* zr = z.data() + b * per_sample + c * op;
                        for (std::size_t q = 0; q < op; ++q) sq += (zr[q] - mean[c]) * (zr[q] - mean[c]);
                    }
                    var[c] = sq / count;
                }
                cache.batch_mean[li] = mean;
                cache.batch_var[li] = var;
            } else {
                mean = p.running_mean;
                var = p.running_var;
            }
            for (std::size_t c = 0; c < oc; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + arch.bn_eps);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t c = 0; c < oc; ++c) {
                    double* zr = z.data() + b * per_sample + c * op;
                    double* xr = xhat.data() + b * per_sample + c * op;
                    for (std::size_t q = 0; q < op; ++q) {
                        xr[q] = (zr[q] - mean[c]) * inv_std[c];
                        zr[q] = p.bn_scale[c] * xr[q] + p.bn_shift[c];
                    }
                }
        }

        cache.pre_activation[li] = z;
        if (spec.leaky_relu)
            for (double& v : z)
                if (v < 0.0) v *= arch.leaky_slope;

        if (arch.dropout_after == static_cast<int>(li) + 1 && model.training && arch.dropout_rate > 0.0) {
            auto& mask = cache.dropout_mask;
            mask.resize(z.size());
            Rng rng(dropout_seed);
            const double keep_scale = 1.0 / (1.0 - arch.dropout_rate);
            for (std::size_t i = 0; i < z.size(); ++i) {
                mask[i] = rng.uniform01() < arch.dropout_rate ? 0.0 : keep_scale;
                z[i] *= mask[i];
            }
        }

        for (std::size_t b = 0; b < n; ++b) act[b].assign(z.begin() + b * per_sample, z.begin() + (b + 1) * per_sample);
    }

    // Global average pooling of the final layer to one value per channel.
    const auto& last = shapes.back();
    pred.raw.resize(n);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < kNumParams; ++c) {
            const double* v = act[b].data() + c * last.out_pixels();
            double sum = 0.0;
            for (int q = 0; q < last.out_pixels(); ++q) sum += v[q];
            pred.raw[b][c] = sum / last.out_pixels();
        }
    return pred;
}

/// Single-crop convenience wrapper.
inline ParamVector predict_one(const PredictorModel& model, const Image& crop, std::uint64_t dropout_seed = 0) {
    return predict(model, std::span<const Image>(&crop, 1), dropout_seed).raw.front();
}

/// Folds train-mode batch statistics into the running estimates
/// (momentum update, unbiased variance).
inline void update_running_stats(PredictorModel& model, const ForwardCache& cache) {
    if (!cache.training) return;
    const double m = model.arch.bn_momentum;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        auto& p = model.layers[li];
        if (p.running_mean.empty()) continue;
        const double count = static_cast<double>(cache.batch * cache.shapes[li].out_pixels());
        const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
        for (std::size_t c = 0; c < p.running_mean.size(); ++c) {
            p.running_mean[c] = (1.0 - m) * p.running_mean[c] + m * cache.batch_mean[li][c];
            p.running_var[c] = (1.0 - m) * p.running_var[c] + m * cache.batch_var[li][c] * unbias;
        }
    }
}

/// Reverse-mode gradients of sum_b <raw[b], grad_raw[b]> for every trainable
/// tensor, in PredictorModel::trainable() order.
inline GradientSet backward(const PredictorModel& model, const ForwardCache& cache, std::span<const ParamVector> grad_raw,
                            int threads = 1) {
    const auto& arch = model.arch;
    if (grad_raw.size() != cache.batch) throw ShapeError("backward: gradient batch size does not match the forward cache");
    if (cache.shapes != arch.shapes() || cache.cols.size() != model.layers.size())
        throw ShapeError("backward: cache was produced by a different architecture");

    const std::size_t n = cache.batch;
    const std::size_t nl = cache.shapes.size();
    std::vector<std::vector<double>> layer_grads(nl * 4);

    // Gradient w.r.t. the last layer's post-activation output.
    const auto& last = cache.shapes.back();
    std::vector<double> g(n * last.out_channels * last.out_pixels());
    for (std::size_t b = 0; b < n; ++b)
        for (int c = 0; c < last.out_channels; ++c) {
            const double v = grad_raw[b][c] / last.out_pixels();
            double* dst = g.data() + (b * last.out_channels + c) * last.out_pixels();
            std::fill(dst, dst + last.out_pixels(), v);
        }

    GradientSet grads;
    std::vector<GradientSet> per_layer(nl);
    for (std::size_t li = nl; li-- > 0;) {
        const auto& s = cache.shapes[li];
        const auto& spec = arch.layers[li];
        const auto& p = model.layers[li];
        const std::size_t op = s.out_pixels();
        const std::size_t oc = s.out_channels;
        const std::size_t rows = s.cols_rows();
        const std::size_t per_sample = oc * op;

        if (arch.dropout_after == static_cast<int>(li) + 1 && cache.training && arch.dropout_rate > 0.0) {
            if (cache.dropout_mask.size() != g.size()) throw ShapeError("backward: dropout mask size mismatch");
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= cache.dropout_mask[i];
        }
        if (spec.leaky_relu) {
            const auto& pre = cache.pre_activation[li];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (pre[i] < 0.0) g[i] *= arch.leaky_slope;
        }

        std::vector<double> dweight(p.weight.size(), 0.0), dbias(oc, 0.0);
        if (spec.batch_norm) {
            const auto& xhat = cache.xhat[li];
            const auto& inv_std = cache.inv_std[li];
            std::vector<double> dscale(oc, 0.0), dshift(oc, 0.0);
            for (std::size_t c = 0; c < oc; ++c) {
                double sg = 0.0, sgx = 0.0;
                for (std::size_t b = 0; b < n; ++b) {
                    const double* gr = g.data() + b * per_sample + c * op;
                    const double* xr = xhat.data() + b * per_sample + c * op;
                    for (std::size_t q = 0; q < op; ++q) {
                        sg += gr[q];
                        sgx += gr[q] * xr[q];
                    }
                }
                dshift[c] = sg;
                dscale[c] = sgx;
                // dxhat = g * scale; dz = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                const double scale = p.bn_scale[c];
                if (cache.training) {
                    const double count = static_cast<double>(n * op);
                    const double mean_dx = scale * sg / count;
                    const double mean_dxx = scale * sgx / count;
                    for (std::size_t b = 0; b < n; ++b) {
                        double* gr = g.data() + b * per_sample + c * op;
                        const double* xr = xhat.data() + b * per_sample + c * op;
                        for (std::size_t q = 0; q < op; ++q)
                            gr[q] = inv_std[c] * (scale * gr[q] - mean_dx - xr[q] * mean_dxx);
                    }
                } else {
                    for (std::size_t b = 0; b < n; ++b) {
                        double* gr = g.data() + b * per_sample + c * op;
                        for (std::size_t q = 0; q < op; ++q) gr[q] *= scale * inv_std[c];
                    }
                }
            }
            per_layer[li] = {{}, {}, std::move(dscale), std::move(dshift)};
        }

        // Convolution: per-sample partials, summed in sample order.
        std::vector<std::vector<double>> part_w(n), part_b(n);
        std::vector<double> g_prev;
        const bool need_input_grad = li > 0;
        if (need_input_grad) g_prev.resize(n * static_cast<std::size_t>(s.in_channels) * s.in_pixels());
        parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
            std::vector<double> dcols;
            if (need_input_grad) dcols.resize(rows * op);
            for (std::size_t b = begin; b < end; ++b) {
                const auto& cols = cache.cols[li][b];
                const double* gb = g.data() + b * per_sample;
                auto& pw = part_w[b];
                auto& pb = part_b[b];
                pw.assign(p.weight.size(), 0.0);
                pb.assign(oc, 0.0);
                for (std::size_t co = 0; co < oc; ++co) {
                    const double* gr = gb + co * op;
                    double sum = 0.0;
                    for (std::size_t q = 0; q < op; ++q) sum += gr[q];
                    pb[co] = sum;
                    double* wrow = pw.data() + co * rows;
                    for (std::size_t r = 0; r < rows; ++r) wrow[r] = detail::dot(gr, cols.data() + r * op, op);
                }
                if (need_input_grad) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    for (std::size_t r = 0; r < rows; ++r) {
                        double* drow = dcols.data() + r * op;
                        for (std::size_t co = 0; co < oc; ++co) {
                            const double wv = p.weight[co * rows + r];
                            const double* gr = gb + co * op;
                            for (std::size_t q = 0; q < op; ++q) drow[q] += wv * gr[q];
                        }
                    }
                    detail::col2im(dcols.data(), s, g_prev.data() + b * static_cast<std::size_t>(s.in_channels) * s.in_pixels());
                }
            }
        });
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t i = 0; i < dweight.size(); ++i) dweight[i] += part_w[b][i];
            for (std::size_t c = 0; c < oc; ++c) dbias[c] += part_b[b][c];
        }
        if (spec.batch_norm) {
            per_layer[li][0] = std::move(dweight);
            per_layer[li][1] = std::move(dbias);
        } else {
            per_layer[li] = {std::move(dweight), std::move(dbias)};
        }
        g = std::move(g_prev);
    }
    for (auto& layer : per_layer)
        for (auto& t : layer) grads.push_back(std::move(t));
    return grads;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

inline AdamState make_adam(PredictorModel& model, double lr = 1e-4) {
    AdamState st;
    st.lr = lr;
    for (auto t : model.trainable()) {
        st.m.emplace_back(t.size(), 0.0);
        st.v.emplace_back(t.size(), 0.0);
    }
    return st;
}

/// One bias-corrected Adam update. Throws NumericError naming the first
/// tensor holding a non-finite gradient, before touching any weight.
inline void adam_step(PredictorModel& model, AdamState& state, const GradientSet& grads) {
    auto params = model.trainable();
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw ShapeError("adam_step: gradient set does not match model tensors");
    const auto names = model.trainable_names();
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (grads[t].size() != params[t].size() || state.m[t].size() != params[t].size())
            throw ShapeError("adam_step: shape mismatch in " + names[t]);
        for (double gv : grads[t])
            if (!std::isfinite(gv)) throw NumericError("adam_step: non-finite gradient in " + names[t]);
    }
    ++state.step;
    ++model.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& m = state.m[t];
        auto& v = state.v[t];
        const auto& g = grads[t];
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params[t][i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: "LLEPRED1" magic, u64 little-endian header length, JSON header
// (arch, seed, step, tensor table), then every tensor as little-endian f64 in
// declared order: per layer weight, bias, [bn_scale, bn_shift, running_mean,
// running_var].

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'L', 'L', 'E', 'P', 'R', 'E', 'D', '1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8]{};
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64(out, bits);
}

inline double read_f64(std::istream& in) {
    const std::uint64_t bits = read_u64(in);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline std::vector<std::pair<std::string, std::vector<double>*>> checkpoint_tensors(PredictorModel& model) {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto& l = model.layers[i];
        const std::string p = "layer" + std::to_string(i + 1) + ".";
        out.emplace_back(p + "weight", &l.weight);
        out.emplace_back(p + "bias", &l.bias);
        if (!l.bn_scale.empty()) {
            out.emplace_back(p + "bn_scale", &l.bn_scale);
            out.emplace_back(p + "bn_shift", &l.bn_shift);
            out.emplace_back(p + "running_mean", &l.running_mean);
            out.emplace_back(p + "running_var", &l.running_var);
        }
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const PredictorModel& model, const std::filesystem::path& path) {
    auto& mut = const_cast<PredictorModel&>(model);
    const auto tensors = detail::checkpoint_tensors(mut);
    nlohmann::json header;
    header["format"] = "lle-predictor";
    header["version"] = 1;
    header["arch"] = model.arch;
    header["seed"] = model.seed;
    header["step"] = model.step;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, t] : tensors) table.push_back({{"name", name}, {"size", t->size()}});
    header["tensors"] = table;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out.write(detail::kCheckpointMagic, 8);
    detail::write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors)
        for (double v : *t) detail::write_f64(out, v);
    if (!out) throw IoError(path.string() + ": write failed");
}

/// Loads a checkpoint; the returned model is in eval mode.
inline PredictorModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string() + ": cannot open checkpoint");
    char magic[8]{};
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, detail::kCheckpointMagic))
        throw DecodeError(path.string() + ": not a predictor checkpoint (bad magic)");
    const std::uint64_t len = detail::read_u64(in);
    if (!in || len > (1u << 24)) throw DecodeError(path.string() + ": corrupt checkpoint header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(path.string() + ": corrupt checkpoint header: " + e.what());
    }
    if (!header.is_object() || header.value("version", 0) != 1)
        throw DecodeError(path.string() + ": unsupported checkpoint version");

    PredictorModel model;
    try {
        model = init_predictor(header.at("arch").get<PredictorArch>(), header.at("seed").get<std::uint64_t>());
        model.step = header.at("step").get<std::int64_t>();
        model.training = false;
        const auto tensors = detail::checkpoint_tensors(model);
        const auto& table = header.at("tensors");
        if (table.size() != tensors.size()) throw DecodeError(path.string() + ": tensor table does not match architecture");
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& [name, t] = tensors[i];
            if (table[i].at("name").get<std::string>() != name || table[i].at("size").get<std::size_t>() != t->size())
                throw DecodeError(path.string() + ": tensor " + name + " does not match architecture");
            for (double& v : *t) v = detail::read_f64(in);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(path.string() + ": malformed checkpoint header: " + e.what());
    } catch (const ConfigError& e) {
        throw DecodeError(path.string() + ": invalid architecture in checkpoint: " + e.what());
    }
    if (!in) throw DecodeError(path.string() + ": truncated checkpoint");
    for (const auto& l : model.layers)
        for (double v : l.running_var)
            if (!(v >= 0.0)) throw DecodeError(path.string() + ": negative running variance");
    return model;
}

}  // namespace lle
