#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

// Dense layers with hand-written reverse-mode gradients, the adaptive-moment
// optimizer and the class-weighted cross entropy used by every traveler model.
// All math is in double precision.
namespace tripembed::nn {

using Vector = std::vector<double>;

// Row-major dense matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() noexcept { return data_; }
    std::span<const double> flat() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------

enum class Activation { relu, sigmoid, tanh, linear };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
        case Activation::linear: return "linear";
    }
    return "linear";
}

inline Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "tanh") return Activation::tanh;
    if (name == "linear") return Activation::linear;
    throw DataError("unknown activation '" + name + "'");
}

inline double activate(Activation a, double z) {
    switch (a) {
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::sigmoid: return sigmoid(z);
        case Activation::tanh: return std::tanh(z);
        case Activation::linear: return z;
    }
    return z;
}

// Derivative expressed through the pre-activation z and the output y.
// relu'(0) is taken as 0.
inline double activate_derivative(Activation a, double z, double y) {
    switch (a) {
        case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: return y * (1.0 - y);
        case Activation::tanh: return 1.0 - y * y;
        case Activation::linear: return 1.0;
    }
    return 1.0;
}

struct DenseLayer {
    Matrix weights;  // out x in
    Vector bias;     // out
    Activation activation = Activation::linear;

    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out, Activation act) : weights(out, in), bias(out, 0.0), activation(act) {}

    std::size_t in_dim() const noexcept { return weights.cols(); }
    std::size_t out_dim() const noexcept { return weights.rows(); }

    // Gradient buffers share the layer's shape.
    DenseLayer zeros_like() const { return DenseLayer(in_dim(), out_dim(), activation); }

    bool operator==(const DenseLayer&) const = default;
};

// Uniform(-limit, limit) with limit = sqrt(6 / (in + out)); bias zero.
inline void glorot_init(DenseLayer& layer, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
    for (double& w : layer.weights.flat()) w = uniform_real(rng, -limit, limit);
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
}

struct DenseCache {
    Vector input;
    Vector preactivation;
    Vector output;
};

struct DenseForward {
    Vector output;
    DenseCache cache;
};

inline DenseForward dense_forward(const DenseLayer& layer, std::span<const double> input) {
    if (input.size() != layer.in_dim()) {
        throw DataError("dense_forward: input length " + std::to_string(input.size()) + " != in-dim " +
                        std::to_string(layer.in_dim()));
    }
    DenseForward result;
    result.cache.input.assign(input.begin(), input.end());
    result.cache.preactivation.resize(layer.out_dim());
    result.output.resize(layer.out_dim());
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double z = dot(layer.weights.row(r), input) + layer.bias[r];
        result.cache.preactivation[r] = z;
        result.output[r] = activate(layer.activation, z);
    }
    result.cache.output = result.output;
    return result;
}

struct DenseBackward {
    Vector input_grad;
    DenseLayer param_grad;  // weights/bias hold dL/dω, dL/dβ
};

inline DenseBackward dense_backward(const DenseLayer& layer, const DenseCache& cache, std::span<const double> upstream) {
    if (upstream.size() != layer.out_dim() || cache.input.size() != layer.in_dim() ||
        cache.preactivation.size() != layer.out_dim()) {
        throw DataError("dense_backward: shape mismatch");
    }
    DenseBackward result{Vector(layer.in_dim(), 0.0), layer.zeros_like()};
    for (std::size_t r = 0; r < layer.out_dim(); ++r) {
        const double delta =
            upstream[r] * activate_derivative(layer.activation, cache.preactivation[r], cache.output[r]);
        if (delta == 0.0) continue;
        result.param_grad.bias[r] = delta;
        auto w = layer.weights.row(r);
        auto gw = result.param_grad.weights.row(r);
        for (std::size_t c = 0; c < layer.in_dim(); ++c) {
            gw[c] = delta * cache.input[c];
            result.input_grad[c] += delta * w[c];
        }
    }
    return result;
}

// Accumulates `scale * src` into `dst` (same shapes).
inline void accumulate(DenseLayer& dst, const DenseLayer& src, double scale = 1.0) {
    auto d = dst.weights.flat();
    auto s = src.weights.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
    for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += scale * src.bias[i];
}

// ---------------------------------------------------------------------------
// Loss.

inline constexpr double kProbabilityClamp = 1e-7;

struct LossValue {
    double loss;
    double dloss_dp;
};

inline LossValue bce(double p, int label) {
    p = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double y = label;
    return {-y * std::log(p) - (1.0 - y) * std::log(1.0 - p), -y / p + (1.0 - y) / (1.0 - p)};
}

// loss = -w+ y ln p - (1 - y) ln(1 - p), p clamped to [1e-7, 1 - 1e-7].
inline LossValue weighted_bce(double p, int label, double positive_weight) {
    p = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double y = label;
    const double wy = positive_weight * y;
    return {-wy * std::log(p) - (1.0 - y) * std::log(1.0 - p), -wy / p + (1.0 - y) / (1.0 - p)};
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer over a flat parameter vector.

struct AdamHyper {
    double step_size = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamHyper hyper;
    Vector first_moment;
    Vector second_moment;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(std::size_t n, AdamHyper h) : hyper(h), first_moment(n, 0.0), second_moment(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw DataError("adam_step: shape mismatch");
    }
    const auto& h = state.hyper;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(h.beta1, t);
    const double correction2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= h.step_size * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;  // first coordinate of the worst block
};

// Central differences on every coordinate of `params`. Coordinates are grouped
// into consecutive blocks (one per parameter tensor); a block's relative error
// is ||a - n|| / max(||a||, ||n||, 1e-8). With no block sizes every coordinate
// is its own block. Scoring whole tensors keeps components far below the
// tensor's scale, whose finite differences are pure 64-bit roundoff, from
// dominating the result.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss, std::span<const double> params,
                                  std::span<const double> analytic, double h = 1e-5,
                                  std::span<const std::size_t> block_sizes = {}) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("h", "must lie in [1e-7, 1e-3]");
    if (analytic.size() != params.size()) throw DataError("grad_check: gradient length mismatch");
    std::vector<std::size_t> blocks(block_sizes.begin(), block_sizes.end());
    if (blocks.empty()) blocks.assign(params.size(), 1);
    std::size_t covered = 0;
    for (auto b : blocks) covered += b;
    if (covered != params.size()) throw DataError("grad_check: block sizes do not cover the parameters");

    Vector theta(params.begin(), params.end());
    Vector numeric(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + h;
        const double up = loss(theta);
        theta[i] = saved - h;
        const double down = loss(theta);
        theta[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
        numeric[i] = (up - down) / (2.0 * h);
    }
    GradCheckResult result;
    std::size_t pos = 0;
    for (auto b : blocks) {
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = pos; i < pos + b; ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += analytic[i] * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_index = pos;
        }
        pos += b;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Flattening of a list of layers, in declaration order: weights then bias.

// Sizes of the flattened tensors, in flatten() order.
inline std::vector<std::size_t> parameter_blocks(std::span<const DenseLayer* const> layers) {
    std::vector<std::size_t> out;
    for (const auto* l : layers) {
        out.push_back(l->weights.flat().size());
        out.push_back(l->bias.size());
    }
    return out;
}

inline std::size_t parameter_count(std::span<const DenseLayer* const> layers) {
    std::size_t n = 0;
    for (const auto* l : layers) n += l->weights.flat().size() + l->bias.size();
    return n;
}

inline Vector flatten(std::span<const DenseLayer* const> layers) {
    Vector out;
    out.reserve(parameter_count(layers));
    for (const auto* l : layers) {
        out.insert(out.end(), l->weights.flat().begin(), l->weights.flat().end());
        out.insert(out.end(), l->bias.begin(), l->bias.end());
    }
    return out;
}

inline void unflatten(std::span<const double> flat, std::span<DenseLayer* const> layers) {
    std::size_t pos = 0;
    for (auto* l : layers) {
        auto w = l->weights.flat();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), w.size(), w.begin());
        pos += w.size();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), l->bias.size(), l->bias.begin());
        pos += l->bias.size();
    }
    if (pos != flat.size()) throw DataError("unflatten: parameter count mismatch");
}

// ---------------------------------------------------------------------------
// JSON parameter files. The serializer writes doubles in their shortest
// round-trip form.

using Json = nlohmann::ordered_json;

inline Json layer_to_json(const DenseLayer& layer) {
    Json weights = Json::array();
    for (double w : layer.weights.flat()) weights.push_back(w);
    Json bias = Json::array();
    for (double b : layer.bias) bias.push_back(b);
    Json j;
    j["rows"] = layer.out_dim();
    j["cols"] = layer.in_dim();
    j["weights"] = std::move(weights);
    j["bias"] = std::move(bias);
    j["activation"] = to_string(layer.activation);
    return j;
}

inline DenseLayer layer_from_json(const Json& j) {
    try {
        const auto rows = j.at("rows").get<std::size_t>();
        const auto cols = j.at("cols").get<std::size_t>();
        DenseLayer layer(cols, rows, parse_activation(j.at("activation").get<std::string>()));
        const auto& w = j.at("weights");
        const auto& b = j.at("bias");
        if (w.size() != rows * cols || b.size() != rows) throw DataError("layer shape does not match data length");
        auto flat = layer.weights.flat();
        for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = w[i].get<double>();
        for (std::size_t i = 0; i < rows; ++i) layer.bias[i] = b[i].get<double>();
        return layer;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed layer: ") + e.what());
    }
}

}  // namespace tripembed::nn
