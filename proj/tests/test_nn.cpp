#include <gtest/gtest.h>

#include <cmath>

#include <tripembed/nn.hpp>

#include "oracles.hpp"

using namespace tripembed;
using namespace tripembed::nn;

namespace {

DenseLayer random_layer(std::size_t in, std::size_t out, Activation act, Rng& rng, double scale = 1.0) {
    DenseLayer l(in, out, act);
    for (double& w : l.weights.flat()) w = uniform_real(rng, -scale, scale);
    for (double& b : l.bias) b = uniform_real(rng, -scale, scale);
    return l;
}

Vector random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    Vector v(n);
    for (double& x : v) x = uniform_real(rng, -scale, scale);
    return v;
}

oracle::Mat rows_of(const Matrix& m) {
    oracle::Mat out;
    for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
    return out;
}

constexpr Activation kAll[] = {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::linear};

}  // namespace

TEST(DenseForward, ZeroReluGivesZero) {
    const DenseLayer l(4, 3, Activation::relu);
    const auto f = dense_forward(l, Vector{1, -2, 3, 4});
    EXPECT_EQ(f.output, Vector(3, 0.0));
}

TEST(DenseForward, IdentityLinear) {
    DenseLayer l(3, 3, Activation::linear);
    for (std::size_t i = 0; i < 3; ++i) l.weights(i, i) = 1.0;
    const Vector x{0.5, -1.25, 7};
    EXPECT_EQ(dense_forward(l, x).output, x);
}

TEST(DenseForward, MatchesDirectRecomputation) {
    Rng rng(1);
    for (auto act : kAll) {
        const auto l = random_layer(5, 8, act, rng);
        const auto x = random_vector(5, rng);
        const auto f = dense_forward(l, x);
        const auto z = oracle::matvec_affine(rows_of(l.weights), l.bias, x);
        for (std::size_t r = 0; r < 8; ++r) {
            double y = z[r];
            if (act == Activation::relu) y = std::max(0.0, y);
            if (act == Activation::sigmoid) y = oracle::logistic(y);
            if (act == Activation::tanh) y = std::tanh(y);
            EXPECT_NEAR(f.output[r], y, 1e-12);
            EXPECT_NEAR(f.cache.preactivation[r], z[r], 1e-12);
        }
        EXPECT_EQ(f.cache.input, x);
    }
}

TEST(DenseForward, ShapeMismatch) {
    const DenseLayer l(4, 3, Activation::relu);
    EXPECT_THROW(dense_forward(l, Vector{1, 2}), DataError);
}

TEST(DenseForward, FiniteForBoundedParameters) {
    Rng rng(2);
    for (auto act : kAll) {
        const auto l = random_layer(6, 4, act, rng, 1e3);
        const auto f = dense_forward(l, random_vector(6, rng, 1e3));
        EXPECT_TRUE(all_finite(f.output));
    }
}

TEST(DenseBackward, ZeroUpstreamGivesZero) {
    Rng rng(3);
    const auto l = random_layer(4, 3, Activation::tanh, rng);
    const auto f = dense_forward(l, random_vector(4, rng));
    const auto b = dense_backward(l, f.cache, Vector(3, 0.0));
    EXPECT_EQ(b.input_grad, Vector(4, 0.0));
    EXPECT_EQ(b.param_grad, l.zeros_like());
}

TEST(DenseBackward, LinearInputGradientIsTranspose) {
    Rng rng(4);
    const auto l = random_layer(5, 3, Activation::linear, rng);
    const auto f = dense_forward(l, random_vector(5, rng));
    const Vector g{0.3, -1.1, 2.0};
    const auto b = dense_backward(l, f.cache, g);
    for (std::size_t c = 0; c < 5; ++c) {
        double expected = 0.0;
        for (std::size_t r = 0; r < 3; ++r) expected += l.weights(r, c) * g[r];
        EXPECT_NEAR(b.input_grad[c], expected, 1e-14);
    }
}

TEST(DenseBackward, ReluSubgradientAtZeroIsZero) {
    DenseLayer l(1, 1, Activation::relu);
    const auto f = dense_forward(l, Vector{1.0});
    ASSERT_EQ(f.cache.preactivation[0], 0.0);
    const auto b = dense_backward(l, f.cache, Vector{1.0});
    EXPECT_EQ(b.input_grad[0], 0.0);
    EXPECT_EQ(b.param_grad.bias[0], 0.0);
    EXPECT_EQ(activate_derivative(Activation::relu, 0.0, 0.0), 0.0);
}

TEST(DenseBackward, MatchesFiniteDifferencesOnRandomShapes) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t in = 1 + uniform_index(rng, 8), out = 1 + uniform_index(rng, 8);
        const auto act = kAll[uniform_index(rng, 4)];
        const auto layer = random_layer(in, out, act, rng);
        const auto x = random_vector(in, rng);
        const auto u = random_vector(out, rng);

        // theta = [weights, bias, input]; L = u . layer(x)
        Vector theta(layer.weights.flat().begin(), layer.weights.flat().end());
        theta.insert(theta.end(), layer.bias.begin(), layer.bias.end());
        theta.insert(theta.end(), x.begin(), x.end());
        auto loss = [&](std::span<const double> p) {
            DenseLayer l = layer;
            std::copy_n(p.begin(), in * out, l.weights.flat().begin());
            std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(in * out), out, l.bias.begin());
            return dot(u, dense_forward(l, p.subspan(in * out + out, in)).output);
        };
        const auto f = dense_forward(layer, x);
        const auto b = dense_backward(layer, f.cache, u);
        Vector analytic(b.param_grad.weights.flat().begin(), b.param_grad.weights.flat().end());
        analytic.insert(analytic.end(), b.param_grad.bias.begin(), b.param_grad.bias.end());
        analytic.insert(analytic.end(), b.input_grad.begin(), b.input_grad.end());

        if (act == Activation::relu) {
            bool near_kink = false;
            for (double z : f.cache.preactivation) near_kink |= std::abs(z) < 1e-3;
            if (near_kink) continue;
        }
        const std::vector<std::size_t> blocks{in * out, out, in};
        EXPECT_LT(grad_check(loss, theta, analytic, 1e-5, blocks).max_relative_error, 1e-4);
    }
}

TEST(DenseBackward, ShapeMismatch) {
    const DenseLayer l(4, 3, Activation::relu);
    const auto f = dense_forward(l, Vector(4, 1.0));
    EXPECT_THROW(dense_backward(l, f.cache, Vector(2, 1.0)), DataError);
}

TEST(WeightedBce, Examples) {
    EXPECT_NEAR(weighted_bce(0.5, 1, 2.0).loss, 2.0 * std::log(2.0), 1e-15);
    EXPECT_LT(weighted_bce(1e-12, 0, 1.0).loss, 1e-6);
    EXPECT_NEAR(weighted_bce(0.0, 1, 1.0).loss, -std::log(1e-7), 1e-9);
    EXPECT_TRUE(std::isfinite(weighted_bce(1.0, 0, 3.0).loss));
}

TEST(WeightedBce, MatchesOracle) {
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        const double p = uniform01(rng);
        const int y = static_cast<int>(uniform_index(rng, 2));
        const double w = uniform_real(rng, 1.0, 10.0);
        EXPECT_NEAR(weighted_bce(p, y, w).loss, oracle::weighted_bce(p, y, w), 1e-12);
    }
}

TEST(WeightedBce, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    const double h = 1e-7;
    for (int i = 0; i < 100; ++i) {
        const double p = uniform_real(rng, 0.01, 0.99);
        const int y = static_cast<int>(uniform_index(rng, 2));
        const double w = uniform_real(rng, 1.0, 10.0);
        const double numeric = (weighted_bce(p + h, y, w).loss - weighted_bce(p - h, y, w).loss) / (2 * h);
        const double analytic = weighted_bce(p, y, w).dloss_dp;
        EXPECT_LT(std::abs(numeric - analytic) / std::max(std::abs(analytic), 1.0), 1e-6);
    }
}

TEST(WeightedBce, UnitWeightEqualsPlainBce) {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
        const double p = uniform01(rng);
        const int y = static_cast<int>(uniform_index(rng, 2));
        const auto a = weighted_bce(p, y, 1.0);
        const auto b = bce(p, y);
        EXPECT_EQ(a.loss, b.loss);
        EXPECT_EQ(a.dloss_dp, b.dloss_dp);
    }
}

TEST(Adam, ZeroGradientLeavesParameters) {
    Vector params{1.0, -2.0, 3.0};
    const Vector before = params;
    AdamState state(3, AdamHyper{});
    for (int i = 0; i < 5; ++i) adam_step(params, Vector(3, 0.0), state);
    EXPECT_EQ(params, before);
    EXPECT_EQ(state.step, 5u);
}

// With a constant gradient both bias-corrected moments converge to g and g^2,
// so each step tends to step_size * g / (|g| + eps).
TEST(Adam, ConstantGradientLimit) {
    const Vector g{0.5, -3.0, 1e-3, -40.0};
    Vector params(4, 0.0);
    AdamHyper hyper;
    hyper.step_size = 0.01;
    AdamState state(4, hyper);
    Vector last = params;
    for (int i = 0; i < 5000; ++i) {
        last = params;
        adam_step(params, g, state);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        const double step = params[i] - last[i];
        const double limit = -hyper.step_size * g[i] / (std::abs(g[i]) + hyper.epsilon);
        EXPECT_NEAR(step, limit, 1e-6 * hyper.step_size);
        EXPECT_NEAR(std::abs(step), hyper.step_size, 1e-4 * hyper.step_size);
    }
}

TEST(Adam, Pure) {
    Rng rng(9);
    const auto params0 = random_vector(6, rng);
    const auto grads = random_vector(6, rng);
    AdamState s0(6, AdamHyper{});
    Vector warm = params0;
    adam_step(warm, grads, s0);
    Vector p1 = warm, p2 = warm;
    AdamState s1 = s0, s2 = s0;
    adam_step(p1, grads, s1);
    adam_step(p2, grads, s2);
    EXPECT_EQ(p1, p2);
    EXPECT_EQ(s1.first_moment, s2.first_moment);
    EXPECT_EQ(s1.second_moment, s2.second_moment);
    EXPECT_EQ(s1.step, 2u);
}

TEST(Adam, PositiveScalingKeepsSignPattern) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = random_vector(8, rng);
        const double c = uniform_real(rng, 0.01, 100.0);
        Vector scaled = g;
        for (double& x : scaled) x *= c;
        Vector a(8, 0.0), b(8, 0.0);
        AdamState sa(8, AdamHyper{}), sb(8, AdamHyper{});
        for (int i = 0; i < 200; ++i) {
            adam_step(a, g, sa);
            adam_step(b, scaled, sb);
        }
        for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(std::signbit(a[i]), std::signbit(b[i]));
    }
}

TEST(Adam, ShapeMismatch) {
    Vector params(3, 0.0);
    AdamState state(3, AdamHyper{});
    EXPECT_THROW(adam_step(params, Vector(2, 0.0), state), DataError);
    AdamState wrong(4, AdamHyper{});
    EXPECT_THROW(adam_step(params, Vector(3, 0.0), wrong), DataError);
}

TEST(GradCheck, QuadraticOfLinearModel) {
    Rng rng(11);
    const auto x = random_vector(5, rng);
    const double target = 0.7;
    auto loss = [&](std::span<const double> w) {
        const double r = dot(w, x) - target;
        return 0.5 * r * r;
    };
    const auto w = random_vector(5, rng);
    Vector analytic(5);
    const double r = dot(w, x) - target;
    for (std::size_t i = 0; i < 5; ++i) analytic[i] = r * x[i];
    EXPECT_LT(grad_check(loss, w, analytic, 1e-5).max_relative_error, 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
    auto loss = [](std::span<const double> p) { return p[0] * p[0] + 3.0 * p[1]; };
    const Vector p{1.0, 2.0};
    const auto r = grad_check(loss, p, Vector{2.0, 3.5});
    EXPECT_NEAR(r.max_relative_error, 0.5 / 3.5, 1e-6);
    EXPECT_EQ(r.worst_index, 1u);
}

TEST(GradCheck, PerCoordinateDefaultUsesFloor) {
    auto loss = [](std::span<const double>) { return 1.0; };
    const auto r = grad_check(loss, Vector{1.0}, Vector{1e-9});
    EXPECT_NEAR(r.max_relative_error, 1e-9 / 1e-8, 1e-12);
}

TEST(GradCheck, Preconditions) {
    auto loss = [](std::span<const double> p) { return p[0]; };
    EXPECT_THROW(grad_check(loss, Vector{1.0}, Vector{1.0}, 1e-2), ConfigError);
    EXPECT_THROW(grad_check(loss, Vector{1.0}, Vector{1.0}, 1e-9), ConfigError);
    EXPECT_NO_THROW(grad_check(loss, Vector{1.0}, Vector{1.0}, 1e-7));
    EXPECT_NO_THROW(grad_check(loss, Vector{1.0}, Vector{1.0}, 1e-3));
    EXPECT_THROW(grad_check(loss, Vector{1.0}, Vector{1.0, 2.0}), DataError);
    const std::vector<std::size_t> bad{2};
    EXPECT_THROW(grad_check(loss, Vector{1.0}, Vector{1.0}, 1e-5, bad), DataError);
    auto blowup = [](std::span<const double> p) { return p[0] > 1.0 ? std::numeric_limits<double>::infinity() : 0.0; };
    EXPECT_THROW(grad_check(blowup, Vector{1.0}, Vector{0.0}), NumericError);
}

TEST(Layers, FlattenRoundTrip) {
    Rng rng(12);
    auto a = random_layer(3, 2, Activation::relu, rng);
    auto b = random_layer(2, 1, Activation::sigmoid, rng);
    const std::vector<const DenseLayer*> view{&a, &b};
    const auto flat = flatten(view);
    EXPECT_EQ(flat.size(), parameter_count(view));
    EXPECT_EQ(parameter_blocks(view), (std::vector<std::size_t>{6, 2, 2, 1}));
    auto a2 = a.zeros_like(), b2 = b.zeros_like();
    const std::vector<DenseLayer*> dst{&a2, &b2};
    unflatten(flat, dst);
    EXPECT_EQ(a2, a);
    EXPECT_EQ(b2, b);
    EXPECT_THROW(unflatten(Vector(3, 0.0), dst), DataError);
}

TEST(Layers, JsonRoundTripIsExact) {
    Rng rng(13);
    for (auto act : kAll) {
        auto l = random_layer(4, 3, act, rng);
        l.weights(0, 0) = 1.0 / 3.0;
        l.bias[1] = 1e-300;
        const auto text = layer_to_json(l).dump();
        EXPECT_EQ(layer_from_json(Json::parse(text)), l);
    }
}

TEST(Layers, MalformedJson) {
    EXPECT_THROW(layer_from_json(Json::parse(R"({"rows":1})")), DataError);
    EXPECT_THROW(layer_from_json(Json::parse(R"({"rows":1,"cols":2,"weights":[1],"bias":[0],"activation":"relu"})")),
                 DataError);
    EXPECT_THROW(layer_from_json(Json::parse(R"({"rows":1,"cols":1,"weights":[1],"bias":[0],"activation":"swish"})")),
                 Error);
}

TEST(Layers, GlorotRange) {
    Rng rng(14);
    DenseLayer l(10, 6, Activation::relu);
    glorot_init(l, rng);
    const double limit = std::sqrt(6.0 / 16.0);
    for (double w : l.weights.flat()) EXPECT_LE(std::abs(w), limit);
    EXPECT_EQ(l.bias, Vector(6, 0.0));
}
