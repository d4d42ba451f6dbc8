#pragma once

#include <limits>
#include <string>
#include <vector>

#include "common.hpp"
#include "nn.hpp"
#include "skipgram.hpp"
#include "traveler.hpp"

// Finite-difference verification of every hand-written backward pass over
// many random parameterizations.
namespace tripembed::gradcheck {

struct KindResult {
    std::string name;
    double max_relative_error = 0.0;
    std::size_t trials = 0;
};

struct Options {
    std::size_t trials = 100;
    std::uint64_t seed = 1;
    double h = 1e-5;
    double corrupt = 0.0;  // added to one analytic gradient coordinate (negative control)
};

namespace detail {

inline constexpr std::size_t kInputDim = 6;

inline void jitter(std::vector<nn::DenseLayer*> layers, Rng& rng) {
    for (auto* l : layers) {
        for (double& w : l->weights.flat()) w += uniform_real(rng, -0.2, 0.2);
        for (double& b : l->bias) b += uniform_real(rng, -0.2, 0.2);
    }
}

inline std::vector<traveler::TravelerExample> random_batch(Rng& rng) {
    std::vector<traveler::TravelerExample> batch(3);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t t = 1 + uniform_index(rng, 5);
        batch[i].viewed = nn::Matrix(t, kInputDim);
        for (double& x : batch[i].viewed.flat()) x = uniform_real(rng, -1.0, 1.0);
        batch[i].label = static_cast<int>(i % 2);
    }
    return batch;
}

inline constexpr double kKinkMargin = 1e-3;

inline double min_relu_margin(const traveler::DanModel& m, const std::vector<traveler::TravelerExample>& batch) {
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& e : batch) {
        traveler::DanModel::Cache c;
        m.forward(e.viewed, &c);
        for (const auto* layer : {&c.pool_projection, &c.hidden, &c.embedding}) {
            for (double z : layer->preactivation) margin = std::min(margin, std::abs(z));
        }
    }
    return margin;
}

template <class Model>
double check_once(const Model& model, Rng& rng, const Options& opt) {
    const auto batch = random_batch(rng);
    std::vector<const traveler::TravelerExample*> ptrs;
    for (const auto& e : batch) ptrs.push_back(&e);
    const double w = uniform_real(rng, 0.5, 3.0);
    return traveler::check_model_gradient(model, ptrs, w, opt.h, opt.corrupt).max_relative_error;
}

inline double check_traveler(traveler::ModelKind kind, Rng& rng, const Options& opt) {
    using traveler::ModelKind;
    switch (kind) {
        case ModelKind::average: {
            auto m = traveler::AverageModel::create(kInputDim, rng);
            jitter(m.layers(), rng);
            return check_once(m, rng, opt);
        }
        case ModelKind::dan: {
            // relu is not differentiable at 0; redraw until every preactivation
            // is well outside the finite-difference step
            for (;;) {
                auto m = traveler::DanModel::create(kInputDim, 10, 5, 3, rng);
                jitter(m.layers(), rng);
                Rng probe = rng;
                if (min_relu_margin(m, random_batch(probe)) > kKinkMargin) return check_once(m, rng, opt);
                (void)random_batch(rng);
            }
        }
        case ModelKind::lstm:
        case ModelKind::lstm_attention: {
            auto m = traveler::LstmModel::create(kInputDim, 4, kind == ModelKind::lstm_attention, rng);
            jitter(m.layers(), rng);
            return check_once(m, rng, opt);
        }
        case ModelKind::random: break;
    }
    throw ConfigError("kind", "random has no parameters");
}

// Gradient of the SGNS loss with respect to the center, context and negative
// vectors, flattened in that order.
inline double check_sgns(Rng& rng, const Options& opt) {
    const std::size_t d = 8, k = 5;
    nn::Vector theta((2 + k) * d);
    for (double& x : theta) x = uniform_real(rng, -0.5, 0.5);
    auto evaluate = [&](std::span<const double> p) {
        std::vector<std::span<const double>> negs;
        for (std::size_t j = 0; j < k; ++j) negs.push_back(p.subspan((2 + j) * d, d));
        return skipgram::sgns_loss_and_gradients(p.subspan(0, d), p.subspan(d, d), negs);
    };
    const auto g = evaluate(theta);
    nn::Vector analytic;
    analytic.insert(analytic.end(), g.center.begin(), g.center.end());
    analytic.insert(analytic.end(), g.context.begin(), g.context.end());
    for (const auto& n : g.negatives) analytic.insert(analytic.end(), n.begin(), n.end());
    if (opt.corrupt != 0.0) analytic[analytic.size() / 2] += opt.corrupt;
    const std::vector<std::size_t> blocks(2 + k, d);
    return nn::grad_check([&](std::span<const double> p) { return evaluate(p).loss; }, theta, analytic, opt.h, blocks)
        .max_relative_error;
}

}  // namespace detail

// One line per trainable traveler model kind, then the SGNS step.
inline std::vector<KindResult> run(const Options& opt = {}) {
    std::vector<KindResult> out;
    std::uint64_t stream = 0;
    for (auto kind : traveler::kTrainableKinds) {
        KindResult r{traveler::to_string(kind), 0.0, opt.trials};
        for (std::size_t t = 0; t < opt.trials; ++t) {
            Rng rng(mix_seed(opt.seed, ++stream));
            r.max_relative_error = std::max(r.max_relative_error, detail::check_traveler(kind, rng, opt));
        }
        out.push_back(r);
    }
    KindResult sg{"sgns", 0.0, opt.trials};
    for (std::size_t t = 0; t < opt.trials; ++t) {
        Rng rng(mix_seed(opt.seed, ++stream));
        sg.max_relative_error = std::max(sg.max_relative_error, detail::check_sgns(rng, opt));
    }
    out.push_back(sg);
    return out;
}

inline constexpr double kTolerance = 1e-4;

inline bool all_pass(const std::vector<KindResult>& results) {
    for (const auto& r : results) {
        if (!(r.max_relative_error < kTolerance)) return false;
    }
    return true;
}

}  // namespace tripembed::gradcheck
