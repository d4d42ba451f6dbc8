#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "nn.hpp"

// Traveler embeddings from the sequence of listing embeddings a traveler
// viewed. Every trainable model ends in a sigmoid scoring head predicting the
// booking; the traveler embedding is the activation feeding that head.
namespace tripembed::traveler {

using nn::Activation;
using nn::DenseLayer;
using nn::Matrix;
using nn::Vector;

enum class ModelKind { random, average, dan, lstm, lstm_attention };

inline std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::random: return "random";
        case ModelKind::average: return "average";
        case ModelKind::dan: return "dan";
        case ModelKind::lstm: return "lstm";
        case ModelKind::lstm_attention: return "lstm_attention";
    }
    return "unknown";
}

inline std::optional<ModelKind> parse_kind(std::string_view name) {
    for (auto k : {ModelKind::random, ModelKind::average, ModelKind::dan, ModelKind::lstm, ModelKind::lstm_attention}) {
        if (name == to_string(k)) return k;
    }
    return std::nullopt;
}

inline constexpr ModelKind kTrainableKinds[] = {ModelKind::average, ModelKind::dan, ModelKind::lstm,
                                                ModelKind::lstm_attention};

struct TravelerExample {
    std::string traveler_key;
    Matrix viewed;  // t x d, oldest first
    int label = 0;
};

// ---------------------------------------------------------------------------
// Pooling baselines.

inline Vector pool_average(const Matrix& viewed) {
    if (viewed.rows() == 0) throw DataError("pool_average: empty sequence");
    Vector mean(viewed.cols(), 0.0);
    for (std::size_t t = 0; t < viewed.rows(); ++t) {
        auto row = viewed.row(t);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += row[i];
    }
    const double inv = 1.0 / static_cast<double>(viewed.rows());
    for (double& x : mean) x *= inv;
    return mean;
}

inline Vector baseline_random(const Matrix& viewed, Rng& rng) {
    if (viewed.rows() == 0) throw DataError("baseline_random: empty sequence");
    auto row = viewed.row(uniform_index(rng, viewed.rows()));
    return Vector(row.begin(), row.end());
}

// ---------------------------------------------------------------------------
// Model definitions. Each exposes forward (probability + embedding, optional
// cache), backward (accumulates parameter gradients given dL/dp) and its
// layers in a fixed order for flattening.

struct ModelOutput {
    double probability = 0.5;
    Vector embedding;
};

struct AverageModel {
    DenseLayer head;  // d -> 1, sigmoid

    struct Cache {
        nn::DenseCache head;
    };

    static AverageModel create(std::size_t input_dim, Rng& rng) {
        AverageModel m{DenseLayer(input_dim, 1, Activation::sigmoid)};
        nn::glorot_init(m.head, rng);
        return m;
    }

    AverageModel zeros_like() const { return {head.zeros_like()}; }

    ModelOutput forward(const Matrix& viewed, Cache* cache = nullptr) const {
        Vector pooled = pool_average(viewed);
        auto h = nn::dense_forward(head, pooled);
        if (cache) cache->head = std::move(h.cache);
        return {h.output[0], std::move(pooled)};
    }

    void backward(const Cache& cache, double dloss_dp, AverageModel& grad) const {
        const double up[1] = {dloss_dp};
        nn::accumulate(grad.head, nn::dense_backward(head, cache.head, up).param_grad);
    }

    std::vector<DenseLayer*> layers() { return {&head}; }
    std::vector<const DenseLayer*> layers() const { return {&head}; }
    std::size_t embedding_dim() const { return head.in_dim(); }
};

// Deep Average Network. Layers run as the chain
//   pooled -> h2 = relu(W3 pooled + b3)   (expand)
//          -> h1 = relu(W2 h2 + b2)       (contract)
//          -> f  = relu(W1 h1 + b1)       (traveler embedding)
//          -> p  = sigmoid(w f + b)
// with a separate scoring head so that f stays vector-valued.
struct DanModel {
    DenseLayer pool_projection;  // d -> d_h2
    DenseLayer hidden;           // d_h2 -> d_h1
    DenseLayer embedding;        // d_h1 -> d_f
    DenseLayer head;             // d_f -> 1

    struct Cache {
        nn::DenseCache pool_projection, hidden, embedding, head;
    };

    static DanModel create(std::size_t input_dim, std::size_t expand, std::size_t contract, std::size_t out, Rng& rng) {
        if (!(expand > input_dim && input_dim >= contract && contract > out && out >= 1)) {
            throw ConfigError("dan_dims", "require expand > input_dim >= hidden > embedding >= 1");
        }
        DanModel m{DenseLayer(input_dim, expand, Activation::relu), DenseLayer(expand, contract, Activation::relu),
                   DenseLayer(contract, out, Activation::relu), DenseLayer(out, 1, Activation::sigmoid)};
        for (auto* l : m.layers()) nn::glorot_init(*l, rng);
        // keep relu units alive at initialization
        for (auto* l : {&m.pool_projection, &m.hidden, &m.embedding}) std::fill(l->bias.begin(), l->bias.end(), 0.01);
        return m;
    }

    DanModel zeros_like() const {
        return {pool_projection.zeros_like(), hidden.zeros_like(), embedding.zeros_like(), head.zeros_like()};
    }

    ModelOutput forward(const Matrix& viewed, Cache* cache = nullptr) const {
        auto h2 = nn::dense_forward(pool_projection, pool_average(viewed));
        auto h1 = nn::dense_forward(hidden, h2.output);
        auto f = nn::dense_forward(embedding, h1.output);
        auto p = nn::dense_forward(head, f.output);
        ModelOutput out{p.output[0], f.output};
        if (cache) {
            cache->pool_projection = std::move(h2.cache);
            cache->hidden = std::move(h1.cache);
            cache->embedding = std::move(f.cache);
            cache->head = std::move(p.cache);
        }
        return out;
    }

    void backward(const Cache& cache, double dloss_dp, DanModel& grad) const {
        const double up[1] = {dloss_dp};
        auto b_head = nn::dense_backward(head, cache.head, up);
        auto b_embed = nn::dense_backward(embedding, cache.embedding, b_head.input_grad);
        auto b_hidden = nn::dense_backward(hidden, cache.hidden, b_embed.input_grad);
        auto b_pool = nn::dense_backward(pool_projection, cache.pool_projection, b_hidden.input_grad);
        nn::accumulate(grad.head, b_head.param_grad);
        nn::accumulate(grad.embedding, b_embed.param_grad);
        nn::accumulate(grad.hidden, b_hidden.param_grad);
        nn::accumulate(grad.pool_projection, b_pool.param_grad);
    }

    std::vector<DenseLayer*> layers() { return {&pool_projection, &hidden, &embedding, &head}; }
    std::vector<const DenseLayer*> layers() const { return {&pool_projection, &hidden, &embedding, &head}; }
    std::size_t embedding_dim() const { return embedding.out_dim(); }
};

// ---------------------------------------------------------------------------
// LSTM and additive attention over its hidden states.

struct AttentionResult {
    Vector context;
    Vector weights;
};

// e_t = score · tanh(h_t), α = softmax(e), context = Σ α_t h_t.
inline AttentionResult attention_combine(std::span<const double> score, const std::vector<Vector>& hidden) {
    if (hidden.empty()) throw DataError("attention_combine: no hidden states");
    const std::size_t n = hidden.size();
    Vector e(n);
    for (std::size_t t = 0; t < n; ++t) {
        if (hidden[t].size() != score.size()) throw DataError("attention_combine: dimension mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < score.size(); ++i) s += score[i] * std::tanh(hidden[t][i]);
        e[t] = s;
    }
    const double peak = *std::max_element(e.begin(), e.end());
    AttentionResult r{Vector(score.size(), 0.0), Vector(n)};
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) total += r.weights[t] = std::exp(e[t] - peak);
    for (double& a : r.weights) a /= total;
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i < score.size(); ++i) r.context[i] += r.weights[t] * hidden[t][i];
    return r;
}

// Four-gate LSTM over inputs x_t with gates acting on [h_{t-1}, x_t]. With
// `use_attention` the head reads the attention context over all h_t instead
// of h_T.
struct LstmModel {
    DenseLayer forget_gate;     // sigmoid
    DenseLayer input_gate;      // sigmoid
    DenseLayer output_gate;     // sigmoid
    DenseLayer candidate;       // tanh
    DenseLayer attention;       // 1 x d_h score vector; bias unused (softmax is shift-invariant)
    DenseLayer head;            // d_h -> 1, sigmoid
    bool use_attention = false;

    struct Step {
        nn::DenseCache forget, input, output, candidate;
        Vector cell_prev, cell, tanh_cell, hidden;
    };
    struct Cache {
        std::vector<Step> steps;
        Vector weights;  // attention weights
        nn::DenseCache head;
    };

    static LstmModel create(std::size_t input_dim, std::size_t hidden_dim, bool use_attention, Rng& rng) {
        if (hidden_dim < 1) throw ConfigError("lstm_hidden", "must be >= 1");
        const std::size_t z = hidden_dim + input_dim;
        LstmModel m{DenseLayer(z, hidden_dim, Activation::sigmoid), DenseLayer(z, hidden_dim, Activation::sigmoid),
                    DenseLayer(z, hidden_dim, Activation::sigmoid), DenseLayer(z, hidden_dim, Activation::tanh),
                    DenseLayer(hidden_dim, 1, Activation::linear),  DenseLayer(hidden_dim, 1, Activation::sigmoid),
                    use_attention};
        for (auto* l : m.layers()) nn::glorot_init(*l, rng);
        std::fill(m.forget_gate.bias.begin(), m.forget_gate.bias.end(), 1.0);
        return m;
    }

    LstmModel zeros_like() const {
        return {forget_gate.zeros_like(), input_gate.zeros_like(), output_gate.zeros_like(), candidate.zeros_like(),
                attention.zeros_like(),   head.zeros_like(),       use_attention};
    }

    std::size_t hidden_dim() const { return forget_gate.out_dim(); }

    ModelOutput forward(const Matrix& viewed, Cache* cache = nullptr) const {
        if (viewed.rows() == 0) throw DataError("lstm_forward: empty sequence");
        const std::size_t dh = hidden_dim();
        if (viewed.cols() + dh != forget_gate.in_dim()) throw DataError("lstm_forward: input dimension mismatch");
        Vector h(dh, 0.0), c(dh, 0.0), z(dh + viewed.cols());
        std::vector<Vector> hidden_states;
        std::vector<Step> steps;
        for (std::size_t t = 0; t < viewed.rows(); ++t) {
            std::copy(h.begin(), h.end(), z.begin());
            auto x = viewed.row(t);
            std::copy(x.begin(), x.end(), z.begin() + static_cast<std::ptrdiff_t>(dh));
            auto f = nn::dense_forward(forget_gate, z);
            auto i = nn::dense_forward(input_gate, z);
            auto o = nn::dense_forward(output_gate, z);
            auto g = nn::dense_forward(candidate, z);
            Step step;
            step.cell_prev = c;
            for (std::size_t k = 0; k < dh; ++k) c[k] = f.output[k] * c[k] + i.output[k] * g.output[k];
            step.tanh_cell.resize(dh);
            for (std::size_t k = 0; k < dh; ++k) {
                step.tanh_cell[k] = std::tanh(c[k]);
                h[k] = o.output[k] * step.tanh_cell[k];
            }
            step.cell = c;
            step.hidden = h;
            hidden_states.push_back(h);
            if (cache) {
                step.forget = std::move(f.cache);
                step.input = std::move(i.cache);
                step.output = std::move(o.cache);
                step.candidate = std::move(g.cache);
                steps.push_back(std::move(step));
            }
        }
        Vector summary;
        Vector weights;
        if (use_attention) {
            auto att = attention_combine(attention.weights.row(0), hidden_states);
            summary = std::move(att.context);
            weights = std::move(att.weights);
        } else {
            summary = h;
        }
        auto p = nn::dense_forward(head, summary);
        if (cache) {
            cache->steps = std::move(steps);
            cache->weights = std::move(weights);
            cache->head = std::move(p.cache);
        }
        return {p.output[0], std::move(summary)};
    }

    void backward(const Cache& cache, double dloss_dp, LstmModel& grad) const {
        const std::size_t dh = hidden_dim();
        const std::size_t n = cache.steps.size();
        const double up[1] = {dloss_dp};
        auto b_head = nn::dense_backward(head, cache.head, up);
        nn::accumulate(grad.head, b_head.param_grad);
        const Vector& dsummary = b_head.input_grad;

        std::vector<Vector> dh_direct(n, Vector(dh, 0.0));
        if (use_attention) {
            const auto& alpha = cache.weights;
            Vector dalpha(n);
            double weighted = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                const auto& ht = cache.steps[t].hidden;
                double s = 0.0;
                for (std::size_t k = 0; k < dh; ++k) {
                    dh_direct[t][k] = alpha[t] * dsummary[k];
                    s += dsummary[k] * ht[k];
                }
                dalpha[t] = s;
                weighted += alpha[t] * s;
            }
            auto score = attention.weights.row(0);
            auto gscore = grad.attention.weights.row(0);
            for (std::size_t t = 0; t < n; ++t) {
                const double de = alpha[t] * (dalpha[t] - weighted);
                const auto& ht = cache.steps[t].hidden;
                for (std::size_t k = 0; k < dh; ++k) {
                    const double th = std::tanh(ht[k]);
                    gscore[k] += de * th;
                    dh_direct[t][k] += de * score[k] * (1.0 - th * th);
                }
            }
        } else {
            dh_direct[n - 1] = dsummary;
        }

        Vector dh_next(dh, 0.0), dc_next(dh, 0.0);
        Vector d_out(dh), d_forget(dh), d_input(dh), d_cand(dh);
        for (std::size_t t = n; t-- > 0;) {
            const auto& s = cache.steps[t];
            for (std::size_t k = 0; k < dh; ++k) {
                const double dhk = dh_direct[t][k] + dh_next[k];
                const double o = s.output.output[k];
                d_out[k] = dhk * s.tanh_cell[k];
                const double dc = dc_next[k] + dhk * o * (1.0 - s.tanh_cell[k] * s.tanh_cell[k]);
                d_forget[k] = dc * s.cell_prev[k];
                d_input[k] = dc * s.candidate.output[k];
                d_cand[k] = dc * s.input.output[k];
                dc_next[k] = dc * s.forget.output[k];
            }
            auto bf = nn::dense_backward(forget_gate, s.forget, d_forget);
            auto bi = nn::dense_backward(input_gate, s.input, d_input);
            auto bo = nn::dense_backward(output_gate, s.output, d_out);
            auto bc = nn::dense_backward(candidate, s.candidate, d_cand);
            nn::accumulate(grad.forget_gate, bf.param_grad);
            nn::accumulate(grad.input_gate, bi.param_grad);
            nn::accumulate(grad.output_gate, bo.param_grad);
            nn::accumulate(grad.candidate, bc.param_grad);
            for (std::size_t k = 0; k < dh; ++k) {
                dh_next[k] = bf.input_grad[k] + bi.input_grad[k] + bo.input_grad[k] + bc.input_grad[k];
            }
        }
    }

    std::vector<DenseLayer*> layers() {
        if (use_attention) return {&forget_gate, &input_gate, &output_gate, &candidate, &attention, &head};
        return {&forget_gate, &input_gate, &output_gate, &candidate, &head};
    }
    std::vector<const DenseLayer*> layers() const {
        if (use_attention) return {&forget_gate, &input_gate, &output_gate, &candidate, &attention, &head};
        return {&forget_gate, &input_gate, &output_gate, &candidate, &head};
    }
    std::size_t embedding_dim() const { return hidden_dim(); }
};

// ---------------------------------------------------------------------------
// Generic loss/gradient helpers.

template <class Model>
struct BatchGradient {
    double loss = 0.0;  // mean weighted BCE
    Model grad;
};

template <class Model>
BatchGradient<Model> batch_gradient(const Model& model, std::span<const TravelerExample* const> batch,
                                    double positive_weight) {
    BatchGradient<Model> out{0.0, model.zeros_like()};
    if (batch.empty()) return out;
    const double scale = 1.0 / static_cast<double>(batch.size());
    typename Model::Cache cache;
    for (const auto* ex : batch) {
        const auto fwd = model.forward(ex->viewed, &cache);
        const auto lv = nn::weighted_bce(fwd.probability, ex->label, positive_weight);
        out.loss += lv.loss * scale;
        model.backward(cache, lv.dloss_dp * scale, out.grad);
    }
    return out;
}

template <class Model>
double batch_loss(const Model& model, std::span<const TravelerExample* const> batch, double positive_weight) {
    double loss = 0.0;
    for (const auto* ex : batch) loss += nn::weighted_bce(model.forward(ex->viewed).probability, ex->label, positive_weight).loss;
    return batch.empty() ? 0.0 : loss / static_cast<double>(batch.size());
}

template <class Model>
nn::Vector flat_parameters(const Model& model) {
    const auto layers = model.layers();
    return nn::flatten(layers);
}

template <class Model>
Model with_parameters(const Model& model, std::span<const double> flat) {
    Model copy = model;
    const auto layers = copy.layers();
    nn::unflatten(flat, layers);
    return copy;
}

// Max relative error between the analytic batch gradient and central finite
// differences, scored per parameter tensor.
template <class Model>
nn::GradCheckResult check_model_gradient(const Model& model, std::span<const TravelerExample* const> batch,
                                         double positive_weight, double h = 1e-5, double corrupt = 0.0) {
    const auto analytic = batch_gradient(model, batch, positive_weight);
    auto grad_flat = flat_parameters(analytic.grad);
    if (corrupt != 0.0 && !grad_flat.empty()) grad_flat[grad_flat.size() / 2] += corrupt;
    const auto theta = flat_parameters(model);
    const auto layers = model.layers();
    return nn::grad_check(
        [&](std::span<const double> p) { return batch_loss(with_parameters(model, p), batch, positive_weight); }, theta,
        grad_flat, h, nn::parameter_blocks(layers));
}

// ---------------------------------------------------------------------------
// Trained model wrapper.

struct TravelerConfig {
    ModelKind kind = ModelKind::dan;
    std::size_t dan_expand = 64;
    std::size_t dan_hidden = 16;
    std::size_t dan_embedding = 8;
    std::size_t lstm_hidden = 16;
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::optional<double> positive_weight;  // default: negatives / positives
    double learning_rate = 1e-3;
    std::size_t max_sequence = 50;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
        if (positive_weight && !(*positive_weight > 0.0 && std::isfinite(*positive_weight)))
            throw ConfigError("positive_weight", "must be positive and finite");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
        if (max_sequence < 1) throw ConfigError("max_sequence", "must be >= 1");
    }
};

// Keeps the most recent `max_sequence` rows.
inline Matrix truncate_recent(const Matrix& viewed, std::size_t max_sequence) {
    if (viewed.rows() <= max_sequence) return viewed;
    Matrix out(max_sequence, viewed.cols());
    const std::size_t skip = viewed.rows() - max_sequence;
    for (std::size_t t = 0; t < max_sequence; ++t) {
        auto src = viewed.row(skip + t);
        std::copy(src.begin(), src.end(), out.row(t).begin());
    }
    return out;
}

class TravelerModel {
public:
    using Params = std::variant<std::monostate, AverageModel, DanModel, LstmModel>;

    TravelerModel() = default;
    TravelerModel(ModelKind kind, Params params, std::size_t input_dim, std::size_t max_sequence, std::uint64_t seed)
        : kind_(kind), params_(std::move(params)), input_dim_(input_dim), max_sequence_(max_sequence), seed_(seed) {}

    static TravelerModel random_baseline(std::size_t input_dim, std::uint64_t seed, std::size_t max_sequence = 50) {
        return TravelerModel(ModelKind::random, std::monostate{}, input_dim, max_sequence, seed);
    }

    ModelKind kind() const noexcept { return kind_; }
    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t max_sequence() const noexcept { return max_sequence_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const Params& params() const noexcept { return params_; }
    std::map<std::string, std::string>& provenance() noexcept { return provenance_; }
    const std::map<std::string, std::string>& provenance() const noexcept { return provenance_; }

    // dan -> d_f, lstm -> d_h, lstm_attention -> d_h, average/random -> d.
    std::size_t embedding_dim() const {
        return std::visit(
            [&](const auto& m) -> std::size_t {
                if constexpr (std::is_same_v<std::decay_t<decltype(m)>, std::monostate>) {
                    return input_dim_;
                } else {
                    return m.embedding_dim();
                }
            },
            params_);
    }

    ModelOutput forward(const Matrix& prefix) const {
        if (prefix.rows() == 0) throw DataError("traveler_embedding: empty prefix");
        if (prefix.cols() != input_dim_) throw DataError("traveler model: listing dimension mismatch");
        const Matrix seq = truncate_recent(prefix, max_sequence_);
        return std::visit(
            [&](const auto& m) -> ModelOutput {
                if constexpr (std::is_same_v<std::decay_t<decltype(m)>, std::monostate>) {
                    Rng rng(mix_seed(seed_, content_hash(seq)));
                    return {0.5, baseline_random(seq, rng)};
                } else {
                    return m.forward(seq);
                }
            },
            params_);
    }

    double probability(const Matrix& prefix) const { return forward(prefix).probability; }
    Vector embedding(const Matrix& prefix) const { return forward(prefix).embedding; }

private:
    static std::uint64_t content_hash(const Matrix& m) {
        Fnv1a h;
        for (double x : m.flat()) {
            char bytes[sizeof(double)];
            std::memcpy(bytes, &x, sizeof x);
            h.update(std::string_view(bytes, sizeof bytes));
        }
        return h.digest();
    }

    ModelKind kind_ = ModelKind::random;
    Params params_;
    std::size_t input_dim_ = 0;
    std::size_t max_sequence_ = 50;
    std::uint64_t seed_ = 0;
    std::map<std::string, std::string> provenance_;
};

inline Vector traveler_embedding(const TravelerModel& model, const Matrix& prefix) { return model.embedding(prefix); }

struct EpochRecord {
    double mean_loss = 0.0;
    double wall_ms = 0.0;
};

struct TrainOutcome {
    TravelerModel model;
    std::vector<EpochRecord> trace;
    double positive_weight = 1.0;
};

inline double default_positive_weight(std::span<const TravelerExample> examples) {
    std::size_t pos = 0;
    for (const auto& e : examples) pos += e.label == 1;
    const std::size_t neg = examples.size() - pos;
    if (pos == 0 || neg == 0) throw DataError("degenerate labels");
    return static_cast<double>(neg) / static_cast<double>(pos);
}

namespace detail {

template <class Model>
std::vector<EpochRecord> fit(Model& model, std::span<const TravelerExample> examples, const TravelerConfig& config,
                             double positive_weight, Rng& rng) {
    auto flat = flat_parameters(model);
    nn::AdamState state(flat.size(), nn::AdamHyper{config.learning_rate});
    std::vector<const TravelerExample*> order;
    for (const auto& e : examples) order.push_back(&e);
    std::vector<EpochRecord> trace;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        shuffle(order, rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t len = std::min(config.batch_size, order.size() - start);
            std::span<const TravelerExample* const> batch(order.data() + start, len);
            auto g = batch_gradient(model, batch, positive_weight);
            loss_sum += g.loss * static_cast<double>(len);
            const auto grad_flat = flat_parameters(g.grad);
            nn::adam_step(flat, grad_flat, state);
            const auto layers = model.layers();
            nn::unflatten(flat, layers);
        }
        if (!nn::all_finite(flat)) throw NumericError("traveler training diverged");
        trace.push_back({loss_sum / static_cast<double>(order.size()),
                         std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count()});
    }
    return trace;
}

}  // namespace detail

inline TrainOutcome train_traveler_model(std::span<const TravelerExample> examples, const TravelerConfig& config) {
    config.validate();
    if (examples.empty()) throw DataError("no training examples");
    const std::size_t d = examples.front().viewed.cols();
    for (const auto& e : examples) {
        if (e.viewed.rows() == 0 || e.viewed.cols() != d) throw DataError("inconsistent training example shapes");
        if (e.label != 0 && e.label != 1) throw DataError("labels must be 0 or 1");
    }
    const double w = config.positive_weight.value_or(default_positive_weight(examples));
    if (config.positive_weight) (void)default_positive_weight(examples);  // still reject single-class data

    std::vector<TravelerExample> truncated;
    truncated.reserve(examples.size());
    for (const auto& e : examples) truncated.push_back({e.traveler_key, truncate_recent(e.viewed, config.max_sequence), e.label});

    Rng rng(config.seed);
    TrainOutcome outcome;
    outcome.positive_weight = w;
    switch (config.kind) {
        case ModelKind::average: {
            auto m = AverageModel::create(d, rng);
            outcome.trace = detail::fit(m, truncated, config, w, rng);
            outcome.model = TravelerModel(config.kind, std::move(m), d, config.max_sequence, config.seed);
            break;
        }
        case ModelKind::dan: {
            auto m = DanModel::create(d, config.dan_expand, config.dan_hidden, config.dan_embedding, rng);
            outcome.trace = detail::fit(m, truncated, config, w, rng);
            outcome.model = TravelerModel(config.kind, std::move(m), d, config.max_sequence, config.seed);
            break;
        }
        case ModelKind::lstm:
        case ModelKind::lstm_attention: {
            auto m = LstmModel::create(d, config.lstm_hidden, config.kind == ModelKind::lstm_attention, rng);
            outcome.trace = detail::fit(m, truncated, config, w, rng);
            outcome.model = TravelerModel(config.kind, std::move(m), d, config.max_sequence, config.seed);
            break;
        }
        case ModelKind::random:
            throw ConfigError("kind", "random is not trainable; valid kinds: average, dan, lstm, lstm_attention");
    }
    outcome.model.provenance()["positive_weight"] = format_double(w);
    return outcome;
}

// ---------------------------------------------------------------------------
// Example construction from sessions.

struct EmbeddingLookup {
    const Matrix* vectors = nullptr;
    std::unordered_map<std::string, std::size_t> index;

    EmbeddingLookup(const Matrix& v, std::span<const std::string> keys) : vectors(&v) {
        for (std::size_t i = 0; i < keys.size(); ++i) index.emplace(keys[i], i);
    }
};

// Viewed listings of the session that have an embedding, oldest first.
inline Matrix viewed_embeddings(const corpus::Session& session, const EmbeddingLookup& lookup) {
    std::vector<std::size_t> rows;
    for (const auto& i : session.interactions) {
        if (i.kind != corpus::EventKind::view) continue;
        auto it = lookup.index.find(i.listing_key);
        if (it != lookup.index.end()) rows.push_back(it->second);
    }
    Matrix m(rows.size(), lookup.vectors->cols());
    for (std::size_t t = 0; t < rows.size(); ++t) {
        auto src = lookup.vectors->row(rows[t]);
        std::copy(src.begin(), src.end(), m.row(t).begin());
    }
    return m;
}

// One example per session with at least one embedded view; label = booked.
inline std::vector<TravelerExample> build_examples(const corpus::SessionCorpus& sessions, const EmbeddingLookup& lookup) {
    std::vector<TravelerExample> out;
    for (const auto& s : sessions.sessions) {
        Matrix viewed = viewed_embeddings(s, lookup);
        if (viewed.rows() == 0) continue;
        out.push_back({s.traveler_key, std::move(viewed), s.booked() ? 1 : 0});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model file (JSON).

inline constexpr int kModelFormatVersion = 1;

inline nn::Json model_to_json(const TravelerModel& model) {
    nn::Json j;
    j["format_version"] = kModelFormatVersion;
    j["model_kind"] = to_string(model.kind());
    nn::Json dims;
    dims["input_dim"] = model.input_dim();
    dims["max_sequence"] = model.max_sequence();
    nn::Json layers = nn::Json::array();
    std::visit(
        [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, DanModel>) {
                dims["expand"] = m.pool_projection.out_dim();
                dims["hidden"] = m.hidden.out_dim();
                dims["embedding"] = m.embedding.out_dim();
            } else if constexpr (std::is_same_v<M, LstmModel>) {
                dims["lstm_hidden"] = m.hidden_dim();
            }
            if constexpr (!std::is_same_v<M, std::monostate>) {
                for (const auto* l : m.layers()) layers.push_back(nn::layer_to_json(*l));
            }
        },
        model.params());
    j["dims"] = std::move(dims);
    j["traveler_embedding_dim"] = model.embedding_dim();
    j["seed"] = model.seed();
    j["layers"] = std::move(layers);
    nn::Json prov = nn::Json::object();
    for (const auto& [k, v] : model.provenance()) prov[k] = v;
    j["provenance"] = std::move(prov);
    return j;
}

inline TravelerModel model_from_json(const nn::Json& j) {
    try {
        if (j.at("format_version").get<int>() != kModelFormatVersion) throw DataError("unsupported model format_version");
        const auto kind = parse_kind(j.at("model_kind").get<std::string>());
        if (!kind) throw DataError("unknown model_kind");
        const auto& dims = j.at("dims");
        const auto d = dims.at("input_dim").get<std::size_t>();
        const auto max_seq = dims.at("max_sequence").get<std::size_t>();
        const auto seed = j.at("seed").get<std::uint64_t>();
        std::vector<DenseLayer> layers;
        for (const auto& l : j.at("layers")) layers.push_back(nn::layer_from_json(l));
        auto need = [&](std::size_t n) {
            if (layers.size() != n) throw DataError("model file: expected " + std::to_string(n) + " layers");
        };
        TravelerModel::Params params;
        switch (*kind) {
            case ModelKind::random: need(0); break;
            case ModelKind::average: need(1); params = AverageModel{layers[0]}; break;
            case ModelKind::dan: need(4); params = DanModel{layers[0], layers[1], layers[2], layers[3]}; break;
            case ModelKind::lstm:
                need(5);
                params = LstmModel{layers[0], layers[1], layers[2], layers[3],
                                   DenseLayer(layers[0].out_dim(), 1, Activation::linear), layers[4], false};
                break;
            case ModelKind::lstm_attention:
                need(6);
                params = LstmModel{layers[0], layers[1], layers[2], layers[3], layers[4], layers[5], true};
                break;
        }
        TravelerModel model(*kind, std::move(params), d, max_seq, seed);
        if (j.contains("provenance")) {
            for (const auto& [k, v] : j.at("provenance").items()) model.provenance()[k] = v.get<std::string>();
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed model file: ") + e.what());
    }
}

inline void save_model(const TravelerModel& model, const std::string& path) {
    auto out = open_output(path);
    out << model_to_json(model).dump(1) << '\n';
    if (!out) throw Error("write failed: " + path);
}

inline TravelerModel load_model(const std::string& path) {
    auto in = open_input(path);
    try {
        return model_from_json(nn::Json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path + ": " + e.what());
    }
}

inline void save_training_log(const std::vector<EpochRecord>& trace, const std::string& path) {
    auto out = open_output(path);
    for (std::size_t e = 0; e < trace.size(); ++e) {
        out << e + 1 << '\t' << format_double(trace[e].mean_loss) << '\t' << format_fixed(trace[e].wall_ms, 3) << '\n';
    }
}

}  // namespace tripembed::traveler
