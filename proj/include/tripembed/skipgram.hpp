#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "nn.hpp"

// Listing embeddings trained with skip-gram and negative sampling over
// traveler sessions. Two tables are kept: input vectors (the published
// listing embedding) and output (context-side) vectors.
namespace tripembed::skipgram {

using nn::Matrix;

struct EmbeddingTable {
    Matrix input_vectors;
    Matrix output_vectors;

    EmbeddingTable() = default;
    EmbeddingTable(std::size_t vocab_size, std::size_t dim) : input_vectors(vocab_size, dim), output_vectors(vocab_size, dim) {}

    std::size_t size() const noexcept { return input_vectors.rows(); }
    std::size_t dim() const noexcept { return input_vectors.cols(); }

    bool finite() const { return nn::all_finite(input_vectors.flat()) && nn::all_finite(output_vectors.flat()); }

    bool operator==(const EmbeddingTable&) const = default;
};

struct SkipgramConfig {
    std::size_t window = 3;
    std::size_t negatives = 5;
    std::size_t dim = 32;
    std::size_t epochs = 5;
    double learning_rate_initial = 0.025;
    double learning_rate_final = 0.0001;
    double subsample_threshold = 1e-3;
    bool smoothed_negatives = false;  // draw negatives from count^0.75 instead of uniformly
    std::uint64_t seed = 1;

    void validate() const {
        if (window < 1) throw ConfigError("window", "must be >= 1");
        if (negatives < 1) throw ConfigError("negatives", "must be >= 1");
        if (dim < 2) throw ConfigError("dim", "must be >= 2");
        if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
        if (!(learning_rate_final > 0.0)) throw ConfigError("learning_rate_final", "must be > 0");
        if (!(learning_rate_initial >= learning_rate_final))
            throw ConfigError("learning_rate_initial", "must be >= learning_rate_final");
        if (!(subsample_threshold > 0.0)) throw ConfigError("subsample_threshold", "must be > 0");
    }
};

using TrainingPair = std::pair<std::uint32_t, std::uint32_t>;  // (center, context)

// (x_i, x_{i+j}) for every 0 < |j| <= window, ordered by i then j.
inline std::vector<TrainingPair> generate_training_pairs(std::span<const std::uint32_t> session, std::size_t window) {
    std::vector<TrainingPair> pairs;
    const auto n = static_cast<std::ptrdiff_t>(session.size());
    const auto c = static_cast<std::ptrdiff_t>(window);
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        for (std::ptrdiff_t j = -c; j <= c; ++j) {
            if (j == 0 || i + j < 0 || i + j >= n) continue;
            pairs.emplace_back(session[static_cast<std::size_t>(i)], session[static_cast<std::size_t>(i + j)]);
        }
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Negative sampling.

inline constexpr int kMaxRedraws = 16;

class NegativeSampler {
public:
    // Uniform over [0, vocab_size).
    explicit NegativeSampler(std::size_t vocab_size) : size_(vocab_size) { check(); }

    // Proportional to count^power.
    NegativeSampler(std::span<const std::uint64_t> counts, double power) : size_(counts.size()) {
        check();
        cumulative_.reserve(counts.size());
        double acc = 0.0;
        for (auto c : counts) {
            acc += std::pow(static_cast<double>(c), power);
            cumulative_.push_back(acc);
        }
    }

    std::size_t vocab_size() const noexcept { return size_; }

    std::uint32_t draw_one(Rng& rng) const {
        if (cumulative_.empty()) return static_cast<std::uint32_t>(uniform_index(rng, size_));
        const double u = uniform01(rng) * cumulative_.back();
        auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        return static_cast<std::uint32_t>(std::min<std::size_t>(it - cumulative_.begin(), size_ - 1));
    }

    // k independent draws; a draw equal to `positive` is re-drawn up to 16
    // times and then kept.
    void draw(std::size_t k, std::uint32_t positive, Rng& rng, std::vector<std::uint32_t>& out) const {
        out.clear();
        for (std::size_t i = 0; i < k; ++i) {
            std::uint32_t idx = draw_one(rng);
            for (int attempt = 0; idx == positive && attempt < kMaxRedraws; ++attempt) idx = draw_one(rng);
            out.push_back(idx);
        }
    }

private:
    void check() const {
        if (size_ < 2) throw DataError("cannot negative-sample a single-listing vocabulary");
    }

    std::size_t size_;
    std::vector<double> cumulative_;
};

inline std::vector<std::uint32_t> negative_sample(std::size_t vocab_size, std::size_t k, std::uint32_t positive, Rng& rng) {
    if (k < 1) throw ConfigError("negatives", "must be >= 1");
    std::vector<std::uint32_t> out;
    NegativeSampler(vocab_size).draw(k, positive, rng, out);
    return out;
}

// ---------------------------------------------------------------------------
// Loss and update.

inline constexpr double kLogitClamp = 30.0;

namespace detail {

// -log(sigmoid(x)), computed without overflow.
inline double neg_log_sigmoid(double x) {
    return x > 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

inline double clamped_logit(std::span<const double> a, std::span<const double> b) {
    const double s = nn::dot(a, b);
    if (!std::isfinite(s)) throw NumericError("sgns: non-finite dot product");
    return std::clamp(s, -kLogitClamp, kLogitClamp);
}

}  // namespace detail

// Loss -log σ(ν'_ctx·ν_ctr) - Σ log σ(-ν'_neg·ν_ctr) and its gradient with
// respect to each participating vector. Used by sgns_step and by the
// gradient checker.
struct SgnsGradients {
    double loss = 0.0;
    nn::Vector center;
    nn::Vector context;
    std::vector<nn::Vector> negatives;
};

inline SgnsGradients sgns_loss_and_gradients(std::span<const double> center, std::span<const double> context,
                                             std::span<const std::span<const double>> negatives) {
    const std::size_t d = center.size();
    SgnsGradients g;
    g.center.assign(d, 0.0);

    const double s_pos = detail::clamped_logit(context, center);
    g.loss += detail::neg_log_sigmoid(s_pos);
    const double g_pos = nn::sigmoid(s_pos) - 1.0;
    g.context.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        g.center[i] += g_pos * context[i];
        g.context[i] = g_pos * center[i];
    }
    for (auto neg : negatives) {
        const double s = detail::clamped_logit(neg, center);
        g.loss += detail::neg_log_sigmoid(-s);
        const double g_neg = nn::sigmoid(s);
        nn::Vector gn(d);
        for (std::size_t i = 0; i < d; ++i) {
            g.center[i] += g_neg * neg[i];
            gn[i] = g_neg * center[i];
        }
        g.negatives.push_back(std::move(gn));
    }
    return g;
}

// One SGD step on a (center, context, negatives) example. Returns the loss
// before the update.
inline double sgns_step(std::uint32_t center, std::uint32_t context, std::span<const std::uint32_t> negatives,
                        EmbeddingTable& table, double learning_rate) {
    const std::size_t v = table.size();
    const std::size_t d = table.dim();
    if (center >= v || context >= v) throw DataError("sgns_step: index out of range");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");

    auto ctr = table.input_vectors.row(center);
    thread_local nn::Vector center_grad;
    center_grad.assign(d, 0.0);

    auto update_output = [&](std::uint32_t idx, double label) {
        if (idx >= v) throw DataError("sgns_step: index out of range");
        auto out = table.output_vectors.row(idx);
        const double s = detail::clamped_logit(out, ctr);
        const double loss = label > 0.0 ? detail::neg_log_sigmoid(s) : detail::neg_log_sigmoid(-s);
        const double g = nn::sigmoid(s) - label;
        for (std::size_t i = 0; i < d; ++i) {
            center_grad[i] += g * out[i];
            out[i] -= learning_rate * g * ctr[i];
        }
        return loss;
    };

    double loss = update_output(context, 1.0);
    for (auto neg : negatives) loss += update_output(neg, 0.0);
    for (std::size_t i = 0; i < d; ++i) ctr[i] -= learning_rate * center_grad[i];
    return loss;
}

// ---------------------------------------------------------------------------
// Training.

struct EpochStats {
    double mean_loss = 0.0;
    std::size_t pairs = 0;
    double wall_ms = 0.0;
};

struct TrainResult {
    EmbeddingTable table;
    std::vector<EpochStats> epochs;
};

inline EmbeddingTable initial_table(std::size_t vocab_size, std::size_t dim, Rng& rng) {
    EmbeddingTable table(vocab_size, dim);
    const double half = 0.5 / static_cast<double>(dim);
    for (double& x : table.input_vectors.flat()) x = uniform_real(rng, -half, half);
    return table;
}

// Single-worker and deterministic for a fixed seed. Subsampling is re-drawn
// every epoch and the learning rate decays linearly over all steps.
inline TrainResult train_embeddings(const corpus::SessionCorpus& sessions, const corpus::Vocabulary& vocab,
                                    const SkipgramConfig& config) {
    config.validate();
    if (vocab.size() == 0) throw ConfigError("min_count", "vocabulary empty");

    Rng rng(config.seed);
    TrainResult result;
    result.table = initial_table(vocab.size(), config.dim, rng);

    std::vector<std::vector<std::uint32_t>> indexed;
    indexed.reserve(sessions.sessions.size());
    for (const auto& s : sessions.sessions) {
        auto idx = corpus::view_indices(s, vocab);
        if (idx.size() >= 2) indexed.push_back(std::move(idx));
    }
    const auto keep = corpus::keep_probabilities(vocab, config.subsample_threshold);
    const NegativeSampler sampler = config.smoothed_negatives ? NegativeSampler(vocab.counts, 0.75)
                                                              : NegativeSampler(vocab.size());

    std::vector<std::size_t> order(indexed.size());
    std::vector<std::uint32_t> kept_views;
    std::vector<std::uint32_t> negatives;
    std::vector<TrainingPair> pairs;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle(order, rng);

        pairs.clear();
        for (auto si : order) {
            kept_views.clear();
            for (auto idx : indexed[si]) {
                if (keep[idx] >= 1.0 || bernoulli(rng, keep[idx])) kept_views.push_back(idx);
            }
            auto session_pairs = generate_training_pairs(kept_views, config.window);
            pairs.insert(pairs.end(), session_pairs.begin(), session_pairs.end());
        }

        double loss_sum = 0.0;
        const double span = config.learning_rate_initial - config.learning_rate_final;
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const double progress =
                (static_cast<double>(epoch) + static_cast<double>(p) / static_cast<double>(pairs.size())) /
                static_cast<double>(config.epochs);
            const double lr = config.learning_rate_initial - span * progress;
            sampler.draw(config.negatives, pairs[p].second, rng, negatives);
            loss_sum += sgns_step(pairs[p].first, pairs[p].second, negatives, result.table, lr);
        }
        EpochStats stats;
        stats.pairs = pairs.size();
        stats.mean_loss = pairs.empty() ? 0.0 : loss_sum / static_cast<double>(pairs.size());
        stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        result.epochs.push_back(stats);
    }
    if (!result.table.finite()) throw NumericError("train_embeddings: non-finite table entry");
    return result;
}

// ---------------------------------------------------------------------------
// Retrieval.

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = nn::norm(a);
    const double nb = nn::norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return nn::dot(a, b) / (na * nb);
}

struct Neighbor {
    std::size_t index;
    double cosine;
};

// Top-k rows of `vectors` by cosine to row `query`, excluding the query;
// ties broken by index.
inline std::vector<Neighbor> nearest_neighbors(const Matrix& vectors, std::size_t query, std::size_t top_k) {
    if (query >= vectors.rows()) throw DataError("nearest_neighbors: index " + std::to_string(query) + " out of range");
    if (top_k >= vectors.rows()) throw ConfigError("top_k", "must be smaller than the vocabulary size");
    std::vector<Neighbor> all;
    all.reserve(vectors.rows() - 1);
    const auto q = vectors.row(query);
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        if (i != query) all.push_back({i, cosine(q, vectors.row(i))});
    }
    auto better = [](const Neighbor& a, const Neighbor& b) {
        return a.cosine != b.cosine ? a.cosine > b.cosine : a.index < b.index;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top_k), all.end(), better);
    all.resize(top_k);
    return all;
}

inline std::vector<Neighbor> nearest_neighbors(const EmbeddingTable& table, std::size_t query, std::size_t top_k) {
    return nearest_neighbors(table.input_vectors, query, top_k);
}

// ---------------------------------------------------------------------------
// Text table: "V d" header, then "key v_1 ... v_d" rows. Rows after a
// "#coldstart" line are extrapolated listings and are not counted in V.

struct KeyedEmbeddings {
    std::vector<std::string> keys;
    Matrix vectors;
    std::size_t warm_count = 0;

    std::size_t dim() const noexcept { return vectors.cols(); }
};

inline constexpr std::string_view kColdstartMarker = "#coldstart";

inline void write_row(std::ostream& out, const std::string& key, std::span<const double> values) {
    out << key;
    for (double x : values) out << ' ' << format_double(x);
    out << '\n';
}

inline void write_text_table(std::ostream& out, std::span<const std::string> keys, const Matrix& vectors) {
    if (keys.size() != vectors.rows()) throw DataError("write_text_table: key count != row count");
    out << vectors.rows() << ' ' << vectors.cols() << '\n';
    for (std::size_t i = 0; i < keys.size(); ++i) write_row(out, keys[i], vectors.row(i));
}

inline void save_text_table(const std::string& path, std::span<const std::string> keys, const Matrix& vectors) {
    auto out = open_output(path);
    write_text_table(out, keys, vectors);
    if (!out) throw Error("write failed: " + path);
}

inline KeyedEmbeddings parse_text_table(std::istream& in) {
    std::string raw;
    std::size_t line_no = 0;
    std::size_t declared = 0, dim = 0;
    bool have_header = false;
    bool cold = false;
    KeyedEmbeddings result;
    std::vector<double> values;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = strip_cr(raw);
        if (line.empty()) continue;
        if (line.front() == '#') {
            if (line == kColdstartMarker) cold = true;
            continue;
        }
        const auto fields = split(line, ' ');
        if (!have_header) {
            if (fields.size() != 2 || !parse_int(fields[0], declared) || !parse_int(fields[1], dim) || dim == 0) {
                throw ParseError(line_no, "expected header 'V d'");
            }
            have_header = true;
            continue;
        }
        if (fields.size() != dim + 1) {
            throw ParseError(line_no, "expected key and " + std::to_string(dim) + " values");
        }
        result.keys.emplace_back(fields[0]);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            double v;
            if (!parse_double(fields[i], v) || !std::isfinite(v)) throw ParseError(line_no, "invalid value");
            values.push_back(v);
        }
        if (!cold) ++result.warm_count;
    }
    if (!have_header) throw ParseError(line_no, "missing header");
    if (result.warm_count != declared) {
        throw ParseError(line_no, "header declares " + std::to_string(declared) + " rows, found " +
                                      std::to_string(result.warm_count));
    }
    result.vectors = Matrix(result.keys.size(), dim);
    std::copy(values.begin(), values.end(), result.vectors.flat().begin());
    return result;
}

inline KeyedEmbeddings load_text_table(const std::string& path) {
    auto in = open_input(path);
    return parse_text_table(in);
}

// ---------------------------------------------------------------------------
// Binary sidecar with both tables: "S2RE", version byte, V and d as u64, then
// input and output tables as little-endian f64, row-major.

inline constexpr char kBinaryMagic[4] = {'S', '2', 'R', 'E'};
inline constexpr std::uint8_t kBinaryVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(bytes, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw DataError("binary table truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_binary_table(const std::string& path, const EmbeddingTable& table) {
    auto out = open_output(path);
    out.write(kBinaryMagic, 4);
    out.put(static_cast<char>(kBinaryVersion));
    detail::put_u64(out, table.size());
    detail::put_u64(out, table.dim());
    for (const Matrix* m : {&table.input_vectors, &table.output_vectors}) {
        for (double x : m->flat()) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, sizeof bits);
            detail::put_u64(out, bits);
        }
    }
    if (!out) throw Error("write failed: " + path);
}

inline EmbeddingTable load_binary_table(const std::string& path) {
    auto in = open_input(path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kBinaryMagic, 4) != 0) throw DataError("bad magic in " + path);
    const int version = in.get();
    if (version != kBinaryVersion) throw DataError("unsupported binary table version " + std::to_string(version));
    const auto v = detail::get_u64(in);
    const auto d = detail::get_u64(in);
    EmbeddingTable table(v, d);
    for (Matrix* m : {&table.input_vectors, &table.output_vectors}) {
        for (double& x : m->flat()) {
            const auto bits = detail::get_u64(in);
            std::memcpy(&x, &bits, sizeof x);
        }
    }
    return table;
}

}  // namespace tripembed::skipgram
