#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "nn.hpp"

namespace tripembed::eval {

using nn::Vector;

// ---------------------------------------------------------------------------
// Metrics.

// Rank-based AUC (Mann-Whitney U with mid-ranks for ties).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size() || scores.empty()) throw DataError("auc: scores and labels must align");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double positive_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                positive_rank_sum += mid_rank;
                ++positives;
            }
        }
        i = j;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) throw DataError("auc: both classes must be present");
    const double p = static_cast<double>(positives);
    const double u = positive_rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * static_cast<double>(negatives));
}

struct Confusion {
    std::size_t true_positive = 0;
    std::size_t false_positive = 0;
    std::size_t false_negative = 0;
    std::size_t true_negative = 0;
};

inline Confusion confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw DataError("confusion: scores and labels must align");
    Confusion c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i] == 1) {
            predicted ? ++c.true_positive : ++c.false_negative;
        } else {
            predicted ? ++c.false_positive : ++c.true_negative;
        }
    }
    return c;
}

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

// Precision is 0 with no predicted positives; recall is 0 with no actual positives.
inline PrecisionRecall precision_recall_f1(std::span<const double> scores, std::span<const int> labels, double threshold) {
    const auto c = confusion(scores, labels, threshold);
    PrecisionRecall r;
    const auto predicted = c.true_positive + c.false_positive;
    const auto actual = c.true_positive + c.false_negative;
    r.precision = predicted ? static_cast<double>(c.true_positive) / static_cast<double>(predicted) : 0.0;
    r.recall = actual ? static_cast<double>(c.true_positive) / static_cast<double>(actual) : 0.0;
    r.f1 = harmonic_mean(r.precision, r.recall);
    return r;
}

// ---------------------------------------------------------------------------
// Hand-crafted session features.

inline constexpr std::size_t kHandcraftedDim = 8;
using HandcraftedFeatures = std::array<double, kHandcraftedDim>;

// [view count, distinct listings, repeat-view ratio, log1p(span ms),
//  log1p(mean gap ms), log1p(last gap ms), distinct / views, 1]
inline HandcraftedFeatures handcrafted_features(std::span<const corpus::Interaction> prefix) {
    if (prefix.empty()) throw DataError("handcrafted_features: empty prefix");
    const double n = static_cast<double>(prefix.size());
    std::unordered_set<std::string> distinct;
    for (const auto& i : prefix) distinct.insert(i.listing_key);
    const double k = static_cast<double>(distinct.size());
    const double span = static_cast<double>(prefix.back().timestamp - prefix.front().timestamp);
    const double mean_gap = prefix.size() > 1 ? span / (n - 1.0) : 0.0;
    const double last_gap =
        prefix.size() > 1 ? static_cast<double>(prefix.back().timestamp - prefix[prefix.size() - 2].timestamp) : 0.0;
    return {n, k, 1.0 - k / n, std::log1p(span), std::log1p(mean_gap), std::log1p(last_gap), k / n, 1.0};
}

// View interactions of a session, in order.
inline std::vector<corpus::Interaction> view_prefix(const corpus::Session& session) {
    std::vector<corpus::Interaction> views;
    for (const auto& i : session.interactions)
        if (i.kind == corpus::EventKind::view) views.push_back(i);
    return views;
}

// ---------------------------------------------------------------------------
// Downstream booking-intent classifier.

enum class FeatureSetKind { handcrafted, handcrafted_plus_embedding, embedding_only };

struct FeatureSet {
    FeatureSetKind kind = FeatureSetKind::handcrafted;
    std::string embedding_name;  // e.g. "dan"; empty for handcrafted

    std::string descriptor() const {
        switch (kind) {
            case FeatureSetKind::handcrafted: return "handcrafted";
            case FeatureSetKind::handcrafted_plus_embedding: return "handcrafted+" + embedding_name;
            case FeatureSetKind::embedding_only: return embedding_name + ":only";
        }
        return "handcrafted";
    }
};

struct DownstreamRow {
    HandcraftedFeatures handcrafted{};
    Vector embedding;
    int label = 0;
};

struct DownstreamConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 0.01;
    std::optional<double> positive_weight;  // default: negatives / positives on the train side
    double threshold = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("eval.epochs", "must be >= 1");
        if (batch_size < 1) throw ConfigError("eval.batch_size", "must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("eval.learning_rate", "must be > 0");
        if (positive_weight && !(*positive_weight > 0.0)) throw ConfigError("eval.positive_weight", "must be > 0");
    }
};

struct EvalReport {
    std::string feature_set;
    double auc = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double threshold = 0.5;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> provenance;  // includes "test_set"
};

inline Vector assemble_features(const DownstreamRow& row, const FeatureSet& fs) {
    Vector x;
    if (fs.kind != FeatureSetKind::embedding_only) x.assign(row.handcrafted.begin(), row.handcrafted.end());
    if (fs.kind != FeatureSetKind::handcrafted) x.insert(x.end(), row.embedding.begin(), row.embedding.end());
    return x;
}

// z-scores from training statistics; constant columns pass through unchanged.
struct Standardizer {
    Vector mean, scale;

    static Standardizer fit(const std::vector<Vector>& rows) {
        const std::size_t d = rows.front().size();
        Standardizer s{Vector(d, 0.0), Vector(d, 1.0)};
        for (const auto& r : rows)
            for (std::size_t i = 0; i < d; ++i) s.mean[i] += r[i];
        for (double& m : s.mean) m /= static_cast<double>(rows.size());
        Vector var(d, 0.0);
        for (const auto& r : rows)
            for (std::size_t i = 0; i < d; ++i) var[i] += (r[i] - s.mean[i]) * (r[i] - s.mean[i]);
        for (std::size_t i = 0; i < d; ++i) {
            const double sd = std::sqrt(var[i] / static_cast<double>(rows.size()));
            if (sd > 1e-12) {
                s.scale[i] = sd;
            } else {
                s.mean[i] = 0.0;
            }
        }
        return s;
    }

    void apply(Vector& x) const {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i]) / scale[i];
    }
};

inline std::string test_set_tag(std::span<const DownstreamRow> rows) {
    Fnv1a h;
    for (const auto& r : rows) {
        for (double x : r.handcrafted) h.update(format_double(x));
        h.update(r.label ? "1" : "0");
    }
    return h.hex();
}

// Trains a single sigmoid unit (weighted BCE, adaptive-moment optimizer) on
// the train rows and reports metrics on the test rows.
inline EvalReport downstream_eval(std::span<const DownstreamRow> train, std::span<const DownstreamRow> test,
                                  const FeatureSet& feature_set, const DownstreamConfig& config) {
    config.validate();
    if (train.empty() || test.empty()) throw DataError("downstream_eval: empty train or test set");

    auto featurize = [&](std::span<const DownstreamRow> rows) {
        std::vector<Vector> xs;
        xs.reserve(rows.size());
        for (const auto& r : rows) xs.push_back(assemble_features(r, feature_set));
        const std::size_t d = xs.front().size();
        for (const auto& x : xs)
            if (x.size() != d || d == 0) throw DataError("downstream_eval: feature dimension mismatch");
        return xs;
    };
    auto xs_train = featurize(train);
    auto xs_test = featurize(test);
    if (xs_train.front().size() != xs_test.front().size()) throw DataError("downstream_eval: feature dimension mismatch");

    std::size_t pos = 0;
    for (const auto& r : train) pos += r.label == 1;
    if (pos == 0 || pos == train.size()) throw DataError("degenerate labels");
    const double w = config.positive_weight.value_or(static_cast<double>(train.size() - pos) / static_cast<double>(pos));

    const auto standardizer = Standardizer::fit(xs_train);
    for (auto& x : xs_train) standardizer.apply(x);
    for (auto& x : xs_test) standardizer.apply(x);

    const std::size_t d = xs_train.front().size();
    Rng rng(config.seed);
    nn::DenseLayer unit(d, 1, nn::Activation::sigmoid);
    nn::glorot_init(unit, rng);
    std::vector<nn::DenseLayer*> params{&unit};
    auto flat = nn::flatten(std::vector<const nn::DenseLayer*>{&unit});
    nn::AdamState state(flat.size(), nn::AdamHyper{config.learning_rate});

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t len = std::min(config.batch_size, order.size() - start);
            nn::DenseLayer grad = unit.zeros_like();
            for (std::size_t b = 0; b < len; ++b) {
                const std::size_t i = order[start + b];
                auto fwd = nn::dense_forward(unit, xs_train[i]);
                const auto lv = nn::weighted_bce(fwd.output[0], train[i].label, w);
                const double up[1] = {lv.dloss_dp / static_cast<double>(len)};
                nn::accumulate(grad, nn::dense_backward(unit, fwd.cache, up).param_grad);
            }
            const auto g = nn::flatten(std::vector<const nn::DenseLayer*>{&grad});
            nn::adam_step(flat, g, state);
            nn::unflatten(flat, params);
        }
    }

    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < test.size(); ++i) {
        scores.push_back(nn::dense_forward(unit, xs_test[i]).output[0]);
        labels.push_back(test[i].label);
    }
    EvalReport report;
    report.feature_set = feature_set.descriptor();
    report.auc = auc(scores, labels);
    const auto prf = precision_recall_f1(scores, labels, config.threshold);
    report.precision = prf.precision;
    report.recall = prf.recall;
    report.f1 = prf.f1;
    report.threshold = config.threshold;
    report.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    report.negatives = labels.size() - report.positives;
    report.seed = config.seed;
    report.provenance["test_set"] = test_set_tag(test);
    report.provenance["positive_weight"] = format_double(w);
    return report;
}

// ---------------------------------------------------------------------------
// Reports and comparison table.

inline nn::Json report_to_json(const EvalReport& r) {
    nn::Json j;
    j["feature_set"] = r.feature_set;
    j["auc"] = r.auc;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["threshold"] = r.threshold;
    j["positives"] = r.positives;
    j["negatives"] = r.negatives;
    j["seed"] = r.seed;
    nn::Json prov = nn::Json::object();
    for (const auto& [k, v] : r.provenance) prov[k] = v;
    j["provenance"] = std::move(prov);
    return j;
}

inline EvalReport report_from_json(const nn::Json& j) {
    try {
        EvalReport r;
        r.feature_set = j.at("feature_set").get<std::string>();
        r.auc = j.at("auc").get<double>();
        r.precision = j.at("precision").get<double>();
        r.recall = j.at("recall").get<double>();
        r.f1 = j.at("f1").get<double>();
        r.threshold = j.at("threshold").get<double>();
        r.positives = j.at("positives").get<std::size_t>();
        r.negatives = j.at("negatives").get<std::size_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [k, v] : j.at("provenance").items()) r.provenance[k] = v.get<std::string>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
}

inline void save_report(const EvalReport& r, const std::string& path) {
    auto out = open_output(path);
    out << report_to_json(r).dump(1) << '\n';
    if (!out) throw Error("write failed: " + path);
}

// Sorted by F-score descending, then AUC descending; equal rows keep input order.
inline std::vector<EvalReport> compare_settings(std::vector<EvalReport> reports) {
    if (reports.size() < 2) throw DataError("compare_settings: need at least 2 reports");
    const auto tag = [](const EvalReport& r) {
        auto it = r.provenance.find("test_set");
        return it == r.provenance.end() ? std::string() : it->second;
    };
    for (const auto& r : reports) {
        if (tag(r) != tag(reports.front())) throw DataError("compare_settings: reports use different test sets");
    }
    std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
        if (a.f1 != b.f1) return a.f1 > b.f1;
        return a.auc > b.auc;
    });
    return reports;
}

inline std::string format_comparison(std::span<const EvalReport> ranked) {
    std::size_t width = std::string_view("Algorithm").size();
    for (const auto& r : ranked) width = std::max(width, r.feature_set.size());
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };
    std::string out = pad("Algorithm", width) + " | AUC   | Precision | Recall | F-Score\n";
    out += std::string(width, '-') + "-|-------|-----------|--------|--------\n";
    for (const auto& r : ranked) {
        out += pad(r.feature_set, width) + " | " + pad(format_fixed(r.auc, 3), 5) + " | " +
               pad(format_fixed(r.precision, 3), 9) + " | " + pad(format_fixed(r.recall, 3), 6) + " | " +
               format_fixed(r.f1, 3) + "\n";
    }
    return out;
}

}  // namespace tripembed::eval
