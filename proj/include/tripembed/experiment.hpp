#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "eval.hpp"
#include "skipgram.hpp"
#include "traveler.hpp"

// End-to-end comparison of traveler-embedding settings on a user-disjoint
// split: listing embeddings and traveler models are fit on the train side
// only; the downstream classifier is scored on the test side.
namespace tripembed::experiment {

struct Setting {
    std::string name;
    eval::FeatureSet features;
    std::optional<traveler::ModelKind> model;  // traveler model providing the embedding
};

// "handcrafted", "<kind>" (hand-crafted + embedding) or "<kind>:only".
inline Setting parse_setting(std::string_view text) {
    if (text == "handcrafted") return {"handcrafted", {eval::FeatureSetKind::handcrafted, ""}, std::nullopt};
    std::string_view base = text;
    bool only = false;
    if (auto pos = text.find(':'); pos != std::string_view::npos) {
        if (text.substr(pos) != ":only") throw ConfigError("settings", "unknown setting '" + std::string(text) + "'");
        base = text.substr(0, pos);
        only = true;
    }
    const auto kind = traveler::parse_kind(base);
    if (!kind) {
        throw ConfigError("settings", "unknown setting '" + std::string(text) +
                                          "'; valid: handcrafted, random, average, dan, lstm, lstm_attention "
                                          "(optionally suffixed ':only')");
    }
    const auto kind_kind = only ? eval::FeatureSetKind::embedding_only : eval::FeatureSetKind::handcrafted_plus_embedding;
    return {std::string(text), {kind_kind, std::string(base)}, *kind};
}

inline std::vector<Setting> parse_settings(std::string_view csv) {
    std::vector<Setting> out;
    for (auto part : split(csv, ',')) {
        if (!part.empty()) out.push_back(parse_setting(part));
    }
    if (out.empty()) throw ConfigError("settings", "no settings given");
    return out;
}

// One row per session with at least one embedded view.
inline std::vector<eval::DownstreamRow> downstream_rows(const corpus::SessionCorpus& sessions,
                                                        const traveler::EmbeddingLookup& lookup,
                                                        const traveler::TravelerModel* model) {
    std::vector<eval::DownstreamRow> rows;
    for (const auto& s : sessions.sessions) {
        const auto viewed = traveler::viewed_embeddings(s, lookup);
        if (viewed.rows() == 0) continue;
        const auto views = eval::view_prefix(s);
        eval::DownstreamRow row;
        row.handcrafted = eval::handcrafted_features(views);
        if (model) row.embedding = model->embedding(viewed);
        row.label = s.booked() ? 1 : 0;
        rows.push_back(std::move(row));
    }
    return rows;
}

// Downstream evaluation of each setting; `models` must hold every model kind
// the settings reference.
inline std::map<std::string, eval::EvalReport> evaluate_settings(
    const corpus::SessionCorpus& train, const corpus::SessionCorpus& test, const traveler::EmbeddingLookup& lookup,
    const std::vector<Setting>& settings, const std::map<traveler::ModelKind, traveler::TravelerModel>& models,
    const eval::DownstreamConfig& downstream, const std::string& train_tag) {
    std::map<std::string, eval::EvalReport> reports;
    for (const auto& s : settings) {
        const traveler::TravelerModel* model = s.model ? &models.at(*s.model) : nullptr;
        const auto train_rows = downstream_rows(train, lookup, model);
        const auto test_rows = downstream_rows(test, lookup, model);
        auto report = eval::downstream_eval(train_rows, test_rows, s.features, downstream);
        report.feature_set = s.name == "handcrafted" ? "handcrafted" : s.features.descriptor();
        report.provenance["train_split"] = train_tag;
        reports.emplace(s.name, std::move(report));
    }
    return reports;
}

struct ExperimentConfig {
    std::uint64_t min_count = 5;
    double train_fraction = 0.7;
    skipgram::SkipgramConfig skipgram;
    traveler::TravelerConfig traveler;
    eval::DownstreamConfig downstream;
    std::uint64_t seed = 1;
};

struct ExperimentResult {
    corpus::Vocabulary vocabulary;
    skipgram::TrainResult embeddings;
    std::map<traveler::ModelKind, traveler::TrainOutcome> models;
    std::map<std::string, eval::EvalReport> reports;  // by setting name
    std::size_t train_travelers = 0;
    std::size_t test_travelers = 0;
};

inline ExperimentResult run_experiment(const corpus::SessionCorpus& sessions, const std::vector<Setting>& settings,
                                       const ExperimentConfig& config) {
    ExperimentResult result;
    auto [train, test] = corpus::split_by_user(sessions, config.train_fraction, mix_seed(config.seed, 1));
    result.train_travelers = corpus::travelers(train).size();
    result.test_travelers = corpus::travelers(test).size();

    result.vocabulary = corpus::build_vocabulary(train, config.min_count);
    auto sg = config.skipgram;
    sg.seed = mix_seed(config.seed, 2);
    result.embeddings = skipgram::train_embeddings(train, result.vocabulary, sg);
    const traveler::EmbeddingLookup lookup(result.embeddings.table.input_vectors, result.vocabulary.index_to_key);
    const auto train_examples = traveler::build_examples(train, lookup);
    const std::string train_tag = train.metadata.at("split_tag");

    std::map<traveler::ModelKind, traveler::TravelerModel> models;
    for (const auto& s : settings) {
        if (!s.model || models.count(*s.model)) continue;
        if (*s.model == traveler::ModelKind::random) {
            models.emplace(*s.model, traveler::TravelerModel::random_baseline(sg.dim, mix_seed(config.seed, 3),
                                                                              config.traveler.max_sequence));
            continue;
        }
        auto tc = config.traveler;
        tc.kind = *s.model;
        tc.seed = mix_seed(config.seed, 4);
        auto outcome = traveler::train_traveler_model(train_examples, tc);
        outcome.model.provenance()["train_split"] = train_tag;
        models.emplace(*s.model, outcome.model);
        result.models.emplace(*s.model, std::move(outcome));
    }

    auto dc = config.downstream;
    dc.seed = mix_seed(config.seed, 5);
    result.reports = evaluate_settings(train, test, lookup, settings, models, dc, train_tag);
    return result;
}

}  // namespace tripembed::experiment
