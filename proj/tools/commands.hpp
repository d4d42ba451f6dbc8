#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <tripembed/coldstart.hpp>
#include <tripembed/common.hpp>
#include <tripembed/corpus.hpp>
#include <tripembed/eval.hpp>
#include <tripembed/experiment.hpp>
#include <tripembed/gradcheck.hpp>
#include <tripembed/skipgram.hpp>
#include <tripembed/traveler.hpp>

#include "pipeline_config.hpp"

namespace tripembed::cli {

inline constexpr const char* kEmbeddingsFile = "embeddings.txt";
inline constexpr const char* kColdstartFile = "embeddings_coldstart.txt";

inline void require_out_dir(const PipelineConfig& cfg) {
    if (!fs::is_directory(cfg.out)) throw Error("output directory does not exist: " + cfg.out);
}

inline void require_file(const std::string& path, const std::string& hint) {
    if (!fs::is_regular_file(path)) throw Error("missing input file " + path + " (" + hint + ")");
}

// Train and test sides of the session log. With eval_sessions_path set the
// two files are used as given and must not share travelers; otherwise the
// single log is split by traveler.
struct Split {
    corpus::SessionCorpus train;
    corpus::SessionCorpus test;
    std::string train_tag;
};

inline Split load_split(const PipelineConfig& cfg) {
    require_file(cfg.sessions_path(), "run generate first");
    auto sessions = corpus::load_sessions(cfg.sessions_path());
    Split split;
    if (cfg.corpus.eval_sessions_path) {
        require_file(*cfg.corpus.eval_sessions_path, "corpus.eval_sessions_path");
        split.train = std::move(sessions);
        split.test = corpus::load_sessions(*cfg.corpus.eval_sessions_path);
        const auto train_keys = corpus::travelers(split.train);
        const std::set<std::string> train_set(train_keys.begin(), train_keys.end());
        for (const auto& key : corpus::travelers(split.test)) {
            if (train_set.count(key)) throw DataError("traveler " + key + " appears in both session logs");
        }
        split.train_tag = corpus::traveler_set_tag(train_keys);
        split.train.metadata["split"] = "train";
        split.train.metadata["split_tag"] = split.train_tag;
    } else {
        auto [train, test] = corpus::split_by_user(sessions, cfg.corpus.train_fraction, cfg.split_seed());
        split.train = std::move(train);
        split.test = std::move(test);
        split.train_tag = split.train.metadata.at("split_tag");
    }
    return split;
}

inline skipgram::KeyedEmbeddings load_embeddings(const PipelineConfig& cfg) {
    const auto path = cfg.out_path(kEmbeddingsFile);
    require_file(path, "run train-embeddings first");
    return skipgram::load_text_table(path);
}

inline std::string model_path(const PipelineConfig& cfg, traveler::ModelKind kind) {
    return cfg.out_path("traveler_" + traveler::to_string(kind) + ".json");
}

inline std::string report_path(const PipelineConfig& cfg, std::string name) {
    for (char& c : name) {
        if (c == ':') c = '_';
    }
    return cfg.out_path("report_" + name + ".json");
}

// ---------------------------------------------------------------------------

inline int cmd_generate(const PipelineConfig& cfg, std::ostream& log) {
    require_out_dir(cfg);
    auto synth = cfg.corpus.synthetic;
    synth.seed = cfg.seed;
    const auto [sessions, truth] = corpus::generate_synthetic(synth);
    corpus::save_sessions(sessions, cfg.out_path("sessions.tsv"));
    corpus::save_ground_truth(truth, cfg.out_path("ground_truth.tsv"));
    const auto geo = coldstart::synthetic_geography(truth, cfg.coldstart.n_cold_listings, cfg.coldstart.m_nearest, cfg.seed);
    coldstart::save_geography(geo, cfg.out_path("destinations.csv"), cfg.out_path("demand.csv"),
                              cfg.out_path("cold_listings.csv"));
    log << "generate: " << sessions.sessions.size() << " sessions, " << sessions.view_count() << " views, "
        << truth.listing_keys.size() << " listings\n";
    return 0;
}

inline int cmd_train_embeddings(const PipelineConfig& cfg, std::ostream& log) {
    require_out_dir(cfg);
    const auto split = load_split(cfg);
    const auto vocab = corpus::build_vocabulary(split.train, cfg.corpus.min_count);
    auto sg = cfg.skipgram;
    sg.seed = cfg.skipgram_seed();
    const auto result = skipgram::train_embeddings(split.train, vocab, sg);
    skipgram::save_text_table(cfg.out_path(kEmbeddingsFile), vocab.index_to_key, result.table.input_vectors);
    skipgram::save_binary_table(cfg.out_path("embeddings.bin"), result.table);
    {
        auto out = open_output(cfg.out_path("embeddings_log.tsv"));
        for (std::size_t e = 0; e < result.epochs.size(); ++e) {
            const auto& ep = result.epochs[e];
            out << e + 1 << '\t' << format_double(ep.mean_loss) << '\t' << ep.pairs << '\t' << format_fixed(ep.wall_ms, 3)
                << '\n';
        }
    }
    log << "train-embeddings: V=" << vocab.size() << " d=" << sg.dim << " final loss "
        << format_fixed(result.epochs.back().mean_loss, 4) << '\n';
    return 0;
}

inline int cmd_coldstart(const PipelineConfig& cfg, std::ostream& log) {
    require_out_dir(cfg);
    const auto in_path = cfg.out_path(kEmbeddingsFile);
    require_file(in_path, "run train-embeddings first");
    require_file(cfg.cold_listings_path(), "coldstart.cold_listings_path");
    const auto cold = coldstart::load_cold_listings_csv(cfg.cold_listings_path());

    std::string original;
    {
        auto in = open_input(in_path);
        original.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    auto out = open_output(cfg.out_path(kColdstartFile));
    out << original;
    if (cold.empty()) {
        log << "coldstart: no cold listings\n";
        return 0;
    }

    require_file(cfg.demand_path(), "coldstart.demand_path");
    require_file(cfg.centroids_path(), "coldstart.centroids_path");
    const auto table = skipgram::load_text_table(in_path);
    nn::Matrix warm(table.warm_count, table.vectors.cols());
    std::unordered_map<std::string, std::size_t> key_to_index;
    for (std::size_t i = 0; i < table.warm_count; ++i) {
        key_to_index.emplace(table.keys[i], i);
        std::copy(table.vectors.row(i).begin(), table.vectors.row(i).end(), warm.row(i).begin());
    }
    // listings pruned from the vocabulary carry no vector; their demand rows are dropped
    std::vector<coldstart::DemandEntry> entries;
    for (auto& e : coldstart::load_demand_csv(cfg.demand_path())) {
        if (key_to_index.count(e.listing_key)) entries.push_back(std::move(e));
    }
    auto demand = coldstart::resolve_demand(entries, key_to_index);
    demand.validate();
    const auto destinations = coldstart::destination_embeddings(warm, demand);
    std::map<std::string, coldstart::GeoPoint> centroids;
    for (const auto& [id, p] : coldstart::load_centroids_csv(cfg.centroids_path())) {
        if (destinations.vectors.count(id)) centroids.emplace(id, p);
    }

    out << skipgram::kColdstartMarker << '\n';
    for (const auto& [key, point] : cold) {
        if (key_to_index.count(key)) throw DataError("cold listing " + key + " already has an embedding");
        const auto belief = coldstart::demand_belief_from_location(point, centroids, cfg.coldstart.m_nearest);
        skipgram::write_row(out, key, coldstart::extrapolate_cold(belief, destinations));
    }
    if (!out) throw Error("write failed: " + cfg.out_path(kColdstartFile));
    log << "coldstart: " << cold.size() << " rows appended from " << destinations.vectors.size() << " destinations\n";
    return 0;
}

inline std::string trainable_kinds() {
    std::string out;
    for (auto k : traveler::kTrainableKinds) out += (out.empty() ? "" : ", ") + traveler::to_string(k);
    return out;
}

inline traveler::ModelKind parse_trainable_kind(const std::string& name) {
    const auto kind = traveler::parse_kind(name);
    if (!kind || *kind == traveler::ModelKind::random) {
        throw ConfigError("kind", "unknown model kind '" + name + "'; valid kinds: " + trainable_kinds());
    }
    return *kind;
}

inline int cmd_train_traveler(const PipelineConfig& cfg, traveler::ModelKind kind, std::ostream& log) {
    require_out_dir(cfg);
    const auto split = load_split(cfg);
    const auto table = load_embeddings(cfg);
    const traveler::EmbeddingLookup lookup(table.vectors, table.keys);
    const auto examples = traveler::build_examples(split.train, lookup);
    auto tc = cfg.traveler;
    tc.kind = kind;
    tc.seed = cfg.traveler_seed();
    auto outcome = traveler::train_traveler_model(examples, tc);
    outcome.model.provenance()["train_split"] = split.train_tag;
    traveler::save_model(outcome.model, model_path(cfg, kind));
    traveler::save_training_log(outcome.trace, cfg.out_path("traveler_" + traveler::to_string(kind) + "_log.tsv"));
    log << "train-traveler: " << traveler::to_string(kind) << " on " << examples.size() << " examples, final loss "
        << format_fixed(outcome.trace.back().mean_loss, 4) << '\n';
    return 0;
}

inline int cmd_evaluate(const PipelineConfig& cfg, const std::string& settings_csv, std::ostream& log) {
    require_out_dir(cfg);
    const auto settings = experiment::parse_settings(settings_csv);
    const auto split = load_split(cfg);
    const auto table = load_embeddings(cfg);
    const traveler::EmbeddingLookup lookup(table.vectors, table.keys);

    std::map<traveler::ModelKind, traveler::TravelerModel> models;
    for (const auto& s : settings) {
        if (!s.model || models.count(*s.model)) continue;
        if (*s.model == traveler::ModelKind::random) {
            models.emplace(*s.model, traveler::TravelerModel::random_baseline(table.vectors.cols(), cfg.random_baseline_seed(),
                                                                              cfg.traveler.max_sequence));
            continue;
        }
        const auto path = model_path(cfg, *s.model);
        require_file(path, "run train-traveler --kind " + traveler::to_string(*s.model) + " first");
        auto model = traveler::load_model(path);
        const auto it = model.provenance().find("train_split");
        if (it == model.provenance().end() || it->second != split.train_tag) {
            throw DataError(path + " was trained on a different traveler split");
        }
        if (model.input_dim() != table.vectors.cols()) throw DataError(path + ": listing dimension mismatch");
        models.emplace(*s.model, std::move(model));
    }

    auto dc = cfg.eval.downstream;
    dc.seed = cfg.downstream_seed();
    const auto reports = experiment::evaluate_settings(split.train, split.test, lookup, settings, models, dc, split.train_tag);
    std::vector<eval::EvalReport> all;
    for (const auto& s : settings) {
        const auto& r = reports.at(s.name);
        eval::save_report(r, report_path(cfg, s.name));
        all.push_back(r);
    }
    const auto ranked = eval::compare_settings(all);
    const auto table_text = eval::format_comparison(ranked);
    {
        auto out = open_output(cfg.out_path("comparison.txt"));
        out << table_text;
    }
    log << table_text;
    return 0;
}

inline int cmd_gradcheck(const gradcheck::Options& opt, std::ostream& log) {
    const auto results = gradcheck::run(opt);
    for (const auto& r : results) {
        const bool ok = r.max_relative_error < gradcheck::kTolerance;
        std::ostringstream err;
        err << std::scientific << std::setprecision(3) << r.max_relative_error;
        log << r.name << "\tmax_relative_error=" << err.str() << "\ttrials=" << r.trials << '\t' << (ok ? "PASS" : "FAIL")
            << '\n';
    }
    return gradcheck::all_pass(results) ? 0 : 1;
}

// The generate stage is skipped when the config points at an existing session log.
inline int cmd_pipeline(const PipelineConfig& cfg, std::ostream& log) {
    if (!cfg.corpus.sessions_path) cmd_generate(cfg, log);
    cmd_train_embeddings(cfg, log);
    cmd_coldstart(cfg, log);
    const auto settings = experiment::parse_settings(cfg.eval.settings);
    std::set<traveler::ModelKind> trained;
    for (const auto& s : settings) {
        if (s.model && *s.model != traveler::ModelKind::random && trained.insert(*s.model).second) {
            cmd_train_traveler(cfg, *s.model, log);
        }
    }
    return cmd_evaluate(cfg, cfg.eval.settings, log);
}

}  // namespace tripembed::cli
