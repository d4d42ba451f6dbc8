#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include <tripembed/common.hpp>
#include <tripembed/corpus.hpp>
#include <tripembed/eval.hpp>
#include <tripembed/skipgram.hpp>
#include <tripembed/traveler.hpp>

namespace tripembed::cli {

namespace fs = std::filesystem;

struct CorpusSection {
    corpus::SyntheticConfig synthetic;
    std::uint64_t min_count = 5;
    double train_fraction = 0.7;
    std::optional<std::string> sessions_path;       // default <out>/sessions.tsv
    std::optional<std::string> eval_sessions_path;  // set for the dual-corpus flow
};

struct ColdstartSection {
    std::size_t m_nearest = 5;
    std::size_t n_cold_listings = 10;
    std::optional<std::string> demand_path;
    std::optional<std::string> centroids_path;
    std::optional<std::string> cold_listings_path;
};

struct EvalSection {
    std::string settings = "random,average,dan,lstm_attention";
    eval::DownstreamConfig downstream;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    std::string out = ".";
    CorpusSection corpus;
    skipgram::SkipgramConfig skipgram;
    ColdstartSection coldstart;
    traveler::TravelerConfig traveler;
    EvalSection eval;

    std::string out_path(const std::string& name) const { return (fs::path(out) / name).string(); }
    std::string sessions_path() const { return corpus.sessions_path.value_or(out_path("sessions.tsv")); }
    std::string demand_path() const { return coldstart.demand_path.value_or(out_path("demand.csv")); }
    std::string centroids_path() const { return coldstart.centroids_path.value_or(out_path("destinations.csv")); }
    std::string cold_listings_path() const {
        return coldstart.cold_listings_path.value_or(out_path("cold_listings.csv"));
    }

    // Per-stage seeds derived from the global seed.
    std::uint64_t split_seed() const { return mix_seed(seed, 1); }
    std::uint64_t skipgram_seed() const { return mix_seed(seed, 2); }
    std::uint64_t random_baseline_seed() const { return mix_seed(seed, 3); }
    std::uint64_t traveler_seed() const { return mix_seed(seed, 4); }
    std::uint64_t downstream_seed() const { return mix_seed(seed, 5); }
};

namespace detail {

using Json = nlohmann::json;

class Section {
public:
    Section(const Json& j, std::string name) : json_(j), name_(std::move(name)) {
        if (!j.is_object()) throw ConfigError(name_, "must be a JSON object");
    }

    template <class T>
    void read(const char* key, T& target) {
        seen_.insert(key);
        if (!json_.contains(key) || json_.at(key).is_null()) return;
        try {
            target = json_.at(key).get<T>();
        } catch (const Json::exception&) {
            throw ConfigError(field(key), "wrong type");
        }
    }

    template <class T>
    void read(const char* key, std::optional<T>& target) {
        seen_.insert(key);
        if (!json_.contains(key) || json_.at(key).is_null()) return;
        try {
            target = json_.at(key).get<T>();
        } catch (const Json::exception&) {
            throw ConfigError(field(key), "wrong type");
        }
    }

    const Json& child(const char* key) {
        static const Json empty = Json::object();
        seen_.insert(key);
        return json_.contains(key) ? json_.at(key) : empty;
    }

    void reject_unknown() const {
        for (const auto& [key, value] : json_.items()) {
            if (!seen_.count(key)) throw ConfigError(field(key.c_str()), "unknown key");
        }
    }

private:
    std::string field(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

    const Json& json_;
    std::string name_;
    std::set<std::string> seen_;
};

// Reruns a library validate() so that the reported field carries its section name.
template <class F>
void validate_section(const std::string& section, F&& validate) {
    try {
        validate();
    } catch (const ConfigError& e) {
        if (e.field().empty()) throw ConfigError(section, e.what());
        const std::string what = e.what();
        throw ConfigError(section + "." + e.field(), what.substr(e.field().size() + 2));
    }
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& root) {
    PipelineConfig cfg;
    detail::Section top(root, "");
    top.read("seed", cfg.seed);
    top.read("out", cfg.out);
    auto section = [&](const char* name) -> const nlohmann::json& { return top.child(name); };
    {
        detail::Section s(section("corpus"), "corpus");
        auto& c = cfg.corpus;
        s.read("n_listings", c.synthetic.n_listings);
        s.read("n_clusters", c.synthetic.n_clusters);
        s.read("n_travelers", c.synthetic.n_travelers);
        s.read("sessions_per_traveler", c.synthetic.sessions_per_traveler);
        s.read("mean_session_len", c.synthetic.mean_session_len);
        s.read("booking_base_rate", c.synthetic.booking_base_rate);
        s.read("epsilon", c.synthetic.epsilon);
        s.read("booking_slope", c.synthetic.booking_slope);
        s.read("min_count", c.min_count);
        s.read("train_fraction", c.train_fraction);
        s.read("sessions_path", c.sessions_path);
        s.read("eval_sessions_path", c.eval_sessions_path);
        s.reject_unknown();
    }
    {
        detail::Section s(section("skipgram"), "skipgram");
        auto& k = cfg.skipgram;
        s.read("window", k.window);
        s.read("negatives", k.negatives);
        s.read("dim", k.dim);
        s.read("epochs", k.epochs);
        s.read("learning_rate_initial", k.learning_rate_initial);
        s.read("learning_rate_final", k.learning_rate_final);
        s.read("subsample_threshold", k.subsample_threshold);
        s.read("smoothed_negatives", k.smoothed_negatives);
        s.reject_unknown();
    }
    {
        detail::Section s(section("coldstart"), "coldstart");
        auto& c = cfg.coldstart;
        s.read("m_nearest", c.m_nearest);
        s.read("n_cold_listings", c.n_cold_listings);
        s.read("demand_path", c.demand_path);
        s.read("centroids_path", c.centroids_path);
        s.read("cold_listings_path", c.cold_listings_path);
        s.reject_unknown();
    }
    {
        detail::Section s(section("traveler"), "traveler");
        auto& t = cfg.traveler;
        s.read("dan_expand", t.dan_expand);
        s.read("dan_hidden", t.dan_hidden);
        s.read("dan_embedding", t.dan_embedding);
        s.read("lstm_hidden", t.lstm_hidden);
        s.read("epochs", t.epochs);
        s.read("batch_size", t.batch_size);
        s.read("positive_weight", t.positive_weight);
        s.read("learning_rate", t.learning_rate);
        s.read("max_sequence", t.max_sequence);
        s.reject_unknown();
    }
    {
        detail::Section s(section("eval"), "eval");
        auto& e = cfg.eval;
        s.read("settings", e.settings);
        s.read("epochs", e.downstream.epochs);
        s.read("batch_size", e.downstream.batch_size);
        s.read("learning_rate", e.downstream.learning_rate);
        s.read("positive_weight", e.downstream.positive_weight);
        s.read("threshold", e.downstream.threshold);
        s.reject_unknown();
    }
    top.reject_unknown();

    detail::validate_section("corpus", [&] { cfg.corpus.synthetic.validate(); });
    detail::validate_section("skipgram", [&] { cfg.skipgram.validate(); });
    detail::validate_section("traveler", [&] { cfg.traveler.validate(); });
    detail::validate_section("eval", [&] { cfg.eval.downstream.validate(); });
    if (cfg.corpus.min_count < 1) throw ConfigError("corpus.min_count", "must be >= 1");
    if (!(cfg.corpus.train_fraction > 0.0 && cfg.corpus.train_fraction < 1.0))
        throw ConfigError("corpus.train_fraction", "must lie in (0, 1)");
    if (cfg.coldstart.m_nearest < 1) throw ConfigError("coldstart.m_nearest", "must be >= 1");
    return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(root);
}

}  // namespace tripembed::cli
