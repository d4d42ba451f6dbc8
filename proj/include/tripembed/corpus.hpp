#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "common.hpp"

namespace tripembed::corpus {

enum class EventKind { view, book };

inline std::string_view to_string(EventKind kind) {
    return kind == EventKind::view ? "view" : "book";
}

inline std::optional<EventKind> parse_event_kind(std::string_view text) {
    if (text == "view") return EventKind::view;
    if (text == "book") return EventKind::book;
    return std::nullopt;
}

struct Interaction {
    std::string listing_key;
    std::int64_t timestamp = 0;  // ms since epoch
    EventKind kind = EventKind::view;

    bool operator==(const Interaction&) const = default;
};

struct Session {
    std::string traveler_key;
    std::string session_id;
    std::vector<Interaction> interactions;  // stably sorted by timestamp

    bool booked() const {
        return std::any_of(interactions.begin(), interactions.end(),
                           [](const Interaction& i) { return i.kind == EventKind::book; });
    }

    bool operator==(const Session&) const = default;
};

struct SessionCorpus {
    std::vector<Session> sessions;
    std::map<std::string, std::string> metadata;

    std::size_t view_count() const {
        std::size_t n = 0;
        for (const auto& s : sessions)
            for (const auto& i : s.interactions) n += i.kind == EventKind::view;
        return n;
    }
};

// Traveler keys in order of first appearance.
inline std::vector<std::string> travelers(const SessionCorpus& corpus) {
    std::vector<std::string> keys;
    std::unordered_set<std::string> seen;
    for (const auto& s : corpus.sessions) {
        if (seen.insert(s.traveler_key).second) keys.push_back(s.traveler_key);
    }
    return keys;
}

// ---------------------------------------------------------------------------
// Synthetic clickstream with a planted cluster structure.

struct SyntheticConfig {
    std::size_t n_listings = 1000;
    std::size_t n_clusters = 10;
    std::size_t n_travelers = 10000;
    std::size_t sessions_per_traveler = 1;
    double mean_session_len = 8.0;
    double booking_base_rate = 0.15;
    double epsilon = 0.1;        // off-cluster view probability
    double booking_slope = 2.0;  // logit increase per unit of home-cluster excess
    std::uint64_t seed = 1;

    void validate() const {
        if (n_listings < 1) throw ConfigError("n_listings", "must be >= 1");
        if (n_clusters < 1) throw ConfigError("n_clusters", "must be >= 1");
        if (n_clusters > n_listings) throw ConfigError("n_clusters", "must not exceed n_listings");
        if (n_travelers < 1) throw ConfigError("n_travelers", "must be >= 1");
        if (sessions_per_traveler < 1) throw ConfigError("sessions_per_traveler", "must be >= 1");
        if (!(mean_session_len >= 1.0) || !std::isfinite(mean_session_len))
            throw ConfigError("mean_session_len", "must be >= 1");
        if (!(booking_base_rate > 0.0 && booking_base_rate < 1.0))
            throw ConfigError("booking_base_rate", "must lie in (0, 1)");
        if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon", "must lie in [0, 1]");
        if (!std::isfinite(booking_slope)) throw ConfigError("booking_slope", "must be finite");
    }
};

struct SyntheticGroundTruth {
    std::vector<std::string> listing_keys;          // generator order
    std::vector<std::size_t> cluster_of_listing;    // parallel to listing_keys
    std::size_t cluster_count = 0;
    std::map<std::string, std::size_t> home_cluster;  // traveler_key -> cluster
    std::string booking_rule;

    std::optional<std::size_t> cluster_of(const std::string& key) const {
        // keys are generated zero-padded, so lexicographic order = index order
        auto it = std::lower_bound(listing_keys.begin(), listing_keys.end(), key);
        if (it == listing_keys.end() || *it != key) return std::nullopt;
        return cluster_of_listing[static_cast<std::size_t>(it - listing_keys.begin())];
    }
};

namespace detail {

inline std::string padded(char prefix, std::size_t value, std::size_t width) {
    std::string digits = std::to_string(value);
    if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
    return prefix + digits;
}

inline std::size_t digit_count(std::size_t n) {
    return std::to_string(n > 0 ? n - 1 : 0).size();
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

// Each traveler draws a home cluster. A view comes from the home cluster with
// probability 1 - epsilon, otherwise uniformly from the listings outside it.
// A session ends in a booking with probability
//   logistic(logit(base_rate) + slope * (home_views - (1 - epsilon) * views)).
inline std::pair<SessionCorpus, SyntheticGroundTruth> generate_synthetic(const SyntheticConfig& config) {
    config.validate();
    Rng rng(config.seed);

    SyntheticGroundTruth truth;
    truth.cluster_count = config.n_clusters;
    const std::size_t key_width = detail::digit_count(config.n_listings);
    std::vector<std::vector<std::size_t>> members(config.n_clusters);
    for (std::size_t i = 0; i < config.n_listings; ++i) {
        truth.listing_keys.push_back(detail::padded('L', i, key_width));
        truth.cluster_of_listing.push_back(i % config.n_clusters);
        members[i % config.n_clusters].push_back(i);
    }

    const double base_logit = std::log(config.booking_base_rate / (1.0 - config.booking_base_rate));
    {
        std::ostringstream rule;
        rule << "p_book = logistic(" << format_double(base_logit) << " + " << format_double(config.booking_slope)
             << " * (home_cluster_views - " << format_double(1.0 - config.epsilon) << " * views))";
        truth.booking_rule = rule.str();
    }

    SessionCorpus corpus;
    corpus.metadata["source"] = "synthetic";
    corpus.metadata["seed"] = std::to_string(config.seed);
    corpus.metadata["n_listings"] = std::to_string(config.n_listings);
    corpus.metadata["n_clusters"] = std::to_string(config.n_clusters);
    corpus.metadata["n_travelers"] = std::to_string(config.n_travelers);
    corpus.metadata["mean_session_len"] = format_double(config.mean_session_len);
    corpus.metadata["booking_base_rate"] = format_double(config.booking_base_rate);
    corpus.metadata["epsilon"] = format_double(config.epsilon);
    corpus.metadata["booking_rule"] = truth.booking_rule;

    constexpr std::int64_t origin_ms = 1'700'000'000'000;
    constexpr std::int64_t week_ms = 7LL * 24 * 3600 * 1000;
    const std::size_t traveler_width = detail::digit_count(config.n_travelers);
    const std::size_t session_width = detail::digit_count(config.n_travelers * config.sessions_per_traveler);
    std::size_t session_counter = 0;

    for (std::size_t t = 0; t < config.n_travelers; ++t) {
        const std::string traveler = detail::padded('T', t, traveler_width);
        const std::size_t home = uniform_index(rng, config.n_clusters);
        truth.home_cluster[traveler] = home;

        for (std::size_t s = 0; s < config.sessions_per_traveler; ++s) {
            Session session;
            session.traveler_key = traveler;
            session.session_id = detail::padded('S', session_counter++, session_width);

            const std::size_t length = 1 + poisson(rng, config.mean_session_len - 1.0);
            std::int64_t clock = origin_ms + static_cast<std::int64_t>(uniform_index(rng, week_ms));
            std::size_t home_views = 0;
            std::optional<std::size_t> last_home;
            std::size_t last = 0;
            for (std::size_t v = 0; v < length; ++v) {
                std::size_t listing;
                const bool off = config.n_clusters > 1 && bernoulli(rng, config.epsilon);
                if (!off) {
                    const auto& pool = members[home];
                    listing = pool[uniform_index(rng, pool.size())];
                } else {
                    do {
                        listing = uniform_index(rng, config.n_listings);
                    } while (truth.cluster_of_listing[listing] == home);
                }
                if (truth.cluster_of_listing[listing] == home) {
                    ++home_views;
                    last_home = listing;
                }
                last = listing;
                session.interactions.push_back({truth.listing_keys[listing], clock, EventKind::view});
                clock += 5'000 + static_cast<std::int64_t>(uniform_index(rng, 295'001));
            }
            const double excess = static_cast<double>(home_views) - (1.0 - config.epsilon) * static_cast<double>(length);
            const double p_book = detail::logistic(base_logit + config.booking_slope * excess);
            if (bernoulli(rng, p_book)) {
                session.interactions.push_back({truth.listing_keys[last_home.value_or(last)], clock, EventKind::book});
            }
            corpus.sessions.push_back(std::move(session));
        }
    }
    return {std::move(corpus), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Session-log I/O: traveler_key \t session_id \t timestamp_ms \t listing_key \t event_kind

inline SessionCorpus parse_sessions(std::istream& in) {
    SessionCorpus corpus;
    std::map<std::pair<std::string, std::string>, std::size_t> slot;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string_view line = strip_cr(raw);
        if (line.empty()) continue;
        if (line.front() == '#') {
            constexpr std::string_view meta = "#meta\t";
            if (line.substr(0, meta.size()) == meta) {
                auto kv = split(line.substr(meta.size()), '\t');
                if (kv.size() == 2) corpus.metadata[std::string(kv[0])] = std::string(kv[1]);
            }
            continue;
        }
        const auto fields = split(line, '\t');
        if (fields.size() != 5) {
            throw ParseError(line_no, "expected 5 tab-separated fields, found " + std::to_string(fields.size()));
        }
        if (fields[0].empty() || fields[3].empty()) throw ParseError(line_no, "empty key");
        std::int64_t ts = 0;
        if (!parse_int(fields[2], ts) || ts < 0) {
            throw ParseError(line_no, "invalid timestamp '" + std::string(fields[2]) + "'");
        }
        const auto kind = parse_event_kind(fields[4]);
        if (!kind) throw ParseError(line_no, "unknown event_kind '" + std::string(fields[4]) + "'");

        auto key = std::make_pair(std::string(fields[0]), std::string(fields[1]));
        auto [it, inserted] = slot.try_emplace(key, corpus.sessions.size());
        if (inserted) {
            corpus.sessions.push_back({key.first, key.second, {}});
        }
        corpus.sessions[it->second].interactions.push_back({std::string(fields[3]), ts, *kind});
    }
    if (corpus.sessions.empty()) throw DataError("no sessions");
    for (auto& s : corpus.sessions) {
        std::stable_sort(s.interactions.begin(), s.interactions.end(),
                         [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
    }
    return corpus;
}

inline SessionCorpus load_sessions(const std::string& path) {
    auto in = open_input(path);
    return parse_sessions(in);
}

inline void write_sessions(const SessionCorpus& corpus, std::ostream& out) {
    out << "# traveler_key\tsession_id\ttimestamp_ms\tlisting_key\tevent_kind\n";
    for (const auto& [k, v] : corpus.metadata) out << "#meta\t" << k << '\t' << v << '\n';
    for (const auto& s : corpus.sessions) {
        for (const auto& i : s.interactions) {
            out << s.traveler_key << '\t' << s.session_id << '\t' << i.timestamp << '\t' << i.listing_key << '\t'
                << to_string(i.kind) << '\n';
        }
    }
}

inline void save_sessions(const SessionCorpus& corpus, const std::string& path) {
    auto out = open_output(path);
    write_sessions(corpus, out);
    if (!out) throw Error("write failed: " + path);
}

inline void save_ground_truth(const SyntheticGroundTruth& truth, const std::string& path) {
    auto out = open_output(path);
    for (std::size_t i = 0; i < truth.listing_keys.size(); ++i) {
        out << truth.listing_keys[i] << '\t' << truth.cluster_of_listing[i] << '\n';
    }
    if (!out) throw Error("write failed: " + path);
}

inline std::map<std::string, std::size_t> load_ground_truth(const std::string& path) {
    auto in = open_input(path);
    std::map<std::string, std::size_t> clusters;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = strip_cr(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto fields = split(line, '\t');
        std::size_t c = 0;
        if (fields.size() != 2 || !parse_int(fields[1], c)) throw ParseError(line_no, "expected listing_key<TAB>cluster_id");
        clusters[std::string(fields[0])] = c;
    }
    return clusters;
}

// ---------------------------------------------------------------------------
// Vocabulary.

struct Vocabulary {
    std::unordered_map<std::string, std::uint32_t> key_to_index;
    std::vector<std::string> index_to_key;
    std::vector<std::uint64_t> counts;
    std::uint64_t total_views = 0;

    std::size_t size() const noexcept { return index_to_key.size(); }

    std::optional<std::uint32_t> index_of(const std::string& key) const {
        auto it = key_to_index.find(key);
        if (it == key_to_index.end()) return std::nullopt;
        return it->second;
    }
};

// Indices are assigned by descending view count, ties broken lexicographically.
// Book events do not count and never cause pruning.
inline Vocabulary build_vocabulary(const SessionCorpus& corpus, std::uint64_t min_count = 5) {
    if (min_count < 1) throw ConfigError("min_count", "must be >= 1");
    std::unordered_map<std::string, std::uint64_t> tally;
    for (const auto& s : corpus.sessions)
        for (const auto& i : s.interactions)
            if (i.kind == EventKind::view) ++tally[i.listing_key];

    std::vector<std::pair<std::string, std::uint64_t>> kept;
    for (auto& [key, n] : tally)
        if (n >= min_count) kept.emplace_back(key, n);
    if (kept.empty()) throw ConfigError("min_count", "vocabulary empty");
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });

    Vocabulary vocab;
    for (auto& [key, n] : kept) {
        vocab.key_to_index.emplace(key, static_cast<std::uint32_t>(vocab.index_to_key.size()));
        vocab.index_to_key.push_back(key);
        vocab.counts.push_back(n);
        vocab.total_views += n;
    }
    return vocab;
}

// In-vocabulary views of a session as dense indices; OOV views are skipped.
inline std::vector<std::uint32_t> view_indices(const Session& session, const Vocabulary& vocab) {
    std::vector<std::uint32_t> out;
    out.reserve(session.interactions.size());
    for (const auto& i : session.interactions) {
        if (i.kind != EventKind::view) continue;
        if (auto idx = vocab.index_of(i.listing_key)) out.push_back(*idx);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frequency subsampling.

inline double subsample_keep_probability(std::uint64_t freq, std::uint64_t total_views, double threshold) {
    if (freq < 1 || total_views < freq || !(threshold > 0.0)) {
        throw std::invalid_argument("subsample_keep_probability: require freq >= 1, total >= freq, t > 0");
    }
    const double f_rel = static_cast<double>(freq) / static_cast<double>(total_views);
    return std::min(1.0, std::sqrt(threshold / f_rel));
}

inline std::vector<double> keep_probabilities(const Vocabulary& vocab, double threshold) {
    std::vector<double> keep(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        keep[i] = subsample_keep_probability(vocab.counts[i], vocab.total_views, threshold);
    }
    return keep;
}

// Drops in-vocabulary views at random; book events and OOV views are kept.
// Sessions left without interactions are removed.
inline SessionCorpus apply_subsampling(const SessionCorpus& corpus, const Vocabulary& vocab, double threshold,
                                       std::uint64_t seed) {
    const auto keep = keep_probabilities(vocab, threshold);
    Rng rng(seed);
    SessionCorpus out;
    out.metadata = corpus.metadata;
    out.metadata["subsample_threshold"] = format_double(threshold);
    for (const auto& s : corpus.sessions) {
        Session kept{s.traveler_key, s.session_id, {}};
        for (const auto& i : s.interactions) {
            if (i.kind == EventKind::view) {
                if (auto idx = vocab.index_of(i.listing_key)) {
                    const double p = keep[*idx];
                    if (p < 1.0 && !bernoulli(rng, p)) continue;
                }
            }
            kept.interactions.push_back(i);
        }
        if (!kept.interactions.empty()) out.sessions.push_back(std::move(kept));
    }
    return out;
}

// ---------------------------------------------------------------------------
// User-disjoint split.

struct TravelerSplit {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

inline TravelerSplit split_travelers(const SessionCorpus& corpus, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train_fraction", "must lie in (0, 1)");
    }
    auto keys = travelers(corpus);
    if (keys.size() < 2) throw DataError("split_by_user needs at least 2 distinct travelers");
    Rng rng(seed);
    shuffle(keys, rng);
    const auto n = keys.size();
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    TravelerSplit split;
    split.train.assign(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.assign(keys.begin() + static_cast<std::ptrdiff_t>(n_train), keys.end());
    return split;
}

// Order-independent tag identifying a traveler set.
inline std::string traveler_set_tag(std::vector<std::string> keys) {
    std::sort(keys.begin(), keys.end());
    Fnv1a h;
    for (const auto& k : keys) {
        h.update(k);
        h.update("\n");
    }
    return h.hex();
}

inline std::pair<SessionCorpus, SessionCorpus> split_by_user(const SessionCorpus& corpus, double train_fraction,
                                                             std::uint64_t seed) {
    const auto split = split_travelers(corpus, train_fraction, seed);
    const std::unordered_set<std::string> train_set(split.train.begin(), split.train.end());
    SessionCorpus train, test;
    train.metadata = test.metadata = corpus.metadata;
    train.metadata["split"] = "train";
    test.metadata["split"] = "test";
    train.metadata["split_tag"] = traveler_set_tag(split.train);
    test.metadata["split_tag"] = traveler_set_tag(split.test);
    for (const auto& s : corpus.sessions) {
        (train_set.count(s.traveler_key) ? train : test).sessions.push_back(s);
    }
    return {std::move(train), std::move(test)};
}

}  // namespace tripembed::corpus
