#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "nn.hpp"

// Embeddings for listings without interactions: destination vectors are
// demand-weighted means of listing vectors, and a cold listing gets the
// belief-weighted sum of destination vectors.
namespace tripembed::coldstart {

using nn::Matrix;
using nn::Vector;

inline constexpr double kProportionTolerance = 1e-6;

struct DemandRow {
    std::size_t listing_index;
    std::string destination_id;
    double proportion;
};

struct DestinationDemand {
    std::vector<DemandRow> rows;

    // Proportions in [0,1] and summing to 1 per listing.
    void validate() const {
        std::map<std::size_t, double> totals;
        for (const auto& r : rows) {
            if (!(r.proportion >= 0.0 && r.proportion <= 1.0)) {
                throw DataError("demand proportion out of [0,1] for listing " + std::to_string(r.listing_index));
            }
            totals[r.listing_index] += r.proportion;
        }
        for (const auto& [listing, total] : totals) {
            if (std::abs(total - 1.0) > kProportionTolerance) {
                throw DataError("demand proportions for listing " + std::to_string(listing) + " sum to " +
                                format_double(total));
            }
        }
    }
};

struct DestinationEmbedding {
    std::map<std::string, Vector> vectors;
    std::map<std::string, std::size_t> support;  // contributing listings
};

// ν_d = Σ_l p_ld ν_l / N_d with N_d = Σ_l p_ld. Destinations with N_d = 0 are
// omitted. Normalizing per destination makes ν_d a weighted mean.
inline DestinationEmbedding destination_embeddings(const Matrix& listing_vectors, const DestinationDemand& demand) {
    demand.validate();
    std::map<std::string, Vector> sums;
    std::map<std::string, double> mass;
    std::map<std::string, std::size_t> support;
    const std::size_t d = listing_vectors.cols();
    for (const auto& r : demand.rows) {
        if (r.listing_index >= listing_vectors.rows()) {
            throw DataError("unknown listing index " + std::to_string(r.listing_index));
        }
        if (r.proportion == 0.0) continue;
        const auto v = listing_vectors.row(r.listing_index);
        auto [it, fresh] = sums.try_emplace(r.destination_id);
        if (fresh) {
            // first term seeds the sum so a point mass reproduces ν_l bit-exactly
            it->second.resize(d);
            for (std::size_t i = 0; i < d; ++i) it->second[i] = r.proportion * v[i];
        } else {
            for (std::size_t i = 0; i < d; ++i) it->second[i] += r.proportion * v[i];
        }
        mass[r.destination_id] += r.proportion;
        ++support[r.destination_id];
    }
    DestinationEmbedding result;
    for (auto& [dest, sum] : sums) {
        const double n = mass[dest];
        if (!(n > 0.0)) continue;
        for (double& x : sum) x /= n;
        result.support[dest] = support[dest];
        result.vectors.emplace(dest, std::move(sum));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Location-based demand belief.

struct GeoPoint {
    double latitude = 0.0;
    double longitude = 0.0;

    void validate() const {
        if (!(latitude >= -90.0 && latitude <= 90.0)) throw DataError("latitude out of [-90, 90]");
        if (!(longitude > -180.0 && longitude <= 180.0)) throw DataError("longitude out of (-180, 180]");
    }
};

inline constexpr double kEarthRadiusKm = 6371.0088;
inline constexpr double kSmoothingKm = 1.0;

inline double great_circle_km(const GeoPoint& a, const GeoPoint& b) {
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (b.latitude - a.latitude) * rad;
    const double dlon = (b.longitude - a.longitude) * rad;
    const double h = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(a.latitude * rad) * std::cos(b.latitude * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

using Belief = std::map<std::string, double>;

// p_jd ∝ 1 / (distance_km + 1) over the m nearest centroids; distance ties
// resolved by destination id.
inline Belief demand_belief_from_location(const GeoPoint& point, const std::map<std::string, GeoPoint>& centroids,
                                          std::size_t m_nearest = 5) {
    if (m_nearest < 1) throw ConfigError("m_nearest", "must be >= 1");
    if (centroids.empty()) throw DataError("no destination centroids");
    point.validate();
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [id, c] : centroids) ranked.emplace_back(great_circle_km(point, c), id);
    std::sort(ranked.begin(), ranked.end());
    ranked.resize(std::min(m_nearest, ranked.size()));
    double total = 0.0;
    for (const auto& [dist, id] : ranked) total += 1.0 / (dist + kSmoothingKm);
    Belief belief;
    for (const auto& [dist, id] : ranked) belief[id] = (1.0 / (dist + kSmoothingKm)) / total;
    return belief;
}

// ν_xj = Σ_d p_jd ν_d.
inline Vector extrapolate_cold(const Belief& belief, const DestinationEmbedding& destinations) {
    if (belief.empty()) throw DataError("empty belief");
    double total = 0.0;
    for (const auto& [id, p] : belief) {
        if (!destinations.vectors.count(id)) throw DataError("destination '" + id + "' has no embedding");
        total += p;
    }
    if (std::abs(total - 1.0) > kProportionTolerance) {
        throw DataError("belief proportions sum to " + format_double(total) + ", expected 1");
    }
    Vector out;
    for (const auto& [id, p] : belief) {
        const auto& v = destinations.vectors.at(id);
        if (out.empty()) {
            out.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) out[i] = p * v[i];
        } else {
            for (std::size_t i = 0; i < v.size(); ++i) out[i] += p * v[i];
        }
    }
    if (!nn::all_finite(out)) throw NumericError("extrapolate_cold: non-finite result");
    // Rounding in the sum can step one ulp outside the referenced range.
    for (std::size_t i = 0; i < out.size(); ++i) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& [id, p] : belief) {
            const double x = destinations.vectors.at(id)[i];
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        out[i] = std::clamp(out[i], lo, hi);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV files.

namespace detail {

template <class RowFn>
void read_csv(const std::string& path, std::string_view header, RowFn&& on_row) {
    auto in = open_input(path);
    std::string raw;
    std::size_t line_no = 0;
    bool seen_header = false;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = strip_cr(raw);
        if (line.empty() || line.front() == '#') continue;
        if (!seen_header) {
            if (line != header) throw ParseError(line_no, "expected header '" + std::string(header) + "'");
            seen_header = true;
            continue;
        }
        on_row(split(line, ','), line_no);
    }
    if (!seen_header) throw ParseError(line_no, "missing header in " + path);
}

inline double field_double(std::string_view text, std::size_t line_no) {
    double v;
    if (!parse_double(text, v)) throw ParseError(line_no, "invalid number '" + std::string(text) + "'");
    return v;
}

}  // namespace detail

inline constexpr std::string_view kDemandHeader = "listing_key,destination_id,proportion";
inline constexpr std::string_view kCentroidHeader = "destination_id,latitude,longitude";
inline constexpr std::string_view kColdListingHeader = "listing_key,latitude,longitude";

struct DemandEntry {
    std::string listing_key;
    std::string destination_id;
    double proportion;
};

inline std::vector<DemandEntry> load_demand_csv(const std::string& path) {
    std::vector<DemandEntry> rows;
    detail::read_csv(path, kDemandHeader, [&](const auto& f, std::size_t line) {
        if (f.size() != 3) throw ParseError(line, "expected 3 fields");
        rows.push_back({std::string(f[0]), std::string(f[1]), detail::field_double(f[2], line)});
    });
    return rows;
}

// Keys absent from `key_to_index` are an error.
inline DestinationDemand resolve_demand(const std::vector<DemandEntry>& entries,
                                        const std::unordered_map<std::string, std::size_t>& key_to_index) {
    DestinationDemand demand;
    for (const auto& e : entries) {
        auto it = key_to_index.find(e.listing_key);
        if (it == key_to_index.end()) throw DataError("demand references unknown listing '" + e.listing_key + "'");
        demand.rows.push_back({it->second, e.destination_id, e.proportion});
    }
    return demand;
}

inline std::map<std::string, GeoPoint> load_centroids_csv(const std::string& path) {
    std::map<std::string, GeoPoint> centroids;
    detail::read_csv(path, kCentroidHeader, [&](const auto& f, std::size_t line) {
        if (f.size() != 3) throw ParseError(line, "expected 3 fields");
        GeoPoint p{detail::field_double(f[1], line), detail::field_double(f[2], line)};
        p.validate();
        centroids[std::string(f[0])] = p;
    });
    return centroids;
}

inline std::vector<std::pair<std::string, GeoPoint>> load_cold_listings_csv(const std::string& path) {
    std::vector<std::pair<std::string, GeoPoint>> cold;
    detail::read_csv(path, kColdListingHeader, [&](const auto& f, std::size_t line) {
        if (f.size() != 3) throw ParseError(line, "expected 3 fields");
        GeoPoint p{detail::field_double(f[1], line), detail::field_double(f[2], line)};
        p.validate();
        cold.emplace_back(std::string(f[0]), p);
    });
    return cold;
}

// ---------------------------------------------------------------------------
// Synthetic geography for generated corpora: one destination per cluster,
// listings scattered around their cluster's centroid, demand spread over the
// nearest destinations by the same inverse-distance rule.

struct SyntheticGeography {
    std::map<std::string, GeoPoint> centroids;
    std::vector<DemandEntry> demand;
    std::vector<std::pair<std::string, GeoPoint>> cold_listings;
};

inline std::string destination_name(std::size_t cluster) { return "D" + std::to_string(cluster); }

inline SyntheticGeography synthetic_geography(const corpus::SyntheticGroundTruth& truth, std::size_t n_cold,
                                              std::size_t m_nearest, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6E0));
    SyntheticGeography geo;
    std::vector<GeoPoint> centers;
    for (std::size_t c = 0; c < truth.cluster_count; ++c) {
        GeoPoint p{uniform_real(rng, 25.0, 48.0), uniform_real(rng, -124.0, -70.0)};
        centers.push_back(p);
        geo.centroids[destination_name(c)] = p;
    }
    auto scatter = [&](const GeoPoint& c) {
        return GeoPoint{std::clamp(c.latitude + uniform_real(rng, -0.3, 0.3), -90.0, 90.0),
                        std::clamp(c.longitude + uniform_real(rng, -0.3, 0.3), -179.9, 180.0)};
    };
    for (std::size_t i = 0; i < truth.listing_keys.size(); ++i) {
        const auto where = scatter(centers[truth.cluster_of_listing[i]]);
        for (const auto& [dest, p] : demand_belief_from_location(where, geo.centroids, m_nearest)) {
            geo.demand.push_back({truth.listing_keys[i], dest, p});
        }
    }
    const std::size_t width = std::to_string(n_cold > 0 ? n_cold - 1 : 0).size();
    for (std::size_t j = 0; j < n_cold; ++j) {
        std::string id = std::to_string(j);
        id.insert(0, width - id.size(), '0');
        geo.cold_listings.emplace_back("C" + id, scatter(centers[uniform_index(rng, centers.size())]));
    }
    return geo;
}

inline void save_geography(const SyntheticGeography& geo, const std::string& centroids_path,
                           const std::string& demand_path, const std::string& cold_path) {
    {
        auto out = open_output(centroids_path);
        out << kCentroidHeader << '\n';
        for (const auto& [id, p] : geo.centroids)
            out << id << ',' << format_double(p.latitude) << ',' << format_double(p.longitude) << '\n';
    }
    {
        auto out = open_output(demand_path);
        out << kDemandHeader << '\n';
        for (const auto& e : geo.demand) out << e.listing_key << ',' << e.destination_id << ',' << format_double(e.proportion) << '\n';
    }
    {
        auto out = open_output(cold_path);
        out << kColdListingHeader << '\n';
        for (const auto& [key, p] : geo.cold_listings)
            out << key << ',' << format_double(p.latitude) << ',' << format_double(p.longitude) << '\n';
    }
}

}  // namespace tripembed::coldstart
