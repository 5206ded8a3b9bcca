#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "careflow/ingest.hpp"
#include "careflow/types.hpp"

namespace careflow::netgeo {

inline constexpr double kDefaultRadiusM = 400.0;

// Meters per degree at the WGS84 equator: meridional (latitude) and
// equatorial (longitude). Longitude degrees shrink with cos(latitude).
inline constexpr double kMetersPerDegLat = 110574.0;
inline constexpr double kMetersPerDegLon = 111320.0;
inline constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
};

// Equirectangular approximation: planar distance with per-axis degree scales
// and longitude shrunk by cos of the mean latitude. Symmetric, zero iff the
// points coincide; adequate well past the 400 m matching radius.
inline double distance_m(const GeoPoint& a, const GeoPoint& b) {
    const double mean_lat_rad = 0.5 * (a.lat + b.lat) * kDegToRad;
    const double dx = (b.lon - a.lon) * std::cos(mean_lat_rad) * kMetersPerDegLon;
    const double dy = (b.lat - a.lat) * kMetersPerDegLat;
    return std::sqrt(dx * dx + dy * dy);
}

// ---------------------------------------------------------------------------
// Route-direction patterns
// ---------------------------------------------------------------------------

struct RouteDirectionPattern {
    std::string route_id;
    int direction_id = 0;
    std::vector<std::string> stop_ids;  // unique, ordered by first appearance

    bool operator==(const RouteDirectionPattern&) const = default;
};

// One pattern per (route, direction) present in trips. The stop list is the
// union of that pair's trip stop sequences, ordered by first appearance with
// trips visited in trip_id order.
inline std::vector<RouteDirectionPattern> build_patterns(const ingest::GtfsSnapshot& snap) {
    std::map<std::string, std::vector<const ingest::GtfsStopTime*>> stop_times_by_trip;
    for (const auto& st : snap.stop_times) stop_times_by_trip[st.trip_id].push_back(&st);
    // stop_times are sorted by (trip_id, stop_sequence) already; grouping keeps order.

    std::map<std::pair<std::string, int>, std::vector<std::string>> trips_by_pattern;
    for (const auto& t : snap.trips) {
        trips_by_pattern[{t.route_id, t.direction_id}].push_back(t.trip_id);
    }

    std::vector<RouteDirectionPattern> patterns;
    patterns.reserve(trips_by_pattern.size());
    for (auto& [key, trip_ids] : trips_by_pattern) {
        std::sort(trip_ids.begin(), trip_ids.end());
        RouteDirectionPattern pattern;
        pattern.route_id = key.first;
        pattern.direction_id = key.second;
        std::unordered_set<std::string> seen;
        for (const auto& trip_id : trip_ids) {
            auto it = stop_times_by_trip.find(trip_id);
            if (it == stop_times_by_trip.end()) continue;
            for (const ingest::GtfsStopTime* st : it->second) {
                if (seen.insert(st->stop_id).second) pattern.stop_ids.push_back(st->stop_id);
            }
        }
        if (!pattern.stop_ids.empty()) patterns.push_back(std::move(pattern));
    }
    return patterns;
}

// ---------------------------------------------------------------------------
// Nearest serving stop per (POI, route-direction)
// ---------------------------------------------------------------------------

struct PoiStopEntry {
    std::string poi_id;
    std::string route_id;
    int direction_id = 0;
    std::string stop_id;
    double distance_m = 0.0;

    auto operator<=>(const PoiStopEntry&) const = default;
};

struct PoiStopSet {
    PoiClass poi_class = PoiClass::Daycare;
    std::set<PoiStopEntry> entries;

    std::set<std::string> stop_ids() const {
        std::set<std::string> ids;
        for (const auto& e : entries) ids.insert(e.stop_id);
        return ids;
    }

    // Per distinct stop, the smallest matched distance across entries.
    std::map<std::string, double> min_distance_by_stop() const {
        std::map<std::string, double> out;
        for (const auto& e : entries) {
            auto [it, inserted] = out.emplace(e.stop_id, e.distance_m);
            if (!inserted && e.distance_m < it->second) it->second = e.distance_m;
        }
        return out;
    }
};

using PoiStopSets = std::array<PoiStopSet, kPoiClassCount>;

inline const PoiStopSet& for_class(const PoiStopSets& sets, PoiClass c) {
    return sets[static_cast<std::size_t>(c)];
}

namespace detail {

struct PatternGeometry {
    const RouteDirectionPattern* pattern;
    std::vector<GeoPoint> points;
    std::vector<const std::string*> stop_ids;
};

inline std::vector<PatternGeometry> resolve_patterns(const std::vector<RouteDirectionPattern>& patterns,
                                                     const ingest::GtfsSnapshot& snap) {
    std::vector<PatternGeometry> out;
    out.reserve(patterns.size());
    for (const auto& p : patterns) {
        PatternGeometry g;
        g.pattern = &p;
        g.points.reserve(p.stop_ids.size());
        g.stop_ids.reserve(p.stop_ids.size());
        for (const auto& stop_id : p.stop_ids) {
            const Stop* s = snap.find_stop(stop_id);
            if (!s) {
                throw Error(ErrorKind::DanglingReference, "pattern references unknown stop '" + stop_id + "'");
            }
            g.points.push_back({s->lat, s->lon});
            g.stop_ids.push_back(&stop_id);
        }
        out.push_back(std::move(g));
    }
    return out;
}

inline void match_poi(const Poi& poi, const std::vector<PatternGeometry>& geoms, double radius_m,
                      PoiStopSets& sets) {
    const GeoPoint p{poi.lat, poi.lon};
    for (const auto& g : geoms) {
        double best_d = std::numeric_limits<double>::infinity();
        const std::string* best_stop = nullptr;
        for (std::size_t i = 0; i < g.points.size(); ++i) {
            const double d = distance_m(p, g.points[i]);
            // Equal distances break toward the lexicographically smaller stop_id.
            if (d < best_d || (d == best_d && best_stop && *g.stop_ids[i] < *best_stop)) {
                best_d = d;
                best_stop = g.stop_ids[i];
            }
        }
        if (best_stop && best_d <= radius_m) {
            sets[static_cast<std::size_t>(poi.poi_class)].entries.insert(
                PoiStopEntry{poi.poi_id, g.pattern->route_id, g.pattern->direction_id, *best_stop, best_d});
        }
    }
}

}  // namespace detail

// For each POI and each route-direction, the stop on that pattern nearest to
// the POI when within radius_m. Set semantics: output does not depend on the
// iteration order of POIs or stops. POIs may be partitioned across threads;
// the merge is a set union, so the parallel result is identical.
inline PoiStopSets nearest_stops(const std::vector<Poi>& pois,
                                 const std::vector<RouteDirectionPattern>& patterns,
                                 const ingest::GtfsSnapshot& snap, double radius_m = kDefaultRadiusM,
                                 unsigned threads = 1) {
    if (radius_m <= 0.0) throw Error(ErrorKind::InvalidConfig, "radius_m must be positive");
    PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);

    const auto geoms = detail::resolve_patterns(patterns, snap);

    if (threads <= 1 || pois.size() < 64) {
        for (const auto& poi : pois) detail::match_poi(poi, geoms, radius_m, sets);
        return sets;
    }

    const std::size_t chunk = (pois.size() + threads - 1) / threads;
    std::vector<std::future<PoiStopSets>> futures;
    for (std::size_t begin = 0; begin < pois.size(); begin += chunk) {
        const std::size_t end = std::min(begin + chunk, pois.size());
        futures.push_back(std::async(std::launch::async, [&, begin, end] {
            PoiStopSets local;
            for (int c = 0; c < kPoiClassCount; ++c) local[c].poi_class = static_cast<PoiClass>(c);
            for (std::size_t i = begin; i < end; ++i) detail::match_poi(pois[i], geoms, radius_m, local);
            return local;
        }));
    }
    for (auto& f : futures) {
        PoiStopSets local = f.get();
        for (int c = 0; c < kPoiClassCount; ++c) {
            sets[c].entries.insert(local[c].entries.begin(), local[c].entries.end());
        }
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Buffer sensitivity: distinct stops of the 400 m set that survive tighter
// radii, judged on each stop's smallest stored distance.
// ---------------------------------------------------------------------------

struct BufferSensitivityRow {
    PoiClass poi_class = PoiClass::Daycare;
    std::size_t stops = 0;
    double pct_within_200 = 0.0;
    double pct_within_100 = 0.0;
    double pct_within_50 = 0.0;
};

inline std::vector<BufferSensitivityRow> buffer_sensitivity(const PoiStopSets& sets) {
    std::vector<BufferSensitivityRow> rows;
    for (int c = 0; c < kPoiClassCount; ++c) {
        const auto dists = sets[c].min_distance_by_stop();
        BufferSensitivityRow row;
        row.poi_class = static_cast<PoiClass>(c);
        row.stops = dists.size();
        if (!dists.empty()) {
            std::size_t in200 = 0, in100 = 0, in50 = 0;
            for (const auto& [stop, d] : dists) {
                if (d <= 200.0) ++in200;
                if (d <= 100.0) ++in100;
                if (d <= 50.0) ++in50;
            }
            const double n = static_cast<double>(dists.size());
            row.pct_within_200 = 100.0 * static_cast<double>(in200) / n;
            row.pct_within_100 = 100.0 * static_cast<double>(in100) / n;
            row.pct_within_50 = 100.0 * static_cast<double>(in50) / n;
        }
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Mean POI-to-nearest-stop distance, per class and pooled, over the
// per-(poi, pattern) entries.
// ---------------------------------------------------------------------------

struct MeanDistanceReport {
    std::array<std::optional<double>, kPoiClassCount> per_class;
    std::optional<double> overall;
};

inline MeanDistanceReport mean_nearest_distance(const PoiStopSets& sets) {
    MeanDistanceReport report;
    double total = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < kPoiClassCount; ++c) {
        double class_total = 0.0;
        std::size_t class_count = 0;
        for (const auto& e : sets[c].entries) {
            class_total += e.distance_m;
            ++class_count;
        }
        if (class_count > 0) {
            report.per_class[c] = class_total / static_cast<double>(class_count);
            total += class_total;
            count += class_count;
        }
    }
    if (count > 0) report.overall = total / static_cast<double>(count);
    return report;
}

// ---------------------------------------------------------------------------
// poi_stops.csv: class,poi_id,route_id,direction_id,stop_id,distance_m
// ---------------------------------------------------------------------------

inline void save_poi_stops(const PoiStopSets& sets, const std::string& path) {
    csv::Writer w(path);
    w.raw_line("class,poi_id,route_id,direction_id,stop_id,distance_m");
    for (int c = 0; c < kPoiClassCount; ++c) {
        for (const auto& e : sets[c].entries) {
            char dist[32];
            std::snprintf(dist, sizeof dist, "%.6f", e.distance_m);
            w.row({to_string(static_cast<PoiClass>(c)), e.poi_id, e.route_id,
                   std::to_string(e.direction_id), e.stop_id, dist});
        }
    }
}

inline PoiStopSets load_poi_stops(const std::string& path) {
    csv::HeaderReader r(path);
    const auto c_class = r.column("class");
    const auto c_poi = r.column("poi_id");
    const auto c_route = r.column("route_id");
    const auto c_dir = r.column("direction_id");
    const auto c_stop = r.column("stop_id");
    const auto c_dist = r.column("distance_m");
    PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);
    std::vector<std::string> row;
    while (r.next(row)) {
        auto cls = parse_poi_class(r.field(row, c_class));
        if (!cls) {
            throw Error(ErrorKind::UnknownClass, "unknown POI class '" + std::string(r.field(row, c_class)) + "'",
                        r.base().path(), r.base().line_no());
        }
        PoiStopEntry e;
        e.poi_id = r.field(row, c_poi);
        e.route_id = r.field(row, c_route);
        auto dir = csv::parse_int(r.field(row, c_dir));
        if (!dir || (*dir != 0 && *dir != 1)) r.fail("direction_id must be 0 or 1");
        e.direction_id = static_cast<int>(*dir);
        e.stop_id = r.field(row, c_stop);
        auto dist = csv::parse_double(r.field(row, c_dist));
        if (!dist || *dist < 0) r.fail("bad distance_m");
        e.distance_m = *dist;
        sets[static_cast<std::size_t>(*cls)].entries.insert(std::move(e));
    }
    return sets;
}

}  // namespace careflow::netgeo
