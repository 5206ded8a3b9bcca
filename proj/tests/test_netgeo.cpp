#include <catch2/catch.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "careflow/netgeo.hpp"

using namespace careflow;
using netgeo::GeoPoint;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Great-circle distance by the haversine formula, radius in meters.
double haversine_m(const GeoPoint& a, const GeoPoint& b, double radius) {
    auto rad = [](double deg) { return deg * kPi / 180.0; };
    const double dphi = rad(b.lat - a.lat);
    const double dlam = rad(b.lon - a.lon);
    const double s = std::sin(dphi / 2) * std::sin(dphi / 2) +
                     std::cos(rad(a.lat)) * std::cos(rad(b.lat)) * std::sin(dlam / 2) *
                         std::sin(dlam / 2);
    return 2.0 * radius * std::asin(std::min(1.0, std::sqrt(s)));
}

// Haversine on the projection's auxiliary sphere. The production constants
// give latitude and longitude degrees different lengths (the ellipsoid's two
// equatorial curvatures), which no single-radius sphere reproduces; rescaling
// latitude by their ratio absorbs the flattening, so this trig-path oracle
// isolates the flat-projection error itself.
double auxiliary_haversine_m(const GeoPoint& a, const GeoPoint& b) {
    const double scale = netgeo::kMetersPerDegLat / netgeo::kMetersPerDegLon;
    const double radius = netgeo::kMetersPerDegLon * 180.0 / kPi;
    return haversine_m({a.lat * scale, a.lon}, {b.lat * scale, b.lon}, radius);
}

GeoPoint offset_by(const GeoPoint& origin, double meters, double bearing_rad) {
    GeoPoint p;
    p.lat = origin.lat + meters * std::sin(bearing_rad) / netgeo::kMetersPerDegLat;
    p.lon = origin.lon + meters * std::cos(bearing_rad) /
                             (netgeo::kMetersPerDegLon * std::cos(origin.lat * kPi / 180.0));
    return p;
}

// Exhaustive all-pairs scan: per (poi, pattern), every in-radius stop is
// materialized and the (distance, stop_id) minimum taken. Independent of the
// streaming argmin in nearest_stops.
netgeo::PoiStopSets brute_force_nearest(const std::vector<Poi>& pois,
                                        const std::vector<netgeo::RouteDirectionPattern>& patterns,
                                        const ingest::GtfsSnapshot& snap, double radius) {
    netgeo::PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);
    for (const auto& poi : pois) {
        for (const auto& pattern : patterns) {
            std::vector<std::pair<double, std::string>> candidates;
            for (const auto& stop_id : pattern.stop_ids) {
                const Stop* s = snap.find_stop(stop_id);
                const double d = netgeo::distance_m({poi.lat, poi.lon}, {s->lat, s->lon});
                if (d <= radius) candidates.emplace_back(d, stop_id);
            }
            if (candidates.empty()) continue;
            std::sort(candidates.begin(), candidates.end());
            sets[static_cast<std::size_t>(poi.poi_class)].entries.insert(
                {poi.poi_id, pattern.route_id, pattern.direction_id, candidates.front().second,
                 candidates.front().first});
        }
    }
    return sets;
}

struct RandomInstance {
    ingest::GtfsSnapshot snap;
    std::vector<netgeo::RouteDirectionPattern> patterns;
    std::vector<Poi> pois;
};

RandomInstance random_instance(std::mt19937& rng) {
    RandomInstance inst;
    const int n_stops = 5 + static_cast<int>(rng() % 46);    // <= 50
    const int n_patterns = 1 + static_cast<int>(rng() % 10); // <= 10
    const int n_pois = 1 + static_cast<int>(rng() % 20);     // <= 20
    std::uniform_real_distribution<double> lat(38.88, 38.93);
    std::uniform_real_distribution<double> lon(-77.06, -77.00);
    for (int i = 0; i < n_stops; ++i) {
        Stop s;
        s.stop_id = "S" + std::to_string(i);
        s.lat = lat(rng);
        s.lon = lon(rng);
        inst.snap.stop_index.emplace(s.stop_id, inst.snap.stops.size());
        inst.snap.stops.push_back(std::move(s));
    }
    for (int p = 0; p < n_patterns; ++p) {
        netgeo::RouteDirectionPattern pattern;
        pattern.route_id = "R" + std::to_string(p / 2);
        pattern.direction_id = p % 2;
        std::vector<int> order(n_stops);
        for (int i = 0; i < n_stops; ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        const int len = 1 + static_cast<int>(rng() % n_stops);
        for (int i = 0; i < len; ++i) {
            pattern.stop_ids.push_back(inst.snap.stops[order[i]].stop_id);
        }
        inst.patterns.push_back(std::move(pattern));
    }
    for (int i = 0; i < n_pois; ++i) {
        Poi poi;
        poi.poi_id = "P" + std::to_string(i);
        poi.poi_class = static_cast<PoiClass>(rng() % 3);
        poi.lat = lat(rng);
        poi.lon = lon(rng);
        inst.pois.push_back(std::move(poi));
    }
    return inst;
}

}  // namespace

TEST_CASE("distance: identical points, pinned delta, symmetry") {
    GeoPoint a{38.9, -77.03};
    REQUIRE(netgeo::distance_m(a, a) == 0.0);

    GeoPoint b{38.901, -77.03};  // +0.001 deg latitude
    REQUIRE(netgeo::distance_m(a, b) == Approx(110.574).epsilon(1e-9));
    REQUIRE(netgeo::distance_m(a, b) == netgeo::distance_m(b, a));
}

TEST_CASE("distance tracks the auxiliary-sphere haversine within 0.1 percent") {
    std::mt19937 rng(424242);
    std::uniform_real_distribution<double> lat(-2.0, 2.0);
    std::uniform_real_distribution<double> lon(-10.0, 10.0);
    std::uniform_real_distribution<double> dist(5.0, 2000.0);
    std::uniform_real_distribution<double> bearing(0.0, 2.0 * kPi);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        GeoPoint a{lat(rng), lon(rng)};
        GeoPoint b = offset_by(a, dist(rng), bearing(rng));
        const double ours = netgeo::distance_m(a, b);
        const double oracle = auxiliary_haversine_m(a, b);
        worst = std::max(worst, std::fabs(ours - oracle) / oracle);
    }
    REQUIRE(worst < 0.001);
}

TEST_CASE("distance stays within the earth-model gap of a plain-sphere haversine") {
    // The per-axis constants differ from any single spherical radius by up to
    // ~0.6 percent; the projection must not add to that beyond rounding.
    std::mt19937 rng(5150);
    std::uniform_real_distribution<double> lat(-45.0, 45.0);
    std::uniform_real_distribution<double> lon(-100.0, 100.0);
    std::uniform_real_distribution<double> dist(5.0, 2000.0);
    std::uniform_real_distribution<double> bearing(0.0, 2.0 * kPi);
    constexpr double kMeanSphereRadius = 6371008.8;
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        GeoPoint a{lat(rng), lon(rng)};
        GeoPoint b = offset_by(a, dist(rng), bearing(rng));
        const double ours = netgeo::distance_m(a, b);
        const double oracle = haversine_m(a, b, kMeanSphereRadius);
        worst = std::max(worst, std::fabs(ours - oracle) / oracle);
    }
    REQUIRE(worst < 0.0075);
}

TEST_CASE("build_patterns: one route, both directions") {
    ingest::GtfsSnapshot snap;
    for (const char* id : {"A", "B", "C", "D"}) {
        Stop s;
        s.stop_id = id;
        snap.stop_index.emplace(s.stop_id, snap.stops.size());
        snap.stops.push_back(std::move(s));
    }
    snap.routes = {"R1"};
    snap.trips = {{"R1", "T1", 0}, {"R1", "T2", 1}};
    snap.stop_times = {{"T1", 1, "A"}, {"T1", 2, "B"}, {"T2", 1, "B"}, {"T2", 2, "A"}};
    auto patterns = netgeo::build_patterns(snap);
    REQUIRE(patterns.size() == 2);
    REQUIRE(patterns[0].direction_id == 0);
    REQUIRE(patterns[0].stop_ids == std::vector<std::string>{"A", "B"});
    REQUIRE(patterns[1].stop_ids == std::vector<std::string>{"B", "A"});
}

TEST_CASE("build_patterns unions trips by first appearance in trip_id order") {
    ingest::GtfsSnapshot snap;
    for (const char* id : {"A", "B", "C", "D"}) {
        Stop s;
        s.stop_id = id;
        snap.stop_index.emplace(s.stop_id, snap.stops.size());
        snap.stops.push_back(std::move(s));
    }
    snap.routes = {"R1"};
    // trips deliberately out of order: T2 first in the file
    snap.trips = {{"R1", "T2", 0}, {"R1", "T1", 0}};
    snap.stop_times = {{"T1", 1, "A"}, {"T1", 2, "B"}, {"T1", 3, "C"},
                       {"T2", 1, "A"}, {"T2", 2, "B"}, {"T2", 3, "D"}};
    std::sort(snap.stop_times.begin(), snap.stop_times.end(),
              [](const auto& a, const auto& b) {
                  return std::tie(a.trip_id, a.stop_sequence) < std::tie(b.trip_id, b.stop_sequence);
              });
    auto patterns = netgeo::build_patterns(snap);
    REQUIRE(patterns.size() == 1);
    REQUIRE(patterns[0].stop_ids == std::vector<std::string>{"A", "B", "C", "D"});
}

TEST_CASE("nearest_stops keeps only the closest in-radius stop per pattern") {
    ingest::GtfsSnapshot snap;
    const GeoPoint poi_at{38.9, -77.03};
    const double dists[] = {50.0, 120.0, 390.0};
    for (int i = 0; i < 3; ++i) {
        Stop s;
        s.stop_id = "S" + std::to_string(i);
        auto p = offset_by(poi_at, dists[i], 0.4 * i);
        s.lat = p.lat;
        s.lon = p.lon;
        snap.stop_index.emplace(s.stop_id, snap.stops.size());
        snap.stops.push_back(std::move(s));
    }
    netgeo::RouteDirectionPattern pattern{"R1", 0, {"S0", "S1", "S2"}};
    Poi poi{"P1", PoiClass::Daycare, poi_at.lat, poi_at.lon};

    auto sets = netgeo::nearest_stops({poi}, {pattern}, snap);
    const auto& entries = sets[0].entries;
    REQUIRE(entries.size() == 1);
    REQUIRE(entries.begin()->stop_id == "S0");
    REQUIRE(entries.begin()->distance_m == Approx(50.0).margin(0.1));

    // POI out of range of every stop: no entries anywhere.
    Poi far{"P2", PoiClass::Daycare, poi_at.lat + 0.1, poi_at.lon};
    auto sets_far = netgeo::nearest_stops({far}, {pattern}, snap);
    for (int c = 0; c < kPoiClassCount; ++c) REQUIRE(sets_far[c].entries.empty());
}

TEST_CASE("equal distances break toward the smaller stop_id") {
    ingest::GtfsSnapshot snap;
    const GeoPoint center{38.9, -77.03};
    for (int i = 0; i < 2; ++i) {
        Stop s;
        s.stop_id = i == 0 ? "S9" : "S1";  // S1 is lexicographically smaller
        s.lat = center.lat;
        s.lon = center.lon + (i == 0 ? 1.0 : -1.0) * 0.001;
        snap.stop_index.emplace(s.stop_id, snap.stops.size());
        snap.stops.push_back(std::move(s));
    }
    netgeo::RouteDirectionPattern pattern{"R1", 0, {"S9", "S1"}};
    Poi poi{"P1", PoiClass::School, center.lat, center.lon};
    auto sets = netgeo::nearest_stops({poi}, {pattern}, snap);
    const auto& entries = sets[1].entries;
    REQUIRE(entries.size() == 1);
    REQUIRE(entries.begin()->stop_id == "S1");
}

TEST_CASE("nearest_stops matches brute force on random instances") {
    std::mt19937 rng(1337);
    for (int trial = 0; trial < 60; ++trial) {
        auto inst = random_instance(rng);
        auto fast = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap);
        auto oracle = brute_force_nearest(inst.pois, inst.patterns, inst.snap, 400.0);
        for (int c = 0; c < kPoiClassCount; ++c) {
            REQUIRE(fast[c].entries == oracle[c].entries);
        }
    }
}

TEST_CASE("output is invariant under input permutation") {
    std::mt19937 rng(2024);
    auto inst = random_instance(rng);
    auto baseline = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap);

    auto shuffled = inst;
    std::shuffle(shuffled.pois.begin(), shuffled.pois.end(), rng);
    for (auto& p : shuffled.patterns) {
        // permuting a pattern's stop list must not change the chosen stop
        std::shuffle(p.stop_ids.begin(), p.stop_ids.end(), rng);
    }
    auto permuted = netgeo::nearest_stops(shuffled.pois, shuffled.patterns, shuffled.snap);
    for (int c = 0; c < kPoiClassCount; ++c) {
        REQUIRE(baseline[c].entries == permuted[c].entries);
    }
}

TEST_CASE("entries are monotone in the radius and distances recompute exactly") {
    std::mt19937 rng(777);
    auto inst = random_instance(rng);
    const double radii[] = {50.0, 100.0, 200.0, 400.0};
    netgeo::PoiStopSets previous;
    for (int r = 0; r < 4; ++r) {
        auto sets = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap, radii[r]);
        for (int c = 0; c < kPoiClassCount; ++c) {
            for (const auto& e : sets[c].entries) {
                REQUIRE(e.distance_m <= radii[r]);
                const Stop* stop = inst.snap.find_stop(e.stop_id);
                const Poi* poi = nullptr;
                for (const auto& p : inst.pois) {
                    if (p.poi_id == e.poi_id) poi = &p;
                }
                REQUIRE(netgeo::distance_m({poi->lat, poi->lon}, {stop->lat, stop->lon}) ==
                        e.distance_m);
            }
            if (r > 0) {
                for (const auto& e : previous[c].entries) {
                    REQUIRE(sets[c].entries.count(e) == 1);
                }
            }
        }
        previous = sets;
    }
}

TEST_CASE("threaded matching merges to the single-threaded result") {
    std::mt19937 rng(31415);
    RandomInstance inst = random_instance(rng);
    // Enough POIs to cross the parallel threshold.
    while (inst.pois.size() < 80) {
        Poi p = inst.pois[rng() % inst.pois.size()];
        p.poi_id = "PX" + std::to_string(inst.pois.size());
        inst.pois.push_back(std::move(p));
    }
    auto serial = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap, 400.0, 1);
    auto parallel = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap, 400.0, 4);
    for (int c = 0; c < kPoiClassCount; ++c) REQUIRE(serial[c].entries == parallel[c].entries);
}

TEST_CASE("buffer sensitivity thresholds stored distances") {
    netgeo::PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);
    // All entries at 10 m: every column 100%.
    sets[0].entries = {{"P1", "R1", 0, "S1", 10.0}, {"P2", "R1", 0, "S2", 10.0}};
    auto rows = netgeo::buffer_sensitivity(sets);
    REQUIRE(rows[0].stops == 2);
    REQUIRE(rows[0].pct_within_200 == 100.0);
    REQUIRE(rows[0].pct_within_100 == 100.0);
    REQUIRE(rows[0].pct_within_50 == 100.0);

    // Planted distances: 4 stops at 25/75/150/350 -> 75%, 50%, 25%.
    sets[1].entries = {{"P1", "R1", 0, "A", 25.0},
                       {"P2", "R1", 0, "B", 75.0},
                       {"P3", "R1", 0, "C", 150.0},
                       {"P4", "R1", 0, "D", 350.0}};
    rows = netgeo::buffer_sensitivity(sets);
    REQUIRE(rows[1].stops == 4);
    REQUIRE(rows[1].pct_within_200 == 75.0);
    REQUIRE(rows[1].pct_within_100 == 50.0);
    REQUIRE(rows[1].pct_within_50 == 25.0);

    // A stop matched through two entries counts once, at its closest distance.
    sets[2].entries = {{"P1", "R1", 0, "X", 40.0}, {"P2", "R2", 1, "X", 260.0}};
    rows = netgeo::buffer_sensitivity(sets);
    REQUIRE(rows[2].stops == 1);
    REQUIRE(rows[2].pct_within_50 == 100.0);
}

TEST_CASE("mean nearest distance per class and pooled") {
    netgeo::PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);
    sets[0].entries = {{"P1", "R1", 0, "S1", 74.0}};
    auto report = netgeo::mean_nearest_distance(sets);
    REQUIRE(report.per_class[0] == 74.0);
    REQUIRE_FALSE(report.per_class[1].has_value());
    REQUIRE(report.overall == 74.0);

    sets[1].entries = {{"P2", "R1", 0, "S2", 100.0}, {"P3", "R1", 0, "S3", 200.0}};
    report = netgeo::mean_nearest_distance(sets);
    REQUIRE(report.per_class[1] == 150.0);
    REQUIRE(report.overall == Approx((74.0 + 100.0 + 200.0) / 3.0));
}

TEST_CASE("poi_stops.csv round-trips the entry sets") {
    std::mt19937 rng(99);
    auto inst = random_instance(rng);
    auto sets = netgeo::nearest_stops(inst.pois, inst.patterns, inst.snap);
    auto path = (std::filesystem::temp_directory_path() / "careflow_poi_stops.csv").string();
    netgeo::save_poi_stops(sets, path);
    auto loaded = netgeo::load_poi_stops(path);
    for (int c = 0; c < kPoiClassCount; ++c) {
        REQUIRE(loaded[c].entries.size() == sets[c].entries.size());
        auto it = sets[c].entries.begin();
        for (const auto& e : loaded[c].entries) {
            REQUIRE(e.poi_id == it->poi_id);
            REQUIRE(e.stop_id == it->stop_id);
            REQUIRE(e.distance_m == Approx(it->distance_m).margin(1e-6));
            ++it;
        }
    }
}
