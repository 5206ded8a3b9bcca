#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "careflow/accompany.hpp"
#include "careflow/ingest.hpp"
#include "careflow/gender.hpp"
#include "careflow/netgeo.hpp"
#include "careflow/stats.hpp"
#include "careflow/types.hpp"

namespace careflow::synth {

// ---------------------------------------------------------------------------
// Deterministic randomness. One master seed; every output stream draws from
// its own generator seeded by splitmix64(seed ^ fnv1a(purpose)), so adding a
// new output never perturbs the existing ones. No std distributions are used:
// their output is implementation-defined, and the emitted files must be
// byte-identical across toolchains.
// ---------------------------------------------------------------------------

namespace rng {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Stream {
  public:
    Stream(std::uint64_t seed, std::string_view purpose)
        : state_(splitmix64(seed ^ fnv1a(purpose))) {}

    std::uint64_t next() {
        state_ = splitmix64(state_);
        return state_;
    }

    // [0, bound)
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit =
            std::numeric_limits<std::uint64_t>::max() -
            std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t v;
        do {
            v = next();
        } while (v >= limit);
        return v % bound;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool chance(double p) { return uniform() < p; }

    double normal(double mean, double sd) {
        // Box-Muller; one value per call keeps the stream layout simple.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        constexpr double kTwoPi = 6.283185307179586;
        return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
    }

  private:
    std::uint64_t state_;
};

}  // namespace rng

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PairPlan {
    accompany::TargetClass target_class = accompany::TargetClass::Student;
    int weekly_rate = 1;          // planted co-taps per week
    bool dual_target = false;     // accompanying card also holds a target product
};

struct SynthConfig {
    std::uint64_t seed = 42;

    // network
    int n_stops = 200;
    int n_routes = 12;
    double center_lat = 38.90;
    double center_lon = -77.03;
    double grid_spacing_m = 900.0;  // keeps each POI inside one stop's 400 m buffer

    // POIs
    int n_daycares = 25;
    int n_schools = 20;
    int n_grocery = 15;
    int isolated_per_class = 2;  // no stop within the matching radius

    // cards
    int n_cards = 5000;
    double women_card_share = 0.48;   // among gendered regulars; <0.5 keeps sampling non-trivial
    double unknown_name_share = 0.05;
    double unregistered_share = 0.10;
    double casual_share = 0.08;       // cards kept under the 10-active-day bar

    // calendar
    Date start_date{2019, 1, 7};  // a Monday
    int days = 90;

    // travel behavior
    double poi_bin_women_share = 0.60;   // target share at daycare AM bins, post-balancing
    double baseline_women_share = 0.50;
    double alight_coverage = 0.65;       // share of bus stages with an inferred alighting
    int weekday_background_journeys = 3500;
    int weekend_background_journeys = 1000;
    int chains_per_am_bin = 14;   // daycare trip-chains per AM bin per weekday
    int chains_per_pm_bin = 4;    // baseline-share chains in the PM window
    int other_class_chains_per_bin = 3;  // school/grocery chains (baseline share)

    // accompaniment
    std::vector<PairPlan> pairs = default_pairs();
    bool plant_boundary_cases = true;

    // When set, every planted gender differential is neutral: POI bins at the
    // baseline share and no accompaniment gender/registration gradient.
    bool null_effects = false;

    // mixed-model planting targets (used by simulate_mixed_model)
    double mm_beta0 = 27.94;
    double mm_beta1 = 10.11;
    double mm_sigma_u2 = 514.5;
    double mm_sigma_e2 = 185.3;

    static std::vector<PairPlan> make_pairs(int students, int seniors, int disabled) {
        std::vector<PairPlan> pairs;
        for (int i = 0; i < students; ++i) {
            pairs.push_back({accompany::TargetClass::Student, 1 + i % 5, false});
        }
        for (int i = 0; i < seniors; ++i) {
            // a couple of senior pairs travel with another senior-product card
            pairs.push_back({accompany::TargetClass::Senior, 1 + (i * 2) % 5, i < 2});
        }
        for (int i = 0; i < disabled; ++i) {
            pairs.push_back({accompany::TargetClass::Disabled, 1 + (i * 3) % 5, false});
        }
        return pairs;
    }

    static std::vector<PairPlan> default_pairs() { return make_pairs(8, 6, 5); }

    void validate() const {
        if (n_stops < 16 || n_routes < 2) throw Error(ErrorKind::InvalidConfig, "network too small");
        if (days < 14) throw Error(ErrorKind::InvalidConfig, "days must be >= 14");
        for (double share : {women_card_share, unknown_name_share, unregistered_share, casual_share,
                             poi_bin_women_share, baseline_women_share, alight_coverage}) {
            if (share < 0.0 || share > 1.0) throw Error(ErrorKind::InvalidConfig, "share out of [0,1]");
        }
        if (n_cards < 100) throw Error(ErrorKind::InvalidConfig, "n_cards too small");
        if (weekday_background_journeys < 0 || weekend_background_journeys < 0) {
            throw Error(ErrorKind::InvalidConfig, "negative journey volume");
        }
    }

    SynthConfig null_variant() const {
        SynthConfig c = *this;
        c.poi_bin_women_share = 0.5;
        c.null_effects = true;
        return c;
    }
};

// Planted daycare windows, as parity bin indices (15-minute bins from 06:00).
inline std::vector<int> planted_am_bins() { return {2, 3, 4, 5, 6, 7, 8, 9, 10, 11}; }  // 06:30-09:00
inline std::vector<int> baseline_pm_bins() { return {36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 49}; }

// ---------------------------------------------------------------------------
// Ground-truth manifest: everything an oracle needs to predict the pipeline's
// outputs from the emitted files.
// ---------------------------------------------------------------------------

struct CardTruth {
    std::string card_id;
    GenderLabel gender = GenderLabel::Unknown;  // as the cache resolves the name
    bool registered = false;
    std::string name_canonical;  // empty when none
    FareProduct product = FareProduct::Full;
    std::string pool;  // regular | casual | unknown_name | unregistered | pair_actor
};

struct PoiTruth {
    std::string poi_id;
    PoiClass poi_class = PoiClass::Daycare;
    std::string stop_id;   // designated nearest stop; empty when isolated
    double distance_m = 0.0;
    bool isolated = false;
};

struct PatternTruth {
    std::string route_id;
    int direction_id = 0;
    std::vector<std::string> stop_ids;
};

struct PairTruth {
    std::string accompanied_card;
    std::string accompanying_card;
    std::string target_class;  // accompany::TargetClass name
    int weekly_rate = 0;
    std::uint64_t total_events = 0;
    std::map<std::string, std::uint64_t> events_by_month;  // "YYYY-MM"
    bool qualified = false;
    std::string accompanying_product;
    std::string accompanying_gender = "unknown";
    bool accompanying_registered = false;
    bool decoy = false;  // planted to stay below the thresholds (or outside the gap)
};

struct TruthManifest {
    SynthConfig config;
    std::vector<CardTruth> cards;
    std::vector<PoiTruth> pois;
    std::vector<PatternTruth> patterns;
    std::vector<PairTruth> pairs;
    std::vector<int> planted_bins;          // daycare AM bins carrying the planted share
    double planted_share = 0.5;             // post-balancing women share in those bins
    std::uint64_t total_stages = 0;
    std::uint64_t total_journeys = 0;
    std::uint64_t bus_stages = 0;
    std::uint64_t bus_stages_with_alighting = 0;
    std::uint64_t expected_event_total = 0;  // accompaniment events incl. dual emissions
    std::uint64_t active_women_cards = 0;    // gendered regulars (>= 10 active days)
    std::uint64_t active_men_cards = 0;
};

// ---------------------------------------------------------------------------
// Manifest (de)serialization
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json config_to_json(const SynthConfig& c) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : c.pairs) {
        pairs.push_back({{"class", accompany::to_string(p.target_class)},
                         {"weekly_rate", p.weekly_rate},
                         {"dual_target", p.dual_target}});
    }
    return {
        {"seed", c.seed},
        {"n_stops", c.n_stops},
        {"n_routes", c.n_routes},
        {"center_lat", c.center_lat},
        {"center_lon", c.center_lon},
        {"grid_spacing_m", c.grid_spacing_m},
        {"n_daycares", c.n_daycares},
        {"n_schools", c.n_schools},
        {"n_grocery", c.n_grocery},
        {"isolated_per_class", c.isolated_per_class},
        {"n_cards", c.n_cards},
        {"women_card_share", c.women_card_share},
        {"unknown_name_share", c.unknown_name_share},
        {"unregistered_share", c.unregistered_share},
        {"casual_share", c.casual_share},
        {"start_date", format_date(c.start_date)},
        {"days", c.days},
        {"poi_bin_women_share", c.poi_bin_women_share},
        {"baseline_women_share", c.baseline_women_share},
        {"alight_coverage", c.alight_coverage},
        {"weekday_background_journeys", c.weekday_background_journeys},
        {"weekend_background_journeys", c.weekend_background_journeys},
        {"chains_per_am_bin", c.chains_per_am_bin},
        {"chains_per_pm_bin", c.chains_per_pm_bin},
        {"other_class_chains_per_bin", c.other_class_chains_per_bin},
        {"pairs", pairs},
        {"plant_boundary_cases", c.plant_boundary_cases},
        {"null_effects", c.null_effects},
        {"mm_beta0", c.mm_beta0},
        {"mm_beta1", c.mm_beta1},
        {"mm_sigma_u2", c.mm_sigma_u2},
        {"mm_sigma_e2", c.mm_sigma_e2},
    };
}

}  // namespace detail

inline void save_manifest(const TruthManifest& m, const std::string& path) {
    nlohmann::json j;
    j["config"] = detail::config_to_json(m.config);
    j["planted_share"] = m.planted_share;
    j["planted_bins"] = m.planted_bins;
    j["counts"] = {
        {"total_stages", m.total_stages},
        {"total_journeys", m.total_journeys},
        {"bus_stages", m.bus_stages},
        {"bus_stages_with_alighting", m.bus_stages_with_alighting},
        {"expected_event_total", m.expected_event_total},
        {"active_women_cards", m.active_women_cards},
        {"active_men_cards", m.active_men_cards},
    };
    nlohmann::json cards = nlohmann::json::array();
    for (const auto& c : m.cards) {
        cards.push_back({{"card_id", c.card_id},
                         {"gender", to_string(c.gender)},
                         {"registered", c.registered},
                         {"name", c.name_canonical},
                         {"product", to_string(c.product)},
                         {"pool", c.pool}});
    }
    j["cards"] = std::move(cards);
    nlohmann::json pois = nlohmann::json::array();
    for (const auto& p : m.pois) {
        pois.push_back({{"poi_id", p.poi_id},
                        {"class", to_string(p.poi_class)},
                        {"stop_id", p.stop_id},
                        {"distance_m", p.distance_m},
                        {"isolated", p.isolated}});
    }
    j["pois"] = std::move(pois);
    nlohmann::json patterns = nlohmann::json::array();
    for (const auto& p : m.patterns) {
        patterns.push_back(
            {{"route_id", p.route_id}, {"direction_id", p.direction_id}, {"stops", p.stop_ids}});
    }
    j["patterns"] = std::move(patterns);
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : m.pairs) {
        pairs.push_back({{"accompanied", p.accompanied_card},
                         {"accompanying", p.accompanying_card},
                         {"class", p.target_class},
                         {"weekly_rate", p.weekly_rate},
                         {"total_events", p.total_events},
                         {"events_by_month", p.events_by_month},
                         {"qualified", p.qualified},
                         {"accompanying_product", p.accompanying_product},
                         {"accompanying_gender", p.accompanying_gender},
                         {"accompanying_registered", p.accompanying_registered},
                         {"decoy", p.decoy}});
    }
    j["pairs"] = std::move(pairs);

    std::ofstream out(path, std::ios::binary);
    if (!out.is_open()) throw Error(ErrorKind::Io, "cannot write " + path, path);
    out << j.dump(2) << '\n';
}

inline TruthManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw Error(ErrorKind::MissingFile, "cannot open " + path, path);
    nlohmann::json j = nlohmann::json::parse(in);
    TruthManifest m;
    const auto& counts = j.at("counts");
    m.planted_share = j.at("planted_share");
    m.planted_bins = j.at("planted_bins").get<std::vector<int>>();
    m.total_stages = counts.at("total_stages");
    m.total_journeys = counts.at("total_journeys");
    m.bus_stages = counts.at("bus_stages");
    m.bus_stages_with_alighting = counts.at("bus_stages_with_alighting");
    m.expected_event_total = counts.at("expected_event_total");
    m.active_women_cards = counts.at("active_women_cards");
    m.active_men_cards = counts.at("active_men_cards");
    for (const auto& c : j.at("cards")) {
        CardTruth t;
        t.card_id = c.at("card_id");
        t.gender = parse_gender_label(c.at("gender").get<std::string>()).value();
        t.registered = c.at("registered");
        t.name_canonical = c.at("name");
        t.product = parse_fare_product(c.at("product").get<std::string>()).value();
        t.pool = c.at("pool");
        m.cards.push_back(std::move(t));
    }
    for (const auto& p : j.at("pois")) {
        PoiTruth t;
        t.poi_id = p.at("poi_id");
        t.poi_class = parse_poi_class(p.at("class").get<std::string>()).value();
        t.stop_id = p.at("stop_id");
        t.distance_m = p.at("distance_m");
        t.isolated = p.at("isolated");
        m.pois.push_back(std::move(t));
    }
    for (const auto& p : j.at("patterns")) {
        PatternTruth t;
        t.route_id = p.at("route_id");
        t.direction_id = p.at("direction_id");
        t.stop_ids = p.at("stops").get<std::vector<std::string>>();
        m.patterns.push_back(std::move(t));
    }
    for (const auto& p : j.at("pairs")) {
        PairTruth t;
        t.accompanied_card = p.at("accompanied");
        t.accompanying_card = p.at("accompanying");
        t.target_class = p.at("class");
        t.weekly_rate = p.at("weekly_rate");
        t.total_events = p.at("total_events");
        t.events_by_month = p.at("events_by_month").get<std::map<std::string, std::uint64_t>>();
        t.qualified = p.at("qualified");
        t.accompanying_product = p.at("accompanying_product");
        t.accompanying_gender = p.at("accompanying_gender");
        t.accompanying_registered = p.at("accompanying_registered");
        t.decoy = p.at("decoy");
        m.pairs.push_back(std::move(t));
    }
    return m;
}

// ---------------------------------------------------------------------------
// City generation
// ---------------------------------------------------------------------------

struct GeneratedCity {
    std::string out_dir;
    std::string gtfs_dir;
    std::string pois_path;
    std::string stages_path;
    std::string registrations_path;
    std::string cache_path;
    std::string manifest_path;
    TruthManifest manifest;
};

namespace detail {

inline double quantize_coord(double v) { return std::round(v * 1e7) / 1e7; }

struct NamePools {
    std::vector<std::string> women;
    std::vector<std::string> men;
    std::vector<std::string> ambiguous;  // cached below any valid cutoff

    static NamePools build() {
        NamePools pools;
        const char* wpre[] = {"An",  "Bel", "Cora", "Dani", "Ela",  "Fia", "Gwen",
                              "Hana", "Isa", "Jul",  "Kara", "Lena", "Mira", "Nora",
                              "Ola",  "Pria", "Quin", "Rosa", "Sela", "Tina"};
        const char* wsuf[] = {"a", "e", "ia", "na", "ra", "la"};
        const char* mpre[] = {"Al",  "Ben", "Carl", "Dan", "Eli",  "Fred", "Gus",
                              "Hank", "Ivan", "Jack", "Karl", "Leo",  "Marc", "Ned",
                              "Otto", "Paul", "Quent", "Ralf", "Sam",  "Tom"};
        const char* msuf[] = {"", "o", "an", "en", "us", "in"};
        for (const char* p : wpre) {
            for (const char* s : wsuf) pools.women.push_back(std::string(p) + s);
        }
        for (const char* p : mpre) {
            for (const char* s : msuf) pools.men.push_back(std::string(p) + s);
        }
        const char* amb[] = {"Vess", "Noor", "Rin", "Teal", "Arbor", "Lux", "Wren", "Sol"};
        for (const char* a : amb) pools.ambiguous.push_back(a);
        return pools;
    }
};

// A raw registration string that normalizes back to the canonical name.
inline std::string mess_up_name(const std::string& canonical, rng::Stream& r) {
    std::string out;
    const auto leading = r.below(3);
    out.append(leading, ' ');
    for (std::size_t i = 0; i < canonical.size(); ++i) {
        char c = canonical[i];
        if (r.chance(0.3)) {
            c = r.chance(0.5) ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                              : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
        out += c;
        if (i + 1 < canonical.size() && r.chance(0.08)) out += ' ';
    }
    out.append(r.below(3), ' ');
    return out;
}

}  // namespace detail

class CityGenerator {
  public:
    explicit CityGenerator(SynthConfig config) : cfg_(std::move(config)) { cfg_.validate(); }

    GeneratedCity generate(const std::string& out_dir) {
        std::filesystem::create_directories(out_dir);
        GeneratedCity city;
        city.out_dir = out_dir;
        city.gtfs_dir = (std::filesystem::path(out_dir) / "gtfs").string();
        city.pois_path = (std::filesystem::path(out_dir) / "pois.csv").string();
        city.stages_path = (std::filesystem::path(out_dir) / "stages.csv").string();
        city.registrations_path = (std::filesystem::path(out_dir) / "registrations.csv").string();
        city.cache_path = (std::filesystem::path(out_dir) / "name_cache.csv").string();
        city.manifest_path = (std::filesystem::path(out_dir) / "manifest.json").string();

        manifest_.config = cfg_;
        manifest_.planted_share = cfg_.poi_bin_women_share;
        manifest_.planted_bins = planted_am_bins();

        build_network();
        place_pois();
        build_cards();
        build_traffic();

        ingest::save_gtfs(snapshot_, city.gtfs_dir);
        ingest::save_pois(pois_, city.pois_path);
        write_stages(city.stages_path);
        ingest::save_registrations(registrations_, city.registrations_path);
        gender::save_cache(cache_, city.cache_path);
        save_manifest(manifest_, city.manifest_path);
        city.manifest = manifest_;
        return city;
    }

  private:
    // -- network ------------------------------------------------------------

    void build_network() {
        rng::Stream jitter(cfg_.seed, "network-jitter");
        const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg_.n_stops))));
        const double lat_step = cfg_.grid_spacing_m / netgeo::kMetersPerDegLat;
        const double lon_step =
            cfg_.grid_spacing_m /
            (netgeo::kMetersPerDegLon * std::cos(cfg_.center_lat * netgeo::kDegToRad));

        for (int k = 0; k < cfg_.n_stops; ++k) {
            const int i = k / cols;
            const int j = k % cols;
            Stop s;
            char id[16];
            std::snprintf(id, sizeof id, "S%04d", k);
            s.stop_id = id;
            s.name = "Stop " + std::to_string(k);
            const double jitter_lat = jitter.uniform(-30.0, 30.0) / netgeo::kMetersPerDegLat;
            const double jitter_lon =
                jitter.uniform(-30.0, 30.0) /
                (netgeo::kMetersPerDegLon * std::cos(cfg_.center_lat * netgeo::kDegToRad));
            s.lat = detail::quantize_coord(cfg_.center_lat + i * lat_step + jitter_lat);
            s.lon = detail::quantize_coord(cfg_.center_lon + j * lon_step + jitter_lon);
            snapshot_.stop_index.emplace(s.stop_id, snapshot_.stops.size());
            snapshot_.stops.push_back(std::move(s));
        }

        // Half the routes run along rows, half along columns. Each direction
        // gets two trips; the second omits one middle stop, so the pattern
        // union is exercised without changing the stop set.
        const int row_routes = cfg_.n_routes / 2;
        const int col_routes = cfg_.n_routes - row_routes;
        std::set<std::string> on_pattern;
        auto add_route = [&](int route_idx, const std::vector<int>& stop_keys) {
            char rid[16];
            std::snprintf(rid, sizeof rid, "R%02d", route_idx);
            snapshot_.routes.push_back(rid);
            for (int direction = 0; direction < 2; ++direction) {
                std::vector<int> line = stop_keys;
                if (direction == 1) std::reverse(line.begin(), line.end());
                for (int trip = 0; trip < 2; ++trip) {
                    char tid[32];
                    std::snprintf(tid, sizeof tid, "T%02d_%d_%d", route_idx, direction, trip);
                    snapshot_.trips.push_back({rid, tid, direction});
                    int seq = 1;
                    for (std::size_t n = 0; n < line.size(); ++n) {
                        if (trip == 1 && n == line.size() / 2) continue;  // omit a middle stop
                        snapshot_.stop_times.push_back(
                            {tid, seq++, snapshot_.stops[line[n]].stop_id});
                    }
                }
                PatternTruth pattern;
                pattern.route_id = rid;
                pattern.direction_id = direction;
                for (int key : line) {
                    pattern.stop_ids.push_back(snapshot_.stops[key].stop_id);
                    on_pattern.insert(snapshot_.stops[key].stop_id);
                }
                manifest_.patterns.push_back(std::move(pattern));
            }
        };

        int route_idx = 0;
        const int total_rows = (cfg_.n_stops + cols - 1) / cols;
        for (int r = 0; r < row_routes; ++r) {
            const int row = (r * total_rows) / row_routes;
            std::vector<int> keys;
            for (int j = 0; j < cols; ++j) {
                const int k = row * cols + j;
                if (k < cfg_.n_stops) keys.push_back(k);
            }
            add_route(route_idx++, keys);
        }
        for (int c = 0; c < col_routes; ++c) {
            const int col = (c * cols) / col_routes;
            std::vector<int> keys;
            for (int i = 0; i < total_rows; ++i) {
                const int k = i * cols + col;
                if (k < cfg_.n_stops) keys.push_back(k);
            }
            add_route(route_idx++, keys);
        }

        std::stable_sort(snapshot_.stop_times.begin(), snapshot_.stop_times.end(),
                         [](const ingest::GtfsStopTime& a, const ingest::GtfsStopTime& b) {
                             if (a.trip_id != b.trip_id) return a.trip_id < b.trip_id;
                             return a.stop_sequence < b.stop_sequence;
                         });

        for (const auto& s : snapshot_.stops) {
            if (on_pattern.count(s.stop_id)) {
                pattern_stops_.push_back(s.stop_id);
            } else {
                orphan_stops_.push_back(s.stop_id);  // reserved for accompaniment devices
            }
        }
        if (orphan_stops_.size() < 8) {
            throw Error(ErrorKind::InvalidConfig, "grid leaves too few off-pattern stops");
        }
    }

    // -- POIs ---------------------------------------------------------------

    void place_pois() {
        rng::Stream r(cfg_.seed, "pois");
        // Distances straddle the 50/100/200 sensitivity thresholds with margin.
        const double planted_distances[] = {25.0, 60.0, 90.0, 150.0, 250.0, 350.0};

        struct ClassPlan {
            PoiClass cls;
            int count;
            const char* prefix;
        };
        const ClassPlan plans[] = {{PoiClass::Daycare, cfg_.n_daycares, "P_DC"},
                                   {PoiClass::School, cfg_.n_schools, "P_SC"},
                                   {PoiClass::Grocery, cfg_.n_grocery, "P_GR"}};

        // Designated stops stride through the pattern stops; school #0 and
        // grocery #0 deliberately share one, exercising multi-class stops.
        std::size_t cursor = 0;
        auto next_designated = [&]() {
            const std::string& id = pattern_stops_[cursor % pattern_stops_.size()];
            cursor += 3;
            return id;
        };
        std::string shared_stop;

        int serial = 0;
        for (const auto& plan : plans) {
            for (int i = 0; i < plan.count; ++i) {
                Poi poi;
                char pid[16];
                std::snprintf(pid, sizeof pid, "%s%03d", plan.prefix, i);
                poi.poi_id = pid;
                poi.poi_class = plan.cls;
                PoiTruth truth;
                truth.poi_id = poi.poi_id;
                truth.poi_class = plan.cls;
                const bool isolated = i >= plan.count - cfg_.isolated_per_class;
                if (isolated) {
                    // Far corner, beyond any buffer.
                    poi.lat = detail::quantize_coord(cfg_.center_lat - 0.15 - 0.001 * serial);
                    poi.lon = detail::quantize_coord(cfg_.center_lon - 0.15);
                    truth.isolated = true;
                } else {
                    std::string stop_id;
                    if (plan.cls == PoiClass::School && i == 0) {
                        stop_id = shared_stop.empty() ? next_designated() : shared_stop;
                        shared_stop = stop_id;
                    } else if (plan.cls == PoiClass::Grocery && i == 0 && !shared_stop.empty()) {
                        stop_id = shared_stop;
                    } else {
                        stop_id = next_designated();
                    }
                    const Stop* stop = snapshot_.find_stop(stop_id);
                    const double dist = planted_distances[serial % 6];
                    const double bearing = r.uniform(0.0, 6.283185307179586);
                    const double dlat = dist * std::sin(bearing) / netgeo::kMetersPerDegLat;
                    const double dlon = dist * std::cos(bearing) /
                                        (netgeo::kMetersPerDegLon *
                                         std::cos(stop->lat * netgeo::kDegToRad));
                    poi.lat = detail::quantize_coord(stop->lat + dlat);
                    poi.lon = detail::quantize_coord(stop->lon + dlon);
                    truth.stop_id = stop_id;
                    // Recomputed on the quantized coordinates, so the manifest
                    // matches the pipeline bit-for-bit.
                    truth.distance_m =
                        netgeo::distance_m({poi.lat, poi.lon}, {stop->lat, stop->lon});
                    poi_class_stops_[static_cast<std::size_t>(plan.cls)].insert(stop_id);
                }
                ++serial;
                pois_.push_back(poi);
                manifest_.pois.push_back(std::move(truth));
            }
        }
    }

    // -- cards ---------------------------------------------------------------

    void build_cards() {
        rng::Stream r(cfg_.seed, "cards");
        rng::Stream name_rng(cfg_.seed, "names");
        rng::Stream mess(cfg_.seed, "registration-mess");
        const auto pools = detail::NamePools::build();

        // Cache entries for every pool name; ambiguous names sit below any
        // valid cutoff so they resolve Unknown.
        rng::Stream cache_rng(cfg_.seed, "cache-probs");
        for (const auto& n : pools.women) {
            cache_.upsert({n, GenderLabel::Woman, 0.85 + 0.14 * cache_rng.uniform(),
                           static_cast<std::int64_t>(1000 + cache_rng.below(100000)),
                           gender::Source::RemoteProvider});
        }
        for (const auto& n : pools.men) {
            cache_.upsert({n, GenderLabel::Man, 0.85 + 0.14 * cache_rng.uniform(),
                           static_cast<std::int64_t>(1000 + cache_rng.below(100000)),
                           gender::Source::RemoteProvider});
        }
        for (const auto& n : pools.ambiguous) {
            cache_.upsert({n, GenderLabel::Woman, 0.50,
                           static_cast<std::int64_t>(100 + cache_rng.below(1000)),
                           gender::Source::RemoteProvider});
        }

        const int n_pair_cards = static_cast<int>(cfg_.pairs.size()) * 2 +
                                 (cfg_.plant_boundary_cases ? 6 : 0);
        const int n_unregistered = static_cast<int>(cfg_.n_cards * cfg_.unregistered_share);
        const int n_unknown = static_cast<int>(cfg_.n_cards * cfg_.unknown_name_share);
        const int n_casual = static_cast<int>(cfg_.n_cards * cfg_.casual_share);
        const int n_regular = cfg_.n_cards - n_unregistered - n_unknown - n_casual - n_pair_cards;
        if (n_regular < 100) throw Error(ErrorKind::InvalidConfig, "too few regular cards");
        const int n_regular_women = static_cast<int>(n_regular * cfg_.women_card_share);

        int serial = 0;
        auto new_card = [&](GenderLabel gender, bool registered, const std::string& name,
                            FareProduct product, const char* pool) {
            CardTruth t;
            char id[16];
            std::snprintf(id, sizeof id, "C%05d", serial++);
            t.card_id = id;
            t.gender = gender;
            t.registered = registered;
            t.name_canonical = name;
            t.product = product;
            t.pool = pool;
            CardRegistration reg;
            reg.card_id = t.card_id;
            reg.registered = registered;
            if (registered && !name.empty()) reg.first_name_raw = detail::mess_up_name(name, mess);
            registrations_.push_back(std::move(reg));
            manifest_.cards.push_back(t);
            return t.card_id;
        };
        const FareProduct regular_products[] = {FareProduct::Full, FareProduct::Full,
                                                FareProduct::Full, FareProduct::WeeklyPass,
                                                FareProduct::Other};

        for (int i = 0; i < n_regular; ++i) {
            const bool woman = i < n_regular_women;
            const auto& pool = woman ? pools.women : pools.men;
            const std::string& name = pool[name_rng.below(pool.size())];
            const auto card = new_card(woman ? GenderLabel::Woman : GenderLabel::Man, true, name,
                                       regular_products[i % 5], "regular");
            (woman ? regular_women_ : regular_men_).push_back(card);
        }
        for (int i = 0; i < n_casual; ++i) {
            const bool woman = i % 2 == 0;
            const auto& pool = woman ? pools.women : pools.men;
            casual_cards_.push_back(new_card(woman ? GenderLabel::Woman : GenderLabel::Man, true,
                                             pool[name_rng.below(pool.size())],
                                             regular_products[i % 5], "casual"));
        }
        for (int i = 0; i < n_unknown; ++i) {
            // Ambiguous cache entries or names missing from the cache entirely.
            const bool ambiguous = i % 2 == 0;
            const std::string name =
                ambiguous ? pools.ambiguous[name_rng.below(pools.ambiguous.size())]
                          : "Zeph" + std::to_string(i);
            other_cards_.push_back(
                new_card(GenderLabel::Unknown, true, name, regular_products[i % 5], "unknown_name"));
        }
        for (int i = 0; i < n_unregistered; ++i) {
            other_cards_.push_back(new_card(GenderLabel::Unknown, false, "",
                                            regular_products[i % 5], "unregistered"));
        }

        manifest_.active_women_cards = regular_women_.size();
        manifest_.active_men_cards = regular_men_.size();

        // Accompaniment actors: the accompanied card holds the target product;
        // the accompanying card's gender and registration are planted to rise
        // with the weekly rate.
        int pair_idx = 0;
        for (const auto& plan : cfg_.pairs) {
            const FareProduct target = plan.target_class == accompany::TargetClass::Student
                                           ? FareProduct::Student
                                           : plan.target_class == accompany::TargetClass::Senior
                                                 ? FareProduct::Senior
                                                 : FareProduct::Disabled;
            const auto accompanied = new_card(GenderLabel::Unknown, false, "", target, "pair_actor");

            const double women_pct = cfg_.null_effects ? 0.5 : 0.20 + 0.15 * plan.weekly_rate;
            const double unreg_pct = cfg_.null_effects ? 0.5 : 0.70 - 0.12 * plan.weekly_rate;
            const bool acc_woman = r.uniform() < women_pct;
            const bool acc_registered = !(r.uniform() < unreg_pct);
            FareProduct acc_product;
            if (plan.dual_target) {
                acc_product = target;
            } else if (plan.weekly_rate >= 3) {
                // High-rate accompaniers lean on the pass products.
                const FareProduct high[] = {FareProduct::WeeklyPass, FareProduct::WeeklyPass,
                                            FareProduct::Full};
                acc_product = high[pair_idx % 3];
            } else {
                const FareProduct low[] = {FareProduct::Full, FareProduct::Full,
                                           FareProduct::Full, FareProduct::WeeklyPass,
                                           FareProduct::Other};
                acc_product = low[pair_idx % 5];
            }
            std::string acc_name;
            if (acc_registered) {
                const auto& pool = acc_woman ? pools.women : pools.men;
                acc_name = pool[name_rng.below(pool.size())];
            }
            const auto accompanying =
                new_card(acc_registered ? (acc_woman ? GenderLabel::Woman : GenderLabel::Man)
                                        : GenderLabel::Unknown,
                         acc_registered, acc_name, acc_product, "pair_actor");

            PlantedPairState state;
            state.plan = plan;
            state.accompanied = accompanied;
            state.accompanying = accompanying;
            state.accompanying_product = acc_product;
            state.truth.accompanied_card = accompanied;
            state.truth.accompanying_card = accompanying;
            state.truth.target_class = accompany::to_string(plan.target_class);
            state.truth.weekly_rate = plan.weekly_rate;
            state.truth.accompanying_product = to_string(acc_product);
            state.truth.accompanying_gender =
                acc_registered ? (acc_woman ? "woman" : "man") : "unknown";
            state.truth.accompanying_registered = acc_registered;
            planted_pairs_.push_back(std::move(state));
            ++pair_idx;
        }

        if (cfg_.plant_boundary_cases) {
            // Decoy A: exactly 3 events in each of 3 months (9 < 10, no month >= 4).
            // Decoy B: taps always 31 s apart, so no events at all.
            // Boundary pair: every gap exactly 30 s, which must count.
            for (int d = 0; d < 3; ++d) {
                const auto a = new_card(GenderLabel::Unknown, false, "", FareProduct::Senior,
                                        "pair_actor");
                const auto b = new_card(GenderLabel::Unknown, false, "", FareProduct::Full,
                                        "pair_actor");
                PlantedPairState state;
                state.plan = {accompany::TargetClass::Senior, 0, false};
                state.accompanied = a;
                state.accompanying = b;
                state.accompanying_product = FareProduct::Full;
                state.kind = d == 0 ? PairKind::DecoyThreePerMonth
                                    : d == 1 ? PairKind::DecoyGap31 : PairKind::BoundaryGap30;
                state.truth.accompanied_card = a;
                state.truth.accompanying_card = b;
                state.truth.target_class = "senior";
                state.truth.weekly_rate = 0;
                state.truth.accompanying_product = "full";
                state.truth.decoy = d != 2;
                planted_pairs_.push_back(std::move(state));
            }
        }
    }

    // -- traffic ---------------------------------------------------------------

    enum class PairKind { Planted, DecoyThreePerMonth, DecoyGap31, BoundaryGap30 };

    struct PlantedPairState {
        PairPlan plan;
        std::string accompanied;
        std::string accompanying;
        FareProduct accompanying_product = FareProduct::Full;
        PairKind kind = PairKind::Planted;
        PairTruth truth;
    };

    netgeo::GeoPoint geo_of(const std::string& stop_id) const {
        const Stop* s = snapshot_.find_stop(stop_id);
        return {s->lat, s->lon};
    }

    void build_traffic() {
        rng::Stream bg(cfg_.seed, "background");
        rng::Stream chains(cfg_.seed, "chains");
        rng::Stream acc(cfg_.seed, "accompaniment");
        rng::Stream casual_rng(cfg_.seed, "casual");

        const double ratio = regular_men_.empty()
                                 ? 1.0
                                 : static_cast<double>(regular_women_.size()) /
                                       static_cast<double>(regular_men_.size());
        // Probability of drawing a woman so the post-balancing share lands on
        // target: balancing keeps each man with probability women/men, so the
        // pre-balance odds need the inverse correction.
        auto woman_draw_p = [&](double target_share) {
            return target_share * ratio / ((1.0 - target_share) + target_share * ratio);
        };

        std::vector<std::string> non_poi_stops;
        std::set<std::string> any_poi_stop;
        for (const auto& set : poi_class_stops_) any_poi_stop.insert(set.begin(), set.end());
        for (const auto& s : pattern_stops_) {
            if (!any_poi_stop.count(s)) non_poi_stops.push_back(s);
        }
        const auto& daycare_stops = stops_of(PoiClass::Daycare);
        const auto& school_stops = stops_of(PoiClass::School);
        const auto& grocery_stops = stops_of(PoiClass::Grocery);

        std::map<std::string, int> journey_seq;
        auto next_journey_id = [&](const std::string& card) {
            return "J_" + card + "_" + std::to_string(journey_seq[card]++);
        };

        auto ride_seconds = [&](const std::string& a, const std::string& b, rng::Stream& r) {
            const double d = netgeo::distance_m(geo_of(a), geo_of(b));
            return static_cast<std::int32_t>(std::max(180.0, d / 6.0 + r.uniform(0.0, 120.0)));
        };

        auto push_stage = [&](const std::string& card, const std::string& journey, int index,
                              const Date& date, const std::string& board, std::int32_t board_t,
                              const std::string& alight, std::int32_t alight_t, Mode mode,
                              FareProduct product, bool force_alight, rng::Stream& cov) {
            Stage s;
            s.card_id = card;
            s.journey_id = journey;
            s.stage_index = index;
            s.service_date = date;
            s.board_stop = board;
            s.board_time = board_t;
            s.mode = mode;
            s.device_id = "DEV_" + board;
            s.fare_product = product;
            s.fare_paid = 200;
            const bool keep_alight = force_alight || mode == Mode::Rail || cov.chance(cfg_.alight_coverage);
            if (keep_alight && !alight.empty()) {
                s.alight_stop = alight;
                s.alight_time = alight_t;
                s.distance_m = netgeo::distance_m(geo_of(board), geo_of(alight));
            }
            if (mode == Mode::Bus) {
                ++manifest_.bus_stages;
                if (s.alight_stop) ++manifest_.bus_stages_with_alighting;
            }
            stages_.push_back(std::move(s));
            ++manifest_.total_stages;
        };

        rng::Stream coverage(cfg_.seed, "alighting-coverage");

        auto product_of = [&](const std::string& card) {
            // Manifest cards were appended in creation order C00000..; index by id.
            const std::size_t idx = static_cast<std::size_t>(std::stoul(card.substr(1)));
            return manifest_.cards[idx].product;
        };

        auto pick = [&](const std::vector<std::string>& pool, rng::Stream& r) -> const std::string& {
            return pool[r.below(pool.size())];
        };

        for (int day = 0; day < cfg_.days; ++day) {
            const Date date = civil_from_days(days_from_civil(cfg_.start_date) + day);
            const bool weekend = day_type_of(date) == DayType::Weekend;

            // Background journeys. Weekday transfers and destinations steer
            // clear of POI stops, so tagged events carry only the planted
            // share; weekends mix freely for the null comparisons.
            const int volume =
                weekend ? cfg_.weekend_background_journeys : cfg_.weekday_background_journeys;
            for (int n = 0; n < volume; ++n) {
                std::string card;
                const double roll = bg.uniform();
                if (roll < 0.10 && !other_cards_.empty()) {
                    card = pick(other_cards_, bg);
                } else {
                    const bool woman = bg.chance(woman_draw_p(cfg_.baseline_women_share));
                    card = woman ? pick(regular_women_, bg) : pick(regular_men_, bg);
                }
                const auto product = product_of(card);
                const auto& dest_pool = weekend ? pattern_stops_ : non_poi_stops;
                const std::string& origin = pick(pattern_stops_, bg);
                std::int32_t t0;
                if (bg.chance(0.04)) {
                    t0 = bg.chance(0.5) ? static_cast<std::int32_t>(bg.uniform(19800, 21600))
                                        : static_cast<std::int32_t>(bg.uniform(79200, 84600));
                } else {
                    t0 = static_cast<std::int32_t>(bg.uniform(21600, 79000));
                }
                const auto journey = next_journey_id(card);
                ++manifest_.total_journeys;
                if (bg.chance(0.8)) {
                    const std::string& dest = pick(dest_pool, bg);
                    push_stage(card, journey, 1, date, origin, t0, dest,
                               t0 + ride_seconds(origin, dest, bg), Mode::Bus, product, false,
                               coverage);
                } else {
                    const std::string& mid = pick(dest_pool, bg);
                    const std::string& dest = pick(dest_pool, bg);
                    const auto t1 = t0 + ride_seconds(origin, mid, bg);
                    const auto t2 = t1 + static_cast<std::int32_t>(bg.uniform(180, 600));
                    push_stage(card, journey, 1, date, origin, t0, mid, t1, Mode::Bus, product,
                               false, coverage);
                    push_stage(card, journey, 2, date, mid, t2, dest,
                               t2 + ride_seconds(mid, dest, bg), Mode::Bus, product, false,
                               coverage);
                }
            }

            // Care trip-chains (weekdays): alight at a POI stop, re-board the
            // next bus there within the same parity bin.
            if (!weekend) {
                auto chain = [&](const std::vector<std::string>& class_stops, int bin,
                                 double share) {
                    if (class_stops.empty()) return;
                    const bool woman = chains.chance(woman_draw_p(share));
                    const std::string& card =
                        woman ? pick(regular_women_, chains) : pick(regular_men_, chains);
                    const auto product = product_of(card);
                    const std::string& poi_stop = pick(class_stops, chains);
                    const std::string& origin = pick(non_poi_stops, chains);
                    const std::string& dest = pick(non_poi_stops, chains);
                    const std::int32_t bin_start = 21600 + bin * 900;
                    const std::int32_t alight1 = bin_start + static_cast<std::int32_t>(chains.uniform(0, 600));
                    const std::int32_t board2 =
                        alight1 + 60 + static_cast<std::int32_t>(chains.uniform(0, 179));
                    const std::int32_t board1 = alight1 - ride_seconds(origin, poi_stop, chains);
                    const auto journey = next_journey_id(card);
                    ++manifest_.total_journeys;
                    push_stage(card, journey, 1, date, origin, board1, poi_stop, alight1, Mode::Bus,
                               product, false, coverage);
                    push_stage(card, journey, 2, date, poi_stop, board2, dest,
                               board2 + ride_seconds(poi_stop, dest, chains), Mode::Bus, product,
                               false, coverage);
                };
                for (int bin : planted_am_bins()) {
                    for (int n = 0; n < cfg_.chains_per_am_bin; ++n) {
                        chain(daycare_stops, bin, cfg_.poi_bin_women_share);
                    }
                    for (int n = 0; n < cfg_.other_class_chains_per_bin; ++n) {
                        chain(school_stops, bin, cfg_.baseline_women_share);
                        chain(grocery_stops, bin, cfg_.baseline_women_share);
                    }
                }
                for (int bin : baseline_pm_bins()) {
                    for (int n = 0; n < cfg_.chains_per_pm_bin; ++n) {
                        chain(daycare_stops, bin, cfg_.baseline_women_share);
                    }
                }
            }
        }

        // Casual cards: a handful of active days, below the 10-day filter.
        for (std::size_t i = 0; i < casual_cards_.size(); ++i) {
            const int active = 4 + static_cast<int>(casual_rng.below(5));  // 4..8 days
            std::set<int> days;
            while (static_cast<int>(days.size()) < active) {
                days.insert(static_cast<int>(casual_rng.below(cfg_.days)));
            }
            for (int day : days) {
                const Date date = civil_from_days(days_from_civil(cfg_.start_date) + day);
                const std::string& origin = pick(pattern_stops_, casual_rng);
                const std::string& dest = pick(pattern_stops_, casual_rng);
                const auto t0 = static_cast<std::int32_t>(casual_rng.uniform(25200, 72000));
                const auto journey = next_journey_id(casual_cards_[i]);
                ++manifest_.total_journeys;
                push_stage(casual_cards_[i], journey, 1, date, origin, t0, dest,
                           t0 + ride_seconds(origin, dest, casual_rng), Mode::Bus,
                           product_of(casual_cards_[i]), false, coverage);
            }
        }

        build_accompaniment_taps(acc, next_journey_id, coverage);

        std::stable_sort(stages_.begin(), stages_.end(), [](const Stage& a, const Stage& b) {
            const auto ka = std::tie(a.service_date, a.card_id, a.journey_id, a.stage_index);
            const auto kb = std::tie(b.service_date, b.card_id, b.journey_id, b.stage_index);
            return ka < kb;
        });
    }

    template <typename NextJourneyId>
    void build_accompaniment_taps(rng::Stream& acc, NextJourneyId&& next_journey_id,
                                  rng::Stream& coverage) {
        // Planted pairs tap exclusively at off-pattern stops, which the rest
        // of the traffic never touches, so detected events are exactly the
        // planted ones.
        const int n_weeks = cfg_.days / 7;
        std::size_t device_cursor = 0;
        auto home_stop = [&]() -> const std::string& {
            return orphan_stops_[device_cursor++ % orphan_stops_.size()];
        };

        auto class_time = [&](accompany::TargetClass cls, bool weekend_event) {
            if (weekend_event) return static_cast<std::int32_t>(acc.uniform(36000, 54000));  // 10:00-15:00
            switch (cls) {
                case accompany::TargetClass::Student:
                    return acc.chance(0.5) ? static_cast<std::int32_t>(acc.uniform(26100, 28800))
                                           : static_cast<std::int32_t>(acc.uniform(54000, 57600));
                case accompany::TargetClass::Senior:
                    return static_cast<std::int32_t>(acc.uniform(28800, 50400));
                case accompany::TargetClass::Disabled:
                    return static_cast<std::int32_t>(acc.uniform(30600, 52200));
            }
            return 36000;
        };

        for (auto& pair : planted_pairs_) {
            const std::string& stop = home_stop();
            const bool rail = acc.chance(0.3);
            const std::string device = rail ? "MEZZ_" + stop : "DEV_" + stop;
            const std::string board_stop = stop;
            std::vector<std::pair<Date, std::int32_t>> events;  // tap time of the earlier card

            if (pair.kind == PairKind::Planted) {
                for (int week = 0; week < n_weeks; ++week) {
                    std::set<int> weekdays;
                    while (static_cast<int>(weekdays.size()) < pair.plan.weekly_rate) {
                        weekdays.insert(static_cast<int>(acc.below(5)));
                    }
                    for (int wd : weekdays) {
                        const Date date =
                            civil_from_days(days_from_civil(cfg_.start_date) + week * 7 + wd);
                        events.emplace_back(date, class_time(pair.plan.target_class, false));
                    }
                    if (week % 2 == 1) {  // biweekly weekend event, uniform mid-day
                        const Date date = civil_from_days(days_from_civil(cfg_.start_date) +
                                                          week * 7 + 5 + static_cast<int>(acc.below(2)));
                        events.emplace_back(date, class_time(pair.plan.target_class, true));
                    }
                }
            } else if (pair.kind == PairKind::DecoyThreePerMonth) {
                // Exactly 3 events in each of the first 3 months.
                for (int month = 0; month < 3; ++month) {
                    for (int k = 0; k < 3; ++k) {
                        const Date date = civil_from_days(days_from_civil(cfg_.start_date) +
                                                          month * 28 + k * 7 + 1);
                        events.emplace_back(date, class_time(accompany::TargetClass::Senior, false));
                    }
                }
            } else {
                // Weekly taps; gap decides whether they count (30 s vs 31 s).
                for (int week = 0; week < n_weeks; ++week) {
                    const Date date =
                        civil_from_days(days_from_civil(cfg_.start_date) + week * 7 + 2);
                    events.emplace_back(date, class_time(accompany::TargetClass::Senior, false));
                }
            }

            // Only in-period events exist in the files or the truth.
            const auto period_begin = days_from_civil(cfg_.start_date);
            const auto period_end = period_begin + cfg_.days;
            std::erase_if(events, [&](const auto& e) {
                const auto z = days_from_civil(e.first);
                return z < period_begin || z >= period_end;
            });

            for (const auto& [date, t] : events) {
                std::int64_t gap;
                switch (pair.kind) {
                    case PairKind::DecoyGap31: gap = 31; break;
                    case PairKind::BoundaryGap30: gap = 30; break;
                    default: gap = 2 + static_cast<std::int64_t>(acc.below(27));
                }
                const bool accompanied_first = acc.chance(0.5);
                const std::string& first_card = accompanied_first ? pair.accompanied : pair.accompanying;
                const std::string& second_card = accompanied_first ? pair.accompanying : pair.accompanied;
                const FareProduct first_product =
                    accompanied_first ? target_product(pair) : pair.accompanying_product;
                const FareProduct second_product =
                    accompanied_first ? pair.accompanying_product : target_product(pair);

                auto emit_tap = [&](const std::string& card, FareProduct product, std::int32_t at) {
                    Stage s;
                    s.card_id = card;
                    s.journey_id = next_journey_id(card);
                    ++manifest_.total_journeys;
                    s.stage_index = 1;
                    s.service_date = date;
                    s.board_stop = board_stop;
                    s.board_time = at;
                    s.mode = rail ? Mode::Rail : Mode::Bus;
                    s.device_id = device;
                    s.fare_product = product;
                    s.fare_paid = 200;
                    if (!rail && coverage.chance(cfg_.alight_coverage)) {
                        // Alight somewhere ordinary; duration keeps speeds sane.
                        s.alight_stop = pattern_stops_[acc.below(pattern_stops_.size())];
                        s.alight_time =
                            at + static_cast<std::int32_t>(
                                     std::max(180.0, netgeo::distance_m(geo_of(board_stop),
                                                                        geo_of(*s.alight_stop)) /
                                                         6.0));
                        s.distance_m = netgeo::distance_m(geo_of(board_stop), geo_of(*s.alight_stop));
                    }
                    if (s.mode == Mode::Bus) {
                        ++manifest_.bus_stages;
                        if (s.alight_stop) ++manifest_.bus_stages_with_alighting;
                    }
                    stages_.push_back(std::move(s));
                    ++manifest_.total_stages;
                };
                emit_tap(first_card, first_product, t);
                emit_tap(second_card, second_product, t + static_cast<std::int32_t>(gap));

                if (pair.kind != PairKind::DecoyGap31) {
                    record_event(pair, date);
                    if (both_target(pair)) record_mirror_event(pair, date);
                }
            }
            finalize_pair_truth(pair);
        }

        for (const auto& pair : planted_pairs_) {
            manifest_.pairs.push_back(pair.truth);
            // The mirrored pattern of a both-target pair: the same taps read
            // with the other card as the accompanied one.
            auto it = mirror_truth_.find(pair.accompanied);
            if (it != mirror_truth_.end()) manifest_.pairs.push_back(it->second);
        }
    }

    static FareProduct target_product(const PlantedPairState& pair) {
        switch (pair.plan.target_class) {
            case accompany::TargetClass::Student: return FareProduct::Student;
            case accompany::TargetClass::Senior: return FareProduct::Senior;
            case accompany::TargetClass::Disabled: return FareProduct::Disabled;
        }
        return FareProduct::Senior;
    }

    static bool both_target(const PlantedPairState& pair) {
        return accompany::target_class_of(pair.accompanying_product).has_value();
    }

    void record_event(PlantedPairState& pair, const Date& date) {
        ++pair.truth.total_events;
        char month[8];
        std::snprintf(month, sizeof month, "%04d-%02d", date.year, date.month);
        ++pair.truth.events_by_month[month];
        ++manifest_.expected_event_total;
    }

    void record_mirror_event(PlantedPairState& pair, const Date& date) {
        auto& mirror = mirror_truth_[pair.accompanied];
        if (mirror.accompanied_card.empty()) {
            mirror.accompanied_card = pair.accompanying;
            mirror.accompanying_card = pair.accompanied;
            mirror.target_class =
                accompany::to_string(*accompany::target_class_of(pair.accompanying_product));
            mirror.weekly_rate = pair.plan.weekly_rate;
            mirror.accompanying_product = to_string(target_product(pair));
            mirror.accompanying_gender = "unknown";
            mirror.accompanying_registered = false;
        }
        ++mirror.total_events;
        char month[8];
        std::snprintf(month, sizeof month, "%04d-%02d", date.year, date.month);
        ++mirror.events_by_month[month];
        ++manifest_.expected_event_total;
    }

    void finalize_pair_truth(PlantedPairState& pair) {
        auto qualify = [](PairTruth& t) {
            bool month_rule = false;
            for (const auto& [m, n] : t.events_by_month) {
                if (n >= accompany::kMonthThreshold) month_rule = true;
            }
            t.qualified = month_rule || t.total_events >= accompany::kQuarterThreshold;
        };
        qualify(pair.truth);
        auto it = mirror_truth_.find(pair.accompanied);
        if (it != mirror_truth_.end()) qualify(it->second);
    }

    const std::vector<std::string>& stops_of(PoiClass cls) {
        auto& cache = class_stop_lists_[static_cast<std::size_t>(cls)];
        if (cache.empty()) {
            const auto& set = poi_class_stops_[static_cast<std::size_t>(cls)];
            cache.assign(set.begin(), set.end());
        }
        return cache;
    }

    void write_stages(const std::string& path) {
        ingest::StageWriter w(path);
        for (const auto& s : stages_) w.write(s);
    }

    SynthConfig cfg_;
    ingest::GtfsSnapshot snapshot_;
    std::vector<Poi> pois_;
    std::vector<CardRegistration> registrations_;
    gender::Cache cache_;
    TruthManifest manifest_;

    std::vector<std::string> pattern_stops_;
    std::vector<std::string> orphan_stops_;
    std::array<std::set<std::string>, kPoiClassCount> poi_class_stops_;
    std::array<std::vector<std::string>, kPoiClassCount> class_stop_lists_;

    std::vector<std::string> regular_women_;
    std::vector<std::string> regular_men_;
    std::vector<std::string> casual_cards_;
    std::vector<std::string> other_cards_;
    std::vector<PlantedPairState> planted_pairs_;
    std::map<std::string, PairTruth> mirror_truth_;

    std::vector<Stage> stages_;
};

inline GeneratedCity generate(const SynthConfig& config, const std::string& out_dir) {
    CityGenerator generator(config);
    return generator.generate(out_dir);
}

inline GeneratedCity null_city(const SynthConfig& config, const std::string& out_dir) {
    return generate(config.null_variant(), out_dir);
}

// ---------------------------------------------------------------------------
// Direct simulation of the one-way random-intercept model, for
// estimator-recovery checks: y_ij = b0 + b1*flag + u_i + e_ij with flags
// alternating within each group.
// ---------------------------------------------------------------------------

inline std::vector<stats::MixedObservation> simulate_mixed_model(double beta0, double beta1,
                                                                 double sigma_u2, double sigma_e2,
                                                                 int n_groups, int per_group,
                                                                 std::uint64_t seed) {
    rng::Stream r(seed, "mixed-model");
    std::vector<stats::MixedObservation> obs;
    obs.reserve(static_cast<std::size_t>(n_groups) * per_group);
    const double su = std::sqrt(sigma_u2);
    const double se = std::sqrt(sigma_e2);
    for (int g = 0; g < n_groups; ++g) {
        const double u = r.normal(0.0, su);
        for (int j = 0; j < per_group; ++j) {
            stats::MixedObservation o;
            o.group_id = "OD" + std::to_string(g);
            o.flag = j % 2;
            o.value = beta0 + beta1 * o.flag + u + r.normal(0.0, se);
            obs.push_back(std::move(o));
        }
    }
    return obs;
}

// ---------------------------------------------------------------------------
// Large flat stage file for the streaming-ingest throughput check. Content is
// deliberately dull; determinism and volume are all that matter.
// ---------------------------------------------------------------------------

inline void write_stress_stages(const std::string& path, std::uint64_t rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out.is_open()) throw Error(ErrorKind::Io, "cannot write " + path, path);
    out << ingest::kStageHeader << '\n';
    char buf[256];
    for (std::uint64_t i = 0; i < rows; ++i) {
        const unsigned card = static_cast<unsigned>(i % 50000);
        const unsigned stop = static_cast<unsigned>(i % 200);
        const unsigned day = static_cast<unsigned>((i / 200000) % 28) + 1;
        const unsigned t = static_cast<unsigned>(21600 + (i * 37) % 57600);
        const int n = std::snprintf(buf, sizeof buf,
                                    "C%u,J%llu,1,2019-01-%02u,S%u,S%u,%u,%u,bus,R1,0,DEV_S%u,full,200,500.0\n",
                                    card, static_cast<unsigned long long>(i), day, stop,
                                    (stop + 1) % 200, t, t + 600, stop);
        out.write(buf, n);
    }
}

}  // namespace careflow::synth
