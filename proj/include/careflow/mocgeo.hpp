#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "careflow/netgeo.hpp"
#include "careflow/types.hpp"

namespace careflow::mocgeo {

// ---------------------------------------------------------------------------
// Time bins: 64 quarter-hour bins covering 06:00-22:00.
// ---------------------------------------------------------------------------

inline constexpr int kBinCount = 64;
inline constexpr std::int32_t kWindowStart = 6 * 3600;
inline constexpr std::int32_t kWindowEnd = 22 * 3600;
inline constexpr std::int32_t kBinSeconds = 15 * 60;
inline constexpr double kWindowHours = 16.0;

inline std::optional<int> bin_of(std::int32_t seconds_of_day) {
    if (seconds_of_day < kWindowStart || seconds_of_day >= kWindowEnd) return std::nullopt;
    return (seconds_of_day - kWindowStart) / kBinSeconds;
}

inline std::int32_t bin_start_seconds(int bin) { return kWindowStart + bin * kBinSeconds; }

// ---------------------------------------------------------------------------
// Mobility-of-care candidate tagging
// ---------------------------------------------------------------------------

struct MocTag {
    std::string card_id;
    std::string journey_id;
    int stage_index = 0;
    PoiClass poi_class = PoiClass::Daycare;
    std::string stop_id;      // the matched POI stop (boarding for case 1, alighting for case 2)
    Date service_date;
    std::int32_t event_time = 0;  // board_time (case 1) or alight_time (case 2)
};

// Case 1: trip-chaining. A second-or-later bus boarding of a multi-stage
// journey at a POI stop; one tag per (stage, class) when the stop serves
// several classes.
inline std::vector<MocTag> tag_case1(const std::vector<Journey>& journeys,
                                     const netgeo::PoiStopSets& sets) {
    std::array<std::set<std::string>, kPoiClassCount> stops;
    for (int c = 0; c < kPoiClassCount; ++c) stops[c] = sets[c].stop_ids();

    std::vector<MocTag> tags;
    for (const auto& j : journeys) {
        if (j.stages.size() < 2) continue;
        for (const auto& s : j.stages) {
            if (s.stage_index < 2 || s.mode != Mode::Bus) continue;
            for (int c = 0; c < kPoiClassCount; ++c) {
                if (!stops[c].count(s.board_stop)) continue;
                tags.push_back(MocTag{s.card_id, s.journey_id, s.stage_index,
                                      static_cast<PoiClass>(c), s.board_stop, s.service_date,
                                      s.board_time});
            }
        }
    }
    return tags;
}

struct Case2Result {
    std::vector<MocTag> tags;
    std::uint64_t stages_with_alighting = 0;
    std::uint64_t stages_without_alighting = 0;  // skipped, counted for coverage

    double alighting_coverage() const {
        const auto total = stages_with_alighting + stages_without_alighting;
        return total == 0 ? 0.0
                          : static_cast<double>(stages_with_alighting) / static_cast<double>(total);
    }
};

// Case 2: end-stop analysis. Any bus stage whose inferred alighting stop is a
// POI stop; stages without an alighting inference are skipped and counted.
inline Case2Result tag_case2(const std::vector<Stage>& stages, const netgeo::PoiStopSets& sets) {
    std::array<std::set<std::string>, kPoiClassCount> stops;
    for (int c = 0; c < kPoiClassCount; ++c) stops[c] = sets[c].stop_ids();

    Case2Result result;
    for (const auto& s : stages) {
        if (s.mode != Mode::Bus) continue;
        if (!s.alight_stop || !s.alight_time) {
            ++result.stages_without_alighting;
            continue;
        }
        ++result.stages_with_alighting;
        for (int c = 0; c < kPoiClassCount; ++c) {
            if (!stops[c].count(*s.alight_stop)) continue;
            result.tags.push_back(MocTag{s.card_id, s.journey_id, s.stage_index,
                                         static_cast<PoiClass>(c), *s.alight_stop, s.service_date,
                                         *s.alight_time});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Deviation from gender parity per time bin
// ---------------------------------------------------------------------------

// One binned trip observation, already restricted to the balanced sample and
// carrying a binary label.
struct TripEvent {
    std::string stop_id;
    Date service_date;
    std::int32_t event_time = 0;
    GenderLabel gender = GenderLabel::Unknown;  // Woman or Man
};

struct ParityCell {
    int bin = 0;
    std::uint64_t n_trips = 0;
    std::uint64_t n_women_trips = 0;
    std::optional<double> deviation;  // n_women/n_trips - 0.5, fraction in [-0.5, 0.5]
    double ci_half_width = 0.0;       // 1.96 * sd(stop-day deviations) / sqrt(#stop-days)
    std::uint64_t n_observations = 0; // stop-day observations backing the CI
};

using ParitySeries = std::array<ParityCell, kBinCount>;

// The CI spread is measured across stop-day observations (boarding stop x
// service date) within the bin, which stays well-defined when alightings are
// missing. Trips outside 06:00-22:00 are not binned.
inline ParitySeries parity_series(const std::vector<TripEvent>& events) {
    struct Obs {
        std::uint64_t women = 0;
        std::uint64_t men = 0;
    };
    std::array<std::map<std::pair<std::string, std::int64_t>, Obs>, kBinCount> obs;
    ParitySeries series;
    for (int b = 0; b < kBinCount; ++b) series[b].bin = b;

    for (const auto& e : events) {
        if (e.gender == GenderLabel::Unknown) continue;
        auto bin = bin_of(e.event_time);
        if (!bin) continue;
        auto& cell = series[*bin];
        ++cell.n_trips;
        auto& o = obs[*bin][{e.stop_id, days_from_civil(e.service_date)}];
        if (e.gender == GenderLabel::Woman) {
            ++cell.n_women_trips;
            ++o.women;
        } else {
            ++o.men;
        }
    }

    for (int b = 0; b < kBinCount; ++b) {
        auto& cell = series[b];
        if (cell.n_trips == 0) continue;
        cell.deviation = static_cast<double>(cell.n_women_trips) / static_cast<double>(cell.n_trips) - 0.5;
        cell.n_observations = obs[b].size();
        if (cell.n_observations >= 2) {
            double mean = 0.0;
            for (const auto& [key, o] : obs[b]) {
                mean += static_cast<double>(o.women) / static_cast<double>(o.women + o.men) - 0.5;
            }
            mean /= static_cast<double>(cell.n_observations);
            double ss = 0.0;
            for (const auto& [key, o] : obs[b]) {
                const double d =
                    static_cast<double>(o.women) / static_cast<double>(o.women + o.men) - 0.5;
                ss += (d - mean) * (d - mean);
            }
            const double sd = std::sqrt(ss / static_cast<double>(cell.n_observations - 1));
            cell.ci_half_width = 1.96 * sd / std::sqrt(static_cast<double>(cell.n_observations));
        }
    }
    return series;
}

// ---------------------------------------------------------------------------
// Per-stop deviation percentiles
// ---------------------------------------------------------------------------

struct PercentileRow {
    std::string scope;  // class name or "all"
    double p25 = 0.0;
    double p50 = 0.0;
    double p75 = 0.0;
    double p90 = 0.0;
    std::size_t stops = 0;
};

// Linear-interpolation percentile over a sorted sample.
inline double percentile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    if (sorted.size() == 1) return sorted.front();
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

// Per-stop aggregate deviation over the full period: women/(women+men) - 0.5
// per stop, from per-stop gender totals.
inline std::vector<double> per_stop_deviations(const std::vector<TripEvent>& events,
                                               const std::set<std::string>* stop_filter) {
    struct Totals {
        std::uint64_t women = 0;
        std::uint64_t men = 0;
    };
    std::map<std::string, Totals> by_stop;
    for (const auto& e : events) {
        if (e.gender == GenderLabel::Unknown) continue;
        if (stop_filter && !stop_filter->count(e.stop_id)) continue;
        auto& t = by_stop[e.stop_id];
        if (e.gender == GenderLabel::Woman) {
            ++t.women;
        } else {
            ++t.men;
        }
    }
    std::vector<double> deviations;
    deviations.reserve(by_stop.size());
    for (const auto& [stop, t] : by_stop) {
        deviations.push_back(static_cast<double>(t.women) / static_cast<double>(t.women + t.men) - 0.5);
    }
    std::sort(deviations.begin(), deviations.end());
    return deviations;
}

inline PercentileRow percentile_row(std::string scope, std::vector<double> sorted_deviations) {
    PercentileRow row;
    row.scope = std::move(scope);
    row.stops = sorted_deviations.size();
    row.p25 = percentile(sorted_deviations, 0.25);
    row.p50 = percentile(sorted_deviations, 0.50);
    row.p75 = percentile(sorted_deviations, 0.75);
    row.p90 = percentile(sorted_deviations, 0.90);
    return row;
}

// ---------------------------------------------------------------------------
// Flow statistics (stage totals and hourly means near POIs)
// ---------------------------------------------------------------------------

struct FlowStatsRow {
    PoiClass poi_class = PoiClass::Daycare;
    std::size_t stops = 0;
    std::uint64_t women_stages = 0;
    std::uint64_t men_stages = 0;
    double women_per_hour = 0.0;
    double men_per_hour = 0.0;
    double delta = 0.0;
};

// Hourly means divide the gender totals by the 16-hour service window times
// the number of days in scope.
inline FlowStatsRow flow_stats(PoiClass poi_class, std::size_t class_stop_count,
                               const std::vector<TripEvent>& class_events, std::size_t days_in_scope) {
    FlowStatsRow row;
    row.poi_class = poi_class;
    row.stops = class_stop_count;
    for (const auto& e : class_events) {
        if (e.gender == GenderLabel::Woman) {
            ++row.women_stages;
        } else if (e.gender == GenderLabel::Man) {
            ++row.men_stages;
        }
    }
    const double hours = kWindowHours * static_cast<double>(days_in_scope);
    if (hours > 0.0) {
        row.women_per_hour = static_cast<double>(row.women_stages) / hours;
        row.men_per_hour = static_cast<double>(row.men_stages) / hours;
        row.delta = row.women_per_hour - row.men_per_hour;
    }
    return row;
}

// ---------------------------------------------------------------------------
// City-center partition
// ---------------------------------------------------------------------------

struct BoundingBox {
    double lat_south = 0.0;
    double lon_west = 0.0;
    double lat_north = 0.0;
    double lon_east = 0.0;

    // Closed on the boundary.
    bool contains(double lat, double lon) const {
        return lat >= lat_south && lat <= lat_north && lon >= lon_west && lon <= lon_east;
    }
};

struct CityCenterSplit {
    std::set<std::string> inside;
    std::set<std::string> outside;
};

inline CityCenterSplit city_center_filter(const std::vector<Stop>& stops, const BoundingBox& bbox) {
    CityCenterSplit split;
    for (const auto& s : stops) {
        if (bbox.contains(s.lat, s.lon)) {
            split.inside.insert(s.stop_id);
        } else {
            split.outside.insert(s.stop_id);
        }
    }
    return split;
}

}  // namespace careflow::mocgeo
