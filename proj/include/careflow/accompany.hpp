#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "careflow/types.hpp"

namespace careflow::accompany {

inline constexpr std::int64_t kMaxGapSeconds = 30;
inline constexpr int kMonthThreshold = 4;    // two round trips in a month
inline constexpr int kQuarterThreshold = 10;
inline constexpr int kLowRateMaxEvents = 13;   // ~1 per week over a quarter
inline constexpr int kHighRateMinEvents = 39;  // ~3 per week over a quarter

enum class TargetClass : std::uint8_t { Student, Senior, Disabled };
inline constexpr int kTargetClassCount = 3;

inline const char* to_string(TargetClass c) {
    switch (c) {
        case TargetClass::Student: return "student";
        case TargetClass::Senior: return "senior";
        case TargetClass::Disabled: return "disabled";
    }
    return "?";
}

inline std::optional<TargetClass> target_class_of(FareProduct p) {
    switch (p) {
        case FareProduct::Student: return TargetClass::Student;
        case FareProduct::Senior: return TargetClass::Senior;
        case FareProduct::Disabled: return TargetClass::Disabled;
        default: return std::nullopt;
    }
}

inline std::optional<TargetClass> parse_target_class(std::string_view s) {
    if (s == "student") return TargetClass::Student;
    if (s == "senior") return TargetClass::Senior;
    if (s == "disabled") return TargetClass::Disabled;
    return std::nullopt;
}

// One tap-in at a fare device. device_id already carries the matching
// granularity: the AFC unit for bus, the mezzanine gate group for rail.
struct Tap {
    std::string card_id;
    std::string device_id;
    Date service_date;
    std::int32_t seconds_of_day = 0;
    Mode mode = Mode::Bus;
    FareProduct fare_product = FareProduct::Full;

    std::int64_t timestamp() const { return absolute_seconds(service_date, seconds_of_day); }
};

inline Tap tap_from_stage(const Stage& s) {
    return Tap{s.card_id, s.device_id, s.service_date, s.board_time, s.mode, s.fare_product};
}

struct AccompanimentEvent {
    std::string accompanied_card;   // holds the target fare product
    std::string accompanying_card;  // any fare product
    TargetClass target_class = TargetClass::Student;
    std::string device_id;
    Date service_date;              // of the earlier tap
    std::int32_t seconds_of_day = 0;
    std::int64_t gap_seconds = 0;   // in [0, 30]
    Mode mode = Mode::Bus;
    FareProduct accompanying_product = FareProduct::Full;
};

// Scans each device's time-ordered taps for consecutive pairs at most 30
// seconds apart where at least one card holds a student/senior/disabled
// product. Tap order within the pair is irrelevant. When both cards hold
// target products the pair emits one event per target card as accompanied.
// Only consecutive taps pair up: a chain A,B,C gives (A,B) and (B,C), never
// (A,C). Devices are independent, so interleaved traffic from other devices
// cannot change a device's events.
inline std::vector<AccompanimentEvent> detect_events(std::vector<Tap> taps) {
    std::sort(taps.begin(), taps.end(), [](const Tap& a, const Tap& b) {
        if (a.device_id != b.device_id) return a.device_id < b.device_id;
        const auto ta = a.timestamp();
        const auto tb = b.timestamp();
        if (ta != tb) return ta < tb;
        return a.card_id < b.card_id;
    });

    std::vector<AccompanimentEvent> events;
    for (std::size_t i = 0; i + 1 < taps.size(); ++i) {
        const Tap& first = taps[i];
        const Tap& second = taps[i + 1];
        if (first.device_id != second.device_id) continue;
        const std::int64_t gap = second.timestamp() - first.timestamp();
        if (gap > kMaxGapSeconds) continue;
        if (first.card_id == second.card_id) continue;

        auto emit = [&](const Tap& accompanied, const Tap& accompanying, TargetClass cls) {
            events.push_back(AccompanimentEvent{accompanied.card_id, accompanying.card_id, cls,
                                                first.device_id, first.service_date,
                                                first.seconds_of_day, gap, first.mode,
                                                accompanying.fare_product});
        };
        if (auto cls = target_class_of(first.fare_product)) emit(first, second, *cls);
        if (auto cls = target_class_of(second.fare_product)) emit(second, first, *cls);
    }
    return events;
}

// ---------------------------------------------------------------------------
// Recurring patterns per (pair, class)
// ---------------------------------------------------------------------------

struct AccompanimentPattern {
    std::string accompanied_card;
    std::string accompanying_card;
    TargetClass target_class = TargetClass::Student;
    std::uint64_t total_events = 0;
    std::map<int, std::uint64_t> events_by_month;  // key: year * 100 + month
    bool qualifies = false;  // any month >= 4, or >= 10 over the quarter
};

struct Quarter {
    Date begin;  // inclusive
    Date end;    // exclusive

    bool contains(const Date& d) const {
        const auto z = days_from_civil(d);
        return z >= days_from_civil(begin) && z < days_from_civil(end);
    }
};

inline std::vector<AccompanimentPattern> aggregate_patterns(
    const std::vector<AccompanimentEvent>& events, const Quarter& quarter) {
    std::map<std::tuple<std::string, std::string, TargetClass>, AccompanimentPattern> patterns;
    for (const auto& e : events) {
        if (!quarter.contains(e.service_date)) continue;
        auto& p = patterns[{e.accompanied_card, e.accompanying_card, e.target_class}];
        if (p.total_events == 0) {
            p.accompanied_card = e.accompanied_card;
            p.accompanying_card = e.accompanying_card;
            p.target_class = e.target_class;
        }
        ++p.total_events;
        ++p.events_by_month[e.service_date.year * 100 + e.service_date.month];
    }
    std::vector<AccompanimentPattern> out;
    out.reserve(patterns.size());
    for (auto& [key, p] : patterns) {
        bool month_rule = false;
        for (const auto& [month, n] : p.events_by_month) {
            if (n >= kMonthThreshold) month_rule = true;
        }
        p.qualifies = month_rule || p.total_events >= kQuarterThreshold;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hourly probability densities per class, with a general-trips baseline
// ---------------------------------------------------------------------------

struct HourlyDensity {
    std::string label;                      // class name or "general"
    DayType day_type = DayType::Weekday;
    std::array<double, 24> density{};       // sums to 1 when any events exist
    std::uint64_t n = 0;
};

inline std::array<double, 24> normalized_histogram(const std::vector<int>& hours) {
    std::array<double, 24> hist{};
    for (int h : hours) {
        if (h >= 0) hist[static_cast<std::size_t>(h % 24)] += 1.0;
    }
    if (!hours.empty()) {
        for (auto& v : hist) v /= static_cast<double>(hours.size());
    }
    return hist;
}

inline std::vector<HourlyDensity> hourly_distribution(const std::vector<AccompanimentEvent>& events,
                                                      const std::vector<Tap>& all_taps,
                                                      DayType day_type) {
    std::array<std::vector<int>, kTargetClassCount> class_hours;
    for (const auto& e : events) {
        if (day_type_of(e.service_date) != day_type) continue;
        class_hours[static_cast<std::size_t>(e.target_class)].push_back(e.seconds_of_day / 3600);
    }
    std::vector<int> general_hours;
    for (const auto& t : all_taps) {
        if (day_type_of(t.service_date) != day_type) continue;
        general_hours.push_back(t.seconds_of_day / 3600);
    }

    std::vector<HourlyDensity> out;
    for (int c = 0; c < kTargetClassCount; ++c) {
        HourlyDensity d;
        d.label = to_string(static_cast<TargetClass>(c));
        d.day_type = day_type;
        d.n = class_hours[c].size();
        d.density = normalized_histogram(class_hours[c]);
        out.push_back(std::move(d));
    }
    HourlyDensity general;
    general.label = "general";
    general.day_type = day_type;
    general.n = general_hours.size();
    general.density = normalized_histogram(general_hours);
    out.push_back(std::move(general));
    return out;
}

// ---------------------------------------------------------------------------
// Accompanying-card composition vs accompaniment volume
// ---------------------------------------------------------------------------

struct RateBucketRow {
    std::uint64_t total_events = 0;       // accompaniment count bucket
    std::uint64_t cards = 0;              // accompanying cards at this count
    std::optional<double> pct_women;      // over registered, gendered cards; absent when none
    double pct_unregistered = 0.0;
};

// Accompanying cards are bucketed by their total accompaniment count across
// all their patterns; per bucket, the share of women among registered
// gendered cards and the share of unregistered cards.
inline std::vector<RateBucketRow> gender_vs_rate(const std::vector<AccompanimentPattern>& patterns,
                                                 const std::map<std::string, GenderLabel>& genders,
                                                 const std::set<std::string>& registered_cards) {
    std::map<std::string, std::uint64_t> totals;
    for (const auto& p : patterns) totals[p.accompanying_card] += p.total_events;

    struct Agg {
        std::uint64_t cards = 0;
        std::uint64_t unregistered = 0;
        std::uint64_t women = 0;
        std::uint64_t gendered = 0;
    };
    std::map<std::uint64_t, Agg> buckets;
    for (const auto& [card, total] : totals) {
        auto& b = buckets[total];
        ++b.cards;
        if (!registered_cards.count(card)) {
            ++b.unregistered;
            continue;
        }
        auto it = genders.find(card);
        const GenderLabel label = it == genders.end() ? GenderLabel::Unknown : it->second;
        if (label == GenderLabel::Unknown) continue;
        ++b.gendered;
        if (label == GenderLabel::Woman) ++b.women;
    }

    std::vector<RateBucketRow> rows;
    for (const auto& [total, b] : buckets) {
        RateBucketRow row;
        row.total_events = total;
        row.cards = b.cards;
        row.pct_unregistered = 100.0 * static_cast<double>(b.unregistered) / static_cast<double>(b.cards);
        if (b.gendered > 0) {
            row.pct_women = 100.0 * static_cast<double>(b.women) / static_cast<double>(b.gendered);
        }
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Fare-product usage for low-rate vs high-rate accompaniers
// ---------------------------------------------------------------------------

enum class RateBucket : std::uint8_t { Low, High };

inline const char* to_string(RateBucket b) { return b == RateBucket::Low ? "low" : "high"; }

struct FareBreakdownRow {
    RateBucket bucket = RateBucket::Low;
    TargetClass target_class = TargetClass::Student;
    FareProduct accompanying_product = FareProduct::Full;
    double pct = 0.0;  // of the (bucket, class) events; rows under 3% are dropped
};

inline constexpr double kFareDisplayFloorPct = 3.0;

// Percentages are computed over all events of the bucket x class cell (they
// sum to 100 before the display floor); the emitted table drops rows below
// the 3% display floor.
inline std::vector<FareBreakdownRow> fare_breakdown(const std::vector<AccompanimentPattern>& patterns,
                                                    const std::vector<AccompanimentEvent>& events) {
    std::map<std::pair<std::string, std::string>, RateBucket> pair_bucket;
    std::map<std::string, std::uint64_t> totals;
    for (const auto& p : patterns) totals[p.accompanying_card] += p.total_events;
    for (const auto& p : patterns) {
        const auto total = totals[p.accompanying_card];
        if (total <= kLowRateMaxEvents) {
            pair_bucket[{p.accompanied_card, p.accompanying_card}] = RateBucket::Low;
        } else if (total >= kHighRateMinEvents) {
            pair_bucket[{p.accompanied_card, p.accompanying_card}] = RateBucket::High;
        }
    }

    using CellKey = std::tuple<RateBucket, TargetClass, FareProduct>;
    std::map<CellKey, std::uint64_t> counts;
    std::map<std::pair<RateBucket, TargetClass>, std::uint64_t> denominators;
    for (const auto& e : events) {
        auto it = pair_bucket.find({e.accompanied_card, e.accompanying_card});
        if (it == pair_bucket.end()) continue;  // mid-rate pairs are out of both buckets
        ++counts[{it->second, e.target_class, e.accompanying_product}];
        ++denominators[{it->second, e.target_class}];
    }

    std::vector<FareBreakdownRow> rows;
    for (const auto& [key, n] : counts) {
        const auto& [bucket, cls, product] = key;
        const double denom = static_cast<double>(denominators[{bucket, cls}]);
        const double pct = 100.0 * static_cast<double>(n) / denom;
        if (pct < kFareDisplayFloorPct) continue;
        rows.push_back(FareBreakdownRow{bucket, cls, product, pct});
    }
    return rows;
}

}  // namespace careflow::accompany
