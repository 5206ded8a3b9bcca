#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "careflow/error.hpp"

namespace careflow {

// ---------------------------------------------------------------------------
// Calendar dates. Service times are seconds since the service-day midnight
// (may exceed 86400 for late-night service), so timezone arithmetic never
// enters the pipeline.
// ---------------------------------------------------------------------------

struct Date {
    int year = 0;
    int month = 0;  // 1..12
    int day = 0;    // 1..31

    friend auto operator<=>(const Date&, const Date&) = default;
};

// Days since 1970-01-01 (Howard Hinnant's civil-days algorithm).
inline std::int64_t days_from_civil(const Date& d) {
    int y = d.year;
    const int m = d.month;
    y -= m <= 2;
    const int era_base = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era_base * 400);
    const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                         static_cast<unsigned>(d.day) - 1u;
    const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
    return static_cast<std::int64_t>(era_base) * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline Date civil_from_days(std::int64_t z) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return Date{static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

// 0 = Monday ... 6 = Sunday.
inline int weekday_index(const Date& d) {
    std::int64_t z = days_from_civil(d);
    return static_cast<int>(((z % 7) + 10) % 7);  // 1970-01-01 was a Thursday (index 3)
}

enum class DayType : std::uint8_t { Weekday, Weekend };

inline DayType day_type_of(const Date& d) {
    return weekday_index(d) >= 5 ? DayType::Weekend : DayType::Weekday;
}

inline std::optional<Date> parse_date(std::string_view s) {
    // YYYY-MM-DD
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    auto digits = [](std::string_view t) -> std::optional<int> {
        int v = 0;
        for (char c : t) {
            if (c < '0' || c > '9') return std::nullopt;
            v = v * 10 + (c - '0');
        }
        return v;
    };
    auto y = digits(s.substr(0, 4));
    auto m = digits(s.substr(5, 2));
    auto d = digits(s.substr(8, 2));
    if (!y || !m || !d) return std::nullopt;
    if (*m < 1 || *m > 12 || *d < 1 || *d > 31) return std::nullopt;
    return Date{*y, *m, *d};
}

inline std::string format_date(const Date& d) {
    char buf[11];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", d.year, d.month, d.day);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Network + POI types
// ---------------------------------------------------------------------------

struct Stop {
    std::string stop_id;
    double lat = 0.0;  // degrees WGS84, [-90, 90]
    double lon = 0.0;  // degrees WGS84, [-180, 180]
    std::string name;
};

enum class PoiClass : std::uint8_t { Daycare, School, Grocery };
inline constexpr int kPoiClassCount = 3;

inline const char* to_string(PoiClass c) {
    switch (c) {
        case PoiClass::Daycare: return "daycare";
        case PoiClass::School: return "school";
        case PoiClass::Grocery: return "grocery";
    }
    return "?";
}

inline std::optional<PoiClass> parse_poi_class(std::string_view s) {
    if (s == "daycare") return PoiClass::Daycare;
    if (s == "school") return PoiClass::School;
    if (s == "grocery") return PoiClass::Grocery;
    return std::nullopt;
}

struct Poi {
    std::string poi_id;
    PoiClass poi_class = PoiClass::Daycare;
    double lat = 0.0;
    double lon = 0.0;
};

// ---------------------------------------------------------------------------
// Fare-card movement records
// ---------------------------------------------------------------------------

enum class Mode : std::uint8_t { Bus, Rail };

inline const char* to_string(Mode m) { return m == Mode::Bus ? "bus" : "rail"; }

inline std::optional<Mode> parse_mode(std::string_view s) {
    if (s == "bus") return Mode::Bus;
    if (s == "rail") return Mode::Rail;
    return std::nullopt;
}

enum class FareProduct : std::uint8_t { Full, Student, Senior, Disabled, WeeklyPass, Other };

inline const char* to_string(FareProduct p) {
    switch (p) {
        case FareProduct::Full: return "full";
        case FareProduct::Student: return "student";
        case FareProduct::Senior: return "senior";
        case FareProduct::Disabled: return "disabled";
        case FareProduct::WeeklyPass: return "weekly_pass";
        case FareProduct::Other: return "other";
    }
    return "?";
}

inline std::optional<FareProduct> parse_fare_product(std::string_view s) {
    if (s == "full") return FareProduct::Full;
    if (s == "student") return FareProduct::Student;
    if (s == "senior") return FareProduct::Senior;
    if (s == "disabled") return FareProduct::Disabled;
    if (s == "weekly_pass") return FareProduct::WeeklyPass;
    if (s == "other") return FareProduct::Other;
    return std::nullopt;
}

// One vehicle leg of a journey: a single boarding with an optional inferred
// alighting. Times are seconds since the service-day midnight.
struct Stage {
    std::string card_id;
    std::string journey_id;
    int stage_index = 1;  // 1-based within the journey
    Date service_date;
    std::string board_stop;
    std::optional<std::string> alight_stop;
    std::int32_t board_time = 0;
    std::optional<std::int32_t> alight_time;
    Mode mode = Mode::Bus;
    std::optional<std::string> route_id;
    std::optional<int> direction_id;  // 0|1
    std::string device_id;
    FareProduct fare_product = FareProduct::Full;
    std::int64_t fare_paid = 0;  // currency minor units
    std::optional<double> distance_m;

    bool operator==(const Stage&) const = default;
};

// Absolute position on the service timeline, for cross-day ordering.
inline std::int64_t absolute_seconds(const Date& service_date, std::int32_t seconds_of_day) {
    return days_from_civil(service_date) * 86400 + seconds_of_day;
}

struct Journey {
    std::string journey_id;
    std::string card_id;
    Date service_date;
    DayType day_type = DayType::Weekday;
    std::vector<Stage> stages;  // sorted by stage_index, contiguous from 1
};

struct CardRegistration {
    std::string card_id;
    std::optional<std::string> first_name_raw;  // present only when registered
    bool registered = false;
};

// ---------------------------------------------------------------------------
// Gender inference
// ---------------------------------------------------------------------------

enum class GenderLabel : std::uint8_t { Woman, Man, Unknown };

inline const char* to_string(GenderLabel g) {
    switch (g) {
        case GenderLabel::Woman: return "woman";
        case GenderLabel::Man: return "man";
        case GenderLabel::Unknown: return "unknown";
    }
    return "?";
}

inline std::optional<GenderLabel> parse_gender_label(std::string_view s) {
    if (s == "woman") return GenderLabel::Woman;
    if (s == "man") return GenderLabel::Man;
    if (s == "unknown") return GenderLabel::Unknown;
    return std::nullopt;
}

}  // namespace careflow
