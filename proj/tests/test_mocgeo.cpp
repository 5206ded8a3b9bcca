#include <catch2/catch.hpp>

#include <algorithm>
#include <random>

#include "careflow/mocgeo.hpp"

using namespace careflow;
using mocgeo::TripEvent;

namespace {

netgeo::PoiStopSets sets_with(std::initializer_list<std::pair<PoiClass, const char*>> stop_classes) {
    netgeo::PoiStopSets sets;
    for (int c = 0; c < kPoiClassCount; ++c) sets[c].poi_class = static_cast<PoiClass>(c);
    int serial = 0;
    for (const auto& [cls, stop] : stop_classes) {
        sets[static_cast<std::size_t>(cls)].entries.insert(
            {"P" + std::to_string(serial++), "R1", 0, stop, 50.0});
    }
    return sets;
}

Stage stage(const std::string& card, const std::string& journey, int index,
            const std::string& board, std::int32_t board_t, Mode mode = Mode::Bus) {
    Stage s;
    s.card_id = card;
    s.journey_id = journey;
    s.stage_index = index;
    s.service_date = {2019, 1, 8};
    s.board_stop = board;
    s.board_time = board_t;
    s.mode = mode;
    s.device_id = "DEV_" + board;
    return s;
}

Journey journey_of(std::vector<Stage> stages) {
    Journey j;
    j.journey_id = stages.front().journey_id;
    j.card_id = stages.front().card_id;
    j.service_date = stages.front().service_date;
    j.day_type = day_type_of(j.service_date);
    j.stages = std::move(stages);
    return j;
}

TripEvent event(const std::string& stop, int day_offset, std::int32_t t, GenderLabel g) {
    TripEvent e;
    e.stop_id = stop;
    e.service_date = civil_from_days(days_from_civil({2019, 1, 7}) + day_offset);
    e.event_time = t;
    e.gender = g;
    return e;
}

}  // namespace

TEST_CASE("time bins cover 06:00-22:00 in quarter hours") {
    REQUIRE_FALSE(mocgeo::bin_of(6 * 3600 - 1).has_value());
    REQUIRE(mocgeo::bin_of(6 * 3600) == 0);
    REQUIRE(mocgeo::bin_of(6 * 3600 + 899) == 0);
    REQUIRE(mocgeo::bin_of(6 * 3600 + 900) == 1);
    REQUIRE(mocgeo::bin_of(22 * 3600 - 1) == 63);
    REQUIRE_FALSE(mocgeo::bin_of(22 * 3600).has_value());
    REQUIRE(mocgeo::bin_start_seconds(0) == 6 * 3600);
    REQUIRE(mocgeo::bin_start_seconds(63) == 22 * 3600 - 900);
}

TEST_CASE("case 1 requires a second-or-later bus boarding at a POI stop") {
    auto sets = sets_with({{PoiClass::Daycare, "POI_STOP"}});

    // single-stage journey boarding at the POI stop: no tag
    auto single = journey_of({stage("C1", "J1", 1, "POI_STOP", 25200)});
    REQUIRE(mocgeo::tag_case1({single}, sets).empty());

    // two-stage journey whose second stage boards at the daycare stop: tagged
    auto chained = journey_of({stage("C1", "J2", 1, "HOME", 25200),
                               stage("C1", "J2", 2, "POI_STOP", 26400)});
    auto tags = mocgeo::tag_case1({chained}, sets);
    REQUIRE(tags.size() == 1);
    REQUIRE(tags[0].poi_class == PoiClass::Daycare);
    REQUIRE(tags[0].stage_index == 2);
    REQUIRE(tags[0].event_time == 26400);

    // first stage at the POI stop contributes nothing
    auto first_at_poi = journey_of({stage("C1", "J3", 1, "POI_STOP", 25200),
                                    stage("C1", "J3", 2, "ELSEWHERE", 26400)});
    REQUIRE(mocgeo::tag_case1({first_at_poi}, sets).empty());

    // rail boardings are out of scope for the geospatial cases
    auto rail = journey_of({stage("C1", "J4", 1, "HOME", 25200),
                            stage("C1", "J4", 2, "POI_STOP", 26400, Mode::Rail)});
    REQUIRE(mocgeo::tag_case1({rail}, sets).empty());
}

TEST_CASE("a stop serving two classes yields two tags") {
    auto sets = sets_with({{PoiClass::School, "SHARED"}, {PoiClass::Grocery, "SHARED"}});
    auto chained = journey_of({stage("C1", "J1", 1, "HOME", 25200),
                               stage("C1", "J1", 2, "SHARED", 26400)});
    auto tags = mocgeo::tag_case1({chained}, sets);
    REQUIRE(tags.size() == 2);
    std::set<PoiClass> classes{tags[0].poi_class, tags[1].poi_class};
    REQUIRE(classes == std::set<PoiClass>{PoiClass::School, PoiClass::Grocery});
}

TEST_CASE("case 2 tags alightings and counts missing inference") {
    auto sets = sets_with({{PoiClass::Grocery, "MARKET"}});
    auto with_alight = stage("C1", "J1", 1, "HOME", 25200);
    with_alight.alight_stop = "MARKET";
    with_alight.alight_time = 26000;
    auto without = stage("C2", "J2", 1, "HOME", 25300);
    auto elsewhere = stage("C3", "J3", 1, "HOME", 25400);
    elsewhere.alight_stop = "OTHER";
    elsewhere.alight_time = 26100;

    auto result = mocgeo::tag_case2({with_alight, without, elsewhere}, sets);
    REQUIRE(result.tags.size() == 1);
    REQUIRE(result.tags[0].poi_class == PoiClass::Grocery);
    REQUIRE(result.tags[0].event_time == 26000);
    REQUIRE(result.stages_with_alighting == 2);
    REQUIRE(result.stages_without_alighting == 1);
    REQUIRE(result.alighting_coverage() == Approx(2.0 / 3.0));
}

TEST_CASE("parity deviation follows the women-share formula") {
    std::vector<TripEvent> events;
    // bin 0 (06:00): 6 women, 4 men
    for (int i = 0; i < 6; ++i) {
        events.push_back(event("S" + std::to_string(i % 3), i % 2, 21600 + 10 * i, GenderLabel::Woman));
    }
    for (int i = 0; i < 4; ++i) {
        events.push_back(event("S" + std::to_string(i % 3), i % 2, 21600 + 10 * i, GenderLabel::Man));
    }
    // bin 4 (07:00): all women
    for (int i = 0; i < 5; ++i) {
        events.push_back(event("S0", 0, 25200 + i, GenderLabel::Woman));
    }
    // one event outside the 06:00-22:00 window: never binned
    events.push_back(event("S0", 0, 5 * 3600, GenderLabel::Woman));

    auto series = mocgeo::parity_series(events);
    REQUIRE(series[0].n_trips == 10);
    REQUIRE(series[0].n_women_trips == 6);
    REQUIRE(series[0].deviation == Approx(0.10));
    REQUIRE(series[4].deviation == Approx(0.50));
    REQUIRE(series[10].n_trips == 0);
    REQUIRE_FALSE(series[10].deviation.has_value());

    // conservation: binned trips account for every in-window event
    std::uint64_t total = 0;
    for (const auto& cell : series) total += cell.n_trips;
    REQUIRE(total == events.size() - 1);
}

TEST_CASE("relabeling genders negates every deviation") {
    std::mt19937 rng(42);
    std::vector<TripEvent> events;
    for (int i = 0; i < 500; ++i) {
        events.push_back(event("S" + std::to_string(rng() % 7), static_cast<int>(rng() % 5),
                               21600 + static_cast<std::int32_t>(rng() % 57600),
                               rng() % 2 ? GenderLabel::Woman : GenderLabel::Man));
    }
    auto flipped = events;
    for (auto& e : flipped) {
        e.gender = e.gender == GenderLabel::Woman ? GenderLabel::Man : GenderLabel::Woman;
    }
    auto a = mocgeo::parity_series(events);
    auto b = mocgeo::parity_series(flipped);
    for (int bin = 0; bin < mocgeo::kBinCount; ++bin) {
        REQUIRE(a[bin].n_trips == b[bin].n_trips);
        if (a[bin].deviation) {
            REQUIRE(*a[bin].deviation == Approx(-*b[bin].deviation).margin(1e-12));
            REQUIRE(a[bin].ci_half_width == Approx(b[bin].ci_half_width).margin(1e-12));
        }
    }
}

TEST_CASE("the CI is measured over stop-day observations") {
    std::vector<TripEvent> events;
    // two stop-days in one bin with deviations +0.5 and -0.5
    events.push_back(event("A", 0, 21600, GenderLabel::Woman));
    events.push_back(event("A", 0, 21610, GenderLabel::Woman));
    events.push_back(event("B", 1, 21620, GenderLabel::Man));
    events.push_back(event("B", 1, 21630, GenderLabel::Man));
    auto series = mocgeo::parity_series(events);
    REQUIRE(series[0].n_observations == 2);
    // sd of {+0.5, -0.5} is sqrt(0.5); half-width = 1.96 * sqrt(0.5) / sqrt(2)
    REQUIRE(series[0].ci_half_width == Approx(1.96 * std::sqrt(0.5) / std::sqrt(2.0)));
    REQUIRE(series[0].deviation == Approx(0.0));
}

TEST_CASE("percentiles interpolate linearly and match a sort oracle") {
    // identical deviations: every percentile equals that value
    auto row = mocgeo::percentile_row("x", {0.07, 0.07, 0.07});
    REQUIRE(row.p25 == 0.07);
    REQUIRE(row.p90 == 0.07);

    std::mt19937 rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> values;
        const int n = 1 + static_cast<int>(rng() % 100);
        for (int i = 0; i < n; ++i) {
            values.push_back(static_cast<double>(rng() % 1000) / 1000.0 - 0.5);
        }
        std::sort(values.begin(), values.end());
        for (double q : {0.25, 0.5, 0.75, 0.9}) {
            // direct linear-interpolation oracle over the sorted sample
            const double h = q * static_cast<double>(n - 1);
            const auto lo = static_cast<std::size_t>(h);
            const double expect =
                lo + 1 < values.size()
                    ? values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo])
                    : values.back();
            REQUIRE(mocgeo::percentile(values, q) == Approx(expect).margin(1e-12));
        }
    }
}

TEST_CASE("per-stop deviations aggregate the full period") {
    std::vector<TripEvent> events;
    // stop A: 3 women of 4; stop B: 1 woman of 4
    for (int i = 0; i < 3; ++i) events.push_back(event("A", i, 25200, GenderLabel::Woman));
    events.push_back(event("A", 3, 25200, GenderLabel::Man));
    events.push_back(event("B", 0, 25200, GenderLabel::Woman));
    for (int i = 0; i < 3; ++i) events.push_back(event("B", i, 25300, GenderLabel::Man));

    auto devs = mocgeo::per_stop_deviations(events, nullptr);
    REQUIRE(devs.size() == 2);
    REQUIRE(devs[0] == Approx(-0.25));
    REQUIRE(devs[1] == Approx(0.25));

    std::set<std::string> only_a{"A"};
    auto filtered = mocgeo::per_stop_deviations(events, &only_a);
    REQUIRE(filtered.size() == 1);
    REQUIRE(filtered[0] == Approx(0.25));
}

TEST_CASE("flow stats divide by the 16-hour window times days") {
    std::vector<TripEvent> events;
    for (int i = 0; i < 32; ++i) events.push_back(event("S1", i % 5, 25200, GenderLabel::Woman));
    for (int i = 0; i < 16; ++i) events.push_back(event("S1", i % 5, 25300, GenderLabel::Man));
    auto row = mocgeo::flow_stats(PoiClass::Daycare, 7, events, 5);
    REQUIRE(row.stops == 7);
    REQUIRE(row.women_stages == 32);
    REQUIRE(row.men_stages == 16);
    REQUIRE(row.women_per_hour == Approx(32.0 / 80.0));
    REQUIRE(row.men_per_hour == Approx(16.0 / 80.0));
    REQUIRE(row.delta == Approx(16.0 / 80.0));

    auto zero = mocgeo::flow_stats(PoiClass::School, 3, {}, 5);
    REQUIRE(zero.women_stages == 0);
    REQUIRE(zero.men_stages == 0);
    REQUIRE(zero.delta == 0.0);
}

TEST_CASE("city-center partition is closed on the boundary") {
    std::vector<Stop> stops;
    auto add = [&](const char* id, double lat, double lon) {
        Stop s;
        s.stop_id = id;
        s.lat = lat;
        s.lon = lon;
        stops.push_back(std::move(s));
    };
    add("IN", 38.90, -77.02);
    add("EDGE", 38.95, -77.02);   // exactly on the north edge
    add("OUT", 38.96, -77.02);
    mocgeo::BoundingBox bbox{38.88, -77.05, 38.95, -77.00};
    auto split = mocgeo::city_center_filter(stops, bbox);
    REQUIRE(split.inside == std::set<std::string>{"IN", "EDGE"});
    REQUIRE(split.outside == std::set<std::string>{"OUT"});

    // a bbox covering nothing puts every stop in the complement
    mocgeo::BoundingBox empty{0.0, 0.0, 0.1, 0.1};
    auto none = mocgeo::city_center_filter(stops, empty);
    REQUIRE(none.inside.empty());
    REQUIRE(none.outside.size() == 3);
}

TEST_CASE("a bbox planted around 40 of 100 stops splits 40/60") {
    std::vector<Stop> stops;
    for (int i = 0; i < 100; ++i) {
        Stop s;
        s.stop_id = "S" + std::to_string(i);
        s.lat = 38.80 + 0.001 * i;  // strictly increasing latitude
        s.lon = -77.03;
        stops.push_back(std::move(s));
    }
    // closed boundary puts stops 0..39 inside
    mocgeo::BoundingBox bbox{38.80, -78.0, 38.80 + 0.001 * 39, -76.0};
    auto split = mocgeo::city_center_filter(stops, bbox);
    REQUIRE(split.inside.size() == 40);
    REQUIRE(split.outside.size() == 60);
}
