// Statistical behavior on generated cities: null-city coverage and overlap
// properties, chi-square calibration across seeded replicates, planted
// accompaniment timing shapes, and the gender-vs-rate gradient.

#include <catch2/catch.hpp>

#include <cmath>
#include <filesystem>

#include "careflow/accompany.hpp"
#include "careflow/stats.hpp"
#include "careflow/synth.hpp"
#include "support/city_analysis.hpp"

using namespace careflow;
using testsupport::analyze_city;
using testsupport::case1_series;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    static fs::path dir = [] {
        auto d = fs::temp_directory_path() / "careflow_nullprops";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

const synth::GeneratedCity& shared_null_city() {
    static synth::GeneratedCity city = [] {
        synth::SynthConfig cfg;
        cfg.seed = 23;
        return synth::null_city(cfg, (scratch() / "null_city").string());
    }();
    return city;
}

const testsupport::CityAnalysis& shared_null_analysis() {
    static testsupport::CityAnalysis analysis =
        analyze_city(shared_null_city(), 31, scratch().string());
    return analysis;
}

const synth::GeneratedCity& shared_planted_city() {
    static synth::GeneratedCity city = [] {
        synth::SynthConfig cfg;
        cfg.seed = 23;
        return synth::generate(cfg, (scratch() / "planted_city").string());
    }();
    return city;
}

// Fraction of bins, nonempty on both sides, whose deviations sit within each
// other's confidence bands.
double overlap_fraction(const mocgeo::ParitySeries& a, const mocgeo::ParitySeries& b,
                        int* bins_out = nullptr) {
    int both = 0, overlapping = 0;
    for (int bin = 0; bin < mocgeo::kBinCount; ++bin) {
        if (!a[bin].deviation || !b[bin].deviation) continue;
        ++both;
        const double gap = std::fabs(*a[bin].deviation - *b[bin].deviation);
        if (gap <= a[bin].ci_half_width + b[bin].ci_half_width) ++overlapping;
    }
    if (bins_out) *bins_out = both;
    return both == 0 ? 0.0 : static_cast<double>(overlapping) / static_cast<double>(both);
}

}  // namespace

TEST_CASE("null-city weekend POI series overlaps the all-stop series") {
    const auto& a = shared_null_analysis();
    const auto daycare = a.sets[static_cast<int>(PoiClass::Daycare)].stop_ids();
    auto poi_series = case1_series(a, DayType::Weekend, &daycare);
    auto all_series = case1_series(a, DayType::Weekend, nullptr);
    int bins = 0;
    const double overlap = overlap_fraction(poi_series, all_series, &bins);
    INFO("bins compared: " << bins << ", overlap " << overlap);
    REQUIRE(bins >= 20);
    REQUIRE(overlap >= 0.90);
}

TEST_CASE("null-city weekday and weekend POI series are indistinguishable") {
    const auto& a = shared_null_analysis();
    const auto daycare = a.sets[static_cast<int>(PoiClass::Daycare)].stop_ids();
    auto weekday = case1_series(a, DayType::Weekday, &daycare);
    auto weekend = case1_series(a, DayType::Weekend, &daycare);
    int bins = 0;
    const double overlap = overlap_fraction(weekday, weekend, &bins);
    INFO("bins compared: " << bins << ", overlap " << overlap);
    REQUIRE(bins >= 15);
    REQUIRE(overlap >= 0.85);
}

TEST_CASE("null-city network deviation averages to zero across bins") {
    const auto& a = shared_null_analysis();
    auto series = case1_series(a, DayType::Weekday, nullptr);
    double sum = 0.0;
    int n = 0;
    for (const auto& cell : series) {
        if (!cell.deviation) continue;
        sum += *cell.deviation;
        ++n;
    }
    REQUIRE(n == mocgeo::kBinCount);
    REQUIRE(std::fabs(sum / n) < 0.005);
}

TEST_CASE("alighting coverage is recovered within a point at full scale") {
    std::uint64_t bus = 0, with_alight = 0;
    ingest::for_each_stage(shared_null_city().stages_path, ingest::RowErrorPolicy::Fail,
                           [&](const Stage& s) {
                               if (s.mode != Mode::Bus) return;
                               ++bus;
                               if (s.alight_stop) ++with_alight;
                           });
    const double coverage = static_cast<double>(with_alight) / static_cast<double>(bus);
    REQUIRE(coverage == Approx(0.65).margin(0.01));
}

TEST_CASE("chi-square over gender x MoC is calibrated on null replicates") {
    int above_05 = 0;
    const int replicates = 10;
    for (int r = 0; r < replicates; ++r) {
        synth::SynthConfig cfg;
        cfg.seed = 505 + static_cast<std::uint64_t>(r);
        cfg.n_stops = 64;
        cfg.n_routes = 6;
        cfg.n_daycares = 8;
        cfg.n_schools = 6;
        cfg.n_grocery = 4;
        cfg.isolated_per_class = 1;
        cfg.n_cards = 700;
        cfg.days = 28;
        cfg.weekday_background_journeys = 300;
        cfg.weekend_background_journeys = 100;
        cfg.chains_per_am_bin = 4;
        cfg.chains_per_pm_bin = 2;
        cfg.other_class_chains_per_bin = 1;
        // accompaniment actors make whole journey blocks per card, which adds
        // within-card correlation the journey-level chi-square cannot see;
        // calibration is judged on the plain traffic
        cfg.pairs.clear();
        cfg.plant_boundary_cases = false;
        auto dir = scratch() / ("chi2_rep_" + std::to_string(r));
        auto city = synth::null_city(cfg, dir.string());
        auto analysis = analyze_city(city, 7000 + r, scratch().string());
        auto flags = testsupport::case1_journey_flags(analysis);

        double cells[2][2] = {{0, 0}, {0, 0}};
        for (const auto& j : flags.journeys) {
            const auto label = analysis.sample_genders.at(j.card_id);
            if (label == GenderLabel::Unknown) continue;
            const int row = label == GenderLabel::Woman ? 0 : 1;
            const int col = flags.moc_ids.count(j.journey_id) ? 0 : 1;
            cells[row][col] += 1.0;
        }
        stats::ContingencyTable table;
        table.row_labels = {"woman", "man"};
        table.col_labels = {"moc", "non_moc"};
        table.cells = {{cells[0][0], cells[0][1]}, {cells[1][0], cells[1][1]}};
        auto result = stats::chi_square(table);
        if (result.p_value > 0.05) ++above_05;
        fs::remove_all(dir);
    }
    INFO("replicates with p > 0.05: " << above_05 << "/" << replicates);
    REQUIRE(above_05 >= 9);
}

TEST_CASE("student accompaniments concentrate at bell times on weekdays") {
    const auto& city = shared_planted_city();
    std::vector<accompany::Tap> taps;
    ingest::for_each_stage(city.stages_path, ingest::RowErrorPolicy::Fail,
                           [&](const Stage& s) { taps.push_back(accompany::tap_from_stage(s)); });
    auto events = accompany::detect_events(std::move(taps));
    std::array<double, 24> hist{};
    std::uint64_t n = 0;
    for (const auto& e : events) {
        if (e.target_class != accompany::TargetClass::Student) continue;
        if (day_type_of(e.service_date) != DayType::Weekday) continue;
        hist[static_cast<std::size_t>(e.seconds_of_day / 3600) % 24] += 1.0;
        ++n;
    }
    REQUIRE(n > 50);
    for (auto& v : hist) v /= static_cast<double>(n);
    // bimodal: morning drop-off plus afternoon pick-up carries nearly all mass
    REQUIRE(hist[7] + hist[15] >= 0.95);
    REQUIRE(hist[7] >= 0.3);
    REQUIRE(hist[15] >= 0.3);
}

TEST_CASE("weekend accompaniment densities are near-identical across classes") {
    const auto& city = shared_planted_city();
    std::vector<accompany::Tap> taps;
    ingest::for_each_stage(city.stages_path, ingest::RowErrorPolicy::Fail,
                           [&](const Stage& s) { taps.push_back(accompany::tap_from_stage(s)); });
    auto events = accompany::detect_events(std::move(taps));
    auto densities = accompany::hourly_distribution(events, {}, DayType::Weekend);

    double worst = 0.0;
    for (int a = 0; a < accompany::kTargetClassCount; ++a) {
        REQUIRE(densities[a].n >= 20);
        for (int b = a + 1; b < accompany::kTargetClassCount; ++b) {
            for (int h = 0; h < 24; ++h) {
                worst = std::max(worst, std::fabs(densities[a].density[h] - densities[b].density[h]));
            }
        }
    }
    INFO("max pairwise density gap " << worst);
    REQUIRE(worst < 0.30);  // planted uniform mid-day window for every class
}

TEST_CASE("flow statistics recover the planted chain rates") {
    const auto& city = shared_null_city();
    const auto& cfg = city.manifest.config;
    const auto& a = shared_null_analysis();

    // Daycare weekday tags in the sample, by gender.
    std::vector<Stage> sampled;
    for (const auto& s : a.stages) {
        if (a.sample_genders.count(s.card_id)) sampled.push_back(s);
    }
    const auto daycare = a.sets[static_cast<int>(PoiClass::Daycare)].stop_ids();
    auto journeys = ingest::build_journeys(std::move(sampled));
    std::vector<mocgeo::TripEvent> events;
    for (const auto& j : journeys) {
        if (j.day_type != DayType::Weekday || j.stages.size() < 2) continue;
        for (const auto& s : j.stages) {
            if (s.stage_index < 2 || s.mode != Mode::Bus || !daycare.count(s.board_stop)) continue;
            events.push_back(
                {s.board_stop, s.service_date, s.board_time, a.sample_genders.at(s.card_id)});
        }
    }

    int weekdays = 0;
    for (int d = 0; d < cfg.days; ++d) {
        const Date date = civil_from_days(days_from_civil(cfg.start_date) + d);
        if (day_type_of(date) == DayType::Weekday) ++weekdays;
    }
    auto row = mocgeo::flow_stats(PoiClass::Daycare, daycare.size(), events,
                                  static_cast<std::size_t>(weekdays));

    // Planted chains per weekday: 10 AM bins plus 14 PM bins, women drawn so
    // that the post-balancing share is one half. Balancing keeps each man
    // with probability rho = women/men.
    const double chains_per_weekday = 10.0 * cfg.chains_per_am_bin + 14.0 * cfg.chains_per_pm_bin;
    const double planted = chains_per_weekday * weekdays;
    const double rho = static_cast<double>(city.manifest.active_women_cards) /
                       static_cast<double>(city.manifest.active_men_cards);
    const double expected_women_per_hour = planted * (rho / (1.0 + rho)) / (16.0 * weekdays);

    REQUIRE(row.women_per_hour == Approx(expected_women_per_hour).epsilon(0.01));
    REQUIRE(row.men_per_hour == Approx(expected_women_per_hour).epsilon(0.01));
    REQUIRE(std::fabs(row.delta) < 0.02 * expected_women_per_hour);
}

TEST_CASE("fare breakdown matches the manifest-derived expectation exactly") {
    const auto& city = shared_planted_city();
    std::vector<accompany::Tap> taps;
    ingest::for_each_stage(city.stages_path, ingest::RowErrorPolicy::Fail,
                           [&](const Stage& s) { taps.push_back(accompany::tap_from_stage(s)); });
    auto events = accompany::detect_events(std::move(taps));
    accompany::Quarter quarter{
        city.manifest.config.start_date,
        civil_from_days(days_from_civil(city.manifest.config.start_date) +
                        city.manifest.config.days)};
    auto patterns = accompany::aggregate_patterns(events, quarter);
    auto rows = accompany::fare_breakdown(patterns, events);

    // Every manifest pair is its accompanying card's only pattern, so the
    // rate bucket follows the pair total directly.
    std::map<std::tuple<std::string, std::string, std::string>, double> cell_events;
    std::map<std::pair<std::string, std::string>, double> cell_totals;
    for (const auto& p : city.manifest.pairs) {
        if (p.total_events == 0) continue;
        std::string bucket;
        if (p.total_events <= accompany::kLowRateMaxEvents) {
            bucket = "low";
        } else if (p.total_events >= accompany::kHighRateMinEvents) {
            bucket = "high";
        } else {
            continue;
        }
        cell_events[{bucket, p.target_class, p.accompanying_product}] +=
            static_cast<double>(p.total_events);
        cell_totals[{bucket, p.target_class}] += static_cast<double>(p.total_events);
    }
    std::map<std::tuple<std::string, std::string, std::string>, double> expected;
    for (const auto& [key, n] : cell_events) {
        const auto& [bucket, cls, product] = key;
        const double pct = 100.0 * n / cell_totals[{bucket, cls}];
        if (pct >= accompany::kFareDisplayFloorPct) expected[key] = pct;
    }

    std::map<std::tuple<std::string, std::string, std::string>, double> actual;
    for (const auto& row : rows) {
        actual[{accompany::to_string(row.bucket), accompany::to_string(row.target_class),
                to_string(row.accompanying_product)}] = row.pct;
    }
    REQUIRE(actual.size() == expected.size());
    for (const auto& [key, pct] : expected) {
        INFO(std::get<0>(key) << "/" << std::get<1>(key) << "/" << std::get<2>(key));
        REQUIRE(actual.count(key) == 1);
        REQUIRE(actual.at(key) == Approx(pct).margin(1e-9));
    }
}

TEST_CASE("women share of accompanying cards rises with the accompaniment rate") {
    synth::SynthConfig cfg;
    cfg.seed = 77;
    cfg.n_stops = 100;
    cfg.n_routes = 8;
    cfg.n_daycares = 6;
    cfg.n_schools = 5;
    cfg.n_grocery = 4;
    cfg.isolated_per_class = 1;
    cfg.n_cards = 1200;
    cfg.days = 90;
    cfg.weekday_background_journeys = 300;
    cfg.weekend_background_journeys = 100;
    cfg.chains_per_am_bin = 2;
    cfg.chains_per_pm_bin = 1;
    cfg.other_class_chains_per_bin = 1;
    cfg.pairs = synth::SynthConfig::make_pairs(15, 15, 15);
    auto dir = scratch() / "gradient_city";
    auto city = synth::generate(cfg, dir.string());

    std::vector<accompany::Tap> taps;
    ingest::for_each_stage(city.stages_path, ingest::RowErrorPolicy::Fail,
                           [&](const Stage& s) { taps.push_back(accompany::tap_from_stage(s)); });
    auto events = accompany::detect_events(std::move(taps));
    accompany::Quarter quarter{cfg.start_date,
                               civil_from_days(days_from_civil(cfg.start_date) + cfg.days)};
    auto patterns = accompany::aggregate_patterns(events, quarter);

    std::map<std::string, GenderLabel> genders;
    std::set<std::string> registered;
    for (const auto& card : city.manifest.cards) {
        genders[card.card_id] = card.gender;
        if (card.registered) registered.insert(card.card_id);
    }
    auto rows = accompany::gender_vs_rate(patterns, genders, registered);

    // Weekly rate 1 lands near ~19 total events, rate 5 near ~71; pool the
    // extremes and compare their compositions.
    double low_women = 0, low_gendered = 0, low_unreg = 0, low_cards = 0;
    double high_women = 0, high_gendered = 0, high_unreg = 0, high_cards = 0;
    for (const auto& row : rows) {
        const bool low = row.total_events <= 25;
        const bool high = row.total_events >= 60;
        if (!low && !high) continue;
        auto& women = low ? low_women : high_women;
        auto& gendered = low ? low_gendered : high_gendered;
        auto& unreg = low ? low_unreg : high_unreg;
        auto& cards = low ? low_cards : high_cards;
        cards += static_cast<double>(row.cards);
        unreg += row.pct_unregistered / 100.0 * static_cast<double>(row.cards);
        if (row.pct_women) {
            // recover counts from the percentages for pooling
            const double registered_gendered =
                static_cast<double>(row.cards) * (1.0 - row.pct_unregistered / 100.0);
            gendered += registered_gendered;
            women += *row.pct_women / 100.0 * registered_gendered;
        }
    }
    REQUIRE(low_cards >= 5);
    REQUIRE(high_cards >= 5);
    REQUIRE(high_gendered > 0);
    const double low_share = low_gendered > 0 ? low_women / low_gendered : 0.0;
    const double high_share = high_women / high_gendered;
    INFO("women share low-rate " << low_share << " vs high-rate " << high_share);
    REQUIRE(high_share > low_share);
    REQUIRE(low_unreg / low_cards > high_unreg / high_cards);
    fs::remove_all(dir);
}
