#pragma once

#include <chrono>
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
#include "careflow/cohort.hpp"
#include "careflow/csv.hpp"
#include "careflow/gender.hpp"
#include "careflow/ingest.hpp"
#include "careflow/mocgeo.hpp"
#include "careflow/netgeo.hpp"
#include "careflow/stats.hpp"

namespace careflow::pipeline {

// ---------------------------------------------------------------------------
// Configuration: a flat key=value file; every key can be overridden by a CLI
// flag (flag > file > default).
// ---------------------------------------------------------------------------

struct Config {
    std::string gtfs_dir;
    std::string pois_path;
    std::string stages_path;
    std::string registrations_path;
    std::string name_cache_path;
    std::string baby_names_path;  // optional fallback table
    std::string out_dir = "reports";

    double cutoff = gender::kDefaultCutoff;
    int min_active_days = cohort::kDefaultMinActiveDays;
    std::uint64_t sample_seed = 1;
    double radius_m = netgeo::kDefaultRadiusM;
    int moc_case = 1;                   // 1 = trip chaining, 2 = end stop
    DayType day_type = DayType::Weekday;
    std::optional<mocgeo::BoundingBox> center_bbox;
    std::set<std::string> exclude_dates;  // e.g. holidays, as YYYY-MM-DD

    bool run_moc = true;
    bool run_accompaniment = true;
    bool run_stats = true;
    unsigned threads = 1;

    std::string provider_url;  // empty: cache + fallback only
    std::string api_key;

    std::optional<std::uint64_t> stats_sample_n;
    std::uint64_t stats_sample_seed = 1;

    void set(const std::string& key, const std::string& value);
    static Config from_file(const std::string& path);
    std::string canonical() const;
};

inline void Config::set(const std::string& key, const std::string& value) {
    auto parse_u64 = [&](const std::string& v) {
        auto n = csv::parse_int(v);
        if (!n || *n < 0) throw Error(ErrorKind::InvalidConfig, "bad value for " + key);
        return static_cast<std::uint64_t>(*n);
    };
    if (key == "gtfs_dir") gtfs_dir = value;
    else if (key == "pois") pois_path = value;
    else if (key == "stages") stages_path = value;
    else if (key == "registrations") registrations_path = value;
    else if (key == "name_cache") name_cache_path = value;
    else if (key == "baby_names") baby_names_path = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "cutoff") cutoff = csv::parse_double(value).value_or(-1.0);
    else if (key == "min_active_days") min_active_days = static_cast<int>(parse_u64(value));
    else if (key == "sample_seed") sample_seed = parse_u64(value);
    else if (key == "radius_m") radius_m = csv::parse_double(value).value_or(-1.0);
    else if (key == "case") moc_case = static_cast<int>(parse_u64(value));
    else if (key == "day_type") {
        if (value == "weekday") day_type = DayType::Weekday;
        else if (value == "weekend") day_type = DayType::Weekend;
        else throw Error(ErrorKind::InvalidConfig, "day_type must be weekday or weekend");
    } else if (key == "center_bbox") {
        std::vector<std::string> parts;
        csv::split_line(value, parts);
        if (parts.size() != 4) throw Error(ErrorKind::InvalidConfig, "center_bbox wants latS,lonW,latN,lonE");
        mocgeo::BoundingBox bbox;
        bbox.lat_south = csv::parse_double(parts[0]).value_or(0.0);
        bbox.lon_west = csv::parse_double(parts[1]).value_or(0.0);
        bbox.lat_north = csv::parse_double(parts[2]).value_or(0.0);
        bbox.lon_east = csv::parse_double(parts[3]).value_or(0.0);
        center_bbox = bbox;
    } else if (key == "exclude_dates") {
        exclude_dates.clear();
        std::string token;
        for (char c : value) {
            if (c == ';') {
                if (!token.empty()) exclude_dates.insert(token);
                token.clear();
            } else {
                token += c;
            }
        }
        if (!token.empty()) exclude_dates.insert(token);
    } else if (key == "run_moc") run_moc = value == "1" || value == "true";
    else if (key == "run_accompaniment") run_accompaniment = value == "1" || value == "true";
    else if (key == "run_stats") run_stats = value == "1" || value == "true";
    else if (key == "threads") threads = static_cast<unsigned>(parse_u64(value));
    else if (key == "provider_url") provider_url = value;
    else if (key == "api_key") api_key = value;
    else if (key == "stats_sample_n") stats_sample_n = parse_u64(value);
    else if (key == "stats_sample_seed") stats_sample_seed = parse_u64(value);
    else throw Error(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
}

inline Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw Error(ErrorKind::MissingFile, "cannot open config " + path, path);
    Config cfg;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorKind::InvalidConfig, "expected key=value", path, line_no);
        }
        auto trim = [](std::string s) {
            while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
            return s;
        };
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

// Canonical form covers everything that shapes the analysis; out_dir is
// where results land, not what they are, so it stays out of the hash.
inline std::string Config::canonical() const {
    std::map<std::string, std::string> kv;
    kv["gtfs_dir"] = gtfs_dir;
    kv["pois"] = pois_path;
    kv["stages"] = stages_path;
    kv["registrations"] = registrations_path;
    kv["name_cache"] = name_cache_path;
    kv["baby_names"] = baby_names_path;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", cutoff);
    kv["cutoff"] = buf;
    kv["min_active_days"] = std::to_string(min_active_days);
    kv["sample_seed"] = std::to_string(sample_seed);
    std::snprintf(buf, sizeof buf, "%.3f", radius_m);
    kv["radius_m"] = buf;
    kv["case"] = std::to_string(moc_case);
    kv["day_type"] = day_type == DayType::Weekday ? "weekday" : "weekend";
    if (center_bbox) {
        std::snprintf(buf, sizeof buf, "%.7f,%.7f,%.7f,%.7f", center_bbox->lat_south,
                      center_bbox->lon_west, center_bbox->lat_north, center_bbox->lon_east);
        kv["center_bbox"] = buf;
    }
    std::string dates;
    for (const auto& d : exclude_dates) {
        if (!dates.empty()) dates += ';';
        dates += d;
    }
    kv["exclude_dates"] = dates;
    kv["run_moc"] = run_moc ? "1" : "0";
    kv["run_accompaniment"] = run_accompaniment ? "1" : "0";
    kv["run_stats"] = run_stats ? "1" : "0";
    kv["threads"] = std::to_string(threads);
    kv["provider_url"] = provider_url;
    kv["stats_sample_n"] = stats_sample_n ? std::to_string(*stats_sample_n) : "";
    kv["stats_sample_seed"] = std::to_string(stats_sample_seed);
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

inline std::string config_hash(const Config& cfg) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : cfg.canonical()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Run report: the Table-1-style funnel plus seeds and per-stage timing.
// Timings go to a separate file so the analytical outputs stay byte-stable
// across reruns.
// ---------------------------------------------------------------------------

struct FunnelRow {
    std::string step;
    std::uint64_t cards = 0;
    std::uint64_t journeys = 0;
    std::uint64_t stages = 0;
};

struct RunReport {
    std::vector<FunnelRow> funnel;
    std::map<std::string, std::string> seeds;
    std::map<std::string, std::string> notes;
    std::string config_hash;
    std::vector<std::pair<std::string, double>> timings_ms;

    void check_funnel_monotone() const {
        for (std::size_t i = 1; i < funnel.size(); ++i) {
            if (funnel[i].cards > funnel[i - 1].cards || funnel[i].journeys > funnel[i - 1].journeys ||
                funnel[i].stages > funnel[i - 1].stages) {
                throw Error(ErrorKind::InvalidConfig,
                            "funnel counts increased at step '" + funnel[i].step + "'");
            }
        }
    }

    void save(const std::string& out_dir) const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["seeds"] = seeds;
        j["notes"] = notes;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& row : funnel) {
            rows.push_back({{"step", row.step},
                            {"cards", row.cards},
                            {"journeys", row.journeys},
                            {"stages", row.stages}});
        }
        j["funnel"] = std::move(rows);
        std::ofstream out((std::filesystem::path(out_dir) / "run_report.json").string(),
                          std::ios::binary);
        out << j.dump(2) << '\n';

        std::ofstream timing((std::filesystem::path(out_dir) / "timings.txt").string(),
                             std::ios::binary);
        for (const auto& [stage, ms] : timings_ms) {
            char line[128];
            std::snprintf(line, sizeof line, "%s %.1f ms\n", stage.c_str(), ms);
            timing << line;
        }
    }
};

class StageTimer {
  public:
    StageTimer(RunReport& report, std::string name)
        : report_(report), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        const auto elapsed = std::chrono::steady_clock::now() - start_;
        report_.timings_ms.emplace_back(
            name_, std::chrono::duration<double, std::milli>(elapsed).count());
    }

  private:
    RunReport& report_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

namespace detail {

inline std::string fmt(double v, int decimals = 6) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

inline std::string join_path(const std::string& dir, const char* file) {
    return (std::filesystem::path(dir) / file).string();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gender stage: normalize registration names, resolve through the cache
// (optionally refreshed from a provider), apply the baby-names fallback, and
// emit card_genders.csv.
// ---------------------------------------------------------------------------

struct GenderStageResult {
    std::map<std::string, GenderLabel> label_by_card;
    std::uint64_t registered_cards = 0;
    std::uint64_t named_cards = 0;
    std::uint64_t resolved_by_provider = 0;
    std::uint64_t resolved_by_fallback = 0;
    std::uint64_t unresolved = 0;
};

inline GenderStageResult infer_card_genders(const std::string& registrations_path,
                                            const std::string& cache_path,
                                            const std::string& baby_names_path, double cutoff,
                                            gender::Provider* provider,
                                            const std::string& out_path) {
    auto regs = ingest::load_registrations(registrations_path);
    gender::CacheStore store(gender::load_cache(cache_path));

    std::set<std::string> unique_names;
    std::map<std::string, std::string> name_by_card;
    GenderStageResult result;
    for (const auto& reg : regs) {
        if (reg.registered) ++result.registered_cards;
        if (!reg.first_name_raw) continue;
        auto canonical = gender::normalize_name(*reg.first_name_raw);
        if (canonical.empty()) continue;
        ++result.named_cards;
        unique_names.insert(canonical);
        name_by_card[reg.card_id] = std::move(canonical);
    }

    if (provider) {
        // Network trouble falls through to the cache and fallback table.
        const std::size_t before = store.snapshot()->size();
        try {
            gender::fetch_remote(unique_names, *provider, store);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::ProviderUnreachable && e.kind() != ErrorKind::RateLimited) {
                throw;
            }
        }
        // Provider answers persist, so repeat runs need no network.
        if (store.snapshot()->size() != before) {
            gender::save_cache(*store.snapshot(), cache_path);
        }
    }

    auto snapshot = store.snapshot();
    gender::Cache effective = *snapshot;
    if (!baby_names_path.empty()) {
        auto table = gender::BabyNamesTable::load(baby_names_path);
        std::vector<gender::GenderRecord> unknowns;
        for (const auto& name : unique_names) {
            const auto* rec = snapshot->resolve(name);
            if (!rec || rec->label == GenderLabel::Unknown) {
                unknowns.push_back({name, GenderLabel::Unknown, 0.0, 0,
                                    gender::Source::RemoteProvider});
            }
        }
        for (auto& rec : gender::apply_fallback(std::move(unknowns), table)) {
            if (rec.label != GenderLabel::Unknown) effective.upsert(std::move(rec));
        }
    }

    csv::Writer w(out_path);
    w.raw_line("card_id,label,probability");
    for (const auto& reg : regs) {
        GenderLabel label = GenderLabel::Unknown;
        double probability = 0.0;
        auto it = name_by_card.find(reg.card_id);
        if (it != name_by_card.end()) {
            auto inference = gender::infer_gender(it->second, effective, cutoff);
            label = inference.label;
            probability = inference.probability;
            if (label != GenderLabel::Unknown) {
                const auto* rec = effective.resolve(it->second);
                if (rec && rec->source == gender::Source::BabyNames) {
                    ++result.resolved_by_fallback;
                } else {
                    ++result.resolved_by_provider;
                }
            } else {
                ++result.unresolved;
            }
        }
        result.label_by_card[reg.card_id] = label;
        w.row({reg.card_id, to_string(label), detail::fmt(probability)});
    }
    return result;
}

inline std::map<std::string, GenderLabel> load_card_genders(const std::string& path) {
    csv::HeaderReader r(path);
    const auto c_card = r.column("card_id");
    const auto c_label = r.column("label");
    std::map<std::string, GenderLabel> out;
    std::vector<std::string> row;
    while (r.next(row)) {
        auto label = parse_gender_label(r.field(row, c_label));
        if (!label) r.fail("bad label");
        out[std::string(r.field(row, c_card))] = *label;
    }
    return out;
}

// ---------------------------------------------------------------------------
// POI-stop stage: patterns, nearest stops, sensitivity table.
// ---------------------------------------------------------------------------

struct PoiStageResult {
    netgeo::PoiStopSets sets;
    netgeo::MeanDistanceReport mean_distances;
};

inline PoiStageResult compute_poi_stops(const std::string& gtfs_dir, const std::string& pois_path,
                                        double radius_m, unsigned threads,
                                        const std::string& out_path,
                                        const std::string& sensitivity_out_path) {
    auto snap = ingest::load_gtfs(gtfs_dir);
    auto pois = ingest::load_pois(pois_path);
    auto patterns = netgeo::build_patterns(snap);
    PoiStageResult result;
    result.sets = netgeo::nearest_stops(pois, patterns, snap, radius_m, threads);
    netgeo::save_poi_stops(result.sets, out_path);
    result.mean_distances = netgeo::mean_nearest_distance(result.sets);

    if (!sensitivity_out_path.empty()) {
        auto rows = netgeo::buffer_sensitivity(result.sets);
        csv::Writer w(sensitivity_out_path);
        w.raw_line("class,n_stops,pct_within_200,pct_within_100,pct_within_50");
        for (const auto& row : rows) {
            w.row({to_string(row.poi_class), std::to_string(row.stops),
                   detail::fmt(row.pct_within_200, 2), detail::fmt(row.pct_within_100, 2),
                   detail::fmt(row.pct_within_50, 2)});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Cohort stage: profiles, funnel counts, balanced sample.
// ---------------------------------------------------------------------------

struct CohortStageResult {
    std::vector<FunnelRow> funnel;
    cohort::BalancedSample sample;
    std::map<std::string, GenderLabel> sample_genders;
    std::set<std::string> active_cards;  // path for the accompaniment stage
};

inline CohortStageResult build_sample(const std::string& stages_path,
                                      const std::map<std::string, GenderLabel>& genders,
                                      const std::set<std::string>& registered_cards,
                                      int min_active_days, std::uint64_t seed,
                                      const std::string& out_path) {
    struct CardAgg {
        std::set<std::int64_t> days;
        std::uint64_t stages = 0;
        std::set<std::string> journeys;
        std::uint64_t bus_stages = 0;
        std::set<std::string> bus_journeys;
    };
    std::map<std::string, CardAgg> cards;
    std::uint64_t total_stages = 0;
    std::set<std::string> total_journeys;
    ingest::for_each_stage(stages_path, ingest::RowErrorPolicy::Fail, [&](const Stage& s) {
        ++total_stages;
        total_journeys.insert(s.journey_id);
        auto& agg = cards[s.card_id];
        agg.days.insert(days_from_civil(s.service_date));
        ++agg.stages;
        agg.journeys.insert(s.journey_id);
        if (s.mode == Mode::Bus) {
            ++agg.bus_stages;
            agg.bus_journeys.insert(s.journey_id);
        }
    });

    CohortStageResult result;
    result.funnel.push_back({"full_dataset", cards.size(), total_journeys.size(), total_stages});

    auto label_of = [&](const std::string& card) {
        auto it = genders.find(card);
        return it == genders.end() ? GenderLabel::Unknown : it->second;
    };

    std::vector<cohort::CardProfile> active_profiles;
    FunnelRow active{"active_days", 0, 0, 0};
    FunnelRow on_bus{"on_bus", 0, 0, 0};
    FunnelRow gendered{"registered_with_gender", 0, 0, 0};
    std::set<std::string> journeys_active, journeys_bus, journeys_gendered;
    for (const auto& [card, agg] : cards) {
        if (static_cast<int>(agg.days.size()) < min_active_days) continue;
        result.active_cards.insert(card);
        ++active.cards;
        active.stages += agg.stages;
        journeys_active.insert(agg.journeys.begin(), agg.journeys.end());

        cohort::CardProfile profile;
        profile.card_id = card;
        profile.active_days = static_cast<int>(agg.days.size());
        profile.gender_label = label_of(card);
        profile.registered = registered_cards.count(card) > 0;
        active_profiles.push_back(profile);

        if (agg.bus_stages == 0) continue;  // >= 1 bus tap keeps the card
        ++on_bus.cards;
        on_bus.stages += agg.bus_stages;
        journeys_bus.insert(agg.bus_journeys.begin(), agg.bus_journeys.end());

        if (profile.gender_label == GenderLabel::Unknown) continue;
        ++gendered.cards;
        gendered.stages += agg.bus_stages;
        journeys_gendered.insert(agg.bus_journeys.begin(), agg.bus_journeys.end());
    }
    active.journeys = journeys_active.size();
    on_bus.journeys = journeys_bus.size();
    gendered.journeys = journeys_gendered.size();
    result.funnel.push_back(active);
    result.funnel.push_back(on_bus);
    result.funnel.push_back(gendered);

    result.sample = cohort::balance_sample(active_profiles, seed);

    FunnelRow sampled{"balanced_sample", 0, 0, 0};
    std::set<std::string> journeys_sampled;
    for (const auto& card : result.sample.card_ids) {
        auto it = cards.find(card);
        if (it == cards.end()) continue;
        ++sampled.cards;
        sampled.stages += it->second.bus_stages;
        journeys_sampled.insert(it->second.bus_journeys.begin(), it->second.bus_journeys.end());
        result.sample_genders[card] = label_of(card);
    }
    sampled.journeys = journeys_sampled.size();
    result.funnel.push_back(sampled);

    if (!out_path.empty()) cohort::save_sample(result.sample, result.sample_genders, out_path);
    return result;
}

// ---------------------------------------------------------------------------
// MoC stage: tagging, parity series, percentiles, flow statistics.
// ---------------------------------------------------------------------------

struct MocStageResult {
    std::vector<mocgeo::MocTag> tags;
    double case2_coverage = 0.0;
    std::set<std::string> moc_journey_ids;
    std::size_t days_in_scope = 0;
};

inline MocStageResult analyze_moc(const std::string& stages_path,
                                  const std::map<std::string, GenderLabel>& sample_genders,
                                  const netgeo::PoiStopSets& sets, int moc_case, DayType day_type,
                                  const std::optional<mocgeo::BoundingBox>& center_bbox,
                                  const std::set<std::string>& exclude_dates,
                                  const std::string& gtfs_dir, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);

    auto excluded = [&](const Date& d) { return exclude_dates.count(format_date(d)) > 0; };

    // Stages of sampled cards only; journeys rebuilt from them.
    std::vector<Stage> stages;
    ingest::for_each_stage(stages_path, ingest::RowErrorPolicy::Fail, [&](const Stage& s) {
        if (!sample_genders.count(s.card_id)) return;
        if (excluded(s.service_date)) return;
        stages.push_back(s);
    });

    MocStageResult result;
    if (moc_case == 1) {
        auto journeys = ingest::build_journeys(stages);
        result.tags = mocgeo::tag_case1(journeys, sets);
    } else if (moc_case == 2) {
        auto case2 = mocgeo::tag_case2(stages, sets);
        result.tags = std::move(case2.tags);
        result.case2_coverage = case2.alighting_coverage();
    } else {
        throw Error(ErrorKind::InvalidConfig, "case must be 1 or 2");
    }
    for (const auto& tag : result.tags) result.moc_journey_ids.insert(tag.journey_id);

    std::optional<mocgeo::CityCenterSplit> split;
    if (center_bbox) {
        auto snap = ingest::load_gtfs(gtfs_dir);
        split = mocgeo::city_center_filter(snap.stops, *center_bbox);
    }

    auto gender_of = [&](const std::string& card) {
        auto it = sample_genders.find(card);
        return it == sample_genders.end() ? GenderLabel::Unknown : it->second;
    };

    // Baseline: every sampled bus boarding in the day-type scope.
    std::vector<mocgeo::TripEvent> baseline;
    std::set<std::int64_t> scope_days;
    for (const auto& s : stages) {
        if (s.mode != Mode::Bus) continue;
        if (day_type_of(s.service_date) != day_type) continue;
        scope_days.insert(days_from_civil(s.service_date));
        baseline.push_back({s.board_stop, s.service_date, s.board_time, gender_of(s.card_id)});
    }
    result.days_in_scope = scope_days.size();

    // Tagged events per class in the day-type scope.
    std::array<std::vector<mocgeo::TripEvent>, kPoiClassCount> class_events;
    for (const auto& tag : result.tags) {
        if (day_type_of(tag.service_date) != day_type) continue;
        class_events[static_cast<std::size_t>(tag.poi_class)].push_back(
            {tag.stop_id, tag.service_date, tag.event_time, gender_of(tag.card_id)});
    }

    struct Scope {
        std::string name;
        std::string area;
        std::vector<mocgeo::TripEvent> events;
    };
    std::vector<Scope> scopes;
    scopes.push_back({"all_stops", "all", baseline});
    for (int c = 0; c < kPoiClassCount; ++c) {
        scopes.push_back({to_string(static_cast<PoiClass>(c)), "all", class_events[c]});
    }
    if (split) {
        auto outside_of = [&](const std::vector<mocgeo::TripEvent>& events) {
            std::vector<mocgeo::TripEvent> out;
            for (const auto& e : events) {
                if (split->outside.count(e.stop_id)) out.push_back(e);
            }
            return out;
        };
        scopes.push_back({"all_stops", "outside_center", outside_of(baseline)});
        for (int c = 0; c < kPoiClassCount; ++c) {
            scopes.push_back({to_string(static_cast<PoiClass>(c)), "outside_center",
                              outside_of(class_events[c])});
        }
    }

    const char* day_label = day_type == DayType::Weekday ? "weekday" : "weekend";

    {
        csv::Writer w(detail::join_path(out_dir, "parity_series.csv"));
        w.raw_line(
            "case,day_type,scope,area,bin,bin_start_seconds,n_trips,n_women_trips,deviation,"
            "ci_half_width,n_observations");
        for (const auto& scope : scopes) {
            auto series = mocgeo::parity_series(scope.events);
            for (const auto& cell : series) {
                w.row({std::to_string(moc_case), day_label, scope.name, scope.area,
                       std::to_string(cell.bin), std::to_string(mocgeo::bin_start_seconds(cell.bin)),
                       std::to_string(cell.n_trips), std::to_string(cell.n_women_trips),
                       cell.deviation ? detail::fmt(*cell.deviation) : "",
                       cell.deviation ? detail::fmt(cell.ci_half_width) : "",
                       std::to_string(cell.n_observations)});
            }
        }
    }

    {
        csv::Writer w(detail::join_path(out_dir, "percentiles.csv"));
        w.raw_line("scope,area,n_stops,p25_pct,p50_pct,p75_pct,p90_pct");
        auto emit = [&](const std::string& name, const std::string& area,
                        const std::vector<mocgeo::TripEvent>& events,
                        const std::set<std::string>* filter) {
            auto row = mocgeo::percentile_row(name, mocgeo::per_stop_deviations(events, filter));
            w.row({row.scope, area, std::to_string(row.stops), detail::fmt(100.0 * row.p25, 2),
                   detail::fmt(100.0 * row.p50, 2), detail::fmt(100.0 * row.p75, 2),
                   detail::fmt(100.0 * row.p90, 2)});
        };
        for (int c = 0; c < kPoiClassCount; ++c) {
            emit(to_string(static_cast<PoiClass>(c)), "all", class_events[c], nullptr);
        }
        emit("all", "all", baseline, nullptr);
        if (split) {
            for (int c = 0; c < kPoiClassCount; ++c) {
                emit(to_string(static_cast<PoiClass>(c)), "outside_center", class_events[c],
                     &split->outside);
            }
            emit("all", "outside_center", baseline, &split->outside);
        }
    }

    {
        csv::Writer w(detail::join_path(out_dir, "flow_stats.csv"));
        w.raw_line(
            "day_type,area,class,n_stops,sum_women_stages,sum_men_stages,women_per_hour,"
            "men_per_hour,delta");
        auto emit = [&](const std::string& area, PoiClass cls,
                        const std::vector<mocgeo::TripEvent>& events, std::size_t stop_count) {
            auto row = mocgeo::flow_stats(cls, stop_count, events, result.days_in_scope);
            w.row({day_label, area, to_string(cls), std::to_string(row.stops),
                   std::to_string(row.women_stages), std::to_string(row.men_stages),
                   detail::fmt(row.women_per_hour, 4), detail::fmt(row.men_per_hour, 4),
                   detail::fmt(row.delta, 4)});
        };
        for (int c = 0; c < kPoiClassCount; ++c) {
            emit("all", static_cast<PoiClass>(c), class_events[c], sets[c].stop_ids().size());
        }
        if (split) {
            for (int c = 0; c < kPoiClassCount; ++c) {
                std::vector<mocgeo::TripEvent> outside;
                std::size_t outside_stops = 0;
                for (const auto& id : sets[c].stop_ids()) {
                    if (split->outside.count(id)) ++outside_stops;
                }
                for (const auto& e : class_events[c]) {
                    if (split->outside.count(e.stop_id)) outside.push_back(e);
                }
                emit("outside_center", static_cast<PoiClass>(c), outside, outside_stops);
            }
        }
    }

    return result;
}

// ---------------------------------------------------------------------------
// Accompaniment stage.
// ---------------------------------------------------------------------------

struct AccompanimentStageResult {
    std::uint64_t events = 0;
    std::uint64_t patterns = 0;
    std::uint64_t qualified = 0;
    std::uint64_t journeys_with_events = 0;  // journey-level counting of the same behavior
};

inline AccompanimentStageResult analyze_accompaniment(
    const std::string& stages_path, const std::map<std::string, GenderLabel>& genders,
    const std::set<std::string>& registered_cards, const std::set<std::string>& active_cards,
    const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);

    std::vector<accompany::Tap> taps;
    std::map<std::pair<std::string, std::int64_t>, std::string> journey_at_tap;
    std::optional<Date> min_date, max_date;
    ingest::for_each_stage(stages_path, ingest::RowErrorPolicy::Fail, [&](const Stage& s) {
        if (!active_cards.empty() && !active_cards.count(s.card_id)) return;
        taps.push_back(accompany::tap_from_stage(s));
        journey_at_tap[{s.card_id, absolute_seconds(s.service_date, s.board_time)}] = s.journey_id;
        if (!min_date || s.service_date < *min_date) min_date = s.service_date;
        if (!max_date || *max_date < s.service_date) max_date = s.service_date;
    });

    AccompanimentStageResult result;
    if (!min_date) return result;

    const std::vector<accompany::Tap> general_taps = taps;  // baseline for the densities
    auto events = accompany::detect_events(std::move(taps));
    accompany::Quarter quarter{*min_date, civil_from_days(days_from_civil(*max_date) + 1)};
    auto patterns = accompany::aggregate_patterns(events, quarter);

    result.events = events.size();
    result.patterns = patterns.size();
    std::set<std::string> event_journeys;
    for (const auto& e : events) {
        auto it = journey_at_tap.find(
            {e.accompanied_card, absolute_seconds(e.service_date, e.seconds_of_day)});
        if (it != journey_at_tap.end()) event_journeys.insert(it->second);
    }
    result.journeys_with_events = event_journeys.size();
    for (const auto& p : patterns) {
        if (p.qualifies) ++result.qualified;
    }

    {
        csv::Writer w(detail::join_path(out_dir, "events.csv"));
        w.raw_line(
            "accompanied_card,accompanying_card,class,device_id,service_date,seconds_of_day,"
            "gap_seconds,mode,accompanying_product");
        for (const auto& e : events) {
            w.row({e.accompanied_card, e.accompanying_card, accompany::to_string(e.target_class),
                   e.device_id, format_date(e.service_date), std::to_string(e.seconds_of_day),
                   std::to_string(e.gap_seconds), to_string(e.mode),
                   to_string(e.accompanying_product)});
        }
    }
    {
        csv::Writer w(detail::join_path(out_dir, "patterns.csv"));
        w.raw_line("accompanied_card,accompanying_card,class,total_events,max_month_events,qualifies");
        for (const auto& p : patterns) {
            std::uint64_t max_month = 0;
            for (const auto& [m, n] : p.events_by_month) max_month = std::max(max_month, n);
            w.row({p.accompanied_card, p.accompanying_card, accompany::to_string(p.target_class),
                   std::to_string(p.total_events), std::to_string(max_month),
                   p.qualifies ? "1" : "0"});
        }
    }
    {
        csv::Writer w(detail::join_path(out_dir, "hourly_density.csv"));
        w.raw_line("day_type,label,hour,density,n_events");
        for (DayType dt : {DayType::Weekday, DayType::Weekend}) {
            for (const auto& d : accompany::hourly_distribution(events, general_taps, dt)) {
                for (int h = 0; h < 24; ++h) {
                    w.row({dt == DayType::Weekday ? "weekday" : "weekend", d.label,
                           std::to_string(h), detail::fmt(d.density[h]), std::to_string(d.n)});
                }
            }
        }
    }
    {
        csv::Writer w(detail::join_path(out_dir, "gender_vs_rate.csv"));
        w.raw_line("total_events,n_cards,pct_women,pct_unregistered");
        for (const auto& row : accompany::gender_vs_rate(patterns, genders, registered_cards)) {
            w.row({std::to_string(row.total_events), std::to_string(row.cards),
                   row.pct_women ? detail::fmt(*row.pct_women, 2) : "",
                   detail::fmt(row.pct_unregistered, 2)});
        }
    }
    {
        csv::Writer w(detail::join_path(out_dir, "fare_breakdown.csv"));
        w.raw_line("rate_bucket,class,accompanying_product,pct");
        for (const auto& row : accompany::fare_breakdown(patterns, events)) {
            w.row({accompany::to_string(row.bucket), accompany::to_string(row.target_class),
                   to_string(row.accompanying_product), detail::fmt(row.pct, 2)});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inferential stage: chi-square of gender x MoC, Welch tests on the
// convenience metrics, and the random-intercept model.
// ---------------------------------------------------------------------------

struct StatsStageResult {
    std::optional<stats::ChiSquareResult> chi2;
    std::optional<stats::WelchResult> welch_in_vehicle;
    std::optional<stats::WelchResult> welch_transfers;
    std::optional<stats::MixedModelFit> mixed;
    std::uint64_t convenience_observations = 0;
};

inline StatsStageResult analyze_stats(const std::string& stages_path,
                                      const std::map<std::string, GenderLabel>& sample_genders,
                                      const std::set<std::string>& moc_journey_ids,
                                      const std::string& gtfs_dir,
                                      std::optional<std::uint64_t> sample_n,
                                      std::uint64_t sample_seed, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);

    std::vector<Stage> stages;
    ingest::for_each_stage(stages_path, ingest::RowErrorPolicy::Fail, [&](const Stage& s) {
        if (!sample_genders.count(s.card_id)) return;
        stages.push_back(s);
    });
    auto journeys = ingest::build_journeys(std::move(stages));

    StatsStageResult result;

    // gender x MoC contingency over (optionally subsampled) journeys
    {
        std::vector<const Journey*> pool;
        pool.reserve(journeys.size());
        for (const auto& j : journeys) pool.push_back(&j);
        if (sample_n && *sample_n < pool.size()) {
            std::mt19937_64 rng(sample_seed);
            for (std::size_t i = 0; i < *sample_n; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
                std::swap(pool[i], pool[j]);
            }
            pool.resize(*sample_n);
        }
        double cells[2][2] = {{0, 0}, {0, 0}};
        for (const Journey* j : pool) {
            auto it = sample_genders.find(j->card_id);
            if (it == sample_genders.end() || it->second == GenderLabel::Unknown) continue;
            const int row = it->second == GenderLabel::Woman ? 0 : 1;
            const int col = moc_journey_ids.count(j->journey_id) ? 0 : 1;
            cells[row][col] += 1.0;
        }
        stats::ContingencyTable table;
        table.row_labels = {"woman", "man"};
        table.col_labels = {"moc", "non_moc"};
        table.cells = {{cells[0][0], cells[0][1]}, {cells[1][0], cells[1][1]}};
        bool degenerate = false;
        for (int i = 0; i < 2; ++i) {
            if (cells[i][0] + cells[i][1] == 0.0) degenerate = true;
            if (cells[0][i] + cells[1][i] == 0.0) degenerate = true;
        }
        if (!degenerate) {
            result.chi2 = stats::chi_square(table);
            csv::Writer w(detail::join_path(out_dir, "chi2_result.csv"));
            w.raw_line("metric,value");
            w.row({"statistic", detail::fmt(result.chi2->statistic)});
            w.row({"df", std::to_string(result.chi2->df)});
            w.row({"p_value", detail::fmt(result.chi2->p_value, 9)});
            w.row({"low_expected_warning", result.chi2->low_expected_warning ? "1" : "0"});
            w.row({"n_moc_journeys", detail::fmt(cells[0][0] + cells[1][0], 0)});
            w.row({"n_journeys", detail::fmt(cells[0][0] + cells[0][1] + cells[1][0] + cells[1][1], 0)});
        }
    }

    // convenience metrics across shared O-D pairs
    auto snap = ingest::load_gtfs(gtfs_dir);
    auto samples = stats::moc_convenience(journeys, moc_journey_ids, snap);
    result.convenience_observations = samples.observations.size();
    auto moc_times = samples.in_vehicle(true);
    auto non_times = samples.in_vehicle(false);
    if (moc_times.size() >= 2 && non_times.size() >= 2) {
        csv::Writer w(detail::join_path(out_dir, "welch_result.csv"));
        w.raw_line("variable,mean_moc,mean_non_moc,difference,t,df,p_value,skew_moc,skew_non_moc");
        try {
            result.welch_in_vehicle = stats::welch_t(moc_times, non_times);
            const auto& r = *result.welch_in_vehicle;
            w.row({"in_vehicle_minutes", detail::fmt(r.mean_a, 3), detail::fmt(r.mean_b, 3),
                   detail::fmt(r.diff, 3), detail::fmt(r.t, 3), detail::fmt(r.df, 1),
                   detail::fmt(r.p_value, 9), detail::fmt(r.moments_a.skewness, 3),
                   detail::fmt(r.moments_b.skewness, 3)});
        } catch (const Error&) {
        }
        try {
            result.welch_transfers =
                stats::welch_t(samples.transfers_sample(true), samples.transfers_sample(false));
            const auto& r = *result.welch_transfers;
            w.row({"transfers", detail::fmt(r.mean_a, 3), detail::fmt(r.mean_b, 3),
                   detail::fmt(r.diff, 3), detail::fmt(r.t, 3), detail::fmt(r.df, 1),
                   detail::fmt(r.p_value, 9), detail::fmt(r.moments_a.skewness, 3),
                   detail::fmt(r.moments_b.skewness, 3)});
        } catch (const Error&) {
        }
    }

    // random-intercept model on in-vehicle time
    {
        std::vector<stats::MixedObservation> obs;
        bool has0 = false, has1 = false;
        for (const auto& o : samples.observations) {
            obs.push_back({o.od_pair, o.moc ? 1 : 0, o.in_vehicle_minutes});
            (o.moc ? has1 : has0) = true;
        }
        if (obs.size() >= 3 && has0 && has1) {
            result.mixed = stats::fit_random_intercept(obs);
            const auto& f = *result.mixed;
            csv::Writer w(detail::join_path(out_dir, "mixed_result.csv"));
            w.raw_line("metric,value");
            w.row({"beta0", detail::fmt(f.beta0, 4)});
            w.row({"beta1", detail::fmt(f.beta1, 4)});
            w.row({"sigma_u2", detail::fmt(f.sigma_u2, 4)});
            w.row({"sigma_e2", detail::fmt(f.sigma_e2, 4)});
            w.row({"se_beta0", detail::fmt(f.se_beta0, 4)});
            w.row({"se_beta1", detail::fmt(f.se_beta1, 4)});
            w.row({"converged", f.converged ? "1" : "0"});
            w.row({"iterations", std::to_string(f.iterations)});
            w.row({"log_likelihood", detail::fmt(f.log_likelihood, 4)});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Orchestration: ingest -> gender -> netgeo -> cohort -> analyses, with the
// run report saved at the end. Exit contract: throws on any fatal error.
// ---------------------------------------------------------------------------

inline RunReport run_pipeline(const Config& cfg, gender::Provider* provider = nullptr) {
    RunReport report;
    report.config_hash = config_hash(cfg);
    report.seeds["sample_seed"] = std::to_string(cfg.sample_seed);
    report.seeds["stats_sample_seed"] = std::to_string(cfg.stats_sample_seed);
    std::filesystem::create_directories(cfg.out_dir);

    // ingest validation up front: every fatal input problem names its stage
    std::set<std::string> registered_cards;
    {
        StageTimer t(report, "ingest");
        try {
            auto snap = ingest::load_gtfs(cfg.gtfs_dir);
            report.notes["gtfs_stops"] = std::to_string(snap.stops.size());
            auto pois = ingest::load_pois(cfg.pois_path);
            report.notes["pois"] = std::to_string(pois.size());
            for (const auto& reg : ingest::load_registrations(cfg.registrations_path)) {
                if (reg.registered) registered_cards.insert(reg.card_id);
            }
        } catch (const Error& e) {
            throw Error(e.kind(), std::string("[stage ingest] ") + e.what(), e.file(), e.line());
        }
    }

    GenderStageResult genders;
    {
        StageTimer t(report, "gender");
        genders = infer_card_genders(cfg.registrations_path, cfg.name_cache_path,
                                     cfg.baby_names_path, cfg.cutoff, provider,
                                     detail::join_path(cfg.out_dir, "card_genders.csv"));
        report.notes["names_resolved_by_provider"] = std::to_string(genders.resolved_by_provider);
        report.notes["names_resolved_by_fallback"] = std::to_string(genders.resolved_by_fallback);
        report.notes["names_unresolved"] = std::to_string(genders.unresolved);
    }

    PoiStageResult poi_stage;
    {
        StageTimer t(report, "netgeo");
        poi_stage = compute_poi_stops(cfg.gtfs_dir, cfg.pois_path, cfg.radius_m, cfg.threads,
                                      detail::join_path(cfg.out_dir, "poi_stops.csv"),
                                      detail::join_path(cfg.out_dir, "buffer_sensitivity.csv"));
        if (poi_stage.mean_distances.overall) {
            report.notes["mean_poi_stop_distance_m"] =
                detail::fmt(*poi_stage.mean_distances.overall, 2);
        }
    }

    CohortStageResult cohort_stage;
    {
        StageTimer t(report, "cohort");
        cohort_stage = build_sample(cfg.stages_path, genders.label_by_card, registered_cards,
                                    cfg.min_active_days, cfg.sample_seed,
                                    detail::join_path(cfg.out_dir, "sample.csv"));
        report.funnel = cohort_stage.funnel;
        if (cohort_stage.sample.insufficient_men) report.notes["insufficient_men"] = "1";
    }

    MocStageResult moc_stage;
    if (cfg.run_moc) {
        StageTimer t(report, "mocgeo");
        moc_stage = analyze_moc(cfg.stages_path, cohort_stage.sample_genders, poi_stage.sets,
                                cfg.moc_case, cfg.day_type, cfg.center_bbox, cfg.exclude_dates,
                                cfg.gtfs_dir, cfg.out_dir);
        report.notes["moc_tags"] = std::to_string(moc_stage.tags.size());
        if (cfg.moc_case == 2) {
            report.notes["alighting_coverage"] = detail::fmt(moc_stage.case2_coverage, 4);
        }
    }

    if (cfg.run_accompaniment) {
        StageTimer t(report, "accompany");
        auto acc = analyze_accompaniment(cfg.stages_path, genders.label_by_card, registered_cards,
                                         cohort_stage.active_cards, cfg.out_dir);
        report.notes["accompaniment_events"] = std::to_string(acc.events);
        report.notes["accompaniment_patterns"] = std::to_string(acc.patterns);
        report.notes["accompaniment_qualified"] = std::to_string(acc.qualified);
        report.notes["accompaniment_journeys"] = std::to_string(acc.journeys_with_events);
    }

    if (cfg.run_stats && cfg.run_moc) {
        StageTimer t(report, "stats");
        auto st = analyze_stats(cfg.stages_path, cohort_stage.sample_genders,
                                moc_stage.moc_journey_ids, cfg.gtfs_dir, cfg.stats_sample_n,
                                cfg.stats_sample_seed, cfg.out_dir);
        if (st.chi2) report.notes["chi2_p_value"] = detail::fmt(st.chi2->p_value, 9);
        report.notes["convenience_observations"] = std::to_string(st.convenience_observations);
    }

    report.check_funnel_monotone();
    report.save(cfg.out_dir);
    return report;
}

}  // namespace careflow::pipeline
