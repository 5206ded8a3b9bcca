// careflow: mobility-of-care analytics over transit smart-card data.
//
// Subcommands cover the pipeline stages (synth, ingest-check, infer-gender,
// poi-stops, sample, analyze-moc, analyze-accompaniment, stats) plus `run`,
// which orchestrates them over a shared config file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "careflow/gender_http.hpp"
#include "careflow/pipeline.hpp"
#include "careflow/synth.hpp"

namespace {

using namespace careflow;

synth::SynthConfig load_synth_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw Error(ErrorKind::MissingFile, "cannot open config " + path, path);
    synth::SynthConfig cfg;
    int students = 8, seniors = 6, disabled = 5;
    std::string line;
    std::int64_t line_no = 0;
    auto want_u64 = [&](const std::string& v) {
        auto n = csv::parse_int(v);
        if (!n || *n < 0) throw Error(ErrorKind::InvalidConfig, "bad numeric value", path, line_no);
        return static_cast<std::uint64_t>(*n);
    };
    auto want_double = [&](const std::string& v) {
        auto d = csv::parse_double(v);
        if (!d) throw Error(ErrorKind::InvalidConfig, "bad numeric value", path, line_no);
        return *d;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorKind::InvalidConfig, "expected key=value", path, line_no);
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "seed") cfg.seed = want_u64(value);
        else if (key == "n_stops") cfg.n_stops = static_cast<int>(want_u64(value));
        else if (key == "n_routes") cfg.n_routes = static_cast<int>(want_u64(value));
        else if (key == "n_daycares") cfg.n_daycares = static_cast<int>(want_u64(value));
        else if (key == "n_schools") cfg.n_schools = static_cast<int>(want_u64(value));
        else if (key == "n_grocery") cfg.n_grocery = static_cast<int>(want_u64(value));
        else if (key == "isolated_per_class") cfg.isolated_per_class = static_cast<int>(want_u64(value));
        else if (key == "n_cards") cfg.n_cards = static_cast<int>(want_u64(value));
        else if (key == "days") cfg.days = static_cast<int>(want_u64(value));
        else if (key == "start_date") {
            auto d = parse_date(value);
            if (!d) throw Error(ErrorKind::InvalidConfig, "bad start_date", path, line_no);
            cfg.start_date = *d;
        } else if (key == "women_card_share") cfg.women_card_share = want_double(value);
        else if (key == "unknown_name_share") cfg.unknown_name_share = want_double(value);
        else if (key == "unregistered_share") cfg.unregistered_share = want_double(value);
        else if (key == "casual_share") cfg.casual_share = want_double(value);
        else if (key == "poi_bin_women_share") cfg.poi_bin_women_share = want_double(value);
        else if (key == "baseline_women_share") cfg.baseline_women_share = want_double(value);
        else if (key == "alight_coverage") cfg.alight_coverage = want_double(value);
        else if (key == "weekday_background_journeys") cfg.weekday_background_journeys = static_cast<int>(want_u64(value));
        else if (key == "weekend_background_journeys") cfg.weekend_background_journeys = static_cast<int>(want_u64(value));
        else if (key == "chains_per_am_bin") cfg.chains_per_am_bin = static_cast<int>(want_u64(value));
        else if (key == "chains_per_pm_bin") cfg.chains_per_pm_bin = static_cast<int>(want_u64(value));
        else if (key == "other_class_chains_per_bin") cfg.other_class_chains_per_bin = static_cast<int>(want_u64(value));
        else if (key == "student_pairs") students = static_cast<int>(want_u64(value));
        else if (key == "senior_pairs") seniors = static_cast<int>(want_u64(value));
        else if (key == "disabled_pairs") disabled = static_cast<int>(want_u64(value));
        else if (key == "plant_boundary_cases") cfg.plant_boundary_cases = value == "1" || value == "true";
        else if (key == "mm_beta0") cfg.mm_beta0 = want_double(value);
        else if (key == "mm_beta1") cfg.mm_beta1 = want_double(value);
        else if (key == "mm_sigma_u2") cfg.mm_sigma_u2 = want_double(value);
        else if (key == "mm_sigma_e2") cfg.mm_sigma_e2 = want_double(value);
        else throw Error(ErrorKind::InvalidConfig, "unknown synth key '" + key + "'", path, line_no);
    }
    cfg.pairs = synth::SynthConfig::make_pairs(students, seniors, disabled);
    return cfg;
}

stats::ContingencyTable load_table(const std::string& path) {
    csv::Reader r(path);
    stats::ContingencyTable table;
    std::vector<std::string> row;
    if (!r.next(row)) r.fail("empty table");
    for (std::size_t j = 1; j < row.size(); ++j) table.col_labels.push_back(row[j]);
    while (r.next(row)) {
        if (row.size() != table.col_labels.size() + 1) r.fail("ragged table row");
        table.row_labels.push_back(row[0]);
        std::vector<double> cells;
        for (std::size_t j = 1; j < row.size(); ++j) {
            auto v = csv::parse_double(row[j]);
            if (!v) r.fail("bad cell value");
            cells.push_back(*v);
        }
        table.cells.push_back(std::move(cells));
    }
    return table;
}

int run_stats_subcommand(const std::string& kind, const std::string& in_path,
                         const std::string& out_path) {
    csv::Writer w(out_path);
    if (kind == "chi2") {
        auto result = stats::chi_square(load_table(in_path));
        w.raw_line("metric,value");
        char buf[48];
        std::snprintf(buf, sizeof buf, "%.9f", result.statistic);
        w.row({"statistic", buf});
        w.row({"df", std::to_string(result.df)});
        std::snprintf(buf, sizeof buf, "%.12g", result.p_value);
        w.row({"p_value", buf});
        w.row({"low_expected_warning", result.low_expected_warning ? "1" : "0"});
    } else if (kind == "welch") {
        csv::HeaderReader r(in_path);
        const auto c_group = r.column("group");
        const auto c_value = r.column("value");
        std::vector<double> a, b;
        std::vector<std::string> row;
        while (r.next(row)) {
            auto v = csv::parse_double(r.field(row, c_value));
            if (!v) r.fail("bad value");
            std::string_view g = r.field(row, c_group);
            if (g == "a") a.push_back(*v);
            else if (g == "b") b.push_back(*v);
            else r.fail("group must be a or b");
        }
        auto result = stats::welch_t(a, b);
        w.raw_line("metric,value");
        char buf[48];
        auto emit = [&](const char* name, double v) {
            std::snprintf(buf, sizeof buf, "%.9f", v);
            w.row({name, buf});
        };
        emit("mean_a", result.mean_a);
        emit("mean_b", result.mean_b);
        emit("difference", result.diff);
        emit("t", result.t);
        emit("df", result.df);
        std::snprintf(buf, sizeof buf, "%.12g", result.p_value);
        w.row({"p_value", buf});
        emit("skewness_a", result.moments_a.skewness);
        emit("skewness_b", result.moments_b.skewness);
        emit("excess_kurtosis_a", result.moments_a.excess_kurtosis);
        emit("excess_kurtosis_b", result.moments_b.excess_kurtosis);
    } else if (kind == "mixed") {
        csv::HeaderReader r(in_path);
        const auto c_group = r.column("group_id");
        const auto c_flag = r.column("flag");
        const auto c_value = r.column("value");
        std::vector<stats::MixedObservation> obs;
        std::vector<std::string> row;
        while (r.next(row)) {
            stats::MixedObservation o;
            o.group_id = r.field(row, c_group);
            auto flag = csv::parse_int(r.field(row, c_flag));
            if (!flag || (*flag != 0 && *flag != 1)) r.fail("flag must be 0 or 1");
            o.flag = static_cast<int>(*flag);
            auto v = csv::parse_double(r.field(row, c_value));
            if (!v) r.fail("bad value");
            o.value = *v;
            obs.push_back(std::move(o));
        }
        auto fit = stats::fit_random_intercept(obs);
        w.raw_line("metric,value");
        char buf[48];
        auto emit = [&](const char* name, double v) {
            std::snprintf(buf, sizeof buf, "%.9f", v);
            w.row({name, buf});
        };
        emit("beta0", fit.beta0);
        emit("beta1", fit.beta1);
        emit("sigma_u2", fit.sigma_u2);
        emit("sigma_e2", fit.sigma_e2);
        emit("se_beta0", fit.se_beta0);
        emit("se_beta1", fit.se_beta1);
        w.row({"converged", fit.converged ? "1" : "0"});
        w.row({"iterations", std::to_string(fit.iterations)});
    } else {
        throw Error(ErrorKind::InvalidConfig, "stats kind must be chi2, welch or mixed");
    }
    return 0;
}

std::set<std::string> active_cards_of(const std::string& stages_path, int min_days) {
    if (min_days <= 0) return {};
    std::map<std::string, std::set<std::int64_t>> days;
    ingest::for_each_stage(stages_path, ingest::RowErrorPolicy::Fail, [&](const Stage& s) {
        days[s.card_id].insert(days_from_civil(s.service_date));
    });
    std::set<std::string> active;
    for (const auto& [card, d] : days) {
        if (static_cast<int>(d.size()) >= min_days) active.insert(card);
    }
    return active;
}

std::set<std::string> registered_of(const std::string& path) {
    std::set<std::string> out;
    if (path.empty()) return out;
    for (const auto& reg : ingest::load_registrations(path)) {
        if (reg.registered) out.insert(reg.card_id);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"careflow: gender-disaggregated mobility-of-care analytics"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic city with a truth manifest");
    std::string synth_config_path, synth_out_dir;
    std::optional<std::uint64_t> synth_seed;
    bool synth_null = false;
    cmd_synth->add_option("--config", synth_config_path, "synth config file (key=value)");
    cmd_synth->add_option("--out-dir", synth_out_dir, "output directory")->required();
    cmd_synth->add_option("--seed", synth_seed, "override the config seed");
    cmd_synth->add_flag("--null", synth_null, "no planted gender effect anywhere");

    // ---- ingest-check ----
    auto* cmd_check = app.add_subcommand("ingest-check", "validate all inputs and print counts");
    std::string chk_gtfs, chk_pois, chk_stages, chk_regs, chk_cache;
    bool chk_lenient = false;
    cmd_check->add_option("--gtfs", chk_gtfs)->required();
    cmd_check->add_option("--pois", chk_pois)->required();
    cmd_check->add_option("--stages", chk_stages)->required();
    cmd_check->add_option("--registrations", chk_regs)->required();
    cmd_check->add_option("--cache", chk_cache);
    cmd_check->add_flag("--lenient", chk_lenient, "skip malformed stage rows, reporting the count");

    // ---- infer-gender ----
    auto* cmd_gender = app.add_subcommand("infer-gender", "assign gender labels to cards");
    std::string g_regs, g_cache, g_baby, g_provider, g_key, g_out;
    double g_cutoff = gender::kDefaultCutoff;
    cmd_gender->add_option("--registrations", g_regs)->required();
    cmd_gender->add_option("--cache", g_cache)->required();
    cmd_gender->add_option("--baby-names", g_baby);
    cmd_gender->add_option("--provider-url", g_provider);
    cmd_gender->add_option("--api-key", g_key);
    cmd_gender->add_option("--cutoff", g_cutoff);
    cmd_gender->add_option("--out", g_out)->required();

    // ---- poi-stops ----
    auto* cmd_poi = app.add_subcommand("poi-stops", "nearest stops per POI and route direction");
    std::string p_gtfs, p_pois, p_out, p_sens;
    double p_radius = netgeo::kDefaultRadiusM;
    unsigned p_threads = 1;
    cmd_poi->add_option("--gtfs", p_gtfs)->required();
    cmd_poi->add_option("--pois", p_pois)->required();
    cmd_poi->add_option("--radius", p_radius);
    cmd_poi->add_option("--out", p_out)->required();
    cmd_poi->add_option("--sensitivity-out", p_sens);
    cmd_poi->add_option("--threads", p_threads);

    // ---- sample ----
    auto* cmd_sample = app.add_subcommand("sample", "filter active cards and draw the balanced sample");
    std::string s_stages, s_genders, s_regs, s_out;
    int s_min_days = cohort::kDefaultMinActiveDays;
    std::uint64_t s_seed = 1;
    cmd_sample->add_option("--stages", s_stages)->required();
    cmd_sample->add_option("--genders", s_genders)->required();
    cmd_sample->add_option("--registrations", s_regs);
    cmd_sample->add_option("--min-days", s_min_days);
    cmd_sample->add_option("--seed", s_seed);
    cmd_sample->add_option("--out", s_out)->required();

    // ---- analyze-moc ----
    auto* cmd_moc = app.add_subcommand("analyze-moc", "tag care trips and compute parity reports");
    std::string m_stages, m_sample, m_poi_stops, m_gtfs, m_out_dir, m_day = "weekday", m_bbox,
                m_exclude;
    int m_case = 1;
    cmd_moc->add_option("--stages", m_stages)->required();
    cmd_moc->add_option("--sample", m_sample)->required();
    cmd_moc->add_option("--poi-stops", m_poi_stops)->required();
    cmd_moc->add_option("--case", m_case);
    cmd_moc->add_option("--day-type", m_day);
    cmd_moc->add_option("--center-bbox", m_bbox, "latS,lonW,latN,lonE");
    cmd_moc->add_option("--gtfs", m_gtfs, "needed with --center-bbox");
    cmd_moc->add_option("--exclude-dates", m_exclude, "semicolon-separated YYYY-MM-DD");
    cmd_moc->add_option("--out-dir", m_out_dir)->required();

    // ---- analyze-accompaniment ----
    auto* cmd_acc = app.add_subcommand("analyze-accompaniment", "detect recurring card-pair taps");
    std::string a_stages, a_genders, a_regs, a_out_dir;
    int a_min_days = cohort::kDefaultMinActiveDays;
    cmd_acc->add_option("--stages", a_stages)->required();
    cmd_acc->add_option("--genders", a_genders)->required();
    cmd_acc->add_option("--registrations", a_regs);
    cmd_acc->add_option("--min-days", a_min_days, "active-day filter; 0 disables");
    cmd_acc->add_option("--out-dir", a_out_dir)->required();

    // ---- stats ----
    auto* cmd_stats = app.add_subcommand("stats", "chi2 | welch | mixed on a CSV input");
    std::string st_kind, st_in, st_out;
    cmd_stats->add_option("kind", st_kind, "chi2, welch or mixed")->required();
    cmd_stats->add_option("--in", st_in)->required();
    cmd_stats->add_option("--out", st_out)->required();

    // ---- run ----
    auto* cmd_run = app.add_subcommand("run", "run the full pipeline from a config file");
    std::string run_config_path;
    std::vector<std::string> run_sets;
    cmd_run->add_option("--config", run_config_path, "pipeline config (or $CAREFLOW_CONFIG)");
    cmd_run->add_option("--set", run_sets, "override config keys, key=value")->take_all();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_synth) {
            synth::SynthConfig cfg;
            if (!synth_config_path.empty()) cfg = load_synth_config(synth_config_path);
            if (synth_seed) cfg.seed = *synth_seed;
            if (synth_null) cfg = cfg.null_variant();
            auto city = synth::generate(cfg, synth_out_dir);
            std::cout << "city written to " << city.out_dir << "\n"
                      << "stages: " << city.manifest.total_stages
                      << "  journeys: " << city.manifest.total_journeys
                      << "  cards: " << city.manifest.cards.size() << "\n";
            return 0;
        }
        if (*cmd_check) {
            auto snap = ingest::load_gtfs(chk_gtfs);
            auto pois = ingest::load_pois(chk_pois);
            auto regs = ingest::load_registrations(chk_regs);
            std::uint64_t rows = 0, skipped = 0;
            ingest::StageReader reader(chk_stages, chk_lenient ? ingest::RowErrorPolicy::Skip
                                                               : ingest::RowErrorPolicy::Fail);
            while (reader.next()) ++rows;
            skipped = reader.skipped();
            std::size_t cache_size = 0;
            if (!chk_cache.empty()) cache_size = gender::load_cache(chk_cache).size();
            std::cout << "gtfs: " << snap.stops.size() << " stops, " << snap.routes.size()
                      << " routes, " << snap.trips.size() << " trips, " << snap.stop_times.size()
                      << " stop_times\n"
                      << "pois: " << pois.size() << "\nregistrations: " << regs.size()
                      << "\nstages: " << rows << " rows";
            if (chk_lenient) std::cout << " (" << skipped << " skipped)";
            std::cout << "\n";
            if (!chk_cache.empty()) std::cout << "name cache: " << cache_size << " records\n";
            return 0;
        }
        if (*cmd_gender) {
            std::unique_ptr<gender::HttpProvider> provider;
            if (!g_provider.empty()) {
                gender::HttpProvider::Options opt;
                opt.url = g_provider;
                opt.api_key = g_key;
                provider = std::make_unique<gender::HttpProvider>(opt);
            }
            auto result = pipeline::infer_card_genders(g_regs, g_cache, g_baby, g_cutoff,
                                                       provider.get(), g_out);
            std::cout << "cards: " << result.label_by_card.size()
                      << "  named: " << result.named_cards
                      << "  resolved(provider/cache): " << result.resolved_by_provider
                      << "  resolved(fallback): " << result.resolved_by_fallback
                      << "  unresolved: " << result.unresolved << "\n";
            return 0;
        }
        if (*cmd_poi) {
            auto result = pipeline::compute_poi_stops(p_gtfs, p_pois, p_radius, p_threads, p_out,
                                                      p_sens);
            std::size_t entries = 0;
            for (int c = 0; c < kPoiClassCount; ++c) entries += result.sets[c].entries.size();
            std::cout << "poi-stop entries: " << entries << "\n";
            if (result.mean_distances.overall) {
                std::cout << "mean POI-to-stop distance: " << *result.mean_distances.overall
                          << " m\n";
            }
            return 0;
        }
        if (*cmd_sample) {
            auto genders = pipeline::load_card_genders(s_genders);
            auto registered = registered_of(s_regs);
            auto result = pipeline::build_sample(s_stages, genders, registered, s_min_days, s_seed,
                                                 s_out);
            for (const auto& row : result.funnel) {
                std::cout << row.step << ": " << row.cards << " cards, " << row.journeys
                          << " journeys, " << row.stages << " stages\n";
            }
            if (result.sample.insufficient_men) {
                std::cout << "warning: fewer men than women; kept all " << result.sample.men
                          << " men\n";
            }
            return 0;
        }
        if (*cmd_moc) {
            pipeline::Config cfg;
            cfg.moc_case = m_case;
            cfg.set("day_type", m_day);
            if (!m_bbox.empty()) cfg.set("center_bbox", m_bbox);
            if (!m_exclude.empty()) cfg.set("exclude_dates", m_exclude);
            if (cfg.center_bbox && m_gtfs.empty()) {
                throw Error(ErrorKind::InvalidConfig, "--center-bbox requires --gtfs");
            }
            auto sample_genders = cohort::load_sample(m_sample);
            auto sets = netgeo::load_poi_stops(m_poi_stops);
            auto result = pipeline::analyze_moc(m_stages, sample_genders, sets, cfg.moc_case,
                                                cfg.day_type, cfg.center_bbox, cfg.exclude_dates,
                                                m_gtfs, m_out_dir);
            std::cout << "tags: " << result.tags.size() << "\n";
            if (m_case == 2) std::cout << "alighting coverage: " << result.case2_coverage << "\n";
            return 0;
        }
        if (*cmd_acc) {
            auto genders = pipeline::load_card_genders(a_genders);
            auto registered = registered_of(a_regs);
            auto active = active_cards_of(a_stages, a_min_days);
            auto result = pipeline::analyze_accompaniment(a_stages, genders, registered, active,
                                                          a_out_dir);
            std::cout << "events: " << result.events << "  patterns: " << result.patterns
                      << "  qualified: " << result.qualified
                      << "  journeys with events: " << result.journeys_with_events << "\n";
            return 0;
        }
        if (*cmd_stats) {
            return run_stats_subcommand(st_kind, st_in, st_out);
        }
        if (*cmd_run) {
            if (run_config_path.empty()) {
                if (const char* env = std::getenv("CAREFLOW_CONFIG")) run_config_path = env;
            }
            pipeline::Config cfg;
            if (!run_config_path.empty()) cfg = pipeline::Config::from_file(run_config_path);
            for (const auto& kv : run_sets) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) {
                    throw Error(ErrorKind::InvalidConfig, "--set wants key=value");
                }
                cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            std::unique_ptr<gender::HttpProvider> provider;
            if (!cfg.provider_url.empty()) {
                gender::HttpProvider::Options opt;
                opt.url = cfg.provider_url;
                opt.api_key = cfg.api_key;
                provider = std::make_unique<gender::HttpProvider>(opt);
            }
            auto report = pipeline::run_pipeline(cfg, provider.get());
            std::cout << "config hash: " << report.config_hash << "\n";
            for (const auto& row : report.funnel) {
                std::cout << row.step << ": " << row.cards << " cards, " << row.journeys
                          << " journeys, " << row.stages << " stages\n";
            }
            std::cout << "reports under " << cfg.out_dir << "\n";
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "careflow: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "careflow: unexpected error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
