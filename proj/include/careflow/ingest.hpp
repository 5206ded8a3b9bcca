#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "careflow/csv.hpp"
#include "careflow/error.hpp"
#include "careflow/types.hpp"

namespace careflow::ingest {

// ---------------------------------------------------------------------------
// GTFS static subset: stops, routes, trips, stop_times. Column order follows
// the header row, as GTFS producers are free to reorder columns.
// ---------------------------------------------------------------------------

struct GtfsTrip {
    std::string route_id;
    std::string trip_id;
    int direction_id = 0;  // 0|1
};

struct GtfsStopTime {
    std::string trip_id;
    int stop_sequence = 0;
    std::string stop_id;
};

struct GtfsSnapshot {
    std::vector<Stop> stops;                          // file order
    std::vector<std::string> routes;                  // file order
    std::vector<GtfsTrip> trips;                      // file order
    std::vector<GtfsStopTime> stop_times;             // sorted by (trip_id, stop_sequence)
    std::unordered_map<std::string, std::size_t> stop_index;  // stop_id -> index in stops

    const Stop* find_stop(const std::string& stop_id) const {
        auto it = stop_index.find(stop_id);
        return it == stop_index.end() ? nullptr : &stops[it->second];
    }
};

namespace detail {

inline std::string join(const std::string& dir, const char* file) {
    return (std::filesystem::path(dir) / file).string();
}

inline void require_file(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw Error(ErrorKind::MissingFile, "required file not found", path);
    }
}

}  // namespace detail

inline GtfsSnapshot load_gtfs(const std::string& dir_path) {
    GtfsSnapshot snap;

    for (const char* f : {"stops.txt", "routes.txt", "trips.txt", "stop_times.txt"}) {
        detail::require_file(detail::join(dir_path, f));
    }

    {
        csv::HeaderReader r(detail::join(dir_path, "stops.txt"));
        const auto c_id = r.column("stop_id");
        const auto c_name = r.column("stop_name");
        const auto c_lat = r.column("stop_lat");
        const auto c_lon = r.column("stop_lon");
        std::vector<std::string> row;
        while (r.next(row)) {
            Stop s;
            s.stop_id = r.field(row, c_id);
            s.name = r.field(row, c_name);
            auto lat = csv::parse_double(r.field(row, c_lat));
            auto lon = csv::parse_double(r.field(row, c_lon));
            if (s.stop_id.empty()) r.fail("empty stop_id");
            if (!lat || *lat < -90.0 || *lat > 90.0) r.fail("stop_lat out of range");
            if (!lon || *lon < -180.0 || *lon > 180.0) r.fail("stop_lon out of range");
            s.lat = *lat;
            s.lon = *lon;
            if (!snap.stop_index.emplace(s.stop_id, snap.stops.size()).second) {
                r.fail("duplicate stop_id '" + s.stop_id + "'");
            }
            snap.stops.push_back(std::move(s));
        }
    }

    std::unordered_set<std::string> route_ids;
    {
        csv::HeaderReader r(detail::join(dir_path, "routes.txt"));
        const auto c_id = r.column("route_id");
        std::vector<std::string> row;
        while (r.next(row)) {
            std::string id{r.field(row, c_id)};
            if (id.empty()) r.fail("empty route_id");
            if (!route_ids.insert(id).second) r.fail("duplicate route_id '" + id + "'");
            snap.routes.push_back(std::move(id));
        }
    }

    std::unordered_set<std::string> trip_ids;
    {
        csv::HeaderReader r(detail::join(dir_path, "trips.txt"));
        const auto c_route = r.column("route_id");
        const auto c_trip = r.column("trip_id");
        const auto c_dir = r.column("direction_id");
        std::vector<std::string> row;
        while (r.next(row)) {
            GtfsTrip t;
            t.route_id = r.field(row, c_route);
            t.trip_id = r.field(row, c_trip);
            auto dir = csv::parse_int(r.field(row, c_dir));
            if (!dir || (*dir != 0 && *dir != 1)) r.fail("direction_id must be 0 or 1");
            t.direction_id = static_cast<int>(*dir);
            if (!route_ids.count(t.route_id)) {
                throw Error(ErrorKind::DanglingReference, "trip references unknown route '" + t.route_id + "'",
                            r.base().path(), r.base().line_no());
            }
            if (!trip_ids.insert(t.trip_id).second) r.fail("duplicate trip_id '" + t.trip_id + "'");
            snap.trips.push_back(std::move(t));
        }
    }

    {
        csv::HeaderReader r(detail::join(dir_path, "stop_times.txt"));
        const auto c_trip = r.column("trip_id");
        const auto c_seq = r.column("stop_sequence");
        const auto c_stop = r.column("stop_id");
        std::vector<std::string> row;
        while (r.next(row)) {
            GtfsStopTime st;
            st.trip_id = r.field(row, c_trip);
            auto seq = csv::parse_int(r.field(row, c_seq));
            if (!seq || *seq < 1) r.fail("stop_sequence must be >= 1");
            st.stop_sequence = static_cast<int>(*seq);
            st.stop_id = r.field(row, c_stop);
            if (!trip_ids.count(st.trip_id)) {
                throw Error(ErrorKind::DanglingReference, "stop_time references unknown trip '" + st.trip_id + "'",
                            r.base().path(), r.base().line_no());
            }
            if (!snap.stop_index.count(st.stop_id)) {
                throw Error(ErrorKind::DanglingReference, "stop_time references unknown stop '" + st.stop_id + "'",
                            r.base().path(), r.base().line_no());
            }
            snap.stop_times.push_back(std::move(st));
        }
    }

    std::stable_sort(snap.stop_times.begin(), snap.stop_times.end(),
                     [](const GtfsStopTime& a, const GtfsStopTime& b) {
                         if (a.trip_id != b.trip_id) return a.trip_id < b.trip_id;
                         return a.stop_sequence < b.stop_sequence;
                     });
    return snap;
}

// ---------------------------------------------------------------------------
// POI registry: poi_id,class,lat,lon
// ---------------------------------------------------------------------------

inline std::vector<Poi> load_pois(const std::string& csv_path) {
    csv::HeaderReader r(csv_path);
    const auto c_id = r.column("poi_id");
    const auto c_class = r.column("class");
    const auto c_lat = r.column("lat");
    const auto c_lon = r.column("lon");
    std::vector<Poi> pois;
    std::unordered_set<std::string> seen;
    std::vector<std::string> row;
    while (r.next(row)) {
        Poi p;
        p.poi_id = r.field(row, c_id);
        if (p.poi_id.empty()) r.fail("empty poi_id");
        if (!seen.insert(p.poi_id).second) r.fail("duplicate poi_id '" + p.poi_id + "'");
        auto cls = parse_poi_class(r.field(row, c_class));
        if (!cls) {
            throw Error(ErrorKind::UnknownClass,
                        "unknown POI class '" + std::string(r.field(row, c_class)) + "'",
                        r.base().path(), r.base().line_no());
        }
        p.poi_class = *cls;
        auto lat = csv::parse_double(r.field(row, c_lat));
        auto lon = csv::parse_double(r.field(row, c_lon));
        if (!lat || *lat < -90.0 || *lat > 90.0) r.fail("lat out of range");
        if (!lon || *lon < -180.0 || *lon > 180.0) r.fail("lon out of range");
        p.lat = *lat;
        p.lon = *lon;
        pois.push_back(std::move(p));
    }
    return pois;
}

// ---------------------------------------------------------------------------
// Stage transactions. Fixed column order, empty string = absent optional.
// The reader streams: peak memory is constant in file size.
// ---------------------------------------------------------------------------

inline constexpr const char* kStageHeader =
    "card_id,journey_id,stage_index,service_date,board_stop,alight_stop,board_time,alight_time,"
    "mode,route_id,direction_id,device_id,fare_product,fare_paid,distance_m";

enum class RowErrorPolicy : std::uint8_t { Fail, Skip };

class StageReader {
  public:
    explicit StageReader(const std::string& path, RowErrorPolicy policy = RowErrorPolicy::Fail)
        : reader_(path), policy_(policy) {
        std::vector<std::string> header;
        if (!reader_.next(header)) reader_.fail("missing header row");
        row_.reserve(15);
    }

    // Next valid stage in file order; nullopt at end of file.
    std::optional<Stage> next() {
        while (reader_.next(row_)) {
            Stage s;
            if (parse_row(s)) return s;
            if (policy_ == RowErrorPolicy::Fail) reader_.fail(last_error_);
            ++skipped_;
        }
        return std::nullopt;
    }

    std::uint64_t skipped() const noexcept { return skipped_; }
    const std::string& path() const noexcept { return reader_.path(); }

  private:
    bool bad(const char* message) {
        last_error_ = message;
        return false;
    }

    bool parse_row(Stage& s) {
        if (row_.size() != 15) return bad("expected 15 fields");
        s.card_id = row_[0];
        s.journey_id = row_[1];
        if (s.card_id.empty() || s.journey_id.empty()) return bad("card_id/journey_id required");
        auto idx = csv::parse_int(row_[2]);
        if (!idx || *idx < 1) return bad("stage_index must be >= 1");
        s.stage_index = static_cast<int>(*idx);
        auto date = parse_date(row_[3]);
        if (!date) return bad("bad service_date");
        s.service_date = *date;
        if (row_[4].empty()) return bad("board_stop required");
        s.board_stop = row_[4];
        if (!row_[5].empty()) s.alight_stop = row_[5];
        auto bt = csv::parse_int(row_[6]);
        if (!bt || *bt < 0) return bad("bad board_time");
        s.board_time = static_cast<std::int32_t>(*bt);
        if (!row_[7].empty()) {
            auto at = csv::parse_int(row_[7]);
            if (!at) return bad("bad alight_time");
            if (*at <= s.board_time) return bad("alight_time must be after board_time");
            s.alight_time = static_cast<std::int32_t>(*at);
        }
        auto mode = parse_mode(row_[8]);
        if (!mode) return bad("bad mode");
        s.mode = *mode;
        if (!row_[9].empty()) s.route_id = row_[9];
        if (!row_[10].empty()) {
            auto dir = csv::parse_int(row_[10]);
            if (!dir || (*dir != 0 && *dir != 1)) return bad("direction_id must be 0 or 1");
            s.direction_id = static_cast<int>(*dir);
        }
        if (row_[11].empty()) return bad("device_id required");
        s.device_id = row_[11];
        auto product = parse_fare_product(row_[12]);
        if (!product) return bad("bad fare_product");
        s.fare_product = *product;
        auto paid = csv::parse_int(row_[13]);
        if (!paid || *paid < 0) return bad("bad fare_paid");
        s.fare_paid = *paid;
        if (!row_[14].empty()) {
            auto dist = csv::parse_double(row_[14]);
            if (!dist || *dist < 0) return bad("bad distance_m");
            s.distance_m = *dist;
        }
        return true;
    }

    csv::Reader reader_;
    RowErrorPolicy policy_;
    std::vector<std::string> row_;
    std::string last_error_;
    std::uint64_t skipped_ = 0;
};

inline void for_each_stage(const std::string& path, RowErrorPolicy policy,
                           const std::function<void(const Stage&)>& fn,
                           std::uint64_t* skipped_out = nullptr) {
    StageReader reader(path, policy);
    while (auto s = reader.next()) fn(*s);
    if (skipped_out) *skipped_out = reader.skipped();
}

// ---------------------------------------------------------------------------
// Card registrations: card_id,first_name,registered
// ---------------------------------------------------------------------------

inline std::vector<CardRegistration> load_registrations(const std::string& path) {
    csv::HeaderReader r(path);
    const auto c_card = r.column("card_id");
    const auto c_name = r.column("first_name");
    const auto c_reg = r.column("registered");
    std::vector<CardRegistration> regs;
    std::unordered_set<std::string> seen;
    std::vector<std::string> row;
    while (r.next(row)) {
        CardRegistration reg;
        reg.card_id = r.field(row, c_card);
        if (reg.card_id.empty()) r.fail("empty card_id");
        if (!seen.insert(reg.card_id).second) r.fail("duplicate card_id '" + reg.card_id + "'");
        std::string_view flag = r.field(row, c_reg);
        if (flag != "0" && flag != "1") r.fail("registered must be 0 or 1");
        reg.registered = flag == "1";
        std::string_view name = r.field(row, c_name);
        if (!name.empty()) {
            if (!reg.registered) r.fail("first_name present on unregistered card");
            reg.first_name_raw = std::string(name);
        }
        regs.push_back(std::move(reg));
    }
    return regs;
}

// ---------------------------------------------------------------------------
// Journey assembly from a stage set (already filtered to the cards of
// interest). Stages of one journey must share card and service date and have
// contiguous 1-based indices.
// ---------------------------------------------------------------------------

inline std::vector<Journey> build_journeys(std::vector<Stage> stages) {
    std::map<std::string, std::vector<Stage>> by_journey;
    for (auto& s : stages) by_journey[s.journey_id].push_back(std::move(s));

    std::vector<Journey> journeys;
    journeys.reserve(by_journey.size());
    for (auto& [jid, legs] : by_journey) {
        std::sort(legs.begin(), legs.end(),
                  [](const Stage& a, const Stage& b) { return a.stage_index < b.stage_index; });
        for (std::size_t i = 0; i < legs.size(); ++i) {
            if (legs[i].stage_index != static_cast<int>(i) + 1) {
                throw Error(ErrorKind::MalformedRow,
                            "journey '" + jid + "' has non-contiguous stage indices");
            }
            if (legs[i].card_id != legs[0].card_id) {
                throw Error(ErrorKind::MalformedRow, "journey '" + jid + "' mixes cards");
            }
            if (!(legs[i].service_date == legs[0].service_date)) {
                throw Error(ErrorKind::MalformedRow, "journey '" + jid + "' mixes service dates");
            }
        }
        Journey j;
        j.journey_id = jid;
        j.card_id = legs[0].card_id;
        j.service_date = legs[0].service_date;
        j.day_type = day_type_of(j.service_date);
        j.stages = std::move(legs);
        journeys.push_back(std::move(j));
    }
    return journeys;
}

// ---------------------------------------------------------------------------
// Writers. These produce exactly what the loaders accept, so a write-then-load
// round trip is the identity; the synthetic-city generator reuses them.
// ---------------------------------------------------------------------------

inline std::string format_coord(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.7f", v);
    return std::string(buf);
}

inline void save_gtfs(const GtfsSnapshot& snap, const std::string& dir_path) {
    std::filesystem::create_directories(dir_path);
    {
        csv::Writer w(detail::join(dir_path, "stops.txt"));
        w.raw_line("stop_id,stop_name,stop_lat,stop_lon");
        for (const auto& s : snap.stops) {
            w.row({s.stop_id, s.name, format_coord(s.lat), format_coord(s.lon)});
        }
    }
    {
        csv::Writer w(detail::join(dir_path, "routes.txt"));
        w.raw_line("route_id");
        for (const auto& r : snap.routes) w.row({r});
    }
    {
        csv::Writer w(detail::join(dir_path, "trips.txt"));
        w.raw_line("route_id,trip_id,direction_id");
        for (const auto& t : snap.trips) {
            w.row({t.route_id, t.trip_id, std::to_string(t.direction_id)});
        }
    }
    {
        csv::Writer w(detail::join(dir_path, "stop_times.txt"));
        w.raw_line("trip_id,stop_sequence,stop_id");
        for (const auto& st : snap.stop_times) {
            w.row({st.trip_id, std::to_string(st.stop_sequence), st.stop_id});
        }
    }
}

inline void save_pois(const std::vector<Poi>& pois, const std::string& path) {
    csv::Writer w(path);
    w.raw_line("poi_id,class,lat,lon");
    for (const auto& p : pois) {
        w.row({p.poi_id, to_string(p.poi_class), format_coord(p.lat), format_coord(p.lon)});
    }
}

class StageWriter {
  public:
    explicit StageWriter(const std::string& path) : w_(path) { w_.raw_line(kStageHeader); }

    void write(const Stage& s) {
        char dist[32] = "";
        if (s.distance_m) std::snprintf(dist, sizeof dist, "%.2f", *s.distance_m);
        w_.row({s.card_id, s.journey_id, std::to_string(s.stage_index), format_date(s.service_date),
                s.board_stop, s.alight_stop.value_or(""), std::to_string(s.board_time),
                s.alight_time ? std::to_string(*s.alight_time) : "", to_string(s.mode),
                s.route_id.value_or(""), s.direction_id ? std::to_string(*s.direction_id) : "",
                s.device_id, to_string(s.fare_product), std::to_string(s.fare_paid), dist});
    }

  private:
    csv::Writer w_;
};

inline void save_registrations(const std::vector<CardRegistration>& regs, const std::string& path) {
    csv::Writer w(path);
    w.raw_line("card_id,first_name,registered");
    for (const auto& r : regs) {
        w.row({r.card_id, r.first_name_raw.value_or(""), r.registered ? "1" : "0"});
    }
}

}  // namespace careflow::ingest
