#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "careflow/csv.hpp"
#include "careflow/error.hpp"
#include "careflow/types.hpp"

namespace careflow::gender {

inline constexpr double kDefaultCutoff = 0.51;

// ---------------------------------------------------------------------------
// Name normalization: whitespace removed, hyphen-separated tokens title-cased,
// hyphens kept unchanged. Blank or digits-only input normalizes to empty.
// Total and idempotent.
// ---------------------------------------------------------------------------

inline std::string normalize_name(std::string_view raw) {
    std::string compact;
    compact.reserve(raw.size());
    for (char c : raw) {
        if (!std::isspace(static_cast<unsigned char>(c))) compact += c;
    }
    if (compact.empty()) return {};
    bool all_digits = std::all_of(compact.begin(), compact.end(), [](char c) {
        return std::isdigit(static_cast<unsigned char>(c));
    });
    if (all_digits) return {};

    std::string out;
    out.reserve(compact.size());
    bool token_start = true;
    for (char c : compact) {
        if (c == '-') {
            out += c;
            token_start = true;
        } else if (token_start) {
            out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            token_start = false;
        } else {
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cache of name -> gender records. A name may carry one record per source;
// lookup resolves manual overrides first, then the remote provider, then the
// baby-names fallback, skipping Unknown records when a lower-priority source
// knows the name.
// ---------------------------------------------------------------------------

enum class Source : std::uint8_t { RemoteProvider, BabyNames, Manual };

inline const char* to_string(Source s) {
    switch (s) {
        case Source::RemoteProvider: return "remote_provider";
        case Source::BabyNames: return "baby_names";
        case Source::Manual: return "manual";
    }
    return "?";
}

inline std::optional<Source> parse_source(std::string_view s) {
    if (s == "remote_provider") return Source::RemoteProvider;
    if (s == "baby_names") return Source::BabyNames;
    if (s == "manual") return Source::Manual;
    return std::nullopt;
}

struct GenderRecord {
    std::string name_canonical;
    GenderLabel label = GenderLabel::Unknown;
    double probability = 0.0;  // of the recorded label, in [0,1]
    std::int64_t count = 0;    // sample size behind the record
    Source source = Source::RemoteProvider;

    bool operator==(const GenderRecord&) const = default;
};

class Cache {
  public:
    // Last writer wins per (name, source).
    void upsert(GenderRecord rec) {
        records_[Key{rec.name_canonical, rec.source}] = std::move(rec);
    }

    const GenderRecord* find(const std::string& name, Source source) const {
        auto it = records_.find(Key{name, source});
        return it == records_.end() ? nullptr : &it->second;
    }

    // Resolution order: Manual, RemoteProvider, BabyNames; a record whose
    // label is Unknown yields to a lower-priority record that knows the name.
    const GenderRecord* resolve(const std::string& name) const {
        static constexpr Source order[] = {Source::Manual, Source::RemoteProvider, Source::BabyNames};
        const GenderRecord* first_seen = nullptr;
        for (Source src : order) {
            if (const GenderRecord* rec = find(name, src)) {
                if (!first_seen) first_seen = rec;
                if (rec->label != GenderLabel::Unknown) return rec;
            }
        }
        return first_seen;
    }

    std::size_t size() const noexcept { return records_.size(); }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [key, rec] : records_) fn(rec);
    }

    // Merge = upsert every record of `other` into a copy of *this.
    // Commutative across disjoint name sets.
    friend Cache merge(const Cache& base, const Cache& other) {
        Cache out = base;
        other.for_each([&](const GenderRecord& rec) { out.upsert(rec); });
        return out;
    }

  private:
    struct Key {
        std::string name;
        Source source;
        auto operator<=>(const Key&) const = default;
    };
    std::map<Key, GenderRecord> records_;
};

// Readers see immutable snapshots; refresh swaps in a new snapshot atomically.
class CacheStore {
  public:
    explicit CacheStore(Cache initial = {})
        : snapshot_(std::make_shared<const Cache>(std::move(initial))) {}

    std::shared_ptr<const Cache> snapshot() const {
        std::lock_guard lock(mutex_);
        return snapshot_;
    }

    void merge_and_swap(const Cache& updates) {
        std::lock_guard lock(mutex_);
        snapshot_ = std::make_shared<const Cache>(merge(*snapshot_, updates));
    }

  private:
    mutable std::mutex mutex_;
    std::shared_ptr<const Cache> snapshot_;
};

// ---------------------------------------------------------------------------
// Inference: a non-Unknown label is returned only when the cached probability
// clears the cutoff. Raising the cutoff can only move labels to Unknown.
// ---------------------------------------------------------------------------

struct Inference {
    GenderLabel label = GenderLabel::Unknown;
    double probability = 0.0;
};

inline Inference infer_gender(const std::string& name_canonical, const Cache& cache,
                              double cutoff = kDefaultCutoff) {
    if (!(cutoff > 0.5) || cutoff > 1.0) {
        throw Error(ErrorKind::InvalidConfig, "cutoff must be in (0.5, 1]");
    }
    const GenderRecord* rec = cache.resolve(name_canonical);
    if (!rec || rec->label == GenderLabel::Unknown) return {GenderLabel::Unknown, 0.0};
    if (rec->probability >= cutoff) return {rec->label, rec->probability};
    return {GenderLabel::Unknown, rec->probability};
}

// ---------------------------------------------------------------------------
// Baby-names fallback table: (name, gender, count) rows, counts summed across
// all years. Only Unknown records are touched.
// ---------------------------------------------------------------------------

struct BabyNamesTable {
    struct Counts {
        std::int64_t woman = 0;
        std::int64_t man = 0;
    };
    std::map<std::string, Counts> by_name;

    static BabyNamesTable load(const std::string& path) {
        csv::HeaderReader r(path);
        const auto c_name = r.column("name");
        const auto c_gender = r.column("gender");
        const auto c_count = r.column("count");
        BabyNamesTable table;
        std::vector<std::string> row;
        while (r.next(row)) {
            std::string name = normalize_name(r.field(row, c_name));
            if (name.empty()) r.fail("blank or numeric name");
            auto count = csv::parse_int(r.field(row, c_count));
            if (!count || *count < 0) r.fail("bad count");
            std::string_view g = r.field(row, c_gender);
            if (g == "F") {
                table.by_name[name].woman += *count;
            } else if (g == "M") {
                table.by_name[name].man += *count;
            } else {
                r.fail("gender must be F or M");
            }
        }
        return table;
    }
};

inline std::vector<GenderRecord> apply_fallback(std::vector<GenderRecord> records,
                                                const BabyNamesTable& table) {
    for (auto& rec : records) {
        if (rec.label != GenderLabel::Unknown) continue;
        auto it = table.by_name.find(rec.name_canonical);
        if (it == table.by_name.end()) continue;
        const auto total = it->second.woman + it->second.man;
        if (total == 0) continue;
        // Majority share over the table's combined counts. An exact tie keeps
        // probability 0.5, which no valid cutoff accepts.
        const bool woman_majority = it->second.woman >= it->second.man;
        rec.label = woman_majority ? GenderLabel::Woman : GenderLabel::Man;
        rec.probability =
            static_cast<double>(woman_majority ? it->second.woman : it->second.man) /
            static_cast<double>(total);
        rec.count = total;
        rec.source = Source::BabyNames;
    }
    return records;
}

// ---------------------------------------------------------------------------
// Validation against self-reported labels: per (self-reported gender, group)
// error rates, with Unknown inferences excluded from scoring and counted.
// ---------------------------------------------------------------------------

struct ValidationPair {
    GenderLabel inferred = GenderLabel::Unknown;
    GenderLabel self_reported = GenderLabel::Unknown;
    std::string group;
};

struct ValidationCell {
    std::int64_t misclassifications = 0;
    std::int64_t total = 0;
    double error_pct = 0.0;
};

struct ValidationReport {
    // keyed by (self-reported label, group)
    std::map<std::pair<GenderLabel, std::string>, ValidationCell> cells;
    std::int64_t scored = 0;
    std::int64_t excluded_unknown = 0;
    double overall_accuracy = 0.0;
};

inline ValidationReport validate_inference(const std::vector<ValidationPair>& pairs) {
    ValidationReport report;
    std::int64_t correct = 0;
    for (const auto& p : pairs) {
        if (p.inferred == GenderLabel::Unknown || p.self_reported == GenderLabel::Unknown) {
            ++report.excluded_unknown;
            continue;
        }
        auto& cell = report.cells[{p.self_reported, p.group}];
        ++cell.total;
        ++report.scored;
        if (p.inferred == p.self_reported) {
            ++correct;
        } else {
            ++cell.misclassifications;
        }
    }
    for (auto& [key, cell] : report.cells) {
        cell.error_pct = cell.total == 0
                             ? 0.0
                             : 100.0 * static_cast<double>(cell.misclassifications) /
                                   static_cast<double>(cell.total);
    }
    report.overall_accuracy =
        report.scored == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(report.scored);
    return report;
}

// ---------------------------------------------------------------------------
// Cache file: name,label,probability,count,source
// ---------------------------------------------------------------------------

inline Cache load_cache(const std::string& path) {
    csv::HeaderReader r(path);
    const auto c_name = r.column("name");
    const auto c_label = r.column("label");
    const auto c_prob = r.column("probability");
    const auto c_count = r.column("count");
    const auto c_source = r.column("source");
    Cache cache;
    std::vector<std::string> row;
    while (r.next(row)) {
        GenderRecord rec;
        rec.name_canonical = r.field(row, c_name);
        auto label = parse_gender_label(r.field(row, c_label));
        if (!label) r.fail("bad label");
        rec.label = *label;
        auto prob = csv::parse_double(r.field(row, c_prob));
        if (!prob || *prob < 0.0 || *prob > 1.0) r.fail("probability out of [0,1]");
        rec.probability = *prob;
        auto count = csv::parse_int(r.field(row, c_count));
        if (!count || *count < 0) r.fail("bad count");
        rec.count = *count;
        auto source = parse_source(r.field(row, c_source));
        if (!source) r.fail("bad source");
        rec.source = *source;
        cache.upsert(std::move(rec));
    }
    return cache;
}

inline void save_cache(const Cache& cache, const std::string& path) {
    csv::Writer w(path);
    w.raw_line("name,label,probability,count,source");
    cache.for_each([&](const GenderRecord& rec) {
        char prob[32];
        std::snprintf(prob, sizeof prob, "%.6f", rec.probability);
        w.row({rec.name_canonical, to_string(rec.label), prob, std::to_string(rec.count),
               to_string(rec.source)});
    });
}

// ---------------------------------------------------------------------------
// Remote provider interface. The HTTP client lives in gender_http.hpp; tests
// and offline runs use the cache alone or a stub implementation.
// ---------------------------------------------------------------------------

class Provider {
  public:
    virtual ~Provider() = default;
    // One record per queried name; label Unknown when the provider has no
    // data for it. Throws ProviderUnreachable / RateLimited.
    virtual std::vector<GenderRecord> fetch(const std::set<std::string>& names) = 0;
};

// fetch_remote: queries only what the cache does not already hold from the
// provider source, merges results into the store. Returns records for the
// requested names (from cache where fresh). No network call for an empty set.
inline std::vector<GenderRecord> fetch_remote(const std::set<std::string>& names, Provider& provider,
                                              CacheStore& store) {
    std::vector<GenderRecord> out;
    if (names.empty()) return out;
    auto snap = store.snapshot();
    std::set<std::string> missing;
    for (const auto& name : names) {
        if (!snap->find(name, Source::RemoteProvider)) missing.insert(name);
    }
    if (!missing.empty()) {
        std::vector<GenderRecord> fetched = provider.fetch(missing);
        Cache updates;
        for (auto& rec : fetched) updates.upsert(std::move(rec));
        store.merge_and_swap(updates);
        snap = store.snapshot();
    }
    for (const auto& name : names) {
        if (const GenderRecord* rec = snap->find(name, Source::RemoteProvider)) {
            out.push_back(*rec);
        } else {
            out.push_back(GenderRecord{name, GenderLabel::Unknown, 0.0, 0, Source::RemoteProvider});
        }
    }
    return out;
}

}  // namespace careflow::gender
