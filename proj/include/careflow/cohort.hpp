#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "careflow/csv.hpp"
#include "careflow/types.hpp"

namespace careflow::cohort {

inline constexpr int kDefaultMinActiveDays = 10;

struct CardProfile {
    std::string card_id;
    GenderLabel gender_label = GenderLabel::Unknown;
    int active_days = 0;  // distinct service dates with >= 1 stage, any mode
    bool registered = false;
};

// Aggregates stages into per-card profiles. Gender labels come from a card ->
// label map (the infer-gender output); cards absent from it stay Unknown.
class ProfileBuilder {
  public:
    void observe(const Stage& stage) {
        auto& dates = dates_by_card_[stage.card_id];
        dates.insert(days_from_civil(stage.service_date));
    }

    std::vector<CardProfile> build(const std::map<std::string, GenderLabel>& genders,
                                   const std::set<std::string>& registered_cards) const {
        std::vector<CardProfile> profiles;
        profiles.reserve(dates_by_card_.size());
        for (const auto& [card_id, dates] : dates_by_card_) {
            CardProfile p;
            p.card_id = card_id;
            p.active_days = static_cast<int>(dates.size());
            auto it = genders.find(card_id);
            if (it != genders.end()) p.gender_label = it->second;
            p.registered = registered_cards.count(card_id) > 0;
            profiles.push_back(std::move(p));
        }
        return profiles;
    }

  private:
    std::map<std::string, std::set<std::int64_t>> dates_by_card_;
};

// Keeps profiles with active_days >= min_days (inclusive: "10 or more").
inline std::vector<CardProfile> filter_active(std::vector<CardProfile> profiles,
                                              int min_days = kDefaultMinActiveDays) {
    if (min_days < 1) throw Error(ErrorKind::InvalidConfig, "min_days must be >= 1");
    std::erase_if(profiles, [min_days](const CardProfile& p) { return p.active_days < min_days; });
    return profiles;
}

namespace detail {

// Bounded uniform draw by rejection, so sampling does not depend on the
// standard library's distribution implementation.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % bound;
}

}  // namespace detail

struct BalancedSample {
    std::vector<std::string> card_ids;  // sorted
    std::size_t women = 0;
    std::size_t men = 0;
    bool insufficient_men = false;  // fewer men than women: all men kept, imbalance flagged
};

// All women-labeled cards, plus an equally sized uniform sample of
// men-labeled cards drawn without replacement. Unknown labels are excluded.
// A pure function of (profiles, seed): reruns are bit-identical.
inline BalancedSample balance_sample(const std::vector<CardProfile>& profiles, std::uint64_t seed) {
    std::vector<std::string> women;
    std::vector<std::string> men;
    for (const auto& p : profiles) {
        if (p.gender_label == GenderLabel::Woman) women.push_back(p.card_id);
        if (p.gender_label == GenderLabel::Man) men.push_back(p.card_id);
    }
    std::sort(women.begin(), women.end());
    std::sort(men.begin(), men.end());

    BalancedSample sample;
    sample.women = women.size();
    if (men.size() <= women.size()) {
        sample.insufficient_men = men.size() < women.size();
        sample.men = men.size();
        sample.card_ids = std::move(women);
        sample.card_ids.insert(sample.card_ids.end(), men.begin(), men.end());
    } else {
        std::mt19937_64 rng(seed);
        // Partial Fisher-Yates over the sorted men list: first k slots become
        // the sample.
        const std::size_t k = women.size();
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(
                                          detail::uniform_below(rng, men.size() - i));
            std::swap(men[i], men[j]);
        }
        men.resize(k);
        sample.men = k;
        sample.card_ids = std::move(women);
        sample.card_ids.insert(sample.card_ids.end(), men.begin(), men.end());
    }
    std::sort(sample.card_ids.begin(), sample.card_ids.end());
    return sample;
}

// ---------------------------------------------------------------------------
// Stability of downstream metrics under resampling: k seeded reruns of
// balance_sample, with the caller-supplied metric evaluated per run.
// ---------------------------------------------------------------------------

struct StabilityReport {
    std::vector<std::uint64_t> seeds;
    std::vector<double> per_bin_mean;    // mean metric value per bin across runs
    std::vector<double> per_bin_spread;  // max - min per bin across runs
    double max_spread = 0.0;
};

using SampleMetric = std::function<std::vector<double>(const BalancedSample&)>;

inline StabilityReport resample_stability(const std::vector<CardProfile>& profiles, int k,
                                          std::uint64_t base_seed, const SampleMetric& metric) {
    if (k < 2) throw Error(ErrorKind::InvalidConfig, "resample_stability requires k >= 2");
    StabilityReport report;
    std::vector<std::vector<double>> runs;
    for (int i = 0; i < k; ++i) {
        const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
        report.seeds.push_back(seed);
        runs.push_back(metric(balance_sample(profiles, seed)));
    }
    std::size_t bins = 0;
    for (const auto& r : runs) bins = std::max(bins, r.size());
    report.per_bin_mean.assign(bins, 0.0);
    report.per_bin_spread.assign(bins, 0.0);
    for (std::size_t b = 0; b < bins; ++b) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& r : runs) {
            if (b >= r.size()) continue;
            lo = std::min(lo, r[b]);
            hi = std::max(hi, r[b]);
            sum += r[b];
            ++n;
        }
        if (n == 0) continue;
        report.per_bin_mean[b] = sum / static_cast<double>(n);
        report.per_bin_spread[b] = hi - lo;
        report.max_spread = std::max(report.max_spread, hi - lo);
    }
    return report;
}

// ---------------------------------------------------------------------------
// sample.csv: card_id,label (sorted by card_id)
// ---------------------------------------------------------------------------

inline void save_sample(const BalancedSample& sample,
                        const std::map<std::string, GenderLabel>& genders, const std::string& path) {
    csv::Writer w(path);
    w.raw_line("card_id,label");
    for (const auto& card : sample.card_ids) {
        auto it = genders.find(card);
        w.row({card, it == genders.end() ? "unknown" : to_string(it->second)});
    }
}

inline std::map<std::string, GenderLabel> load_sample(const std::string& path) {
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

}  // namespace careflow::cohort
