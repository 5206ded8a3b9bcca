#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "careflow/error.hpp"
#include "careflow/netgeo.hpp"
#include "careflow/types.hpp"

namespace careflow::stats {

// ---------------------------------------------------------------------------
// Special functions (no statistical tables): regularized incomplete gamma for
// chi-square tails, regularized incomplete beta for t tails.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr int kMaxSeriesIter = 500;
inline constexpr double kSeriesEps = 1e-14;
inline constexpr double kTinyDenominator = 1e-300;

// Lower regularized incomplete gamma P(a,x) by series expansion (x < a+1).
inline double gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < kMaxSeriesIter; ++i) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::fabs(del) < std::fabs(sum) * kSeriesEps) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper regularized incomplete gamma Q(a,x) by continued fraction (x >= a+1).
inline double gamma_q_cf(double a, double x) {
    double b = x + 1.0 - a;
    double c = 1.0 / kTinyDenominator;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= kMaxSeriesIter; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < kTinyDenominator) d = kTinyDenominator;
        c = b + an / c;
        if (std::fabs(c) < kTinyDenominator) c = kTinyDenominator;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kSeriesEps) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// Continued fraction for the incomplete beta function.
inline double beta_cf(double a, double b, double x) {
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTinyDenominator) d = kTinyDenominator;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxSeriesIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTinyDenominator) d = kTinyDenominator;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTinyDenominator) c = kTinyDenominator;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTinyDenominator) d = kTinyDenominator;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTinyDenominator) c = kTinyDenominator;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kSeriesEps) break;
    }
    return h;
}

}  // namespace detail

// Upper regularized incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
    if (a <= 0.0 || x < 0.0) throw Error(ErrorKind::InvalidConfig, "gamma_q domain");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
    return detail::gamma_q_cf(a, x);
}

// Regularized incomplete beta I_x(a, b).
inline double beta_i(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * detail::beta_cf(a, b, x) / a;
    }
    return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Upper tail of chi-square with df degrees of freedom.
inline double chi_square_upper_tail(double statistic, double df) {
    return gamma_q(df / 2.0, statistic / 2.0);
}

// Two-sided Student-t p-value.
inline double t_two_sided_p(double t, double df) {
    return beta_i(df / 2.0, 0.5, df / (df + t * t));
}

// ---------------------------------------------------------------------------
// Chi-square test of independence
// ---------------------------------------------------------------------------

struct ContingencyTable {
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::vector<std::vector<double>> cells;  // r x c, all >= 0
};

struct ChiSquareResult {
    double statistic = 0.0;
    int df = 0;
    double p_value = 1.0;
    bool low_expected_warning = false;  // some expected cell count < 5
};

inline ChiSquareResult chi_square(const ContingencyTable& table) {
    const std::size_t r = table.cells.size();
    if (r < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 rows");
    const std::size_t c = table.cells.front().size();
    if (c < 2) throw Error(ErrorKind::InvalidConfig, "need at least 2 columns");

    std::vector<double> row_sum(r, 0.0);
    std::vector<double> col_sum(c, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (table.cells[i].size() != c) throw Error(ErrorKind::InvalidConfig, "ragged table");
        for (std::size_t j = 0; j < c; ++j) {
            const double v = table.cells[i][j];
            if (v < 0.0) throw Error(ErrorKind::InvalidConfig, "negative cell");
            row_sum[i] += v;
            col_sum[j] += v;
            total += v;
        }
    }
    for (std::size_t i = 0; i < r; ++i) {
        if (row_sum[i] == 0.0) throw Error(ErrorKind::DegenerateMargin, "row " + std::to_string(i) + " sums to 0");
    }
    for (std::size_t j = 0; j < c; ++j) {
        if (col_sum[j] == 0.0) throw Error(ErrorKind::DegenerateMargin, "column " + std::to_string(j) + " sums to 0");
    }

    ChiSquareResult result;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double expected = row_sum[i] * col_sum[j] / total;
            if (expected < 5.0) result.low_expected_warning = true;
            const double diff = table.cells[i][j] - expected;
            result.statistic += diff * diff / expected;
        }
    }
    result.df = static_cast<int>((r - 1) * (c - 1));
    result.p_value = chi_square_upper_tail(result.statistic, static_cast<double>(result.df));
    return result;
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

struct SampleMoments {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0;  // sample variance (n-1 denominator)
    double skewness = 0.0;
    double excess_kurtosis = 0.0;
};

inline SampleMoments moments(const std::vector<double>& sample) {
    SampleMoments m;
    m.n = sample.size();
    if (m.n == 0) return m;
    m.mean = std::accumulate(sample.begin(), sample.end(), 0.0) / static_cast<double>(m.n);
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : sample) {
        const double d = v - m.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    if (m.n > 1) m.variance = m2 / static_cast<double>(m.n - 1);
    const double n = static_cast<double>(m.n);
    if (m2 > 0.0) {
        const double sd_pop = std::sqrt(m2 / n);
        m.skewness = (m3 / n) / (sd_pop * sd_pop * sd_pop);
        m.excess_kurtosis = (m4 / n) / (sd_pop * sd_pop * sd_pop * sd_pop) - 3.0;
    }
    return m;
}

struct WelchResult {
    double mean_a = 0.0;
    double mean_b = 0.0;
    double diff = 0.0;  // mean_a - mean_b
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
    SampleMoments moments_a;
    SampleMoments moments_b;
};

inline WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw Error(ErrorKind::InsufficientSample, "each sample needs >= 2 observations");
    }
    WelchResult r;
    r.moments_a = moments(a);
    r.moments_b = moments(b);
    r.mean_a = r.moments_a.mean;
    r.mean_b = r.moments_b.mean;
    r.diff = r.mean_a - r.mean_b;
    const double va = r.moments_a.variance / static_cast<double>(a.size());
    const double vb = r.moments_b.variance / static_cast<double>(b.size());
    if (va + vb == 0.0) {
        throw Error(ErrorKind::InsufficientSample, "both samples have zero variance");
    }
    r.t = r.diff / std::sqrt(va + vb);
    r.df = (va + vb) * (va + vb) /
           (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    r.p_value = r.t == 0.0 ? 1.0 : t_two_sided_p(r.t, r.df);
    return r;
}

// ---------------------------------------------------------------------------
// One-way random-intercept linear mixed model, ML fit by EM:
//   y_ij = beta0 + beta1 * flag_ij + u_i + e_ij,
//   u_i ~ N(0, sigma_u2), e_ij ~ N(0, sigma_e2).
// ---------------------------------------------------------------------------

struct MixedObservation {
    std::string group_id;  // O-D pair
    int flag = 0;          // 0|1
    double value = 0.0;    // in-vehicle minutes
};

struct MixedModelFit {
    double beta0 = 0.0;
    double beta1 = 0.0;
    double sigma_u2 = 0.0;
    double sigma_e2 = 0.0;
    double se_beta0 = 0.0;
    double se_beta1 = 0.0;
    bool converged = false;
    int iterations = 0;
    double log_likelihood = 0.0;
    std::vector<double> log_likelihood_trace;  // non-decreasing per EM step
};

inline constexpr double kEmTolerance = 1e-8;
inline constexpr int kEmMaxIterations = 500;

namespace detail {

struct Group {
    std::vector<double> y;
    std::vector<double> x;
    double sum_x = 0.0;
};

inline double marginal_log_likelihood(const std::vector<Group>& groups, double beta0, double beta1,
                                      double su2, double se2) {
    constexpr double kLog2Pi = 1.8378770664093453;
    double ll = 0.0;
    for (const auto& g : groups) {
        const double n = static_cast<double>(g.y.size());
        double rss = 0.0, rsum = 0.0;
        for (std::size_t j = 0; j < g.y.size(); ++j) {
            const double r = g.y[j] - beta0 - beta1 * g.x[j];
            rss += r * r;
            rsum += r;
        }
        const double denom = se2 + n * su2;
        ll += -0.5 * (n * (kLog2Pi + std::log(se2)) + std::log(denom / se2) +
                      (rss - su2 * rsum * rsum / denom) / se2);
    }
    return ll;
}

}  // namespace detail

inline MixedModelFit fit_random_intercept(const std::vector<MixedObservation>& observations) {
    if (observations.size() < 3) {
        throw Error(ErrorKind::InsufficientSample, "need at least 3 observations");
    }
    bool has0 = false, has1 = false;
    for (const auto& o : observations) {
        if (o.flag == 0) has0 = true;
        if (o.flag == 1) has1 = true;
    }
    if (!has0 || !has1) {
        throw Error(ErrorKind::SingularDesign, "flag is constant; slope is unidentifiable");
    }

    std::map<std::string, detail::Group> by_group;
    for (const auto& o : observations) {
        auto& g = by_group[o.group_id];
        g.y.push_back(o.value);
        g.x.push_back(static_cast<double>(o.flag));
        g.sum_x += static_cast<double>(o.flag);
    }
    std::vector<detail::Group> groups;
    groups.reserve(by_group.size());
    for (auto& [id, g] : by_group) groups.push_back(std::move(g));

    const double n_total = static_cast<double>(observations.size());
    const double m = static_cast<double>(groups.size());

    // Initialize from pooled OLS.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const auto& g : groups) {
        for (std::size_t j = 0; j < g.y.size(); ++j) {
            sx += g.x[j];
            sy += g.y[j];
            sxx += g.x[j] * g.x[j];
            sxy += g.x[j] * g.y[j];
        }
    }
    const double det0 = n_total * sxx - sx * sx;
    if (std::fabs(det0) < 1e-12 * n_total * std::max(1.0, sxx)) {
        throw Error(ErrorKind::SingularDesign, "design matrix is singular");
    }
    double beta1 = (n_total * sxy - sx * sy) / det0;
    double beta0 = (sy - beta1 * sx) / n_total;
    double rss0 = 0.0;
    for (const auto& g : groups) {
        for (std::size_t j = 0; j < g.y.size(); ++j) {
            const double r = g.y[j] - beta0 - beta1 * g.x[j];
            rss0 += r * r;
        }
    }
    double sigma_e2 = std::max(rss0 / n_total, 1e-8);
    double sigma_u2 = std::max(sigma_e2 * 0.5, 1e-8);

    MixedModelFit fit;
    std::vector<double> b(groups.size(), 0.0);
    std::vector<double> v(groups.size(), 0.0);

    double ll = detail::marginal_log_likelihood(groups, beta0, beta1, sigma_u2, sigma_e2);
    fit.log_likelihood_trace.push_back(ll);

    for (int iter = 1; iter <= kEmMaxIterations; ++iter) {
        // E-step: posterior mean/variance of each group intercept.
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const auto& g = groups[i];
            const double ni = static_cast<double>(g.y.size());
            double rsum = 0.0;
            for (std::size_t j = 0; j < g.y.size(); ++j) {
                rsum += g.y[j] - beta0 - beta1 * g.x[j];
            }
            v[i] = sigma_u2 * sigma_e2 / (sigma_e2 + ni * sigma_u2);
            b[i] = v[i] * rsum / sigma_e2;
        }

        // M-step: beta from OLS of (y - b_i) on [1, x].
        double tx = 0.0, ty = 0.0, txx = 0.0, txy = 0.0;
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const auto& g = groups[i];
            for (std::size_t j = 0; j < g.y.size(); ++j) {
                const double yc = g.y[j] - b[i];
                tx += g.x[j];
                ty += yc;
                txx += g.x[j] * g.x[j];
                txy += g.x[j] * yc;
            }
        }
        const double det = n_total * txx - tx * tx;
        const double new_beta1 = (n_total * txy - tx * ty) / det;
        const double new_beta0 = (ty - new_beta1 * tx) / n_total;

        // M-step: variances from posterior moments.
        double su2 = 0.0;
        double se2 = 0.0;
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const auto& g = groups[i];
            su2 += b[i] * b[i] + v[i];
            for (std::size_t j = 0; j < g.y.size(); ++j) {
                const double r = g.y[j] - new_beta0 - new_beta1 * g.x[j] - b[i];
                se2 += r * r + v[i];
            }
        }
        su2 /= m;
        se2 /= n_total;
        se2 = std::max(se2, 1e-12);

        const double delta = std::max({std::fabs(new_beta0 - beta0), std::fabs(new_beta1 - beta1),
                                       std::fabs(su2 - sigma_u2), std::fabs(se2 - sigma_e2)});
        beta0 = new_beta0;
        beta1 = new_beta1;
        sigma_u2 = su2;
        sigma_e2 = se2;
        fit.iterations = iter;

        ll = detail::marginal_log_likelihood(groups, beta0, beta1, sigma_u2, sigma_e2);
        fit.log_likelihood_trace.push_back(ll);

        if (delta < kEmTolerance) {
            fit.converged = true;
            break;
        }
    }

    fit.beta0 = beta0;
    fit.beta1 = beta1;
    fit.sigma_u2 = sigma_u2;
    fit.sigma_e2 = sigma_e2;
    fit.log_likelihood = ll;

    // Fixed-effect standard errors from the GLS information at the fitted
    // variances: sum_i X_i' V_i^-1 X_i.
    double i00 = 0.0, i01 = 0.0, i11 = 0.0;
    for (const auto& g : groups) {
        const double ni = static_cast<double>(g.y.size());
        const double shrink = sigma_u2 / (sigma_e2 + ni * sigma_u2);
        double xx = 0.0;
        for (double xj : g.x) xx += xj * xj;
        i00 += (ni - shrink * ni * ni) / sigma_e2;
        i01 += (g.sum_x - shrink * ni * g.sum_x) / sigma_e2;
        i11 += (xx - shrink * g.sum_x * g.sum_x) / sigma_e2;
    }
    const double det_info = i00 * i11 - i01 * i01;
    if (det_info > 0.0) {
        fit.se_beta0 = std::sqrt(i11 / det_info);
        fit.se_beta1 = std::sqrt(i00 / det_info);
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Convenience-metric extraction: MoC vs non-MoC journeys between the same O-D
// pairs, with speed and duration outlier screens.
// ---------------------------------------------------------------------------

struct ConvenienceObservation {
    std::string od_pair;
    bool moc = false;
    double in_vehicle_minutes = 0.0;
    int transfers = 0;
};

struct ConvenienceSamples {
    std::vector<ConvenienceObservation> observations;  // O-D pairs with both kinds only
    std::uint64_t journeys_seen = 0;
    std::uint64_t dropped_incomplete = 0;  // missing alighting info
    std::uint64_t dropped_outliers = 0;    // speed or duration screens

    std::vector<double> in_vehicle(bool moc_flag) const {
        std::vector<double> out;
        for (const auto& o : observations) {
            if (o.moc == moc_flag) out.push_back(o.in_vehicle_minutes);
        }
        return out;
    }

    std::vector<double> transfers_sample(bool moc_flag) const {
        std::vector<double> out;
        for (const auto& o : observations) {
            if (o.moc == moc_flag) out.push_back(static_cast<double>(o.transfers));
        }
        return out;
    }
};

struct OutlierBounds {
    double max_speed_mph = 25.0;
    double max_in_vehicle_minutes = 180.0;
};

inline ConvenienceSamples moc_convenience(const std::vector<Journey>& journeys,
                                          const std::set<std::string>& moc_journey_ids,
                                          const ingest::GtfsSnapshot& snap,
                                          OutlierBounds bounds = {}) {
    constexpr double kMetersPerMile = 1609.344;
    ConvenienceSamples samples;
    std::vector<ConvenienceObservation> candidates;

    for (const auto& j : journeys) {
        ++samples.journeys_seen;
        if (j.stages.empty()) continue;
        double minutes = 0.0;
        bool complete = true;
        for (const auto& s : j.stages) {
            if (!s.alight_time) {
                complete = false;
                break;
            }
            minutes += static_cast<double>(*s.alight_time - s.board_time) / 60.0;
        }
        const auto& last = j.stages.back();
        if (!complete || !last.alight_stop) {
            ++samples.dropped_incomplete;
            continue;
        }
        const Stop* origin = snap.find_stop(j.stages.front().board_stop);
        const Stop* destination = snap.find_stop(*last.alight_stop);
        if (!origin || !destination) {
            ++samples.dropped_incomplete;
            continue;
        }
        const double dist_m = netgeo::distance_m({origin->lat, origin->lon},
                                                 {destination->lat, destination->lon});
        const double speed_mph = minutes > 0.0 ? (dist_m / kMetersPerMile) / (minutes / 60.0) : 0.0;
        if (speed_mph > bounds.max_speed_mph || minutes > bounds.max_in_vehicle_minutes) {
            ++samples.dropped_outliers;
            continue;
        }
        ConvenienceObservation obs;
        obs.od_pair = j.stages.front().board_stop + "->" + *last.alight_stop;
        obs.moc = moc_journey_ids.count(j.journey_id) > 0;
        obs.in_vehicle_minutes = minutes;
        obs.transfers = static_cast<int>(j.stages.size()) - 1;
        candidates.push_back(std::move(obs));
    }

    // Keep only O-D pairs observed with both a MoC and a non-MoC journey.
    std::map<std::string, std::pair<bool, bool>> pair_kinds;
    for (const auto& o : candidates) {
        auto& kinds = pair_kinds[o.od_pair];
        (o.moc ? kinds.first : kinds.second) = true;
    }
    for (auto& o : candidates) {
        const auto& kinds = pair_kinds[o.od_pair];
        if (kinds.first && kinds.second) samples.observations.push_back(std::move(o));
    }
    return samples;
}

}  // namespace careflow::stats
