#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/csv.hpp"
#include "engshift/dates.hpp"

namespace engshift {

struct OutletDayMoments {
    std::string outlet_id;
    DayNumber day = 0;
    double mu = 0;           // conditional mean for the outlet-day
    double sigma = 0;        // conditional standard deviation
    double outlet_mean = 0;  // outlet's overall average reaction count
};

struct WeeklySignal {
    long week_index = 0;
    DayNumber week_start = 0;
    double log_rel_mean = 0;
    double log_cv = 0;
    long n_outlets = 0;
    bool missing = false;
};

inline double relative_mean(double mu, double outlet_mean) {
    if (!(mu > 0.0) || !(outlet_mean > 0.0))
        throw DomainError("relative_mean requires positive mu and outlet mean");
    return mu / outlet_mean;
}

inline double coefficient_of_variation(double sigma, double mu) {
    if (!(mu > 0.0) || sigma < 0.0)
        throw DomainError("coefficient_of_variation requires mu > 0 and sigma >= 0");
    return sigma / mu;
}

// Aggregates outlet-day moments into the two-dimensional weekly signal:
// per-outlet weekly means of the relative mean and the coefficient of
// variation, an unweighted mean over outlets present that week, then the log.
// Weeks are 7-day blocks anchored at the window start; empty weeks are
// emitted as explicit gaps.
inline std::vector<WeeklySignal> build_weekly_signal(const std::vector<OutletDayMoments>& moments,
                                                     DayNumber window_start,
                                                     DayNumber window_end) {
    if (window_end < window_start) throw DomainError("weekly signal: empty window");
    const long n_weeks = static_cast<long>((window_end - window_start) / 7) + 1;

    struct Acc {
        double rel = 0, cv = 0;
        long n = 0;
    };
    std::vector<std::map<std::string, Acc>> weeks(static_cast<size_t>(n_weeks));
    for (const auto& m : moments) {
        if (m.day < window_start || m.day > window_end)
            throw DomainError("outlet-day outside the study window: " + m.outlet_id + " " +
                              format_date(m.day));
        const long w = static_cast<long>((m.day - window_start) / 7);
        Acc& a = weeks[static_cast<size_t>(w)][m.outlet_id];
        a.rel += relative_mean(m.mu, m.outlet_mean);
        a.cv += coefficient_of_variation(m.sigma, m.mu);
        ++a.n;
    }

    std::vector<WeeklySignal> out(static_cast<size_t>(n_weeks));
    for (long w = 0; w < n_weeks; ++w) {
        WeeklySignal& ws = out[static_cast<size_t>(w)];
        ws.week_index = w;
        ws.week_start = window_start + 7 * w;
        const auto& outlets = weeks[static_cast<size_t>(w)];
        if (outlets.empty()) {
            ws.missing = true;
            ws.log_rel_mean = ws.log_cv = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        double rel = 0, cv = 0;
        for (const auto& [id, a] : outlets) {
            rel += a.rel / static_cast<double>(a.n);
            cv += a.cv / static_cast<double>(a.n);
        }
        ws.n_outlets = static_cast<long>(outlets.size());
        rel /= static_cast<double>(ws.n_outlets);
        cv /= static_cast<double>(ws.n_outlets);
        ws.log_rel_mean = std::log(rel);
        ws.log_cv = std::log(cv);
    }
    return out;
}

inline CsvTable signal_to_csv(const std::vector<WeeklySignal>& signal) {
    CsvTable t;
    t.header = {"week_index", "week_start", "log_rel_mean", "log_cv", "n_outlets"};
    for (const auto& w : signal) {
        t.rows.push_back({std::to_string(w.week_index), format_date(w.week_start),
                          w.missing ? "" : format_double(w.log_rel_mean),
                          w.missing ? "" : format_double(w.log_cv),
                          std::to_string(w.n_outlets)});
    }
    return t;
}

inline std::vector<WeeklySignal> signal_from_csv(const CsvTable& t) {
    std::vector<WeeklySignal> out;
    for (const auto& name : {"week_index", "week_start", "log_rel_mean", "log_cv", "n_outlets"})
        if (!t.column(name)) throw SchemaError(std::string("signal table: missing column ") + name);
    for (const auto& row : t.rows) {
        WeeklySignal w;
        w.week_index = std::stol(row[*t.column("week_index")]);
        w.week_start = parse_date(row[*t.column("week_start")]);
        const auto& rel = row[*t.column("log_rel_mean")];
        if (rel.empty()) {
            w.missing = true;
            w.log_rel_mean = w.log_cv = std::numeric_limits<double>::quiet_NaN();
        } else {
            w.log_rel_mean = std::stod(rel);
            w.log_cv = std::stod(row[*t.column("log_cv")]);
        }
        w.n_outlets = std::stol(row[*t.column("n_outlets")]);
        out.push_back(w);
    }
    return out;
}

} // namespace engshift
