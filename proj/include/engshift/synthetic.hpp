#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/dates.hpp"
#include "engshift/formula.hpp"
#include "engshift/rng.hpp"
#include "engshift/signal.hpp"
#include "engshift/table.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Synthetic panels with known ground truth. Every stochastic draw goes
// through substreams derived from the seed (outlet index, day stream), so
// generation is deterministic and parallelizable per outlet.
// ---------------------------------------------------------------------------

struct GroupTruth {
    std::string name;                 // factor level, e.g. "low" or "non_news"
    Sector sector = Sector::news;
    Quality quality = Quality::low;
    int n_outlets = 4;
    std::vector<double> log_mean;     // per epoch, log of the cell mean
};

struct PanelTruth {
    std::vector<GroupTruth> groups;
    std::vector<DayNumber> changepoint_days;  // sorted epoch boundaries
    DayNumber window_start = days_from_civil(2016, 1, 1);
    DayNumber window_end = days_from_civil(2019, 1, 1);
    double sd_outlet = 0.5;
    double sd_outlet_epoch = 0.0;
    double sd_day = 0.0;
    Parametrization parametrization = Parametrization::nb1_linear;
    double phi = 1.0;
    double posts_per_day = 2.0;       // Poisson rate per outlet-day
    double outlet_rate_sd = 0.0;      // log-normal spread of per-outlet rates
    std::uint64_t seed = 1;

    int n_epochs() const { return static_cast<int>(changepoint_days.size()) + 1; }

    int epoch_of(DayNumber day) const {
        int e = 0;
        for (const auto cp : changepoint_days)
            if (day >= cp) ++e;
            else break;
        return e;
    }
};

struct GeneratedPanel {
    PostTable posts;
    OutletDirectory outlets;
};

inline GeneratedPanel generate_panel(const PanelTruth& truth) {
    const int n_epochs = truth.n_epochs();
    for (const auto& g : truth.groups)
        if (static_cast<int>(g.log_mean.size()) != n_epochs)
            throw ConfigError("group " + g.name + ": log_mean must have one entry per epoch");
    for (size_t i = 1; i < truth.changepoint_days.size(); ++i)
        if (truth.changepoint_days[i] <= truth.changepoint_days[i - 1])
            throw ConfigError("changepoint days must be strictly increasing");
    if (!truth.changepoint_days.empty() &&
        (truth.changepoint_days.front() <= truth.window_start ||
         truth.changepoint_days.back() > truth.window_end))
        throw ConfigError("infeasible config: an epoch has no days inside the window");

    const long n_days = truth.window_end - truth.window_start + 1;

    // day effects are shared across outlets
    Rng day_rng(mix_seed(truth.seed, 0xDA11));
    std::vector<double> day_effect(static_cast<size_t>(n_days), 0.0);
    for (auto& d : day_effect) d = truth.sd_day > 0 ? day_rng.normal(0.0, truth.sd_day) : 0.0;

    GeneratedPanel out;
    long outlet_counter = 0;
    for (const auto& g : truth.groups) {
        for (int o = 0; o < g.n_outlets; ++o, ++outlet_counter) {
            Rng rng(mix_seed(truth.seed, 7777 + static_cast<std::uint64_t>(outlet_counter)));
            const std::string outlet_id = g.name + "_o" + std::to_string(o);
            const double rate =
                truth.posts_per_day *
                std::exp(truth.outlet_rate_sd > 0 ? rng.normal(0.0, truth.outlet_rate_sd) : 0.0);
            const double b_outlet = truth.sd_outlet > 0 ? rng.normal(0.0, truth.sd_outlet) : 0.0;
            std::vector<double> b_oe(static_cast<size_t>(n_epochs), 0.0);
            for (auto& b : b_oe)
                b = truth.sd_outlet_epoch > 0 ? rng.normal(0.0, truth.sd_outlet_epoch) : 0.0;

            OutletMeta meta;
            meta.outlet_id = outlet_id;
            meta.name = outlet_id;
            meta.sector = g.sector;
            meta.quality = g.quality;
            meta.mean_posts = rate;
            out.outlets.outlets.push_back(meta);

            long post_counter = 0;
            for (long d = 0; d < n_days; ++d) {
                const DayNumber day = truth.window_start + d;
                const int e = truth.epoch_of(day);
                const long n_posts = rng.poisson(rate);
                const double log_mu = g.log_mean[static_cast<size_t>(e)] + b_outlet +
                                      b_oe[static_cast<size_t>(e)] +
                                      day_effect[static_cast<size_t>(d)];
                const double mu = std::exp(log_mu);
                for (long p = 0; p < n_posts; ++p) {
                    PostRecord rec;
                    rec.post_id = outlet_id + "_p" + std::to_string(post_counter++);
                    rec.outlet_id = outlet_id;
                    rec.published_at = {day, static_cast<int>(rng.below(86400))};
                    rec.post_type = rng.uniform() < 0.25 ? PostType::video : PostType::link;
                    rec.author_is_page = true;
                    rec.text = rec.post_id;
                    const double size = truth.parametrization == Parametrization::nb2_quadratic
                                            ? truth.phi
                                            : mu / truth.phi;
                    rec.reactions = rng.nbinom(size, mu);
                    rec.source = Source::primary_feed;
                    out.posts.records.push_back(std::move(rec));
                }
            }
        }
    }
    return out;
}

// epoch labels aligned with the post table, for model frames
inline std::vector<int> epoch_labels(const PostTable& posts, const std::vector<DayNumber>& cps) {
    std::vector<int> out(posts.records.size(), 0);
    for (size_t i = 0; i < posts.records.size(); ++i) {
        int e = 0;
        for (const auto cp : cps)
            if (posts.records[i].published_at.day >= cp) ++e;
            else break;
        out[i] = e;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Piecewise trend signals with shared breakpoints across the two dimensions
// ---------------------------------------------------------------------------

struct SegmentSpec {
    int order = 0;                 // 0 = level, 1 = linear trend
    double level_rel = 0.0;        // segment level, first dimension
    double level_cv = 0.0;         // segment level, second dimension
    double slope_rel = 0.0;        // per-week slope when order = 1
    double slope_cv = 0.0;
};

struct PiecewiseSignalSpec {
    std::vector<long> changepoints;   // week indices where new segments start
    std::vector<SegmentSpec> segments;  // changepoints.size() + 1 entries
    double noise_rel = 0.1;
    double noise_cv = 0.1;
    long n_weeks = 200;
    long min_separation = 13;
    std::vector<long> outlier_weeks;
    double outlier_magnitude = 6.0;   // in noise SDs
    DayNumber week0_start = days_from_civil(2016, 1, 1);
    std::uint64_t seed = 1;
};

inline std::vector<WeeklySignal> generate_piecewise_signal(const PiecewiseSignalSpec& spec) {
    if (spec.segments.size() != spec.changepoints.size() + 1)
        throw ConfigError("piecewise signal: need one segment spec per segment");
    for (size_t i = 0; i < spec.changepoints.size(); ++i) {
        if (spec.changepoints[i] <= 0 || spec.changepoints[i] >= spec.n_weeks)
            throw ConfigError("piecewise signal: changepoint outside the signal");
        if (i > 0 && spec.changepoints[i] - spec.changepoints[i - 1] < spec.min_separation)
            throw ConfigError("piecewise signal: changepoints closer than the minimum separation");
    }
    Rng rng(spec.seed);
    std::vector<WeeklySignal> out(static_cast<size_t>(spec.n_weeks));
    size_t seg = 0;
    long seg_start = 0;
    for (long w = 0; w < spec.n_weeks; ++w) {
        if (seg < spec.changepoints.size() && w >= spec.changepoints[seg]) {
            seg_start = spec.changepoints[seg];
            ++seg;
        }
        const auto& s = spec.segments[seg];
        const double t = static_cast<double>(w - seg_start);
        WeeklySignal& ws = out[static_cast<size_t>(w)];
        ws.week_index = w;
        ws.week_start = spec.week0_start + 7 * w;
        ws.n_outlets = 1;
        ws.log_rel_mean = s.level_rel + (s.order == 1 ? s.slope_rel * t : 0.0) +
                          rng.normal(0.0, spec.noise_rel);
        ws.log_cv = s.level_cv + (s.order == 1 ? s.slope_cv * t : 0.0) +
                    rng.normal(0.0, spec.noise_cv);
    }
    for (long w : spec.outlier_weeks) {
        if (w < 0 || w >= spec.n_weeks) throw ConfigError("outlier week outside the signal");
        out[static_cast<size_t>(w)].log_rel_mean += spec.outlier_magnitude * spec.noise_rel;
        out[static_cast<size_t>(w)].log_cv += spec.outlier_magnitude * spec.noise_cv;
    }
    return out;
}

} // namespace engshift
