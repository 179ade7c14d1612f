#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "engshift/stats.hpp"
#include "engshift/synthetic.hpp"

using namespace engshift;

namespace {

PanelTruth small_truth() {
    PanelTruth t;
    t.window_start = days_from_civil(2016, 1, 1);
    t.window_end = days_from_civil(2016, 12, 31);
    t.changepoint_days = {days_from_civil(2016, 7, 1)};
    GroupTruth g;
    g.name = "low";
    g.quality = Quality::low;
    g.n_outlets = 4;
    g.log_mean = {5.0, 4.2};
    t.groups = {g};
    t.sd_outlet = 0.0;
    t.phi = 1.0;
    t.posts_per_day = 1.5;
    t.seed = 99;
    return t;
}

} // namespace

TEST_CASE("same seed gives bit-identical panels") {
    auto a = generate_panel(small_truth());
    auto b = generate_panel(small_truth());
    REQUIRE(a.posts.size() == b.posts.size());
    for (size_t i = 0; i < a.posts.size(); ++i) {
        CHECK(a.posts.records[i].post_id == b.posts.records[i].post_id);
        CHECK(a.posts.records[i].reactions == b.posts.records[i].reactions);
        CHECK(a.posts.records[i].published_at == b.posts.records[i].published_at);
    }
    auto c_truth = small_truth();
    c_truth.seed = 100;
    auto c = generate_panel(c_truth);
    bool differs = c.posts.size() != a.posts.size();
    for (size_t i = 0; !differs && i < std::min(a.posts.size(), c.posts.size()); ++i)
        differs = a.posts.records[i].reactions != c.posts.records[i].reactions;
    CHECK(differs);
}

TEST_CASE("Poisson limit: cell means match exp(x'beta) within 3 MC SEs") {
    auto t = small_truth();
    t.phi = 1e-6;  // NB1 variance ~= mean
    t.sd_outlet = 0.0;
    t.posts_per_day = 4.0;
    auto gen = generate_panel(t);
    std::map<int, std::pair<double, long>> by_epoch;
    for (const auto& r : gen.posts.records) {
        const int e = t.epoch_of(r.published_at.day);
        by_epoch[e].first += static_cast<double>(*r.reactions);
        by_epoch[e].second += 1;
    }
    for (const auto& [e, acc] : by_epoch) {
        const double mu = std::exp(t.groups[0].log_mean[static_cast<size_t>(e)]);
        const double mean = acc.first / static_cast<double>(acc.second);
        const double se = std::sqrt(mu / static_cast<double>(acc.second));
        CHECK(std::fabs(mean - mu) < 3.5 * se);
    }
}

TEST_CASE("outlet random effect spread matches the truth") {
    PanelTruth t = small_truth();
    t.groups[0].n_outlets = 220;
    t.window_end = days_from_civil(2016, 3, 31);
    t.changepoint_days = {};
    t.groups[0].log_mean = {5.0};
    t.sd_outlet = 1.1;
    t.posts_per_day = 6.0;
    t.phi = 0.5;
    auto gen = generate_panel(t);
    std::map<std::string, std::pair<double, long>> by_outlet;
    for (const auto& r : gen.posts.records) {
        by_outlet[r.outlet_id].first += static_cast<double>(*r.reactions);
        by_outlet[r.outlet_id].second += 1;
    }
    std::vector<double> log_means;
    for (const auto& [o, acc] : by_outlet)
        log_means.push_back(std::log(acc.first / static_cast<double>(acc.second)));
    const double sd = std::sqrt(variance(log_means));
    CHECK(sd == doctest::Approx(1.1).epsilon(0.15));
}

TEST_CASE("NB variance/mean relationship matches the chosen parametrization") {
    // one big cell per parametrization
    for (auto param : {Parametrization::nb1_linear, Parametrization::nb2_quadratic}) {
        PanelTruth t = small_truth();
        t.parametrization = param;
        t.phi = 2.0;
        t.changepoint_days = {};
        t.groups[0].log_mean = {4.0};
        t.groups[0].n_outlets = 1;
        t.window_end = t.window_start + 2500;
        t.posts_per_day = 8.0;
        auto gen = generate_panel(t);
        std::vector<double> ys;
        for (const auto& r : gen.posts.records) ys.push_back(static_cast<double>(*r.reactions));
        const double m = mean(ys), v = variance(ys);
        const double mu = std::exp(4.0);
        const double expect = param == Parametrization::nb1_linear ? mu * (1 + t.phi)
                                                                   : mu + mu * mu / t.phi;
        CHECK(m == doctest::Approx(mu).epsilon(0.03));
        CHECK(v == doctest::Approx(expect).epsilon(0.08));
    }
}

TEST_CASE("generated posts satisfy the record invariants") {
    auto gen = generate_panel(small_truth());
    std::map<std::string, int> seen;
    for (const auto& r : gen.posts.records) {
        CHECK(*r.reactions >= 0);
        CHECK(r.published_at.day >= small_truth().window_start);
        CHECK(r.published_at.day <= small_truth().window_end);
        CHECK(++seen[r.post_id] == 1);
    }
}

TEST_CASE("infeasible epoch layout is rejected") {
    auto t = small_truth();
    t.changepoint_days = {t.window_end + 10};
    CHECK_THROWS_AS(generate_panel(t), ConfigError);
}

TEST_CASE("piecewise signal: constant and segmented recovery") {
    SUBCASE("no changepoints, zero noise -> constant series") {
        PiecewiseSignalSpec s;
        s.n_weeks = 50;
        s.noise_rel = s.noise_cv = 0.0;
        s.segments = {{0, 1.25, -0.5, 0, 0}};
        auto sig = generate_piecewise_signal(s);
        for (const auto& w : sig) {
            CHECK(w.log_rel_mean == doctest::Approx(1.25));
            CHECK(w.log_cv == doctest::Approx(-0.5));
        }
    }
    SUBCASE("3 changepoints -> 4 distinct segment means via least squares on true breaks") {
        PiecewiseSignalSpec s;
        s.n_weeks = 160;
        s.changepoints = {40, 80, 120};
        s.noise_rel = s.noise_cv = 0.05;
        s.segments = {{0, 0.0, 0.0, 0, 0},
                      {0, 1.0, 0.3, 0, 0},
                      {0, -0.8, 0.6, 0, 0},
                      {0, 0.4, -0.4, 0, 0}};
        s.seed = 5;
        auto sig = generate_piecewise_signal(s);
        // segmented-mean oracle given the true breakpoints
        std::vector<double> est;
        std::vector<std::pair<long, long>> ranges = {{0, 40}, {40, 80}, {80, 120}, {120, 160}};
        for (auto [a, b] : ranges) {
            double m = 0;
            for (long w = a; w < b; ++w) m += sig[static_cast<size_t>(w)].log_rel_mean;
            est.push_back(m / static_cast<double>(b - a));
        }
        for (size_t k = 0; k < 4; ++k)
            CHECK(est[k] == doctest::Approx(s.segments[k].level_rel).epsilon(0.15). scale(0.1));
    }
    SUBCASE("outlier injection deviates more than 5 noise SDs") {
        PiecewiseSignalSpec s;
        s.n_weeks = 20;
        s.noise_rel = s.noise_cv = 0.1;
        s.segments = {{0, 0, 0, 0, 0}};
        s.outlier_weeks = {7};
        s.outlier_magnitude = 6.0;
        auto sig = generate_piecewise_signal(s);
        auto clean = s;
        clean.outlier_weeks = {};
        auto base = generate_piecewise_signal(clean);
        CHECK(std::fabs(sig[7].log_rel_mean - base[7].log_rel_mean) > 5 * s.noise_rel);
    }
    SUBCASE("separation violation rejected") {
        PiecewiseSignalSpec s;
        s.n_weeks = 100;
        s.changepoints = {30, 40};
        s.segments = {{0, 0, 0, 0, 0}, {0, 1, 0, 0, 0}, {0, 2, 0, 0, 0}};
        CHECK_THROWS_AS(generate_piecewise_signal(s), ConfigError);
    }
}
