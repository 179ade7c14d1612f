#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "engshift/emm.hpp"
#include "engshift/synthetic.hpp"

using namespace engshift;

namespace {

// hand-built EMM table over one group; diagonal covariance
EmmTable toy_table(const std::vector<double>& mus, const std::string& group = "news",
                   double se = 0.1) {
    EmmTable t;
    auto joint = std::make_shared<JointEstimates>();
    const long n = static_cast<long>(mus.size());
    joint->est.resize(n);
    joint->cov = se * se * Eigen::MatrixXd::Identity(n, n);
    for (long i = 0; i < n; ++i) {
        EmmCell c;
        c.epoch = static_cast<int>(i);
        c.group = group;
        c.log_emm = std::log(mus[static_cast<size_t>(i)]);
        c.se_log = se;
        c.emm = mus[static_cast<size_t>(i)];
        joint->est(i) = c.log_emm;
        joint->labels.push_back("epoch" + std::to_string(i) + ":" + group);
        t.cells.push_back(c);
        t.epochs.push_back(static_cast<int>(i));
    }
    t.groups = {group};
    t.joint = joint;
    return t;
}

GlmmFit small_fit(std::uint64_t seed, double sd_outlet, double sd_oe) {
    PanelTruth t;
    t.window_start = days_from_civil(2016, 1, 1);
    t.window_end = t.window_start + 119;
    t.changepoint_days = {t.window_start + 40, t.window_start + 80};
    GroupTruth a, b;
    a.name = "low";
    a.quality = Quality::low;
    a.n_outlets = 6;
    a.log_mean = {4.0, 3.4, 3.8};
    b.name = "high";
    b.quality = Quality::high;
    b.n_outlets = 6;
    b.log_mean = {3.2, 3.1, 3.6};
    t.groups = {a, b};
    t.sd_outlet = sd_outlet;
    t.sd_outlet_epoch = sd_oe;
    t.phi = 1.0;
    t.posts_per_day = 0.9;
    t.seed = seed;
    auto gen = generate_panel(t);
    auto labels = epoch_labels(gen.posts, t.changepoint_days);
    auto df = model_frame_from_posts(gen.posts, gen.outlets, &labels);
    FormulaSpec spec;
    spec.mean = parse_formula("quality*epoch + (1|outlet) + (1|outlet:epoch)");
    spec.dispersion = parse_formula("1");
    spec.parametrization = Parametrization::nb1_linear;
    return fit_nb_glmm(df, spec);
}

} // namespace

TEST_CASE("EMM equals exp(x'beta) when nothing is marginalized") {
    auto fit = small_fit(3, 0.5, 0.3);
    REQUIRE(fit.converged);
    EmmOptions opt;
    opt.marginalize = {};
    auto table = emm(fit, {0, 1, 2}, {"low", "high"}, opt);
    for (const auto& c : table.cells) CHECK(c.re_correction == 0.0);
}

TEST_CASE("EMM correction equals half the summed marginalized variances") {
    auto fit = small_fit(5, 0.6, 0.4);
    REQUIRE(fit.converged);
    auto table = emm(fit, {0, 1, 2}, {"low", "high"});
    const double expect =
        0.5 * (fit.re_mean[0].cov(0, 0) + fit.re_mean[1].cov(0, 0));
    for (const auto& c : table.cells) {
        if (c.group == "overall") continue;
        CHECK(c.re_correction == doctest::Approx(expect).epsilon(1e-12));
        CHECK(c.log_emm >= std::log(c.emm) - 1e-12);  // consistency
    }
    // Jensen: EMM >= exp(x'beta), equality only with zero variance
    for (const auto& c : table.cells)
        CHECK(c.log_emm - c.re_correction <= c.log_emm + 1e-15);
}

TEST_CASE("closed-form EMM matches Monte Carlo marginalization within 0.5%") {
    auto fit = small_fit(7, 1.0, 0.5);
    REQUIRE(fit.converged);
    auto table = emm(fit, {0, 1, 2}, {"low", "high"});
    const double s1 = std::sqrt(fit.re_mean[0].cov(0, 0));
    const double s2 = std::sqrt(fit.re_mean[1].cov(0, 0));
    Rng rng(99);
    double mc = 0.0;
    const long n = 1000000;
    for (long i = 0; i < n; ++i) mc += std::exp(rng.normal(0, s1) + rng.normal(0, s2));
    mc /= static_cast<double>(n);
    const double closed = std::exp(0.5 * (s1 * s1 + s2 * s2));
    CHECK(mc == doctest::Approx(closed).epsilon(0.005));
    // and the table applies exactly that correction multiplicatively
    const auto& c = table.cells[0];
    CHECK(c.emm == doctest::Approx(std::exp(c.log_emm - c.re_correction) * closed).epsilon(0.005));
}

TEST_CASE("overall cells are geometric means of the group cells") {
    auto fit = small_fit(11, 0.5, 0.2);
    REQUIRE(fit.converged);
    auto table = emm(fit, {0, 1, 2}, {"low", "high"});
    for (int e : {0, 1, 2}) {
        const auto& lo = table.cells[static_cast<size_t>(table.index_of(e, "low"))];
        const auto& hi = table.cells[static_cast<size_t>(table.index_of(e, "high"))];
        const auto& ov = table.cells[static_cast<size_t>(table.index_of(e, "overall"))];
        CHECK(ov.emm == doctest::Approx(std::sqrt(lo.emm * hi.emm)).epsilon(1e-10));
    }
}

TEST_CASE("sequential contrasts: hand values and telescoping") {
    auto table = toy_table({2.0, 4.0});
    auto seq = contrast_sequential(table, "news");
    REQUIRE(seq.estimates.size() == 1);
    CHECK(seq.estimates[0].ratio == doctest::Approx(2.0));

    auto flat = toy_table({3.0, 3.0, 3.0});
    auto seq_flat = contrast_sequential(flat, "news");
    for (const auto& e : seq_flat.estimates) {
        CHECK(e.ratio == doctest::Approx(1.0));
        CHECK(e.z == doctest::Approx(0.0));
    }

    Rng rng(5);
    std::vector<double> mus;
    for (int i = 0; i < 9; ++i) mus.push_back(std::exp(rng.normal(1.0, 0.8)));
    auto table9 = toy_table(mus);
    auto seq9 = contrast_sequential(table9, "news");
    double log_prod = 0;
    for (const auto& e : seq9.estimates) log_prod += e.log_ratio;
    CHECK(log_prod == doctest::Approx(std::log(mus.back() / mus.front())).epsilon(1e-12));
    CHECK(std::fabs(log_prod - (std::log(mus.back()) - std::log(mus.front()))) < 1e-10);
}

TEST_CASE("effect-coding contrasts: hand case, centering, singleton baseline") {
    auto table = toy_table({1.0, 4.0, 2.0});
    auto eff = contrast_effect_coding(table, "news");
    REQUIRE(eff.estimates.size() == 3);
    CHECK(eff.estimates[0].ratio == doctest::Approx(0.5));
    CHECK(eff.estimates[1].ratio == doctest::Approx(2.0));
    CHECK(eff.estimates[2].ratio == doctest::Approx(1.0));
    double log_prod = 0;
    for (const auto& e : eff.estimates) log_prod += e.log_ratio;
    CHECK(std::fabs(log_prod) < 1e-10);

    auto singleton = contrast_effect_coding(table, "news", {1});
    CHECK(singleton.estimates[1].ratio == doctest::Approx(1.0));
    CHECK(singleton.estimates[1].se == doctest::Approx(0.0));

    Rng rng(17);
    std::vector<double> mus;
    for (int i = 0; i < 12; ++i) mus.push_back(std::exp(rng.normal(0.0, 1.2)));
    auto t12 = toy_table(mus);
    auto e12 = contrast_effect_coding(t12, "news");
    double lp = 0;
    for (const auto& e : e12.estimates) lp += e.log_ratio;
    CHECK(std::fabs(lp) < 1e-10);
}

TEST_CASE("difference-in-difference estimates") {
    auto news = toy_table({2.0, 1.0}, "news");      // psi_seq = 0.5
    auto nonnews = toy_table({3.0, 3.0}, "nonnews");  // psi_seq = 1.0
    auto seq_n = contrast_sequential(news, "news");
    auto seq_nn = contrast_sequential(nonnews, "nonnews");
    auto did = did_estimate(seq_n, seq_nn);
    REQUIRE(did.estimates.size() == 1);
    CHECK(did.estimates[0].ratio == doctest::Approx(0.5));
    // independent bases: variances add
    CHECK(did.estimates[0].se ==
          doctest::Approx(std::sqrt(seq_n.estimates[0].se * seq_n.estimates[0].se +
                                    seq_nn.estimates[0].se * seq_nn.estimates[0].se))
              .epsilon(1e-12));

    auto did_null = did_estimate(seq_n, seq_n);
    CHECK(did_null.estimates[0].ratio == doctest::Approx(1.0));
    CHECK(did_null.estimates[0].se == doctest::Approx(0.0));

    auto misaligned = contrast_sequential(toy_table({1.0, 2.0, 3.0}, "x"), "x");
    CHECK_THROWS_AS(did_estimate(seq_n, misaligned), DomainError);
}

TEST_CASE("shared-fit DiD uses the joint covariance, not independence") {
    auto fit = small_fit(23, 0.6, 0.3);
    REQUIRE(fit.converged);
    auto table = emm(fit, {0, 1, 2}, {"low", "high"});
    auto seq_low = contrast_sequential(table, "low");
    auto seq_high = contrast_sequential(table, "high");
    auto did = did_estimate(seq_low, seq_high);
    const auto j = did.joint();
    // covariance symmetry and the estimate identity tau = psi_low / psi_high
    for (size_t i = 0; i < did.estimates.size(); ++i)
        CHECK(did.estimates[i].log_ratio ==
              doctest::Approx(seq_low.estimates[i].log_ratio -
                              seq_high.estimates[i].log_ratio)
                  .epsilon(1e-12));
    // shared base: the DiD variance differs from the independence formula
    const double indep = seq_low.estimates[0].se * seq_low.estimates[0].se +
                         seq_high.estimates[0].se * seq_high.estimates[0].se;
    CHECK(j.cov(0, 0) != doctest::Approx(indep).epsilon(1e-9));
}

TEST_CASE("parallel trends test") {
    SUBCASE("zero vector gives T = 0, p = 1") {
        JointEstimates j;
        j.est = Eigen::VectorXd::Zero(4);
        j.cov = Eigen::MatrixXd::Identity(4, 4);
        auto t = parallel_trends_test(j);
        CHECK(t.statistic == doctest::Approx(0.0));
        CHECK(t.df == 4);
        CHECK(t.p == doctest::Approx(1.0));
        CHECK_FALSE(t.rank_deficient);
    }
    SUBCASE("singular covariance uses the pseudo-inverse with rank df") {
        JointEstimates j;
        j.est = Eigen::VectorXd::Ones(3);
        Eigen::MatrixXd v(3, 1);
        v << 1, 1, 1;
        j.cov = v * v.transpose();  // rank 1
        auto t = parallel_trends_test(j);
        CHECK(t.rank_deficient);
        CHECK(t.df == 1);
        CHECK(t.statistic == doctest::Approx(1.0));
    }
}

TEST_CASE("family-wise adjustment on contrast results") {
    Rng rng(31);
    std::vector<double> mus;
    for (int i = 0; i < 6; ++i) mus.push_back(std::exp(rng.normal(0.0, 0.5)));
    auto table = toy_table(mus);
    auto seq = contrast_sequential(table, "news");
    auto raw = seq.estimates;
    adjust_family(seq);
    for (size_t i = 0; i < seq.estimates.size(); ++i) {
        CHECK(seq.estimates[i].p_adjusted >= raw[i].p_raw - 1e-12);
        CHECK(seq.estimates[i].p_adjusted <= 1.0);
        // simultaneous CIs are at least as wide as the raw ones
        CHECK(seq.estimates[i].ci_low <= raw[i].ci_low + 1e-12);
        CHECK(seq.estimates[i].ci_high >= raw[i].ci_high - 1e-12);
    }
}

TEST_CASE("total effects: identity, report shape, causal and vs-average versions") {
    auto fit = small_fit(29, 0.4, 0.2);
    REQUIRE(fit.converged);
    auto table = emm(fit, {0, 1, 2}, {"low", "high"});
    auto same = total_effect(table, 1, 1, {"low", "high"});
    for (const auto& e : same.estimates) CHECK(e.ratio == doctest::Approx(1.0));

    auto te = total_effect(table, 0, 2, {"low", "high"});
    const auto& lo0 = table.cells[static_cast<size_t>(table.index_of(0, "low"))];
    const auto& lo2 = table.cells[static_cast<size_t>(table.index_of(2, "low"))];
    CHECK(te.estimates[0].ratio == doctest::Approx(lo2.emm / lo0.emm).epsilon(1e-10));

    auto causal = total_effect(table, 0, 2, {"low"}, "high");
    const auto& hi0 = table.cells[static_cast<size_t>(table.index_of(0, "high"))];
    const auto& hi2 = table.cells[static_cast<size_t>(table.index_of(2, "high"))];
    CHECK(causal.estimates[0].ratio ==
          doctest::Approx((lo2.emm / lo0.emm) / (hi2.emm / hi0.emm)).epsilon(1e-10));

    auto vs_avg = total_effect(table, 0, 2, {"low", "high"}, "", true);
    const double log_avg =
        0.5 * (std::log(lo2.emm / lo0.emm) + std::log(hi2.emm / hi0.emm));
    CHECK(vs_avg.estimates[0].log_ratio ==
          doctest::Approx(std::log(lo2.emm / lo0.emm) - log_avg).epsilon(1e-10));
}
