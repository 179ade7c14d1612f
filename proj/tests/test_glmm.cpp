#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "engshift/glmm.hpp"
#include "engshift/optim.hpp"
#include "engshift/stats.hpp"
#include "engshift/synthetic.hpp"

using namespace engshift;

namespace {

FormulaSpec make_spec(const std::string& mean, const std::string& disp, Parametrization p) {
    FormulaSpec s;
    s.mean = parse_formula(mean);
    s.dispersion = parse_formula(disp);
    s.parametrization = p;
    return s;
}

// small panel: 8 outlets x 2 epochs, NB1 with outlet intercepts
GeneratedPanel small_panel(std::uint64_t seed, double sd_outlet = 0.6,
                           Parametrization param = Parametrization::nb1_linear,
                           double phi = 1.5) {
    PanelTruth t;
    t.window_start = days_from_civil(2016, 1, 1);
    t.window_end = days_from_civil(2016, 4, 29);  // 120 days
    t.changepoint_days = {days_from_civil(2016, 3, 1)};
    GroupTruth g;
    g.name = "low";
    g.quality = Quality::low;
    g.n_outlets = 8;
    g.log_mean = {4.0, 3.3};
    t.groups = {g};
    t.sd_outlet = sd_outlet;
    t.parametrization = param;
    t.phi = phi;
    t.posts_per_day = 0.8;
    t.seed = seed;
    return generate_panel(t);
}

DataFrame frame_of(const GeneratedPanel& gen, const PanelTruth* truth_for_epochs = nullptr,
                   const std::vector<DayNumber>* cps = nullptr) {
    std::vector<int> labels;
    if (cps) labels = epoch_labels(gen.posts, *cps);
    return model_frame_from_posts(gen.posts, gen.outlets, cps ? &labels : nullptr);
}

} // namespace

TEST_CASE("intercept-only NB2 without random effects matches the 1-D oracle") {
    PanelTruth t;
    t.window_start = days_from_civil(2016, 1, 1);
    t.window_end = t.window_start + 199;
    GroupTruth g;
    g.name = "low";
    g.n_outlets = 1;
    g.log_mean = {3.0};
    t.groups = {g};
    t.sd_outlet = 0.0;
    t.parametrization = Parametrization::nb2_quadratic;
    t.phi = 2.0;
    t.posts_per_day = 3.0;
    t.seed = 17;
    auto gen = generate_panel(t);
    auto df = model_frame_from_posts(gen.posts, gen.outlets);

    auto fit = fit_nb_glmm(df, make_spec("1", "1", Parametrization::nb2_quadratic));
    REQUIRE(fit.converged);

    double ysum = 0;
    for (const auto& r : gen.posts.records) ysum += static_cast<double>(*r.reactions);
    const double ybar = ysum / static_cast<double>(gen.posts.size());
    CHECK(fit.beta(0) == doctest::Approx(std::log(ybar)).epsilon(1e-6));

    // independent oracle: profile beta0 at log(ybar), optimize log-phi by Brent
    std::vector<double> ys;
    for (const auto& r : gen.posts.records) ys.push_back(static_cast<double>(*r.reactions));
    auto nll = [&](double log_phi) {
        double s = 0;
        for (double y : ys) s -= nb_log_pmf(y, ybar, std::exp(log_phi), NbParam::nb2_quadratic);
        return s;
    };
    const double lp = brent_minimize(nll, -3.0, 6.0);
    CHECK(fit.disp_beta(0) == doctest::Approx(lp).epsilon(1e-3));
    CHECK(fit.loglik == doctest::Approx(-nll(lp)).epsilon(1e-6));
}

TEST_CASE("analytic gradient matches central finite differences (NB1 and NB2)") {
    for (auto param : {Parametrization::nb1_linear, Parametrization::nb2_quadratic}) {
        auto gen = small_panel(31, 0.6, param, 1.2);
        std::vector<DayNumber> cps = {days_from_civil(2016, 3, 1)};
        auto df = frame_of(gen, nullptr, &cps);
        auto spec = make_spec("epoch + (1|outlet)", "epoch + (1|outlet)", param);
        GlmmEngine engine(df, spec);
        Rng rng(7);
        Eigen::VectorXd omega = engine.start();
        for (int pt = 0; pt < 6; ++pt) {
            Eigen::VectorXd w = omega;
            for (long j = 0; j < w.size(); ++j) w(j) += 0.15 * rng.normal();
            const double worst = engine.gradient_check(w, 1e-4);
            CHECK(worst < 1e-4);
        }
    }
}

TEST_CASE("gradient check with correlated random slopes and crossed terms") {
    PanelTruth t;
    t.window_start = days_from_civil(2016, 1, 1);
    t.window_end = t.window_start + 99;
    t.changepoint_days = {t.window_start + 50};
    GroupTruth a, b;
    a.name = "low";
    a.quality = Quality::low;
    a.n_outlets = 4;
    a.log_mean = {3.5, 3.0};
    b.name = "high";
    b.quality = Quality::high;
    b.n_outlets = 4;
    b.log_mean = {2.8, 3.2};
    t.groups = {a, b};
    t.sd_outlet = 0.4;
    t.sd_day = 0.1;
    t.phi = 1.0;
    t.posts_per_day = 0.7;
    t.seed = 5;
    auto gen = generate_panel(t);
    auto labels = epoch_labels(gen.posts, t.changepoint_days);
    auto df = model_frame_from_posts(gen.posts, gen.outlets, &labels);

    auto spec = make_spec("quality*epoch + (1|outlet) + (1+quality|day)",
                          "quality + (1|outlet)", Parametrization::nb1_linear);
    GlmmEngine engine(df, spec);
    Rng rng(11);
    Eigen::VectorXd omega = engine.start();
    for (int pt = 0; pt < 4; ++pt) {
        Eigen::VectorXd w = omega;
        for (long j = 0; j < w.size(); ++j) w(j) += 0.12 * rng.normal();
        const double worst = engine.gradient_check(w, 1e-4);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("random-intercept NB1 fit recovers the generator parameters") {
    auto gen = small_panel(3, 0.6, Parametrization::nb1_linear, 1.5);
    std::vector<DayNumber> cps = {days_from_civil(2016, 3, 1)};
    auto df = frame_of(gen, nullptr, &cps);
    FitOptions opt;
    opt.track_objective = true;
    auto fit = fit_nb_glmm(df, make_spec("epoch + (1|outlet)", "1", Parametrization::nb1_linear),
                           opt);
    REQUIRE(fit.converged);
    CHECK(fit.grad_norm <= 1e-5);
    // epoch effect: truth is 3.3 - 4.0 = -0.7
    CHECK(fit.beta(1) == doctest::Approx(-0.7).scale(1.0).epsilon(0.25));
    CHECK(std::exp(fit.disp_beta(0)) == doctest::Approx(1.5).epsilon(0.35));
    const double sd_outlet = std::sqrt(fit.re_mean[0].cov(0, 0));
    CHECK(sd_outlet == doctest::Approx(0.6).epsilon(0.6));
    CHECK_FALSE(fit.boundary);

    // line-search contract: accepted objective values decrease monotonically
    REQUIRE(fit.objective_trace.size() > 2);
    for (size_t i = 1; i < fit.objective_trace.size(); ++i)
        CHECK(fit.objective_trace[i] <= fit.objective_trace[i - 1] + 1e-10);
}

TEST_CASE("degenerate data: constant responses drive the variance to the boundary") {
    PostTable posts;
    OutletDirectory outlets;
    for (int o = 0; o < 5; ++o) {
        OutletMeta m;
        m.outlet_id = "o" + std::to_string(o);
        m.name = m.outlet_id;
        m.sector = Sector::news;
        m.quality = Quality::low;
        m.mean_posts = 1.0;
        outlets.outlets.push_back(m);
        for (int i = 0; i < 40; ++i) {
            PostRecord r;
            r.post_id = m.outlet_id + "_" + std::to_string(i);
            r.outlet_id = m.outlet_id;
            r.published_at = {days_from_civil(2016, 1, 1) + i, 0};
            r.post_type = PostType::link;
            r.reactions = 7;  // constant
            posts.records.push_back(r);
        }
    }
    auto df = model_frame_from_posts(posts, outlets);
    auto fit = fit_nb_glmm(df, make_spec("1 + (1|outlet)", "1", Parametrization::nb2_quadratic));
    CHECK(fit.beta(0) == doctest::Approx(std::log(7.0)).epsilon(5e-3));
    CHECK(fit.boundary);
    CHECK(std::sqrt(fit.re_mean[0].cov(0, 0)) < 0.01);
}

TEST_CASE("aliased fixed-effect columns are dropped and reported") {
    auto gen = small_panel(13);
    std::vector<DayNumber> cps = {days_from_civil(2016, 3, 1)};
    auto df = frame_of(gen, nullptr, &cps);
    // quality has a single observed level -> quality*epoch collapses
    auto fit = fit_nb_glmm(df, make_spec("quality*epoch + (1|outlet)", "1",
                                         Parametrization::nb1_linear));
    CHECK(fit.converged);
    CHECK(!fit.dropped_mean.empty());
    CHECK(fit.beta_names.size() == 2);  // intercept + epoch[1]
}

TEST_CASE("affine reparametrization of a continuous covariate leaves fitted means unchanged") {
    auto gen = small_panel(47, 0.5);
    std::vector<DayNumber> cps = {days_from_civil(2016, 3, 1)};
    auto labels = epoch_labels(gen.posts, cps);
    auto df = model_frame_from_posts(gen.posts, gen.outlets, &labels);

    // second frame with log(n_posts) standardized
    std::vector<double> np = df.numeric("n_posts");
    std::vector<double> lognp(np.size());
    for (size_t i = 0; i < np.size(); ++i) lognp[i] = std::log(np[i]);
    const double m = mean(lognp), s = std::sqrt(variance(lognp));
    std::vector<double> std_np(np.size());
    for (size_t i = 0; i < np.size(); ++i) std_np[i] = std::exp((lognp[i] - m) / s);
    DataFrame df2 = df;
    df2.add_numeric("n_posts", std_np);

    auto spec = make_spec("epoch + log(n_posts) + (1|outlet)", "1", Parametrization::nb1_linear);
    auto f1 = fit_nb_glmm(df, spec);
    auto f2 = fit_nb_glmm(df2, spec);
    REQUIRE(f1.converged);
    REQUIRE(f2.converged);
    auto p1 = predict_conditional(f1, df);
    auto p2 = predict_conditional(f2, df2);
    for (size_t i = 0; i < p1.size(); i += 7)
        CHECK(p1[i].mu == doctest::Approx(p2[i].mu).epsilon(1e-5));
}

TEST_CASE("predict_conditional: parametrization identity and unseen levels") {
    auto gen = small_panel(21);
    std::vector<DayNumber> cps = {days_from_civil(2016, 3, 1)};
    auto df = frame_of(gen, nullptr, &cps);
    auto fit = fit_nb_glmm(df, make_spec("epoch + (1|outlet)", "epoch",
                                         Parametrization::nb1_linear));
    REQUIRE(fit.converged);
    auto preds = predict_conditional(fit, df);
    for (size_t i = 0; i < preds.size(); i += 11) {
        const double phi = std::exp(preds[i].lambda);
        CHECK(preds[i].sigma * preds[i].sigma ==
              doctest::Approx(preds[i].mu * (1 + phi)).epsilon(1e-10));
    }

    DataFrame bad;
    bad.add_numeric("reactions", {1.0});
    bad.add_numeric("n_posts", {1.0});
    bad.add_factor("quality", {"low"});
    bad.add_factor("outlet", {"nope"});
    bad.add_factor("day", {"2016-01-01"});
    bad.add_factor("post_type", {"link"});
    bad.add_factor("epoch", {"0"});
    CHECK_THROWS_WITH_AS(static_cast<void>(predict_conditional(fit, bad)),
                         doctest::Contains("nope"), PredictionError);
}

TEST_CASE("grouping factors need at least two levels") {
    auto gen = small_panel(9);
    // collapse all posts onto one outlet
    for (auto& r : gen.posts.records) r.outlet_id = gen.outlets.outlets[0].outlet_id;
    gen.outlets.outlets.resize(1);
    auto df = model_frame_from_posts(gen.posts, gen.outlets);
    CHECK_THROWS_AS(fit_nb_glmm(df, make_spec("1 + (1|outlet)", "1",
                                              Parametrization::nb1_linear)),
                    InsufficientDataError);
}

TEST_CASE("held-out Spearman correlation on synthetic data is >= 0.6") {
    auto gen = small_panel(57, 0.9, Parametrization::nb2_quadratic, 3.0);
    // hold out every fifth post, keeping each day's first post in training so
    // all grouping levels stay covered
    PostTable train, test;
    std::set<DayNumber> seen_days;
    for (size_t i = 0; i < gen.posts.size(); ++i) {
        const auto& r = gen.posts.records[i];
        const bool first_of_day = seen_days.insert(r.published_at.day).second;
        ((i % 5 == 0 && !first_of_day) ? test : train).records.push_back(r);
    }
    auto df_train = model_frame_from_posts(train, gen.outlets);
    auto df_test = model_frame_from_posts(test, gen.outlets);
    auto fit = fit_nb_glmm(df_train, make_spec("1 + (1|outlet) + (1|day)", "1",
                                               Parametrization::nb2_quadratic));
    REQUIRE(fit.converged);
    auto preds = predict_conditional(fit, df_test);
    std::vector<double> mu, y;
    for (size_t i = 0; i < preds.size(); ++i) {
        mu.push_back(preds[i].mu);
        y.push_back(df_test.numeric("reactions")[i]);
    }
    CHECK(spearman(mu, y) >= 0.6);
}
