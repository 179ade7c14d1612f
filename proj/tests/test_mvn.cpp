#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "engshift/mvn.hpp"

using namespace engshift;

namespace {

// independent oracle: P(|Z1| <= t, |Z2| <= t) under correlation rho via
// Simpson quadrature over the conditional decomposition
double bivariate_rect(double t, double rho, int n = 4001) {
    const double s = std::sqrt(1.0 - rho * rho);
    auto f = [&](double x) {
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        if (s < 1e-12) return pdf * ((std::fabs(rho * x) <= t) ? 1.0 : 0.0);
        return pdf * (normal_cdf((t - rho * x) / s) - normal_cdf((-t - rho * x) / s));
    };
    const double h = 2.0 * t / (n - 1);
    double acc = f(-t) + f(t);
    for (int i = 1; i < n - 1; ++i) acc += f(-t + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

} // namespace

TEST_CASE("bivariate equicoordinate probabilities match quadrature") {
    for (double rho : {0.0, 0.35, 0.8, -0.6}) {
        for (double t : {1.0, 1.96, 2.8}) {
            Eigen::MatrixXd R(2, 2);
            R << 1, rho, rho, 1;
            const double got = mvn_equicoordinate_prob(R, t);
            CHECK(got == doctest::Approx(bivariate_rect(t, rho)).epsilon(2e-3));
        }
    }
}

TEST_CASE("independence: P factorizes across coordinates") {
    const double t = 1.959963984540054;
    for (int d : {2, 3, 6}) {
        const Eigen::MatrixXd R = Eigen::MatrixXd::Identity(d, d);
        const double uni = 1.0 - 2.0 * normal_sf(t);
        CHECK(mvn_equicoordinate_prob(R, t) ==
              doctest::Approx(std::pow(uni, d)).epsilon(2e-3));
    }
}

TEST_CASE("perfect correlation collapses to the univariate probability") {
    Eigen::MatrixXd R = Eigen::MatrixXd::Ones(4, 4);
    for (double t : {1.0, 2.0}) {
        CHECK(mvn_equicoordinate_prob(R, t) ==
              doctest::Approx(1.0 - 2.0 * normal_sf(t)).epsilon(2e-3));
    }
}

TEST_CASE("max-|z| p-values: Sidak limit and degenerate family") {
    const double z05 = 1.959963984540054;  // raw p = 0.05
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    CHECK(max_abs_z_pvalue(I2, z05) == doctest::Approx(1.0 - 0.95 * 0.95).epsilon(0.02));
    Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(5, 5);
    CHECK(max_abs_z_pvalue(ones, z05) == doctest::Approx(0.05).epsilon(0.03));
}

TEST_CASE("equicoordinate quantile") {
    Eigen::MatrixXd I1 = Eigen::MatrixXd::Identity(1, 1);
    CHECK(equicoordinate_quantile(I1, 0.95) == doctest::Approx(1.95996).epsilon(1e-3));
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    // solves (1 - 2 Phi(-c))^2 = 0.95
    const double expect = -normal_quantile(0.5 * (1.0 - std::sqrt(0.95)));
    CHECK(equicoordinate_quantile(I2, 0.95) == doctest::Approx(expect).epsilon(5e-3));
    // the quantile is monotone in correlation: stronger dependence, smaller c
    Eigen::MatrixXd R(2, 2);
    R << 1, 0.9, 0.9, 1;
    CHECK(equicoordinate_quantile(R, 0.95) < equicoordinate_quantile(I2, 0.95));
}
