#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/optim.hpp"
#include "engshift/stats.hpp"

namespace engshift {

// Gaussian regression with group-specific intercepts, slopes and error
// variances and a shared AR(1) error correlation, fitted by exact maximum
// likelihood. For fixed phi the whitened regression solves the per-group
// intercept/slope/variance profile in closed form, so the optimization is a
// one-dimensional search over atanh(phi).

struct GroupSeries {
    std::string group;
    std::vector<double> x;  // predictor (log post counts)
    std::vector<double> y;  // response (log reaction counts)
};

struct Ar1Fit {
    std::vector<std::string> groups;
    Eigen::VectorXd intercept, slope;
    Eigen::VectorXd sigma2;        // group error variances
    double phi_ar = 0.0;
    Eigen::MatrixXd vcov;          // [a_g..., b_g..., log sigma2_g..., atanh(phi)]
    Eigen::VectorXd se_slope;
    std::vector<char> slope_identifiable;
    std::vector<double> var_x, var_y;  // sample variances per group
    double loglik = 0.0;
    bool degenerate = false;       // an exact linear relationship was found
    std::vector<std::vector<double>> resid_raw;    // e_t per group
    std::vector<std::vector<double>> resid_white;  // innovations per group

    long group_index(const std::string& g) const {
        for (size_t i = 0; i < groups.size(); ++i)
            if (groups[i] == g) return static_cast<long>(i);
        throw DomainError("unknown group: " + g);
    }
};

namespace ar1_detail {

// exact AR(1) log-likelihood of residuals e with variance sigma2, corr phi
inline double exact_loglik(const std::vector<double>& e, double sigma2, double phi) {
    const size_t n = e.size();
    const double tau2 = sigma2 * (1.0 - phi * phi);
    double ll = -0.5 * (std::log(2.0 * M_PI * sigma2) + e[0] * e[0] / sigma2);
    for (size_t t = 1; t < n; ++t) {
        const double nu = e[t] - phi * e[t - 1];
        ll -= 0.5 * (std::log(2.0 * M_PI * tau2) + nu * nu / tau2);
    }
    return ll;
}

struct ProfileResult {
    double loglik = 0.0;
    std::vector<double> a, b, tau2;
    std::vector<char> identifiable;
    bool degenerate = false;
};

// closed-form per-group profile for fixed phi (whitened least squares)
inline ProfileResult profile_at(const std::vector<GroupSeries>& data, double phi) {
    ProfileResult out;
    const double s0 = std::sqrt(1.0 - phi * phi);
    double ll = 0.0;
    for (const auto& g : data) {
        const size_t n = g.x.size();
        std::vector<double> xs(n), ys(n), ones(n);
        xs[0] = g.x[0] * s0;
        ys[0] = g.y[0] * s0;
        ones[0] = s0;
        for (size_t t = 1; t < n; ++t) {
            xs[t] = g.x[t] - phi * g.x[t - 1];
            ys[t] = g.y[t] - phi * g.y[t - 1];
            ones[t] = 1.0 - phi;
        }
        double sxx = 0, sx1 = 0, s11 = 0, sxy = 0, s1y = 0, syy = 0;
        for (size_t t = 0; t < n; ++t) {
            sxx += xs[t] * xs[t];
            sx1 += xs[t] * ones[t];
            s11 += ones[t] * ones[t];
            sxy += xs[t] * ys[t];
            s1y += ones[t] * ys[t];
            syy += ys[t] * ys[t];
        }
        double xvar = 0, xmean = 0;
        for (double v : g.x) xmean += v;
        xmean /= static_cast<double>(n);
        for (double v : g.x) xvar += (v - xmean) * (v - xmean);
        const bool ident = xvar > 1e-12 * static_cast<double>(n);
        double a, b;
        if (ident) {
            const double det = sxx * s11 - sx1 * sx1;
            b = (sxy * s11 - s1y * sx1) / det;
            a = (s1y * sxx - sxy * sx1) / det;
        } else {
            b = 0.0;
            a = s1y / s11;
        }
        double rss = 0.0;
        for (size_t t = 0; t < n; ++t) {
            const double r = ys[t] - a * ones[t] - b * xs[t];
            rss += r * r;
        }
        const double dn = static_cast<double>(n);
        double tau2 = rss / dn;
        if (tau2 < 1e-14 * std::max(1.0, syy / dn)) {
            out.degenerate = true;
            tau2 = std::max(tau2, 1e-300);
        }
        ll += -0.5 * dn * std::log(2.0 * M_PI) + 0.5 * std::log(1.0 - phi * phi) -
              0.5 * dn * std::log(tau2) - 0.5 * dn;
        out.a.push_back(a);
        out.b.push_back(b);
        out.tau2.push_back(tau2);
        out.identifiable.push_back(ident ? 1 : 0);
    }
    out.loglik = ll;
    return out;
}

} // namespace ar1_detail

inline Ar1Fit fit_ar1_gaussian(const std::vector<GroupSeries>& data) {
    if (data.empty()) throw InsufficientDataError("fit_ar1_gaussian: no groups");
    for (const auto& g : data) {
        if (g.x.size() != g.y.size())
            throw SchemaError("group " + g.group + ": x and y lengths differ");
        if (g.x.size() < 10)
            throw InsufficientDataError("group " + g.group + ": needs >= 10 time points");
    }

    // 1-D profile over atanh(phi); tanh keeps phi inside (-1, 1)
    auto nll = [&](double zeta) {
        return -ar1_detail::profile_at(data, std::tanh(zeta)).loglik;
    };
    const double zmax = std::atanh(0.9999);
    double zstar = brent_minimize(nll, -zmax, zmax, 1e-10);
    ar1_detail::ProfileResult prof = ar1_detail::profile_at(data, std::tanh(zstar));
    if (prof.degenerate) {
        zstar = 0.0;  // phi unidentified under an exact fit; pin it at zero
        prof = ar1_detail::profile_at(data, 0.0);
    }
    const double phi = std::tanh(zstar);

    Ar1Fit fit;
    const auto G = static_cast<long>(data.size());
    fit.intercept.resize(G);
    fit.slope.resize(G);
    fit.sigma2.resize(G);
    fit.se_slope.resize(G);
    fit.phi_ar = phi;
    fit.degenerate = prof.degenerate;
    fit.loglik = prof.loglik;
    for (long i = 0; i < G; ++i) {
        fit.groups.push_back(data[static_cast<size_t>(i)].group);
        fit.intercept(i) = prof.a[static_cast<size_t>(i)];
        fit.slope(i) = prof.b[static_cast<size_t>(i)];
        fit.sigma2(i) = prof.tau2[static_cast<size_t>(i)] / (1.0 - phi * phi);
        fit.slope_identifiable.push_back(prof.identifiable[static_cast<size_t>(i)]);
        const auto& g = data[static_cast<size_t>(i)];
        fit.var_x.push_back(g.x.size() > 1 ? variance(g.x) : 0.0);
        fit.var_y.push_back(g.y.size() > 1 ? variance(g.y) : 0.0);
        std::vector<double> e(g.x.size()), wres;
        for (size_t t = 0; t < g.x.size(); ++t)
            e[t] = g.y[t] - fit.intercept(i) - fit.slope(i) * g.x[t];
        wres.push_back(e[0] * std::sqrt(1.0 - phi * phi));
        for (size_t t = 1; t < e.size(); ++t) wres.push_back(e[t] - phi * e[t - 1]);
        fit.resid_raw.push_back(e);
        fit.resid_white.push_back(std::move(wres));
    }

    // asymptotic covariance via the numeric Hessian of the full likelihood in
    // [a_g, b_g, log sigma2_g, atanh(phi)]
    const long P = 3 * G + 1;
    Eigen::VectorXd theta(P);
    for (long i = 0; i < G; ++i) {
        theta(i) = fit.intercept(i);
        theta(G + i) = fit.slope(i);
        theta(2 * G + i) = std::log(std::max(fit.sigma2(i), 1e-300));
    }
    theta(3 * G) = zstar;
    auto full_nll = [&](const Eigen::VectorXd& th) {
        const double ph = std::tanh(th(3 * G));
        double ll = 0.0;
        for (long i = 0; i < G; ++i) {
            const auto& g = data[static_cast<size_t>(i)];
            std::vector<double> e(g.x.size());
            for (size_t t = 0; t < g.x.size(); ++t)
                e[t] = g.y[t] - th(i) - th(G + i) * g.x[t];
            ll += ar1_detail::exact_loglik(e, std::exp(th(2 * G + i)), ph);
        }
        return -ll;
    };
    if (!fit.degenerate) {
        Eigen::MatrixXd H(P, P);
        for (long j = 0; j < P; ++j) {
            const double h = 1e-5 * std::max(1.0, std::fabs(theta(j)));
            for (long k = 0; k <= j; ++k) {
                const double hk = 1e-5 * std::max(1.0, std::fabs(theta(k)));
                Eigen::VectorXd tpp = theta, tpm = theta, tmp = theta, tmm = theta;
                tpp(j) += h; tpp(k) += hk;
                tpm(j) += h; tpm(k) -= hk;
                tmp(j) -= h; tmp(k) += hk;
                tmm(j) -= h; tmm(k) -= hk;
                H(j, k) = H(k, j) =
                    (full_nll(tpp) - full_nll(tpm) - full_nll(tmp) + full_nll(tmm)) /
                    (4 * h * hk);
            }
        }
        fit.vcov = H.ldlt().solve(Eigen::MatrixXd::Identity(P, P));
        for (long i = 0; i < G; ++i)
            fit.se_slope(i) = std::sqrt(std::max(0.0, fit.vcov(G + i, G + i)));
    } else {
        fit.vcov = Eigen::MatrixXd::Zero(P, P);
        fit.se_slope.setZero();
    }
    return fit;
}

// Pearson correlation adjusted for autocorrelation:
// r = slope_g * sqrt(Var(x|g) / Var(y|g)); the p-value is the Wald p of the
// group slope.
inline std::pair<double, double> adjusted_correlation(const Ar1Fit& fit, const std::string& group) {
    const long i = fit.group_index(group);
    if (!fit.slope_identifiable[static_cast<size_t>(i)])
        throw DomainError("group " + group + ": slope unidentifiable (constant predictor)");
    if (!(fit.var_x[static_cast<size_t>(i)] > 0.0))
        throw DomainError("group " + group + ": zero predictor variance");
    if (!(fit.var_y[static_cast<size_t>(i)] > 0.0))
        throw DomainError("group " + group + ": zero response variance");
    const double r = fit.slope(i) * std::sqrt(fit.var_x[static_cast<size_t>(i)] /
                                              fit.var_y[static_cast<size_t>(i)]);
    double p = 0.0;
    if (fit.se_slope(i) > 0.0)
        p = z_pvalue(fit.slope(i) / fit.se_slope(i));
    return {r, p};
}

inline std::vector<double> residual_acf(const Ar1Fit& fit, const std::string& group,
                                        int max_lag, bool whitened = true) {
    const long i = fit.group_index(group);
    const auto& r = whitened ? fit.resid_white[static_cast<size_t>(i)]
                             : fit.resid_raw[static_cast<size_t>(i)];
    return acf(r, max_lag);
}

inline std::vector<double> residual_acf(const Ar1Fit& fit, int max_lag, bool whitened = true) {
    if (fit.groups.size() != 1)
        throw DomainError("residual_acf without a group requires a single-group fit");
    return residual_acf(fit, fit.groups[0], max_lag, whitened);
}

} // namespace engshift
