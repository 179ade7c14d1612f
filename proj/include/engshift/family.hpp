#pragma once

#include <cmath>
#include <limits>

#include "engshift/common.hpp"
#include "engshift/stats.hpp"

namespace engshift {

enum class NbParam { nb1_linear, nb2_quadratic };

// ---------------------------------------------------------------------------
// Bivariate truncated Taylor scalar (partials up to total order 3 in the two
// linear predictors eta = log mu and lambda = log phi). The negative binomial
// log-likelihood and all derivatives the Laplace machinery needs are built by
// composing these jets, which avoids hand-derived third-order formulas.
// ---------------------------------------------------------------------------

struct Jet2 {
    double v = 0, e = 0, l = 0;
    double ee = 0, el = 0, ll = 0;
    double eee = 0, eel = 0, ell = 0, lll = 0;

    static Jet2 constant(double c) { return Jet2{c, 0, 0, 0, 0, 0, 0, 0, 0, 0}; }
    static Jet2 eta(double value) { return Jet2{value, 1, 0, 0, 0, 0, 0, 0, 0, 0}; }
    static Jet2 lambda(double value) { return Jet2{value, 0, 1, 0, 0, 0, 0, 0, 0, 0}; }

    Jet2 operator+(const Jet2& o) const {
        return {v + o.v,   e + o.e,   l + o.l,   ee + o.ee, el + o.el,
                ll + o.ll, eee + o.eee, eel + o.eel, ell + o.ell, lll + o.lll};
    }
    Jet2 operator-(const Jet2& o) const {
        return {v - o.v,   e - o.e,   l - o.l,   ee - o.ee, el - o.el,
                ll - o.ll, eee - o.eee, eel - o.eel, ell - o.ell, lll - o.lll};
    }
    Jet2 operator*(double s) const {
        return {v * s,  e * s,  l * s,  ee * s,  el * s,
                ll * s, eee * s, eel * s, ell * s, lll * s};
    }
    Jet2 operator*(const Jet2& g) const {
        const Jet2& f = *this;
        Jet2 h;
        h.v = f.v * g.v;
        h.e = f.e * g.v + f.v * g.e;
        h.l = f.l * g.v + f.v * g.l;
        h.ee = f.ee * g.v + 2 * f.e * g.e + f.v * g.ee;
        h.el = f.el * g.v + f.e * g.l + f.l * g.e + f.v * g.el;
        h.ll = f.ll * g.v + 2 * f.l * g.l + f.v * g.ll;
        h.eee = f.eee * g.v + 3 * f.ee * g.e + 3 * f.e * g.ee + f.v * g.eee;
        h.eel = f.eel * g.v + f.ee * g.l + 2 * (f.el * g.e + f.e * g.el) + f.l * g.ee +
                f.v * g.eel;
        h.ell = f.ell * g.v + f.ll * g.e + 2 * (f.el * g.l + f.l * g.el) + f.e * g.ll +
                f.v * g.ell;
        h.lll = f.lll * g.v + 3 * f.ll * g.l + 3 * f.l * g.ll + f.v * g.lll;
        return h;
    }
};

// univariate g applied to a jet: needs g and its first three derivatives at f.v
inline Jet2 compose(const Jet2& f, double g0, double g1, double g2, double g3) {
    Jet2 h;
    h.v = g0;
    h.e = g1 * f.e;
    h.l = g1 * f.l;
    h.ee = g2 * f.e * f.e + g1 * f.ee;
    h.el = g2 * f.e * f.l + g1 * f.el;
    h.ll = g2 * f.l * f.l + g1 * f.ll;
    h.eee = g3 * f.e * f.e * f.e + 3 * g2 * f.e * f.ee + g1 * f.eee;
    h.eel = g3 * f.e * f.e * f.l + g2 * (f.ee * f.l + 2 * f.e * f.el) + g1 * f.eel;
    h.ell = g3 * f.e * f.l * f.l + g2 * (f.ll * f.e + 2 * f.l * f.el) + g1 * f.ell;
    h.lll = g3 * f.l * f.l * f.l + 3 * g2 * f.l * f.ll + g1 * f.lll;
    return h;
}

inline Jet2 jet_exp(const Jet2& f) {
    const double x = std::exp(f.v);
    return compose(f, x, x, x, x);
}

inline Jet2 jet_log(const Jet2& f) {
    const double x = f.v;
    return compose(f, std::log(x), 1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x));
}

// log(1 + e^x), stable for large |x|
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Jet2 jet_softplus(const Jet2& f) {
    const double s = 1.0 / (1.0 + std::exp(-f.v));  // logistic
    const double s1 = s * (1.0 - s);
    return compose(f, softplus(f.v), s, s1, s1 * (1.0 - 2.0 * s));
}

// lgamma(y + r) - lgamma(r) and its first three derivatives in r. For small
// integer y the telescoping sum is exact; otherwise polygamma differences.
inline void lgamma_ratio(double y, double r, double& a0, double& a1, double& a2, double& a3) {
    const auto yi = static_cast<long>(y);
    if (y == static_cast<double>(yi) && yi >= 0 && yi <= 64) {
        a0 = a1 = a2 = a3 = 0.0;
        for (long j = 0; j < yi; ++j) {
            const double t = r + static_cast<double>(j);
            const double it = 1.0 / t;
            a0 += std::log(t);
            a1 += it;
            a2 -= it * it;
            a3 += 2.0 * it * it * it;
        }
        return;
    }
    a0 = std::lgamma(y + r) - std::lgamma(r);
    a1 = psi0(y + r) - psi0(r);
    a2 = psi1(y + r) - psi1(r);
    a3 = psi2(y + r) - psi2(r);
}

// value-only variant, safe for extreme r
inline double lgamma_ratio0(double y, double r) {
    const auto yi = static_cast<long>(y);
    if (y == static_cast<double>(yi) && yi >= 0 && yi <= 64) {
        double a0 = 0.0;
        for (long j = 0; j < yi; ++j) a0 += std::log(r + static_cast<double>(j));
        return a0;
    }
    return std::lgamma(y + r) - std::lgamma(r);
}

inline Jet2 jet_lgamma_ratio(double y, const Jet2& r) {
    double a0, a1, a2, a3;
    lgamma_ratio(y, r.v, a0, a1, a2, a3);
    return compose(r, a0, a1, a2, a3);
}

// ---------------------------------------------------------------------------
// Negative binomial log-likelihood in (eta, lambda) space.
//   NB1 (linear):    size = mu/phi, success prob 1/(1+phi); var = mu(1+phi)
//   NB2 (quadratic): size = phi, mean mu;                   var = mu + mu^2/phi
// ---------------------------------------------------------------------------

inline Jet2 nb_loglik_jet(double y, double eta, double lambda, NbParam param) {
    // guard against underflowed size parameters: polygamma needs r >> 0
    const double log_r = param == NbParam::nb1_linear ? eta - lambda : lambda;
    if (!std::isfinite(eta) || !std::isfinite(lambda) || log_r < -600.0 || log_r > 600.0) {
        Jet2 nan_jet = Jet2::constant(std::numeric_limits<double>::quiet_NaN());
        return nan_jet;
    }
    const Jet2 je = Jet2::eta(eta), jl = Jet2::lambda(lambda);
    if (param == NbParam::nb1_linear) {
        const Jet2 r = jet_exp(je - jl);           // mu / phi
        const Jet2 c = jet_softplus(jl);           // log(1 + phi)
        Jet2 out = jet_lgamma_ratio(y, r) - r * c + (jl - c) * y;
        out.v -= std::lgamma(y + 1.0);
        return out;
    }
    // NB2 in cancellation-free form: with sp = log1p(mu/phi) = softplus(eta-lambda),
    //   l = lgamma(y+phi) - lgamma(phi) - lgamma(y+1) - phi*sp + y*(eta - lambda - sp)
    const Jet2 phi = jet_exp(jl);
    const Jet2 sp = jet_softplus(je - jl);
    Jet2 out = jet_lgamma_ratio(y, phi) - phi * sp + (je - jl - sp) * y;
    out.v -= std::lgamma(y + 1.0);
    return out;
}

// exact log pmf; domain-checked entry point
inline double nb_log_pmf(double y, double mu, double phi, NbParam param) {
    if (!std::isfinite(y) || !std::isfinite(mu) || !std::isfinite(phi))
        throw DomainError("nb_log_pmf: non-finite input");
    if (!(mu > 0.0) || !(phi > 0.0)) throw DomainError("nb_log_pmf: mu and phi must be > 0");
    if (y < 0.0 || y != std::floor(y)) throw DomainError("nb_log_pmf: y must be a nonnegative integer");
    const double r = param == NbParam::nb1_linear ? mu / phi : phi;
    if (!(r > 0.0) || !std::isfinite(r)) throw DomainError("nb_log_pmf: degenerate size parameter");
    const double a0 = lgamma_ratio0(y, r);
    // logp = log prob of a "success" for the size-r formulation
    if (param == NbParam::nb1_linear) {
        const double c = softplus(std::log(phi));
        return a0 - std::lgamma(y + 1.0) - r * c + y * (std::log(phi) - c);
    }
    const double sp = softplus(std::log(mu) - std::log(phi));
    return a0 - std::lgamma(y + 1.0) - phi * sp + y * (std::log(mu) - std::log(phi) - sp);
}

inline double poisson_log_pmf(double y, double mu) {
    return y * std::log(mu) - mu - std::lgamma(y + 1.0);
}

// conditional variance under the fitted dispersion model
inline double nb_variance(double mu, double phi, NbParam param) {
    return param == NbParam::nb1_linear ? mu * (1.0 + phi) : mu + mu * mu / phi;
}

} // namespace engshift
