#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/rng.hpp"
#include "engshift/stats.hpp"

namespace engshift {

// Equicoordinate multivariate normal probabilities P(max_i |Z_i| <= t) for
// Z ~ N(0, R), via Genz's sequential conditioning with a randomized
// quasi-Monte Carlo (Richtmyer) rule. Handles singular correlation matrices:
// coordinates with zero conditional variance contribute indicator terms.

namespace mvn_detail {

// semidefinite Cholesky: zero columns where the pivot vanishes
inline Eigen::MatrixXd psd_cholesky(const Eigen::MatrixXd& R) {
    const long d = R.rows();
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(d, d);
    for (long j = 0; j < d; ++j) {
        double pivot = R(j, j);
        for (long k = 0; k < j; ++k) pivot -= L(j, k) * L(j, k);
        if (pivot <= 1e-12) continue;  // degenerate direction
        L(j, j) = std::sqrt(pivot);
        for (long i = j + 1; i < d; ++i) {
            double v = R(i, j);
            for (long k = 0; k < j; ++k) v -= L(i, k) * L(j, k);
            L(i, j) = v / L(j, j);
        }
    }
    return L;
}

inline const double* sqrt_primes(int& count) {
    static std::vector<double> roots = [] {
        std::vector<double> out;
        std::vector<int> primes;
        for (int n = 2; static_cast<int>(primes.size()) < 64; ++n) {
            bool prime = true;
            for (int p : primes)
                if (n % p == 0) { prime = false; break; }
            if (prime) primes.push_back(n);
        }
        for (int p : primes) out.push_back(std::sqrt(static_cast<double>(p)));
        return out;
    }();
    count = static_cast<int>(roots.size());
    return roots.data();
}

} // namespace mvn_detail

struct MvnOptions {
    int points = 4096;       // QMC points per shift
    int shifts = 12;         // random shifts (error estimation)
    double tolerance = 1e-3; // target standard error; points double until met
    std::uint64_t seed = 20240814;
};

inline double mvn_equicoordinate_prob(const Eigen::MatrixXd& R, double t,
                                      const MvnOptions& opt = {}) {
    const long d = R.rows();
    if (d == 0) return 1.0;
    if (t <= 0.0) return 0.0;
    if (d == 1) return 1.0 - 2.0 * normal_sf(t);
    const Eigen::MatrixXd L = mvn_detail::psd_cholesky(R);
    int nprimes = 0;
    const double* roots = mvn_detail::sqrt_primes(nprimes);
    if (d - 1 > nprimes) throw DomainError("mvn: dimension too large for the QMC rule");

    Rng rng(opt.seed);
    int points = opt.points;
    for (int attempt = 0; attempt < 6; ++attempt) {
        double sum = 0.0, sum2 = 0.0;
        for (int s = 0; s < opt.shifts; ++s) {
            std::vector<double> shift(static_cast<size_t>(d), 0.0);
            for (auto& v : shift) v = rng.uniform();
            double acc = 0.0;
            std::vector<double> y(static_cast<size_t>(d), 0.0);
            for (int k = 1; k <= points; ++k) {
                double f = 1.0;
                for (long i = 0; i < d && f > 0.0; ++i) {
                    double m = 0.0;
                    for (long j = 0; j < i; ++j) m += L(i, j) * y[static_cast<size_t>(j)];
                    const double lii = L(i, i);
                    if (lii <= 1e-12) {
                        if (std::fabs(m) > t) f = 0.0;
                        y[static_cast<size_t>(i)] = 0.0;
                        continue;
                    }
                    const double lo = normal_cdf((-t - m) / lii);
                    const double hi = normal_cdf((t - m) / lii);
                    const double width = hi - lo;
                    if (width <= 0.0) {
                        f = 0.0;
                        continue;
                    }
                    f *= width;
                    if (i < d - 1) {
                        double u = std::fmod(static_cast<double>(k) * roots[i] +
                                                 shift[static_cast<size_t>(i)],
                                             1.0);
                        u = std::min(std::max(lo + u * width, 1e-15), 1.0 - 1e-15);
                        y[static_cast<size_t>(i)] = normal_quantile(u);
                    }
                }
                acc += (f - acc) / static_cast<double>(k);
            }
            sum += acc;
            sum2 += acc * acc;
        }
        const double mean = sum / opt.shifts;
        const double var = std::max(0.0, sum2 / opt.shifts - mean * mean);
        const double se = std::sqrt(var / opt.shifts);
        if (se <= opt.tolerance || attempt == 5)
            return std::min(1.0, std::max(0.0, mean));
        points *= 2;
    }
    return 0.0;  // unreachable
}

// two-sided family-wise p-value: P(max_i |Z_i| >= z) under correlation R
inline double max_abs_z_pvalue(const Eigen::MatrixXd& R, double z, const MvnOptions& opt = {}) {
    if (!std::isfinite(z)) return z > 0 ? 0.0 : 1.0;
    return 1.0 - mvn_equicoordinate_prob(R, std::fabs(z), opt);
}

// c such that P(max |Z_i| <= c) = confidence
inline double equicoordinate_quantile(const Eigen::MatrixXd& R, double confidence,
                                      const MvnOptions& opt = {}) {
    if (!(confidence > 0.0 && confidence < 1.0))
        throw DomainError("equicoordinate_quantile: confidence must lie in (0,1)");
    double lo = 0.1, hi = 1.0;
    while (mvn_equicoordinate_prob(R, hi, opt) < confidence && hi < 50.0) hi *= 1.6;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mvn_equicoordinate_prob(R, mid, opt) < confidence) lo = mid;
        else hi = mid;
        if (hi - lo < 1e-4) break;
    }
    return 0.5 * (lo + hi);
}

} // namespace engshift
