#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/dates.hpp"
#include "engshift/rng.hpp"
#include "engshift/signal.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Bayesian piecewise-trend changepoint sampler over the two-dimensional
// weekly signal. Knots are shared across both dimensions; each segment is an
// order-0 or order-1 polynomial with conjugate Gaussian coefficient priors
// (integrated out analytically) and per-dimension noise variances sampled by
// Gibbs. Missing weeks carry zero weight; optional per-week outlier
// indicators inflate the noise variance a hundredfold.
// ---------------------------------------------------------------------------

struct McmcConfig {
    int burn_in = 1000;
    int samples = 2000;
    int thinning = 1;
};

struct SamplerConfig {
    int trend_min_order = 0;
    int trend_max_order = 1;
    int max_knots = 30;
    int min_knot_separation = 13;
    bool outlier_component = true;
    double delta_time = 1.0 / 52.0;
    McmcConfig mcmc;
    std::uint64_t seed = 1;

    // prior hyperparameters (weakly informative on the standardized signal)
    double coef_prior_scale = 25.0;   // v: coefficients ~ N(0, v * sigma^2)
    double sigma_prior_shape = 2.0;   // inverse-gamma a0
    double sigma_prior_rate = 1.0;    // inverse-gamma b0
    double outlier_prior = 0.01;      // Bernoulli prior on outlier indicators
    double outlier_variance_factor = 100.0;

    void validate() const {
        if (trend_min_order != 0 || trend_max_order > 1 || trend_max_order < trend_min_order)
            throw ConfigError("sampler: polynomial orders must satisfy 0 <= min <= max <= 1");
        if (max_knots < 0) throw ConfigError("sampler: max_knots must be >= 0");
        if (min_knot_separation < 1) throw ConfigError("sampler: min separation must be >= 1");
    }
};

struct PosteriorProbs {
    std::vector<double> p;  // per-week posterior probability of a changepoint
};

struct ConsensusConfig {
    int k = 1000;        // independent sampler runs
    int l = 2;           // smoothing half-width in weeks
    double p_min = 0.5;  // peak height threshold
};

struct Changepoint {
    long week_index = 0;
    DayNumber date = 0;
    long lower_week = 0, upper_week = 0;
    DayNumber lower_date = 0, upper_date = 0;
    double height = 0.0;
};

struct ChangepointSet {
    std::vector<Changepoint> points;
    std::vector<double> averaged_posterior;  // smoothed + averaged trace
};

namespace cp_detail {

class SegmentStats {
public:
    SegmentStats(const std::vector<WeeklySignal>& signal, double outlier_factor)
        : w_(static_cast<long>(signal.size())), outlier_factor_(outlier_factor) {
        obs_.resize(static_cast<size_t>(w_));
        y_[0].resize(static_cast<size_t>(w_), 0.0);
        y_[1].resize(static_cast<size_t>(w_), 0.0);
        double m0 = 0, m1 = 0, n = 0;
        for (long t = 0; t < w_; ++t) {
            const auto& ws = signal[static_cast<size_t>(t)];
            obs_[static_cast<size_t>(t)] = !ws.missing;
            if (!ws.missing) {
                y_[0][static_cast<size_t>(t)] = ws.log_rel_mean;
                y_[1][static_cast<size_t>(t)] = ws.log_cv;
                m0 += ws.log_rel_mean;
                m1 += ws.log_cv;
                n += 1;
            }
        }
        if (n < 2) throw DomainError("sampler: fewer than 2 observed weeks");
        m0 /= n;
        m1 /= n;
        double s0 = 0, s1 = 0;
        for (long t = 0; t < w_; ++t)
            if (obs_[static_cast<size_t>(t)]) {
                s0 += (y_[0][static_cast<size_t>(t)] - m0) * (y_[0][static_cast<size_t>(t)] - m0);
                s1 += (y_[1][static_cast<size_t>(t)] - m1) * (y_[1][static_cast<size_t>(t)] - m1);
            }
        s0 = std::sqrt(std::max(s0 / (n - 1), 1e-12));
        s1 = std::sqrt(std::max(s1 / (n - 1), 1e-12));
        for (long t = 0; t < w_; ++t)
            if (obs_[static_cast<size_t>(t)]) {
                y_[0][static_cast<size_t>(t)] = (y_[0][static_cast<size_t>(t)] - m0) / s0;
                y_[1][static_cast<size_t>(t)] = (y_[1][static_cast<size_t>(t)] - m1) / s1;
            }
        outlier_.assign(static_cast<size_t>(w_), 0);
        rebuild_prefixes();
    }

    long weeks() const { return w_; }
    bool observed(long t) const { return obs_[static_cast<size_t>(t)]; }
    bool is_outlier(long t) const { return outlier_[static_cast<size_t>(t)] != 0; }
    void set_outlier(long t, bool v) {
        outlier_[static_cast<size_t>(t)] = v ? 1 : 0;
        rebuild_prefixes();  // O(w); toggles are rare relative to other moves
    }
    long n_observed() const { return n_obs_; }
    double sum_log_w() const { return slw_total_; }

    struct Moments {
        double n_eff = 0;      // observed count
        double logdetfac = 0;  // log det(I + v X'WX), shared across dimensions
        double q[2] = {0, 0};  // residual quadratic forms per dimension
    };

    // segment [s, e), polynomial of the given order, coefficient prior scale v
    Moments moments(long s, long e, int order, double v) const {
        Moments m;
        const double sw = pw_[static_cast<size_t>(e)] - pw_[static_cast<size_t>(s)];
        m.n_eff = pn_[static_cast<size_t>(e)] - pn_[static_cast<size_t>(s)];
        if (sw <= 0.0) return m;
        const double swt = pwt_[static_cast<size_t>(e)] - pwt_[static_cast<size_t>(s)];
        const double swt2 = pwt2_[static_cast<size_t>(e)] - pwt2_[static_cast<size_t>(s)];
        double swy[2], swty[2], swy2[2];
        for (int d = 0; d < 2; ++d) {
            swy[d] = pwy_[d][static_cast<size_t>(e)] - pwy_[d][static_cast<size_t>(s)];
            swty[d] = pwty_[d][static_cast<size_t>(e)] - pwty_[d][static_cast<size_t>(s)];
            swy2[d] = pwy2_[d][static_cast<size_t>(e)] - pwy2_[d][static_cast<size_t>(s)];
        }
        if (order == 0) {
            m.logdetfac = std::log1p(v * sw);
            for (int d = 0; d < 2; ++d)
                m.q[d] = swy2[d] - swy[d] * swy[d] / (1.0 / v + sw);
            return m;
        }
        // z = (t - c) / L keeps the linear coefficient on the segment scale
        const double c = 0.5 * static_cast<double>(s + e - 1);
        const double L = std::max<double>(static_cast<double>(e - s - 1), 1.0);
        const double swz = (swt - c * sw) / L;
        const double swz2 = (swt2 - 2 * c * swt + c * c * sw) / (L * L);
        const double a11 = 1.0 / v + sw, a12 = swz, a22 = 1.0 / v + swz2;
        const double det = a11 * a22 - a12 * a12;
        m.logdetfac = std::log(v * v * det);
        for (int d = 0; d < 2; ++d) {
            const double h1 = swy[d];
            const double h2 = (swty[d] - c * swy[d]) / L;
            const double quad = (a22 * h1 * h1 - 2 * a12 * h1 * h2 + a11 * h2 * h2) / det;
            m.q[d] = swy2[d] - quad;
        }
        return m;
    }

private:
    void rebuild_prefixes() {
        const auto W = static_cast<size_t>(w_);
        pw_.assign(W + 1, 0);
        pwt_.assign(W + 1, 0);
        pwt2_.assign(W + 1, 0);
        pn_.assign(W + 1, 0);
        for (int d = 0; d < 2; ++d) {
            pwy_[d].assign(W + 1, 0);
            pwty_[d].assign(W + 1, 0);
            pwy2_[d].assign(W + 1, 0);
        }
        n_obs_ = 0;
        slw_total_ = 0;
        for (long t = 0; t < w_; ++t) {
            const auto i = static_cast<size_t>(t);
            double w = 0.0;
            if (obs_[i]) {
                w = outlier_[i] ? 1.0 / outlier_factor_ : 1.0;
                ++n_obs_;
                slw_total_ += std::log(w);
            }
            const double td = static_cast<double>(t);
            pw_[i + 1] = pw_[i] + w;
            pwt_[i + 1] = pwt_[i] + w * td;
            pwt2_[i + 1] = pwt2_[i] + w * td * td;
            pn_[i + 1] = pn_[i] + (obs_[i] ? 1 : 0);
            for (int d = 0; d < 2; ++d) {
                pwy_[d][i + 1] = pwy_[d][i] + w * y_[d][i];
                pwty_[d][i + 1] = pwty_[d][i] + w * td * y_[d][i];
                pwy2_[d][i + 1] = pwy2_[d][i] + w * y_[d][i] * y_[d][i];
            }
        }
    }

    long w_;
    double outlier_factor_;
    std::vector<bool> obs_;
    std::vector<double> y_[2];
    std::vector<char> outlier_;
    std::vector<double> pw_, pwt_, pwt2_;
    std::vector<double> pwy_[2], pwty_[2], pwy2_[2];
    std::vector<double> pn_;
    long n_obs_ = 0;
    double slw_total_ = 0;
};

} // namespace cp_detail

// Admissible knot positions: far enough from both ends, pairwise-separable,
// and never inside a missing run longer than the minimum separation.
inline std::vector<long> admissible_knot_positions(const std::vector<WeeklySignal>& signal,
                                                   int min_sep) {
    const auto w = static_cast<long>(signal.size());
    std::vector<long> gap_len(static_cast<size_t>(w), 0);
    long run = 0;
    for (long t = 0; t < w; ++t) {
        run = signal[static_cast<size_t>(t)].missing ? run + 1 : 0;
        gap_len[static_cast<size_t>(t)] = run;
    }
    for (long t = w - 2; t >= 0; --t)
        if (signal[static_cast<size_t>(t)].missing && signal[static_cast<size_t>(t + 1)].missing)
            gap_len[static_cast<size_t>(t)] = gap_len[static_cast<size_t>(t + 1)];
    std::vector<long> out;
    for (long t = min_sep; t <= w - min_sep; ++t) {
        if (signal[static_cast<size_t>(t)].missing && gap_len[static_cast<size_t>(t)] > min_sep)
            continue;
        out.push_back(t);
    }
    return out;
}

// number of admissible knot sets of each size under the separation rule
inline std::vector<double> admissible_set_counts(const std::vector<long>& positions, int max_knots,
                                                 int min_sep) {
    const auto A = static_cast<long>(positions.size());
    std::vector<std::vector<double>> ways(static_cast<size_t>(A + 1),
                                          std::vector<double>(static_cast<size_t>(max_knots + 1), 0.0));
    for (long i = 0; i <= A; ++i) ways[static_cast<size_t>(i)][0] = 1.0;
    // prev(i): number of positions compatible with choosing position i last
    for (long i = 1; i <= A; ++i) {
        long lo = 0, hi = i - 1;  // count positions with p <= p_i - min_sep
        const long limit = positions[static_cast<size_t>(i - 1)] - min_sep;
        while (lo < hi) {
            const long mid = (lo + hi + 1) / 2;
            if (positions[static_cast<size_t>(mid - 1)] <= limit) lo = mid;
            else hi = mid - 1;
        }
        const long prev = lo;
        for (int k = 1; k <= max_knots; ++k)
            ways[static_cast<size_t>(i)][static_cast<size_t>(k)] =
                ways[static_cast<size_t>(i - 1)][static_cast<size_t>(k)] +
                ways[static_cast<size_t>(prev)][static_cast<size_t>(k - 1)];
    }
    std::vector<double> out(static_cast<size_t>(max_knots + 1));
    for (int k = 0; k <= max_knots; ++k) out[static_cast<size_t>(k)] = ways[static_cast<size_t>(A)][static_cast<size_t>(k)];
    return out;
}

class ChangepointSampler {
public:
    ChangepointSampler(const std::vector<WeeklySignal>& signal, const SamplerConfig& cfg)
        : cfg_(cfg), stats_(signal, cfg.outlier_variance_factor), rng_(cfg.seed) {
        cfg_.validate();
        w_ = stats_.weeks();
        if (w_ < 2 * cfg_.min_knot_separation)
            throw DomainError("signal too short: need at least twice the minimum knot separation");
        bool any0 = false, any1 = false;
        for (const auto& ws : signal) {
            if (!ws.missing) {
                any0 = any0 || std::isfinite(ws.log_rel_mean);
                any1 = any1 || std::isfinite(ws.log_cv);
            }
        }
        if (!any0 || !any1) throw DomainError("sampler: a signal dimension is entirely missing");
        positions_ = admissible_knot_positions(signal, cfg_.min_knot_separation);
        set_counts_ = admissible_set_counts(positions_, cfg_.max_knots, cfg_.min_knot_separation);
        observed_weeks_.clear();
        for (long t = 0; t < w_; ++t)
            if (stats_.observed(t)) observed_weeks_.push_back(t);
        orders_.assign(1, 0);
        sig2_[0] = sig2_[1] = 1.0;
    }

    PosteriorProbs run() {
        PosteriorProbs out;
        out.p.assign(static_cast<size_t>(w_), 0.0);
        const auto& mc = cfg_.mcmc;
        const long total = mc.burn_in + mc.samples * std::max(1, mc.thinning);
        long kept = 0;
        for (long it = 0; it < total; ++it) {
            step();
            if (it >= mc.burn_in && (it - mc.burn_in) % std::max(1, mc.thinning) == 0) {
                ++kept;
                for (long k : knots_) out.p[static_cast<size_t>(k)] += 1.0;
            }
        }
        for (auto& v : out.p) v /= static_cast<double>(kept);
        return out;
    }

    // exposed for the enumeration oracle in tests
    double config_log_posterior(const std::vector<long>& knots, const std::vector<int>& orders) const {
        double lp = std::log(1.0 / static_cast<double>(cfg_.max_knots + 1));
        const auto m = static_cast<int>(knots.size());
        lp -= std::log(set_counts_[static_cast<size_t>(m)]);
        if (cfg_.trend_max_order > 0) lp += static_cast<double>(m + 1) * std::log(0.5);
        const double a0 = cfg_.sigma_prior_shape, b0 = cfg_.sigma_prior_rate;
        double logdetfac = 0, q[2] = {0, 0}, n_eff = 0;
        long s = 0;
        for (int seg = 0; seg <= m; ++seg) {
            const long e = seg < m ? knots[static_cast<size_t>(seg)] : w_;
            const auto mo = stats_.moments(s, e, orders[static_cast<size_t>(seg)],
                                           cfg_.coef_prior_scale);
            logdetfac += mo.logdetfac;
            n_eff += mo.n_eff;
            q[0] += mo.q[0];
            q[1] += mo.q[1];
            s = e;
        }
        for (int d = 0; d < 2; ++d) {
            lp += -0.5 * n_eff * std::log(2.0 * M_PI) + 0.5 * stats_.sum_log_w() -
                  0.5 * logdetfac + a0 * std::log(b0) - std::lgamma(a0) +
                  std::lgamma(a0 + 0.5 * n_eff) -
                  (a0 + 0.5 * n_eff) * std::log(b0 + 0.5 * q[d]);
        }
        return lp;
    }

    const std::vector<long>& knots() const { return knots_; }

private:
    // segment boundaries around segment index i under the current knots
    std::pair<long, long> segment_bounds(int seg) const {
        const long s = seg == 0 ? 0 : knots_[static_cast<size_t>(seg - 1)];
        const long e = seg == static_cast<int>(knots_.size()) ? w_ : knots_[static_cast<size_t>(seg)];
        return {s, e};
    }

    // log marginal contribution of one segment given current variances
    double seg_ll(long s, long e, int order) const {
        const auto m = stats_.moments(s, e, order, cfg_.coef_prior_scale);
        // det(I + vM) appears once per dimension; the remaining factors
        // (n log sigma etc.) cancel in knot and order moves
        return -m.logdetfac - 0.5 * m.q[0] / sig2_[0] - 0.5 * m.q[1] / sig2_[1];
    }

    // full data term for the Gibbs update of the variances
    void totals(double& n_eff, double q[2]) const {
        n_eff = 0;
        q[0] = q[1] = 0;
        long s = 0;
        const auto m = static_cast<int>(knots_.size());
        for (int seg = 0; seg <= m; ++seg) {
            const long e = seg < m ? knots_[static_cast<size_t>(seg)] : w_;
            const auto mo = stats_.moments(s, e, orders_[static_cast<size_t>(seg)],
                                           cfg_.coef_prior_scale);
            n_eff += mo.n_eff;
            q[0] += mo.q[0];
            q[1] += mo.q[1];
            s = e;
        }
    }

    std::vector<long> free_positions() const {
        std::vector<long> out;
        for (long p : positions_) {
            bool ok = true;
            for (long k : knots_)
                if (std::labs(p - k) < cfg_.min_knot_separation) {
                    ok = false;
                    break;
                }
            if (ok) out.push_back(p);
        }
        return out;
    }

    void step() {
        const double u = rng_.uniform();
        if (u < 0.2) birth();
        else if (u < 0.4) death();
        else if (u < 0.6) move_knot();
        else if (u < 0.7) flip_order();
        else if (u < 0.8) toggle_outlier();
        else gibbs_variances();
    }

    void birth() {
        const auto m = static_cast<int>(knots_.size());
        if (m >= cfg_.max_knots) return;
        const auto free = free_positions();
        if (free.empty()) return;
        const long pos = free[rng_.below(free.size())];
        const int seg = segment_of(pos);
        const auto [s, e] = segment_bounds(seg);
        const int left_order = orders_[static_cast<size_t>(seg)];
        const int right_order = cfg_.trend_max_order > 0 ? static_cast<int>(rng_.below(2)) : 0;

        const double ll_old = seg_ll(s, e, left_order);
        const double ll_new = seg_ll(s, pos, left_order) + seg_ll(pos, e, right_order);
        // priors: the set-count ratio; each segment's order prior cancels
        // against the order proposal
        double log_alpha = ll_new - ll_old +
                           std::log(set_counts_[static_cast<size_t>(m)]) -
                           std::log(set_counts_[static_cast<size_t>(m + 1)]) +
                           std::log(static_cast<double>(free.size())) -
                           std::log(static_cast<double>(m + 1));
        if (std::log(rng_.uniform_pos()) < log_alpha) {
            knots_.insert(knots_.begin() + seg, pos);
            orders_.insert(orders_.begin() + seg + 1, right_order);
        }
    }

    void death() {
        const auto m = static_cast<int>(knots_.size());
        if (m == 0) return;
        const int ki = static_cast<int>(rng_.below(static_cast<std::uint64_t>(m)));
        const auto [s, mid] = segment_bounds(ki);
        const auto [mid2, e] = segment_bounds(ki + 1);
        (void)mid2;
        const int left_order = orders_[static_cast<size_t>(ki)];
        const int right_order = orders_[static_cast<size_t>(ki + 1)];

        const double ll_old = seg_ll(s, mid, left_order) + seg_ll(mid, e, right_order);
        const double ll_new = seg_ll(s, e, left_order);

        // reverse birth would need pos among the free positions of the reduced state
        std::vector<long> reduced = knots_;
        reduced.erase(reduced.begin() + ki);
        long free_after = 0;
        for (long p : positions_) {
            bool ok = true;
            for (long k : reduced)
                if (std::labs(p - k) < cfg_.min_knot_separation) {
                    ok = false;
                    break;
                }
            if (ok) ++free_after;
        }
        double log_alpha = ll_new - ll_old +
                           std::log(set_counts_[static_cast<size_t>(m)]) -
                           std::log(set_counts_[static_cast<size_t>(m - 1)]) +
                           std::log(static_cast<double>(m)) -
                           std::log(static_cast<double>(free_after));
        if (std::log(rng_.uniform_pos()) < log_alpha) {
            knots_.erase(knots_.begin() + ki);
            orders_.erase(orders_.begin() + ki + 1);
        }
    }

    // Gibbs update of one knot's position: sample from its conditional
    // posterior over the admissible positions between its neighbors (the
    // placement prior is uniform, so the conditional is a likelihood softmax)
    void move_knot() {
        const auto m = static_cast<int>(knots_.size());
        if (m == 0) return;
        const int ki = static_cast<int>(rng_.below(static_cast<std::uint64_t>(m)));
        const auto [s, mid] = segment_bounds(ki);
        const auto [mid2, e] = segment_bounds(ki + 1);
        (void)mid;
        (void)mid2;
        const int lo = orders_[static_cast<size_t>(ki)], ro = orders_[static_cast<size_t>(ki + 1)];
        move_cand_.clear();
        move_logw_.clear();
        for (long p : positions_) {
            bool ok = p > s || ki == 0;
            for (int j = 0; j < m && ok; ++j)
                if (j != ki &&
                    std::labs(p - knots_[static_cast<size_t>(j)]) < cfg_.min_knot_separation)
                    ok = false;
            if (!ok || p <= s || p >= e) continue;
            move_cand_.push_back(p);
            move_logw_.push_back(seg_ll(s, p, lo) + seg_ll(p, e, ro));
        }
        if (move_cand_.empty()) return;
        double mx = move_logw_[0];
        for (double v : move_logw_) mx = std::max(mx, v);
        double z = 0;
        for (auto& v : move_logw_) {
            v = std::exp(v - mx);
            z += v;
        }
        double u = rng_.uniform() * z;
        size_t pick = 0;
        for (; pick + 1 < move_cand_.size(); ++pick) {
            u -= move_logw_[pick];
            if (u <= 0) break;
        }
        knots_[static_cast<size_t>(ki)] = move_cand_[pick];
    }

    void flip_order() {
        if (cfg_.trend_max_order == 0) return;
        const auto nseg = static_cast<int>(orders_.size());
        const int seg = static_cast<int>(rng_.below(static_cast<std::uint64_t>(nseg)));
        const auto [s, e] = segment_bounds(seg);
        const int cur = orders_[static_cast<size_t>(seg)];
        const int prop = 1 - cur;
        const double ll = seg_ll(s, e, prop) - seg_ll(s, e, cur);
        if (std::log(rng_.uniform_pos()) < ll) orders_[static_cast<size_t>(seg)] = prop;
    }

    void toggle_outlier() {
        if (!cfg_.outlier_component || observed_weeks_.empty()) return;
        const long t = observed_weeks_[rng_.below(observed_weeks_.size())];
        const bool cur = stats_.is_outlier(t);
        const int seg = segment_of_week(t);
        const auto [s, e] = segment_bounds(seg);
        const int order = orders_[static_cast<size_t>(seg)];
        const double ll_old = seg_ll(s, e, order) + stats_.sum_log_w();
        stats_.set_outlier(t, !cur);
        const double ll_new = seg_ll(s, e, order) + stats_.sum_log_w();
        const double prior = cur ? std::log(1.0 - cfg_.outlier_prior) - std::log(cfg_.outlier_prior)
                                 : std::log(cfg_.outlier_prior) - std::log(1.0 - cfg_.outlier_prior);
        if (std::log(rng_.uniform_pos()) >= ll_new - ll_old + prior)
            stats_.set_outlier(t, cur);  // reject
    }

    void gibbs_variances() {
        double n_eff, q[2];
        totals(n_eff, q);
        for (int d = 0; d < 2; ++d) {
            const double shape = cfg_.sigma_prior_shape + 0.5 * n_eff;
            const double rate = cfg_.sigma_prior_rate + 0.5 * q[d];
            // inverse gamma draw via gamma
            sig2_[d] = rate / rng_.gamma(shape, 1.0);
            sig2_[d] = std::clamp(sig2_[d], 1e-8, 1e8);
        }
    }

    int segment_of(long pos) const {
        int seg = 0;
        for (long k : knots_)
            if (pos >= k) ++seg;
            else break;
        return seg;
    }
    int segment_of_week(long t) const { return segment_of(t); }

    SamplerConfig cfg_;
    cp_detail::SegmentStats stats_;
    Rng rng_;
    long w_ = 0;
    std::vector<long> positions_;
    std::vector<double> set_counts_;
    std::vector<long> observed_weeks_;
    std::vector<long> knots_;
    std::vector<int> orders_;
    std::vector<long> move_cand_;
    std::vector<double> move_logw_;
    double sig2_[2] = {1.0, 1.0};
};

inline PosteriorProbs run_sampler(const std::vector<WeeklySignal>& signal,
                                  const SamplerConfig& cfg) {
    ChangepointSampler sampler(signal, cfg);
    return sampler.run();
}

// p-tilde_j = 1 - prod_{u in [j-l, j+l]} (1 - p_u), truncated at the edges
inline std::vector<double> smooth_posterior(const std::vector<double>& p, int l) {
    const auto w = static_cast<long>(p.size());
    std::vector<double> out(p.size());
    for (long j = 0; j < w; ++j) {
        if (!(p[static_cast<size_t>(j)] >= 0.0 && p[static_cast<size_t>(j)] <= 1.0))
            throw DomainError("smooth_posterior: probabilities must lie in [0,1]");
        double prod = 1.0;
        for (long u = std::max<long>(0, j - l); u <= std::min(w - 1, j + l); ++u)
            prod *= 1.0 - p[static_cast<size_t>(u)];
        out[static_cast<size_t>(j)] = 1.0 - prod;
    }
    return out;
}

// Consensus over k runs: smooth each run, average columnwise, then find local
// maxima of height >= p_min separated by more than 2l weeks (highest wins).
// Interval bounds cover the contiguous region where the averaged posterior
// stays above half the peak height.
inline ChangepointSet consensus(const std::vector<PosteriorProbs>& runs,
                                const ConsensusConfig& cfg, DayNumber week0_start) {
    if (runs.empty()) throw DomainError("consensus: no sampler runs");
    const size_t w = runs[0].p.size();
    for (const auto& r : runs)
        if (r.p.size() != w) throw DomainError("consensus: runs have mismatched lengths");

    std::vector<double> avg(w, 0.0);
    for (const auto& r : runs) {
        const auto sm = smooth_posterior(r.p, cfg.l);
        for (size_t j = 0; j < w; ++j) avg[j] += sm[j];
    }
    for (auto& v : avg) v /= static_cast<double>(runs.size());

    // local maxima with plateaus collapsed to their midpoint
    std::vector<long> candidates;
    long j = 0;
    const auto W = static_cast<long>(w);
    while (j < W) {
        long k = j;
        while (k + 1 < W && avg[static_cast<size_t>(k + 1)] == avg[static_cast<size_t>(j)]) ++k;
        const bool left_ok = j == 0 || avg[static_cast<size_t>(j - 1)] < avg[static_cast<size_t>(j)];
        const bool right_ok = k == W - 1 || avg[static_cast<size_t>(k + 1)] < avg[static_cast<size_t>(j)];
        if (left_ok && right_ok && avg[static_cast<size_t>(j)] >= cfg.p_min)
            candidates.push_back((j + k) / 2);
        j = k + 1;
    }
    // separation rule: keep the highest among conflicting peaks
    std::sort(candidates.begin(), candidates.end(), [&](long a, long b) {
        if (avg[static_cast<size_t>(a)] != avg[static_cast<size_t>(b)])
            return avg[static_cast<size_t>(a)] > avg[static_cast<size_t>(b)];
        return a < b;
    });
    std::vector<long> kept;
    for (long c : candidates) {
        bool ok = true;
        for (long kpt : kept)
            if (std::labs(c - kpt) <= 2 * cfg.l) {
                ok = false;
                break;
            }
        if (ok) kept.push_back(c);
    }
    std::sort(kept.begin(), kept.end());

    ChangepointSet out;
    out.averaged_posterior = avg;
    for (long peak : kept) {
        Changepoint cp;
        cp.week_index = peak;
        cp.date = week0_start + 7 * peak;
        cp.height = avg[static_cast<size_t>(peak)];
        const double half = 0.5 * cp.height;
        long lo = peak, hi = peak;
        while (lo > 0 && avg[static_cast<size_t>(lo - 1)] >= half) --lo;
        while (hi + 1 < W && avg[static_cast<size_t>(hi + 1)] >= half) ++hi;
        cp.lower_week = lo;
        cp.upper_week = hi;
        cp.lower_date = week0_start + 7 * lo;
        cp.upper_date = week0_start + 7 * hi;
        out.points.push_back(cp);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Epoch partition: n changepoints -> n+1 left-closed epochs
// ---------------------------------------------------------------------------

struct EpochPartition {
    std::vector<DayNumber> boundaries;  // changepoint dates, ascending
    DayNumber window_start = 0, window_end = 0;

    int n_epochs() const { return static_cast<int>(boundaries.size()) + 1; }

    // days on a changepoint date belong to the new epoch
    int epoch_of(DayNumber day) const {
        int e = 0;
        for (const auto b : boundaries)
            if (day >= b) ++e;
            else break;
        return e;
    }
};

inline EpochPartition partition_epochs(const ChangepointSet& cps, DayNumber window_start,
                                       DayNumber window_end) {
    EpochPartition out;
    out.window_start = window_start;
    out.window_end = window_end;
    for (const auto& cp : cps.points) {
        if (cp.date <= window_start || cp.date > window_end)
            throw DomainError("changepoint outside the study window: " + format_date(cp.date));
        out.boundaries.push_back(cp.date);
    }
    std::sort(out.boundaries.begin(), out.boundaries.end());
    return out;
}

} // namespace engshift
