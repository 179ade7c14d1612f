#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/design.hpp"
#include "engshift/family.hpp"
#include "engshift/formula.hpp"
#include "engshift/optim.hpp"
#include "engshift/sparse_inverse.hpp"

namespace engshift {

struct FitOptions {
    int max_outer = 500;
    int max_inner = 50;
    double grad_tol = 1e-5;
    double rel_obj_tol = 1e-9;
    double inner_tol = 1e-10;  // absolute max-norm of the inner gradient
    bool compute_vcov = true;
    bool track_objective = false;
    std::string response = "reactions";
};

struct ReBlockFit {
    std::string term_name;
    std::string grouping;
    int dim = 0;
    std::vector<std::string> coef_names;
    std::vector<std::string> level_names;
    Eigen::MatrixXd cov;     // dim x dim, always PSD (built as L L')
    Eigen::MatrixXd modes;   // dim x n_levels, conditional modes on the b scale
    bool boundary = false;
};

// Everything needed to rebuild design rows for prediction and EMM grids.
struct GlmmDesignInfo {
    FixedDesign mean_fixed, disp_fixed;
    std::vector<RandomDesign> mean_random, disp_random;
    NbParam family = NbParam::nb1_linear;
};

struct GlmmFit {
    NbParam family = NbParam::nb1_linear;
    Eigen::VectorXd beta;
    std::vector<std::string> beta_names;
    Eigen::MatrixXd vcov_beta;
    Eigen::VectorXd disp_beta;
    std::vector<std::string> disp_names;
    Eigen::MatrixXd vcov_disp;
    std::vector<ReBlockFit> re_mean, re_disp;
    double loglik = 0.0;
    bool converged = false;
    bool boundary = false;
    bool vcov_ok = false;
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    int iterations = 0;
    long n_obs = 0;
    std::vector<std::string> dropped_mean, dropped_disp;
    std::vector<double> objective_trace;
    std::shared_ptr<const GlmmDesignInfo> design;
};

// ---------------------------------------------------------------------------
// Laplace-approximated maximum likelihood engine.
//
// Random effects are parametrized as b = L(theta) u with u ~ N(0, I), so the
// joint is f(u) = sum_i l(y_i; eta_i, lambda_i) - u'u/2 and the Laplace
// log-marginal is f(u-hat) - log det H / 2 with H = -f''(u-hat). Outer
// parameters (fixed effects of both submodels plus Cholesky parameters of
// every random block) are optimized by BFGS with an analytic gradient that
// differentiates through the inner mode via the implicit function theorem;
// the trace terms use a Takahashi selected inverse of the sparse factor.
// ---------------------------------------------------------------------------

class GlmmEngine {
public:
    GlmmEngine(const DataFrame& df, const FormulaSpec& spec,
               const std::string& response = "reactions")
        : param_(spec.parametrization == Parametrization::nb2_quadratic
                     ? NbParam::nb2_quadratic
                     : NbParam::nb1_linear) {
        if (spec.parametrization == Parametrization::gaussian_ar1)
            throw ConfigError("gaussian_ar1 models are fitted by the AR(1) module");
        info_ = std::make_shared<GlmmDesignInfo>();
        info_->family = param_;
        info_->mean_fixed = FixedDesign(spec.mean, df);
        info_->disp_fixed = FixedDesign(spec.dispersion, df);
        for (const auto& rt : spec.mean.random) info_->mean_random.emplace_back(rt, df);
        for (const auto& rt : spec.dispersion.random) info_->disp_random.emplace_back(rt, df);
        build_cells(df, response);
        drop_aliased();
        layout_u();
        if (q_ > 0) build_pattern();
    }

    long n_params() const { return p_m_ + p_d_ + n_theta_; }
    long q() const { return q_; }
    long n_cells() const { return static_cast<long>(cells_.size()); }
    long n_obs() const { return n_obs_; }
    double last_inner_residual() const { return inner_residual_; }
    int last_inner_iterations() const { return inner_iterations_; }

    Eigen::VectorXd start() const {
        Eigen::VectorXd omega = Eigen::VectorXd::Zero(n_params());
        omega.segment(0, p_m_) = poisson_start_;
        omega.segment(p_m_, p_d_) = disp_start_;
        // random-effect SDs start at 0.5, correlations at 0
        const long t = p_m_ + p_d_;
        for (const auto& tm : theta_meta_)
            for (int j = 0; j < tm.dim; ++j) omega(t + tm.offset_in_theta + j) = std::log(0.5);
        return omega;
    }

    Eigen::VectorXd lower_bounds() const {
        Eigen::VectorXd lb =
            Eigen::VectorXd::Constant(n_params(), -std::numeric_limits<double>::infinity());
        const long t = p_m_ + p_d_;
        for (const auto& tm : theta_meta_)
            for (int j = 0; j < tm.dim; ++j) lb(t + tm.offset_in_theta + j) = kLogSdFloor;
        return lb;
    }

    Eigen::VectorXd upper_bounds() const {
        Eigen::VectorXd ub =
            Eigen::VectorXd::Constant(n_params(), std::numeric_limits<double>::infinity());
        const long t = p_m_ + p_d_;
        for (const auto& tm : theta_meta_)
            for (int j = 0; j < tm.dim; ++j) ub(t + tm.offset_in_theta + j) = kLogSdCeil;
        return ub;
    }

    double objective(const Eigen::VectorXd& omega, Eigen::VectorXd* grad = nullptr) {
        if (!omega.allFinite()) return bad(grad);
        unpack(omega);
        if (q_ == 0) return objective_no_re(grad);
        pass_budget_ = 40 + 3 * max_inner_;  // full-data passes allowed per call
        if (!inner_solve()) return bad(grad);
        // a mode the Newton solver could not certify poisons the Laplace value
        if (!(inner_residual_ <= 1e-5 * (1.0 + std::fabs(f_val_)))) return bad(grad);
        assemble_hessian();
        ldlt_.factorize(H_);
        if (ldlt_.info() != Eigen::Success || (ldlt_.vectorD().array() <= 0.0).any())
            return bad(grad);
        const double logdet = ldlt_.vectorD().array().log().sum();
        const double obj = -f_val_ + 0.5 * logdet;
        if (grad) compute_gradient(*grad);
        return obj;
    }

    GlmmFit fit(const FitOptions& opt) {
        for (auto& rd : info_->mean_random)
            if (rd.n_levels() < 2)
                throw InsufficientDataError("grouping '" + rd.grouping_name() +
                                            "' has fewer than 2 levels");
        for (auto& rd : info_->disp_random)
            if (rd.n_levels() < 2)
                throw InsufficientDataError("grouping '" + rd.grouping_name() +
                                            "' has fewer than 2 levels");
        BfgsOptions bopt;
        bopt.max_iter = opt.max_outer;
        bopt.grad_tol = opt.grad_tol;
        bopt.rel_obj_tol = opt.rel_obj_tol;
        inner_tol_ = opt.inner_tol;
        max_inner_ = opt.max_inner;
        const Eigen::VectorXd lb = lower_bounds(), ub = upper_bounds();
        auto fn = [&](const Eigen::VectorXd& w, Eigen::VectorXd* g) { return objective(w, g); };
        BfgsResult r = bfgs_minimize(fn, start(), bopt, &lb, &ub);
        if (!r.converged && r.grad.cwiseAbs().maxCoeff() < 1.0)
            newton_polish(r, lb, ub, opt.grad_tol);

        GlmmFit fit;
        fit.family = param_;
        fit.design = info_;
        fit.beta = r.x.segment(0, p_m_);
        fit.beta_names = info_->mean_fixed.kept_names();
        fit.disp_beta = r.x.segment(p_m_, p_d_);
        fit.disp_names = info_->disp_fixed.kept_names();
        fit.converged = r.converged;
        fit.grad_norm = r.grad.cwiseAbs().maxCoeff();
        fit.iterations = r.iterations;
        fit.loglik = -r.fx;
        fit.n_obs = n_obs_;
        fit.dropped_mean = info_->mean_fixed.dropped_names();
        fit.dropped_disp = info_->disp_fixed.dropped_names();
        if (opt.track_objective) fit.objective_trace = r.trace;

        // final state at the optimum (u-hat, L blocks)
        objective(r.x, nullptr);
        fit.boundary = false;
        long tix = p_m_ + p_d_;
        (void)tix;
        for (size_t t = 0; t < theta_meta_.size(); ++t) {
            const auto& tm = theta_meta_[t];
            ReBlockFit rb;
            const auto& rd = tm.in_dispersion ? info_->disp_random[tm.term]
                                              : info_->mean_random[tm.term];
            rb.term_name = rd.name();
            rb.grouping = rd.grouping_name();
            rb.dim = tm.dim;
            rb.coef_names = rd.coef_names();
            rb.level_names = rd.level_names();
            rb.cov = Lmat_[t] * Lmat_[t].transpose();
            for (int j = 0; j < tm.dim; ++j)
                if (std::log(Lmat_[t](j, j)) <= kLogSdFloor + 1.0) rb.boundary = true;
            rb.modes.resize(tm.dim, rd.n_levels());
            for (long l = 0; l < rd.n_levels(); ++l)
                rb.modes.col(l) = Lmat_[t] * u_.segment(tm.u_offset + l * tm.dim, tm.dim);
            fit.boundary = fit.boundary || rb.boundary;
            (tm.in_dispersion ? fit.re_disp : fit.re_mean).push_back(std::move(rb));
        }

        if (opt.compute_vcov) compute_vcov(r.x, fit);
        return fit;
    }

    // masked finite-difference Hessian of the objective at omega; coordinates
    // at active bounds get identity rows so the Newton step ignores them
    Eigen::MatrixXd fd_hessian(const Eigen::VectorXd& omega, const std::vector<char>& active) {
        const long p = n_params();
        Eigen::MatrixXd Hn = Eigen::MatrixXd::Identity(p, p);
        Eigen::VectorXd gp(p), gm(p);
        for (long j = 0; j < p; ++j) {
            if (active[static_cast<size_t>(j)]) continue;
            const double h = 1e-4 * std::max(1.0, std::fabs(omega(j)));
            Eigen::VectorXd wp = omega, wm = omega;
            wp(j) += h;
            wm(j) -= h;
            objective(wp, &gp);
            objective(wm, &gm);
            Hn.col(j) = (gp - gm) / (2 * h);
        }
        for (long j = 0; j < p; ++j)
            if (active[static_cast<size_t>(j)]) {
                Hn.row(j).setZero();
                Hn.col(j).setZero();
                Hn(j, j) = 1.0;
            }
        return 0.5 * (Hn + Hn.transpose());
    }

    // damped Newton refinement after a BFGS stall near the optimum
    void newton_polish(BfgsResult& r, const Eigen::VectorXd& lb, const Eigen::VectorXd& ub,
                       double grad_tol) {
        const long p = n_params();
        for (int round = 0; round < 6; ++round) {
            std::vector<char> active(static_cast<size_t>(p), 0);
            for (long j = 0; j < p; ++j)
                active[static_cast<size_t>(j)] =
                    (r.x(j) <= lb(j) + 1e-10 && r.grad(j) > 0) ||
                    (r.x(j) >= ub(j) - 1e-10 && r.grad(j) < 0);
            Eigen::VectorXd g = r.grad;
            for (long j = 0; j < p; ++j)
                if (active[static_cast<size_t>(j)]) g(j) = 0.0;
            if (g.cwiseAbs().maxCoeff() <= grad_tol) {
                r.converged = true;
                return;
            }
            Eigen::MatrixXd Hn = fd_hessian(r.x, active);
            Eigen::LDLT<Eigen::MatrixXd> ldlt(Hn);
            double damp = 0.0;
            while (ldlt.info() != Eigen::Success ||
                   (ldlt.vectorD().array() <= 0.0).any()) {
                damp = damp == 0.0 ? 1e-6 : damp * 100.0;
                if (damp > 1e6) return;
                ldlt.compute(Hn + damp * Eigen::MatrixXd::Identity(p, p));
            }
            Eigen::VectorXd step = -ldlt.solve(g);
            bool improved = false;
            for (double tstep = 1.0; tstep > 1e-4; tstep *= 0.5) {
                Eigen::VectorXd cand = r.x + tstep * step;
                for (long j = 0; j < p; ++j) cand(j) = std::clamp(cand(j), lb(j), ub(j));
                Eigen::VectorXd gc(p);
                const double fc = objective(cand, &gc);
                if (std::isfinite(fc) && fc <= r.fx + 1e-12 * std::fabs(r.fx)) {
                    r.x = cand;
                    r.fx = fc;
                    r.grad = gc;
                    improved = true;
                    break;
                }
            }
            if (!improved) return;
            Eigen::VectorXd gm = r.grad;
            for (long j = 0; j < p; ++j)
                if (active[static_cast<size_t>(j)]) gm(j) = 0.0;
            if (gm.cwiseAbs().maxCoeff() <= grad_tol) {
                r.converged = true;
                return;
            }
        }
    }

    // central finite-difference probe of the analytic gradient at one point;
    // returns the worst relative mismatch over coordinates
    double gradient_check(const Eigen::VectorXd& omega, double h_scale = 1e-3) {
        Eigen::VectorXd g(n_params());
        objective(omega, &g);
        double worst = 0.0;
        for (long j = 0; j < n_params(); ++j) {
            const double h = h_scale * std::max(1.0, std::fabs(omega(j)));
            Eigen::VectorXd wp = omega, wm = omega;
            wp(j) += h;
            wm(j) -= h;
            const double fd = (objective(wp) - objective(wm)) / (2 * h);
            const double denom = std::max({1.0, std::fabs(g(j)), std::fabs(fd)});
            worst = std::max(worst, std::fabs(g(j) - fd) / denom);
        }
        return worst;
    }

private:
    static constexpr double kLogSdFloor = -6.0;
    static constexpr double kLogSdCeil = 4.6;  // random-effect SDs capped at ~100

    struct Ref {
        int term;       // index into theta_meta_
        long wid;       // distinct design-subvector id within the term
        long ubase;     // first u index of the level block
    };
    struct Cell {
        Eigen::VectorXd xm, xd;
        std::vector<double> ys;
        std::vector<Ref> refs_m, refs_d;
        std::vector<long> supp;     // sorted distinct u indices
        std::vector<int> mpos;      // supp positions per mean ref entry (k per ref)
        std::vector<int> dpos;
        std::vector<long> hslot;    // H value positions, lower pairs r>=s over supp
        std::vector<long> sh;       // selected-inverse handles, lower pairs
    };
    struct TermMeta {
        bool in_dispersion = false;
        int term = 0;       // index within its side's RandomDesign vector
        int dim = 0;
        long n_levels = 0;
        long u_offset = 0;
        long offset_in_theta = 0;  // within the theta segment
        int n_par = 0;             // dim + dim(dim-1)/2
        std::vector<Eigen::VectorXd> wlist;
    };
    struct CellScratch {
        double se, sl, A, B, C, TeS, TlS;
    };

    double bad(Eigen::VectorXd* grad) {
        if (grad) grad->setConstant(n_params(), std::numeric_limits<double>::quiet_NaN());
        return std::numeric_limits<double>::infinity();
    }

    // ----- construction -----

    void build_cells(const DataFrame& df, const std::string& response) {
        const auto& y = df.numeric(response);
        n_obs_ = static_cast<long>(df.nrows);
        if (n_obs_ == 0) throw InsufficientDataError("empty model frame");

        struct KeyHash {
            size_t operator()(const std::vector<long>& k) const {
                size_t h = 1469598103934665603ULL;
                for (long v : k) h = (h ^ static_cast<size_t>(v)) * 1099511628211ULL;
                return h;
            }
        };
        std::unordered_map<std::vector<long>, size_t, KeyHash> index;

        // distinct design-subvector registries per random term
        auto reg_w = [](std::vector<Eigen::VectorXd>& list, const Eigen::VectorXd& w) -> long {
            for (size_t i = 0; i < list.size(); ++i)
                if (list[i] == w) return static_cast<long>(i);
            list.push_back(w);
            return static_cast<long>(list.size()) - 1;
        };

        const size_t n_rem = info_->mean_random.size(), n_red = info_->disp_random.size();
        wlists_m_.resize(n_rem);
        wlists_d_.resize(n_red);
        for (size_t i = 0; i < df.nrows; ++i) {
            std::vector<long> key;
            std::vector<long> levels_m(n_rem), levels_d(n_red);
            std::vector<long> wid_m(n_rem), wid_d(n_red);
            for (size_t t = 0; t < n_rem; ++t) {
                levels_m[t] = info_->mean_random[t].level(df, i, true);
                wid_m[t] = reg_w(wlists_m_[t], info_->mean_random[t].design_row(df, i));
                key.push_back(levels_m[t]);
                key.push_back(wid_m[t]);
            }
            for (size_t t = 0; t < n_red; ++t) {
                levels_d[t] = info_->disp_random[t].level(df, i, true);
                wid_d[t] = reg_w(wlists_d_[t], info_->disp_random[t].design_row(df, i));
                key.push_back(levels_d[t]);
                key.push_back(wid_d[t]);
            }
            const Eigen::VectorXd xm = info_->mean_fixed.full_row(df, i);
            const Eigen::VectorXd xd = info_->disp_fixed.full_row(df, i);
            for (long c = 0; c < xm.size(); ++c)
                key.push_back(static_cast<long>(std::llround(xm(c) * 1048576.0)));
            for (long c = 0; c < xd.size(); ++c)
                key.push_back(static_cast<long>(std::llround(xd(c) * 1048576.0)));

            auto [it, fresh] = index.try_emplace(std::move(key), cells_.size());
            if (fresh) {
                Cell cell;
                cell.xm = xm;
                cell.xd = xd;
                for (size_t t = 0; t < n_rem; ++t)
                    cell.refs_m.push_back({static_cast<int>(t), wid_m[t], levels_m[t]});
                for (size_t t = 0; t < n_red; ++t)
                    cell.refs_d.push_back({static_cast<int>(t), wid_d[t], levels_d[t]});
                cells_.push_back(std::move(cell));
            }
            cells_[it->second].ys.push_back(y[i]);
        }
    }

    void drop_aliased() {
        const long nc = static_cast<long>(cells_.size());
        Eigen::VectorXd wts(nc);
        for (long c = 0; c < nc; ++c) wts(c) = static_cast<double>(cells_[static_cast<size_t>(c)].ys.size());
        {
            Eigen::MatrixXd rows(nc, info_->mean_fixed.full_width());
            for (long c = 0; c < nc; ++c) rows.row(c) = cells_[static_cast<size_t>(c)].xm;
            info_->mean_fixed.drop_aliased(rows, wts);
            Eigen::MatrixXd rows2(nc, info_->disp_fixed.full_width());
            for (long c = 0; c < nc; ++c) rows2.row(c) = cells_[static_cast<size_t>(c)].xd;
            info_->disp_fixed.drop_aliased(rows2, wts);
        }
        p_m_ = info_->mean_fixed.width();
        p_d_ = info_->disp_fixed.width();
        // re-extract kept columns per cell
        const auto kept = [](const Eigen::VectorXd& full, const FixedDesign& d,
                             const std::vector<std::string>&) { (void)d; return full; };
        (void)kept;
        for (auto& cell : cells_) {
            cell.xm = keep_cols(cell.xm, info_->mean_fixed);
            cell.xd = keep_cols(cell.xd, info_->disp_fixed);
        }
        poisson_start_ = poisson_irls();
        disp_start_ = dispersion_start();
    }

    static Eigen::VectorXd keep_cols(const Eigen::VectorXd& full, const FixedDesign& d) {
        if (full.size() == d.width()) return full;
        Eigen::VectorXd out(d.width());
        long k = 0;
        for (long c : d.kept_indices()) out(k++) = full(c);
        return out;
    }

    void layout_u() {
        long off = 0, th = 0;
        auto add_terms = [&](std::vector<RandomDesign>& rds, bool disp) {
            for (size_t t = 0; t < rds.size(); ++t) {
                TermMeta tm;
                tm.in_dispersion = disp;
                tm.term = static_cast<int>(t);
                tm.dim = rds[t].dim();
                tm.n_levels = rds[t].n_levels();
                tm.u_offset = off;
                tm.offset_in_theta = th;
                tm.n_par = tm.dim + tm.dim * (tm.dim - 1) / 2;
                tm.wlist = disp ? wlists_d_[t] : wlists_m_[t];
                off += tm.dim * tm.n_levels;
                th += tm.n_par;
                theta_meta_.push_back(std::move(tm));
            }
        };
        add_terms(info_->mean_random, false);
        add_terms(info_->disp_random, true);
        q_ = off;
        n_theta_ = th;
        u_ = Eigen::VectorXd::Zero(q_);
        Lmat_.resize(theta_meta_.size());
        Ltw_.resize(theta_meta_.size());
        for (size_t t = 0; t < theta_meta_.size(); ++t) {
            Lmat_[t].setIdentity(theta_meta_[t].dim, theta_meta_[t].dim);
            Ltw_[t].resize(theta_meta_[t].wlist.size());
        }
        // per-cell ref bases point at the level block start
        for (auto& cell : cells_) {
            for (auto& ref : cell.refs_m) {
                const auto& tm = term_of(false, ref.term);
                ref.ubase = tm.u_offset + ref.ubase * tm.dim;  // ubase held the level index
                ref.term = static_cast<int>(&tm - theta_meta_.data());
            }
            for (auto& ref : cell.refs_d) {
                const auto& tm = term_of(true, ref.term);
                ref.ubase = tm.u_offset + ref.ubase * tm.dim;
                ref.term = static_cast<int>(&tm - theta_meta_.data());
            }
        }
    }

    const TermMeta& term_of(bool disp, int side_index) const {
        for (const auto& tm : theta_meta_)
            if (tm.in_dispersion == disp && tm.term == side_index) return tm;
        throw Error("internal", "unknown random term");
    }

    void build_pattern() {
        for (auto& cell : cells_) {
            std::vector<long> supp;
            for (const auto& ref : cell.refs_m)
                for (int k = 0; k < theta_meta_[static_cast<size_t>(ref.term)].dim; ++k)
                    supp.push_back(ref.ubase + k);
            for (const auto& ref : cell.refs_d)
                for (int k = 0; k < theta_meta_[static_cast<size_t>(ref.term)].dim; ++k)
                    supp.push_back(ref.ubase + k);
            std::sort(supp.begin(), supp.end());
            supp.erase(std::unique(supp.begin(), supp.end()), supp.end());
            cell.supp = std::move(supp);
            auto pos_of = [&](long uix) {
                return static_cast<int>(std::lower_bound(cell.supp.begin(), cell.supp.end(), uix) -
                                        cell.supp.begin());
            };
            for (const auto& ref : cell.refs_m)
                for (int k = 0; k < theta_meta_[static_cast<size_t>(ref.term)].dim; ++k)
                    cell.mpos.push_back(pos_of(ref.ubase + k));
            for (const auto& ref : cell.refs_d)
                for (int k = 0; k < theta_meta_[static_cast<size_t>(ref.term)].dim; ++k)
                    cell.dpos.push_back(pos_of(ref.ubase + k));
        }
        std::vector<Eigen::Triplet<double>> trips;
        for (long i = 0; i < q_; ++i) trips.emplace_back(i, i, 1.0);
        for (const auto& cell : cells_)
            for (size_t a = 0; a < cell.supp.size(); ++a)
                for (size_t b = 0; b <= a; ++b)
                    trips.emplace_back(cell.supp[a], cell.supp[b], 0.0);
        H_.resize(q_, q_);
        H_.setFromTriplets(trips.begin(), trips.end());
        H_.makeCompressed();
        // value-slot lookup per cell (lower triangle, row-major over supp pairs)
        auto slot = [&](long r, long c) {
            const long begin = H_.outerIndexPtr()[c], end = H_.outerIndexPtr()[c + 1];
            const auto* inner = H_.innerIndexPtr();
            const auto it = std::lower_bound(inner + begin, inner + end, static_cast<int>(r));
            return static_cast<long>(it - inner);
        };
        diag_slots_.resize(static_cast<size_t>(q_));
        for (long i = 0; i < q_; ++i) diag_slots_[static_cast<size_t>(i)] = slot(i, i);
        for (auto& cell : cells_) {
            const size_t m = cell.supp.size();
            cell.hslot.reserve(m * (m + 1) / 2);
            for (size_t a = 0; a < m; ++a)
                for (size_t b = 0; b <= a; ++b)
                    cell.hslot.push_back(slot(cell.supp[a], cell.supp[b]));
        }
        ldlt_.analyzePattern(H_);
        scratch_.resize(cells_.size());
        sums_.resize(cells_.size());
    }

    // ----- starting values -----

    Eigen::VectorXd poisson_irls() const {
        double ymean = 0.0;
        long n = 0;
        for (const auto& cell : cells_)
            for (double y : cell.ys) {
                ymean += y;
                ++n;
            }
        ymean = std::max(ymean / static_cast<double>(n), 1e-3);
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(p_m_);
        beta(0) = std::log(ymean);
        for (int it = 0; it < 25; ++it) {
            Eigen::MatrixXd XtWX = Eigen::MatrixXd::Zero(p_m_, p_m_);
            Eigen::VectorXd XtWz = Eigen::VectorXd::Zero(p_m_);
            for (const auto& cell : cells_) {
                const double eta = cell.xm.dot(beta);
                const double mu = std::exp(std::min(eta, 40.0));
                const double nc = static_cast<double>(cell.ys.size());
                double ysum = 0.0;
                for (double y : cell.ys) ysum += y;
                const double w = nc * mu;
                const double z = eta + (ysum / nc - mu) / mu;
                XtWX.noalias() += w * (cell.xm * cell.xm.transpose());
                XtWz.noalias() += w * z * cell.xm;
            }
            const Eigen::VectorXd next = XtWX.ldlt().solve(XtWz);
            if (!next.allFinite()) break;
            const double delta = (next - beta).cwiseAbs().maxCoeff();
            beta = next;
            if (delta < 1e-8) break;
        }
        return beta;
    }

    Eigen::VectorXd dispersion_start() const {
        double pearson = 0.0, mu2_sum = 0.0, excess = 0.0;
        long n = 0;
        for (const auto& cell : cells_) {
            const double mu = std::exp(std::min(cell.xm.dot(poisson_start_), 40.0));
            for (double y : cell.ys) {
                pearson += (y - mu) * (y - mu) / mu;
                mu2_sum += mu * mu;
                excess += (y - mu) * (y - mu) - mu;
                ++n;
            }
        }
        const double dof = std::max(1.0, static_cast<double>(n - p_m_));
        double phi0;
        if (param_ == NbParam::nb1_linear) {
            phi0 = std::clamp(pearson / dof - 1.0, 0.05, 1e4);
        } else {
            phi0 = excess > 0 ? std::clamp(mu2_sum / excess, 0.05, 1e4) : 100.0;
        }
        Eigen::VectorXd d = Eigen::VectorXd::Zero(p_d_);
        d(0) = std::log(phi0);
        return d;
    }

    // ----- per-evaluation state -----

    void unpack(const Eigen::VectorXd& omega) {
        beta_ = omega.segment(0, p_m_);
        dbeta_ = omega.segment(p_m_, p_d_);
        const long t0 = p_m_ + p_d_;
        for (size_t t = 0; t < theta_meta_.size(); ++t) {
            const auto& tm = theta_meta_[t];
            Eigen::MatrixXd& L = Lmat_[t];
            L.setZero(tm.dim, tm.dim);
            long ix = t0 + tm.offset_in_theta;
            for (int j = 0; j < tm.dim; ++j) L(j, j) = std::exp(omega(ix++));
            for (int j = 0; j < tm.dim; ++j)
                for (int i = j + 1; i < tm.dim; ++i) L(i, j) = omega(ix++);
            for (size_t w = 0; w < tm.wlist.size(); ++w)
                Ltw_[t][w] = L.transpose() * tm.wlist[w];
        }
    }

    double cell_eta(const Cell& cell) const {
        double eta = cell.xm.dot(beta_);
        for (const auto& ref : cell.refs_m) {
            const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
            eta += lt.dot(u_.segment(ref.ubase, lt.size()));
        }
        return eta;
    }
    double cell_lambda(const Cell& cell) const {
        double lam = cell.xd.dot(dbeta_);
        for (const auto& ref : cell.refs_d) {
            const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
            lam += lt.dot(u_.segment(ref.ubase, lt.size()));
        }
        return lam;
    }

    double joint_value(const Eigen::VectorXd& u) const {
        if (--pass_budget_ < 0) return -std::numeric_limits<double>::infinity();
        double f = -0.5 * u.squaredNorm();
        for (const auto& cell : cells_) {
            double eta = cell.xm.dot(beta_), lam = cell.xd.dot(dbeta_);
            for (const auto& ref : cell.refs_m) {
                const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
                eta += lt.dot(u.segment(ref.ubase, lt.size()));
            }
            for (const auto& ref : cell.refs_d) {
                const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
                lam += lt.dot(u.segment(ref.ubase, lt.size()));
            }
            const double l = cell_value(cell, eta, lam);
            if (!std::isfinite(l)) return -std::numeric_limits<double>::infinity();
            f += l;
        }
        return f;
    }

    // cell sums of log-likelihood derivatives at the current (u, omega).
    // All observations in a cell share (eta, lambda); the lgamma-ratio jet is
    // linear in its derivative coefficients, so the per-observation work is
    // only the special functions at y + size.
    struct CellSums {
        double f = 0, se = 0, sl = 0, see = 0, sel = 0, sll = 0;
        double seee = 0, seel = 0, sell = 0, slll = 0;
    };
    bool cell_derivs(const Cell& cell, CellSums& s) const {
        const double eta = cell_eta(cell), lam = cell_lambda(cell);
        if (!std::isfinite(eta) || !std::isfinite(lam) || std::fabs(eta) > 40.0 ||
            std::fabs(lam) > 40.0)
            return false;
        const double n = static_cast<double>(cell.ys.size());
        const double log_r = param_ == NbParam::nb1_linear ? eta - lam : lam;
        if (log_r < -600.0 || log_r > 600.0) return false;
        const double r = std::exp(log_r);
        double sa0 = 0, sa1 = 0, sa2 = 0, sa3 = 0, sy = 0, slgy = 0;
        for (double y : cell.ys) {
            double a0, a1, a2, a3;
            lgamma_ratio(y, r, a0, a1, a2, a3);
            sa0 += a0;
            sa1 += a1;
            sa2 += a2;
            sa3 += a3;
            sy += y;
            slgy += std::lgamma(y + 1.0);
        }
        const Jet2 je = Jet2::eta(eta), jl = Jet2::lambda(lam);
        Jet2 total;
        if (param_ == NbParam::nb1_linear) {
            const Jet2 rj = jet_exp(je - jl);
            const Jet2 c = jet_softplus(jl);
            total = compose(rj, sa0, sa1, sa2, sa3) - rj * c * n + (jl - c) * sy;
        } else {
            const Jet2 phi = jet_exp(jl);
            const Jet2 sp = jet_softplus(je - jl);
            total = compose(phi, sa0, sa1, sa2, sa3) - phi * sp * n + (je - jl - sp) * sy;
        }
        total.v -= slgy;
        if (!std::isfinite(total.v)) return false;
        s.f = total.v;
        s.se = total.e;
        s.sl = total.l;
        s.see = total.ee;
        s.sel = total.el;
        s.sll = total.ll;
        s.seee = total.eee;
        s.seel = total.eel;
        s.sell = total.ell;
        s.slll = total.lll;
        return true;
    }

    // value-only analogue used by the inner line search
    double cell_value(const Cell& cell, double eta, double lam) const {
        if (!std::isfinite(eta) || !std::isfinite(lam) || std::fabs(eta) > 40.0 ||
            std::fabs(lam) > 40.0)
            return -std::numeric_limits<double>::infinity();
        const double n = static_cast<double>(cell.ys.size());
        const double log_r = param_ == NbParam::nb1_linear ? eta - lam : lam;
        if (log_r < -600.0 || log_r > 600.0) return -std::numeric_limits<double>::infinity();
        const double r = std::exp(log_r);
        const double lg_r = std::lgamma(r);
        double f = 0, sy = 0, sa0 = 0;
        for (double y : cell.ys) {
            const auto yi = static_cast<long>(y);
            if (y == static_cast<double>(yi) && yi >= 0 && yi <= 64) {
                for (long k = 0; k < yi; ++k) sa0 += std::log(r + static_cast<double>(k));
            } else {
                sa0 += std::lgamma(y + r) - lg_r;
            }
            sy += y;
            f -= std::lgamma(y + 1.0);
        }
        f += sa0;
        if (param_ == NbParam::nb1_linear) {
            const double c = softplus(lam);
            f += -r * c * n + (lam - c) * sy;
        } else {
            const double sp = softplus(eta - lam);
            f += -r * sp * n + (eta - lam - sp) * sy;
        }
        return f;
    }

    // inner Newton for the conditional modes; warm-started from the previous u.
    // Line-search failures escalate Levenberg damping rather than giving up,
    // so the returned mode satisfies the stationarity the outer gradient
    // formula relies on whenever the joint is tractable.
    bool inner_solve() {
        if (!eval_state()) {
            u_.setZero();
            if (!eval_state()) return false;
        }
        int blind_steps = 0;
        for (int it = 0; it < max_inner_; ++it) {
            inner_iterations_ = it;
            inner_residual_ = gu_.cwiseAbs().maxCoeff();
            // scale-aware stationarity: below this the line search fights
            // double-precision noise in f
            const double tol = std::max(inner_tol_, 3e-13 * (1.0 + std::fabs(f_val_)));
            if (inner_residual_ <= tol) return true;
            double damp = 0.0, applied = 0.0;
            bool accepted = false;
            double* hv = H_.valuePtr();
            for (int tries = 0; tries < 16 && !accepted; ++tries) {
                if (damp > applied) {
                    for (long i = 0; i < q_; ++i)
                        hv[diag_slots_[static_cast<size_t>(i)]] += damp - applied;
                    applied = damp;
                }
                ldlt_.factorize(H_);
                if (ldlt_.info() != Eigen::Success ||
                    (ldlt_.vectorD().array() <= 0.0).any()) {
                    damp = damp == 0.0 ? 1e-8 * (1.0 + f_val_mag()) : damp * 100.0;
                    continue;
                }
                const Eigen::VectorXd step = ldlt_.solve(gu_);
                const double slope = gu_.dot(step);
                if (slope <= 1e-11 * (1.0 + std::fabs(f_val_))) {
                    // expected gain is below double noise in f; near the mode
                    // the full Newton step still contracts, so take it blindly
                    if (damp == 0.0 && blind_steps < 3) {
                        ++blind_steps;
                        u_ += step;
                        accepted = true;
                        break;
                    }
                    return true;
                }
                double t = 1.0;
                for (int bt = 0; bt < 14 && !accepted; ++bt) {
                    const Eigen::VectorXd cand = u_ + t * step;
                    const double fc = joint_value(cand);
                    if (std::isfinite(fc) && fc >= f_val_ + 1e-4 * t * slope) {
                        u_ = cand;
                        accepted = true;
                    }
                    t *= 0.5;
                }
                if (!accepted) damp = damp == 0.0 ? 1e-6 * (1.0 + f_val_mag()) : damp * 30.0;
            }
            if (!accepted) {
                // stuck: restore the undamped Hessian at the current u
                if (applied > 0.0 && !eval_state()) return false;
                return true;
            }
            if (!eval_state()) return false;
        }
        inner_residual_ = gu_.cwiseAbs().maxCoeff();
        return true;
    }

    double f_val_mag() const { return std::fabs(f_val_); }

    // evaluates f, the inner gradient and the Hessian at the current u,
    // caching per-cell derivative sums for the outer gradient
    bool eval_state() {
        if (--pass_budget_ < 0) return false;
        f_val_ = -0.5 * u_.squaredNorm();
        gu_ = -u_;
        std::fill(H_.valuePtr(), H_.valuePtr() + H_.nonZeros(), 0.0);
        double* hv = H_.valuePtr();
        for (long i = 0; i < q_; ++i) hv[diag_slots_[static_cast<size_t>(i)]] = 1.0;
        for (size_t c = 0; c < cells_.size(); ++c) {
            const Cell& cell = cells_[c];
            CellSums s;
            if (!cell_derivs(cell, s)) return false;
            f_val_ += s.f;
            sums_[c] = s;
            gather_av_cv(cell, av_, cv_);
            const size_t m = cell.supp.size();
            for (size_t a = 0; a < m; ++a)
                gu_(cell.supp[a]) += s.se * av_[a] + s.sl * cv_[a];
            size_t p = 0;
            for (size_t a = 0; a < m; ++a)
                for (size_t b = 0; b <= a; ++b, ++p)
                    hv[cell.hslot[p]] += -s.see * av_[a] * av_[b] -
                                         s.sel * (av_[a] * cv_[b] + cv_[a] * av_[b]) -
                                         s.sll * cv_[a] * cv_[b];
        }
        return true;
    }

    // dense design values over the cell support (a = mean row, c = disp row)
    void gather_av_cv(const Cell& cell, std::vector<double>& av, std::vector<double>& cv) const {
        const size_t m = cell.supp.size();
        av.assign(m, 0.0);
        cv.assign(m, 0.0);
        size_t ix = 0;
        for (const auto& ref : cell.refs_m) {
            const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
            for (long k = 0; k < lt.size(); ++k)
                av[static_cast<size_t>(cell.mpos[ix++])] += lt(k);
        }
        ix = 0;
        for (const auto& ref : cell.refs_d) {
            const auto& lt = Ltw_[static_cast<size_t>(ref.term)][static_cast<size_t>(ref.wid)];
            for (long k = 0; k < lt.size(); ++k)
                cv[static_cast<size_t>(cell.dpos[ix++])] += lt(k);
        }
    }

    void assemble_hessian() {
        // H was already assembled by refactor_at_u; nothing further needed
    }

    double objective_no_re(Eigen::VectorXd* grad) {
        double obj = 0.0;
        if (grad) grad->setZero(n_params());
        for (const auto& cell : cells_) {
            const double eta = cell.xm.dot(beta_), lam = cell.xd.dot(dbeta_);
            if (grad) {
                CellSums s;
                if (!cell_derivs(cell, s)) return bad(grad);
                obj -= s.f;
                grad->segment(0, p_m_) -= s.se * cell.xm;
                grad->segment(p_m_, p_d_) -= s.sl * cell.xd;
            } else {
                const double l = cell_value(cell, eta, lam);
                if (!std::isfinite(l)) return bad(grad);
                obj -= l;
            }
        }
        return obj;
    }

    void ensure_handles() {
        if (handles_built_) return;
        sinv_.compute(ldlt_);  // builds the factor pattern
        for (auto& cell : cells_) {
            const size_t m = cell.supp.size();
            cell.sh.reserve(m * (m + 1) / 2);
            for (size_t a = 0; a < m; ++a)
                for (size_t b = 0; b <= a; ++b)
                    cell.sh.push_back(sinv_.handle(cell.supp[a], cell.supp[b]));
        }
        handles_built_ = true;
    }

    void compute_gradient(Eigen::VectorXd& grad) {
        grad.setZero(n_params());
        ensure_handles();
        sinv_.compute(ldlt_);

        // pass 1: S terms, g_b, and per-cell scratch
        Eigen::VectorXd gb = Eigen::VectorXd::Zero(q_);
        for (size_t c = 0; c < cells_.size(); ++c) {
            const Cell& cell = cells_[c];
            const CellSums& s = sums_[c];
            gather_av_cv(cell, av_, cv_);
            gather_sigma(cell, sig_);
            const size_t m = cell.supp.size();
            double S_aa = 0, S_ac = 0, S_cc = 0;
            for (size_t a = 0; a < m; ++a)
                for (size_t b = 0; b < m; ++b) {
                    const double sv = sig_[a * m + b];
                    S_aa += av_[a] * sv * av_[b];
                    S_ac += av_[a] * sv * cv_[b];
                    S_cc += cv_[a] * sv * cv_[b];
                }
            const double TeS = -s.seee * S_aa - 2 * s.seel * S_ac - s.sell * S_cc;
            const double TlS = -s.seel * S_aa - 2 * s.sell * S_ac - s.slll * S_cc;
            scratch_[c] = {s.se, s.sl, -s.see, -s.sel, -s.sll, TeS, TlS};
            for (size_t a = 0; a < m; ++a)
                gb(cell.supp[a]) += TeS * av_[a] + TlS * cv_[a];
        }
        const Eigen::VectorXd r = ldlt_.solve(gb);

        // pass 2: assemble the gradient
        const long t0 = p_m_ + p_d_;
        for (size_t c = 0; c < cells_.size(); ++c) {
            const Cell& cell = cells_[c];
            const CellSums& s = sums_[c];
            const CellScratch& sc = scratch_[c];
            gather_av_cv(cell, av_, cv_);
            gather_sigma(cell, sig_);
            const size_t m = cell.supp.size();
            double ra = 0, rc = 0;
            for (size_t a = 0; a < m; ++a) {
                const double rv = r(cell.supp[a]);
                ra += rv * av_[a];
                rc += rv * cv_[a];
            }
            const double coef_eta = -s.se + 0.5 * sc.TeS + 0.5 * (s.see * ra + s.sel * rc);
            const double coef_lam = -s.sl + 0.5 * sc.TlS + 0.5 * (s.sel * ra + s.sll * rc);
            grad.segment(0, p_m_) += coef_eta * cell.xm;
            grad.segment(p_m_, p_d_) += coef_lam * cell.xd;

            // theta parameters of the terms this cell touches
            auto theta_terms = [&](const std::vector<Ref>& refs, const std::vector<int>& pos,
                                   bool disp) {
                size_t base = 0;
                for (const auto& ref : refs) {
                    const auto& tm = theta_meta_[static_cast<size_t>(ref.term)];
                    const auto& w = tm.wlist[static_cast<size_t>(ref.wid)];
                    const Eigen::MatrixXd& L = Lmat_[static_cast<size_t>(ref.term)];
                    long par = t0 + tm.offset_in_theta;
                    auto contribute = [&](int i, int j, double dL) {
                        // \dot a has a single entry dL*w_i at block coordinate j
                        const double val = dL * w(i);
                        if (val == 0.0) { ++par; return; }
                        const int pj = pos[base + static_cast<size_t>(j)];
                        const double pred_dot = val * u_(ref.ubase + j);
                        // sigma row (pj) against a and c
                        double sig_a = 0, sig_c = 0;
                        for (size_t b = 0; b < m; ++b) {
                            const double sv = sig_[static_cast<size_t>(pj) * m + b];
                            sig_a += sv * av_[b];
                            sig_c += sv * cv_[b];
                        }
                        double gval;
                        if (!disp) {
                            gval = coef_eta * pred_dot +
                                   val * (sc.A * sig_a + sc.B * sig_c) +
                                   0.5 * s.se * val * r(ref.ubase + j);
                        } else {
                            gval = coef_lam * pred_dot +
                                   val * (sc.B * sig_a + sc.C * sig_c) +
                                   0.5 * s.sl * val * r(ref.ubase + j);
                        }
                        grad(par++) += gval;
                    };
                    for (int j = 0; j < tm.dim; ++j) contribute(j, j, L(j, j));
                    for (int j = 0; j < tm.dim; ++j)
                        for (int i = j + 1; i < tm.dim; ++i) contribute(i, j, 1.0);
                    base += static_cast<size_t>(tm.dim);
                }
            };
            theta_terms(cell.refs_m, cell.mpos, false);
            theta_terms(cell.refs_d, cell.dpos, true);
        }
    }

    // symmetric m x m selected-inverse submatrix over the cell support
    void gather_sigma(const Cell& cell, std::vector<double>& sig) const {
        const size_t m = cell.supp.size();
        sig.assign(m * m, 0.0);
        size_t p = 0;
        for (size_t a = 0; a < m; ++a)
            for (size_t b = 0; b <= a; ++b, ++p) {
                const double v = sinv_.value(cell.sh[p]);
                sig[a * m + b] = v;
                sig[b * m + a] = v;
            }
    }

    void compute_vcov(const Eigen::VectorXd& omega, GlmmFit& fit) {
        const long p = n_params();
        const Eigen::MatrixXd Hn = fd_hessian(omega, std::vector<char>(static_cast<size_t>(p), 0));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hn);
        const double tol = 1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
        fit.vcov_ok = (es.eigenvalues().array() > tol).all();
        Eigen::VectorXd inv_ev(p);
        for (long i = 0; i < p; ++i)
            inv_ev(i) = es.eigenvalues()(i) > tol ? 1.0 / es.eigenvalues()(i) : 0.0;
        const Eigen::MatrixXd vcov =
            es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
        fit.vcov_beta = vcov.block(0, 0, p_m_, p_m_);
        fit.vcov_disp = vcov.block(p_m_, p_m_, p_d_, p_d_);
        // restore engine state at the optimum
        objective(omega, nullptr);
    }

    // ----- members -----

    NbParam param_;
    std::shared_ptr<GlmmDesignInfo> info_;
    std::vector<Cell> cells_;
    std::vector<std::vector<Eigen::VectorXd>> wlists_m_, wlists_d_;
    std::vector<TermMeta> theta_meta_;
    long p_m_ = 0, p_d_ = 0, q_ = 0, n_theta_ = 0, n_obs_ = 0;
    Eigen::VectorXd poisson_start_, disp_start_;

    // evaluation state
    Eigen::VectorXd beta_, dbeta_, u_;
    std::vector<Eigen::MatrixXd> Lmat_;
    std::vector<std::vector<Eigen::VectorXd>> Ltw_;
    SpMat H_;
    Eigen::SimplicialLDLT<SpMat> ldlt_;
    SelectedInverse sinv_;
    bool handles_built_ = false;
    std::vector<long> diag_slots_;
    std::vector<CellSums> sums_{};
    std::vector<CellScratch> scratch_;
    std::vector<double> av_, cv_, sig_;
    Eigen::VectorXd gu_;
    double f_val_ = 0.0;
    double inner_residual_ = 0.0;
    int inner_iterations_ = 0;
    mutable long pass_budget_ = 1000000;
    double inner_tol_ = 1e-10;
    int max_inner_ = 50;
};

inline GlmmFit fit_nb_glmm(const DataFrame& df, const FormulaSpec& spec,
                           const FitOptions& opt = {}) {
    GlmmEngine engine(df, spec, opt.response);
    return engine.fit(opt);
}

// ---------------------------------------------------------------------------
// Conditional predictions at the fitted modes
// ---------------------------------------------------------------------------

struct MomentPrediction {
    double mu = 0, sigma = 0, eta = 0, lambda = 0;
};

inline std::vector<MomentPrediction> predict_conditional(const GlmmFit& fit,
                                                         const DataFrame& cells) {
    if (!fit.converged)
        throw ConvergenceError("predict_conditional: fit did not converge");
    const auto& info = *fit.design;
    std::vector<MomentPrediction> out(cells.nrows);
    for (size_t i = 0; i < cells.nrows; ++i) {
        double eta = info.mean_fixed.row(cells, i).dot(fit.beta);
        for (size_t t = 0; t < info.mean_random.size(); ++t) {
            const long level = info.mean_random[t].find_level(cells, i);
            eta += info.mean_random[t].design_row(cells, i).dot(fit.re_mean[t].modes.col(level));
        }
        double lam = info.disp_fixed.row(cells, i).dot(fit.disp_beta);
        for (size_t t = 0; t < info.disp_random.size(); ++t) {
            const long level = info.disp_random[t].find_level(cells, i);
            lam += info.disp_random[t].design_row(cells, i).dot(fit.re_disp[t].modes.col(level));
        }
        MomentPrediction p;
        p.eta = eta;
        p.lambda = lam;
        p.mu = std::exp(eta);
        p.sigma = std::sqrt(nb_variance(p.mu, std::exp(lam), fit.family));
        out[i] = p;
    }
    return out;
}

} // namespace engshift
