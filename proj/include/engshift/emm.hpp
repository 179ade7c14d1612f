#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/glmm.hpp"
#include "engshift/mvn.hpp"
#include "engshift/stats.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Estimated marginal means with the log-normal random-effect correction, and
// the contrast machinery built on the joint Gaussian of log-scale estimates.
// ---------------------------------------------------------------------------

struct JointEstimates {
    std::vector<std::string> labels;
    Eigen::VectorXd est;   // log scale
    Eigen::MatrixXd cov;   // symmetric PSD
};

struct EmmCell {
    int epoch = 0;
    std::string group;      // quality tier, sector or "overall"
    double log_emm = 0, se_log = 0;
    double emm = 0, ci_low = 0, ci_high = 0;
    double re_correction = 0;  // (1/2) sum of marginalized z' Sigma z
};

struct EmmTable {
    std::vector<EmmCell> cells;
    std::shared_ptr<JointEstimates> joint;  // one row per cell, same order
    std::vector<int> epochs;
    std::vector<std::string> groups;  // without "overall"

    long index_of(int epoch, const std::string& group) const {
        for (size_t i = 0; i < cells.size(); ++i)
            if (cells[i].epoch == epoch && cells[i].group == group)
                return static_cast<long>(i);
        throw DomainError("no EMM cell for epoch " + std::to_string(epoch) + ", group " + group);
    }
};

struct EmmOptions {
    // grouping factors whose random effects are marginalized (log-normal
    // correction); everything else is conditioned at zero
    std::vector<std::string> marginalize = {"outlet", "outlet:epoch"};
    double alpha = 0.05;
    bool include_overall = true;
    std::string group_column = "quality";
    std::string epoch_column = "epoch";
    // named uniform log-scale averages over subsets of groups, e.g. a "news"
    // row averaging the three quality tiers; they share the joint covariance
    std::vector<std::pair<std::string, std::vector<std::string>>> aggregates;
};

// EMM grid over epoch x group cells. log EMM = x'beta + (1/2) sum z'Sigma z
// over marginalized blocks; delta-method SEs treat the Sigma estimates as
// fixed. "overall" rows average group rows uniformly on the log scale.
inline EmmTable emm(const GlmmFit& fit, const std::vector<int>& epochs,
                    const std::vector<std::string>& groups, const EmmOptions& opt = {}) {
    if (!fit.converged) throw ConvergenceError("emm: fit did not converge");
    const auto& info = *fit.design;

    // grid frame: one row per (epoch, group)
    std::vector<std::string> qcol, ecol;
    for (const int e : epochs)
        for (const auto& g : groups) {
            ecol.push_back(std::to_string(e));
            qcol.push_back(g);
        }
    DataFrame grid;
    grid.add_factor(opt.group_column, qcol);
    grid.add_factor(opt.epoch_column, ecol);

    const long n_groups = static_cast<long>(groups.size());
    const long n_cells = static_cast<long>(qcol.size());
    const long n_extra = static_cast<long>(opt.aggregates.size()) + (opt.include_overall ? 1 : 0);
    const long n_rows = n_cells + n_extra * static_cast<long>(epochs.size());
    Eigen::MatrixXd X(n_rows, fit.beta.size());
    std::vector<double> corrections(static_cast<size_t>(n_rows), 0.0);

    EmmTable out;
    out.epochs = epochs;
    out.groups = groups;
    for (long c = 0; c < n_cells; ++c) {
        X.row(c) = info.mean_fixed.row(grid, static_cast<size_t>(c));
        double corr = 0.0;
        for (size_t t = 0; t < info.mean_random.size(); ++t) {
            const auto& rd = info.mean_random[t];
            if (std::find(opt.marginalize.begin(), opt.marginalize.end(), rd.grouping_name()) ==
                opt.marginalize.end())
                continue;
            // marginalized blocks contribute z' Sigma z regardless of level
            Eigen::VectorXd w;
            try {
                w = rd.design_row(grid, static_cast<size_t>(c));
            } catch (const PredictionError&) {
                throw;  // group not expressible in the random design
            }
            corr += w.dot(fit.re_mean[t].cov * w);
        }
        corrections[static_cast<size_t>(c)] = 0.5 * corr;
    }
    // aggregate rows: uniform log-scale averages over member groups
    std::vector<std::pair<std::string, std::vector<std::string>>> extras = opt.aggregates;
    if (opt.include_overall) extras.emplace_back("overall", groups);
    std::vector<std::string> extra_names;
    long r = n_cells;
    for (const auto& [name, members] : extras) {
        for (size_t ei = 0; ei < epochs.size(); ++ei, ++r) {
            X.row(r).setZero();
            double corr = 0.0;
            for (const auto& member : members) {
                long c = -1;
                for (long g = 0; g < n_groups; ++g)
                    if (groups[static_cast<size_t>(g)] == member)
                        c = static_cast<long>(ei) * n_groups + g;
                if (c < 0) throw DomainError("emm aggregate '" + name +
                                             "': unknown member group " + member);
                X.row(r) += X.row(c) / static_cast<double>(members.size());
                corr += corrections[static_cast<size_t>(c)] / static_cast<double>(members.size());
            }
            corrections[static_cast<size_t>(r)] = corr;
            extra_names.push_back(name);
        }
    }

    auto joint = std::make_shared<JointEstimates>();
    joint->est.resize(n_rows);
    joint->cov = X * fit.vcov_beta * X.transpose();
    const double zq = normal_quantile(1.0 - opt.alpha / 2.0);
    for (long r2 = 0; r2 < n_rows; ++r2) {
        const long r = r2;
        EmmCell cell;
        if (r < n_cells) {
            cell.epoch = epochs[static_cast<size_t>(r / n_groups)];
            cell.group = groups[static_cast<size_t>(r % n_groups)];
        } else {
            const long x = r - n_cells;
            cell.epoch = epochs[static_cast<size_t>(x % static_cast<long>(epochs.size()))];
            cell.group = extra_names[static_cast<size_t>(x)];
        }
        cell.re_correction = corrections[static_cast<size_t>(r)];
        cell.log_emm = X.row(r).dot(fit.beta) + cell.re_correction;
        cell.se_log = std::sqrt(std::max(0.0, joint->cov(r, r)));
        cell.emm = std::exp(cell.log_emm);
        cell.ci_low = std::exp(cell.log_emm - zq * cell.se_log);
        cell.ci_high = std::exp(cell.log_emm + zq * cell.se_log);
        joint->est(r) = cell.log_emm;
        joint->labels.push_back("epoch" + std::to_string(cell.epoch) + ":" + cell.group);
        out.cells.push_back(std::move(cell));
    }
    out.joint = std::move(joint);
    return out;
}

// ---------------------------------------------------------------------------
// Contrasts as linear maps over a shared joint Gaussian
// ---------------------------------------------------------------------------

enum class ContrastKind { sequential, effect_coding, did, cumulative_did, total_effect };

inline std::string to_string(ContrastKind k) {
    switch (k) {
        case ContrastKind::sequential: return "sequential";
        case ContrastKind::effect_coding: return "effect_coding";
        case ContrastKind::did: return "did";
        case ContrastKind::cumulative_did: return "cumulative_did";
        case ContrastKind::total_effect: return "total_effect";
    }
    return "contrast";
}

struct ContrastEstimate {
    ContrastKind kind = ContrastKind::sequential;
    std::string label;
    int epoch = 0;
    double log_ratio = 0, se = 0;
    double ratio = 1, ci_low = 1, ci_high = 1;
    double z = 0, p_raw = 1, p_adjusted = 1;
};

struct ContrastResult {
    ContrastKind kind = ContrastKind::sequential;
    std::shared_ptr<const JointEstimates> base;
    Eigen::MatrixXd C;  // rows: contrasts on the base's log scale
    std::vector<ContrastEstimate> estimates;
    std::vector<int> epochs;

    JointEstimates joint() const {
        JointEstimates j;
        j.est = C * base->est;
        j.cov = C * base->cov * C.transpose();
        for (const auto& e : estimates) j.labels.push_back(e.label);
        return j;
    }
};

namespace emm_detail {

inline void finalize(ContrastResult& r, double alpha) {
    const JointEstimates j = r.joint();
    const double zq = normal_quantile(1.0 - alpha / 2.0);
    for (size_t i = 0; i < r.estimates.size(); ++i) {
        auto& e = r.estimates[i];
        e.log_ratio = j.est(static_cast<long>(i));
        e.se = std::sqrt(std::max(0.0, j.cov(static_cast<long>(i), static_cast<long>(i))));
        e.ratio = std::exp(e.log_ratio);
        e.ci_low = std::exp(e.log_ratio - zq * e.se);
        e.ci_high = std::exp(e.log_ratio + zq * e.se);
        e.z = e.se > 0 ? e.log_ratio / e.se : (e.log_ratio == 0 ? 0 :
              std::numeric_limits<double>::infinity());
        e.p_raw = e.se > 0 ? z_pvalue(e.z) : (e.log_ratio == 0 ? 1.0 : 0.0);
        e.p_adjusted = e.p_raw;  // until adjust_family runs
    }
}

} // namespace emm_detail

// psi_seq(t) = mu(t) / mu(t-1) for one group's cells ordered by epoch
inline ContrastResult contrast_sequential(const EmmTable& table, const std::string& group,
                                          double alpha = 0.05) {
    ContrastResult out;
    out.kind = ContrastKind::sequential;
    out.base = table.joint;
    const auto& epochs = table.epochs;
    if (epochs.size() < 2) throw DomainError("sequential contrasts need >= 2 epochs");
    out.C = Eigen::MatrixXd::Zero(static_cast<long>(epochs.size()) - 1, table.joint->est.size());
    for (size_t t = 1; t < epochs.size(); ++t) {
        out.C(static_cast<long>(t - 1), table.index_of(epochs[t], group)) = 1.0;
        out.C(static_cast<long>(t - 1), table.index_of(epochs[t - 1], group)) = -1.0;
        ContrastEstimate e;
        e.kind = out.kind;
        e.epoch = epochs[t];
        e.label = group + ":epoch" + std::to_string(epochs[t]) + "/epoch" +
                  std::to_string(epochs[t - 1]);
        out.estimates.push_back(std::move(e));
        out.epochs.push_back(epochs[t]);
    }
    emm_detail::finalize(out, alpha);
    return out;
}

// psi_eff(t) = mu(t) / geometric mean of mu over the baseline epochs
inline ContrastResult contrast_effect_coding(const EmmTable& table, const std::string& group,
                                             std::vector<int> baseline_epochs = {},
                                             double alpha = 0.05) {
    ContrastResult out;
    out.kind = ContrastKind::effect_coding;
    out.base = table.joint;
    const auto& epochs = table.epochs;
    if (baseline_epochs.empty()) baseline_epochs = epochs;
    const double nb = static_cast<double>(baseline_epochs.size());
    out.C = Eigen::MatrixXd::Zero(static_cast<long>(epochs.size()), table.joint->est.size());
    for (size_t t = 0; t < epochs.size(); ++t) {
        out.C(static_cast<long>(t), table.index_of(epochs[t], group)) += 1.0;
        for (const int b : baseline_epochs)
            out.C(static_cast<long>(t), table.index_of(b, group)) -= 1.0 / nb;
        ContrastEstimate e;
        e.kind = out.kind;
        e.epoch = epochs[t];
        e.label = group + ":epoch" + std::to_string(epochs[t]) + "/baseline";
        out.estimates.push_back(std::move(e));
        out.epochs.push_back(epochs[t]);
    }
    emm_detail::finalize(out, alpha);
    return out;
}

// tau(t) = psi(t | news) / psi(t | non-news); covariance comes from the
// shared joint when both contrast sets were built from the same fit
inline ContrastResult did_estimate(const ContrastResult& news, const ContrastResult& nonnews,
                                   double alpha = 0.05) {
    if (news.kind != nonnews.kind)
        throw DomainError("did_estimate: contrast kinds differ");
    if (news.epochs != nonnews.epochs)
        throw DomainError("did_estimate: epoch sets differ");
    ContrastResult out;
    out.kind = news.kind == ContrastKind::sequential ? ContrastKind::did
                                                     : ContrastKind::cumulative_did;
    out.epochs = news.epochs;
    if (news.base == nonnews.base) {
        out.base = news.base;
        out.C = news.C - nonnews.C;
    } else {
        // independent fits: stack the two bases block-diagonally
        auto combined = std::make_shared<JointEstimates>();
        const long na = news.base->est.size(), nb = nonnews.base->est.size();
        combined->est.resize(na + nb);
        combined->est << news.base->est, nonnews.base->est;
        combined->cov = Eigen::MatrixXd::Zero(na + nb, na + nb);
        combined->cov.topLeftCorner(na, na) = news.base->cov;
        combined->cov.bottomRightCorner(nb, nb) = nonnews.base->cov;
        combined->labels = news.base->labels;
        for (const auto& l : nonnews.base->labels) combined->labels.push_back(l);
        out.base = combined;
        out.C = Eigen::MatrixXd::Zero(news.C.rows(), na + nb);
        out.C.leftCols(na) = news.C;
        out.C.rightCols(nb) = -nonnews.C;
    }
    for (size_t i = 0; i < news.estimates.size(); ++i) {
        ContrastEstimate e;
        e.kind = out.kind;
        e.epoch = news.estimates[i].epoch;
        e.label = "did:epoch" + std::to_string(e.epoch);
        out.estimates.push_back(std::move(e));
    }
    emm_detail::finalize(out, alpha);
    return out;
}

// ---------------------------------------------------------------------------
// Parallel-trends test and family-wise adjustment
// ---------------------------------------------------------------------------

struct ParallelTrendsTest {
    double statistic = 0;
    int df = 0;
    double p = 1;
    bool rank_deficient = false;
};

inline ParallelTrendsTest parallel_trends_test(const JointEstimates& taus) {
    ParallelTrendsTest out;
    const long d = taus.est.size();
    if (d == 0) return out;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(taus.cov);
    const double tol = 1e-10 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    Eigen::VectorXd inv_ev(d);
    int rank = 0;
    for (long i = 0; i < d; ++i) {
        if (es.eigenvalues()(i) > tol) {
            inv_ev(i) = 1.0 / es.eigenvalues()(i);
            ++rank;
        } else {
            inv_ev(i) = 0.0;
        }
    }
    out.rank_deficient = rank < d;
    const Eigen::MatrixXd pinv =
        es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
    out.statistic = taus.est.dot(pinv * taus.est);
    out.df = rank;
    out.p = chi2_sf(out.statistic, out.df);
    return out;
}

inline ParallelTrendsTest parallel_trends_test(const ContrastResult& did,
                                               const std::vector<int>& epochs) {
    std::vector<long> rows;
    for (const int e : epochs) {
        bool found = false;
        for (size_t i = 0; i < did.epochs.size(); ++i)
            if (did.epochs[i] == e) {
                rows.push_back(static_cast<long>(i));
                found = true;
                break;
            }
        if (!found) throw DomainError("parallel_trends_test: epoch " + std::to_string(e) +
                                      " missing from the DiD set");
    }
    const JointEstimates full = did.joint();
    JointEstimates sub;
    sub.est.resize(static_cast<long>(rows.size()));
    sub.cov.resize(static_cast<long>(rows.size()), static_cast<long>(rows.size()));
    for (size_t a = 0; a < rows.size(); ++a) {
        sub.est(static_cast<long>(a)) = full.est(rows[a]);
        for (size_t b = 0; b < rows.size(); ++b)
            sub.cov(static_cast<long>(a), static_cast<long>(b)) = full.cov(rows[a], rows[b]);
    }
    return parallel_trends_test(sub);
}

struct FamilyAdjustment {
    std::vector<double> p_adjusted;
    double critical_value = 0;  // equicoordinate quantile for simultaneous CIs
};

// single-step max-|z| adjustment under the joint Gaussian of the family
inline FamilyAdjustment adjust_family(const JointEstimates& joint, double alpha = 0.05,
                                      const MvnOptions& opt = {}) {
    const long d = joint.est.size();
    FamilyAdjustment out;
    if (d == 0) return out;
    Eigen::VectorXd se(d);
    for (long i = 0; i < d; ++i) se(i) = std::sqrt(std::max(0.0, joint.cov(i, i)));
    Eigen::MatrixXd R = Eigen::MatrixXd::Identity(d, d);
    for (long i = 0; i < d; ++i)
        for (long j = 0; j < d; ++j)
            if (se(i) > 0 && se(j) > 0) R(i, j) = joint.cov(i, j) / (se(i) * se(j));
    for (long i = 0; i < d; ++i) {
        const double z = se(i) > 0 ? std::fabs(joint.est(i)) / se(i)
                                   : std::numeric_limits<double>::infinity();
        double p = d == 1 ? z_pvalue(z) : max_abs_z_pvalue(R, z, opt);
        // the adjusted p can never fall below the raw p; clip QMC noise
        p = std::max(p, z_pvalue(z));
        out.p_adjusted.push_back(std::min(1.0, p));
    }
    out.critical_value = d == 1 ? normal_quantile(1.0 - alpha / 2.0)
                                : equicoordinate_quantile(R, 1.0 - alpha, opt);
    return out;
}

inline void adjust_family(ContrastResult& r, double alpha = 0.05, const MvnOptions& opt = {}) {
    const auto adj = adjust_family(r.joint(), alpha, opt);
    for (size_t i = 0; i < r.estimates.size(); ++i) {
        r.estimates[i].p_adjusted = adj.p_adjusted[i];
        const double c = adj.critical_value;
        r.estimates[i].ci_low = std::exp(r.estimates[i].log_ratio - c * r.estimates[i].se);
        r.estimates[i].ci_high = std::exp(r.estimates[i].log_ratio + c * r.estimates[i].se);
    }
}

// ---------------------------------------------------------------------------
// Total effect between two epochs
// ---------------------------------------------------------------------------

// ratio mu(epoch_b) / mu(epoch_a) per group; with a reference group the
// causal version divides by the reference ratio; tier-vs-average rows divide
// by the geometric-mean ratio over the listed groups
inline ContrastResult total_effect(const EmmTable& table, int epoch_a, int epoch_b,
                                   const std::vector<std::string>& groups,
                                   const std::string& reference_group = "",
                                   bool vs_average = false, double alpha = 0.05) {
    ContrastResult out;
    out.kind = ContrastKind::total_effect;
    out.base = table.joint;
    const long n = static_cast<long>(groups.size());
    out.C = Eigen::MatrixXd::Zero(n, table.joint->est.size());
    for (long g = 0; g < n; ++g) {
        const auto& group = groups[static_cast<size_t>(g)];
        out.C(g, table.index_of(epoch_b, group)) += 1.0;
        out.C(g, table.index_of(epoch_a, group)) -= 1.0;
        if (!reference_group.empty()) {
            out.C(g, table.index_of(epoch_b, reference_group)) -= 1.0;
            out.C(g, table.index_of(epoch_a, reference_group)) += 1.0;
        }
        if (vs_average) {
            for (const auto& other : groups) {
                out.C(g, table.index_of(epoch_b, other)) -= 1.0 / static_cast<double>(n);
                out.C(g, table.index_of(epoch_a, other)) += 1.0 / static_cast<double>(n);
            }
        }
        ContrastEstimate e;
        e.kind = out.kind;
        e.epoch = epoch_b;
        e.label = group + ":epoch" + std::to_string(epoch_b) + "/epoch" + std::to_string(epoch_a) +
                  (reference_group.empty() ? "" : ":vs_" + reference_group) +
                  (vs_average ? ":vs_average" : "");
        out.estimates.push_back(std::move(e));
        out.epochs.push_back(epoch_b);
    }
    emm_detail::finalize(out, alpha);
    return out;
}

} // namespace engshift
