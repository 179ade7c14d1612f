#pragma once

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "engshift/ar1.hpp"
#include "engshift/pipeline.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Stage: infer — EMM tables, contrasts, DiD, parallel trends, total effects
// ---------------------------------------------------------------------------

namespace infer_detail {

// within each epoch: tier vs the geometric mean over all tiers of that epoch
inline ContrastResult contrast_quality_vs_average(const EmmTable& table,
                                                  const std::vector<std::string>& groups,
                                                  double alpha) {
    ContrastResult out;
    out.kind = ContrastKind::effect_coding;
    out.base = table.joint;
    const long rows = static_cast<long>(table.epochs.size() * groups.size());
    out.C = Eigen::MatrixXd::Zero(rows, table.joint->est.size());
    long r = 0;
    for (const int e : table.epochs) {
        for (const auto& g : groups) {
            out.C(r, table.index_of(e, g)) += 1.0;
            for (const auto& other : groups)
                out.C(r, table.index_of(e, other)) -= 1.0 / static_cast<double>(groups.size());
            ContrastEstimate est;
            est.kind = out.kind;
            est.epoch = e;
            est.label = g + ":epoch" + std::to_string(e) + "/tier_mean";
            out.estimates.push_back(std::move(est));
            out.epochs.push_back(e);
            ++r;
        }
    }
    emm_detail::finalize(out, alpha);
    return out;
}

inline CsvTable emm_to_csv(const EmmTable& table) {
    CsvTable t;
    t.header = {"epoch", "group", "mean", "ci_low", "ci_high", "log_emm", "se_log"};
    for (const auto& c : table.cells)
        t.rows.push_back({std::to_string(c.epoch), c.group, format_double(c.emm),
                          format_double(c.ci_low), format_double(c.ci_high),
                          format_double(c.log_emm), format_double(c.se_log)});
    return t;
}

inline std::vector<int> clip_epochs(const std::vector<int>& epochs, int lo, int hi) {
    std::vector<int> out;
    for (const int e : epochs)
        if (e >= lo && e <= hi) out.push_back(e);
    return out;
}

} // namespace infer_detail

inline void stage_infer(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    const std::string news_path = pipeline_detail::artifact_path(cfg, "fit_news.json");
    pipeline_detail::verify_artifact_hash(news_path, cfg.hash());
    const Json news_json = read_json_file(news_path);
    const GlmmFit news_fit = fit_from_json(news_json);
    if (!news_fit.converged) throw ConvergenceError("fit_news.json holds a non-converged fit");

    std::vector<int> epochs;
    for (const auto& l : news_json.at("factor_levels").at("epoch"))
        epochs.push_back(std::stoi(l.get<std::string>()));
    std::sort(epochs.begin(), epochs.end());
    std::vector<std::string> tiers =
        news_json.value("observed_quality", std::vector<std::string>{});
    std::vector<std::string> news_tiers;
    for (const auto& t : tiers)
        if (t != "non_news") news_tiers.push_back(t);
    if (news_tiers.empty()) throw SchemaError("fit_news.json: no observed news tiers");

    const int last = epochs.back();
    std::vector<std::string> outputs;
    const MvnOptions mvn_opt;  // documented tolerance 1e-3

    // --- news model: EMMs and the three contrast families ---
    EmmOptions eopt;
    eopt.alpha = cfg.alpha;
    auto news_emm = emm(news_fit, epochs, news_tiers, eopt);
    write_json_file(pipeline_detail::artifact_path(cfg, "emm_news.json"),
                    emm_table_to_json(news_emm, cfg.hash()));
    pipeline_detail::write_csv_artifact(cfg, "emm_news.csv",
                                        infer_detail::emm_to_csv(news_emm));
    outputs.insert(outputs.end(), {"emm_news.json", "emm_news.csv"});

    std::vector<std::string> with_overall = news_tiers;
    with_overall.push_back("overall");
    CsvTable seq_csv, eff_csv;
    bool first = true;
    for (const auto& g : with_overall) {
        auto seq = contrast_sequential(news_emm, g, cfg.alpha);
        auto eff = contrast_effect_coding(news_emm, g, {}, cfg.alpha);
        adjust_family(seq, cfg.alpha, mvn_opt);
        adjust_family(eff, cfg.alpha, mvn_opt);
        auto sc = contrasts_to_csv(seq);
        auto ec = contrasts_to_csv(eff);
        if (first) {
            seq_csv.header = sc.header;
            eff_csv.header = ec.header;
            first = false;
        }
        for (auto& row : sc.rows) seq_csv.rows.push_back(std::move(row));
        for (auto& row : ec.rows) eff_csv.rows.push_back(std::move(row));
    }
    auto qva = infer_detail::contrast_quality_vs_average(news_emm, news_tiers, cfg.alpha);
    adjust_family(qva, cfg.alpha, mvn_opt);
    pipeline_detail::write_csv_artifact(cfg, "contrasts_news_sequential.csv", seq_csv);
    pipeline_detail::write_csv_artifact(cfg, "contrasts_news_effect.csv", eff_csv);
    pipeline_detail::write_csv_artifact(cfg, "contrasts_news_quality.csv",
                                        contrasts_to_csv(qva));
    outputs.insert(outputs.end(), {"contrasts_news_sequential.csv",
                                   "contrasts_news_effect.csv", "contrasts_news_quality.csv"});

    // --- news vs non-news: DiD, parallel trends, total effects ---
    const std::string both_path = pipeline_detail::artifact_path(cfg, "fit_both.json");
    Json parallel = Json::object();
    if (fs::exists(both_path)) {
        pipeline_detail::verify_artifact_hash(both_path, cfg.hash());
        const GlmmFit both_fit = fit_from_json(read_json_file(both_path));
        if (!both_fit.converged)
            throw ConvergenceError("fit_both.json holds a non-converged fit");
        EmmOptions bopt;
        bopt.alpha = cfg.alpha;
        bopt.aggregates = {{"news", news_tiers}};
        auto both_groups = news_tiers;
        both_groups.push_back("non_news");
        auto both_emm = emm(both_fit, epochs, both_groups, bopt);
        write_json_file(pipeline_detail::artifact_path(cfg, "emm_both.json"),
                        emm_table_to_json(both_emm, cfg.hash()));
        pipeline_detail::write_csv_artifact(cfg, "emm_both.csv",
                                            infer_detail::emm_to_csv(both_emm));
        outputs.insert(outputs.end(), {"emm_both.json", "emm_both.csv"});

        const std::vector<int> baseline = infer_detail::clip_epochs(
            epochs, 0, std::min(last, cfg.baseline_epoch_count - 1));
        auto seq_news = contrast_sequential(both_emm, "news", cfg.alpha);
        auto seq_nn = contrast_sequential(both_emm, "non_news", cfg.alpha);
        auto eff_news = contrast_effect_coding(both_emm, "news", baseline, cfg.alpha);
        auto eff_nn = contrast_effect_coding(both_emm, "non_news", baseline, cfg.alpha);
        auto did_seq = did_estimate(seq_news, seq_nn, cfg.alpha);
        auto did_cum = did_estimate(eff_news, eff_nn, cfg.alpha);
        adjust_family(did_seq, cfg.alpha, mvn_opt);
        adjust_family(did_cum, cfg.alpha, mvn_opt);
        pipeline_detail::write_csv_artifact(cfg, "did_sequential.csv",
                                            contrasts_to_csv(did_seq));
        pipeline_detail::write_csv_artifact(cfg, "did_cumulative.csv",
                                            contrasts_to_csv(did_cum));
        write_json_file(pipeline_detail::artifact_path(cfg, "did_sequential.json"),
                        contrasts_to_json(did_seq, cfg.hash()));
        write_json_file(pipeline_detail::artifact_path(cfg, "did_cumulative.json"),
                        contrasts_to_json(did_cum, cfg.hash()));
        outputs.insert(outputs.end(), {"did_sequential.csv", "did_cumulative.csv",
                                       "did_sequential.json", "did_cumulative.json"});

        // pre-period equiproportional-trends test and post-period analogue
        const auto pre = infer_detail::clip_epochs(
            did_seq.epochs, 1, std::min(last, cfg.baseline_epoch_count - 1));
        if (!pre.empty()) {
            const auto t = parallel_trends_test(did_seq, pre);
            parallel["pre"] = {{"statistic", t.statistic},
                               {"df", t.df},
                               {"p", t.p},
                               {"rank_deficient", t.rank_deficient},
                               {"epochs", pre}};
        }
        const auto post = infer_detail::clip_epochs(did_seq.epochs,
                                                    cfg.baseline_epoch_count + 1, last);
        if (!post.empty()) {
            const auto t = parallel_trends_test(did_seq, post);
            parallel["post"] = {{"statistic", t.statistic},
                                {"df", t.df},
                                {"p", t.p},
                                {"rank_deficient", t.rank_deficient},
                                {"epochs", post}};
        }

        // total suppression effects between the configured epochs
        int from = cfg.total_effect_from, to = cfg.total_effect_to;
        if (from > last || to > last || from == to) {
            from = 0;
            to = last;
        }
        CsvTable te;
        te.header = {"row", "ratio", "ci_low", "ci_high", "p_raw", "p_adjusted"};
        auto add_rows = [&](const ContrastResult& r, const std::string& prefix) {
            for (const auto& e : r.estimates)
                te.rows.push_back({prefix + e.label, format_double(e.ratio),
                                   format_double(e.ci_low), format_double(e.ci_high),
                                   format_double(e.p_raw), format_double(e.p_adjusted)});
        };
        auto change_both = total_effect(both_emm, from, to, {"news", "non_news"}, "", false,
                                        cfg.alpha);
        auto change_tiers = total_effect(news_emm, from, to, news_tiers, "", false, cfg.alpha);
        auto vs_avg = total_effect(news_emm, from, to, news_tiers, "", true, cfg.alpha);
        auto causal_news = total_effect(both_emm, from, to, {"news"}, "non_news", false,
                                        cfg.alpha);
        auto causal_tiers = total_effect(both_emm, from, to, news_tiers, "non_news", false,
                                         cfg.alpha);
        for (auto* r : {&change_both, &change_tiers, &vs_avg, &causal_news, &causal_tiers})
            adjust_family(*r, cfg.alpha, mvn_opt);
        add_rows(change_both, "change:");
        add_rows(change_tiers, "change:");
        add_rows(vs_avg, "vs_average:");
        add_rows(causal_news, "causal:");
        add_rows(causal_tiers, "causal:");
        pipeline_detail::write_csv_artifact(cfg, "total_effects.csv", te);
        outputs.push_back("total_effects.csv");
    }
    parallel["format_version"] = kFormatVersion;
    parallel["kind"] = "parallel_trends";
    parallel["config_hash"] = cfg.hash();
    write_json_file(pipeline_detail::artifact_path(cfg, "parallel_trends.json"), parallel);
    outputs.push_back("parallel_trends.json");
    pipeline_detail::write_manifest(cfg, "infer", {"fit_news.json"}, outputs,
                                    timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: report — rendered tables plus the weekly-correlation analysis
// ---------------------------------------------------------------------------

namespace report_detail {

struct WeeklyGroupSeries {
    std::string group;
    std::vector<double> log_posts, log_reactions;
    long n_weeks_used = 0;
};

// weekly per-outlet post counts and mean reactions, averaged over outlets
// within each quality group; truncated to the longest gapless stretch
inline std::vector<GroupSeries> weekly_group_series(const PostTable& posts,
                                                    const OutletDirectory& outlets,
                                                    DayNumber window_start,
                                                    DayNumber window_end) {
    std::map<std::string, const OutletMeta*> meta;
    for (const auto& o : outlets.outlets) meta[o.outlet_id] = &o;
    const long n_weeks = (window_end - window_start) / 7 + 1;
    struct Acc {
        long posts = 0;
        double reactions = 0;
    };
    std::map<std::string, std::map<std::pair<long, std::string>, Acc>> cells;  // group -> (week, outlet)
    for (const auto& r : posts.records) {
        if (!r.reactions || !meta.count(r.outlet_id)) continue;
        const long w = (r.published_at.day - window_start) / 7;
        if (w < 0 || w >= n_weeks) continue;
        auto& a = cells[to_string(meta[r.outlet_id]->quality)][{w, r.outlet_id}];
        ++a.posts;
        a.reactions += static_cast<double>(*r.reactions);
    }
    std::vector<GroupSeries> out;
    for (auto& [group, byc] : cells) {
        std::vector<double> x(static_cast<size_t>(n_weeks), 0.0), y(static_cast<size_t>(n_weeks), 0.0);
        std::vector<long> cnt(static_cast<size_t>(n_weeks), 0);
        for (const auto& [key, a] : byc) {
            x[static_cast<size_t>(key.first)] += static_cast<double>(a.posts);
            y[static_cast<size_t>(key.first)] += a.reactions / std::max(1.0, static_cast<double>(a.posts));
            ++cnt[static_cast<size_t>(key.first)];
        }
        // longest stretch of weeks with data
        long best_s = 0, best_e = 0, s = 0;
        for (long w = 0; w <= n_weeks; ++w) {
            if (w == n_weeks || cnt[static_cast<size_t>(w)] == 0) {
                if (w - s > best_e - best_s) {
                    best_s = s;
                    best_e = w;
                }
                s = w + 1;
            }
        }
        GroupSeries g;
        g.group = group;
        for (long w = best_s; w < best_e; ++w) {
            const double n = static_cast<double>(cnt[static_cast<size_t>(w)]);
            g.x.push_back(std::log(x[static_cast<size_t>(w)] / n));
            g.y.push_back(std::log(std::max(y[static_cast<size_t>(w)] / n, 1e-9)));
        }
        if (g.x.size() >= 10) out.push_back(std::move(g));
    }
    return out;
}

inline std::string fixed(double v, int prec = 2) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(prec) << v;
    return ss.str();
}

inline void render_table(std::ostream& os, const std::string& title,
                         const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
    os << "== " << title << " ==\n";
    std::vector<size_t> widths(header.size());
    for (size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
    for (const auto& row : rows)
        for (size_t c = 0; c < row.size() && c < widths.size(); ++c)
            widths[c] = std::max(widths[c], row[c].size());
    auto line = [&](const std::vector<std::string>& row) {
        for (size_t c = 0; c < row.size(); ++c)
            os << std::left << std::setw(static_cast<int>(widths[c]) + 2) << row[c];
        os << "\n";
    };
    line(header);
    for (const auto& row : rows) line(row);
    os << "\n";
}

} // namespace report_detail

inline void stage_report(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    const std::string emm_path = pipeline_detail::artifact_path(cfg, "emm_news.csv");
    pipeline_detail::verify_artifact_hash(emm_path, cfg.hash());
    std::ostringstream os;
    os << "engagement-shift pipeline report\nconfig_hash: " << cfg.hash() << "\n\n";
    std::vector<std::string> outputs = {"report.txt"};

    // changepoints
    {
        const std::string cp_path = pipeline_detail::artifact_path(cfg, "changepoints.json");
        pipeline_detail::verify_artifact_hash(cp_path, cfg.hash());
        const auto cps = changepoints_from_json(read_json_file(cp_path));
        std::vector<std::vector<std::string>> rows;
        int i = 1;
        for (const auto& cp : cps.points)
            rows.push_back({std::to_string(i++), format_date(cp.date),
                            format_date(cp.lower_date), format_date(cp.upper_date),
                            report_detail::fixed(cp.height, 3)});
        report_detail::render_table(os, "Detected changepoints",
                                    {"index", "timestamp", "lower_bound", "upper_bound", "height"},
                                    rows);
        os << "epochs: " << cps.points.size() + 1 << " (intervals between changepoints; epoch 0 "
           << "precedes the first changepoint)\n\n";
    }

    // estimated marginal means
    {
        const CsvTable emm_csv = read_csv_file(emm_path, cfg.delimiter);
        std::vector<std::vector<std::string>> rows;
        for (const auto& r : emm_csv.rows)
            rows.push_back({r[0], r[1], report_detail::fixed(std::stod(r[2])),
                            report_detail::fixed(std::stod(r[3])),
                            report_detail::fixed(std::stod(r[4]))});
        report_detail::render_table(os, "Estimated marginal means (news)",
                                    {"epoch", "group", "mean", "2.5%", "97.5%"}, rows);
    }

    // contrast, DiD and total-effect tables
    for (const auto& name :
         {"contrasts_news_sequential.csv", "contrasts_news_effect.csv",
          "contrasts_news_quality.csv", "did_sequential.csv", "did_cumulative.csv",
          "total_effects.csv"}) {
        const std::string path = pipeline_detail::artifact_path(cfg, name);
        if (!fs::exists(path)) continue;
        const CsvTable t = read_csv_file(path, cfg.delimiter);
        std::vector<std::vector<std::string>> rows;
        for (const auto& r : t.rows) {
            std::vector<std::string> row;
            for (size_t c = 0; c < r.size(); ++c) {
                const auto& col = t.header[c];
                if (col == "label" || col == "row" || col == "epoch") {
                    row.push_back(r[c]);
                } else if (col.starts_with("p_")) {
                    row.push_back(report_detail::fixed(std::stod(r[c]), 3));
                } else {
                    row.push_back(report_detail::fixed(std::stod(r[c]), 2));
                }
            }
            rows.push_back(std::move(row));
        }
        report_detail::render_table(os, name, t.header, rows);
    }

    // weekly correlation analysis: reactions vs post counts per quality group
    {
        auto [posts, outlets] = load_clean_panel(cfg);
        const auto series = report_detail::weekly_group_series(
            posts, outlets, parse_date(cfg.window_start), parse_date(cfg.window_end));
        if (!series.empty()) {
            try {
                const Ar1Fit fit = fit_ar1_gaussian(series);
                CsvTable wc;
                wc.header = {"group", "slope", "se_slope", "r_adjusted", "p", "phi_ar",
                             "sigma2", "n_weeks"};
                std::vector<std::vector<std::string>> rows;
                for (size_t g = 0; g < fit.groups.size(); ++g) {
                    double r = 0, pv = 1;
                    if (fit.slope_identifiable[g] && fit.var_y[g] > 0) {
                        auto [rr, pp] = adjusted_correlation(fit, fit.groups[g]);
                        r = rr;
                        pv = pp;
                    }
                    wc.rows.push_back({fit.groups[g],
                                       format_double(fit.slope(static_cast<long>(g))),
                                       format_double(fit.se_slope(static_cast<long>(g))),
                                       format_double(r), format_double(pv),
                                       format_double(fit.phi_ar),
                                       format_double(fit.sigma2(static_cast<long>(g))),
                                       std::to_string(series[g].x.size())});
                    rows.push_back({fit.groups[g], report_detail::fixed(fit.slope(static_cast<long>(g)), 3),
                                    report_detail::fixed(r, 3), report_detail::fixed(pv, 3),
                                    report_detail::fixed(fit.phi_ar, 3)});
                }
                pipeline_detail::write_csv_artifact(cfg, "weekly_correlations.csv", wc);
                outputs.push_back("weekly_correlations.csv");
                report_detail::render_table(
                    os, "Weekly reactions vs post counts (autocorrelation-adjusted)",
                    {"group", "slope", "r", "p", "phi_ar"}, rows);
            } catch (const Error& e) {
                os << "weekly correlation analysis skipped: " << e.what() << "\n\n";
            }
        }
    }

    // parallel trends summary
    {
        const std::string pt_path = pipeline_detail::artifact_path(cfg, "parallel_trends.json");
        if (fs::exists(pt_path)) {
            const Json pt = read_json_file(pt_path);
            for (const auto& key : {"pre", "post"}) {
                if (!pt.contains(key)) continue;
                const auto& t = pt.at(key);
                os << "equiproportional-trends test (" << key << "): chi2("
                   << t.at("df").get<int>() << ") = "
                   << report_detail::fixed(t.at("statistic").get<double>(), 2)
                   << ", p = " << report_detail::fixed(t.at("p").get<double>(), 3) << "\n";
            }
            os << "\n";
        }
    }

    std::ofstream out(pipeline_detail::artifact_path(cfg, "report.txt"), std::ios::binary);
    if (!out) throw IoError("cannot write report.txt");
    out << os.str();
    pipeline_detail::write_manifest(cfg, "report", {"emm_news.csv"}, outputs,
                                    timer.elapsed_ms());
}

} // namespace engshift
