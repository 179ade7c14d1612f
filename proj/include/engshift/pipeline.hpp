#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "engshift/serialize.hpp"
#include "engshift/synthetic.hpp"

namespace engshift {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Pipeline configuration. The effective config (defaults filled in, seed
// overrides applied) is what gets hashed; every artifact embeds the hash and
// downstream stages refuse mismatched inputs.
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::string input_posts, input_outlets;
    std::string output_dir = "out";
    char delimiter = ',';

    std::string window_start = "2016-01-01";
    std::string window_end = "2025-02-13";
    bool run_imputation = true;

    std::string prelim_mean = "quality + log(n_posts) + (1|outlet) + (1+quality|day)";
    std::string prelim_disp = "quality + log(n_posts) + (1|outlet) + (1+quality|day)";
    std::string prelim_param = "nb2_quadratic";

    SamplerConfig sampler;
    ConsensusConfig consensus;
    int detect_threads = 0;  // 0 = hardware concurrency

    long cell_floor = 20;
    std::string news_mean = "quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|day)";
    std::string news_disp = "quality*epoch + (1|outlet) + (1|outlet:epoch)";
    std::string epoch_param = "nb1_linear";
    std::string both_mean = "quality*epoch + (1|outlet) + (1|outlet:epoch) + (1|day)";
    std::string both_disp = "1 + (1|outlet) + (1|outlet:epoch)";

    double alpha = 0.05;
    int baseline_epoch_count = 5;   // cumulative-effect baseline: epochs 0..4
    int total_effect_from = 4;
    int total_effect_to = 9;
    int fit_max_outer = 500;

    Json simulate = Json::object();  // panel truth for the simulate stage
    std::uint64_t seed = 1;

    Json to_json() const {
        Json j;
        j["input_posts"] = input_posts;
        j["input_outlets"] = input_outlets;
        j["output_dir"] = output_dir;
        j["delimiter"] = std::string(1, delimiter);
        j["window_start"] = window_start;
        j["window_end"] = window_end;
        j["run_imputation"] = run_imputation;
        j["prelim_mean"] = prelim_mean;
        j["prelim_disp"] = prelim_disp;
        j["prelim_param"] = prelim_param;
        j["sampler"] = {{"max_knots", sampler.max_knots},
                        {"min_knot_separation", sampler.min_knot_separation},
                        {"outlier_component", sampler.outlier_component},
                        {"delta_time", sampler.delta_time},
                        {"burn_in", sampler.mcmc.burn_in},
                        {"samples", sampler.mcmc.samples},
                        {"thinning", sampler.mcmc.thinning}};
        j["consensus"] = {{"k", consensus.k}, {"l", consensus.l}, {"p_min", consensus.p_min}};
        j["detect_threads"] = detect_threads;
        j["cell_floor"] = cell_floor;
        j["news_mean"] = news_mean;
        j["news_disp"] = news_disp;
        j["epoch_param"] = epoch_param;
        j["both_mean"] = both_mean;
        j["both_disp"] = both_disp;
        j["alpha"] = alpha;
        j["baseline_epoch_count"] = baseline_epoch_count;
        j["total_effect_from"] = total_effect_from;
        j["total_effect_to"] = total_effect_to;
        j["fit_max_outer"] = fit_max_outer;
        j["simulate"] = simulate;
        j["seed"] = seed;
        return j;
    }

    std::string hash() const {
        // the artifact location does not identify the analysis
        Json j = to_json();
        j.erase("output_dir");
        return config_hash(j);
    }

    static PipelineConfig from_json(const Json& j) {
        PipelineConfig c;
        auto get = [&](const char* key, auto& field) {
            using T = std::decay_t<decltype(field)>;
            if (j.contains(key)) field = j.at(key).get<T>();
        };
        get("input_posts", c.input_posts);
        get("input_outlets", c.input_outlets);
        get("output_dir", c.output_dir);
        if (j.contains("delimiter")) {
            const auto d = j.at("delimiter").get<std::string>();
            if (d.size() != 1) throw ConfigError("delimiter must be a single character");
            c.delimiter = d[0];
        }
        get("window_start", c.window_start);
        get("window_end", c.window_end);
        get("run_imputation", c.run_imputation);
        get("prelim_mean", c.prelim_mean);
        get("prelim_disp", c.prelim_disp);
        get("prelim_param", c.prelim_param);
        if (j.contains("sampler")) {
            const auto& s = j.at("sampler");
            if (s.contains("max_knots")) c.sampler.max_knots = s.at("max_knots").get<int>();
            if (s.contains("min_knot_separation"))
                c.sampler.min_knot_separation = s.at("min_knot_separation").get<int>();
            if (s.contains("outlier_component"))
                c.sampler.outlier_component = s.at("outlier_component").get<bool>();
            if (s.contains("delta_time")) c.sampler.delta_time = s.at("delta_time").get<double>();
            if (s.contains("burn_in")) c.sampler.mcmc.burn_in = s.at("burn_in").get<int>();
            if (s.contains("samples")) c.sampler.mcmc.samples = s.at("samples").get<int>();
            if (s.contains("thinning")) c.sampler.mcmc.thinning = s.at("thinning").get<int>();
        }
        if (j.contains("consensus")) {
            const auto& s = j.at("consensus");
            if (s.contains("k")) c.consensus.k = s.at("k").get<int>();
            if (s.contains("l")) c.consensus.l = s.at("l").get<int>();
            if (s.contains("p_min")) c.consensus.p_min = s.at("p_min").get<double>();
        }
        get("detect_threads", c.detect_threads);
        get("cell_floor", c.cell_floor);
        get("news_mean", c.news_mean);
        get("news_disp", c.news_disp);
        get("epoch_param", c.epoch_param);
        get("both_mean", c.both_mean);
        get("both_disp", c.both_disp);
        get("alpha", c.alpha);
        get("baseline_epoch_count", c.baseline_epoch_count);
        get("total_effect_from", c.total_effect_from);
        get("total_effect_to", c.total_effect_to);
        get("fit_max_outer", c.fit_max_outer);
        if (j.contains("simulate")) c.simulate = j.at("simulate");
        get("seed", c.seed);
        if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
        if (c.consensus.k < 1) throw ConfigError("consensus.k must be >= 1");
        if (c.consensus.l < 0) throw ConfigError("consensus.l must be >= 0");
        if (!(c.consensus.p_min > 0.0 && c.consensus.p_min <= 1.0))
            throw ConfigError("consensus.p_min must lie in (0,1]");
        return c;
    }
};

// ---------------------------------------------------------------------------
// Artifact bookkeeping
// ---------------------------------------------------------------------------

namespace pipeline_detail {

inline std::string artifact_path(const PipelineConfig& cfg, const std::string& name) {
    return (fs::path(cfg.output_dir) / name).string();
}

inline void verify_artifact_hash(const std::string& path, const std::string& expected) {
    if (!fs::exists(path))
        throw DependencyError("missing upstream artifact: " + path +
                              " (run the producing stage first)");
    std::string found;
    if (path.ends_with(".json")) {
        const Json j = read_json_file(path);
        found = j.value("config_hash", "");
    } else {
        std::ifstream in(path, std::ios::binary);
        const CsvTable t = read_csv(in);
        auto it = t.metadata.find("config_hash");
        if (it != t.metadata.end()) found = it->second;
    }
    if (found != expected)
        throw DependencyError("artifact " + path + " was produced under config hash '" + found +
                              "' but the current config hash is '" + expected + "'");
}

inline void write_manifest(const PipelineConfig& cfg, const std::string& stage,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs, double elapsed_ms) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "manifest";
    j["stage"] = stage;
    j["config_hash"] = cfg.hash();
    j["seed"] = cfg.seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["elapsed_ms"] = elapsed_ms;
    write_json_file(artifact_path(cfg, "manifest_" + stage + ".json"), j);
}

class StageTimer {
public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                         start_)
            .count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

inline void write_csv_artifact(const PipelineConfig& cfg, const std::string& name, CsvTable t) {
    t.metadata["config_hash"] = cfg.hash();
    write_csv_file(artifact_path(cfg, name), t, cfg.delimiter);
}

} // namespace pipeline_detail

// ---------------------------------------------------------------------------
// Stage: simulate
// ---------------------------------------------------------------------------

inline PanelTruth truth_from_json(const Json& j, std::uint64_t seed) {
    PanelTruth t;
    t.seed = seed;
    if (j.contains("window_start")) t.window_start = parse_date(j.at("window_start").get<std::string>());
    if (j.contains("window_end")) t.window_end = parse_date(j.at("window_end").get<std::string>());
    if (j.contains("changepoint_days"))
        for (const auto& d : j.at("changepoint_days"))
            t.changepoint_days.push_back(parse_date(d.get<std::string>()));
    if (j.contains("sd_outlet")) t.sd_outlet = j.at("sd_outlet").get<double>();
    if (j.contains("sd_outlet_epoch")) t.sd_outlet_epoch = j.at("sd_outlet_epoch").get<double>();
    if (j.contains("sd_day")) t.sd_day = j.at("sd_day").get<double>();
    if (j.contains("parametrization"))
        t.parametrization = parse_parametrization(j.at("parametrization").get<std::string>());
    if (j.contains("phi")) t.phi = j.at("phi").get<double>();
    if (j.contains("posts_per_day")) t.posts_per_day = j.at("posts_per_day").get<double>();
    if (j.contains("outlet_rate_sd")) t.outlet_rate_sd = j.at("outlet_rate_sd").get<double>();
    if (!j.contains("groups")) throw ConfigError("simulate: config needs a groups array");
    for (const auto& g : j.at("groups")) {
        GroupTruth gt;
        gt.name = g.at("name").get<std::string>();
        auto q = parse_quality(gt.name);
        if (g.contains("quality")) q = parse_quality(g.at("quality").get<std::string>());
        if (!q) throw ConfigError("simulate: group quality must be low/medium/high/non_news");
        gt.quality = *q;
        gt.sector = gt.quality == Quality::non_news ? Sector::non_news : Sector::news;
        gt.n_outlets = g.value("n_outlets", 4);
        gt.log_mean = g.at("log_mean").get<std::vector<double>>();
        t.groups.push_back(std::move(gt));
    }
    return t;
}

inline Json truth_to_json(const PanelTruth& t) {
    Json j;
    j["window_start"] = format_date(t.window_start);
    j["window_end"] = format_date(t.window_end);
    Json cps = Json::array();
    for (const auto d : t.changepoint_days) cps.push_back(format_date(d));
    j["changepoint_days"] = cps;
    j["sd_outlet"] = t.sd_outlet;
    j["sd_outlet_epoch"] = t.sd_outlet_epoch;
    j["sd_day"] = t.sd_day;
    j["parametrization"] = to_string(t.parametrization);
    j["phi"] = t.phi;
    j["posts_per_day"] = t.posts_per_day;
    j["outlet_rate_sd"] = t.outlet_rate_sd;
    j["seed"] = t.seed;
    Json groups = Json::array();
    for (const auto& g : t.groups) {
        Json gj;
        gj["name"] = g.name;
        gj["quality"] = to_string(g.quality);
        gj["n_outlets"] = g.n_outlets;
        gj["log_mean"] = g.log_mean;
        groups.push_back(std::move(gj));
    }
    j["groups"] = groups;
    return j;
}

inline void stage_simulate(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    fs::create_directories(cfg.output_dir);
    if (cfg.simulate.empty()) throw ConfigError("simulate: no truth specified in config");
    const PanelTruth truth = truth_from_json(cfg.simulate, cfg.seed);
    const GeneratedPanel panel = generate_panel(truth);
    pipeline_detail::write_csv_artifact(cfg, "posts.csv", posts_to_csv(panel.posts));
    pipeline_detail::write_csv_artifact(cfg, "outlets.csv", outlets_to_csv(panel.outlets));
    Json tj = truth_to_json(truth);
    tj["config_hash"] = cfg.hash();
    tj["kind"] = "panel_truth";
    tj["format_version"] = kFormatVersion;
    write_json_file(pipeline_detail::artifact_path(cfg, "truth.json"), tj);
    pipeline_detail::write_manifest(cfg, "simulate", {},
                                    {"posts.csv", "outlets.csv", "truth.json"},
                                    timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: ingest
// ---------------------------------------------------------------------------

inline void stage_ingest(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    fs::create_directories(cfg.output_dir);
    std::string posts_path = cfg.input_posts, outlets_path = cfg.input_outlets;
    if (posts_path.empty()) {
        posts_path = pipeline_detail::artifact_path(cfg, "posts.csv");
        outlets_path = pipeline_detail::artifact_path(cfg, "outlets.csv");
        pipeline_detail::verify_artifact_hash(posts_path, cfg.hash());
    }
    if (!fs::exists(posts_path)) throw DependencyError("input posts not found: " + posts_path);
    if (!fs::exists(outlets_path))
        throw DependencyError("outlet metadata not found: " + outlets_path);

    std::ifstream in(posts_path, std::ios::binary);
    ColumnSchema schema;
    schema.delimiter = cfg.delimiter;
    auto parsed = parse_posts(in, schema);
    const OutletDirectory outlets = outlets_from_csv(read_csv_file(outlets_path, cfg.delimiter));

    auto dedup = deduplicate(parsed.table);
    CleaningConfig rules;
    rules.window_start = parse_date(cfg.window_start);
    rules.window_end = parse_date(cfg.window_end);
    auto filtered = filter_valid(dedup.table, rules);

    ImputationReport imput;
    Json models = Json::object();
    if (cfg.run_imputation) {
        bool any_views = false, any_missing = false;
        for (const auto& r : filtered.table.records) {
            any_views = any_views || (r.views && r.reactions);
            any_missing = any_missing || (!r.reactions && r.views);
        }
        if (any_views) {
            try {
                const ProxyFit proxy = fit_views_proxy(filtered.table);
                models["views_proxy"] = {{"intercept", proxy.intercept},
                                         {"slope_reactions", proxy.slope_reactions},
                                         {"se_reactions", proxy.se_reactions},
                                         {"adjusted_r2", proxy.adjusted_r2},
                                         {"r_views_reactions", proxy.r_views_reactions},
                                         {"n", proxy.n}};
            } catch (const Error& e) {
                models["views_proxy"] = {{"skipped", e.what()}};
            }
        }
        if (any_missing && any_views) {
            const ImputationFit ifit = fit_imputation(filtered.table);
            auto res = impute_reactions(filtered.table, ifit);
            filtered.table = std::move(res.table);
            imput = res.report;
            models["imputation"] = {{"r2", ifit.r2},
                                    {"n", ifit.n},
                                    {"views_slope", ifit.views_slope},
                                    {"unidentifiable", ifit.unidentifiable}};
        }
    }

    pipeline_detail::write_csv_artifact(cfg, "posts_clean.csv", posts_to_csv(filtered.table));
    pipeline_detail::write_csv_artifact(cfg, "outlets_clean.csv", outlets_to_csv(outlets));
    // rejected rows are kept in a sidecar, never silently dropped
    CsvTable rejects;
    rejects.header = {"row_number", "reason", "raw"};
    for (const auto& r : parsed.rejects) {
        std::string raw;
        for (size_t i = 0; i < r.fields.size(); ++i) raw += (i ? "|" : "") + r.fields[i];
        rejects.rows.push_back({std::to_string(r.row_number), r.reason, raw});
    }
    pipeline_detail::write_csv_artifact(cfg, "rejects.csv", rejects);
    Json report = cleaning_report_to_json(filtered.removed, dedup.removed,
                                          static_cast<std::int64_t>(parsed.rejects.size()),
                                          imput, cfg.hash());
    report["models"] = models;
    write_json_file(pipeline_detail::artifact_path(cfg, "cleaning_report.json"), report);
    pipeline_detail::write_manifest(
        cfg, "ingest", {posts_path, outlets_path},
        {"posts_clean.csv", "outlets_clean.csv", "rejects.csv", "cleaning_report.json"},
        timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: fit-preliminary
// ---------------------------------------------------------------------------

inline std::pair<PostTable, OutletDirectory> load_clean_panel(const PipelineConfig& cfg) {
    const std::string posts_path = pipeline_detail::artifact_path(cfg, "posts_clean.csv");
    const std::string outlets_path = pipeline_detail::artifact_path(cfg, "outlets_clean.csv");
    pipeline_detail::verify_artifact_hash(posts_path, cfg.hash());
    pipeline_detail::verify_artifact_hash(outlets_path, cfg.hash());
    std::ifstream in(posts_path, std::ios::binary);
    ColumnSchema schema;
    schema.delimiter = cfg.delimiter;
    auto parsed = parse_posts(in, schema);
    if (!parsed.rejects.empty())
        throw SchemaError("posts_clean.csv contains malformed rows; rerun ingest");
    return {std::move(parsed.table), outlets_from_csv(read_csv_file(outlets_path, cfg.delimiter))};
}

inline FitSerializationContext make_context(const DataFrame& df, const std::string& mean,
                                            const std::string& disp, Parametrization param) {
    FitSerializationContext ctx;
    ctx.mean_formula = mean;
    ctx.disp_formula = disp;
    ctx.parametrization = param;
    for (const auto& col : {"quality", "outlet", "day", "epoch", "post_type"})
        if (df.has_factor(col)) ctx.factor_levels[col] = df.factor(col).levels;
    for (const auto& col : {"n_posts", "reactions"})
        if (df.has_numeric(col)) ctx.numeric_columns.push_back(col);
    // observed quality levels, in registry order
    if (df.has_factor("quality")) {
        const auto& q = df.factor("quality");
        std::vector<char> seen(q.levels.size(), 0);
        for (const int c : q.codes) seen[static_cast<size_t>(c)] = 1;
        for (size_t l = 0; l < q.levels.size(); ++l)
            if (seen[l]) ctx.observed_quality.push_back(q.levels[l]);
    }
    return ctx;
}

inline void stage_fit_preliminary(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    auto [posts, outlets] = load_clean_panel(cfg);
    // the preliminary model runs on the news sector only
    PostTable news;
    std::map<std::string, const OutletMeta*> meta;
    for (const auto& o : outlets.outlets) meta[o.outlet_id] = &o;
    for (const auto& r : posts.records)
        if (meta.count(r.outlet_id) && meta[r.outlet_id]->sector == Sector::news)
            news.records.push_back(r);
    if (news.records.empty()) throw InsufficientDataError("no news posts in the clean panel");

    const DataFrame df = model_frame_from_posts(news, outlets);
    FormulaSpec spec;
    spec.mean = parse_formula(cfg.prelim_mean);
    spec.dispersion = parse_formula(cfg.prelim_disp);
    spec.parametrization = parse_parametrization(cfg.prelim_param);
    FitOptions opt;
    opt.max_outer = cfg.fit_max_outer;
    const GlmmFit fit = fit_nb_glmm(df, spec, opt);
    if (!fit.converged)
        throw ConvergenceError("preliminary model did not converge (gradient norm " +
                               std::to_string(fit.grad_norm) + ")");

    const auto ctx = make_context(df, cfg.prelim_mean, cfg.prelim_disp, spec.parametrization);
    write_json_file(pipeline_detail::artifact_path(cfg, "preliminary_fit.json"),
                    fit_to_json(fit, ctx, cfg.hash()));

    // conditional moments for each unique outlet-day, plus outlet means
    std::map<std::string, std::pair<double, long>> outlet_mean;
    for (const auto& r : news.records) {
        outlet_mean[r.outlet_id].first += static_cast<double>(*r.reactions);
        outlet_mean[r.outlet_id].second += 1;
    }
    struct CellKey {
        std::string outlet;
        DayNumber day;
        bool operator<(const CellKey& o) const {
            return outlet < o.outlet || (outlet == o.outlet && day < o.day);
        }
    };
    std::map<CellKey, size_t> cells;  // -> first row index in df order
    std::vector<std::string> c_outlet, c_quality, c_day, c_ptype;
    std::vector<double> c_nposts, c_reactions;
    size_t row = 0;
    for (const auto& r : news.records) {
        if (!r.reactions) continue;
        const CellKey key{r.outlet_id, r.published_at.day};
        if (cells.emplace(key, row).second) {
            c_outlet.push_back(r.outlet_id);
            c_quality.push_back(to_string(meta[r.outlet_id]->quality));
            c_day.push_back(format_date(r.published_at.day));
            c_ptype.push_back(to_string(r.post_type));
            c_nposts.push_back(meta[r.outlet_id]->mean_posts);
            c_reactions.push_back(0.0);
            ++row;
        }
    }
    DataFrame grid;
    grid.add_numeric("reactions", c_reactions);
    grid.add_numeric("n_posts", c_nposts);
    grid.add_factor("quality", c_quality, {"low", "medium", "high", "non_news"});
    grid.add_factor("outlet", c_outlet);
    grid.add_factor("day", c_day);
    grid.add_factor("post_type", c_ptype);
    const auto preds = predict_conditional(fit, grid);

    CsvTable moments;
    moments.header = {"outlet_id", "day", "mu", "sigma", "outlet_mean"};
    size_t i = 0;
    for (const auto& [key, first_row] : cells) {
        (void)first_row;
        const auto& om = outlet_mean.at(c_outlet[i]);
        moments.rows.push_back({c_outlet[i], c_day[i], format_double(preds[i].mu),
                                format_double(preds[i].sigma),
                                format_double(om.first / static_cast<double>(om.second))});
        ++i;
    }
    pipeline_detail::write_csv_artifact(cfg, "moments.csv", moments);
    pipeline_detail::write_manifest(cfg, "fit-preliminary",
                                    {"posts_clean.csv", "outlets_clean.csv"},
                                    {"preliminary_fit.json", "moments.csv"}, timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: build-signal
// ---------------------------------------------------------------------------

inline void stage_build_signal(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    const std::string path = pipeline_detail::artifact_path(cfg, "moments.csv");
    pipeline_detail::verify_artifact_hash(path, cfg.hash());
    const CsvTable t = read_csv_file(path, cfg.delimiter);
    std::vector<OutletDayMoments> moments;
    for (const auto& row : t.rows) {
        OutletDayMoments m;
        m.outlet_id = row[*t.column("outlet_id")];
        m.day = parse_date(row[*t.column("day")]);
        m.mu = std::stod(row[*t.column("mu")]);
        m.sigma = std::stod(row[*t.column("sigma")]);
        m.outlet_mean = std::stod(row[*t.column("outlet_mean")]);
        moments.push_back(std::move(m));
    }
    const auto signal = build_weekly_signal(moments, parse_date(cfg.window_start),
                                            parse_date(cfg.window_end));
    pipeline_detail::write_csv_artifact(cfg, "signal.csv", signal_to_csv(signal));
    pipeline_detail::write_manifest(cfg, "build-signal", {"moments.csv"}, {"signal.csv"},
                                    timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: detect
// ---------------------------------------------------------------------------

inline std::vector<PosteriorProbs> run_sampler_ensemble(const std::vector<WeeklySignal>& signal,
                                                        const SamplerConfig& base, int k,
                                                        std::uint64_t seed, int threads) {
    std::vector<PosteriorProbs> runs(static_cast<size_t>(k));
    // validate once up front so a bad signal throws before any thread starts
    { ChangepointSampler probe(signal, base); }
    const int hw = threads > 0 ? threads
                               : std::max(1u, std::thread::hardware_concurrency());
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(hw));
    for (int w = 0; w < hw; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    const int i = next.fetch_add(1);
                    if (i >= k) break;
                    SamplerConfig cfg = base;
                    cfg.seed = mix_seed(seed, 0xC0DE + static_cast<std::uint64_t>(i));
                    runs[static_cast<size_t>(i)] = run_sampler(signal, cfg);
                }
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return runs;
}

inline void stage_detect(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    const std::string path = pipeline_detail::artifact_path(cfg, "signal.csv");
    pipeline_detail::verify_artifact_hash(path, cfg.hash());
    const auto signal = signal_from_csv(read_csv_file(path, cfg.delimiter));
    if (signal.empty()) throw SchemaError("signal.csv is empty");

    const auto runs = run_sampler_ensemble(signal, cfg.sampler, cfg.consensus.k, cfg.seed,
                                           cfg.detect_threads);
    const auto set = consensus(runs, cfg.consensus, signal.front().week_start);
    write_json_file(pipeline_detail::artifact_path(cfg, "changepoints.json"),
                    changepoints_to_json(set, cfg.hash()));
    CsvTable trace;
    trace.header = {"week_index", "week_start", "averaged_posterior"};
    for (size_t j = 0; j < set.averaged_posterior.size(); ++j)
        trace.rows.push_back({std::to_string(j),
                              format_date(signal[j].week_start),
                              format_double(set.averaged_posterior[j])});
    pipeline_detail::write_csv_artifact(cfg, "posterior_trace.csv", trace);
    pipeline_detail::write_manifest(cfg, "detect", {"signal.csv"},
                                    {"changepoints.json", "posterior_trace.csv"},
                                    timer.elapsed_ms());
}

// ---------------------------------------------------------------------------
// Stage: fit-epochs
// ---------------------------------------------------------------------------

struct EpochFrames {
    DataFrame news, both;
    bool has_nonnews = false;
    int n_epochs = 0;
    Json exclusions;
};

inline EpochFrames build_epoch_frames(const PipelineConfig& cfg, const PostTable& posts,
                                      const OutletDirectory& outlets,
                                      const EpochPartition& epochs) {
    std::map<std::string, const OutletMeta*> meta;
    for (const auto& o : outlets.outlets) meta[o.outlet_id] = &o;

    // cell-floor exclusions: outlet-epoch cells below the configured floor
    std::map<std::pair<std::string, int>, long> cell_n;
    std::vector<int> labels(posts.records.size(), -1);
    for (size_t i = 0; i < posts.records.size(); ++i) {
        const auto& r = posts.records[i];
        if (!r.reactions || !meta.count(r.outlet_id)) continue;
        const int e = epochs.epoch_of(r.published_at.day);
        labels[i] = e;
        ++cell_n[{r.outlet_id, e}];
    }
    Json excluded = Json::array();
    for (const auto& [cell, n] : cell_n) {
        if (n < cfg.cell_floor) {
            excluded.push_back({{"outlet", cell.first}, {"epoch", cell.second}, {"n", n}});
        }
    }
    std::vector<int> news_labels = labels, both_labels = labels;
    for (size_t i = 0; i < posts.records.size(); ++i) {
        const auto& r = posts.records[i];
        if (labels[i] < 0) continue;
        if (cell_n[{r.outlet_id, labels[i]}] < cfg.cell_floor) {
            news_labels[i] = -1;
            both_labels[i] = -1;
            continue;
        }
        if (meta[r.outlet_id]->sector != Sector::news) news_labels[i] = -1;
    }
    EpochFrames out;
    out.exclusions = excluded;
    out.n_epochs = epochs.n_epochs();
    out.news = model_frame_from_posts(posts, outlets, &news_labels);
    for (const auto& o : outlets.outlets)
        out.has_nonnews = out.has_nonnews || o.sector == Sector::non_news;
    if (out.has_nonnews) out.both = model_frame_from_posts(posts, outlets, &both_labels);
    return out;
}

inline void stage_fit_epochs(const PipelineConfig& cfg) {
    pipeline_detail::StageTimer timer;
    auto [posts, outlets] = load_clean_panel(cfg);
    const std::string cp_path = pipeline_detail::artifact_path(cfg, "changepoints.json");
    pipeline_detail::verify_artifact_hash(cp_path, cfg.hash());
    const auto cps = changepoints_from_json(read_json_file(cp_path));
    const auto epochs =
        partition_epochs(cps, parse_date(cfg.window_start), parse_date(cfg.window_end));

    const auto frames = build_epoch_frames(cfg, posts, outlets, epochs);
    FitOptions opt;
    opt.max_outer = cfg.fit_max_outer;

    FormulaSpec news_spec;
    news_spec.mean = parse_formula(cfg.news_mean);
    news_spec.dispersion = parse_formula(cfg.news_disp);
    news_spec.parametrization = parse_parametrization(cfg.epoch_param);
    const GlmmFit news_fit = fit_nb_glmm(frames.news, news_spec, opt);
    write_json_file(
        pipeline_detail::artifact_path(cfg, "fit_news.json"),
        fit_to_json(news_fit,
                    make_context(frames.news, cfg.news_mean, cfg.news_disp,
                                 news_spec.parametrization),
                    cfg.hash()));
    std::vector<std::string> outputs = {"fit_news.json", "cell_exclusions.json"};

    if (frames.has_nonnews) {
        FormulaSpec both_spec;
        both_spec.mean = parse_formula(cfg.both_mean);
        both_spec.dispersion = parse_formula(cfg.both_disp);
        both_spec.parametrization = parse_parametrization(cfg.epoch_param);
        const GlmmFit both_fit = fit_nb_glmm(frames.both, both_spec, opt);
        write_json_file(
            pipeline_detail::artifact_path(cfg, "fit_both.json"),
            fit_to_json(both_fit,
                        make_context(frames.both, cfg.both_mean, cfg.both_disp,
                                     both_spec.parametrization),
                        cfg.hash()));
        outputs.push_back("fit_both.json");
    }

    Json ex;
    ex["format_version"] = kFormatVersion;
    ex["kind"] = "cell_exclusions";
    ex["config_hash"] = cfg.hash();
    ex["floor"] = cfg.cell_floor;
    ex["excluded"] = frames.exclusions;
    ex["n_epochs"] = frames.n_epochs;
    write_json_file(pipeline_detail::artifact_path(cfg, "cell_exclusions.json"), ex);
    pipeline_detail::write_manifest(cfg, "fit-epochs",
                                    {"posts_clean.csv", "changepoints.json"}, outputs,
                                    timer.elapsed_ms());
}

} // namespace engshift
