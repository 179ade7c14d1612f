#pragma once

#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "engshift/ar1.hpp"
#include "engshift/changepoint.hpp"
#include "engshift/emm.hpp"
#include "engshift/glmm.hpp"
#include "engshift/ingest.hpp"
#include "engshift/signal.hpp"

namespace engshift {

using Json = nlohmann::json;

constexpr int kFormatVersion = 1;

// FNV-1a over the canonical (sorted-key) JSON dump
inline std::string config_hash(const Json& config) {
    const std::string dump = config.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char c : dump) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void write_json_file(const std::string& path, const Json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    Json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw SchemaError(path + ": invalid JSON: " + e.what());
    }
    return j;
}

namespace ser_detail {

inline Json matrix_to_json(const Eigen::MatrixXd& m) {
    Json rows = Json::array();
    for (long i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (long j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const Json& j) {
    const auto rows = static_cast<long>(j.size());
    if (rows == 0) return {};
    const auto cols = static_cast<long>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (long i = 0; i < rows; ++i)
        for (long c = 0; c < cols; ++c) m(i, c) = j[static_cast<size_t>(i)][static_cast<size_t>(c)].get<double>();
    return m;
}

inline Json vector_to_json(const Eigen::VectorXd& v) {
    Json out = Json::array();
    for (long i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

inline Eigen::VectorXd vector_from_json(const Json& j) {
    Eigen::VectorXd v(static_cast<long>(j.size()));
    for (long i = 0; i < v.size(); ++i) v(i) = j[static_cast<size_t>(i)].get<double>();
    return v;
}

} // namespace ser_detail

// ---------------------------------------------------------------------------
// GLMM fit <-> versioned JSON. The serialized form carries everything the
// inference stage needs (coefficients, covariances, random-effect blocks and
// the design metadata to rebuild EMM grids); conditional modes are included
// for completeness.
// ---------------------------------------------------------------------------

struct FitSerializationContext {
    std::string mean_formula, disp_formula;
    Parametrization parametrization = Parametrization::nb1_linear;
    // factor levels of the model frame, for design reconstruction
    std::map<std::string, std::vector<std::string>> factor_levels;
    std::vector<std::string> numeric_columns;
    std::vector<std::string> observed_quality;
};

inline Json fit_to_json(const GlmmFit& fit, const FitSerializationContext& ctx,
                        const std::string& hash) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["config_hash"] = hash;
    j["kind"] = "nb_glmm_fit";
    j["parametrization"] = to_string(ctx.parametrization);
    j["mean_formula"] = ctx.mean_formula;
    j["disp_formula"] = ctx.disp_formula;
    j["factor_levels"] = ctx.factor_levels;
    j["numeric_columns"] = ctx.numeric_columns;
    j["observed_quality"] = ctx.observed_quality;
    j["beta"] = ser_detail::vector_to_json(fit.beta);
    j["beta_names"] = fit.beta_names;
    j["vcov_beta"] = ser_detail::matrix_to_json(fit.vcov_beta);
    j["disp_beta"] = ser_detail::vector_to_json(fit.disp_beta);
    j["disp_names"] = fit.disp_names;
    j["vcov_disp"] = ser_detail::matrix_to_json(fit.vcov_disp);
    j["loglik"] = fit.loglik;
    j["converged"] = fit.converged;
    j["boundary"] = fit.boundary;
    j["vcov_ok"] = fit.vcov_ok;
    j["grad_norm"] = fit.grad_norm;
    j["iterations"] = fit.iterations;
    j["n_obs"] = fit.n_obs;
    j["dropped_mean"] = fit.dropped_mean;
    j["dropped_disp"] = fit.dropped_disp;
    auto blocks = [&](const std::vector<ReBlockFit>& res) {
        Json arr = Json::array();
        for (const auto& rb : res) {
            Json b;
            b["term"] = rb.term_name;
            b["grouping"] = rb.grouping;
            b["dim"] = rb.dim;
            b["coef_names"] = rb.coef_names;
            b["cov"] = ser_detail::matrix_to_json(rb.cov);
            b["boundary"] = rb.boundary;
            b["level_names"] = rb.level_names;
            b["modes"] = ser_detail::matrix_to_json(rb.modes);
            arr.push_back(std::move(b));
        }
        return arr;
    };
    j["re_mean"] = blocks(fit.re_mean);
    j["re_disp"] = blocks(fit.re_disp);
    return j;
}

// Rebuilds a fit usable for EMM grids and contrasts. The reconstructed
// design reproduces fixed rows and random-term design rows; conditional
// modes are restored, but level registries only cover serialized levels.
inline GlmmFit fit_from_json(const Json& j) {
    if (j.value("format_version", -1) != kFormatVersion)
        throw SchemaError("fit JSON: unsupported format version");
    if (j.value("kind", "") != "nb_glmm_fit") throw SchemaError("fit JSON: wrong artifact kind");
    GlmmFit fit;
    FormulaSpec spec;
    spec.mean = parse_formula(j.at("mean_formula").get<std::string>());
    spec.dispersion = parse_formula(j.at("disp_formula").get<std::string>());
    spec.parametrization = parse_parametrization(j.at("parametrization").get<std::string>());
    fit.family = spec.parametrization == Parametrization::nb2_quadratic
                     ? NbParam::nb2_quadratic
                     : NbParam::nb1_linear;

    // dummy frame with the stored levels to rebuild the designs
    DataFrame df;
    std::map<std::string, std::vector<std::string>> levels =
        j.at("factor_levels").get<std::map<std::string, std::vector<std::string>>>();
    size_t nrows = 1;
    for (const auto& [col, lv] : levels) nrows = std::max(nrows, lv.size());
    for (const auto& [col, lv] : levels) {
        std::vector<std::string> vals(nrows, lv.empty() ? "" : lv[0]);
        for (size_t i = 0; i < lv.size(); ++i) vals[i] = lv[i];
        df.add_factor(col, vals, lv);
    }
    for (const auto& col : j.at("numeric_columns").get<std::vector<std::string>>())
        df.add_numeric(col, std::vector<double>(nrows, 1.0));

    auto info = std::make_shared<GlmmDesignInfo>();
    info->family = fit.family;
    info->mean_fixed = FixedDesign(spec.mean, df);
    info->disp_fixed = FixedDesign(spec.dispersion, df);
    info->mean_fixed.restrict_to(j.at("beta_names").get<std::vector<std::string>>());
    info->disp_fixed.restrict_to(j.at("disp_names").get<std::vector<std::string>>());
    for (const auto& rt : spec.mean.random) info->mean_random.emplace_back(rt, df);
    for (const auto& rt : spec.dispersion.random) info->disp_random.emplace_back(rt, df);
    fit.design = info;

    fit.beta = ser_detail::vector_from_json(j.at("beta"));
    fit.beta_names = j.at("beta_names").get<std::vector<std::string>>();
    fit.vcov_beta = ser_detail::matrix_from_json(j.at("vcov_beta"));
    fit.disp_beta = ser_detail::vector_from_json(j.at("disp_beta"));
    fit.disp_names = j.at("disp_names").get<std::vector<std::string>>();
    fit.vcov_disp = ser_detail::matrix_from_json(j.at("vcov_disp"));
    fit.loglik = j.at("loglik").get<double>();
    fit.converged = j.at("converged").get<bool>();
    fit.boundary = j.at("boundary").get<bool>();
    fit.vcov_ok = j.at("vcov_ok").get<bool>();
    fit.grad_norm = j.at("grad_norm").get<double>();
    fit.iterations = j.at("iterations").get<int>();
    fit.n_obs = j.at("n_obs").get<long>();
    fit.dropped_mean = j.at("dropped_mean").get<std::vector<std::string>>();
    fit.dropped_disp = j.at("dropped_disp").get<std::vector<std::string>>();
    auto blocks = [&](const Json& arr) {
        std::vector<ReBlockFit> out;
        for (const auto& b : arr) {
            ReBlockFit rb;
            rb.term_name = b.at("term").get<std::string>();
            rb.grouping = b.at("grouping").get<std::string>();
            rb.dim = b.at("dim").get<int>();
            rb.coef_names = b.at("coef_names").get<std::vector<std::string>>();
            rb.cov = ser_detail::matrix_from_json(b.at("cov"));
            rb.boundary = b.at("boundary").get<bool>();
            rb.level_names = b.at("level_names").get<std::vector<std::string>>();
            rb.modes = ser_detail::matrix_from_json(b.at("modes"));
            out.push_back(std::move(rb));
        }
        return out;
    };
    fit.re_mean = blocks(j.at("re_mean"));
    fit.re_disp = blocks(j.at("re_disp"));
    return fit;
}

// ---------------------------------------------------------------------------
// Changepoints
// ---------------------------------------------------------------------------

inline Json changepoints_to_json(const ChangepointSet& set, const std::string& hash) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["config_hash"] = hash;
    j["kind"] = "changepoints";
    Json pts = Json::array();
    int index = 1;
    for (const auto& cp : set.points) {
        Json p;
        p["index"] = index++;
        p["week_index"] = cp.week_index;
        p["timestamp"] = format_date(cp.date);
        p["lower_bound"] = format_date(cp.lower_date);
        p["upper_bound"] = format_date(cp.upper_date);
        p["lower_week"] = cp.lower_week;
        p["upper_week"] = cp.upper_week;
        p["height"] = cp.height;
        pts.push_back(std::move(p));
    }
    j["points"] = pts;
    return j;
}

inline ChangepointSet changepoints_from_json(const Json& j) {
    if (j.value("kind", "") != "changepoints")
        throw SchemaError("changepoints JSON: wrong artifact kind");
    ChangepointSet out;
    for (const auto& p : j.at("points")) {
        Changepoint cp;
        cp.week_index = p.at("week_index").get<long>();
        cp.date = parse_date(p.at("timestamp").get<std::string>());
        cp.lower_week = p.at("lower_week").get<long>();
        cp.upper_week = p.at("upper_week").get<long>();
        cp.lower_date = parse_date(p.at("lower_bound").get<std::string>());
        cp.upper_date = parse_date(p.at("upper_bound").get<std::string>());
        cp.height = p.at("height").get<double>();
        out.points.push_back(cp);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inference tables
// ---------------------------------------------------------------------------

inline Json emm_table_to_json(const EmmTable& table, const std::string& hash) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["config_hash"] = hash;
    j["kind"] = "emm_table";
    Json cells = Json::array();
    for (const auto& c : table.cells) {
        Json e;
        e["epoch"] = c.epoch;
        e["group"] = c.group;
        e["mean"] = c.emm;
        e["ci_low"] = c.ci_low;
        e["ci_high"] = c.ci_high;
        e["log_emm"] = c.log_emm;
        e["se_log"] = c.se_log;
        e["re_correction"] = c.re_correction;
        cells.push_back(std::move(e));
    }
    j["cells"] = cells;
    return j;
}

inline Json contrasts_to_json(const ContrastResult& r, const std::string& hash) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["config_hash"] = hash;
    j["kind"] = "contrasts";
    j["contrast_kind"] = to_string(r.kind);
    Json rows = Json::array();
    for (const auto& e : r.estimates) {
        Json x;
        x["label"] = e.label;
        x["epoch"] = e.epoch;
        x["ratio"] = e.ratio;
        x["ci_low"] = e.ci_low;
        x["ci_high"] = e.ci_high;
        x["z"] = e.z;
        x["p_raw"] = e.p_raw;
        x["p_adjusted"] = e.p_adjusted;
        rows.push_back(std::move(x));
    }
    j["estimates"] = rows;
    return j;
}

inline CsvTable contrasts_to_csv(const ContrastResult& r) {
    CsvTable t;
    t.header = {"label", "epoch", "ratio", "ci_low", "ci_high", "z", "p_raw", "p_adjusted"};
    for (const auto& e : r.estimates)
        t.rows.push_back({e.label, std::to_string(e.epoch), format_double(e.ratio),
                          format_double(e.ci_low), format_double(e.ci_high), format_double(e.z),
                          format_double(e.p_raw), format_double(e.p_adjusted)});
    return t;
}

inline Json cleaning_report_to_json(const CleaningReport& removed, std::int64_t dedup_removed,
                                    std::int64_t rejects, const ImputationReport& imput,
                                    const std::string& hash) {
    Json j;
    j["format_version"] = kFormatVersion;
    j["config_hash"] = hash;
    j["kind"] = "cleaning_report";
    Json reasons;
    for (const auto& [k, v] : removed) reasons[k] = v;
    reasons["duplicate"] = dedup_removed;
    reasons["parse_reject"] = rejects;
    j["removed"] = reasons;
    j["imputed"] = imput.imputed;
    j["unimputable"] = imput.unimputable;
    return j;
}

} // namespace engshift
