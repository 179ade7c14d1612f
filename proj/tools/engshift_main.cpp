// engshift: pipeline for detecting and quantifying regime changes in
// engagement-count panels. Stages communicate through versioned artifacts in
// the output directory; every artifact embeds the config hash and downstream
// stages refuse mismatched inputs.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <string>

#include "engshift/report.hpp"

using namespace engshift;

namespace {

int exit_code_for(const std::string& cls) {
    if (cls == "config") return 2;
    if (cls == "dependency") return 3;
    if (cls == "schema") return 4;
    if (cls == "domain") return 5;
    if (cls == "insufficient_data") return 6;
    if (cls == "singular") return 7;
    if (cls == "convergence") return 8;
    if (cls == "io") return 9;
    return 10;
}

void emit_error(const std::string& cls, const std::string& msg) {
    Json j;
    j["error_class"] = cls;
    j["message"] = msg;
    std::cerr << j.dump() << "\n";
}

struct CliOverrides {
    std::string config_path;
    std::string output_dir;
    std::string input_posts, input_outlets;
    long seed = -1;
    int consensus_k = -1;
    int threads = -1;
};

PipelineConfig load_config(const CliOverrides& o) {
    Json j = Json::object();
    if (!o.config_path.empty()) j = read_json_file(o.config_path);
    PipelineConfig cfg = PipelineConfig::from_json(j);
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    if (!o.input_posts.empty()) cfg.input_posts = o.input_posts;
    if (!o.input_outlets.empty()) cfg.input_outlets = o.input_outlets;
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    if (o.consensus_k > 0) cfg.consensus.k = o.consensus_k;
    if (o.threads >= 0) cfg.detect_threads = o.threads;
    if (const char* env = std::getenv("ENGSHIFT_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (...) {
            throw ConfigError("ENGSHIFT_SEED is not a valid integer: " + std::string(env));
        }
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "engshift: regime-change detection and inference for engagement-count panels"};
    app.require_subcommand(1);

    CliOverrides o;
    app.add_option("--config,-c", o.config_path, "pipeline configuration (JSON)");
    app.add_option("--output-dir,-o", o.output_dir, "override the output directory");
    app.add_option("--posts", o.input_posts, "override the input post table");
    app.add_option("--outlets", o.input_outlets, "override the outlet metadata table");
    app.add_option("--seed", o.seed, "override the pipeline seed");
    app.add_option("--runs", o.consensus_k, "override the number of sampler runs (detect)");
    app.add_option("--threads", o.threads, "worker threads for detect (0 = all cores)");

    const std::vector<std::pair<std::string, std::string>> stages = {
        {"simulate", "generate a synthetic panel with known ground truth"},
        {"ingest", "parse, clean, deduplicate and impute the raw post table"},
        {"fit-preliminary", "fit the preliminary mixed model and emit outlet-day moments"},
        {"build-signal", "aggregate moments into the two-dimensional weekly signal"},
        {"detect", "run the changepoint sampler ensemble and the consensus step"},
        {"fit-epochs", "fit the epoch-structured mixed models"},
        {"infer", "marginal means, contrasts, causal ratios, trend tests"},
        {"report", "render report tables and the weekly correlation analysis"},
        {"run-all", "run every stage in order"}};
    for (const auto& [name, desc] : stages) app.add_subcommand(name, desc);

    CLI11_PARSE(app, argc, argv);
    const std::string stage = app.get_subcommands().front()->get_name();

    try {
        const PipelineConfig cfg = load_config(o);
        if (stage == "simulate") stage_simulate(cfg);
        else if (stage == "ingest") stage_ingest(cfg);
        else if (stage == "fit-preliminary") stage_fit_preliminary(cfg);
        else if (stage == "build-signal") stage_build_signal(cfg);
        else if (stage == "detect") stage_detect(cfg);
        else if (stage == "fit-epochs") stage_fit_epochs(cfg);
        else if (stage == "infer") stage_infer(cfg);
        else if (stage == "report") stage_report(cfg);
        else if (stage == "run-all") {
            if (!cfg.simulate.empty()) stage_simulate(cfg);
            stage_ingest(cfg);
            stage_fit_preliminary(cfg);
            stage_build_signal(cfg);
            stage_detect(cfg);
            stage_fit_epochs(cfg);
            stage_infer(cfg);
            stage_report(cfg);
        }
    } catch (const Error& e) {
        emit_error(e.error_class(), e.what());
        return exit_code_for(e.error_class());
    } catch (const std::exception& e) {
        emit_error("internal", e.what());
        return 10;
    }
    return 0;
}
