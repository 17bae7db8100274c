#include "galbnn/config.hpp"
#include "galbnn/errors.hpp"
#include "galbnn/parallel.hpp"
#include "galbnn/pipeline.hpp"
#include "galbnn/store.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
namespace gp = galbnn::pipeline;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::string preset;
    bool quiet = false;
};

galbnn::RunConfig resolve(const Common& c) {
    galbnn::RunConfig cfg;
    if (!c.config.empty()) {
        cfg = galbnn::load_run_config(c.config);
        if (!c.preset.empty() && c.preset != cfg.preset)
            throw galbnn::ConfigError("--preset " + c.preset + " conflicts with preset '" + cfg.preset + "' in " + c.config);
    } else {
        cfg = galbnn::preset(c.preset.empty() ? "desk" : c.preset);
    }
    cfg.validate();
    gp::set_quiet(c.quiet);
    return cfg;
}

void log_override(const char* what, std::uint64_t value) {
    std::fprintf(stderr, "seed override: %s = %llu\n", what, static_cast<unsigned long long>(value));
}

void write_manifest(const fs::path& out, const std::string& command, const galbnn::RunConfig& cfg, json extra) {
    extra["command"] = command;
    extra["config_hash"] = galbnn::config_hash(cfg);
    extra["preset"] = cfg.preset;
    if (fs::exists(out) && fs::is_regular_file(out)) extra["output_hash"] = galbnn::file_content_hash(out);
    gp::write_text_file(fs::path(out.string() + ".manifest.json"), extra.dump(2) + "\n");
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Run configuration file (JSON)");
    sub->add_option("--preset", c.preset, "Named preset: desk, desk-full, faithful, smoke");
    sub->add_flag("--quiet,-q", c.quiet, "Suppress progress output");
}

int fail(galbnn::ErrorCategory cat, const std::string& message) {
    std::cerr << json{{"error", std::string(galbnn::to_string(cat))}, {"message", message}}.dump() << std::endl;
    return galbnn::exit_code(cat);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian CNN galaxy ellipticity pipeline"};
    app.require_subcommand(1);
    Common common;

    std::string category, out, data, model, regime = "noisy", variant, stage1, resume, history;
    std::size_t n = 100;
    std::uint64_t seed = 0;
    int stage = 1;
    int mc_samples = 0;
    bool force = false;
    std::string iso_pred, blend_pred, iso_data, blend_data;
    std::vector<std::string> results;
    std::size_t max_records = 2000;

    auto* sim = app.add_subcommand("simulate", "Generate a dataset file");
    add_common(sim, common);
    sim->add_option("--category", category, "isolated-clean, isolated-noisy, blend-clean, blend-noisy")->required();
    sim->add_option("--n", n, "Number of records")->required()->check(CLI::PositiveNumber);
    sim->add_option("--seed", seed, "Dataset base seed")->required();
    sim->add_option("--out", out, "Output dataset path")->required();

    auto* tr = app.add_subcommand("train", "Train stage 1 (plain L2) or stage 2 (MVN NLL)");
    add_common(tr, common);
    tr->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    tr->add_option("--regime", regime, "noiseless or noisy")->capture_default_str();
    tr->add_option("--data", data, "Training dataset")->required();
    tr->add_option("--out", out, "Output model path")->required();
    tr->add_option("--stage1", stage1, "Stage-1 model (stage 2 only)");
    tr->add_option("--resume", resume, "Resume from checkpoint");
    tr->add_option("--history", history, "Write per-epoch metrics CSV");
    auto* tr_seed = tr->add_option("--seed", seed, "Override the training seed");

    auto* pr = app.add_subcommand("predict", "MC-dropout predictions with uncertainty split");
    add_common(pr, common);
    pr->add_option("--model", model, "Stage-2 model")->required();
    pr->add_option("--data", data, "Dataset")->required();
    pr->add_option("--out", out, "Output predictions path")->required();
    pr->add_option("--variant", variant, "clean or noisy (default: noisy if present)");
    auto* pr_k = pr->add_option("--mc-samples", mc_samples, "Number of MC dropout samples K");
    auto* pr_seed = pr->add_option("--seed", seed, "Override the MC seed");

    auto* ev = app.add_subcommand("evaluate", "Calibration, ROC and error curves for one regime");
    add_common(ev, common);
    ev->add_option("--regime", regime, "noiseless or noisy")->capture_default_str();
    ev->add_option("--isolated-predictions", iso_pred)->required();
    ev->add_option("--blend-predictions", blend_pred)->required();
    ev->add_option("--isolated-data", iso_data)->required();
    ev->add_option("--blend-data", blend_data)->required();
    ev->add_option("--out", out, "Regime results JSON")->required();
    ev->add_flag("--force", force, "Skip dataset/config hash checks");

    auto* rp = app.add_subcommand("report", "Write CSV/SVG/JSON artifacts from regime results");
    add_common(rp, common);
    rp->add_option("--results", results, "Regime results JSON files")->required();
    rp->add_option("--out", out, "Report directory")->required();

    auto* rr = app.add_subcommand("repro-paper", "Full grid: two regimes x isolated/blended evaluation");
    add_common(rr, common);
    rr->add_option("--out", out, "Run directory")->required();

    auto* pc = app.add_subcommand("probe-cotrain", "Co-train mean and covariance from scratch over several seeds");
    add_common(pc, common);
    pc->add_option("--data", data, "Noisy training dataset")->required();
    pc->add_option("--out", out, "Probe result JSON")->required();
    pc->add_option("--max-records", max_records, "Records used")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(galbnn::ErrorCategory::Config, e.what());
    }

    try {
        const galbnn::RunConfig cfg = resolve(common);
        if (*sim) {
            const auto cat = galbnn::category_from_string(category);
            const std::string hash = gp::simulate(cfg, {cat, n, seed, out});
            write_manifest(out, "simulate", cfg, {{"category", category}, {"n", n}, {"seed", seed}});
            std::cout << hash << "\n";
        } else if (*tr) {
            gp::TrainArgs a;
            a.stage = stage;
            a.regime = gp::regime_from_string(regime);
            a.data = data;
            a.out = out;
            if (!stage1.empty()) a.stage1_model = fs::path(stage1);
            if (!resume.empty()) a.resume = fs::path(resume);
            if (!history.empty()) a.history_csv = fs::path(history);
            if (*tr_seed) {
                a.seed = seed;
                log_override("train.seed", seed);
            }
            const auto r = gp::train(cfg, a);
            json m = {{"stage", stage}, {"regime", regime}, {"epochs", r.history.size()}, {"data", data}};
            if (*tr_seed) m["seed_override"] = seed;
            write_manifest(out, "train", cfg, m);
        } else if (*pr) {
            gp::PredictArgs a;
            a.model = model;
            a.data = data;
            a.out = out;
            if (!variant.empty()) {
                if (variant == "clean") a.variant = galbnn::Variant::Clean;
                else if (variant == "noisy") a.variant = galbnn::Variant::Noisy;
                else throw galbnn::ConfigError("--variant must be clean or noisy");
            }
            a.mc_samples = *pr_k ? mc_samples : cfg.bayes.mc_samples;
            a.seed = cfg.bayes.seed;
            if (*pr_seed) {
                a.seed = seed;
                log_override("bayes.seed", seed);
            }
            gp::predict(cfg, a);
            json m = {{"model", model}, {"data", data}, {"mc_samples", a.mc_samples}, {"seed", a.seed}};
            if (*pr_seed) m["seed_override"] = seed;
            write_manifest(out, "predict", cfg, m);
        } else if (*ev) {
            gp::evaluate(cfg, {gp::regime_from_string(regime), iso_pred, blend_pred, iso_data, blend_data, out, force});
            write_manifest(out, "evaluate", cfg, {{"regime", regime}, {"force", force}});
        } else if (*rp) {
            std::vector<fs::path> files(results.begin(), results.end());
            const auto written = gp::report(cfg, files, out);
            json list = json::array();
            for (const auto& w : written) list.push_back(w.lexically_relative(out).generic_string());
            gp::write_text_file(fs::path(out) / "manifest.json",
                                json{{"command", "report"}, {"config_hash", galbnn::config_hash(cfg)}, {"results", results}, {"artifacts", list}}.dump(2) + "\n");
        } else if (*rr) {
            gp::repro_paper(cfg, out);
        } else if (*pc) {
            const auto r = gp::probe(cfg, {data, out, max_records});
            write_manifest(out, "probe-cotrain", cfg, {{"data", data}, {"max_records", max_records}, {"reproduces_divergence", r.reproduces_divergence()}});
        }
    } catch (const galbnn::Error& e) {
        return fail(e.category(), e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(galbnn::ErrorCategory::Io, e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail(galbnn::ErrorCategory::Config, e.what());
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << std::endl;
        return 1;
    }
    return 0;
}
