#include "galbnn/pipeline.hpp"

#include "galbnn/errors.hpp"
#include "galbnn/rng.hpp"
#include "galbnn/store.hpp"

#include <fmt/format.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>

namespace galbnn::pipeline {

namespace {

std::atomic<bool> g_quiet{false};

template <typename... Args>
void log(fmt::format_string<Args...> f, Args&&... args) {
    if (g_quiet) return;
    std::fputs((fmt::format(f, std::forward<Args>(args)...) + "\n").c_str(), stderr);
}

std::string variant_name(Variant v) { return v == Variant::Noisy ? "noisy" : "clean"; }

Variant variant_for(const Dataset& ds, std::optional<Variant> requested) {
    if (requested) {
        if (*requested == Variant::Noisy && !ds.header.has_noisy) throw ContractError("dataset has no noisy variant");
        return *requested;
    }
    return ds.header.has_noisy ? Variant::Noisy : Variant::Clean;
}

std::uint64_t regime_id(Regime r) { return r == Regime::Noiseless ? 1 : 2; }

nlohmann::json histogram_json(const Histogram& h) { return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; }

Histogram histogram_from(const nlohmann::json& j) {
    return {j.at("lo").get<double>(), j.at("hi").get<double>(), j.at("counts").get<std::vector<std::size_t>>()};
}

nlohmann::json stats_json(const ComponentStats& c) {
    return {{"mean", c.mean}, {"std", c.stddev}, {"ks", c.ks}, {"ks_p", c.ks_p}, {"histogram", histogram_json(c.histogram)}};
}

ComponentStats stats_from(const nlohmann::json& j) {
    return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("ks").get<double>(), j.at("ks_p").get<double>(),
            histogram_from(j.at("histogram"))};
}

nlohmann::json calibration_json(const CalibrationReport& c) {
    return {{"z1", c.z1},
            {"z2", c.z2},
            {"c1", stats_json(c.c1)},
            {"c2", stats_json(c.c2)},
            {"excluded", c.excluded},
            {"mean_epist_pred_ratio", c.mean_epist_pred_ratio}};
}

CalibrationReport calibration_from(const nlohmann::json& j) {
    CalibrationReport c;
    c.z1 = j.at("z1").get<std::vector<double>>();
    c.z2 = j.at("z2").get<std::vector<double>>();
    c.c1 = stats_from(j.at("c1"));
    c.c2 = stats_from(j.at("c2"));
    c.excluded = j.at("excluded").get<std::size_t>();
    c.mean_epist_pred_ratio = j.at("mean_epist_pred_ratio").get<double>();
    return c;
}

nlohmann::json sym_json(const Sym2& s) { return {s.xx, s.xy, s.yy}; }
Sym2 sym_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

UncertaintySplit split_of(const PredictionRecord& r) {
    UncertaintySplit s;
    s.mu_bar = r.mu_bar;
    s.sigma_aleat = r.sigma_aleat;
    s.sigma_epist = r.sigma_epist;
    s.sigma_pred = r.sigma_pred;
    s.u_aleat = r.u_aleat;
    s.u_epist = r.u_epist;
    s.u_pred = r.u_pred;
    return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void set_quiet(bool quiet) { g_quiet = quiet; }

std::string_view to_string(Regime r) { return r == Regime::Noiseless ? "noiseless" : "noisy"; }

Regime regime_from_string(std::string_view s) {
    if (s == "noiseless") return Regime::Noiseless;
    if (s == "noisy") return Regime::Noisy;
    throw ConfigError("unknown regime '" + std::string(s) + "' (expected noiseless or noisy)");
}

Variant training_variant(Regime r) { return r == Regime::Noisy ? Variant::Noisy : Variant::Clean; }

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

void write_history_csv(const std::vector<EpochMetrics>& history, const fs::path& path) {
    std::string s = "epoch,noisy_fraction,train_loss,val_loss,val_mean_det,val_rms_z1,val_rms_z2\r\n";
    for (const auto& m : history)
        s += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\r\n", m.epoch, m.noisy_fraction,
                         m.train_loss, m.val_loss, m.val_mean_det, m.val_rms_z1, m.val_rms_z2);
    write_text_file(path, s);
}

std::string simulate(const RunConfig& cfg, const SimulateArgs& a) {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    const auto t0 = std::chrono::steady_clock::now();
    const std::string hash = generate_dataset(cfg.sim, a.category, a.n, a.seed, a.out, config_hash(cfg));
    log("simulate: {} x {} -> {} ({:.1f} s)", a.n, to_string(a.category), a.out.string(), seconds_since(t0));
    return hash;
}

TrainResult train(const RunConfig& cfg, const TrainArgs& a) {
    if (a.stage != 1 && a.stage != 2) throw ConfigError("--stage must be 1 or 2");
    const Dataset data = read_dataset(a.data);
    if (data.header.height != cfg.arch.stamp_size || data.header.width != cfg.arch.stamp_size)
        throw MismatchError("dataset stamp size does not match arch.stamp_size");
    const std::uint64_t seed = a.seed.value_or(derive_seed(cfg.train.seed, {regime_id(a.regime), static_cast<std::uint64_t>(a.stage)}));
    const std::string chash = config_hash(cfg);

    TrainJob job;
    job.seed = seed;
    job.variant = training_variant(a.regime);
    job.checkpoint = fs::path(a.out.string() + ".ckpt");
    job.checkpoint_every = cfg.train.checkpoint_every;
    job.resume = a.resume;
    const std::string tag = fmt::format("{} stage {}", to_string(a.regime), a.stage);
    job.on_epoch = [&](const EpochMetrics& m) {
        log("train [{}] epoch {:3d} noisy {:.2f} train {:.6g} val {:.6g}{}", tag, m.epoch, m.noisy_fraction,
            m.train_loss, m.val_loss, a.stage == 2 ? fmt::format(" det {:.3g} rms_z ({:.3f}, {:.3f})", m.val_mean_det, m.val_rms_z1, m.val_rms_z2) : "");
    };

    const auto t0 = std::chrono::steady_clock::now();
    std::optional<TrainResult> result;
    nlohmann::json extra = {{"config_hash", chash},
                            {"stage", a.stage},
                            {"regime", std::string(to_string(a.regime))},
                            {"seed", seed},
                            {"dataset_hash", file_content_hash(a.data)}};
    if (a.stage == 1) {
        job.epochs = cfg.train.stage1_epochs;
        job.lr = cfg.train.lr;
        job.ramp = a.regime == Regime::Noisy && cfg.train.noise.enabled;
        result.emplace(train_stage1(data, cfg, job));
    } else {
        if (!a.stage1_model) throw ConfigError("stage 2 needs --stage1 <model file>");
        Network<float> s1 = load_network(read_model(*a.stage1_model));
        if (s1.head_kind() != HeadKind::PlainL2) throw MismatchError("--stage1 must be a plain-L2 model");
        job.epochs = cfg.train.stage2_epochs;
        job.lr = cfg.train.stage2_lr;
        extra["stage1_hash"] = file_content_hash(*a.stage1_model);
        result.emplace(train_stage2(s1, data, cfg, job));
    }
    save_checkpoint(*result, extra, a.out);
    if (a.history_csv) write_history_csv(result->history, *a.history_csv);
    log("train [{}] done in {:.1f} s -> {}", tag, seconds_since(t0), a.out.string());
    return std::move(*result);
}

PredictionFile predict(const RunConfig& cfg, const PredictArgs& a) {
    if (a.mc_samples < 2)
        throw ContractError("decomposition requires K >= 2 MC samples, got " + std::to_string(a.mc_samples));
    const ModelFile mf = read_model(a.model);
    const Network<float> net = load_network(mf);
    if (net.head_kind() != HeadKind::MvnNll) throw ContractError("prediction needs an MVN-headed model");
    const Dataset data = read_dataset(a.data);
    const Variant v = variant_for(data, a.variant);
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<std::span<const float>> stamps;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        stamps.push_back(pixels(data.records[i], v));
        seeds.push_back(derive_seed(a.seed, {data.header.base_seed, i}));
    }
    const std::vector<McEnsemble> ens = sample_ensembles(net, stamps, a.mc_samples, seeds);

    PredictionFile pf;
    pf.header = {{"config_hash", config_hash(cfg)},
                 {"model_hash", file_content_hash(a.model)},
                 {"dataset_hash", file_content_hash(a.data)},
                 {"variant", variant_name(v)},
                 {"mc_samples", a.mc_samples},
                 {"seed", a.seed},
                 {"sigma_floor", net.arch().sigma_floor}};
    for (std::size_t i = 0; i < ens.size(); ++i) {
        const UncertaintySplit s = decompose(ens[i]);
        PredictionRecord r;
        r.record_index = i;
        r.base_seed = seeds[i];
        r.k = static_cast<std::uint32_t>(ens[i].k());
        for (const auto& p : ens[i].samples) r.raw.insert(r.raw.end(), p.raw.begin(), p.raw.end());
        r.mu_bar = s.mu_bar;
        r.sigma_aleat = s.sigma_aleat;
        r.sigma_epist = s.sigma_epist;
        r.sigma_pred = s.sigma_pred;
        r.u_aleat = s.u_aleat;
        r.u_epist = s.u_epist;
        r.u_pred = s.u_pred;
        pf.records.push_back(std::move(r));
    }
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    write_predictions(pf, a.out);
    log("predict: {} stamps ({}) x K={} -> {} ({:.1f} s)", ens.size(), variant_name(v), a.mc_samples, a.out.string(),
        seconds_since(t0));
    return pf;
}

RegimeResults evaluate(const RunConfig& cfg, const EvaluateArgs& a) {
    EvalInput in;
    const std::string chash = config_hash(cfg);
    for (const auto& [pred_path, data_path] :
         {std::pair{a.isolated_predictions, a.isolated_data}, std::pair{a.blend_predictions, a.blend_data}}) {
        const PredictionFile pf = read_predictions(pred_path);
        const Dataset data = read_dataset(data_path);
        const std::string dhash = file_content_hash(data_path);
        if (!a.force) {
            if (pf.header.value("dataset_hash", std::string()) != dhash)
                throw MismatchError("predictions " + pred_path.string() + " were not made from " + data_path.string() +
                                    " (use --force to override)");
            if (pf.header.value("config_hash", std::string()) != chash)
                throw MismatchError("predictions " + pred_path.string() +
                                    " were made under a different config (use --force to override)");
        }
        if (pf.records.size() != data.records.size())
            throw MismatchError("prediction and dataset record counts differ for " + pred_path.string());
        for (const auto& r : pf.records) {
            if (r.record_index >= data.records.size()) throw MismatchError("prediction record index out of range");
            const DatasetRecord& d = data.records[r.record_index];
            in.splits.push_back(split_of(r));
            in.targets.push_back(d.label);
            in.is_blend.push_back(d.is_blend ? 1 : 0);
        }
    }
    EvalOptions opt{cfg.eval.grid_points, cfg.eval.histogram_bins, cfg.eval.scatter_points, cfg.eval.seed};
    RegimeResults r = evaluate_regime(std::string(to_string(a.regime)), in, opt);
    if (!a.out.empty()) write_text_file(a.out, regime_to_json(r).dump() + "\n");
    return r;
}

std::vector<fs::path> report(const RunConfig& cfg, const std::vector<fs::path>& regime_files, const fs::path& out_dir) {
    std::vector<RegimeResults> regimes;
    for (const auto& f : regime_files) {
        std::ifstream in(f);
        if (!in) throw IoError("cannot open " + f.string());
        try {
            regimes.push_back(regime_from_json(nlohmann::json::parse(in)));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptionError("regime results " + f.string() + " are malformed: " + e.what(), 0);
        }
    }
    const nlohmann::json meta = {{"config_hash", config_hash(cfg)}, {"preset", cfg.preset}};
    return emit_report(regimes, meta, out_dir, cfg.eval.ellipse_level);
}

nlohmann::json repro_paper(const RunConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const std::string chash = config_hash(cfg);
    const fs::path data_dir = out_dir / "data", model_dir = out_dir / "models", pred_dir = out_dir / "predictions",
                   metric_dir = out_dir / "metrics";
    for (const auto& d : {data_dir, model_dir, pred_dir, metric_dir}) fs::create_directories(d);

    nlohmann::json manifest = {{"command", "repro-paper"}, {"config", to_json(cfg)}, {"config_hash", chash}};
    nlohmann::json timings = nlohmann::json::object();

    const fs::path train_path = data_dir / "train.gsds";
    const fs::path iso_path = data_dir / "eval_isolated.gsds";
    const fs::path blend_path = data_dir / "eval_blend.gsds";
    auto t0 = std::chrono::steady_clock::now();
    manifest["datasets"] = {
        {"train", simulate(cfg, {Category::IsolatedNoisy, static_cast<std::size_t>(cfg.data.n_train), derive_seed(cfg.data.seed, 1), train_path})},
        {"eval_isolated", simulate(cfg, {Category::IsolatedNoisy, static_cast<std::size_t>(cfg.data.n_eval_isolated), derive_seed(cfg.data.seed, 2), iso_path})},
        {"eval_blend", simulate(cfg, {Category::BlendNoisy, static_cast<std::size_t>(cfg.data.n_eval_blend), derive_seed(cfg.data.seed, 3), blend_path})}};
    timings["simulate"] = seconds_since(t0);

    std::vector<fs::path> regime_files;
    for (Regime regime : {Regime::Noiseless, Regime::Noisy}) {
        const std::string name(to_string(regime));
        const fs::path s1 = model_dir / (name + "_stage1.gsmd");
        const fs::path s2 = model_dir / (name + "_stage2.gsmd");
        t0 = std::chrono::steady_clock::now();
        const TrainResult r1 = train(cfg, {1, regime, train_path, s1, std::nullopt, std::nullopt,
                                           metric_dir / (name + "_stage1_history.csv"), std::nullopt});
        timings[name + "_stage1"] = seconds_since(t0);
        t0 = std::chrono::steady_clock::now();
        const TrainResult r2 = train(cfg, {2, regime, train_path, s2, s1, std::nullopt,
                                           metric_dir / (name + "_stage2_history.csv"), std::nullopt});
        timings[name + "_stage2"] = seconds_since(t0);

        t0 = std::chrono::steady_clock::now();
        const fs::path p_iso = pred_dir / (name + "_isolated.gspr");
        const fs::path p_blend = pred_dir / (name + "_blend.gspr");
        const std::uint64_t pseed = derive_seed(cfg.bayes.seed, regime_id(regime));
        predict(cfg, {s2, iso_path, p_iso, training_variant(regime), cfg.bayes.mc_samples, pseed});
        predict(cfg, {s2, blend_path, p_blend, training_variant(regime), cfg.bayes.mc_samples, pseed});
        timings[name + "_predict"] = seconds_since(t0);

        const fs::path rf = metric_dir / (name + "_results.json");
        evaluate(cfg, {regime, p_iso, p_blend, iso_path, blend_path, rf, false});
        regime_files.push_back(rf);
        manifest["models"][name] = {{"stage1", file_content_hash(s1)},
                                    {"stage2", file_content_hash(s2)},
                                    {"stage1_epochs", r1.history.size()},
                                    {"stage2_epochs", r2.history.size()},
                                    {"stage2_initial_mean_det", r2.initial_mean_det},
                                    {"stage2_final_mean_det", r2.history.back().val_mean_det}};
        manifest["predictions"][name] = {{"isolated", file_content_hash(p_iso)}, {"blend", file_content_hash(p_blend)}};
    }
    t0 = std::chrono::steady_clock::now();
    report(cfg, regime_files, out_dir / "report");
    timings["report"] = seconds_since(t0);
    timings["total"] = seconds_since(t_start);
    write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
    write_text_file(out_dir / "timings.json", timings.dump(2) + "\n");
    log("repro-paper: done in {:.1f} s -> {}", timings["total"].get<double>(), out_dir.string());
    return manifest;
}

ProbeResult probe(const RunConfig& cfg, const ProbeArgs& a) {
    const Dataset data = read_dataset(a.data);
    const auto t0 = std::chrono::steady_clock::now();
    ProbeResult r = probe_cotrain(data, cfg, a.max_records);
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) {
        runs.push_back({{"seed", run.seed},
                        {"diverged", run.diverged},
                        {"epoch", run.epoch},
                        {"reason", run.reason},
                        {"final_val_loss", run.final_val_loss}});
        log("probe: seed {:016x} {}", run.seed,
            run.diverged ? fmt::format("diverged at epoch {}: {}", run.epoch, run.reason)
                         : fmt::format("converged, final val NLL {:.4f}", run.final_val_loss));
    }
    const nlohmann::json out = {{"config_hash", config_hash(cfg)},
                                {"dataset_hash", file_content_hash(a.data)},
                                {"records", a.max_records},
                                {"epochs", cfg.train.probe_epochs},
                                {"runs", runs},
                                {"diverged", r.diverged()},
                                {"reproduces_divergence", r.reproduces_divergence()},
                                {"seconds", seconds_since(t0)}};
    if (!a.out.empty()) write_text_file(a.out, out.dump(2) + "\n");
    return r;
}

nlohmann::json regime_to_json(const RegimeResults& r) {
    nlohmann::json rocs = nlohmann::json::array();
    for (const auto& x : r.rocs) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : x.points) pts.push_back({std::isinf(p.threshold) ? nlohmann::json("inf") : nlohmann::json(p.threshold), p.fpr, p.tpr});
        rocs.push_back({{"score", x.score},
                        {"auc", x.auc},
                        {"numerator", x.auc_numerator},
                        {"denominator", x.auc_denominator},
                        {"positives", x.positives},
                        {"negatives", x.negatives},
                        {"points", pts}});
    }
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& c : r.curves) curves.push_back({{"sorted_by", c.sorted_by}, {"p", c.p}, {"mean_error", c.mean_error}});
    nlohmann::json scatter = nlohmann::json::array();
    for (const auto& s : r.scatter)
        scatter.push_back({{"target", {s.target.e1, s.target.e2}},
                           {"mu_bar", {s.split.mu_bar.x, s.split.mu_bar.y}},
                           {"aleat", sym_json(s.split.sigma_aleat)},
                           {"epist", sym_json(s.split.sigma_epist)},
                           {"pred", sym_json(s.split.sigma_pred)},
                           {"is_blend", s.is_blend}});
    return {{"regime", r.regime},
            {"calibration", calibration_json(r.calibration)},
            {"calibration_resampled", calibration_json(r.calibration_resampled)},
            {"rocs", rocs},
            {"curves", curves},
            {"scatter", scatter},
            {"median_u_epist_isolated", r.median_u_epist_isolated},
            {"median_u_epist_blend", r.median_u_epist_blend},
            {"n_isolated", r.n_isolated},
            {"n_blend", r.n_blend},
            {"isolated_fraction", r.isolated_fraction}};
}

RegimeResults regime_from_json(const nlohmann::json& j) {
    RegimeResults r;
    r.regime = j.at("regime").get<std::string>();
    r.calibration = calibration_from(j.at("calibration"));
    r.calibration_resampled = calibration_from(j.at("calibration_resampled"));
    for (const auto& x : j.at("rocs")) {
        RocResult roc;
        roc.score = x.at("score").get<std::string>();
        roc.auc = x.at("auc").get<double>();
        roc.auc_numerator = x.at("numerator").get<std::uint64_t>();
        roc.auc_denominator = x.at("denominator").get<std::uint64_t>();
        roc.positives = x.at("positives").get<std::size_t>();
        roc.negatives = x.at("negatives").get<std::size_t>();
        for (const auto& p : x.at("points")) {
            const double t = p.at(0).is_string() ? std::numeric_limits<double>::infinity() : p.at(0).get<double>();
            roc.points.push_back({t, p.at(1).get<double>(), p.at(2).get<double>()});
        }
        r.rocs.push_back(std::move(roc));
    }
    for (const auto& c : j.at("curves"))
        r.curves.push_back({c.at("sorted_by").get<std::string>(), c.at("p").get<std::vector<double>>(),
                            c.at("mean_error").get<std::vector<double>>()});
    for (const auto& s : j.at("scatter")) {
        ScatterPoint p;
        p.target = {s.at("target").at(0).get<double>(), s.at("target").at(1).get<double>()};
        p.split.mu_bar = {s.at("mu_bar").at(0).get<double>(), s.at("mu_bar").at(1).get<double>()};
        p.split.sigma_aleat = sym_from(s.at("aleat"));
        p.split.sigma_epist = sym_from(s.at("epist"));
        p.split.sigma_pred = sym_from(s.at("pred"));
        p.is_blend = s.at("is_blend").get<bool>();
        r.scatter.push_back(p);
    }
    r.median_u_epist_isolated = j.at("median_u_epist_isolated").get<double>();
    r.median_u_epist_blend = j.at("median_u_epist_blend").get<double>();
    r.n_isolated = j.at("n_isolated").get<std::size_t>();
    r.n_blend = j.at("n_blend").get<std::size_t>();
    r.isolated_fraction = j.at("isolated_fraction").get<double>();
    return r;
}

}  // namespace galbnn::pipeline
