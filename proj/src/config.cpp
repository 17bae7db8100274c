#include "galbnn/config.hpp"

#include "galbnn/errors.hpp"
#include "galbnn/store.hpp"

#include <fstream>
#include <set>

namespace galbnn {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects any it did not consume.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        try {
            out = it->get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(name_ + "." + key + ": " + e.what());
        }
    }

    const json* child(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

void apply(const json& j, SimConfig& c) {
    Section s(j, "sim");
    s.get("stamp_size", c.stamp_size);
    s.get("r_min", c.r_min);
    s.get("r_max", c.r_max);
    s.get("q_min", c.q_min);
    s.get("flux_min", c.flux_min);
    s.get("flux_max", c.flux_max);
    s.get("sky_level", c.sky_level);
    s.get("blend_r_max", c.blend_r_max);
    s.get("min_separation", c.min_separation);
    s.get("max_companions", c.max_companions);
    s.get("exponential_fraction", c.exponential_fraction);
    s.finish();
}

void apply(const json& j, ArchitectureConfig& c) {
    Section s(j, "arch");
    s.get("stamp_size", c.stamp_size);
    s.get("crop_size", c.crop_size);
    if (const json* conv = s.child("conv")) {
        if (!conv->is_array()) throw ConfigError("arch.conv must be an array");
        c.conv.clear();
        for (const auto& e : *conv) {
            ConvSpec spec;
            Section cs(e, "arch.conv[]");
            cs.get("channels", spec.channels);
            cs.get("kernel", spec.kernel);
            cs.get("pool", spec.pool);
            cs.finish();
            c.conv.push_back(spec);
        }
    }
    s.get("fc_width_plain", c.fc_width_plain);
    s.get("fc_width_mvn", c.fc_width_mvn);
    s.get("maxout_pieces", c.maxout_pieces);
    s.get("dropout_rate", c.dropout_rate);
    s.get("sigma_floor", c.sigma_floor);
    s.finish();
}

void apply(const json& j, TrainConfig& c) {
    Section s(j, "train");
    s.get("stage1_epochs", c.stage1_epochs);
    s.get("stage2_epochs", c.stage2_epochs);
    s.get("batch_size", c.batch_size);
    s.get("lr", c.lr);
    s.get("stage2_lr", c.stage2_lr);
    s.get("beta1", c.beta1);
    s.get("beta2", c.beta2);
    s.get("eps", c.eps);
    if (const json* n = s.child("noise")) {
        Section ns(*n, "train.noise");
        ns.get("enabled", c.noise.enabled);
        ns.get("step_fraction", c.noise.step_fraction);
        ns.get("step_epochs", c.noise.step_epochs);
        ns.get("total_epochs", c.noise.total_epochs);
        ns.finish();
    }
    s.get("seed", c.seed);
    s.get("validation_fraction", c.validation_fraction);
    s.get("checkpoint_every", c.checkpoint_every);
    s.get("divergence_factor", c.divergence_factor);
    s.get("divergence_ref_epoch", c.divergence_ref_epoch);
    s.get("probe_epochs", c.probe_epochs);
    s.get("probe_seeds", c.probe_seeds);
    s.finish();
}

void apply(const json& j, BayesConfig& c) {
    Section s(j, "bayes");
    s.get("mc_samples", c.mc_samples);
    s.get("seed", c.seed);
    s.finish();
}

void apply(const json& j, EvalConfig& c) {
    Section s(j, "eval");
    s.get("ellipse_level", c.ellipse_level);
    s.get("grid_points", c.grid_points);
    s.get("histogram_bins", c.histogram_bins);
    s.get("isolated_fraction", c.isolated_fraction);
    s.get("scatter_points", c.scatter_points);
    s.get("seed", c.seed);
    s.finish();
}

void apply(const json& j, DataConfig& c) {
    Section s(j, "data");
    s.get("n_train", c.n_train);
    s.get("n_eval_isolated", c.n_eval_isolated);
    s.get("n_eval_blend", c.n_eval_blend);
    s.get("seed", c.seed);
    s.finish();
}

}  // namespace

std::string_view to_string(HeadKind h) { return h == HeadKind::PlainL2 ? "plain-l2" : "mvn-nll"; }

int ArchitectureConfig::trunk_side() const {
    int side = crop_size;
    for (const auto& c : conv)
        if (c.pool) side /= 2;
    return side;
}

int ArchitectureConfig::view_features() const {
    return conv.empty() ? crop_size * crop_size : trunk_side() * trunk_side() * conv.back().channels;
}

int ArchitectureConfig::concat_features() const { return 4 * view_features(); }

void ArchitectureConfig::validate() const {
    if (crop_size < 1 || crop_size > stamp_size) throw ConfigError("arch.crop_size must lie in [1, stamp_size]");
    if ((stamp_size - crop_size) % 2 != 0) throw ConfigError("arch.stamp_size - arch.crop_size must be even");
    if (conv.empty()) throw ConfigError("arch.conv must list at least one block");
    for (const auto& c : conv) {
        if (c.channels < 1) throw ConfigError("arch.conv channels must be >= 1");
        if (c.kernel < 1 || c.kernel % 2 == 0) throw ConfigError("arch.conv kernels must be odd and >= 1");
    }
    if (trunk_side() < 1) throw ConfigError("arch.conv pools shrink the crop below one pixel");
    if (fc_width_plain < 1 || fc_width_mvn < 1) throw ConfigError("arch fc widths must be >= 1");
    if (maxout_pieces < 1) throw ConfigError("arch.maxout_pieces must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("arch.dropout_rate must lie in [0, 1)");
    if (!(sigma_floor > 0.0)) throw ConfigError("arch.sigma_floor must be > 0");
}

void TrainConfig::validate() const {
    if (stage1_epochs < 1 || stage2_epochs < 1) throw ConfigError("train epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batch normalization)");
    if (!(lr > 0.0 && stage2_lr > 0.0)) throw ConfigError("train learning rates must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (noise.step_epochs < 1 || noise.total_epochs < 0) throw ConfigError("train.noise epochs must be positive");
    if (!(noise.step_fraction >= 0.0) ||
        noise.step_fraction * (noise.total_epochs / noise.step_epochs) > 1.0 + 1e-12)
        throw ConfigError("train.noise: step_fraction * (total_epochs / step_epochs) must be <= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw ConfigError("train.validation_fraction must lie in (0, 1)");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    if (!(divergence_factor > 1.0)) throw ConfigError("train.divergence_factor must be > 1");
    if (divergence_ref_epoch < 0) throw ConfigError("train.divergence_ref_epoch must be >= 0");
    if (probe_epochs < 1 || probe_seeds < 1) throw ConfigError("train probe settings must be >= 1");
}

void RunConfig::validate() const {
    sim.validate();
    arch.validate();
    train.validate();
    if (arch.stamp_size != sim.stamp_size) throw ConfigError("arch.stamp_size must equal sim.stamp_size");
    if (bayes.mc_samples < 2) throw ContractError("decomposition requires K >= 2 (bayes.mc_samples)");
    if (!(eval.ellipse_level > 0.0 && eval.ellipse_level < 1.0)) throw ConfigError("eval.ellipse_level must lie in (0, 1)");
    if (eval.grid_points < 1 || eval.histogram_bins < 1) throw ConfigError("eval grid and bins must be >= 1");
    if (!(eval.isolated_fraction > 0.0 && eval.isolated_fraction < 1.0))
        throw ConfigError("eval.isolated_fraction must lie in (0, 1)");
    if (data.n_train < 10 || data.n_eval_isolated < 1 || data.n_eval_blend < 1)
        throw ConfigError("data sizes too small");
}

json to_json(const SimConfig& c) {
    return {{"stamp_size", c.stamp_size},   {"r_min", c.r_min},
            {"r_max", c.r_max},             {"q_min", c.q_min},
            {"flux_min", c.flux_min},       {"flux_max", c.flux_max},
            {"sky_level", c.sky_level},     {"blend_r_max", c.blend_r_max},
            {"min_separation", c.min_separation}, {"max_companions", c.max_companions},
            {"exponential_fraction", c.exponential_fraction}};
}

json to_json(const ArchitectureConfig& c) {
    json conv = json::array();
    for (const auto& s : c.conv) conv.push_back({{"channels", s.channels}, {"kernel", s.kernel}, {"pool", s.pool}});
    return {{"stamp_size", c.stamp_size},         {"crop_size", c.crop_size},
            {"conv", conv},                       {"fc_width_plain", c.fc_width_plain},
            {"fc_width_mvn", c.fc_width_mvn},     {"maxout_pieces", c.maxout_pieces},
            {"dropout_rate", c.dropout_rate},     {"sigma_floor", c.sigma_floor}};
}

json to_json(const TrainConfig& c) {
    return {{"stage1_epochs", c.stage1_epochs},
            {"stage2_epochs", c.stage2_epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"stage2_lr", c.stage2_lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"noise",
             {{"enabled", c.noise.enabled},
              {"step_fraction", c.noise.step_fraction},
              {"step_epochs", c.noise.step_epochs},
              {"total_epochs", c.noise.total_epochs}}},
            {"seed", c.seed},
            {"validation_fraction", c.validation_fraction},
            {"checkpoint_every", c.checkpoint_every},
            {"divergence_factor", c.divergence_factor},
            {"divergence_ref_epoch", c.divergence_ref_epoch},
            {"probe_epochs", c.probe_epochs},
            {"probe_seeds", c.probe_seeds}};
}

json to_json(const RunConfig& c) {
    return {{"preset", c.preset},
            {"sim", to_json(c.sim)},
            {"arch", to_json(c.arch)},
            {"train", to_json(c.train)},
            {"bayes", {{"mc_samples", c.bayes.mc_samples}, {"seed", c.bayes.seed}}},
            {"eval",
             {{"ellipse_level", c.eval.ellipse_level},
              {"grid_points", c.eval.grid_points},
              {"histogram_bins", c.eval.histogram_bins},
              {"isolated_fraction", c.eval.isolated_fraction},
              {"scatter_points", c.eval.scatter_points},
              {"seed", c.eval.seed}}},
            {"data",
             {{"n_train", c.data.n_train},
              {"n_eval_isolated", c.data.n_eval_isolated},
              {"n_eval_blend", c.data.n_eval_blend},
              {"seed", c.data.seed}}}};
}

SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    apply(j, c);
    return c;
}

ArchitectureConfig arch_config_from_json(const json& j) {
    ArchitectureConfig c;
    apply(j, c);
    return c;
}

RunConfig preset(std::string_view name) {
    RunConfig c;
    c.preset = std::string(name);
    if (name == "desk-full") return c;
    if (name == "desk") {
        c.train.stage1_epochs = 20;
        c.train.stage2_epochs = 10;
        c.train.noise = {true, 0.1, 1, 10};
        c.train.divergence_ref_epoch = 2;
        c.train.checkpoint_every = 5;
        c.train.probe_epochs = 8;
        return c;
    }
    if (name == "faithful") {
        c.sim.stamp_size = 65;
        c.sim.r_min = 3.0;
        c.sim.r_max = 6.0;
        c.sim.blend_r_max = 18.0;
        c.sim.min_separation = 4.0;
        c.arch.stamp_size = 65;
        c.arch.crop_size = 45;
        c.arch.conv = {{32, 5, true}, {64, 3, true}, {128, 3, false}, {128, 3, true}};
        c.arch.fc_width_plain = 2048;
        c.arch.fc_width_mvn = 4096;
        c.train.stage1_epochs = 1000;
        c.train.stage2_epochs = 200;
        c.train.noise = {true, 0.05, 50, 1000};
        c.train.divergence_ref_epoch = 50;
        c.train.checkpoint_every = 50;
        c.train.probe_epochs = 200;
        return c;
    }
    if (name == "smoke") {
        c.data = {200, 60, 90, 7};
        c.train.stage1_epochs = 6;
        c.train.stage2_epochs = 4;
        c.train.batch_size = 32;
        c.train.noise = {true, 0.25, 1, 4};
        c.train.divergence_ref_epoch = 1;
        c.train.checkpoint_every = 2;
        c.train.probe_epochs = 3;
        c.train.probe_seeds = 2;
        c.bayes.mc_samples = 8;
        c.eval.grid_points = 10;
        c.eval.histogram_bins = 10;
        c.eval.scatter_points = 20;
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk, desk-full, faithful or smoke)");
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config document must be a JSON object");
    std::string name = "desk";
    if (auto it = j.find("preset"); it != j.end()) {
        if (!it->is_string()) throw ConfigError("preset must be a string");
        name = it->get<std::string>();
    }
    RunConfig c = preset(name);
    Section top(j, "config");
    std::string ignored;
    top.get("preset", ignored);
    if (const json* s = top.child("sim")) apply(*s, c.sim);
    if (const json* s = top.child("arch")) apply(*s, c.arch);
    if (const json* s = top.child("train")) apply(*s, c.train);
    if (const json* s = top.child("bayes")) apply(*s, c.bayes);
    if (const json* s = top.child("eval")) apply(*s, c.eval);
    if (const json* s = top.child("data")) apply(*s, c.data);
    top.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const RunConfig& c) { return content_hash(to_json(c).dump()); }

}  // namespace galbnn
