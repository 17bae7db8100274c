#pragma once

#include "galbnn/simulator.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace galbnn {

struct ConvSpec {
    int channels = 0;
    int kernel = 3;
    bool pool = false;

    bool operator==(const ConvSpec&) const = default;
};

enum class HeadKind { PlainL2, MvnNll };

std::string_view to_string(HeadKind h);

struct ArchitectureConfig {
    int stamp_size = 32;
    int crop_size = 24;
    std::vector<ConvSpec> conv = {{8, 5, true}, {16, 3, true}, {32, 3, false}, {32, 3, true}};
    int fc_width_plain = 256;
    int fc_width_mvn = 256;
    int maxout_pieces = 2;
    double dropout_rate = 0.5;
    double sigma_floor = 1e-3;

    int trunk_side() const;       // spatial side after all pools
    int view_features() const;    // flatten width of one view
    int concat_features() const;  // 4 views
    int fc_width(HeadKind h) const { return h == HeadKind::PlainL2 ? fc_width_plain : fc_width_mvn; }
    void validate() const;

    bool operator==(const ArchitectureConfig&) const = default;
};

struct NoiseRamp {
    bool enabled = true;
    double step_fraction = 0.05;
    int step_epochs = 5;
    int total_epochs = 100;

    bool operator==(const NoiseRamp&) const = default;
};

struct TrainConfig {
    int stage1_epochs = 100;
    int stage2_epochs = 30;
    int batch_size = 64;
    double lr = 1e-3;
    double stage2_lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    NoiseRamp noise;
    std::uint64_t seed = 1;
    double validation_fraction = 0.1;
    int checkpoint_every = 10;
    double divergence_factor = 10.0;
    int divergence_ref_epoch = 5;
    int probe_epochs = 20;
    int probe_seeds = 5;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct BayesConfig {
    int mc_samples = 50;
    std::uint64_t seed = 2;

    bool operator==(const BayesConfig&) const = default;
};

struct EvalConfig {
    double ellipse_level = 0.9;
    int grid_points = 50;
    int histogram_bins = 40;
    double isolated_fraction = 0.4;
    int scatter_points = 200;
    std::uint64_t seed = 3;

    bool operator==(const EvalConfig&) const = default;
};

struct DataConfig {
    int n_train = 8000;
    int n_eval_isolated = 2000;
    int n_eval_blend = 3000;
    std::uint64_t seed = 7;

    bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
    std::string preset = "desk-full";
    SimConfig sim;
    ArchitectureConfig arch;
    TrainConfig train;
    BayesConfig bayes;
    EvalConfig eval;
    DataConfig data;

    void validate() const;
};

nlohmann::json to_json(const SimConfig& c);
nlohmann::json to_json(const ArchitectureConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);

SimConfig sim_config_from_json(const nlohmann::json& j);
ArchitectureConfig arch_config_from_json(const nlohmann::json& j);

/// Applies `j` on top of the named preset. Unknown sections or keys throw
/// ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// "desk", "desk-full", "faithful" or "smoke".
RunConfig preset(std::string_view name);

/// Content hash of the canonical JSON dump.
std::string config_hash(const RunConfig& c);

}  // namespace galbnn
