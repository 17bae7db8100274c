#pragma once

#include "galbnn/config.hpp"
#include "galbnn/model.hpp"
#include "galbnn/nn/optim.hpp"
#include "galbnn/store.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace galbnn {

/// step_fraction * floor(epoch / step_epochs) clamped to [0, 1]; 0 when the
/// ramp is disabled.
double noisy_fraction(int epoch, const NoiseRamp& ramp);

/// Which records of a training set are served noisy at each epoch: the first
/// llround(fraction * n) entries of a fixed seeded permutation.
class NoiseSchedule {
public:
    NoiseSchedule(NoiseRamp ramp, std::size_t n, std::uint64_t seed);

    double fraction(int epoch) const { return noisy_fraction(epoch, ramp_); }
    std::size_t noisy_count(int epoch) const;
    /// `pos` indexes the training set (not the permutation).
    bool is_noisy(std::size_t pos, int epoch) const { return rank_[pos] < noisy_count(epoch); }
    const std::vector<std::size_t>& order() const { return order_; }

private:
    NoiseRamp ramp_;
    std::vector<std::size_t> order_;  // order_[r] = training position with rank r
    std::vector<std::size_t> rank_;
};

/// Seeded permutation of [0, n) obtained by sorting on per-index hashes.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Validation membership is decided by a hash of each record's scene seed.
Split split_by_scene(const Dataset& ds, double validation_fraction);

enum class Variant { Clean, Noisy };

struct EpochMetrics {
    int epoch = 0;
    double noisy_fraction = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_mean_det = 0.0;  // MVN head only
    double val_rms_z1 = 0.0;    // MVN head only
    double val_rms_z2 = 0.0;

    bool operator==(const EpochMetrics&) const = default;
};

nlohmann::json to_json(const EpochMetrics& m);
EpochMetrics epoch_metrics_from_json(const nlohmann::json& j);

struct TrainJob {
    HeadKind head = HeadKind::PlainL2;
    int epochs = 1;
    double lr = 1e-3;
    bool ramp = false;                  // stage-1 noise ramp
    Variant variant = Variant::Clean;   // data when the ramp is off; validation data always
    std::uint64_t seed = 0;
    std::vector<std::size_t> subset;    // training records to use (empty: all)
    std::optional<std::filesystem::path> checkpoint;
    int checkpoint_every = 0;
    std::optional<std::filesystem::path> resume;
    int stop_after = -1;                // stop after this many completed epochs (interruption hook)
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
    Network<float> model;
    nn::Adam<float> optimizer;
    std::vector<EpochMetrics> history;
    std::uint64_t steps = 0;
    double initial_mean_det = 0.0;  // MVN head, before the first update

    explicit TrainResult(Network<float> m) : model(std::move(m)) {}
};

/// Trains `model` in place according to `job`, with divergence detection on
/// the validation loss. Throws DivergenceError.
TrainResult run_training(Network<float> model, const Dataset& data, const TrainConfig& cfg, const TrainJob& job);

/// Fresh PlainL2 model trained with the L2 loss.
TrainResult train_stage1(const Dataset& data, const RunConfig& cfg, TrainJob job);

/// Transfers the trunk of `stage1` into a fresh MVN model, checks that trunk
/// features match bitwise, then trains with the NLL loss.
TrainResult train_stage2(Network<float>& stage1, const Dataset& data, const RunConfig& cfg, TrainJob job);

struct ProbeRun {
    std::uint64_t seed = 0;
    bool diverged = false;
    int epoch = -1;  // epoch of detection
    std::string reason;
    double final_val_loss = 0.0;
};

struct ProbeResult {
    std::vector<ProbeRun> runs;
    int diverged() const;
    bool reproduces_divergence() const { return diverged() >= 3; }
};

/// Trains MVN models from scratch (no transfer) on noisy data for several seeds.
ProbeResult probe_cotrain(const Dataset& data, const RunConfig& cfg, std::size_t max_records);

/// Checkpoint contents as a model file.
ModelFile make_model_file(TrainResult& r, const nlohmann::json& extra);
void save_checkpoint(TrainResult& r, const nlohmann::json& extra, const std::filesystem::path& path);

/// Loads model weights (and optimizer state, if any) from a model file.
Network<float> load_network(const ModelFile& f);

/// Deterministic forward pass (dropout off) in chunks; returns [N, outputs].
nn::Tensor<float> predict_deterministic(Network<float>& model, const Dataset& data,
                                        const std::vector<std::size_t>& indices, Variant variant);

std::span<const float> pixels(const DatasetRecord& r, Variant v);

}  // namespace galbnn
