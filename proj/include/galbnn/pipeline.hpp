#pragma once

#include "galbnn/config.hpp"
#include "galbnn/eval.hpp"
#include "galbnn/protocol.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace galbnn::pipeline {

namespace fs = std::filesystem;

enum class Regime { Noiseless, Noisy };

std::string_view to_string(Regime r);
Regime regime_from_string(std::string_view s);
Variant training_variant(Regime r);

/// Per-invocation log sink; progress lines go to stderr unless quiet.
void set_quiet(bool quiet);

struct SimulateArgs {
    Category category = Category::IsolatedClean;
    std::size_t n = 1;
    std::uint64_t seed = 0;
    fs::path out;
};

/// Returns the dataset content hash.
std::string simulate(const RunConfig& cfg, const SimulateArgs& a);

struct TrainArgs {
    int stage = 1;
    Regime regime = Regime::Noisy;
    fs::path data;
    fs::path out;
    std::optional<fs::path> stage1_model;  // stage 2 only
    std::optional<fs::path> resume;
    std::optional<fs::path> history_csv;
    std::optional<std::uint64_t> seed;
};

/// Trains and writes the final model file (with optimizer state). Checkpoints
/// go to `<out>.ckpt` every train.checkpoint_every epochs.
TrainResult train(const RunConfig& cfg, const TrainArgs& a);

struct PredictArgs {
    fs::path model;
    fs::path data;
    fs::path out;
    std::optional<Variant> variant;  // default: noisy when the file has it
    int mc_samples = 50;
    std::uint64_t seed = 0;
};

PredictionFile predict(const RunConfig& cfg, const PredictArgs& a);

struct EvaluateArgs {
    Regime regime = Regime::Noisy;
    fs::path isolated_predictions;
    fs::path blend_predictions;
    fs::path isolated_data;
    fs::path blend_data;
    fs::path out;  // regime results JSON
    bool force = false;
};

RegimeResults evaluate(const RunConfig& cfg, const EvaluateArgs& a);

/// Emits the report for previously evaluated regimes.
std::vector<fs::path> report(const RunConfig& cfg, const std::vector<fs::path>& regime_files, const fs::path& out_dir);

/// Full experiment grid: datasets, two models through both stages, MC
/// predictions on isolated and blended sets, evaluation and report.
nlohmann::json repro_paper(const RunConfig& cfg, const fs::path& out_dir);

struct ProbeArgs {
    fs::path data;
    fs::path out;  // JSON summary
    std::size_t max_records = 2000;
};

ProbeResult probe(const RunConfig& cfg, const ProbeArgs& a);

nlohmann::json regime_to_json(const RegimeResults& r);
RegimeResults regime_from_json(const nlohmann::json& j);

void write_history_csv(const std::vector<EpochMetrics>& history, const fs::path& path);

/// Writes `<path>` atomically with the given text.
void write_text_file(const fs::path& path, const std::string& text);

}  // namespace galbnn::pipeline
