#pragma once

#include "galbnn/ellipticity.hpp"
#include "galbnn/linalg2.hpp"
#include "galbnn/simulator.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace galbnn {

// Binary containers. Layout (little-endian throughout):
//   magic[4] | version u32 | header_len u32 | header JSON | body | crc64 u64
// The CRC-64/XZ trailer covers every preceding byte. docs/formats.md has the
// full byte tables.

inline constexpr unsigned kDatasetVersion = 1;
inline constexpr unsigned kModelVersion = 1;
inline constexpr unsigned kPredictionVersion = 1;

std::uint64_t crc64(std::span<const std::uint8_t> bytes);
std::uint64_t crc64(std::string_view bytes);
/// Lowercase hex SHA-256 of `bytes`. Not the CRC: a container ending in its
/// own CRC-64 trailer always has the same whole-file CRC.
std::string content_hash(std::string_view bytes);
std::string file_content_hash(const std::filesystem::path& path);

// ---------------------------------------------------------------- datasets

struct DatasetRecord {
    Ellipticity label;
    bool is_blend = false;
    std::uint8_t n_companions = 0;
    Scene scene;
    std::vector<float> clean;
    std::vector<float> noisy;  // empty when the file has no noisy variant

    bool operator==(const DatasetRecord&) const = default;
};

struct DatasetHeader {
    int height = 0;
    int width = 0;
    std::uint64_t count = 0;
    Category category = Category::IsolatedClean;
    std::string sim_config_hash;
    std::uint64_t base_seed = 0;
    bool has_noisy = false;
    std::string config_hash;  // run config that produced the file, if any

    bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<DatasetRecord> records;

    bool operator==(const Dataset&) const = default;
};

/// Writes atomically (temp file + rename). Returns the file content hash.
std::string write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

// ------------------------------------------------------------------ models

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    bool operator==(const NamedTensor&) const = default;
};

struct ModelFile {
    nlohmann::json architecture;       // echo of the architecture config
    std::vector<NamedTensor> tensors;  // parameters and buffers
    std::vector<NamedTensor> optimizer;  // optional Adam moments
    nlohmann::json training;           // optimizer step, epoch, history, seeds
    std::string manifest_hash;

    bool operator==(const ModelFile&) const = default;
};

std::string write_model(const ModelFile& m, const std::filesystem::path& path);
ModelFile read_model(const std::filesystem::path& path);

// ------------------------------------------------------------- predictions

struct PredictionRecord {
    std::uint64_t record_index = 0;
    std::uint64_t base_seed = 0;
    std::uint32_t k = 0;
    std::vector<double> raw;  // k x 5 head outputs (mu1, mu2, l11_raw, l21, l22_raw)
    Vec2 mu_bar;
    Sym2 sigma_aleat;
    Sym2 sigma_epist;
    Sym2 sigma_pred;
    double u_aleat = 0.0;
    double u_epist = 0.0;
    double u_pred = 0.0;

    bool operator==(const PredictionRecord&) const = default;
};

struct PredictionFile {
    nlohmann::json header;  // model/dataset/config hashes, K, variant
    std::vector<PredictionRecord> records;

    bool operator==(const PredictionFile&) const = default;
};

std::string write_predictions(const PredictionFile& p, const std::filesystem::path& path);
PredictionFile read_predictions(const std::filesystem::path& path);

}  // namespace galbnn
