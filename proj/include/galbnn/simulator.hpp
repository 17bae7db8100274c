#pragma once

#include "galbnn/ellipticity.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace galbnn {

enum class Profile : std::uint8_t { EllipticalGaussian = 0, Exponential = 1 };

/// One parametric galaxy. Position is the offset (pixels) of its centroid from
/// the stamp center; x runs along columns, y along rows.
struct GalaxyModel {
    Profile profile = Profile::EllipticalGaussian;
    double flux = 1.0;
    double half_light_radius = 1.0;
    double q = 1.0;
    double theta = 0.0;
    double x = 0.0;
    double y = 0.0;

    bool operator==(const GalaxyModel&) const = default;
};

struct NoiseSpec {
    bool poisson = false;
    double sky_level = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const NoiseSpec&) const = default;
};

struct Scene {
    GalaxyModel central;
    std::vector<GalaxyModel> companions;
    NoiseSpec noise;
    Ellipticity label;
    std::uint64_t seed = 0;

    bool operator==(const Scene&) const = default;
};

enum class Category : std::uint8_t { IsolatedClean = 0, IsolatedNoisy = 1, BlendClean = 2, BlendNoisy = 3 };

std::string_view to_string(Category c);
Category category_from_string(std::string_view s);
bool is_blend(Category c);
bool is_noisy(Category c);

struct SimConfig {
    int stamp_size = 32;
    double r_min = 1.5;   // half-light radius bounds (pixels), log-uniform
    double r_max = 3.0;
    double q_min = 0.3;   // axis ratio uniform on [q_min, 1]
    double flux_min = 2000.0;
    double flux_max = 20000.0;
    double sky_level = 100.0;
    double blend_r_max = 9.0;     // companion offset bound (pixels)
    double min_separation = 2.0;  // companion-to-central distance (pixels)
    int max_companions = 5;
    double exponential_fraction = 0.0;  // probability a galaxy uses the exponential profile

    void validate() const;
};

/// Pixel grid in counts, row-major, double precision in memory.
struct Stamp {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;
    bool is_blend = false;
    int n_companions = 0;

    double at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

/// Adds the pixel-integrated light of one galaxy (2x2 subpixel midpoint rule).
void render_galaxy(const GalaxyModel& g, Stamp& stamp);

/// Noiseless render of every galaxy in the scene, central first.
Stamp render(const Scene& scene, int height, int width);

/// Poisson(pixel + sky) - sky with an independent counter-based stream per pixel.
Stamp add_poisson_noise(const Stamp& stamp, double sky_level, std::uint64_t seed);

Scene sample_scene(const SimConfig& config, Category category, std::uint64_t seed);

/// Scene seed for record `index` of a dataset generated from `base_seed`.
std::uint64_t record_seed(std::uint64_t base_seed, std::uint64_t index);

struct DatasetRecord;

/// Samples, renders and (for noisy categories) noises one record.
DatasetRecord make_record(const SimConfig& config, Category category, std::uint64_t seed);

/// Generates `n` records and writes them atomically to `path`.
/// Returns the content hash of the written file.
std::string generate_dataset(const SimConfig& config, Category category, std::size_t n,
                             std::uint64_t base_seed, const std::filesystem::path& path,
                             const std::string& config_hash = {});

}  // namespace galbnn
