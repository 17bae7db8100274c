#include "galbnn/simulator.hpp"

#include "galbnn/config.hpp"
#include "galbnn/errors.hpp"
#include "galbnn/parallel.hpp"
#include "galbnn/rng.hpp"
#include "galbnn/store.hpp"

#include <cmath>
#include <random>

namespace galbnn {

namespace {

constexpr double kGaussianHlrPerSigma = 1.1774100225154747;  // sqrt(2 ln 2)
constexpr double kExponentialHlrPerScale = 1.6783469900166608;
constexpr double kSubpixel[2] = {-0.25, 0.25};

double log_uniform(SplitMix64& rng, double lo, double hi) {
    if (lo == hi) return lo;
    return std::exp(std::log(lo) + rng.uniform() * (std::log(hi) - std::log(lo)));
}

GalaxyModel sample_galaxy(const SimConfig& cfg, SplitMix64& rng) {
    GalaxyModel g;
    g.profile = rng.uniform() < cfg.exponential_fraction ? Profile::Exponential
                                                         : Profile::EllipticalGaussian;
    g.flux = log_uniform(rng, cfg.flux_min, cfg.flux_max);
    g.half_light_radius = log_uniform(rng, cfg.r_min, cfg.r_max);
    g.q = cfg.q_min + rng.uniform() * (1.0 - cfg.q_min);
    if (g.q <= 0.0) g.q = cfg.q_min;
    g.theta = rng.uniform() * kPi;
    return g;
}

}  // namespace

std::string_view to_string(Category c) {
    switch (c) {
        case Category::IsolatedClean: return "isolated-clean";
        case Category::IsolatedNoisy: return "isolated-noisy";
        case Category::BlendClean: return "blend-clean";
        case Category::BlendNoisy: return "blend-noisy";
    }
    return "unknown";
}

Category category_from_string(std::string_view s) {
    for (auto c : {Category::IsolatedClean, Category::IsolatedNoisy, Category::BlendClean,
                   Category::BlendNoisy}) {
        if (to_string(c) == s) return c;
    }
    throw ConfigError("unknown category '" + std::string(s) + "'");
}

bool is_blend(Category c) { return c == Category::BlendClean || c == Category::BlendNoisy; }
bool is_noisy(Category c) { return c == Category::IsolatedNoisy || c == Category::BlendNoisy; }

void SimConfig::validate() const {
    if (stamp_size < 16) throw ConfigError("sim.stamp_size must be >= 16");
    if (!(r_min > 0.0 && r_min <= r_max)) throw ConfigError("sim radius bounds must satisfy 0 < r_min <= r_max");
    if (!(q_min > 0.0 && q_min <= 1.0)) throw ConfigError("sim.q_min must lie in (0, 1]");
    if (!(flux_min > 0.0 && flux_min <= flux_max)) throw ConfigError("sim flux bounds must satisfy 0 < flux_min <= flux_max");
    if (!(sky_level >= 0.0)) throw ConfigError("sim.sky_level must be >= 0");
    if (!(min_separation >= 0.0 && blend_r_max > min_separation))
        throw ConfigError("sim.blend_r_max must exceed sim.min_separation");
    if (min_separation >= 0.5 * (stamp_size - 1))
        throw ConfigError("companion placement region lies outside the stamp");
    if (max_companions < 1 || max_companions > 5) throw ConfigError("sim.max_companions must lie in [1, 5]");
    if (!(exponential_fraction >= 0.0 && exponential_fraction <= 1.0))
        throw ConfigError("sim.exponential_fraction must lie in [0, 1]");
}

void render_galaxy(const GalaxyModel& g, Stamp& stamp) {
    const double cx = 0.5 * (stamp.width - 1);
    const double cy = 0.5 * (stamp.height - 1);
    const double c = std::cos(g.theta);
    const double s = std::sin(g.theta);
    const double sqrt_q = std::sqrt(g.q);

    // Both profiles are written in the galaxy frame (u along the major axis)
    // with an area-preserving stretch so that the flux normalization is that
    // of the circular profile.
    double norm = 0.0;
    double inv_var_u = 0.0, inv_var_v = 0.0;  // Gaussian
    double inv_scale = 0.0;                   // exponential
    if (g.profile == Profile::EllipticalGaussian) {
        const double sigma = g.half_light_radius / kGaussianHlrPerSigma;
        const double su = sigma / sqrt_q;
        const double sv = sigma * sqrt_q;
        inv_var_u = 1.0 / (su * su);
        inv_var_v = 1.0 / (sv * sv);
        norm = g.flux / (2.0 * kPi * sigma * sigma);
    } else {
        const double scale = g.half_light_radius / kExponentialHlrPerScale;
        inv_scale = 1.0 / scale;
        norm = g.flux / (2.0 * kPi * scale * scale);
    }
    const double sub_weight = 0.25 * norm;

    for (int row = 0; row < stamp.height; ++row) {
        for (int col = 0; col < stamp.width; ++col) {
            double acc = 0.0;
            for (double oy : kSubpixel) {
                const double dy = row + oy - cy - g.y;
                for (double ox : kSubpixel) {
                    const double dx = col + ox - cx - g.x;
                    const double u = dx * c + dy * s;
                    const double v = -dx * s + dy * c;
                    if (g.profile == Profile::EllipticalGaussian) {
                        acc += std::exp(-0.5 * (u * u * inv_var_u + v * v * inv_var_v));
                    } else {
                        const double r = std::sqrt(u * u * g.q + v * v / g.q);
                        acc += std::exp(-r * inv_scale);
                    }
                }
            }
            stamp.pixels[static_cast<std::size_t>(row) * stamp.width + col] += sub_weight * acc;
        }
    }
}

Stamp render(const Scene& scene, int height, int width) {
    if (height < 16 || width < 16) throw DomainError("stamp dimensions must be >= 16");
    Stamp stamp;
    stamp.height = height;
    stamp.width = width;
    stamp.pixels.assign(static_cast<std::size_t>(height) * width, 0.0);
    stamp.is_blend = !scene.companions.empty();
    stamp.n_companions = static_cast<int>(scene.companions.size());
    render_galaxy(scene.central, stamp);
    for (const auto& g : scene.companions) render_galaxy(g, stamp);
    return stamp;
}

Stamp add_poisson_noise(const Stamp& stamp, double sky_level, std::uint64_t seed) {
    if (!(sky_level >= 0.0)) throw DomainError("sky level must be >= 0");
    Stamp out = stamp;
    for (std::size_t i = 0; i < stamp.pixels.size(); ++i) {
        const double p = stamp.pixels[i];
        if (!(p >= 0.0)) throw DomainError("negative or non-finite pixel in noiseless stamp (corrupt stamp)");
        const double mean = p + sky_level;
        if (mean == 0.0) {
            out.pixels[i] = 0.0;
            continue;
        }
        SplitMix64 stream(derive_seed(seed, i));
        std::poisson_distribution<long long> dist(mean);
        out.pixels[i] = static_cast<double>(dist(stream)) - sky_level;
    }
    return out;
}

Scene sample_scene(const SimConfig& config, Category category, std::uint64_t seed) {
    SplitMix64 rng(derive_seed(seed, 0x5ce7eULL));
    Scene scene;
    scene.seed = seed;
    scene.central = sample_galaxy(config, rng);
    scene.label = to_ellipticity(unit_area_geometry(scene.central.q, scene.central.theta));

    if (is_blend(category)) {
        const int n = 1 + static_cast<int>(rng.uniform() * config.max_companions);
        const double half = 0.5 * (config.stamp_size - 1);
        for (int i = 0; i < n; ++i) {
            GalaxyModel g = sample_galaxy(config, rng);
            // Uniform on the disk |offset| <= blend_r_max, centroid inside the
            // stamp and clear of the central galaxy.
            for (;;) {
                const double x = (2.0 * rng.uniform() - 1.0) * config.blend_r_max;
                const double y = (2.0 * rng.uniform() - 1.0) * config.blend_r_max;
                const double r = std::hypot(x, y);
                if (r > config.blend_r_max || r < config.min_separation) continue;
                if (std::abs(x) > half || std::abs(y) > half) continue;
                g.x = x;
                g.y = y;
                break;
            }
            scene.companions.push_back(g);
        }
    }
    if (is_noisy(category)) {
        scene.noise.poisson = true;
        scene.noise.sky_level = config.sky_level;
        scene.noise.seed = derive_seed(seed, 0x9015eULL);
    }
    return scene;
}

std::uint64_t record_seed(std::uint64_t base_seed, std::uint64_t index) {
    return derive_seed(base_seed, index);
}

DatasetRecord make_record(const SimConfig& config, Category category, std::uint64_t seed) {
    DatasetRecord rec;
    rec.scene = sample_scene(config, category, seed);
    const Stamp clean = render(rec.scene, config.stamp_size, config.stamp_size);
    rec.label = rec.scene.label;
    rec.is_blend = clean.is_blend;
    rec.n_companions = static_cast<std::uint8_t>(clean.n_companions);
    rec.clean.assign(clean.pixels.begin(), clean.pixels.end());
    if (rec.scene.noise.poisson) {
        const Stamp noisy = add_poisson_noise(clean, rec.scene.noise.sky_level, rec.scene.noise.seed);
        rec.noisy.assign(noisy.pixels.begin(), noisy.pixels.end());
    }
    return rec;
}

std::string generate_dataset(const SimConfig& config, Category category, std::size_t n,
                             std::uint64_t base_seed, const std::filesystem::path& path,
                             const std::string& config_hash) {
    if (n < 1) throw DomainError("dataset must contain at least one record");
    config.validate();
    Dataset ds;
    ds.header.height = config.stamp_size;
    ds.header.width = config.stamp_size;
    ds.header.count = n;
    ds.header.category = category;
    ds.header.sim_config_hash = content_hash(to_json(config).dump());
    ds.header.base_seed = base_seed;
    ds.header.has_noisy = is_noisy(category);
    ds.header.config_hash = config_hash;
    ds.records.resize(n);
    parallel_for(n, [&](std::size_t i) {
        ds.records[i] = make_record(config, category, record_seed(base_seed, i));
    });
    return write_dataset(ds, path);
}

}  // namespace galbnn
