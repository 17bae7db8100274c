#pragma once

#include "galbnn/bayes.hpp"
#include "galbnn/ellipticity.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace galbnn {

/// Sigma^{-1/2} (y - mu) with the symmetric inverse square root. Empty when
/// the smallest eigenvalue is below 1e-12.
std::optional<Vec2> standardize(const Vec2& mu_bar, const Sym2& sigma_pred, const Ellipticity& target);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;
};

Histogram make_histogram(std::span<const double> values, int bins);

/// Kolmogorov-Smirnov distance between the sample and N(0, 1).
double ks_statistic_normal(std::span<const double> sample);
/// Asymptotic p-value for distance `d` on `n` points (Stephens' small-n
/// correction of the Kolmogorov series).
double ks_p_value(double d, std::size_t n);

struct ComponentStats {
    double mean = 0.0;
    double stddev = 0.0;
    double ks = 0.0;
    double ks_p = 0.0;
    Histogram histogram;
};

ComponentStats component_stats(std::span<const double> z, int bins);

struct CalibrationReport {
    std::vector<double> z1, z2;
    ComponentStats c1, c2;
    std::size_t excluded = 0;
    double mean_epist_pred_ratio = 0.0;  // mean of u_epist / u_pred
};

CalibrationReport calibration_report(std::span<const UncertaintySplit> predictions, std::span<const Ellipticity> targets,
                                     int bins);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocResult {
    std::string score;
    std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
    double auc = 0.0;
    // Exact area: auc_numerator / auc_denominator, twice the trapezoid area in
    // count units over 2 * positives * negatives.
    std::uint64_t auc_numerator = 0;
    std::uint64_t auc_denominator = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
};

/// Threshold sweep over the distinct scores, highest first, trapezoid area.
/// `auc` is the exact area rounded to a multiple of 2^-53, so negating the
/// scores yields exactly 1 - auc. Throws DomainError for single-class input.
RocResult roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive, std::string name);

struct ErrorCurve {
    std::string sorted_by;
    std::vector<double> p;
    std::vector<double> mean_error;
};

/// i / points for i = 1..points.
std::vector<double> proportion_grid(int points);

/// Mean error of the ceil(p N) records with the lowest scores (stable, ties by
/// index). With no scores the records are sorted by error (the oracle).
/// Every prefix is summed in ascending error order.
ErrorCurve mean_error_curve(std::span<const double> errors, std::span<const double> scores, std::span<const double> grid,
                            std::string name);

struct ScatterPoint {
    Ellipticity target;
    UncertaintySplit split;
    bool is_blend = false;
};

/// Everything reported for one trained model.
struct RegimeResults {
    std::string regime;
    CalibrationReport calibration;            // isolated eval set
    CalibrationReport calibration_resampled;  // targets drawn from the predicted MVNs
    std::vector<RocResult> rocs;              // mixed eval set
    std::vector<ErrorCurve> curves;           // oracle first
    std::vector<ScatterPoint> scatter;
    double median_u_epist_isolated = 0.0;
    double median_u_epist_blend = 0.0;
    std::size_t n_isolated = 0;
    std::size_t n_blend = 0;
    double isolated_fraction = 0.0;
};

struct EvalInput {
    std::vector<UncertaintySplit> splits;
    std::vector<Ellipticity> targets;
    std::vector<std::uint8_t> is_blend;
};

struct EvalOptions {
    int grid_points = 50;
    int histogram_bins = 40;
    int scatter_points = 200;
    std::uint64_t seed = 3;
};

RegimeResults evaluate_regime(const std::string& regime, const EvalInput& in, const EvalOptions& opt);

nlohmann::json to_json(const RegimeResults& r);

/// CSV tables, SVG figures and index.json listing every artifact with its
/// content hash. Output bytes are a function of the inputs only.
std::vector<std::filesystem::path> emit_report(const std::vector<RegimeResults>& regimes, const nlohmann::json& meta,
                                               const std::filesystem::path& out_dir, double ellipse_level);

double median(std::vector<double> v);

}  // namespace galbnn
