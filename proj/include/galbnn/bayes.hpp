#pragma once

#include "galbnn/linalg2.hpp"
#include "galbnn/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace galbnn {

struct McEnsemble {
    std::uint64_t base_seed = 0;
    std::vector<std::uint64_t> seeds;  // dropout seed of each sample
    std::vector<MvnPrediction> samples;

    std::size_t k() const { return samples.size(); }
};

struct UncertaintySplit {
    Vec2 mu_bar;
    Sym2 sigma_aleat;
    Sym2 sigma_epist;
    Sym2 sigma_pred;
    double u_aleat = 0.0;
    double u_epist = 0.0;
    double u_pred = 0.0;
};

/// Dropout seed of MC sample k.
std::uint64_t mc_sample_seed(std::uint64_t base_seed, std::uint64_t k);

/// K dropout-sampled MVN predictions for each stamp. The trunk has no dropout,
/// so it runs once per stamp; the head runs K times with row seeds
/// mc_sample_seed(base_seeds[n], k). Stamps are processed in independent
/// chunks, possibly in parallel on network copies.
std::vector<McEnsemble> sample_ensembles(const Network<float>& model, const std::vector<std::span<const float>>& stamps,
                                         int k, const std::vector<std::uint64_t>& base_seeds);

McEnsemble sample_ensemble(const Network<float>& model, std::span<const float> stamp, int k, std::uint64_t base_seed);

/// Rebuilds an ensemble from K x 5 raw head outputs.
McEnsemble ensemble_from_raw(std::span<const double> raw, double sigma_floor, std::uint64_t base_seed);

/// Mixture mean, mean covariance, 1/K covariance of the means, and their sum.
/// Throws ContractError for K < 2.
UncertaintySplit decompose(const McEnsemble& ens);

/// Determinant with values in [-1e-12, 0) clamped to zero.
double clamped_det(const Sym2& m);

/// Differential entropy ln(sqrt((2 pi e)^2 det)) of a bivariate normal.
double gaussian_entropy(double det);

struct ScalarUncertainties {
    double u_aleat, u_epist, u_pred;
    double h_aleat, h_epist, h_pred;
};

ScalarUncertainties scalar_uncertainties(const UncertaintySplit& s);

struct ConfidenceEllipse {
    Vec2 center;
    double semi_major = 0.0;
    double semi_minor = 0.0;
    double angle = 0.0;  // of the major axis, radians from +e1
};

/// Chi-square quantile with 2 degrees of freedom: -2 ln(1 - level).
double chi2_2dof_quantile(double level);

/// Throws DomainError unless 0 < level < 1 and NumericError for a matrix that
/// is not positive definite.
ConfidenceEllipse confidence_ellipse(const Sym2& m, const Vec2& center, double level);

}  // namespace galbnn
