#pragma once

#include "galbnn/ellipticity.hpp"
#include "galbnn/simulator.hpp"

namespace galbnn {

/// Flux-weighted centroid (relative to the stamp center) and central second
/// moments in pixel^2.
struct MomentSet {
    double flux_sum = 0.0;
    double x = 0.0;
    double y = 0.0;
    double qxx = 0.0;
    double qyy = 0.0;
    double qxy = 0.0;
};

struct MomentWindow {
    enum class Kind { Unweighted, Gaussian } kind = Kind::Unweighted;
    double sigma = 0.0;  // Gaussian window width (pixels)

    static MomentWindow unweighted() { return {}; }
    static MomentWindow gaussian(double sigma) { return {Kind::Gaussian, sigma}; }
};

/// Throws MeasurementError for non-positive flux or a centroid that does not
/// converge within 10 iterations (Gaussian window only).
MomentSet measure_moments(const Stamp& stamp, MomentWindow window = MomentWindow::unweighted());

/// (Qxx - Qyy, 2 Qxy) / (Qxx + Qyy); throws MeasurementError when the trace is 0.
Ellipticity moments_to_ellipticity(const MomentSet& m);

}  // namespace galbnn
