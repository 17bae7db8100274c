#include "galbnn/moments.hpp"

#include "galbnn/errors.hpp"

#include <cmath>

namespace galbnn {

namespace {

constexpr int kMaxCentroidIterations = 10;
constexpr double kCentroidTolerance = 1e-6;

// One weighted pass; the window is centered on (wx, wy) when enabled.
MomentSet weighted_moments(const Stamp& s, const MomentWindow& w, double wx, double wy) {
    const double cx = 0.5 * (s.width - 1);
    const double cy = 0.5 * (s.height - 1);
    const double inv_two_var = w.kind == MomentWindow::Kind::Gaussian ? 0.5 / (w.sigma * w.sigma) : 0.0;

    double sum = 0.0, sx = 0.0, sy = 0.0;
    for (int r = 0; r < s.height; ++r) {
        for (int c = 0; c < s.width; ++c) {
            const double x = c - cx;
            const double y = r - cy;
            double v = s.at(r, c);
            if (inv_two_var > 0.0) v *= std::exp(-((x - wx) * (x - wx) + (y - wy) * (y - wy)) * inv_two_var);
            sum += v;
            sx += v * x;
            sy += v * y;
        }
    }
    if (!(sum > 0.0)) throw MeasurementError("non-positive flux in moment measurement");
    MomentSet m;
    m.flux_sum = sum;
    m.x = sx / sum;
    m.y = sy / sum;

    double qxx = 0.0, qyy = 0.0, qxy = 0.0;
    for (int r = 0; r < s.height; ++r) {
        for (int c = 0; c < s.width; ++c) {
            const double x = c - cx;
            const double y = r - cy;
            double v = s.at(r, c);
            if (inv_two_var > 0.0) v *= std::exp(-((x - wx) * (x - wx) + (y - wy) * (y - wy)) * inv_two_var);
            const double dx = x - m.x;
            const double dy = y - m.y;
            qxx += v * dx * dx;
            qyy += v * dy * dy;
            qxy += v * dx * dy;
        }
    }
    m.qxx = qxx / sum;
    m.qyy = qyy / sum;
    m.qxy = qxy / sum;
    return m;
}

}  // namespace

MomentSet measure_moments(const Stamp& stamp, MomentWindow window) {
    if (window.kind == MomentWindow::Kind::Unweighted) return weighted_moments(stamp, window, 0.0, 0.0);
    if (!(window.sigma > 0.0)) throw MeasurementError("Gaussian window width must be positive");

    // Recenter the window on the windowed centroid until it stops moving.
    MomentSet start = weighted_moments(stamp, MomentWindow::unweighted(), 0.0, 0.0);
    double wx = start.x, wy = start.y;
    for (int it = 0; it < kMaxCentroidIterations; ++it) {
        MomentSet m = weighted_moments(stamp, window, wx, wy);
        const double shift = std::hypot(m.x - wx, m.y - wy);
        if (shift < kCentroidTolerance) return m;
        wx = m.x;
        wy = m.y;
    }
    throw MeasurementError("windowed centroid did not converge in 10 iterations");
}

Ellipticity moments_to_ellipticity(const MomentSet& m) {
    const double trace = m.qxx + m.qyy;
    if (!(trace > 0.0)) throw MeasurementError("undefined shape: Qxx + Qyy = 0");
    return {(m.qxx - m.qyy) / trace, 2.0 * m.qxy / trace};
}

}  // namespace galbnn
