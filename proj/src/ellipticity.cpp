#include "galbnn/ellipticity.hpp"

#include "galbnn/errors.hpp"

#include <cmath>

namespace galbnn {

double Ellipticity::magnitude() const { return std::hypot(e1, e2); }

double canonical_angle(double theta) {
    double t = std::fmod(theta, kPi);
    if (t < 0.0) t += kPi;
    // fmod can return exactly pi after the shift for tiny negative inputs
    if (t >= kPi) t = 0.0;
    return t;
}

EllipseGeometry unit_area_geometry(double q, double theta) {
    if (!(q > 0.0 && q <= 1.0)) throw DomainError("axis ratio must lie in (0, 1]");
    const double a = 1.0 / std::sqrt(q);
    return {a, a * q, canonical_angle(theta)};
}

Ellipticity to_ellipticity(const EllipseGeometry& g) {
    const double q = g.b / g.a;
    const double q2 = q * q;
    const double mag = (1.0 - q2) / (1.0 + q2);
    return {mag * std::cos(2.0 * g.theta), mag * std::sin(2.0 * g.theta)};
}

EllipseGeometry from_ellipticity(const Ellipticity& e) {
    const double mag = e.magnitude();
    if (!(mag < 1.0)) throw DomainError("ellipticity magnitude must be < 1");
    const double q = std::sqrt((1.0 - mag) / (1.0 + mag));
    const double theta = mag == 0.0 ? 0.0 : canonical_angle(0.5 * std::atan2(e.e2, e.e1));
    return unit_area_geometry(q, theta);
}

double ellipticity_error(const Ellipticity& pred, const Ellipticity& target) {
    return std::hypot(pred.e1 - target.e1, pred.e2 - target.e2);
}

}  // namespace galbnn
