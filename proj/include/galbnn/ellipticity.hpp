#pragma once

namespace galbnn {

inline constexpr double kPi = 3.14159265358979323846;

/// Ellipse shape: major axis a, minor axis b (0 < b <= a), position angle
/// theta in [0, pi) measured from the +x axis.
struct EllipseGeometry {
    double a = 1.0;
    double b = 1.0;
    double theta = 0.0;

    double axis_ratio() const { return b / a; }
};

/// Complex ellipticity e1 + i e2 on the open unit disk.
struct Ellipticity {
    double e1 = 0.0;
    double e2 = 0.0;

    double magnitude() const;
    bool operator==(const Ellipticity&) const = default;
};

/// Wraps any angle into [0, pi).
double canonical_angle(double theta);

/// Builds a geometry from axis ratio and angle with a*b = 1.
EllipseGeometry unit_area_geometry(double q, double theta);

Ellipticity to_ellipticity(const EllipseGeometry& g);

/// Inverse of to_ellipticity with the scale fixed by a*b = 1.
/// Throws DomainError when |e| >= 1.
EllipseGeometry from_ellipticity(const Ellipticity& e);

/// Euclidean distance in the (e1, e2) plane.
double ellipticity_error(const Ellipticity& pred, const Ellipticity& target);

}  // namespace galbnn
