#pragma once

#include <array>
#include <cmath>

namespace galbnn {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Vec2&) const = default;
};

/// Symmetric 2x2 matrix [[xx, xy], [xy, yy]].
struct Sym2 {
    double xx = 0.0;
    double xy = 0.0;
    double yy = 0.0;

    static Sym2 identity() { return {1.0, 0.0, 1.0}; }
    static Sym2 outer(const Vec2& v) { return {v.x * v.x, v.x * v.y, v.y * v.y}; }

    double det() const { return xx * yy - xy * xy; }
    double trace() const { return xx + yy; }

    Sym2 operator+(const Sym2& o) const { return {xx + o.xx, xy + o.xy, yy + o.yy}; }
    Sym2 operator-(const Sym2& o) const { return {xx - o.xx, xy - o.xy, yy - o.yy}; }
    Sym2 operator*(double s) const { return {xx * s, xy * s, yy * s}; }
    Vec2 operator*(const Vec2& v) const { return {xx * v.x + xy * v.y, xy * v.x + yy * v.y}; }
    bool operator==(const Sym2&) const = default;

    double max_abs() const { return std::fmax(std::fabs(xx), std::fmax(std::fabs(xy), std::fabs(yy))); }
};

/// Eigen-decomposition of a symmetric 2x2 matrix: values ascending, unit
/// vectors as columns.
struct SymEigen2 {
    std::array<double, 2> values{};
    std::array<Vec2, 2> vectors{};
};

inline SymEigen2 eigen(const Sym2& m) {
    const double mean = 0.5 * (m.xx + m.yy);
    const double half_diff = 0.5 * (m.xx - m.yy);
    const double radius = std::hypot(half_diff, m.xy);
    SymEigen2 out;
    out.values = {mean - radius, mean + radius};
    // Angle of the major eigenvector.
    const double phi = 0.5 * std::atan2(2.0 * m.xy, m.xx - m.yy);
    const double c = std::cos(phi);
    const double s = std::sin(phi);
    out.vectors[1] = {c, s};
    out.vectors[0] = {-s, c};
    return out;
}

/// Symmetric function of a PSD matrix: V diag(f(lambda)) V^T.
template <typename F>
Sym2 apply_spectral(const Sym2& m, F&& f) {
    const SymEigen2 e = eigen(m);
    Sym2 r;
    for (int i = 0; i < 2; ++i) {
        const double fl = f(e.values[i]);
        const Vec2& v = e.vectors[i];
        r = r + Sym2::outer(v) * fl;
    }
    return r;
}

}  // namespace galbnn
