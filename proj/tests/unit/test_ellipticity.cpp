#include "galbnn/ellipticity.hpp"
#include "galbnn/errors.hpp"
#include "galbnn/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace galbnn;

namespace {

EllipseGeometry geom(double a, double b, double theta) { return {a, b, theta}; }

// Independent evaluation of the complex formula with std::complex-free algebra.
Ellipticity oracle(double q, double theta) {
    const double m = (1 - q * q) / (1 + q * q);
    return {m * std::cos(2 * theta), m * std::sin(2 * theta)};
}

}  // namespace

TEST(Ellipticity, CircleMapsToOrigin) {
    for (double t : {0.0, 0.3, 1.7, 3.0}) {
        const auto e = to_ellipticity(geom(1, 1, t));
        EXPECT_NEAR(e.e1, 0.0, 1e-15);
        EXPECT_NEAR(e.e2, 0.0, 1e-15);
    }
}

TEST(Ellipticity, KnownValues) {
    auto e = to_ellipticity(geom(2, 1, 0));
    EXPECT_NEAR(e.e1, 0.6, 1e-15);
    EXPECT_NEAR(e.e2, 0.0, 1e-15);
    e = to_ellipticity(geom(2, 1, kPi / 2));
    EXPECT_NEAR(e.e1, -0.6, 1e-15);
    EXPECT_NEAR(e.e2, 0.0, 1e-15);
    e = to_ellipticity(geom(2, 1, kPi / 6));
    EXPECT_NEAR(e.e1, 0.3, 1e-15);
    EXPECT_NEAR(e.e2, 0.6 * std::sqrt(3.0) / 2, 1e-15);
    EXPECT_NEAR(e.e2, 0.5196, 1e-4);
}

TEST(Ellipticity, InverseKnownValues) {
    auto g = from_ellipticity({0, 0});
    EXPECT_DOUBLE_EQ(g.axis_ratio(), 1.0);
    EXPECT_DOUBLE_EQ(g.theta, 0.0);
    g = from_ellipticity({0.6, 0});
    EXPECT_NEAR(g.axis_ratio(), 0.5, 1e-15);
    EXPECT_NEAR(g.theta, 0.0, 1e-15);
    EXPECT_NEAR(g.a * g.b, 1.0, 1e-15);
}

TEST(Ellipticity, InverseRejectsBoundary) {
    EXPECT_THROW(from_ellipticity({1.0, 0.0}), DomainError);
    EXPECT_THROW(from_ellipticity({0.8, 0.7}), DomainError);
}

TEST(Ellipticity, RoundTripProperty) {
    SplitMix64 rng(11);
    for (int i = 0; i < 5000; ++i) {
        const double q = 0.02 + 0.98 * rng.uniform();
        const double theta = kPi * rng.uniform();
        const double a = 0.1 + 10 * rng.uniform();
        const auto g = from_ellipticity(to_ellipticity(geom(a, q * a, theta)));
        EXPECT_NEAR(g.axis_ratio(), q, 1e-12);
        if (q < 1 - 1e-6) {
            double d = std::fabs(g.theta - theta);
            d = std::fmin(d, kPi - d);
            EXPECT_NEAR(d, 0.0, 1e-12 / (1 - q));
        }
        EXPECT_GE(g.theta, 0.0);
        EXPECT_LT(g.theta, kPi);
    }
}

TEST(Ellipticity, MatchesOracleAndMagnitudeMonotone) {
    SplitMix64 rng(12);
    for (int i = 0; i < 1000; ++i) {
        const double q = rng.uniform() * 0.999 + 0.001;
        const double t = kPi * rng.uniform();
        const auto e = to_ellipticity(geom(1 / std::sqrt(q), std::sqrt(q), t));
        const auto o = oracle(q, t);
        EXPECT_NEAR(e.e1, o.e1, 1e-14);
        EXPECT_NEAR(e.e2, o.e2, 1e-14);
        EXPECT_LT(e.magnitude(), 1.0);
    }
    double prev = -1;
    for (double q = 1.0; q > 0.001; q -= 0.001) {
        const double m = to_ellipticity(geom(1, q, 0.4)).magnitude();
        EXPECT_GT(m, prev);
        prev = m;
    }
}

TEST(Ellipticity, RotationEquivariance) {
    SplitMix64 rng(13);
    for (int i = 0; i < 200; ++i) {
        const double q = 0.1 + 0.9 * rng.uniform();
        const double t = kPi * rng.uniform();
        const auto e = to_ellipticity(geom(1, q, t));
        for (double d : {kPi / 4, kPi / 2, kPi}) {
            const auto r = to_ellipticity(geom(1, q, canonical_angle(t + d)));
            const double c = std::cos(2 * d), s = std::sin(2 * d);
            EXPECT_NEAR(r.e1, c * e.e1 - s * e.e2, 1e-12);
            EXPECT_NEAR(r.e2, s * e.e1 + c * e.e2, 1e-12);
        }
        const auto full = to_ellipticity(geom(1, q, canonical_angle(t + kPi)));
        EXPECT_NEAR(full.e1, e.e1, 1e-12);
        EXPECT_NEAR(full.e2, e.e2, 1e-12);
    }
}

TEST(Ellipticity, CanonicalAngle) {
    EXPECT_DOUBLE_EQ(canonical_angle(0.0), 0.0);
    EXPECT_NEAR(canonical_angle(kPi + 0.25), 0.25, 1e-15);
    EXPECT_NEAR(canonical_angle(-0.25), kPi - 0.25, 1e-15);
    EXPECT_LT(canonical_angle(kPi), kPi);
}

TEST(EllipticityError, Values) {
    EXPECT_EQ(ellipticity_error({0.2, 0.1}, {0.2, 0.1}), 0.0);
    EXPECT_DOUBLE_EQ(ellipticity_error({0.6, 0}, {0, 0}), 0.6);
    EXPECT_NEAR(ellipticity_error({0.3, 0.4}, {-0.3, -0.4}), 1.0, 1e-15);
}

TEST(EllipticityError, MetricProperties) {
    SplitMix64 rng(14);
    auto draw = [&] { return Ellipticity{rng.uniform() * 1.4 - 0.7, rng.uniform() * 1.4 - 0.7}; };
    for (int i = 0; i < 10000; ++i) {
        const auto a = draw(), b = draw(), c = draw();
        EXPECT_EQ(ellipticity_error(a, b), ellipticity_error(b, a));
        EXPECT_LE(ellipticity_error(a, c), ellipticity_error(a, b) + ellipticity_error(b, c) + 1e-15);
        EXPECT_GE(ellipticity_error(a, b), 0.0);
    }
}
