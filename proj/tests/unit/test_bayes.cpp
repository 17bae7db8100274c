#include "galbnn/bayes.hpp"
#include "galbnn/errors.hpp"
#include "galbnn/rng.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <random>

using namespace galbnn;

namespace {

MvnPrediction mvn(Vec2 mu, Sym2 cov) {
    MvnPrediction p;
    p.mu = mu;
    p.cov = cov;
    return p;
}

McEnsemble random_ensemble(std::size_t k, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::normal_distribution<double> d(0, 0.3);
    McEnsemble e;
    for (std::size_t i = 0; i < k; ++i) {
        const double a = std::fabs(d(rng)) + 0.01, c = std::fabs(d(rng)) + 0.01, b = d(rng);
        // L L^T with L = [[a, 0], [b, c]].
        e.samples.push_back(mvn({d(rng), d(rng)}, {a * a, a * b, b * b + c * c}));
        e.seeds.push_back(i);
    }
    return e;
}

// Covariance of the equal-weight mixture from raw second moments.
Sym2 mixture_covariance(const McEnsemble& e) {
    long double m1x = 0, m1y = 0, sxx = 0, sxy = 0, syy = 0;
    const long double k = e.k();
    for (const auto& s : e.samples) {
        m1x += s.mu.x / k;
        m1y += s.mu.y / k;
        sxx += (s.cov.xx + static_cast<long double>(s.mu.x) * s.mu.x) / k;
        sxy += (s.cov.xy + static_cast<long double>(s.mu.x) * s.mu.y) / k;
        syy += (s.cov.yy + static_cast<long double>(s.mu.y) * s.mu.y) / k;
    }
    return {static_cast<double>(sxx - m1x * m1x), static_cast<double>(sxy - m1x * m1y),
            static_cast<double>(syy - m1y * m1y)};
}

ArchitectureConfig tiny_arch() {
    ArchitectureConfig a;
    a.stamp_size = 12;
    a.crop_size = 8;
    a.conv = {{2, 3, true}, {3, 3, false}};
    a.fc_width_plain = 5;
    a.fc_width_mvn = 6;
    return a;
}

std::vector<float> stamp(std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<float> s(144);
    for (auto& v : s) v = static_cast<float>(rng.uniform() * 5);
    return s;
}

}  // namespace

TEST(Decompose, IdenticalSamples) {
    McEnsemble e;
    const Sym2 cov{0.3, 0.1, 0.2};
    for (int i = 0; i < 5; ++i) e.samples.push_back(mvn({0.2, -0.1}, cov));
    const auto s = decompose(e);
    EXPECT_EQ(s.sigma_epist, Sym2{});
    EXPECT_NEAR(s.sigma_pred.xx, cov.xx, 1e-15);
    EXPECT_NEAR(s.sigma_pred.xy, cov.xy, 1e-15);
    EXPECT_NEAR(s.sigma_pred.yy, cov.yy, 1e-15);
    EXPECT_EQ(s.u_epist, 0.0);
}

TEST(Decompose, TwoSampleHandExample) {
    McEnsemble e;
    e.samples = {mvn({0, 0}, Sym2::identity()), mvn({2, 0}, Sym2::identity())};
    const auto s = decompose(e);
    EXPECT_EQ(s.mu_bar, (Vec2{1, 0}));
    EXPECT_EQ(s.sigma_aleat, Sym2::identity());
    EXPECT_EQ(s.sigma_epist, (Sym2{1, 0, 0}));
    EXPECT_EQ(s.sigma_pred, (Sym2{2, 0, 1}));
    EXPECT_EQ(s.u_epist, 0.0);
    EXPECT_EQ(s.u_pred, 2.0);
}

TEST(Decompose, RejectsSingleSample) {
    McEnsemble e;
    e.samples = {mvn({0, 0}, Sym2::identity())};
    EXPECT_THROW(decompose(e), ContractError);
}

TEST(Decompose, MatchesMixtureMomentOracle) {
    for (std::uint64_t t = 0; t < 500; ++t) {
        const auto e = random_ensemble(2 + t % 5, t);
        const auto s = decompose(e);
        EXPECT_LT((s.sigma_pred - mixture_covariance(e)).max_abs(), 1e-10);
        EXPECT_LT((s.sigma_aleat + s.sigma_epist - s.sigma_pred).max_abs(), 1e-10);
    }
}

TEST(Decompose, IdentityAtLargeK) {
    const auto e = random_ensemble(10000, 99);
    const auto s = decompose(e);
    EXPECT_LT((s.sigma_aleat + s.sigma_epist - s.sigma_pred).max_abs(), 1e-10);
    EXPECT_LT((s.sigma_pred - mixture_covariance(e)).max_abs(), 1e-10);
}

TEST(Decompose, EpistemicIsPsd) {
    for (std::uint64_t t = 0; t < 2000; ++t) {
        const auto s = decompose(random_ensemble(2 + t % 64, 1000 + t));
        EXPECT_GE(eigen(s.sigma_epist).values[0], -1e-12);
        EXPECT_GE(s.u_epist, 0.0);
        EXPECT_GT(s.sigma_aleat.det(), 0.0);
    }
}

TEST(Decompose, SpreadScaling) {
    for (std::uint64_t t = 0; t < 200; ++t) {
        const auto e = random_ensemble(8, 5000 + t);
        const auto s = decompose(e);
        auto scaled = e;
        for (auto& p : scaled.samples) p.mu = {s.mu_bar.x + 3 * (p.mu.x - s.mu_bar.x), s.mu_bar.y + 3 * (p.mu.y - s.mu_bar.y)};
        const auto r = decompose(scaled);
        EXPECT_EQ(r.sigma_aleat, s.sigma_aleat);
        EXPECT_LT((r.sigma_epist - s.sigma_epist * 9).max_abs(), 1e-12 * std::max(1.0, s.sigma_epist.max_abs() * 9));
    }
}

TEST(Scalars, DeterminantsAndEntropy) {
    UncertaintySplit s;
    s.sigma_aleat = Sym2::identity();
    s.sigma_pred = Sym2::identity();
    const auto u = scalar_uncertainties(s);
    EXPECT_EQ(u.u_aleat, 1.0);
    EXPECT_EQ(u.u_epist, 0.0);
    EXPECT_NEAR(u.h_pred, std::log(2 * kPi * std::exp(1.0)), 1e-14);
    EXPECT_NEAR(gaussian_entropy(1.0), 2.8379, 1e-4);
    const Sym2 m{0.7, 0.2, 0.4};
    EXPECT_NEAR((m * 3).det(), 9 * m.det(), 1e-14);
    EXPECT_EQ(clamped_det({1e-7, 0, -1e-6}), 0.0);
    EXPECT_LT(clamped_det({1, 0, -1}), 0.0);
}

TEST(Ellipse, QuantileAndCircle) {
    EXPECT_NEAR(chi2_2dof_quantile(0.9), 4.60517, 1e-5);
    EXPECT_NEAR(chi2_2dof_quantile(0.9), -2 * std::log(0.1), 1e-14);
    const auto c = confidence_ellipse(Sym2::identity(), {0, 0}, 0.9);
    EXPECT_NEAR(c.semi_major, 2.1460, 1e-4);
    EXPECT_NEAR(c.semi_minor, c.semi_major, 1e-14);
    EXPECT_THROW(chi2_2dof_quantile(1.0), DomainError);
    EXPECT_THROW(chi2_2dof_quantile(0.0), DomainError);
    EXPECT_THROW(confidence_ellipse({1, 2, 1}, {0, 0}, 0.9), NumericError);
}

TEST(Ellipse, AxisAligned) {
    const auto c = confidence_ellipse({4, 0, 1}, {0.1, 0.2}, 0.9);
    EXPECT_NEAR(c.semi_major / c.semi_minor, 2.0, 1e-14);
    EXPECT_NEAR(std::sin(c.angle), 0.0, 1e-14);
    EXPECT_EQ(c.center, (Vec2{0.1, 0.2}));
}

TEST(Ellipse, Coverage) {
    const Sym2 m{2.0, 0.8, 0.7};
    const auto c = confidence_ellipse(m, {0, 0}, 0.9);
    const double l11 = std::sqrt(m.xx), l21 = m.xy / l11, l22 = std::sqrt(m.yy - l21 * l21);
    SplitMix64 rng(8);
    std::normal_distribution<double> d;
    int inside = 0;
    const int n = 100000;
    const double ca = std::cos(c.angle), sa = std::sin(c.angle);
    for (int i = 0; i < n; ++i) {
        const double a = d(rng), b = d(rng);
        const double x = l11 * a, y = l21 * a + l22 * b;
        const double u = x * ca + y * sa, v = -x * sa + y * ca;
        if (u * u / (c.semi_major * c.semi_major) + v * v / (c.semi_minor * c.semi_minor) <= 1) ++inside;
    }
    EXPECT_NEAR(static_cast<double>(inside) / n, 0.9, 0.005);
}

TEST(Sampling, DeterministicAndDropoutOffCollapses) {
    Network<float> net(tiny_arch(), HeadKind::MvnNll);
    net.initialize(1);
    const auto s = stamp(2);
    const auto a = sample_ensemble(net, s, 6, 42), b = sample_ensemble(net, s, 6, 42);
    ASSERT_EQ(a.k(), 6u);
    for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_EQ(a.samples[k].raw, b.samples[k].raw);
        EXPECT_EQ(a.seeds[k], mc_sample_seed(42, k));
    }
    EXPECT_NE(a.samples[0].raw, a.samples[1].raw);
    net.set_dropout_rate(0.0);
    const auto c = sample_ensemble(net, s, 5, 42);
    for (std::size_t k = 1; k < 5; ++k) EXPECT_EQ(c.samples[k].raw, c.samples[0].raw);
    EXPECT_EQ(decompose(c).u_epist, 0.0);
}

TEST(Sampling, SingleSampleValidButNotDecomposable) {
    Network<float> net(tiny_arch(), HeadKind::MvnNll);
    net.initialize(1);
    const auto e = sample_ensemble(net, stamp(3), 1, 7);
    EXPECT_EQ(e.k(), 1u);
    EXPECT_THROW(decompose(e), ContractError);
}

TEST(Sampling, BatchedMatchesSingleAndThreadIndependent) {
    Network<float> net(tiny_arch(), HeadKind::MvnNll);
    net.initialize(4);
    std::vector<std::vector<float>> data;
    std::vector<std::span<const float>> views;
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < 37; ++i) {
        data.push_back(stamp(100 + i));
        seeds.push_back(derive_seed(9, i));
    }
    for (const auto& d : data) views.emplace_back(d);
    setenv("GALBNN_THREADS", "1", 1);
    const auto one = sample_ensembles(net, views, 4, seeds);
    setenv("GALBNN_THREADS", "3", 1);
    const auto three = sample_ensembles(net, views, 4, seeds);
    unsetenv("GALBNN_THREADS");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto single = sample_ensemble(net, views[i], 4, seeds[i]);
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_EQ(one[i].samples[k].raw, three[i].samples[k].raw);
            // Batch position changes GEMM kernels, so agreement is to float precision.
            for (int r = 0; r < 5; ++r)
                EXPECT_NEAR(one[i].samples[k].raw[r], single.samples[k].raw[r], 1e-5 * (1 + std::fabs(single.samples[k].raw[r])));
        }
    }
}

TEST(Sampling, RejectsPlainHead) {
    Network<float> net(tiny_arch(), HeadKind::PlainL2);
    net.initialize(1);
    EXPECT_THROW(sample_ensemble(net, stamp(1), 3, 1), ContractError);
}

TEST(Sampling, EnsembleFromRawRebuilds) {
    Network<float> net(tiny_arch(), HeadKind::MvnNll);
    net.initialize(6);
    const auto e = sample_ensemble(net, stamp(5), 5, 11);
    std::vector<double> raw;
    for (const auto& p : e.samples) raw.insert(raw.end(), p.raw.begin(), p.raw.end());
    const auto r = ensemble_from_raw(raw, net.arch().sigma_floor, 11);
    ASSERT_EQ(r.k(), 5u);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r.samples[k].cov, e.samples[k].cov);
    EXPECT_EQ(r.seeds, e.seeds);
}
