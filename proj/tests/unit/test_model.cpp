#include "galbnn/errors.hpp"
#include "galbnn/model.hpp"
#include "galbnn/rng.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace galbnn;
using galbnn::testing::check_entries;

namespace {

std::vector<float> random_stamp(int size, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<float> s(static_cast<std::size_t>(size) * size);
    for (auto& v : s) v = static_cast<float>(rng.uniform() * 10.0);
    return s;
}

// Counter-clockwise quarter turn of a square image (row-major).
std::vector<float> rot90(const std::vector<float>& s, int n) {
    std::vector<float> r(s.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) r[static_cast<std::size_t>(n - 1 - j) * n + i] = s[static_cast<std::size_t>(i) * n + j];
    return r;
}

ArchitectureConfig tiny_arch() {
    ArchitectureConfig a;
    a.stamp_size = 12;
    a.crop_size = 8;
    a.conv = {{2, 3, true}, {3, 3, false}};
    a.fc_width_plain = 5;
    a.fc_width_mvn = 6;
    a.maxout_pieces = 2;
    return a;
}

std::array<double, 5> raw_for(const Sym2& cov, const Vec2& mu, double floor) {
    const double l11 = std::sqrt(cov.xx);
    const double l21 = cov.xy / l11;
    const double l22 = std::sqrt(cov.yy - l21 * l21);
    return {mu.x, mu.y, softplus_inverse(l11 - floor), l21, softplus_inverse(l22 - floor)};
}

}  // namespace

TEST(Views, SymmetricInputGivesIdenticalViews) {
    const int n = 10, c = 6;
    std::vector<float> s(n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) s[i * n + j] = static_cast<float>(std::hypot(i - 4.5, j - 4.5));
    const auto v = augment_views<float>(s, n, c);
    ASSERT_EQ(v.size(), static_cast<std::size_t>(kViews * c * c));
    for (int k = 1; k < kViews; ++k)
        for (int p = 0; p < c * c; ++p) EXPECT_EQ(v[k * c * c + p], v[p]);
    EXPECT_EQ(v, augment_views<float>(s, n, c));
}

TEST(Views, FirstViewIsCenterCrop) {
    const int n = 10, c = 6;
    const auto s = random_stamp(n, 1);
    const auto v = augment_views<float>(s, n, c);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) EXPECT_EQ(v[i * c + j], s[(i + 2) * n + j + 2]);
}

TEST(Views, RotationCyclesViews) {
    const int n = 12, c = 8;
    const auto s = random_stamp(n, 2);
    const auto v = augment_views<float>(s, n, c);
    const auto w = augment_views<float>(rot90(s, n), n, c);
    const std::size_t block = c * c;
    // View k of the rotated stamp is view k+1 of the original.
    for (int k = 0; k < kViews; ++k)
        for (std::size_t p = 0; p < block; ++p) EXPECT_EQ(w[k * block + p], v[((k + 1) % kViews) * block + p]);
}

TEST(Views, PreparedInputIsRmsNormalized) {
    ArchitectureConfig a = tiny_arch();
    const auto s = random_stamp(a.stamp_size, 3);
    const auto in = prepare_input<double>(s, a);
    double ss = 0;
    for (int p = 0; p < a.crop_size * a.crop_size; ++p) ss += in[p] * in[p];
    EXPECT_NEAR(std::sqrt(ss / (a.crop_size * a.crop_size)), 1.0, 1e-12);
    const std::vector<float> zeros(a.stamp_size * a.stamp_size, 0.f);
    for (double v : prepare_input<double>(zeros, a)) EXPECT_EQ(v, 0.0);
}

TEST(HeadToMvn, Identity) {
    const double floor = 1e-3;
    const double s = softplus_inverse(1 - floor);
    const std::array<double, 5> raw{0, 0, s, 0, s};
    const MvnPrediction p = head_to_mvn(raw, floor);
    EXPECT_NEAR(p.cov.xx, 1, 1e-12);
    EXPECT_NEAR(p.cov.xy, 0, 1e-15);
    EXPECT_NEAR(p.cov.yy, 1, 1e-12);
}

TEST(HeadToMvn, HandComputedCholesky) {
    const double floor = 1e-3;
    const double s = softplus_inverse(1 - floor);
    const std::array<double, 5> raw{0.1, -0.2, s, 3, s};
    const MvnPrediction p = head_to_mvn(raw, floor);
    EXPECT_NEAR(p.cov.xx, 1, 1e-12);
    EXPECT_NEAR(p.cov.xy, 3, 1e-12);
    EXPECT_NEAR(p.cov.yy, 10, 1e-12);
    EXPECT_EQ(p.mu.x, 0.1);
    EXPECT_EQ(p.mu.y, -0.2);
}

TEST(HeadToMvn, AlwaysPositiveDefinite) {
    SplitMix64 rng(4);
    std::normal_distribution<double> d(0, 10);
    const double floor = 1e-3;
    for (int i = 0; i < 10000; ++i) {
        std::array<double, 5> raw;
        for (auto& r : raw) r = d(rng);
        const MvnPrediction p = head_to_mvn(raw, floor);
        EXPECT_EQ(p.cov.xy, p.l11 * p.l21);
        EXPECT_GE(p.cov.det(), std::pow(floor, 4) * (1 - 1e-9));
        // Tolerance scales with the cancelling terms of xx*yy - xy^2.
        EXPECT_NEAR(p.cov.det(), p.l11 * p.l11 * p.l22 * p.l22, 1e-14 * (p.cov.xx * p.cov.yy + p.cov.xy * p.cov.xy));
        EXPECT_GT(p.cov.xx, 0);
    }
    const std::array<double, 5> bad{0, std::nan(""), 0, 0, 0};
    EXPECT_THROW(head_to_mvn(bad, floor), NumericError);
}

TEST(Softplus, InverseAndStability) {
    for (double y : {1e-6, 0.1, 1.0, 5.0, 50.0}) EXPECT_NEAR(softplus(softplus_inverse(y)), y, 1e-12 * std::max(1.0, y));
    EXPECT_NEAR(softplus(800.0), 800.0, 1e-9);
    EXPECT_GT(softplus(-800.0), -1e-300);
}

TEST(Loss, NllValues) {
    MvnPrediction p;
    p.cov = Sym2::identity();
    EXPECT_NEAR(nll_loss(p, {0, 0}), std::log(2 * kPi), 1e-14);
    EXPECT_NEAR(nll_loss(p, {0, 0}), 1.8379, 1e-4);
    EXPECT_NEAR(nll_loss(p, {1, 0}), std::log(2 * kPi) + 0.5, 1e-14);
}

TEST(Loss, L2Values) {
    EXPECT_EQ(l2_loss({0.2, 0.3}, {0.2, 0.3}), 0.0);
    EXPECT_DOUBLE_EQ(l2_loss({1, 0}, {0, 0}), 1.0);
    EXPECT_NEAR(l2_loss({0.6, 0}, {0, 0}), 0.36, 1e-15);
}

TEST(Loss, NllGradientMatchesFiniteDifferences) {
    SplitMix64 rng(5);
    std::normal_distribution<double> d(0, 1);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> raw(5);
        for (auto& r : raw) r = d(rng);
        const Ellipticity y{0.5 * d(rng), 0.5 * d(rng)};
        const auto g = nll_gradient(head_to_mvn(raw, 1e-3), y);
        std::vector<double> analytic(g.begin(), g.end());
        auto loss = [&] { return nll_loss(head_to_mvn(raw, 1e-3), y); };
        EXPECT_LT(check_entries(raw, analytic, loss, 1e-6), 1e-6);
    }
}

TEST(Loss, CovarianceGradientVanishesAtEmpiricalMoment) {
    SplitMix64 rng(6);
    std::normal_distribution<double> d(0, 0.2);
    const Vec2 mu{0.1, -0.05};
    std::vector<Ellipticity> ys;
    Sym2 m;
    for (int i = 0; i < 400; ++i) {
        ys.push_back({mu.x + d(rng), mu.y + 0.5 * d(rng) + 0.3 * (ys.empty() ? 0 : 0)});
        const Vec2 r{ys.back().e1 - mu.x, ys.back().e2 - mu.y};
        m = m + Sym2::outer(r) * (1.0 / 400);
    }
    const auto raw = raw_for(m, mu, 1e-3);
    std::array<double, 5> total{};
    for (const auto& y : ys) {
        const auto g = nll_gradient(head_to_mvn(raw, 1e-3), y);
        for (int k = 0; k < 5; ++k) total[k] += g[k];
    }
    for (int k = 2; k < 5; ++k) EXPECT_NEAR(total[k], 0.0, 1e-9) << k;
}

TEST(Architecture, ShapeLedger) {
    ArchitectureConfig ref = preset("faithful").arch;
    EXPECT_EQ(ref.crop_size, 45);
    EXPECT_EQ(ref.view_features(), 3200);
    EXPECT_EQ(ref.concat_features(), 12800);
    EXPECT_EQ(ref.fc_width(HeadKind::MvnNll), 4096);
    const ArchitectureConfig desk = preset("desk").arch;
    EXPECT_EQ(desk.view_features(), desk.trunk_side() * desk.trunk_side() * desk.conv.back().channels);
    EXPECT_EQ(desk.concat_features(), 4 * desk.view_features());
    Network<float> net(desk, HeadKind::MvnNll);
    net.initialize(1);
    std::vector<float> stamp(32 * 32, 1.f);
    const auto x = make_input_batch<float>({stamp, stamp}, desk);
    const auto f = net.forward_trunk(x, {});
    EXPECT_EQ(f.shape(), (nn::Tensor<float>::Shape{8, static_cast<std::size_t>(desk.view_features())}));
    EXPECT_EQ(net.forward_head(f, {}).shape(), (nn::Tensor<float>::Shape{2, 5}));
}

TEST(Network, ViewPermutationChangesOutput) {
    const ArchitectureConfig a = tiny_arch();
    Network<double> net(a, HeadKind::MvnNll);
    net.initialize(7);
    const auto s = random_stamp(a.stamp_size, 8);
    const auto x = make_input_batch<double>({s}, a);
    const auto f = net.forward_trunk(x, {});
    auto g = f;
    const std::size_t w = f.dim(1);
    for (std::size_t j = 0; j < w; ++j) std::swap(g[j], g[w + j]);
    const auto y0 = net.forward_head(f, {}), y1 = net.forward_head(g, {});
    bool differ = false;
    for (std::size_t i = 0; i < y0.size(); ++i) differ |= y0[i] != y1[i];
    EXPECT_TRUE(differ);
}

TEST(Network, NllHeadGradientCheck) {
    const ArchitectureConfig a = tiny_arch();
    Network<double> net(a, HeadKind::MvnNll);
    net.initialize(9);
    std::vector<std::vector<float>> stamps;
    for (int i = 0; i < 3; ++i) stamps.push_back(random_stamp(a.stamp_size, 10 + i));
    const auto x = make_input_batch<double>({stamps[0], stamps[1], stamps[2]}, a);
    const std::vector<Ellipticity> y{{0.2, -0.1}, {-0.3, 0.05}, {0.0, 0.4}};
    const nn::ForwardContext ctx{nn::Mode::Train, 77, {}};
    auto loss = [&] {
        const auto out = net.forward(x, ctx);
        double s = 0;
        for (std::size_t n = 0; n < 3; ++n) s += nll_loss(head_to_mvn({&out[n * 5], 5}, a.sigma_floor), y[n]);
        return s;
    };
    net.zero_grad();
    const auto out = net.forward(x, ctx);
    nn::Tensor<double> grad({3, 5});
    for (std::size_t n = 0; n < 3; ++n) {
        const auto g = nll_gradient(head_to_mvn({&out[n * 5], 5}, a.sigma_floor), y[n]);
        for (int k = 0; k < 5; ++k) grad[n * 5 + k] = g[k];
    }
    net.backward(grad);
    for (auto* p : net.params()) {
        const auto analytic = p->grad.storage();
        EXPECT_LT(check_entries(p->value.storage(), analytic, loss, 1e-6), 1e-4) << p->name;
    }
}

TEST(Network, BackwardRequiresTrainTrunk) {
    const ArchitectureConfig a = tiny_arch();
    Network<double> net(a, HeadKind::PlainL2);
    net.initialize(1);
    const auto s = random_stamp(a.stamp_size, 1);
    net.forward(make_input_batch<double>({s, s}, a), {});
    EXPECT_THROW(net.backward(nn::Tensor<double>({2, 2}, 1.0)), UsageError);
}

TEST(Network, MvnDiagonalBiasStartsAtOneTenth) {
    Network<float> net(preset("desk").arch, HeadKind::MvnNll);
    net.initialize(3);
    auto& out = dynamic_cast<nn::Dense<float>&>(net.head().layer(net.head().size() - 1));
    EXPECT_NEAR(softplus(out.bias().value[2]), 0.1, 1e-6);
    EXPECT_NEAR(softplus(out.bias().value[4]), 0.1, 1e-6);
    EXPECT_EQ(out.bias().value[0], 0.f);
    EXPECT_EQ(out.bias().value[3], 0.f);
}

TEST(Transfer, TrunkBitwiseHeadFresh) {
    const ArchitectureConfig a = tiny_arch();
    Network<double> src(a, HeadKind::PlainL2), dst(a, HeadKind::MvnNll);
    src.initialize(1);
    dst.initialize(2);
    // Perturb BN statistics so the copy is non-trivial.
    const auto s = random_stamp(a.stamp_size, 5);
    src.forward(make_input_batch<double>({s, s}, a), {nn::Mode::Train, 1, {}});
    transfer_trunk(src, dst, 33);
    const auto x = make_input_batch<double>({random_stamp(a.stamp_size, 6)}, a);
    EXPECT_EQ(src.forward_trunk(x, {}), dst.forward_trunk(x, {}));
    auto sp = src.head().named_params();
    auto dp = dst.head().named_params();
    EXPECT_NE(sp[0].param->value, dp[0].param->value);
    const auto before = dst.export_tensors();
    transfer_trunk(src, dst, 33);
    EXPECT_EQ(before, dst.export_tensors());
}

TEST(Transfer, ArchitectureMismatch) {
    ArchitectureConfig a = tiny_arch(), b = tiny_arch();
    b.conv[0].channels = 4;
    Network<double> src(a, HeadKind::PlainL2), dst(b, HeadKind::MvnNll);
    src.initialize(1);
    dst.initialize(1);
    EXPECT_THROW(transfer_trunk(src, dst, 1), MismatchError);
}

TEST(Network, ExportImportRoundTrip) {
    const ArchitectureConfig a = tiny_arch();
    Network<float> n1(a, HeadKind::MvnNll), n2(a, HeadKind::MvnNll);
    n1.initialize(1);
    n2.initialize(2);
    n2.import_tensors(n1.export_tensors());
    EXPECT_EQ(n1.export_tensors(), n2.export_tensors());
    auto t = n1.export_tensors();
    t.pop_back();
    EXPECT_THROW(n2.import_tensors(t), MismatchError);
    auto dup = n1.export_tensors();
    dup.push_back(dup.front());
    EXPECT_THROW(n2.import_tensors(dup), MismatchError);
}

TEST(Network, ArchitectureJsonRoundTrip) {
    const ArchitectureConfig a = preset("desk").arch;
    const auto j = architecture_json(a, HeadKind::MvnNll);
    EXPECT_EQ(head_from_json(j), HeadKind::MvnNll);
    EXPECT_EQ(arch_config_from_json(j.at("config")), a);
}
