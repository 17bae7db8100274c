#include "galbnn/bayes.hpp"

#include "galbnn/errors.hpp"
#include "galbnn/parallel.hpp"
#include "galbnn/rng.hpp"

#include <cmath>

namespace galbnn {

namespace {

constexpr std::size_t kChunk = 16;

}  // namespace

std::uint64_t mc_sample_seed(std::uint64_t base_seed, std::uint64_t k) { return derive_seed(base_seed, k); }

std::vector<McEnsemble> sample_ensembles(const Network<float>& model, const std::vector<std::span<const float>>& stamps,
                                         int k, const std::vector<std::uint64_t>& base_seeds) {
    if (k < 1) throw ContractError("MC sampling needs K >= 1");
    if (model.head_kind() != HeadKind::MvnNll) throw ContractError("MC sampling needs an MVN-headed model");
    if (stamps.size() != base_seeds.size()) throw ShapeError("one base seed per stamp is required");
    const std::size_t n = stamps.size();
    const auto kk = static_cast<std::size_t>(k);
    std::vector<McEnsemble> out(n);
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    const double floor = model.arch().sigma_floor;

    parallel_for(chunks, [&](std::size_t c) {
        Network<float> net = model;
        const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
        std::vector<std::span<const float>> batch(stamps.begin() + lo, stamps.begin() + hi);
        const nn::Tensor<float> x = make_input_batch<float>(batch, net.arch());
        const nn::Tensor<float> feats = net.forward_trunk(x, {nn::Mode::EvalDeterministic, 0, {}});

        // Replicate each stamp's four view rows once per pass: row (s * P + j)
        // of the head batch is sample j of stamp s. Without dropout every
        // sample is the same, so one pass serves all K.
        const std::size_t m = hi - lo;
        const std::size_t f = feats.dim(1);
        const std::size_t passes = net.dropout_active() ? kk : 1;
        nn::Tensor<float> rep({m * passes * kViews, f});
        std::vector<std::uint64_t> row_seeds(m * passes);
        for (std::size_t s = 0; s < m; ++s) {
            const float* src = feats.data() + s * kViews * f;
            for (std::size_t j = 0; j < passes; ++j) {
                std::copy(src, src + kViews * f, rep.data() + (s * passes + j) * kViews * f);
                row_seeds[s * passes + j] = mc_sample_seed(base_seeds[lo + s], j);
            }
        }
        const nn::Tensor<float> y = net.forward_head(rep, {nn::Mode::EvalMcDropout, 0, row_seeds});
        for (std::size_t s = 0; s < m; ++s) {
            McEnsemble& e = out[lo + s];
            e.base_seed = base_seeds[lo + s];
            e.samples.reserve(kk);
            for (std::size_t j = 0; j < kk; ++j) {
                e.seeds.push_back(mc_sample_seed(base_seeds[lo + s], j));
                const std::size_t row = s * passes + std::min(j, passes - 1);
                std::array<double, 5> raw;
                for (int r = 0; r < 5; ++r) raw[r] = y[row * 5 + r];
                try {
                    e.samples.push_back(head_to_mvn(raw, floor));
                } catch (const NumericError&) {
                    throw NumericError("non-finite head output in MC sample " + std::to_string(j) + " of stamp " +
                                       std::to_string(lo + s));
                }
            }
        }
    });
    return out;
}

McEnsemble sample_ensemble(const Network<float>& model, std::span<const float> stamp, int k, std::uint64_t base_seed) {
    return sample_ensembles(model, {stamp}, k, {base_seed}).front();
}

McEnsemble ensemble_from_raw(std::span<const double> raw, double sigma_floor, std::uint64_t base_seed) {
    if (raw.size() % 5 != 0) throw ShapeError("raw MC outputs must come in groups of 5");
    McEnsemble e;
    e.base_seed = base_seed;
    for (std::size_t j = 0; j < raw.size() / 5; ++j) {
        e.seeds.push_back(mc_sample_seed(base_seed, j));
        e.samples.push_back(head_to_mvn(raw.subspan(j * 5, 5), sigma_floor));
    }
    return e;
}

double clamped_det(const Sym2& m) {
    const double d = m.det();
    return (d < 0.0 && d >= -1e-12) ? 0.0 : d;
}

UncertaintySplit decompose(const McEnsemble& ens) {
    const std::size_t k = ens.k();
    if (k < 2) throw ContractError("decomposition requires K >= 2, got K = " + std::to_string(k));
    const double inv_k = 1.0 / static_cast<double>(k);
    UncertaintySplit s;
    Vec2 sum_mu;
    Sym2 sum_cov{0.0, 0.0, 0.0};
    for (const auto& p : ens.samples) {
        sum_mu.x += p.mu.x;
        sum_mu.y += p.mu.y;
        sum_cov = sum_cov + p.cov;
    }
    s.mu_bar = {sum_mu.x * inv_k, sum_mu.y * inv_k};
    s.sigma_aleat = sum_cov * inv_k;
    Sym2 spread{0.0, 0.0, 0.0};
    for (const auto& p : ens.samples) spread = spread + Sym2::outer({p.mu.x - s.mu_bar.x, p.mu.y - s.mu_bar.y});
    s.sigma_epist = spread * inv_k;
    s.sigma_pred = s.sigma_aleat + s.sigma_epist;
    s.u_aleat = clamped_det(s.sigma_aleat);
    s.u_epist = clamped_det(s.sigma_epist);
    s.u_pred = clamped_det(s.sigma_pred);
    return s;
}

double gaussian_entropy(double det) {
    const double two_pi_e = 2.0 * kPi * std::exp(1.0);
    return std::log(std::sqrt(two_pi_e * two_pi_e * det));
}

ScalarUncertainties scalar_uncertainties(const UncertaintySplit& s) {
    const double a = clamped_det(s.sigma_aleat), e = clamped_det(s.sigma_epist), p = clamped_det(s.sigma_pred);
    return {a, e, p, gaussian_entropy(a), gaussian_entropy(e), gaussian_entropy(p)};
}

double chi2_2dof_quantile(double level) {
    if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence level must lie in (0, 1)");
    return -2.0 * std::log1p(-level);
}

ConfidenceEllipse confidence_ellipse(const Sym2& m, const Vec2& center, double level) {
    const double scale = chi2_2dof_quantile(level);
    const SymEigen2 e = eigen(m);
    if (!(e.values[0] > 0.0)) throw NumericError("confidence ellipse needs a positive definite matrix");
    ConfidenceEllipse out;
    out.center = center;
    out.semi_major = std::sqrt(e.values[1] * scale);
    out.semi_minor = std::sqrt(e.values[0] * scale);
    out.angle = std::atan2(e.vectors[1].y, e.vectors[1].x);
    return out;
}

}  // namespace galbnn
