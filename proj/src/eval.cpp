#include "galbnn/eval.hpp"

#include "galbnn/errors.hpp"
#include "galbnn/rng.hpp"
#include "galbnn/store.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace galbnn {

std::optional<Vec2> standardize(const Vec2& mu_bar, const Sym2& sigma_pred, const Ellipticity& target) {
    if (!(eigen(sigma_pred).values[0] >= 1e-12)) return std::nullopt;
    const Sym2 inv_sqrt = apply_spectral(sigma_pred, [](double l) { return 1.0 / std::sqrt(l); });
    return inv_sqrt * Vec2{target.e1 - mu_bar.x, target.e2 - mu_bar.y};
}

Histogram make_histogram(std::span<const double> values, int bins) {
    if (bins < 1) throw DomainError("histogram needs at least one bin");
    Histogram h;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    if (values.empty()) return h;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    h.lo = *lo;
    h.hi = *hi;
    if (h.hi == h.lo) {
        h.lo -= 0.5;
        h.hi += 0.5;
    }
    const double width = (h.hi - h.lo) / bins;
    for (double v : values) {
        auto b = static_cast<long>((v - h.lo) / width);
        b = std::clamp<long>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

double ks_statistic_normal(std::span<const double> sample) {
    if (sample.empty()) throw DomainError("KS statistic of an empty sample");
    std::vector<double> s(sample.begin(), sample.end());
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    double d = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double f = 0.5 * std::erfc(-s[i] / std::sqrt(2.0));
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    return d;
}

double ks_p_value(double d, std::size_t n) {
    const double sn = std::sqrt(static_cast<double>(n));
    const double lambda = (sn + 0.12 + 0.11 / sn) * d;
    if (lambda < 0.2) return 1.0;
    double sum = 0.0;
    for (int j = 1; j <= 100; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += (j % 2 ? 1.0 : -1.0) * term;
        if (term < 1e-16) break;
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

ComponentStats component_stats(std::span<const double> z, int bins) {
    ComponentStats c;
    c.histogram = make_histogram(z, bins);
    if (z.empty()) return c;
    const double n = static_cast<double>(z.size());
    c.mean = std::accumulate(z.begin(), z.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : z) ss += (v - c.mean) * (v - c.mean);
    c.stddev = std::sqrt(ss / n);
    c.ks = ks_statistic_normal(z);
    c.ks_p = ks_p_value(c.ks, z.size());
    return c;
}

CalibrationReport calibration_report(std::span<const UncertaintySplit> predictions, std::span<const Ellipticity> targets,
                                     int bins) {
    if (predictions.size() != targets.size()) throw ShapeError("one target per prediction is required");
    CalibrationReport r;
    double ratio = 0.0;
    std::size_t ratio_n = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const UncertaintySplit& s = predictions[i];
        const auto z = standardize(s.mu_bar, s.sigma_pred, targets[i]);
        if (!z) {
            ++r.excluded;
            continue;
        }
        r.z1.push_back(z->x);
        r.z2.push_back(z->y);
        if (s.u_pred > 0.0) {
            ratio += s.u_epist / s.u_pred;
            ++ratio_n;
        }
    }
    r.c1 = component_stats(r.z1, bins);
    r.c2 = component_stats(r.z2, bins);
    r.mean_epist_pred_ratio = ratio_n ? ratio / static_cast<double>(ratio_n) : 0.0;
    return r;
}

RocResult roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positive, std::string name) {
    if (scores.size() != positive.size()) throw ShapeError("one label per score is required");
    RocResult r;
    r.score = std::move(name);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (std::isnan(scores[i])) throw DomainError("NaN score at record " + std::to_string(i));
        (positive[i] ? r.positives : r.negatives) += 1;
    }
    if (r.positives == 0 || r.negatives == 0) throw DomainError("ROC AUC is undefined with a single class");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    const double p = static_cast<double>(r.positives), n = static_cast<double>(r.negatives);
    std::uint64_t tp = 0, fp = 0;
    unsigned __int128 area2 = 0;
    r.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    for (std::size_t i = 0; i < idx.size();) {
        const double s = scores[idx[i]];
        std::uint64_t dtp = 0, dfp = 0;
        for (; i < idx.size() && scores[idx[i]] == s; ++i) (positive[idx[i]] ? dtp : dfp) += 1;
        area2 += static_cast<unsigned __int128>(dfp) * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        r.points.push_back({s, static_cast<double>(fp) / n, static_cast<double>(tp) / p});
    }
    const unsigned __int128 denom = static_cast<unsigned __int128>(2) * r.positives * r.negatives;
    r.auc_numerator = static_cast<std::uint64_t>(area2);
    r.auc_denominator = static_cast<std::uint64_t>(denom);

    // Round area2 / denom to a multiple of 2^-53, ties to even.
    const unsigned __int128 scaled = area2 << 53;
    unsigned __int128 q = scaled / denom;
    const unsigned __int128 rem = scaled % denom;
    if (2 * rem > denom || (2 * rem == denom && (q & 1))) ++q;
    r.auc = std::ldexp(static_cast<double>(static_cast<std::uint64_t>(q)), -53);
    return r;
}

std::vector<double> proportion_grid(int points) {
    if (points < 1) throw DomainError("proportion grid needs at least one point");
    std::vector<double> g;
    for (int i = 1; i <= points; ++i) g.push_back(static_cast<double>(i) / points);
    return g;
}

namespace {

std::size_t prefix_count(double p, std::size_t n) {
    const double x = p * static_cast<double>(n);
    const double r = std::round(x);
    double c = std::fabs(x - r) < 1e-9 ? r : std::ceil(x);
    c = std::clamp(c, 1.0, static_cast<double>(n));
    return static_cast<std::size_t>(c);
}

}  // namespace

ErrorCurve mean_error_curve(std::span<const double> errors, std::span<const double> scores, std::span<const double> grid,
                            std::string name) {
    if (errors.empty()) throw DomainError("error curve of an empty set");
    if (!scores.empty() && scores.size() != errors.size()) throw ShapeError("one score per error is required");
    const std::span<const double> key = scores.empty() ? errors : scores;
    std::vector<std::size_t> idx(errors.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });

    ErrorCurve c;
    c.sorted_by = std::move(name);
    std::vector<double> prefix;
    for (double p : grid) {
        if (!(p > 0.0 && p <= 1.0)) throw DomainError("proportions must lie in (0, 1]");
        const std::size_t count = prefix_count(p, errors.size());
        prefix.resize(count);
        for (std::size_t i = 0; i < count; ++i) prefix[i] = errors[idx[i]];
        std::sort(prefix.begin(), prefix.end());
        double sum = 0.0;
        for (double e : prefix) sum += e;
        c.p.push_back(p);
        c.mean_error.push_back(sum / static_cast<double>(count));
    }
    return c;
}

double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

RegimeResults evaluate_regime(const std::string& regime, const EvalInput& in, const EvalOptions& opt) {
    const std::size_t n = in.splits.size();
    if (in.targets.size() != n || in.is_blend.size() != n) throw ShapeError("evaluation inputs differ in length");
    RegimeResults r;
    r.regime = regime;

    std::vector<UncertaintySplit> iso_splits;
    std::vector<Ellipticity> iso_targets, resampled;
    std::vector<double> epist_iso, epist_blend;
    for (std::size_t i = 0; i < n; ++i) {
        if (in.is_blend[i]) {
            epist_blend.push_back(in.splits[i].u_epist);
            continue;
        }
        iso_splits.push_back(in.splits[i]);
        iso_targets.push_back(in.targets[i]);
        epist_iso.push_back(in.splits[i].u_epist);
        const Sym2& s = in.splits[i].sigma_pred;
        const double l11 = std::sqrt(std::max(s.xx, 0.0));
        const double l21 = l11 > 0.0 ? s.xy / l11 : 0.0;
        const double l22 = std::sqrt(std::max(s.yy - l21 * l21, 0.0));
        SplitMix64 rng(derive_seed(opt.seed, i));
        std::normal_distribution<double> normal;
        const double a = normal(rng), b = normal(rng);
        resampled.push_back({in.splits[i].mu_bar.x + l11 * a, in.splits[i].mu_bar.y + l21 * a + l22 * b});
    }
    r.n_isolated = iso_splits.size();
    r.n_blend = n - iso_splits.size();
    r.isolated_fraction = n ? static_cast<double>(r.n_isolated) / static_cast<double>(n) : 0.0;
    r.calibration = calibration_report(iso_splits, iso_targets, opt.histogram_bins);
    r.calibration_resampled = calibration_report(iso_splits, resampled, opt.histogram_bins);
    if (!epist_iso.empty()) r.median_u_epist_isolated = median(epist_iso);
    if (!epist_blend.empty()) r.median_u_epist_blend = median(epist_blend);

    std::vector<double> aleat(n), epist(n), pred(n), inverse(n), errors(n);
    for (std::size_t i = 0; i < n; ++i) {
        aleat[i] = in.splits[i].u_aleat;
        epist[i] = in.splits[i].u_epist;
        pred[i] = in.splits[i].u_pred;
        inverse[i] = -in.splits[i].u_aleat;
        errors[i] = ellipticity_error({in.splits[i].mu_bar.x, in.splits[i].mu_bar.y}, in.targets[i]);
    }
    if (r.n_isolated > 0 && r.n_blend > 0) {
        r.rocs.push_back(roc_auc(aleat, in.is_blend, "aleatoric"));
        r.rocs.push_back(roc_auc(epist, in.is_blend, "epistemic"));
        r.rocs.push_back(roc_auc(pred, in.is_blend, "predictive"));
        r.rocs.push_back(roc_auc(inverse, in.is_blend, "aleatoric-inverse"));
    }
    const std::vector<double> grid = proportion_grid(opt.grid_points);
    r.curves.push_back(mean_error_curve(errors, {}, grid, "oracle"));
    r.curves.push_back(mean_error_curve(errors, aleat, grid, "aleatoric"));
    r.curves.push_back(mean_error_curve(errors, epist, grid, "epistemic"));
    r.curves.push_back(mean_error_curve(errors, pred, grid, "predictive"));

    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(std::max(opt.scatter_points, 0)), n);
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = j * n / m;
        r.scatter.push_back({in.targets[i], in.splits[i], in.is_blend[i] != 0});
    }
    return r;
}

namespace {

nlohmann::json stats_json(const ComponentStats& c) {
    return {{"mean", c.mean}, {"std", c.stddev}, {"ks", c.ks}, {"ks_p", c.ks_p}};
}

nlohmann::json calibration_json(const CalibrationReport& c) {
    return {{"n", c.z1.size()},
            {"excluded", c.excluded},
            {"z1", stats_json(c.c1)},
            {"z2", stats_json(c.c2)},
            {"mean_epist_pred_ratio", c.mean_epist_pred_ratio}};
}

}  // namespace

nlohmann::json to_json(const RegimeResults& r) {
    nlohmann::json auc = nlohmann::json::object();
    for (const auto& roc : r.rocs)
        auc[roc.score] = {{"auc", roc.auc}, {"numerator", roc.auc_numerator}, {"denominator", roc.auc_denominator}};
    nlohmann::json curves = nlohmann::json::object();
    for (const auto& c : r.curves) curves[c.sorted_by] = c.mean_error;
    return {{"regime", r.regime},
            {"n_isolated", r.n_isolated},
            {"n_blend", r.n_blend},
            {"isolated_fraction", r.isolated_fraction},
            {"calibration", calibration_json(r.calibration)},
            {"calibration_resampled", calibration_json(r.calibration_resampled)},
            {"auc", auc},
            {"grid", r.curves.empty() ? std::vector<double>{} : r.curves.front().p},
            {"error_curves", curves},
            {"median_u_epist_isolated", r.median_u_epist_isolated},
            {"median_u_epist_blend", r.median_u_epist_blend}};
}

// ------------------------------------------------------------------ report

namespace {

const char* kPalette[] = {"#e377c2", "#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

std::string num(double v) { return fmt::format("{:.6g}", v); }

struct Frame {
    double x0, x1, y0, y1;  // data range
    double left = 60, top = 30, width = 400, height = 300;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * width; }
    double py(double y) const { return top + height - (y - y0) / (y1 - y0) * height; }
};

std::string svg_open(double w, double h, const std::string& title) {
    return fmt::format(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
        "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
        "<text x=\"{2}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{3}</text>\n",
        num(w), num(h), num(w / 2), title);
}

std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
    std::string s = fmt::format(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", num(f.left),
        num(f.top), num(f.width), num(f.height));
    for (int i = 0; i <= 4; ++i) {
        const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
        const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
        s += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            num(f.px(xv)), num(f.top + f.height + 14), fmt::format("{:.3g}", xv));
        s += fmt::format(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            num(f.left - 4), num(f.py(yv) + 3), fmt::format("{:.3g}", yv));
    }
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                     num(f.left + f.width / 2), num(f.top + f.height + 30), xlabel);
    s += fmt::format(
        "<text x=\"14\" y=\"{0}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" "
        "transform=\"rotate(-90 14 {0})\">{1}</text>\n",
        num(f.top + f.height / 2), ylabel);
    return s;
}

std::string polyline(const Frame& f, const std::vector<double>& xs, const std::vector<double>& ys, const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) pts += ' ';
        pts += num(f.px(xs[i])) + "," + num(f.py(ys[i]));
    }
    return fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n", pts, color);
}

std::string legend(const Frame& f, const std::vector<std::string>& names, std::size_t color_offset = 0) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = f.top + 12 + 14 * static_cast<double>(i);
        s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                         num(f.left + f.width + 10), num(y), num(f.left + f.width + 28), num(y), kPalette[(i + color_offset) % 5]);
        s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
                         num(f.left + f.width + 32), num(y + 3), names[i]);
    }
    return s;
}

std::string scatter_svg(const RegimeResults& r, double level) {
    Frame f{-1.0, 1.0, -1.0, 1.0};
    f.width = 400;
    f.height = 400;
    std::string s = svg_open(600, 470, "Ellipticity predictions, " + r.regime + " model (" + num(level * 100) + "% ellipses)");
    s += axes(f, "e1", "e2");
    s += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"none\" stroke=\"#999\"/>\n", num(f.px(0)),
                     num(f.py(0)), num(f.width / 2));
    const double chi2 = -2.0 * std::log1p(-level);
    const double scale = f.width / 2.0;
    for (const auto& p : r.scatter) {
        const Vec2& m = p.split.mu_bar;
        const Sym2* mats[3] = {&p.split.sigma_aleat, &p.split.sigma_epist, &p.split.sigma_pred};
        for (int k = 0; k < 3; ++k) {
            const SymEigen2 e = eigen(*mats[k]);
            const double ra = std::sqrt(std::max(e.values[1], 0.0) * chi2) * scale;
            const double rb = std::sqrt(std::max(e.values[0], 0.0) * chi2) * scale;
            // SVG y axis points down.
            const double deg = -std::atan2(e.vectors[1].y, e.vectors[1].x) * 180.0 / kPi;
            s += fmt::format(
                "<ellipse cx=\"{0}\" cy=\"{1}\" rx=\"{2}\" ry=\"{3}\" transform=\"rotate({4} {0} {1})\" fill=\"none\" "
                "stroke=\"{5}\" stroke-width=\"0.6\"/>\n",
                num(f.px(m.x)), num(f.py(m.y)), num(ra), num(rb), num(deg), kPalette[k + 1]);
        }
        s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#2ca02c\" stroke-width=\"0.6\"/>\n",
                         num(f.px(p.target.e1)), num(f.py(p.target.e2)), num(f.px(m.x)), num(f.py(m.y)));
        s += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"1.5\" fill=\"{}\"/>\n", num(f.px(p.target.e1)),
                         num(f.py(p.target.e2)), p.is_blend ? "#ff7f0e" : "black");
    }
    s += legend(f, {"aleatoric", "epistemic", "predictive"}, 1);
    return s + "</svg>\n";
}

std::string histogram_svg(const RegimeResults& r) {
    std::string s = svg_open(1000, 380, "Standardized residuals, " + r.regime + " model (isolated)");
    const ComponentStats* comps[2] = {&r.calibration.c1, &r.calibration.c2};
    const std::size_t n = r.calibration.z1.size();
    for (int c = 0; c < 2; ++c) {
        const Histogram& h = comps[c]->histogram;
        const double width = h.counts.empty() ? 1.0 : (h.hi - h.lo) / static_cast<double>(h.counts.size());
        double peak = 0.0;
        for (auto v : h.counts) peak = std::max(peak, static_cast<double>(v) / (static_cast<double>(std::max<std::size_t>(n, 1)) * width));
        peak = std::max(peak, 0.4);
        Frame f{std::min(h.lo, -4.0), std::max(h.hi, 4.0), 0.0, peak * 1.1};
        f.left = 60 + 480.0 * c;
        s += axes(f, c == 0 ? "z1" : "z2", "density");
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            const double x0 = h.lo + width * static_cast<double>(b);
            const double d = static_cast<double>(h.counts[b]) / (static_cast<double>(std::max<std::size_t>(n, 1)) * width);
            s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\" opacity=\"0.6\"/>\n",
                             num(f.px(x0)), num(f.py(d)), num(f.px(x0 + width) - f.px(x0)), num(f.py(0) - f.py(d)));
        }
        std::vector<double> xs, ys;
        for (int i = 0; i <= 100; ++i) {
            const double x = f.x0 + (f.x1 - f.x0) * i / 100.0;
            xs.push_back(x);
            ys.push_back(std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi));
        }
        s += polyline(f, xs, ys, "#d62728");
    }
    return s + "</svg>\n";
}

std::string roc_svg(const RegimeResults& r) {
    Frame f{0.0, 1.0, 0.0, 1.0};
    std::string s = svg_open(640, 380, "ROC, blend detection, " + r.regime + " model");
    s += axes(f, "false positive rate", "true positive rate");
    s += polyline(f, {0.0, 1.0}, {0.0, 1.0}, "#bbbbbb");
    std::vector<std::string> names;
    for (std::size_t i = 0; i < r.rocs.size(); ++i) {
        std::vector<double> xs, ys;
        for (const auto& p : r.rocs[i].points) {
            xs.push_back(p.fpr);
            ys.push_back(p.tpr);
        }
        s += polyline(f, xs, ys, kPalette[(i + 1) % 5]);
        names.push_back(fmt::format("{} (AUC {:.3f})", r.rocs[i].score, r.rocs[i].auc));
    }
    Frame lf = f;
    lf.top += 14;
    std::string leg;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = lf.top + 14 * static_cast<double>(i);
        leg += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                           num(f.left + f.width + 10), num(y), num(f.left + f.width + 28), num(y), kPalette[(i + 1) % 5]);
        leg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
                           num(f.left + f.width + 32), num(y + 3), names[i]);
    }
    return s + leg + "</svg>\n";
}

std::string curves_svg(const RegimeResults& r) {
    double hi = 0.0;
    for (const auto& c : r.curves)
        for (double v : c.mean_error) hi = std::max(hi, v);
    Frame f{0.0, 1.0, 0.0, hi > 0.0 ? hi * 1.05 : 1.0};
    std::string s = svg_open(620, 380, "Mean error by data proportion, " + r.regime + " model");
    s += axes(f, "proportion of data", "mean error");
    s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
                     num(f.px(r.isolated_fraction)), num(f.top), num(f.top + f.height));
    std::vector<std::string> names;
    for (std::size_t i = 0; i < r.curves.size(); ++i) {
        s += polyline(f, r.curves[i].p, r.curves[i].mean_error, kPalette[i % 5]);
        names.push_back(r.curves[i].sorted_by);
    }
    return s + legend(f, names) + "</svg>\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

std::vector<std::filesystem::path> emit_report(const std::vector<RegimeResults>& regimes, const nlohmann::json& meta,
                                               const std::filesystem::path& out_dir, double ellipse_level) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());
    std::vector<std::pair<std::string, std::string>> files;
    const std::string eol = "\r\n";

    std::string auc = "uncertainty";
    for (const auto& r : regimes) auc += "," + r.regime + "_model";
    auc += eol;
    for (const char* score : {"aleatoric", "epistemic", "predictive", "aleatoric-inverse"}) {
        auc += score;
        for (const auto& r : regimes) {
            auto it = std::find_if(r.rocs.begin(), r.rocs.end(), [&](const RocResult& x) { return x.score == score; });
            auc += "," + (it == r.rocs.end() ? std::string() : fmt::format("{:.17g}", it->auc));
        }
        auc += eol;
    }
    files.emplace_back("auc_summary.csv", auc);

    std::string cal = "regime,target,component,n,excluded,mean,std,ks_stat,ks_p,mean_epist_pred_ratio" + eol;
    for (const auto& r : regimes) {
        for (const auto* c : {&r.calibration, &r.calibration_resampled}) {
            const char* target = c == &r.calibration ? "true" : "resampled";
            int k = 1;
            for (const auto* s : {&c->c1, &c->c2})
                cal += fmt::format("{},{},z{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}{}", r.regime, target, k++,
                                   c->z1.size(), c->excluded, s->mean, s->stddev, s->ks, s->ks_p,
                                   c->mean_epist_pred_ratio, eol);
        }
    }
    files.emplace_back("calibration.csv", cal);

    for (const auto& r : regimes) {
        std::string roc = "score,threshold,fpr,tpr" + eol;
        for (const auto& x : r.rocs)
            for (const auto& p : x.points) roc += fmt::format("{},{:.17g},{:.17g},{:.17g}{}", x.score, p.threshold, p.fpr, p.tpr, eol);
        files.emplace_back("roc_" + r.regime + ".csv", roc);

        std::string hist = "component,bin_lo,bin_hi,count" + eol;
        int k = 1;
        for (const auto* c : {&r.calibration.c1, &r.calibration.c2}) {
            const Histogram& h = c->histogram;
            const double w = (h.hi - h.lo) / static_cast<double>(std::max<std::size_t>(h.counts.size(), 1));
            for (std::size_t b = 0; b < h.counts.size(); ++b)
                hist += fmt::format("z{},{:.17g},{:.17g},{}{}", k, h.lo + w * static_cast<double>(b),
                                    h.lo + w * static_cast<double>(b + 1), h.counts[b], eol);
            ++k;
        }
        files.emplace_back("histogram_" + r.regime + ".csv", hist);

        std::string curves = "p";
        for (const auto& c : r.curves) curves += "," + c.sorted_by;
        curves += eol;
        const std::size_t rows = r.curves.empty() ? 0 : r.curves.front().p.size();
        for (std::size_t i = 0; i < rows; ++i) {
            curves += fmt::format("{:.17g}", r.curves.front().p[i]);
            for (const auto& c : r.curves) curves += fmt::format(",{:.17g}", c.mean_error[i]);
            curves += eol;
        }
        files.emplace_back("error_curves_" + r.regime + ".csv", curves);

        files.emplace_back("scatter_" + r.regime + ".svg", scatter_svg(r, ellipse_level));
        files.emplace_back("histogram_" + r.regime + ".svg", histogram_svg(r));
        files.emplace_back("roc_" + r.regime + ".svg", roc_svg(r));
        files.emplace_back("error_curves_" + r.regime + ".svg", curves_svg(r));
    }

    nlohmann::json metrics = {{"meta", meta}, {"regimes", nlohmann::json::array()}};
    for (const auto& r : regimes) metrics["regimes"].push_back(to_json(r));
    files.emplace_back("metrics.json", metrics.dump(2) + "\n");

    std::vector<std::filesystem::path> written;
    nlohmann::json index = {{"meta", meta}, {"artifacts", nlohmann::json::array()}};
    for (const auto& [name, text] : files) {
        write_text(out_dir / name, text);
        written.push_back(out_dir / name);
        index["artifacts"].push_back({{"file", name}, {"hash", content_hash(text)}});
    }
    write_text(out_dir / "index.json", index.dump(2) + "\n");
    written.push_back(out_dir / "index.json");
    return written;
}

}  // namespace galbnn
