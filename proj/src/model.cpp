#include "galbnn/model.hpp"

#include "galbnn/errors.hpp"

#include <cmath>
#include <map>

namespace galbnn {

template <typename T>
std::vector<T> augment_views(std::span<const float> stamp, int stamp_size, int crop_size) {
    if (crop_size > stamp_size || crop_size < 1) throw ShapeError("crop larger than stamp");
    if (stamp.size() != static_cast<std::size_t>(stamp_size) * stamp_size)
        throw ShapeError("stamp has " + std::to_string(stamp.size()) + " pixels, expected " +
                         std::to_string(stamp_size * stamp_size));
    const int off = (stamp_size - crop_size) / 2;
    const int n = crop_size;
    const std::size_t area = static_cast<std::size_t>(n) * n;
    std::vector<T> out(kViews * area);
    auto src = [&](int i, int j) { return static_cast<T>(stamp[static_cast<std::size_t>(i + off) * stamp_size + j + off]); };
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * n + j;
            out[p] = src(i, j);
            out[area + p] = src(j, n - 1 - i);
            out[2 * area + p] = src(n - 1 - i, n - 1 - j);
            out[3 * area + p] = src(n - 1 - j, i);
        }
    }
    return out;
}

template <typename T>
std::vector<T> prepare_input(std::span<const float> stamp, const ArchitectureConfig& arch) {
    std::vector<T> views = augment_views<T>(stamp, arch.stamp_size, arch.crop_size);
    const std::size_t area = static_cast<std::size_t>(arch.crop_size) * arch.crop_size;
    double ss = 0.0;
    for (std::size_t i = 0; i < area; ++i) ss += static_cast<double>(views[i]) * views[i];
    const double rms = std::sqrt(ss / static_cast<double>(area));
    if (rms > 0.0) {
        const T inv = static_cast<T>(1.0 / rms);
        for (auto& v : views) v *= inv;
    }
    return views;
}

template <typename T>
nn::Tensor<T> make_input_batch(const std::vector<std::span<const float>>& stamps, const ArchitectureConfig& arch) {
    const std::size_t c = static_cast<std::size_t>(arch.crop_size);
    const std::size_t per = kViews * c * c;
    nn::Tensor<T> x({stamps.size() * kViews, 1, c, c});
    for (std::size_t n = 0; n < stamps.size(); ++n) {
        const std::vector<T> v = prepare_input<T>(stamps[n], arch);
        std::copy(v.begin(), v.end(), x.data() + n * per);
    }
    return x;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
    if (!(y > 0.0)) throw DomainError("softplus inverse needs a positive argument");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

MvnPrediction head_to_mvn(std::span<const double> raw, double sigma_floor) {
    if (raw.size() != 5) throw ShapeError("an MVN head has 5 outputs");
    for (double v : raw)
        if (!std::isfinite(v)) throw NumericError("non-finite MVN head output");
    MvnPrediction p;
    std::copy(raw.begin(), raw.end(), p.raw.begin());
    p.mu = {raw[0], raw[1]};
    p.l11 = softplus(raw[2]) + sigma_floor;
    p.l21 = raw[3];
    p.l22 = softplus(raw[4]) + sigma_floor;
    p.cov = {p.l11 * p.l11, p.l11 * p.l21, p.l21 * p.l21 + p.l22 * p.l22};
    return p;
}

namespace {

struct Whitened {
    double z1, z2;
};

Whitened whiten(const MvnPrediction& p, const Ellipticity& y) {
    const double z1 = (y.e1 - p.mu.x) / p.l11;
    const double z2 = (y.e2 - p.mu.y - p.l21 * z1) / p.l22;
    return {z1, z2};
}

}  // namespace

double nll_loss(const MvnPrediction& p, const Ellipticity& y) {
    const Whitened w = whiten(p, y);
    return std::log(2.0 * kPi) + std::log(p.l11) + std::log(p.l22) + 0.5 * (w.z1 * w.z1 + w.z2 * w.z2);
}

std::array<double, 5> nll_gradient(const MvnPrediction& p, const Ellipticity& y) {
    const Whitened w = whiten(p, y);
    const double g_z1 = w.z1 - w.z2 * p.l21 / p.l22;
    std::array<double, 5> g{};
    g[0] = -g_z1 / p.l11;
    g[1] = -w.z2 / p.l22;
    g[2] = (1.0 / p.l11 - g_z1 * w.z1 / p.l11) * sigmoid(p.raw[2]);
    g[3] = -w.z2 * w.z1 / p.l22;
    g[4] = ((1.0 - w.z2 * w.z2) / p.l22) * sigmoid(p.raw[4]);
    return g;
}

double l2_loss(const Vec2& mu, const Ellipticity& y) {
    const double d1 = mu.x - y.e1, d2 = mu.y - y.e2;
    return d1 * d1 + d2 * d2;
}

// ------------------------------------------------------------------ Network

template <typename T>
Network<T>::Network(const ArchitectureConfig& arch, HeadKind head) : arch_(arch), head_kind_(head) {
    arch_.validate();
    build();
}

template <typename T>
void Network<T>::build() {
    std::size_t cin = 1;
    for (const auto& spec : arch_.conv) {
        const auto cout = static_cast<std::size_t>(spec.channels);
        trunk_.template add<nn::BatchNorm<T>>(cin);
        trunk_.template add<nn::Conv2d<T>>(cin, cout, static_cast<std::size_t>(spec.kernel));
        trunk_.template add<nn::PReLU<T>>(cout);
        if (spec.pool) trunk_.template add<nn::MaxPool2d<T>>();
        cin = cout;
    }
    trunk_.template add<nn::GroupRows<T>>(1);

    const auto width = static_cast<std::size_t>(arch_.fc_width(head_kind_));
    const auto pieces = static_cast<std::size_t>(arch_.maxout_pieces);
    head_.template add<nn::GroupRows<T>>(kViews);
    head_.template add<nn::Maxout<T>>(static_cast<std::size_t>(arch_.concat_features()), width, pieces);
    head_.template add<nn::Dropout<T>>(arch_.dropout_rate, 1);
    head_.template add<nn::Maxout<T>>(width, width, pieces);
    head_.template add<nn::Dropout<T>>(arch_.dropout_rate, 2);
    head_.template add<nn::Dense<T>>(width, static_cast<std::size_t>(outputs()));
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
    trunk_.initialize(derive_seed(seed, 1));
    initialize_head(derive_seed(seed, 2));
}

template <typename T>
void Network<T>::initialize_head(std::uint64_t seed) {
    head_.initialize(seed);
    // Output layer starts at 0.1x the He scale.
    auto& out = dynamic_cast<nn::Dense<T>&>(head_.layer(head_.size() - 1));
    for (auto& w : out.weight().value.values()) w *= static_cast<T>(0.1);
    if (head_kind_ == HeadKind::MvnNll) {
        const T diag = static_cast<T>(softplus_inverse(0.1));
        out.bias().value[2] = diag;
        out.bias().value[4] = diag;
    }
}

template <typename T>
nn::Tensor<T> Network<T>::forward_trunk(const nn::Tensor<T>& input, const nn::ForwardContext& ctx) {
    const std::size_t c = static_cast<std::size_t>(arch_.crop_size);
    if (input.rank() != 4 || input.dim(0) % kViews != 0 || input.dim(1) != 1 || input.dim(2) != c || input.dim(3) != c)
        throw ShapeError("network input must be [N*4, 1, " + std::to_string(c) + ", " + std::to_string(c) + "], got " +
                         input.shape_string());
    trunk_ran_train_ = false;
    nn::Tensor<T> out = trunk_.forward(input, ctx);
    trunk_ran_train_ = ctx.mode == nn::Mode::Train;
    return out;
}

template <typename T>
nn::Tensor<T> Network<T>::forward_head(const nn::Tensor<T>& features, const nn::ForwardContext& ctx) {
    return head_.forward(features, ctx);
}

template <typename T>
nn::Tensor<T> Network<T>::forward(const nn::Tensor<T>& input, const nn::ForwardContext& ctx) {
    return forward_head(forward_trunk(input, ctx), ctx);
}

template <typename T>
nn::Tensor<T> Network<T>::backward(const nn::Tensor<T>& grad_out) {
    nn::Tensor<T> g = head_.backward(grad_out);
    if (!trunk_ran_train_) throw UsageError("backward through the trunk needs a Train forward");
    trunk_ran_train_ = false;
    return trunk_.backward(g);
}

template <typename T>
std::vector<nn::Param<T>*> Network<T>::params() {
    std::vector<nn::Param<T>*> out;
    for (auto& np : trunk_.named_params()) out.push_back(np.param);
    for (auto& np : head_.named_params()) out.push_back(np.param);
    return out;
}

template <typename T>
void Network<T>::zero_grad() {
    trunk_.zero_grad();
    head_.zero_grad();
}

template <typename T>
void Network<T>::set_dropout_rate(double rate) {
    for (std::size_t i = 0; i < head_.size(); ++i)
        if (auto* d = dynamic_cast<nn::Dropout<T>*>(&head_.layer(i))) d->set_rate(rate);
}

template <typename T>
bool Network<T>::dropout_active() const {
    for (std::size_t i = 0; i < head_.size(); ++i)
        if (const auto* d = dynamic_cast<const nn::Dropout<T>*>(&head_.layer(i)); d && d->rate() > 0.0) return true;
    return false;
}

namespace {

template <typename T>
NamedTensor to_named(const std::string& name, const nn::Tensor<T>& t) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = t.shape();
    nt.data.assign(t.values().begin(), t.values().end());
    return nt;
}

}  // namespace

template <typename T>
std::vector<NamedTensor> Network<T>::export_tensors() {
    std::vector<NamedTensor> out;
    for (auto* seq : {&trunk_, &head_}) {
        for (auto& np : seq->named_params()) out.push_back(to_named(np.name, np.param->value));
        for (auto& nb : seq->named_buffers()) out.push_back(to_named(nb.name, *nb.tensor));
    }
    return out;
}

template <typename T>
void Network<T>::import_tensors(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const NamedTensor*> by_name;
    for (const auto& t : tensors)
        if (!by_name.emplace(t.name, &t).second) throw MismatchError("duplicate tensor '" + t.name + "' in model file");
    std::size_t used = 0;
    auto load = [&](const std::string& name, nn::Tensor<T>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw MismatchError("model file lacks tensor '" + name + "'");
        if (it->second->shape != dst.shape())
            throw MismatchError("tensor '" + name + "' has the wrong shape for this architecture");
        std::copy(it->second->data.begin(), it->second->data.end(), dst.data());
        ++used;
    };
    for (auto* seq : {&trunk_, &head_}) {
        for (auto& np : seq->named_params()) load(np.name, np.param->value);
        for (auto& nb : seq->named_buffers()) load(nb.name, *nb.tensor);
    }
    if (used != tensors.size()) throw MismatchError("model file has tensors this architecture does not declare");
}

template <typename T>
void transfer_trunk(Network<T>& src, Network<T>& dst, std::uint64_t head_seed) {
    if (src.arch().conv != dst.arch().conv || src.arch().crop_size != dst.arch().crop_size)
        throw MismatchError("trunk transfer needs identical convolution specs");
    auto sp = src.trunk().named_params();
    auto dp = dst.trunk().named_params();
    auto sb = src.trunk().named_buffers();
    auto db = dst.trunk().named_buffers();
    if (sp.size() != dp.size() || sb.size() != db.size()) throw MismatchError("trunk layouts differ");
    for (std::size_t i = 0; i < sp.size(); ++i) {
        if (sp[i].name != dp[i].name || sp[i].param->value.shape() != dp[i].param->value.shape())
            throw MismatchError("trunk parameter '" + sp[i].name + "' does not match '" + dp[i].name + "'");
        dp[i].param->value = sp[i].param->value;
    }
    for (std::size_t i = 0; i < sb.size(); ++i) {
        if (sb[i].name != db[i].name || sb[i].tensor->shape() != db[i].tensor->shape())
            throw MismatchError("trunk buffer '" + sb[i].name + "' does not match");
        *db[i].tensor = *sb[i].tensor;
    }
    dst.initialize_head(head_seed);
}

nlohmann::json architecture_json(const ArchitectureConfig& arch, HeadKind head) {
    nlohmann::json j = to_json(arch);
    return {{"config", j}, {"head", std::string(to_string(head))}};
}

HeadKind head_from_json(const nlohmann::json& j) {
    const std::string h = j.at("head").get<std::string>();
    if (h == "plain-l2") return HeadKind::PlainL2;
    if (h == "mvn-nll") return HeadKind::MvnNll;
    throw MismatchError("unknown head kind '" + h + "'");
}

template std::vector<float> augment_views<float>(std::span<const float>, int, int);
template std::vector<double> augment_views<double>(std::span<const float>, int, int);
template std::vector<float> prepare_input<float>(std::span<const float>, const ArchitectureConfig&);
template std::vector<double> prepare_input<double>(std::span<const float>, const ArchitectureConfig&);
template nn::Tensor<float> make_input_batch<float>(const std::vector<std::span<const float>>&, const ArchitectureConfig&);
template nn::Tensor<double> make_input_batch<double>(const std::vector<std::span<const float>>&, const ArchitectureConfig&);
template class Network<float>;
template class Network<double>;
template void transfer_trunk<float>(Network<float>&, Network<float>&, std::uint64_t);
template void transfer_trunk<double>(Network<double>&, Network<double>&, std::uint64_t);

}  // namespace galbnn
