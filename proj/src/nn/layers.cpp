#include "galbnn/nn/layers.hpp"

#include "galbnn/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <random>

namespace galbnn::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
void he_normal(Tensor<T>& t, std::size_t fan_in, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

void require_rank(std::size_t got, std::size_t want, const char* layer) {
    if (got != want)
        throw ShapeError(std::string(layer) + " expects a rank-" + std::to_string(want) + " input, got rank " +
                         std::to_string(got));
}

// Channel count and per-channel spatial size of a [N, C] or [N, C, H, W] tensor.
template <typename T>
std::pair<std::size_t, std::size_t> channel_layout(const Tensor<T>& x, std::size_t channels, const char* layer) {
    if (x.rank() != 2 && x.rank() != 4)
        throw ShapeError(std::string(layer) + " expects [N, C] or [N, C, H, W], got " + x.shape_string());
    if (x.dim(1) != channels)
        throw ShapeError(std::string(layer) + " expects " + std::to_string(channels) + " channels, got " +
                         x.shape_string());
    const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    return {x.dim(0), spatial};
}

}  // namespace

// ------------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : cin_(in_channels), cout_(out_channels), k_(kernel),
      weight_("weight", {out_channels, in_channels, kernel, kernel}), bias_("bias", {out_channels}) {
    if (kernel % 2 == 0) throw ShapeError("same-padding convolution needs an odd kernel");
}

template <typename T>
void Conv2d<T>::initialize(std::uint64_t seed) {
    he_normal(weight_.value, cin_ * k_ * k_, seed);
    bias_.value.fill(T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    require_rank(x.rank(), 4, "conv");
    if (x.dim(1) != cin_)
        throw ShapeError("conv expects " + std::to_string(cin_) + " input channels, got " + x.shape_string());
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k_ / 2);
    const std::size_t rows = cin_ * k_ * k_;
    const std::size_t cols = n * hw;
    in_shape_ = x.shape();

    col_ = Tensor<T>({rows, cols});
    T* col = col_.data();
    for (std::size_t c = 0; c < cin_; ++c) {
        for (std::size_t ki = 0; ki < k_; ++ki) {
            for (std::size_t kj = 0; kj < k_; ++kj) {
                T* dst_row = col + ((c * k_ + ki) * k_ + kj) * cols;
                const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
                const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
                const std::ptrdiff_t j_lo = std::max<std::ptrdiff_t>(0, -dj);
                const std::ptrdiff_t j_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w),
                                                                     static_cast<std::ptrdiff_t>(w) - dj);
                for (std::size_t b = 0; b < n; ++b) {
                    const T* src = x.data() + (b * cin_ + c) * hw;
                    T* dst = dst_row + b * hw;
                    for (std::size_t i = 0; i < h; ++i) {
                        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
                        T* d = dst + i * w;
                        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) {
                            std::fill(d, d + w, T(0));
                            continue;
                        }
                        const T* s = src + si * static_cast<std::ptrdiff_t>(w);
                        for (std::ptrdiff_t j = 0; j < j_lo; ++j) d[j] = T(0);
                        for (std::ptrdiff_t j = j_lo; j < j_hi; ++j) d[j] = s[j + dj];
                        for (std::ptrdiff_t j = std::max(j_hi, j_lo); j < static_cast<std::ptrdiff_t>(w); ++j)
                            d[j] = T(0);
                    }
                }
            }
        }
    }

    MatR<T> y(cout_, cols);
    y.noalias() = CMapR<T>(weight_.value.data(), cout_, rows) * CMapR<T>(col, rows, cols);

    Tensor<T> out({n, cout_, h, w});
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t co = 0; co < cout_; ++co) {
            const T bias = bias_.value[co];
            const T* src = y.data() + co * cols + b * hw;
            T* dst = out.data() + (b * cout_ + co) * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
        }
    }
    return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
    const std::size_t n = in_shape_.at(0), h = in_shape_[2], w = in_shape_[3], hw = h * w;
    if (grad_out.shape() != typename Tensor<T>::Shape{n, cout_, h, w})
        throw ShapeError("conv backward gradient has shape " + grad_out.shape_string());
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k_ / 2);
    const std::size_t rows = cin_ * k_ * k_;
    const std::size_t cols = n * hw;

    MatR<T> dy(cout_, cols);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t co = 0; co < cout_; ++co) {
            const T* src = grad_out.data() + (b * cout_ + co) * hw;
            std::copy(src, src + hw, dy.data() + co * cols + b * hw);
        }
    }
    const CMapR<T> col(col_.data(), rows, cols);
    MapR<T>(weight_.grad.data(), cout_, rows).noalias() += dy * col.transpose();
    for (std::size_t co = 0; co < cout_; ++co) bias_.grad[co] += dy.row(co).sum();

    MatR<T> dcol(rows, cols);
    dcol.noalias() = CMapR<T>(weight_.value.data(), cout_, rows).transpose() * dy;

    Tensor<T> dx(in_shape_);
    for (std::size_t c = 0; c < cin_; ++c) {
        for (std::size_t ki = 0; ki < k_; ++ki) {
            for (std::size_t kj = 0; kj < k_; ++kj) {
                const T* src_row = dcol.data() + ((c * k_ + ki) * k_ + kj) * cols;
                const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
                const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
                const std::ptrdiff_t j_lo = std::max<std::ptrdiff_t>(0, -dj);
                const std::ptrdiff_t j_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w),
                                                                     static_cast<std::ptrdiff_t>(w) - dj);
                for (std::size_t b = 0; b < n; ++b) {
                    T* dst = dx.data() + (b * cin_ + c) * hw;
                    const T* src = src_row + b * hw;
                    for (std::size_t i = 0; i < h; ++i) {
                        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
                        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                        T* d = dst + si * static_cast<std::ptrdiff_t>(w);
                        const T* s = src + i * w;
                        for (std::ptrdiff_t j = j_lo; j < j_hi; ++j) d[j + dj] += s[j];
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels, double eps, double momentum)
    : c_(channels), eps_(eps), momentum_(momentum), gamma_("gamma", {channels}), beta_("beta", {channels}),
      running_mean_({channels}, T(0)), running_var_({channels}, T(1)) {
    gamma_.value.fill(T(1));
}

template <typename T>
void BatchNorm<T>::initialize(std::uint64_t) {
    gamma_.value.fill(T(1));
    beta_.value.fill(T(0));
    running_mean_.fill(T(0));
    running_var_.fill(T(1));
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, const ForwardContext& ctx) {
    const auto [n, spatial] = channel_layout(x, c_, "bn");
    Tensor<T> out(x.shape());
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(c_, T(0));
    batch_stats_ = ctx.mode == Mode::Train;
    const double m = static_cast<double>(n * spatial);
    if (batch_stats_ && n * spatial < 2) throw ShapeError("batch norm needs at least 2 values per channel in training");

    for (std::size_t c = 0; c < c_; ++c) {
        double mean, var;
        if (batch_stats_) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.data() + (b * c_ + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) s += p[i];
            }
            mean = s / m;
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.data() + (b * c_ + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) {
                    const double d = p[i] - mean;
                    ss += d * d;
                }
            }
            var = ss / m;
            running_mean_[c] = static_cast<T>((1.0 - momentum_) * running_mean_[c] + momentum_ * mean);
            running_var_[c] = static_cast<T>((1.0 - momentum_) * running_var_[c] + momentum_ * var * m / (m - 1.0));
        } else {
            mean = running_mean_[c];
            var = running_var_[c];
        }
        const T inv_std = static_cast<T>(1.0 / std::sqrt(var + eps_));
        const T mu = static_cast<T>(mean);
        inv_std_[c] = inv_std;
        const T g = gamma_.value[c], be = beta_.value[c];
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const T xh = (x[off + i] - mu) * inv_std;
                xhat_[off + i] = xh;
                out[off + i] = g * xh + be;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_out) {
    if (grad_out.shape() != xhat_.shape()) throw ShapeError("bn backward gradient has shape " + grad_out.shape_string());
    const std::size_t n = xhat_.dim(0);
    const std::size_t spatial = xhat_.rank() == 4 ? xhat_.dim(2) * xhat_.dim(3) : 1;
    const double m = static_cast<double>(n * spatial);
    Tensor<T> dx(xhat_.shape());
    for (std::size_t c = 0; c < c_; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                sum_dy += grad_out[off + i];
                sum_dy_xhat += static_cast<double>(grad_out[off + i]) * xhat_[off + i];
            }
        }
        gamma_.grad[c] += static_cast<T>(sum_dy_xhat);
        beta_.grad[c] += static_cast<T>(sum_dy);
        const T g = gamma_.value[c];
        const T inv_std = inv_std_[c];
        if (batch_stats_) {
            const T mean_dy = static_cast<T>(sum_dy / m);
            const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t off = (b * c_ + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i)
                    dx[off + i] = g * inv_std * (grad_out[off + i] - mean_dy - xhat_[off + i] * mean_dy_xhat);
            }
        } else {
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t off = (b * c_ + c) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) dx[off + i] = g * inv_std * grad_out[off + i];
            }
        }
    }
    return dx;
}

// -------------------------------------------------------------------- PReLU

template <typename T>
PReLU<T>::PReLU(std::size_t channels, double init_slope)
    : c_(channels), init_(init_slope), slope_("slope", {channels}) {
    slope_.value.fill(static_cast<T>(init_slope));
}

template <typename T>
void PReLU<T>::initialize(std::uint64_t) {
    slope_.value.fill(static_cast<T>(init_));
}

template <typename T>
Tensor<T> PReLU<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    const auto [n, spatial] = channel_layout(x, c_, "prelu");
    input_ = x;
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < c_; ++c) {
            const T a = slope_.value[c];
            const std::size_t off = (b * c_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const T v = x[off + i];
                out[off + i] = v > T(0) ? v : a * v;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> PReLU<T>::backward(const Tensor<T>& grad_out) {
    if (grad_out.shape() != input_.shape()) throw ShapeError("prelu backward gradient has shape " + grad_out.shape_string());
    const std::size_t n = input_.dim(0);
    const std::size_t spatial = input_.rank() == 4 ? input_.dim(2) * input_.dim(3) : 1;
    Tensor<T> dx(input_.shape());
    for (std::size_t c = 0; c < c_; ++c) {
        const T a = slope_.value[c];
        T da = T(0);
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c_ + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
                const T v = input_[off + i];
                const T g = grad_out[off + i];
                if (v > T(0)) {
                    dx[off + i] = g;
                } else {
                    dx[off + i] = a * g;
                    da += v * g;
                }
            }
        }
        slope_.grad[c] += da;
    }
    return dx;
}

// ---------------------------------------------------------------- MaxPool2d

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    require_rank(x.rank(), 4, "maxpool");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw ShapeError("maxpool input too small: " + x.shape_string());
    in_shape_ = x.shape();
    Tensor<T> out({n, c, oh, ow});
    argmax_.assign(out.size(), 0);
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j, ++o) {
                std::size_t best = base + (2 * i) * w + 2 * j;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t idx = base + (2 * i + di) * w + 2 * j + dj;
                        if (x[idx] > x[best]) best = idx;
                    }
                out[o] = x[best];
                argmax_[o] = best;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& grad_out) {
    if (grad_out.size() != argmax_.size()) throw ShapeError("maxpool backward gradient has shape " + grad_out.shape_string());
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < argmax_.size(); ++o) dx[argmax_[o]] += grad_out[o];
    return dx;
}

// ---------------------------------------------------------------- GroupRows

template <typename T>
Tensor<T> GroupRows<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    if (x.rank() < 2 || x.dim(0) % group_ != 0)
        throw ShapeError("cannot group rows of " + x.shape_string() + " by " + std::to_string(group_));
    in_shape_ = x.shape();
    const std::size_t rows = x.dim(0) / group_;
    return x.reshaped({rows, x.size() / rows});
}

template <typename T>
Tensor<T> GroupRows<T>::backward(const Tensor<T>& grad_out) {
    return grad_out.reshaped(in_shape_);
}

// -------------------------------------------------------------------- Dense

template <typename T>
Dense<T>::Dense(std::size_t in, std::size_t out)
    : in_(in), out_(out), weight_("weight", {out, in}), bias_("bias", {out}) {}

template <typename T>
void Dense<T>::initialize(std::uint64_t seed) {
    he_normal(weight_.value, in_, seed);
    bias_.value.fill(T(0));
}

template <typename T>
Tensor<T> Dense<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    require_rank(x.rank(), 2, "dense");
    if (x.dim(1) != in_) throw ShapeError("dense expects " + std::to_string(in_) + " inputs, got " + x.shape_string());
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor<T> out({n, out_});
    MapR<T> y(out.data(), n, out_);
    y.noalias() = CMapR<T>(x.data(), n, in_) * CMapR<T>(weight_.value.data(), out_, in_).transpose();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < out_; ++j) out[b * out_ + j] += bias_.value[j];
    return out;
}

template <typename T>
Tensor<T> Dense<T>::backward(const Tensor<T>& grad_out) {
    const std::size_t n = input_.dim(0);
    if (grad_out.shape() != typename Tensor<T>::Shape{n, out_})
        throw ShapeError("dense backward gradient has shape " + grad_out.shape_string());
    const CMapR<T> dy(grad_out.data(), n, out_);
    MapR<T>(weight_.grad.data(), out_, in_).noalias() += dy.transpose() * CMapR<T>(input_.data(), n, in_);
    for (std::size_t j = 0; j < out_; ++j) bias_.grad[j] += dy.col(j).sum();
    Tensor<T> dx({n, in_});
    MapR<T>(dx.data(), n, in_).noalias() = dy * CMapR<T>(weight_.value.data(), out_, in_);
    return dx;
}

// ------------------------------------------------------------------- Maxout

template <typename T>
Maxout<T>::Maxout(std::size_t in, std::size_t out, std::size_t pieces)
    : in_(in), out_(out), pieces_(pieces), weight_("weight", {out * pieces, in}), bias_("bias", {out * pieces}) {
    if (pieces == 0) throw ShapeError("maxout needs at least one piece");
}

template <typename T>
void Maxout<T>::initialize(std::uint64_t seed) {
    he_normal(weight_.value, in_, seed);
    bias_.value.fill(T(0));
}

template <typename T>
Tensor<T> Maxout<T>::forward(const Tensor<T>& x, const ForwardContext&) {
    require_rank(x.rank(), 2, "maxout");
    if (x.dim(1) != in_) throw ShapeError("maxout expects " + std::to_string(in_) + " inputs, got " + x.shape_string());
    input_ = x;
    const std::size_t n = x.dim(0), units = out_ * pieces_;
    MatR<T> z(n, units);
    z.noalias() = CMapR<T>(x.data(), n, in_) * CMapR<T>(weight_.value.data(), units, in_).transpose();
    Tensor<T> out({n, out_});
    argmax_.assign(n * out_, 0);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t j = 0; j < out_; ++j) {
            std::uint32_t best = 0;
            T best_v = z(b, j * pieces_) + bias_.value[j * pieces_];
            for (std::size_t p = 1; p < pieces_; ++p) {
                const T v = z(b, j * pieces_ + p) + bias_.value[j * pieces_ + p];
                if (v > best_v) {
                    best_v = v;
                    best = static_cast<std::uint32_t>(p);
                }
            }
            out[b * out_ + j] = best_v;
            argmax_[b * out_ + j] = best;
        }
    }
    return out;
}

template <typename T>
Tensor<T> Maxout<T>::backward(const Tensor<T>& grad_out) {
    const std::size_t n = input_.dim(0), units = out_ * pieces_;
    if (grad_out.shape() != typename Tensor<T>::Shape{n, out_})
        throw ShapeError("maxout backward gradient has shape " + grad_out.shape_string());
    MatR<T> dz = MatR<T>::Zero(n, units);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < out_; ++j) dz(b, j * pieces_ + argmax_[b * out_ + j]) = grad_out[b * out_ + j];
    MapR<T>(weight_.grad.data(), units, in_).noalias() += dz.transpose() * CMapR<T>(input_.data(), n, in_);
    for (std::size_t u = 0; u < units; ++u) bias_.grad[u] += dz.col(u).sum();
    Tensor<T> dx({n, in_});
    MapR<T>(dx.data(), n, in_).noalias() = dz * CMapR<T>(weight_.value.data(), units, in_);
    return dx;
}

// ------------------------------------------------------------------ Dropout

template <typename T>
Dropout<T>::Dropout(double rate, std::uint64_t stream) : rate_(rate), stream_(stream) {
    set_rate(rate);
}

template <typename T>
void Dropout<T>::set_rate(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout rate must lie in [0, 1)");
    rate_ = rate;
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, const ForwardContext& ctx) {
    require_rank(x.rank(), 2, "dropout");
    active_ = ctx.mode != Mode::EvalDeterministic && rate_ > 0.0;
    if (!active_) return x;
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (ctx.mode == Mode::EvalMcDropout && ctx.row_seeds.size() != n)
        throw ShapeError("MC dropout needs one seed per batch row");
    const double keep = 1.0 - rate_;
    const T scale = static_cast<T>(1.0 / keep);
    mask_ = Tensor<T>(x.shape());
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        const std::uint64_t row_seed = ctx.mode == Mode::Train ? derive_seed(ctx.step_seed, {stream_, b})
                                                               : derive_seed(ctx.row_seeds[b], stream_);
        for (std::size_t j = 0; j < d; ++j) {
            const T m = to_unit(derive_seed(row_seed, j)) < keep ? scale : T(0);
            mask_[b * d + j] = m;
            out[b * d + j] = x[b * d + j] * m;
        }
    }
    return out;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) {
    if (!active_) return grad_out;
    if (grad_out.shape() != mask_.shape()) throw ShapeError("dropout backward gradient has shape " + grad_out.shape_string());
    Tensor<T> dx(grad_out.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_out[i] * mask_[i];
    return dx;
}

#define GALBNN_INSTANTIATE(T) \
    template class Conv2d<T>;  \
    template class BatchNorm<T>; \
    template class PReLU<T>;   \
    template class MaxPool2d<T>; \
    template class GroupRows<T>; \
    template class Dense<T>;   \
    template class Maxout<T>;  \
    template class Dropout<T>;

GALBNN_INSTANTIATE(float)
GALBNN_INSTANTIATE(double)

#undef GALBNN_INSTANTIATE

}  // namespace galbnn::nn
