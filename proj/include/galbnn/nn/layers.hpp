#pragma once

#include "galbnn/nn/tensor.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace galbnn::nn {

enum class Mode { Train, EvalDeterministic, EvalMcDropout };

/// Per-pass settings. Dropout masks are counter-based: in Train mode they are
/// derived from `step_seed`, in EvalMcDropout mode from `row_seeds[n]` for
/// batch row n, so a row's mask never depends on the rest of the batch.
struct ForwardContext {
    Mode mode = Mode::EvalDeterministic;
    std::uint64_t step_seed = 0;
    std::span<const std::uint64_t> row_seeds;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) = 0;
    /// Accumulates parameter gradients and returns dL/dx.
    virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
    virtual std::vector<Param<T>*> params() { return {}; }
    /// Non-learnable persistent state (batch-norm running statistics).
    virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }
    virtual void initialize(std::uint64_t /*seed*/) {}
    virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

/// Stride-1 convolution with same padding (odd kernel).
template <typename T>
class Conv2d final : public Layer<T> {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

    std::string kind() const override { return "conv"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
    void initialize(std::uint64_t seed) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    std::size_t cin_, cout_, k_;
    Param<T> weight_;  // [cout, cin, k, k]
    Param<T> bias_;    // [cout]
    Tensor<T> col_;    // im2col of the last input: [cin*k*k, N*H*W]
    typename Tensor<T>::Shape in_shape_;
};

/// Per-channel batch normalization over [N, C] or [N, C, H, W].
template <typename T>
class BatchNorm final : public Layer<T> {
public:
    explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1);

    std::string kind() const override { return "bn"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
        return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
    }
    void initialize(std::uint64_t seed) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

    /// Normalized pre-scale activations of the last Train forward.
    const Tensor<T>& normalized() const { return xhat_; }

private:
    std::size_t c_;
    double eps_, momentum_;
    Param<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
    bool batch_stats_ = false;
};

/// Parametric ReLU with one learnable slope per channel.
template <typename T>
class PReLU final : public Layer<T> {
public:
    explicit PReLU(std::size_t channels, double init_slope = 0.25);

    std::string kind() const override { return "prelu"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::vector<Param<T>*> params() override { return {&slope_}; }
    void initialize(std::uint64_t seed) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<PReLU>(*this); }

private:
    std::size_t c_;
    double init_;
    Param<T> slope_;
    Tensor<T> input_;
};

/// 2x2 max pooling, stride 2, floor semantics on odd sizes.
template <typename T>
class MaxPool2d final : public Layer<T> {
public:
    std::string kind() const override { return "maxpool"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2d>(*this); }

private:
    typename Tensor<T>::Shape in_shape_;
    std::vector<std::size_t> argmax_;
};

/// Reshapes [N, ...] into [N / group, group * prod(...)]. With group = 1 this
/// is a flatten; with group = 4 it concatenates consecutive view rows.
template <typename T>
class GroupRows final : public Layer<T> {
public:
    explicit GroupRows(std::size_t group = 1) : group_(group) {}

    std::string kind() const override { return group_ == 1 ? "flatten" : "concat"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GroupRows>(*this); }

private:
    std::size_t group_;
    typename Tensor<T>::Shape in_shape_;
};

/// Fully connected: y = x W^T + b with W [out, in].
template <typename T>
class Dense final : public Layer<T> {
public:
    Dense(std::size_t in, std::size_t out);

    std::string kind() const override { return "dense"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
    void initialize(std::uint64_t seed) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    std::size_t in_, out_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
};

/// Maxout unit: max over `pieces` affine maps. Row j*pieces + p of the
/// weight matrix is piece p of output unit j.
template <typename T>
class Maxout final : public Layer<T> {
public:
    Maxout(std::size_t in, std::size_t out, std::size_t pieces);

    std::string kind() const override { return "maxout"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
    void initialize(std::uint64_t seed) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Maxout>(*this); }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    std::size_t in_, out_, pieces_;
    Param<T> weight_, bias_;
    Tensor<T> input_;
    std::vector<std::uint32_t> argmax_;
};

/// Inverted dropout: kept units are scaled by 1/keep so evaluation without
/// dropout needs no rescaling. `stream` separates the masks of different
/// dropout layers.
template <typename T>
class Dropout final : public Layer<T> {
public:
    Dropout(double rate, std::uint64_t stream);

    std::string kind() const override { return "dropout"; }
    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override;
    Tensor<T> backward(const Tensor<T>& grad_out) override;
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(*this); }

    double rate() const { return rate_; }
    void set_rate(double rate);
    const Tensor<T>& mask() const { return mask_; }

private:
    double rate_;
    std::uint64_t stream_;
    Tensor<T> mask_;
    bool active_ = false;
};

}  // namespace galbnn::nn
