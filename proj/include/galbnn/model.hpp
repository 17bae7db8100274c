#pragma once

#include "galbnn/config.hpp"
#include "galbnn/ellipticity.hpp"
#include "galbnn/linalg2.hpp"
#include "galbnn/nn/sequential.hpp"
#include "galbnn/store.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace galbnn {

inline constexpr int kViews = 4;

/// Four center crops of a square stamp, rotated by 0, 90, 180 and 270 degrees
/// (counter-clockwise), concatenated view-major.
template <typename T>
std::vector<T> augment_views(std::span<const float> stamp, int stamp_size, int crop_size);

/// Network input for one stamp: the four views divided by the RMS of the
/// center crop (left unscaled when the crop is all zero).
template <typename T>
std::vector<T> prepare_input(std::span<const float> stamp, const ArchitectureConfig& arch);

double softplus(double x);
double softplus_inverse(double y);
double sigmoid(double x);

struct MvnPrediction {
    Vec2 mu;
    Sym2 cov;
    double l11 = 1.0;
    double l21 = 0.0;
    double l22 = 1.0;
    std::array<double, 5> raw{};
};

/// raw = (mu1, mu2, l11_raw, l21, l22_raw); L = [[softplus(l11_raw) + floor, 0],
/// [l21, softplus(l22_raw) + floor]], cov = L L^T. Throws NumericError on
/// non-finite input.
MvnPrediction head_to_mvn(std::span<const double> raw, double sigma_floor);

/// 0.5 * [ln(4 pi^2 det cov) + r^T cov^-1 r] with r = target - mu.
double nll_loss(const MvnPrediction& pred, const Ellipticity& target);

/// d nll / d raw for the five head outputs.
std::array<double, 5> nll_gradient(const MvnPrediction& pred, const Ellipticity& target);

double l2_loss(const Vec2& mu, const Ellipticity& target);

/// The convolutional trunk (shared over views) followed by the concatenating
/// maxout head. Dropout follows each maxout layer.
template <typename T>
class Network {
public:
    Network(const ArchitectureConfig& arch, HeadKind head);

    const ArchitectureConfig& arch() const { return arch_; }
    HeadKind head_kind() const { return head_kind_; }
    int outputs() const { return head_kind_ == HeadKind::PlainL2 ? 2 : 5; }

    void initialize(std::uint64_t seed);
    void initialize_head(std::uint64_t seed);

    /// input: [N * 4, 1, crop, crop]; returns [N * 4, view_features].
    nn::Tensor<T> forward_trunk(const nn::Tensor<T>& input, const nn::ForwardContext& ctx);
    /// features: [N * 4, view_features]; returns [N, outputs()].
    nn::Tensor<T> forward_head(const nn::Tensor<T>& features, const nn::ForwardContext& ctx);
    nn::Tensor<T> forward(const nn::Tensor<T>& input, const nn::ForwardContext& ctx);
    /// Backpropagates through head then trunk; returns dL/dinput.
    nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);

    std::vector<nn::Param<T>*> params();
    void zero_grad();
    void set_dropout_rate(double rate);
    /// True when any head dropout layer has a positive rate.
    bool dropout_active() const;

    nn::Sequential<T>& trunk() { return trunk_; }
    nn::Sequential<T>& head() { return head_; }

    /// Parameters then buffers, in a fixed order with unique names.
    std::vector<NamedTensor> export_tensors();
    /// Requires every exported name exactly once.
    void import_tensors(const std::vector<NamedTensor>& tensors);

private:
    void build();

    ArchitectureConfig arch_;
    HeadKind head_kind_;
    nn::Sequential<T> trunk_{"trunk."};
    nn::Sequential<T> head_{"head."};
    bool trunk_ran_train_ = false;
};

/// Copies trunk parameters and batch-norm statistics bit-exactly and
/// reinitializes the head of `dst` from `head_seed`.
template <typename T>
void transfer_trunk(Network<T>& src, Network<T>& dst, std::uint64_t head_seed);

/// Batched input tensor [N * 4, 1, crop, crop] for the listed pixel arrays.
template <typename T>
nn::Tensor<T> make_input_batch(const std::vector<std::span<const float>>& stamps, const ArchitectureConfig& arch);

nlohmann::json architecture_json(const ArchitectureConfig& arch, HeadKind head);
HeadKind head_from_json(const nlohmann::json& j);

}  // namespace galbnn
