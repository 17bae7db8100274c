#pragma once

#include "galbnn/nn/tensor.hpp"

#include <cstdint>
#include <vector>

namespace galbnn::nn {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are allocated lazily to match
/// the parameter list of the first step; later steps must pass the same list.
template <typename T>
class Adam {
public:
    explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

    void step(const std::vector<Param<T>*>& params);

    const AdamHyper& hyper() const { return hyper_; }
    void set_lr(double lr) { hyper_.lr = lr; }
    std::uint64_t steps() const { return t_; }

    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    void restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

private:
    AdamHyper hyper_;
    std::uint64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace galbnn::nn
