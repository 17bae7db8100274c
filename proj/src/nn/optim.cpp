#include "galbnn/nn/optim.hpp"

#include <cmath>

namespace galbnn::nn {

template <typename T>
void Adam<T>::step(const std::vector<Param<T>*>& params) {
    if (m_.empty()) {
        for (auto* p : params) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }
    if (m_.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
    const T step = static_cast<T>(hyper_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(hyper_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = *params[i];
        if (p.value.size() != m_[i].size()) throw ShapeError("optimizer state shape mismatch for " + p.name);
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* m = m_[i].data();
        T* v = v_[i].data();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
        }
    }
}

template <typename T>
void Adam<T>::restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
    if (m.size() != v.size()) throw ShapeError("optimizer moment lists differ in length");
    t_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace galbnn::nn
