#pragma once

#include "galbnn/errors.hpp"
#include "galbnn/nn/layers.hpp"
#include "galbnn/rng.hpp"

#include <memory>
#include <string>
#include <vector>

namespace galbnn::nn {

/// Ordered layer stack with a tape of the layers run by the last Train
/// forward. Parameter names are "<prefix><index>.<kind>.<param>".
template <typename T>
class Sequential {
public:
    Sequential() = default;
    explicit Sequential(std::string prefix) : prefix_(std::move(prefix)) {}

    Sequential(const Sequential& o) : prefix_(o.prefix_) {
        for (const auto& l : o.layers_) layers_.push_back(l->clone());
    }
    Sequential& operator=(const Sequential& o) {
        if (this != &o) {
            Sequential tmp(o);
            *this = std::move(tmp);
        }
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    std::size_t size() const { return layers_.size(); }
    Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
    const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
        taped_ = false;
        Tensor<T> h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i]->forward(h, ctx);
            if (!h.all_finite())
                throw NumericError("non-finite output after layer " + layer_name(i));
        }
        taped_ = ctx.mode == Mode::Train;
        return h;
    }

    /// Consumes the tape; a second backward needs a new Train forward.
    Tensor<T> backward(const Tensor<T>& grad_out) {
        if (!taped_) throw UsageError("backward called without a preceding Train forward");
        taped_ = false;
        Tensor<T> g = grad_out;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            g = layers_[i]->backward(g);
            if (!g.all_finite())
                throw NumericError("non-finite gradient at layer " + layer_name(i));
        }
        return g;
    }

    void initialize(std::uint64_t seed) {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->initialize(derive_seed(seed, i));
    }

    void zero_grad() {
        for (auto& l : layers_)
            for (auto* p : l->params()) p->grad.fill(T(0));
    }

    std::string layer_name(std::size_t i) const { return prefix_ + std::to_string(i) + "." + layers_[i]->kind(); }

    struct NamedParam {
        std::string name;
        Param<T>* param;
    };
    struct NamedBuffer {
        std::string name;
        Tensor<T>* tensor;
    };

    std::vector<NamedParam> named_params() {
        std::vector<NamedParam> out;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            for (auto* p : layers_[i]->params()) out.push_back({layer_name(i) + "." + p->name, p});
        return out;
    }

    std::vector<NamedBuffer> named_buffers() {
        std::vector<NamedBuffer> out;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            for (auto& [n, t] : layers_[i]->buffers()) out.push_back({layer_name(i) + "." + n, t});
        return out;
    }

private:
    std::string prefix_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    bool taped_ = false;
};

}  // namespace galbnn::nn
