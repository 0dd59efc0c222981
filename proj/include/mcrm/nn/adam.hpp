#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mcrm/nn/tensor.hpp"

namespace mcrm::nn {

// Adaptive-moment gradient descent with bias correction. Moment tensors are
// keyed by parameter name so optimizer state survives checkpointing.
template <typename T>
class Adam {
public:
    Adam(T lr = T(2e-4), T beta1 = T(0.5), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<ParamRef<T>>& params) {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (const auto& p : params) {
            auto& m = m_[p.name];
            auto& v = v_[p.name];
            if (m.size() != p.value->size()) {
                m = Tensor<T>(p.value->n, p.value->c, p.value->h, p.value->w);
                v = Tensor<T>(p.value->n, p.value->c, p.value->h, p.value->w);
            }
            for (size_t i = 0; i < p.value->size(); ++i) {
                const T g = p.grad->data[i];
                m.data[i] = beta1_ * m.data[i] + (T(1) - beta1_) * g;
                v.data[i] = beta2_ * v.data[i] + (T(1) - beta2_) * g * g;
                const T mh = m.data[i] / bc1;
                const T vh = v.data[i] / bc2;
                p.value->data[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    static void zero_grads(const std::vector<ParamRef<T>>& params) {
        for (const auto& p : params) p.grad->zero();
    }

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    T learning_rate() const { return lr_; }

    std::map<std::string, Tensor<T>>& first_moments() { return m_; }
    std::map<std::string, Tensor<T>>& second_moments() { return v_; }
    const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
    const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }

private:
    T lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Tensor<T>> m_, v_;
};

} // namespace mcrm::nn
