#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "dwnas/tensor.hpp"

namespace dwnas {

// Momentum SGD with a decoupled L2 term:
//   v <- momentum * v + g;  p <- p - lr * v - lr * wd * p
// State is keyed by parameter address; updates are per-parameter independent,
// so iteration order never affects the result.
template <typename T>
class SgdMomentum {
   public:
    SgdMomentum(T lr, T momentum, T weight_decay) : lr_(lr), momentum_(momentum), wd_(weight_decay) {}

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step(const std::vector<Tensor<T>*>& params) {
        for (Tensor<T>* p : params) step_one(*p);
    }

    void step_one(Tensor<T>& p) {
        if (p.grad.empty()) return;
        std::vector<T>& v = state_[&p];
        if (v.size() != p.data.size()) v.assign(p.data.size(), T(0));
        for (size_t i = 0; i < p.data.size(); ++i) {
            v[i] = momentum_ * v[i] + p.grad[i];
            p.data[i] -= lr_ * v[i] + lr_ * wd_ * p.data[i];
        }
    }

    void reset() { state_.clear(); }

   private:
    T lr_, momentum_, wd_;
    std::unordered_map<const Tensor<T>*, std::vector<T>> state_;
};

// Bias-corrected Adam. Rejects non-finite gradients.
template <typename T>
class Adam {
   public:
    Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8), T weight_decay = T(0))
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void set_lr(T lr) { lr_ = lr; }

    struct State {
        int64_t t = 0;
        std::vector<T> m, v;
    };

    void step(const std::vector<Tensor<T>*>& params) {
        for (Tensor<T>* p : params) step_one(*p);
    }

    void step_one(Tensor<T>& p) {
        if (p.grad.empty()) return;
        for (T g : p.grad)
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam: non-finite gradient, update rejected");
        State& s = state_[&p];
        if (s.m.size() != p.data.size()) {
            s.m.assign(p.data.size(), T(0));
            s.v.assign(p.data.size(), T(0));
            s.t = 0;
        }
        ++s.t;
        const double bc1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(s.t));
        const double bc2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(s.t));
        for (size_t i = 0; i < p.data.size(); ++i) {
            const T g = p.grad[i] + wd_ * p.data[i];
            s.m[i] = b1_ * s.m[i] + (T(1) - b1_) * g;
            s.v[i] = b2_ * s.v[i] + (T(1) - b2_) * g * g;
            const T mhat = static_cast<T>(s.m[i] / bc1);
            const T vhat = static_cast<T>(s.v[i] / bc2);
            p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    // State export/import for checkpointing; tensors are matched by the
    // caller-supplied ordering.
    State& state_for(Tensor<T>& p) { return state_[&p]; }
    const std::unordered_map<const Tensor<T>*, State>& states() const { return state_; }

    void reset() { state_.clear(); }

   private:
    T lr_, b1_, b2_, eps_, wd_;
    std::unordered_map<const Tensor<T>*, State> state_;
};

}  // namespace dwnas
