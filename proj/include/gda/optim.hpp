#pragma once

#include <cmath>
#include <vector>

#include "gda/graph.hpp"

namespace gda {

// Decoupled weight decay Adam. Parameter order is fixed at construction and
// determines nothing numerically (per-parameter state), but keep it stable
// anyway so checkpoints and logs line up across runs.
class AdamW {
public:
    struct Hyper {
        real lr = 1e-3;
        real beta1 = 0.9;
        real beta2 = 0.999;
        real eps = 1e-8;
        real weight_decay = 0.0;
    };

    AdamW(std::vector<Value> params, Hyper hp) : params_(std::move(params)), hp_(hp) {
        for (const auto& p : params_) {
            GDA_CHECK(p->requires_grad, "AdamW given a non-trainable value");
            m_.push_back(Tensor::zeros(p->val.shape));
            v_.push_back(Tensor::zeros(p->val.shape));
        }
    }

    void zero_grad() {
        for (auto& p : params_)
            if (!p->grad.data.empty()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

    void step() {
        ++t_;
        real bc1 = 1.0 - std::pow(hp_.beta1, t_);
        real bc2 = 1.0 - std::pow(hp_.beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (p->grad.data.empty()) continue;  // never touched by backward
            for (long k = 0; k < p->val.numel(); ++k) {
                real g = p->grad.data[k];
                real& m = m_[i].data[k];
                real& v = v_[i].data[k];
                m = hp_.beta1 * m + (1.0 - hp_.beta1) * g;
                v = hp_.beta2 * v + (1.0 - hp_.beta2) * g * g;
                real mh = m / bc1;
                real vh = v / bc2;
                p->val.data[k] -= hp_.lr * (mh / (std::sqrt(vh) + hp_.eps) +
                                            hp_.weight_decay * p->val.data[k]);
            }
        }
    }

    void set_lr(real lr) { hp_.lr = lr; }
    real lr() const { return hp_.lr; }
    long step_count() const { return t_; }
    const std::vector<Value>& params() const { return params_; }

private:
    std::vector<Value> params_;
    Hyper hp_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

}  // namespace gda
