#ifndef SWIPE_OPTIM_HPP
#define SWIPE_OPTIM_HPP

#include <cmath>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "nn.hpp"

namespace swipe::optim {

struct AdamWConfig {
    double lr = 1e-3;
    double lr_min = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    int warmup = 0;

    void validate() const
    {
        if (!(lr > 0.0) || lr_min < 0.0 || lr_min > lr) {
            throw ConfigError("optimizer needs lr > 0 and 0 <= lr_min <= lr");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("optimizer betas must lie in [0, 1)");
        }
        if (weight_decay < 0.0 || warmup < 0) {
            throw ConfigError("weight_decay and warmup must be >= 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c)
{
    j = nlohmann::json{{"kind", "adamw"},  {"lr", c.lr},     {"lr_min", c.lr_min},
                       {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
                       {"weight_decay", c.weight_decay}, {"warmup", c.warmup}, {"schedule", "cosine"}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c)
{
    j.at("lr").get_to(c.lr);
    j.at("lr_min").get_to(c.lr_min);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("eps").get_to(c.eps);
    j.at("weight_decay").get_to(c.weight_decay);
    c.warmup = j.value("warmup", 0);
}

/// Linear warmup, then cosine decay from lr to lr_min over the remaining steps.
inline double cosine_lr(const AdamWConfig& c, int step, int total_steps)
{
    if (step < c.warmup) {
        return c.lr * (step + 1) / c.warmup;
    }
    const int span = std::max(1, total_steps - c.warmup - 1);
    const double t = std::min(1.0, double(step - c.warmup) / span);
    return c.lr_min + 0.5 * (c.lr - c.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam with decoupled weight decay. Decay applies to weight tensors only.
template <typename T>
class AdamW {
public:
    AdamW(nn::ParamRefs<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg)
    {
        cfg_.validate();
        for (auto* p : params_) {
            m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
            decay_.push_back(p->name.ends_with(".weight"));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    long steps() const { return t_; }

    void step(double lr)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.eps);
        const T shrink = static_cast<T>(1.0 - lr * cfg_.weight_decay);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
            v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseAbs2();
            if (decay_[i]) {
                p.value *= shrink;
            }
            p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
        }
    }

private:
    nn::ParamRefs<T> params_;
    AdamWConfig cfg_;
    std::vector<Mat<T>> m_, v_;
    std::vector<bool> decay_;
    long t_ = 0;
};

} // namespace swipe::optim

#endif
