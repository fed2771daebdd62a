#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "vgibbs/core.hpp"

namespace vgibbs {

enum class OptimizerMode { Adam, AMSGrad };

struct OptimizerConfig {
    OptimizerMode mode = OptimizerMode::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Total step count of a cosine decay from `lr` to zero; unset means constant lr.
    std::optional<long> cosine_steps;
};

inline OptimizerConfig optimizer_config(OptimizerMode mode, double lr) {
    OptimizerConfig c;
    c.mode = mode;
    c.lr = lr;
    return c;
}

/**
 * Adam / AMSGrad for gradient ASCENT: step() adds the adaptive update.
 *
 * AMSGrad keeps the running max of the second-moment accumulator and uses
 * it (bias-corrected) in the denominator.
 */
class Optimizer {
  public:
    Optimizer() = default;
    Optimizer(OptimizerConfig cfg, Index n) : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {
        if (cfg_.mode == OptimizerMode::AMSGrad) v_max_ = Vec::Zero(n);
    }

    const OptimizerConfig& config() const noexcept { return cfg_; }
    long steps() const noexcept { return t_; }
    const Vec& first_moment() const noexcept { return m_; }
    const Vec& second_moment() const noexcept { return v_; }
    const Vec& second_moment_max() const noexcept { return v_max_; }

    double current_lr() const noexcept {
        if (!cfg_.cosine_steps || *cfg_.cosine_steps <= 0) return cfg_.lr;
        const double frac = std::min(1.0, static_cast<double>(t_) / static_cast<double>(*cfg_.cosine_steps));
        return 0.5 * cfg_.lr * (1.0 + std::cos(std::numbers::pi * frac));
    }

    /// Denominator sqrt(v_hat) + eps that the next update would use, given the current state.
    Vec denominator() const {
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const Vec& v = cfg_.mode == OptimizerMode::AMSGrad ? v_max_ : v_;
        return (v.array() / bc2).sqrt().matrix() + Vec::Constant(v.size(), cfg_.eps);
    }

    /// Updates `params` in place. Throws NumericError, leaving all state
    /// untouched, when the gradient has non-finite entries.
    void step(Eigen::Ref<Vec> params, const Vec& grad) {
        require(params.size() == m_.size() && grad.size() == m_.size(), "optimizer_step: shape mismatch");
        if (!grad.allFinite()) throw NumericError("optimizer_step: non-finite gradient");
        const double lr = current_lr();
        ++t_;
        m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        if (cfg_.mode == OptimizerMode::AMSGrad) v_max_ = v_max_.cwiseMax(v_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const Vec& v = cfg_.mode == OptimizerMode::AMSGrad ? v_max_ : v_;
        params.array() += (lr / bc1) * m_.array() / ((v.array() / bc2).sqrt() + cfg_.eps);
    }

  private:
    OptimizerConfig cfg_;
    long t_ = 0;
    Vec m_, v_, v_max_;
};

inline Vec optimizer_step(Optimizer& state, const Vec& params, const Vec& grad) {
    Vec out = params;
    state.step(out, grad);
    return out;
}

}  // namespace vgibbs
