#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "vgibbs/core.hpp"

namespace vgibbs {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct GaussianMoments {
    Vec mean;
    Mat cov;

    Index dim() const { return mean.size(); }
};

/// Cholesky factor of a symmetric matrix. Retries with diagonal jitter
/// 1e-10, 1e-9, ..., 1e-6 before giving up.
inline Eigen::LLT<Mat> robust_cholesky(const Mat& a) {
    Eigen::LLT<Mat> llt(a);
    if (llt.info() == Eigen::Success) return llt;
    if (!a.allFinite()) throw NumericError("cholesky: non-finite matrix entries");
    double jitter = 1e-10;
    for (int attempt = 0; attempt < 5; ++attempt, jitter *= 10.0) {
        Mat b = a;
        b.diagonal().array() += jitter;
        llt.compute(b);
        if (llt.info() == Eigen::Success) return llt;
    }
    throw NumericError("cholesky: matrix is not positive definite after jitter");
}

inline double log_det(const Eigen::LLT<Mat>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double mvn_logpdf(const GaussianMoments& g, const Vec& x) {
    require(x.size() == g.dim() && g.cov.rows() == g.dim() && g.cov.cols() == g.dim(), "mvn_logpdf: dimension mismatch");
    const auto llt = robust_cholesky(g.cov);
    const Vec z = llt.matrixL().solve(x - g.mean);
    return -0.5 * (static_cast<double>(g.dim()) * kLog2Pi + log_det(llt) + z.squaredNorm());
}

/// Conditional of `g` given x[obs_idx] = obs_vals, over the remaining
/// indices in ascending order.
inline GaussianMoments mvn_condition(const GaussianMoments& g, std::span<const Index> obs_idx, const Vec& obs_vals) {
    const Index d = g.dim();
    require(static_cast<Index>(obs_idx.size()) == obs_vals.size(), "mvn_condition: |obs_vals| != |obs_idx|");
    std::vector<bool> is_obs(static_cast<std::size_t>(d), false);
    for (Index i : obs_idx) {
        require(i >= 0 && i < d, "mvn_condition: index out of range");
        require(!is_obs[static_cast<std::size_t>(i)], "mvn_condition: duplicate index");
        is_obs[static_cast<std::size_t>(i)] = true;
    }
    if (obs_idx.empty()) return g;
    std::vector<Index> rest;
    for (Index i = 0; i < d; ++i)
        if (!is_obs[static_cast<std::size_t>(i)]) rest.push_back(i);
    if (rest.empty()) throw InvalidArgument("mvn_condition: conditioning on every dimension leaves nothing");

    const auto no = static_cast<Index>(obs_idx.size());
    const auto nr = static_cast<Index>(rest.size());
    Mat s_oo(no, no), s_ro(nr, no), s_rr(nr, nr);
    Vec diff(no), mean_r(nr);
    for (Index a = 0; a < no; ++a) {
        diff(a) = obs_vals(a) - g.mean(obs_idx[a]);
        for (Index b = 0; b < no; ++b) s_oo(a, b) = g.cov(obs_idx[a], obs_idx[b]);
    }
    for (Index a = 0; a < nr; ++a) {
        mean_r(a) = g.mean(rest[a]);
        for (Index b = 0; b < no; ++b) s_ro(a, b) = g.cov(rest[a], obs_idx[b]);
        for (Index b = 0; b < nr; ++b) s_rr(a, b) = g.cov(rest[a], rest[b]);
    }
    const auto llt = robust_cholesky(s_oo);
    GaussianMoments out;
    out.mean = mean_r + s_ro * llt.solve(diff);
    out.cov = s_rr - s_ro * llt.solve(s_ro.transpose());
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
    return out;
}

inline GaussianMoments mvn_condition(const GaussianMoments& g, std::initializer_list<Index> obs_idx, const Vec& obs_vals) {
    std::vector<Index> idx(obs_idx);
    return mvn_condition(g, std::span<const Index>(idx), obs_vals);
}

/// KL(p || q) between multivariate Gaussians.
inline double mvn_kl(const GaussianMoments& p, const GaussianMoments& q) {
    require(p.dim() == q.dim(), "mvn_kl: dimension mismatch");
    const auto lq = robust_cholesky(q.cov);
    const auto lp = robust_cholesky(p.cov);
    const Mat q_inv_p = lq.solve(p.cov);
    const Vec diff = q.mean - p.mean;
    const double maha = diff.dot(lq.solve(diff));
    const double kl = 0.5 * (q_inv_p.trace() + maha - static_cast<double>(p.dim()) + log_det(lq) - log_det(lp));
    return std::max(kl, 0.0);
}

/// Differential entropy of N(mu, exp(log_var)).
inline double uv_entropy(double log_var) noexcept { return 0.5 * (kLog2Pi + log_var) + 0.5; }

inline double uv_logpdf(double x, double mu, double log_var) noexcept {
    const double r = x - mu;
    return -0.5 * (kLog2Pi + log_var + r * r * std::exp(-log_var));
}

/// KL(N(mu_p, var_p) || N(mu_q, var_q)).
inline double uv_kl(double mu_p, double var_p, double mu_q, double var_q) noexcept {
    const double r = mu_p - mu_q;
    return 0.5 * (var_p / var_q + r * r / var_q - 1.0 + std::log(var_q / var_p));
}

struct ReparamSample {
    double value;
    double d_mu;
    double d_log_var;
};

inline ReparamSample uv_reparam_sample(double mu, double log_var, double eps) noexcept {
    const double sd = std::exp(0.5 * log_var);
    return {mu + sd * eps, 1.0, 0.5 * sd * eps};
}

}  // namespace vgibbs
