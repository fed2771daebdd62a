#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "vgibbs/dataset.hpp"
#include "vgibbs/famodel.hpp"

namespace vgibbs {

/// Averaged E-step statistics for factor analysis with missing entries.
struct EmAccumulators {
    Mat H;      // k x k, mean E[z z^T]
    Mat A;      // d x k, mean E[(x - mu_hat) z^T]
    Mat V;      // d x d, mean E[(x - mu_hat)(x - mu_hat)^T]
    Vec mu_hat; // mean of expected completions
};

/// Posterior of (x_mis, z) given x_obs for one row.
struct RowPosterior {
    std::vector<Index> obs, mis;
    Mat sigma_z;   // k x k
    Vec mu_z;      // k
    Mat sigma_mis; // |mis| x |mis|
    Vec mu_mis;    // |mis|
    Mat c_mis_z;   // |mis| x k
};

namespace detail {

/// Posterior quantities that depend only on the missingness pattern.
struct PatternPosterior {
    std::vector<Index> obs, mis;
    Mat sigma_z;   // k x k
    Mat gain;      // k x |obs|, maps x_o - mu_o to E[z | x_o]
    Mat f_mis;     // |mis| x k
    Mat sigma_mis;
    Mat c_mis_z;
};

inline PatternPosterior pattern_posterior(const FaParams& p, const Vec& psi, const Eigen::Ref<const Eigen::Array<bool, 1, Eigen::Dynamic>>& observed) {
    const Index d = p.d(), k = p.k();
    PatternPosterior pp;
    for (Index j = 0; j < d; ++j) (observed(j) ? pp.obs : pp.mis).push_back(j);
    const auto no = static_cast<Index>(pp.obs.size());
    const auto nm = static_cast<Index>(pp.mis.size());

    // F_o^T Psi_o^{-1}
    Mat ft_psi(k, no);
    for (Index a = 0; a < no; ++a) {
        const Index j = pp.obs[static_cast<std::size_t>(a)];
        ft_psi.col(a) = p.F.row(j).transpose() / psi(j);
    }
    Mat prec = Mat::Identity(k, k);
    for (Index a = 0; a < no; ++a) prec.noalias() += ft_psi.col(a) * p.F.row(pp.obs[static_cast<std::size_t>(a)]);
    const auto llt = robust_cholesky(prec);
    pp.sigma_z = llt.solve(Mat::Identity(k, k));
    pp.sigma_z = 0.5 * (pp.sigma_z + pp.sigma_z.transpose()).eval();
    pp.gain = pp.sigma_z * ft_psi;

    pp.f_mis.resize(nm, k);
    Vec psi_m(nm);
    for (Index a = 0; a < nm; ++a) {
        const Index j = pp.mis[static_cast<std::size_t>(a)];
        pp.f_mis.row(a) = p.F.row(j);
        psi_m(a) = psi(j);
    }
    pp.c_mis_z = pp.f_mis * pp.sigma_z;
    pp.sigma_mis = pp.c_mis_z * pp.f_mis.transpose();
    pp.sigma_mis.diagonal() += psi_m;
    return pp;
}

inline std::string pattern_key(const Eigen::Ref<const Eigen::Array<bool, 1, Eigen::Dynamic>>& observed) {
    std::string key(static_cast<std::size_t>(observed.size()), '0');
    for (Index j = 0; j < observed.size(); ++j)
        if (observed(j)) key[static_cast<std::size_t>(j)] = '1';
    return key;
}

/// Assigns each row a pattern id (first-appearance order).
inline std::vector<std::size_t> group_patterns(const Mask& mask, std::vector<Index>& representatives) {
    std::unordered_map<std::string, std::size_t> ids;
    std::vector<std::size_t> out(static_cast<std::size_t>(mask.rows()));
    for (Index i = 0; i < mask.rows(); ++i) {
        const auto [it, inserted] = ids.emplace(pattern_key(mask.row(i)), ids.size());
        if (inserted) representatives.push_back(i);
        out[static_cast<std::size_t>(i)] = it->second;
    }
    return out;
}

}  // namespace detail

inline RowPosterior fa_row_posterior(const FaParams& p, const Eigen::Ref<const Eigen::RowVectorXd>& x, const Eigen::Ref<const Eigen::Array<bool, 1, Eigen::Dynamic>>& observed) {
    auto pp = detail::pattern_posterior(p, p.psi(), observed);
    Vec r(static_cast<Index>(pp.obs.size()));
    for (std::size_t a = 0; a < pp.obs.size(); ++a) r(static_cast<Index>(a)) = x(pp.obs[a]) - p.mu(pp.obs[a]);
    RowPosterior post;
    post.mu_z = pp.gain * r;
    post.mu_mis.resize(static_cast<Index>(pp.mis.size()));
    for (std::size_t a = 0; a < pp.mis.size(); ++a) post.mu_mis(static_cast<Index>(a)) = p.mu(pp.mis[a]);
    post.mu_mis += pp.f_mis * post.mu_z;
    post.obs = std::move(pp.obs);
    post.mis = std::move(pp.mis);
    post.sigma_z = std::move(pp.sigma_z);
    post.sigma_mis = std::move(pp.sigma_mis);
    post.c_mis_z = std::move(pp.c_mis_z);
    return post;
}

inline EmAccumulators em_estep(const FaParams& p, const IncompleteDataset& data) {
    require(data.cols() == p.d(), "em_estep: dimension mismatch");
    require(data.rows() >= 1, "em_estep: empty dataset");
    const Index n = data.rows(), k = p.k();
    const Vec psi = p.psi();
    std::vector<Index> reps;
    const auto pattern_of = detail::group_patterns(data.mask(), reps);
    std::vector<detail::PatternPosterior> patterns;
    std::vector<double> counts(reps.size(), 0.0);
    for (Index i : reps) {
        if (!data.mask().row(i).any()) throw InvalidData("em_estep: fully-missing row " + std::to_string(i));
        patterns.push_back(detail::pattern_posterior(p, psi, data.mask().row(i)));
    }

    Table xhat = data.values();
    Mat mu_z(n, k);
    for (Index i = 0; i < n; ++i) {
        const auto pid = pattern_of[static_cast<std::size_t>(i)];
        const auto& pp = patterns[pid];
        counts[pid] += 1.0;
        Vec r(static_cast<Index>(pp.obs.size()));
        for (std::size_t a = 0; a < pp.obs.size(); ++a) r(static_cast<Index>(a)) = xhat(i, pp.obs[a]) - p.mu(pp.obs[a]);
        const Vec mz = pp.gain * r;
        mu_z.row(i) = mz.transpose();
        if (!pp.mis.empty()) {
            const Vec fm = pp.f_mis * mz;
            for (std::size_t a = 0; a < pp.mis.size(); ++a) xhat(i, pp.mis[a]) = p.mu(pp.mis[a]) + fm(static_cast<Index>(a));
        }
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    EmAccumulators acc;
    acc.mu_hat = xhat.colwise().mean().transpose();
    const Mat resid = xhat.rowwise() - acc.mu_hat.transpose();
    acc.H = mu_z.transpose() * mu_z;
    acc.A = resid.transpose() * mu_z;
    acc.V = resid.transpose() * resid;
    for (std::size_t pid = 0; pid < patterns.size(); ++pid) {
        const auto& pp = patterns[pid];
        const double c = counts[pid];
        acc.H += c * pp.sigma_z;
        for (std::size_t a = 0; a < pp.mis.size(); ++a) {
            const Index ja = pp.mis[a];
            acc.A.row(ja) += c * pp.c_mis_z.row(static_cast<Index>(a));
            for (std::size_t b = 0; b < pp.mis.size(); ++b)
                acc.V(ja, pp.mis[b]) += c * pp.sigma_mis(static_cast<Index>(a), static_cast<Index>(b));
        }
    }
    acc.H *= inv_n;
    acc.A *= inv_n;
    acc.V *= inv_n;
    return acc;
}

inline constexpr double kPsiFloor = 1e-8;

inline FaParams em_mstep(const EmAccumulators& acc) {
    const auto llt = robust_cholesky(acc.H);
    FaParams out;
    out.mu = acc.mu_hat;
    out.F = llt.solve(acc.A.transpose()).transpose();
    const Mat resid = acc.V - 2.0 * out.F * acc.A.transpose() + out.F * acc.H * out.F.transpose();
    Vec psi = resid.diagonal();
    if (!psi.allFinite()) throw NumericError("em_mstep: non-finite noise variance");
    psi = psi.cwiseMax(kPsiFloor);
    out.gamma = psi.array().log().matrix();
    return out;
}

/// Average over rows of log N(x_obs; mu_obs, (F F^T + Psi)_obs).
inline double observed_loglik(const FaParams& p, const IncompleteDataset& data) {
    require(data.cols() == p.d(), "observed_loglik: dimension mismatch");
    if (data.rows() == 0) return 0.0;
    const GaussianMoments joint = fa_marginal(p);
    std::vector<Index> reps;
    const auto pattern_of = detail::group_patterns(data.mask(), reps);
    struct Sub {
        std::vector<Index> obs;
        Vec mean;
        Eigen::LLT<Mat> llt;
        double log_norm;
    };
    std::vector<Sub> subs;
    for (Index i : reps) {
        Sub s;
        for (Index j = 0; j < data.cols(); ++j)
            if (data.observed(i, j)) s.obs.push_back(j);
        if (s.obs.empty()) throw InvalidData("observed_loglik: fully-missing row " + std::to_string(i));
        const auto no = static_cast<Index>(s.obs.size());
        Mat cov(no, no);
        s.mean.resize(no);
        for (Index a = 0; a < no; ++a) {
            s.mean(a) = joint.mean(s.obs[static_cast<std::size_t>(a)]);
            for (Index b = 0; b < no; ++b) cov(a, b) = joint.cov(s.obs[static_cast<std::size_t>(a)], s.obs[static_cast<std::size_t>(b)]);
        }
        s.llt = robust_cholesky(cov);
        s.log_norm = -0.5 * (static_cast<double>(no) * kLog2Pi + log_det(s.llt));
        subs.push_back(std::move(s));
    }
    double total = 0.0;
    for (Index i = 0; i < data.rows(); ++i) {
        const auto& s = subs[pattern_of[static_cast<std::size_t>(i)]];
        Vec r(s.mean.size());
        for (Index a = 0; a < r.size(); ++a) r(a) = data.values()(i, s.obs[static_cast<std::size_t>(a)]) - s.mean(a);
        total += s.log_norm - 0.5 * s.llt.matrixL().solve(r).squaredNorm();
    }
    return total / static_cast<double>(data.rows());
}

struct EmResult {
    FaParams params;
    std::vector<double> trace;  // observed log-likelihood, trace[0] at init
};

struct EmOptions {
    int max_iters = 500;
    double tol = 1e-6;  // stop when the average log-likelihood improves by less
};

/// EM for incomplete data. Rows without observations are ignored.
inline EmResult em_fit(const IncompleteDataset& data, const FaParams& init, EmOptions opts = {}) {
    require(opts.max_iters >= 0, "em_fit: max_iters must be nonnegative");
    init.validate();
    std::vector<Index> keep;
    for (Index i = 0; i < data.rows(); ++i)
        if (data.mask().row(i).any()) keep.push_back(i);
    const IncompleteDataset kept = static_cast<Index>(keep.size()) == data.rows() ? data : data.subset(keep);

    EmResult res{init, {observed_loglik(init, kept)}};
    for (int it = 0; it < opts.max_iters; ++it) {
        FaParams next = em_mstep(em_estep(res.params, kept));
        const double ll = observed_loglik(next, kept);
        if (!std::isfinite(ll)) throw NumericError("em_fit: non-finite log-likelihood at iteration " + std::to_string(it + 1));
        const double gain = ll - res.trace.back();
        res.params = std::move(next);
        res.trace.push_back(ll);
        if (gain < opts.tol) break;
    }
    return res;
}

}  // namespace vgibbs
