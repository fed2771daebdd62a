#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vgibbs/dataset.hpp"
#include "vgibbs/emfit.hpp"
#include "vgibbs/rng.hpp"

namespace vgibbs {

namespace detail {

inline std::vector<std::vector<double>> observed_columns(const IncompleteDataset& data) {
    std::vector<std::vector<double>> cols(static_cast<std::size_t>(data.cols()));
    for (Index i = 0; i < data.rows(); ++i)
        for (Index j = 0; j < data.cols(); ++j)
            if (data.observed(i, j)) cols[static_cast<std::size_t>(j)].push_back(data.values()(i, j));
    for (Index j = 0; j < data.cols(); ++j)
        if (cols[static_cast<std::size_t>(j)].empty())
            throw InvalidData("imputation: column " + std::to_string(j) + " has no observed entries");
    return cols;
}

inline void fill_empirical(const IncompleteDataset& data, const std::vector<std::vector<double>>& cols, Table& chain, Rng& rng) {
    for (Index i = 0; i < data.rows(); ++i)
        for (Index j = 0; j < data.cols(); ++j)
            if (!data.observed(i, j)) {
                const auto& c = cols[static_cast<std::size_t>(j)];
                chain(i, j) = c[rng.uniform_index(c.size())];
            }
}

}  // namespace detail

/// Fills each missing entry with a uniform draw from its column's observed values.
inline ImputedDataset empirical_impute(const IncompleteDataset& data, Index K, Rng& rng) {
    const auto cols = detail::observed_columns(data);
    ImputedDataset out(data, K);
    const Rng base(rng());
    for (Index k = 0; k < K; ++k) {
        Rng chain_rng = base.substream(static_cast<std::uint64_t>(k));
        detail::fill_empirical(data, cols, out.chain(k), chain_rng);
    }
    return out;
}

struct MiceConfig {
    int sweeps = 10;
    double prior_scale = 1e2;      // coefficient prior variance, in units of the noise variance
    double noise_shape = 1e-3;     // inverse-gamma prior on the residual variance
    double noise_scale = 1e-3;

    void validate() const {
        require(sweeps >= 1, "MiceConfig: sweeps must be >= 1");
        require(prior_scale > 0.0 && noise_shape > 0.0 && noise_scale > 0.0, "MiceConfig: prior parameters must be positive");
    }
};

namespace detail {

/// One conjugate Bayesian linear regression draw of column j given the others,
/// written into the missing entries of column j.
inline void mice_update_column(const IncompleteDataset& data, Index j, const MiceConfig& cfg, Table& chain, Rng& rng) {
    const Index n = data.rows(), d = data.cols();
    const Index p = d;  // intercept + (d - 1) predictors
    std::vector<Index> obs_rows, mis_rows;
    for (Index i = 0; i < n; ++i) (data.observed(i, j) ? obs_rows : mis_rows).push_back(i);
    if (mis_rows.empty()) return;

    auto design_row = [&](Index i, Eigen::Ref<Vec> out) {
        out(0) = 1.0;
        Index c = 1;
        for (Index q = 0; q < d; ++q)
            if (q != j) out(c++) = chain(i, q);
    };

    Mat xtx = Mat::Zero(p, p);
    Vec xty = Vec::Zero(p);
    double yty = 0.0;
    Vec row(p);
    for (Index i : obs_rows) {
        design_row(i, row);
        const double y = chain(i, j);
        xtx.selfadjointView<Eigen::Lower>().rankUpdate(row, 1.0);
        xty += y * row;
        yty += y * y;
    }
    Mat lambda = xtx.selfadjointView<Eigen::Lower>();
    // Flat prior on the intercept, ridge on the slopes.
    for (Index c = 1; c < p; ++c) lambda(c, c) += 1.0 / cfg.prior_scale;
    const auto llt = robust_cholesky(lambda);
    const Vec w_n = llt.solve(xty);
    const double a_n = cfg.noise_shape + 0.5 * static_cast<double>(obs_rows.size());
    const double b_n = cfg.noise_scale + 0.5 * std::max(yty - w_n.dot(lambda * w_n), 0.0);

    const double sigma2 = b_n / rng.gamma(a_n);
    Vec z(p);
    for (Index c = 0; c < p; ++c) z(c) = rng.normal();
    // w ~ N(w_n, sigma2 * Lambda^{-1}): solve L^T u = z.
    const Vec w = w_n + std::sqrt(sigma2) * llt.matrixU().solve(z);

    const double sd = std::sqrt(sigma2);
    for (Index i : mis_rows) {
        design_row(i, row);
        chain(i, j) = row.dot(w) + sd * rng.normal();
    }
}

}  // namespace detail

/// Multiple imputation by chained equations with conjugate Bayesian ridge
/// conditionals. Each of the K repetitions starts from an empirical fill.
inline ImputedDataset mice_impute(const IncompleteDataset& data, Index K, const MiceConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto cols = detail::observed_columns(data);
    ImputedDataset out(data, K);
    const Rng base(rng());
    for (Index k = 0; k < K; ++k) {
        Rng rep = base.substream(static_cast<std::uint64_t>(k));
        Table& chain = out.chain(k);
        detail::fill_empirical(data, cols, chain, rep);
        for (int s = 0; s < cfg.sweeps; ++s)
            for (Index j = 0; j < data.cols(); ++j) detail::mice_update_column(data, j, cfg, chain, rep);
    }
    return out;
}

using CompleteFitter = std::function<FaParams(const IncompleteDataset&)>;

/// Fits one model to all K completed copies stacked together (each copy
/// weighted 1/K, which for equal-sized copies is a plain average).
inline FaParams stacked_fit(const ImputedDataset& imputed, const CompleteFitter& fitter) {
    require(imputed.is_complete(), "stacked_fit: chains must be complete");
    return fitter(IncompleteDataset::complete(imputed.stacked()));
}

inline FaParams stacked_em_fit(const ImputedDataset& imputed, const FaParams& init, EmOptions opts = {}) {
    return stacked_fit(imputed, [&](const IncompleteDataset& d) { return em_fit(d, init, opts).params; });
}

}  // namespace vgibbs
