#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vgibbs/vgibbs.hpp"

namespace vgibbs::testing {

/// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

struct FdReport {
    double max_rel = 0.0;
    Index checked = 0;
    Index skipped = 0;  // coordinates where the two step sizes disagree (non-smooth point)
};

/**
 * Central differences of f at x along the listed coordinates, compared with
 * `grad`. A coordinate is skipped when the estimates at h and h/2 disagree by
 * more than `kink_tol` relative, which only happens when a leaky-ReLU kink or
 * a clamp boundary lies inside the stencil.
 */
inline FdReport fd_check(const std::function<double(const Vec&)>& f, const Vec& x, const Vec& grad, const std::vector<Index>& coords,
                         double h = 1e-5, double floor_frac = 1e-3, double kink_tol = 1e-3) {
    FdReport r;
    const double floor = floor_frac * std::max(1.0, grad.cwiseAbs().maxCoeff());
    auto central = [&](Index i, double step) {
        Vec p = x, m = x;
        p(i) += step;
        m(i) -= step;
        return (f(p) - f(m)) / (2.0 * step);
    };
    for (Index i : coords) {
        const double a = central(i, h);
        const double b = central(i, 0.5 * h);
        if (rel_err(a, b, floor) > kink_tol) {
            ++r.skipped;
            continue;
        }
        r.max_rel = std::max(r.max_rel, rel_err(a, grad(i), floor));
        ++r.checked;
    }
    return r;
}

inline std::vector<Index> all_coords(Index n) {
    std::vector<Index> c(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] = i;
    return c;
}

inline std::vector<Index> some_coords(Index n, Index count, Rng& rng) {
    if (count >= n) return all_coords(n);
    std::vector<Index> c = all_coords(n);
    for (Index i = 0; i < count; ++i) std::swap(c[static_cast<std::size_t>(i)], c[static_cast<std::size_t>(i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n - i))))]);
    c.resize(static_cast<std::size_t>(count));
    return c;
}

inline FaParams random_fa(Index d, Index k, Rng& rng) {
    FaParams p{Mat(d, k), Vec(d), Vec(d)};
    for (Index i = 0; i < d; ++i) {
        for (Index c = 0; c < k; ++c) p.F(i, c) = rng.normal();
        p.mu(i) = rng.normal();
        p.gamma(i) = 0.5 * rng.normal();
    }
    return p;
}

inline Mat random_orthonormal(Index k, Rng& rng) {
    Mat a(k, k);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    Eigen::HouseholderQR<Mat> qr(a);
    return qr.householderQ() * Mat::Identity(k, k);
}

/// Toy data at a missingness fraction, standardised, with the truth mapped into the same coordinates.
struct ToyFixture {
    IncompleteDataset data;
    FaParams truth;
    Table test;
};

inline ToyFixture toy_fixture(Index n, double frac, std::uint64_t mask_seed, bool standardize = true) {
    const ToyData toy = make_toy_dataset(n, 2000, 0);
    Rng r(mask_seed);
    const IncompleteDataset raw = apply_mask(toy.train, mcar_mask(n, 6, frac, r));
    if (!standardize) return {raw, toy.truth, toy.test};
    const Standardizer st = Standardizer::fit(raw);
    return {st.apply(raw), st.apply(toy.truth), st.apply(toy.test)};
}

}  // namespace vgibbs::testing
