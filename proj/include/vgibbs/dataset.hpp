#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "vgibbs/core.hpp"
#include "vgibbs/famodel.hpp"
#include "vgibbs/rng.hpp"

namespace vgibbs {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/**
 * N x d table with an observedness mask (true = observed). Entries under
 * mask == false hold NaN. Every row has at least one observed entry.
 */
class IncompleteDataset {
  public:
    IncompleteDataset() = default;

    /// Copies `values`, blanks masked-out entries, validates.
    IncompleteDataset(const Table& values, const Mask& mask) : values_(values), mask_(mask) {
        require(values.rows() == mask.rows() && values.cols() == mask.cols(), "IncompleteDataset: values/mask shape mismatch");
        for (Index i = 0; i < values_.rows(); ++i) {
            bool any = false;
            for (Index j = 0; j < values_.cols(); ++j) {
                if (mask_(i, j)) {
                    if (!std::isfinite(values_(i, j)))
                        throw InvalidData("IncompleteDataset: non-finite observed value at row " + std::to_string(i));
                    any = true;
                } else {
                    values_(i, j) = kMissing;
                }
            }
            if (!any) throw InvalidData("IncompleteDataset: row " + std::to_string(i) + " has no observed entries");
        }
    }

    static IncompleteDataset complete(const Table& values) {
        return IncompleteDataset(values, Mask::Constant(values.rows(), values.cols(), true));
    }

    /// Drops rows with no observed entries instead of rejecting them.
    static IncompleteDataset dropping_empty_rows(const Table& values, const Mask& mask) {
        std::vector<Index> keep;
        for (Index i = 0; i < mask.rows(); ++i)
            if (mask.row(i).any()) keep.push_back(i);
        Table v(static_cast<Index>(keep.size()), values.cols());
        Mask m(static_cast<Index>(keep.size()), values.cols());
        for (Index r = 0; r < static_cast<Index>(keep.size()); ++r) {
            v.row(r) = values.row(keep[r]);
            m.row(r) = mask.row(keep[r]);
        }
        return IncompleteDataset(v, m);
    }

    Index rows() const { return values_.rows(); }
    Index cols() const { return values_.cols(); }
    const Table& values() const noexcept { return values_; }
    const Mask& mask() const noexcept { return mask_; }
    bool observed(Index i, Index j) const { return mask_(i, j); }

    std::vector<Index> missing_dims(Index i) const {
        std::vector<Index> out;
        for (Index j = 0; j < cols(); ++j)
            if (!mask_(i, j)) out.push_back(j);
        return out;
    }

    double missing_fraction() const {
        if (values_.size() == 0) return 0.0;
        return 1.0 - static_cast<double>(mask_.count()) / static_cast<double>(mask_.size());
    }

    IncompleteDataset subset(const std::vector<Index>& rows) const {
        Table v(static_cast<Index>(rows.size()), cols());
        Mask m(static_cast<Index>(rows.size()), cols());
        for (Index r = 0; r < static_cast<Index>(rows.size()); ++r) {
            v.row(r) = values_.row(rows[r]);
            m.row(r) = mask_.row(rows[r]);
        }
        return IncompleteDataset(v, m);
    }

  private:
    Table values_;
    Mask mask_;
};

/**
 * K persistent imputation chains over an incomplete dataset. chain(k) is a
 * complete N x d table whose observed coordinates mirror the base.
 */
class ImputedDataset {
  public:
    ImputedDataset() = default;
    ImputedDataset(IncompleteDataset base, Index k) : base_(std::move(base)) {
        require(k >= 1, "ImputedDataset: K must be >= 1");
        chains_.assign(static_cast<std::size_t>(k), base_.values());
    }

    const IncompleteDataset& base() const noexcept { return base_; }
    Index num_chains() const { return static_cast<Index>(chains_.size()); }
    Index rows() const { return base_.rows(); }
    Index cols() const { return base_.cols(); }
    const Table& chain(Index k) const { return chains_[static_cast<std::size_t>(k)]; }
    Table& chain(Index k) { return chains_[static_cast<std::size_t>(k)]; }

    bool is_complete() const {
        return std::all_of(chains_.begin(), chains_.end(), [](const Table& t) { return t.allFinite(); });
    }

    /// True when every chain agrees exactly with the base on observed entries.
    bool observed_intact() const {
        const auto& v = base_.values();
        const auto& m = base_.mask();
        for (const auto& c : chains_)
            for (Index i = 0; i < v.rows(); ++i)
                for (Index j = 0; j < v.cols(); ++j)
                    if (m(i, j) && c(i, j) != v(i, j)) return false;
        return true;
    }

    /// All chains stacked into one (K*N) x d complete table, chain-major.
    Table stacked() const {
        Table out(num_chains() * rows(), cols());
        for (Index k = 0; k < num_chains(); ++k) out.middleRows(k * rows(), rows()) = chain(k);
        return out;
    }

  private:
    IncompleteDataset base_;
    std::vector<Table> chains_;
};

struct MaskDraw {
    Mask mask;               // surviving rows only
    std::vector<Index> rows; // indices of surviving rows in the original table
    bool empty() const { return rows.empty(); }
};

/// MCAR: each entry missing independently with probability `frac`; rows
/// left without observations are removed.
inline MaskDraw mcar_mask(Index n, Index d, double frac, Rng& rng) {
    require(frac >= 0.0 && frac < 1.0, "mcar_mask: frac must lie in [0, 1)");
    require(n >= 0 && d >= 1, "mcar_mask: invalid shape");
    Mask full(n, d);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) full(i, j) = !(rng.uniform() < frac);
    MaskDraw out;
    for (Index i = 0; i < n; ++i)
        if (full.row(i).any()) out.rows.push_back(i);
    out.mask.resize(static_cast<Index>(out.rows.size()), d);
    for (Index r = 0; r < static_cast<Index>(out.rows.size()); ++r) out.mask.row(r) = full.row(out.rows[r]);
    return out;
}

inline IncompleteDataset apply_mask(const Table& values, const MaskDraw& draw) {
    Table v(static_cast<Index>(draw.rows.size()), values.cols());
    for (Index r = 0; r < static_cast<Index>(draw.rows.size()); ++r) v.row(r) = values.row(draw.rows[r]);
    return IncompleteDataset(v, draw.mask);
}

/// Ground-truth 6-d, 2-factor model used for the toy studies.
inline FaParams toy_truth() {
    FaParams p;
    p.F.resize(6, 2);
    p.F << -5, -2,
            4,  0,
           -3, -1,
           -3, -3,
            1,  5,
           -1,  2;
    p.mu.resize(6);
    p.mu << 3, -1, 0, 2, -1, 0;
    Vec psi(6);
    psi << 50.4794, 30.0988, 6.766, 17.3357, 40.9839, 25.1122;
    p.gamma = psi.array().log().matrix();
    return p;
}

inline constexpr Index kToyTrainSize = 6400;
inline constexpr Index kToyTestSize = 5000;

struct ToyData {
    Table train;
    Table test;
    FaParams truth;
};

inline ToyData make_toy_dataset(Index n_train = kToyTrainSize, Index n_test = kToyTestSize, std::uint64_t seed = 0) {
    require(n_train >= 1 && n_test >= 1, "make_toy_dataset: sizes must be positive");
    const Rng root(seed);
    Rng train_rng = root.substream("toy-train");
    Rng test_rng = root.substream("toy-test");
    ToyData out{Table(), Table(), toy_truth()};
    out.train = fa_sample(out.truth, n_train, train_rng);
    out.test = fa_sample(out.truth, n_test, test_rng);
    return out;
}

/// Per-column affine transform x -> (x - location) / scale.
struct Standardizer {
    Vec location;
    Vec scale;

    Table apply(const Table& t) const {
        Table out = t;
        for (Index j = 0; j < t.cols(); ++j) out.col(j) = (t.col(j).array() - location(j)) / scale(j);
        return out;
    }

    IncompleteDataset apply(const IncompleteDataset& data) const { return IncompleteDataset(apply(data.values()), data.mask()); }

    /// Maps a model fitted on standardised data back to the original scale.
    FaParams unapply(const FaParams& p) const {
        FaParams out = p;
        out.F = scale.asDiagonal() * p.F;
        out.mu = (p.mu.array() * scale.array() + location.array()).matrix();
        out.gamma = (p.gamma.array() + 2.0 * scale.array().log()).matrix();
        return out;
    }

    /// Maps an original-scale model into standardised coordinates.
    FaParams apply(const FaParams& p) const {
        FaParams out = p;
        out.F = scale.cwiseInverse().asDiagonal() * p.F;
        out.mu = ((p.mu.array() - location.array()) / scale.array()).matrix();
        out.gamma = (p.gamma.array() - 2.0 * scale.array().log()).matrix();
        return out;
    }

    static Standardizer fit(const IncompleteDataset& data) {
        Standardizer s{Vec(data.cols()), Vec(data.cols())};
        for (Index j = 0; j < data.cols(); ++j) {
            double sum = 0.0, n = 0.0;
            for (Index i = 0; i < data.rows(); ++i)
                if (data.observed(i, j)) {
                    sum += data.values()(i, j);
                    n += 1.0;
                }
            if (n == 0.0) throw InvalidData("standardize: column " + std::to_string(j) + " has no observed entries");
            const double mean = sum / n;
            double ss = 0.0;
            for (Index i = 0; i < data.rows(); ++i)
                if (data.observed(i, j)) ss += (data.values()(i, j) - mean) * (data.values()(i, j) - mean);
            const double sd = std::sqrt(ss / n);
            s.location(j) = mean;
            s.scale(j) = sd > 0.0 ? sd : 1.0;
        }
        return s;
    }
};

struct Split {
    IncompleteDataset train;
    IncompleteDataset val;
    Standardizer standardizer;
};

/// Shuffled train/validation split; standardisation statistics come from
/// the observed entries of the training part only (population std).
inline Split split_standardize(const IncompleteDataset& data, double val_frac, std::uint64_t seed) {
    require(val_frac >= 0.0 && val_frac < 1.0, "split_standardize: val_frac must lie in [0, 1)");
    std::vector<Index> order(static_cast<std::size_t>(data.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng = Rng(seed).substream("split");
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    const auto n_val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(order.size())));
    std::vector<Index> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<Index> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    IncompleteDataset train = data.subset(train_rows);
    IncompleteDataset val = data.subset(val_rows);
    Standardizer s = Standardizer::fit(train);
    return {s.apply(train), s.apply(val), s};
}

}  // namespace vgibbs
