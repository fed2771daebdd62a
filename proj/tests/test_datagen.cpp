#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace vgibbs;
using namespace vgibbs::testing;

TEST(McarMask, ZeroFractionKeepsEverything) {
    Rng rng(1);
    const MaskDraw m = mcar_mask(50, 4, 0.0, rng);
    EXPECT_EQ(m.rows.size(), 50u);
    EXPECT_TRUE(m.mask.all());
}

TEST(McarMask, NearOneFractionMayLeaveNothing) {
    Rng rng(2);
    const MaskDraw m = mcar_mask(5, 6, 0.9999, rng);
    EXPECT_TRUE(m.empty());
    EXPECT_EQ(apply_mask(Table::Zero(5, 6), m).rows(), 0);
}

TEST(McarMask, RejectsFractionOutsideRange) {
    Rng rng(3);
    EXPECT_THROW(mcar_mask(5, 2, 1.0, rng), InvalidArgument);
    EXPECT_THROW(mcar_mask(5, 2, -0.1, rng), InvalidArgument);
}

TEST(McarMask, ObservedFractionConcentrates) {
    Rng rng(4);
    const MaskDraw m = mcar_mask(6400, 6, 1.0 / 3.0, rng);
    const double observed = static_cast<double>(m.mask.count()) / (6400.0 * 6.0);
    EXPECT_NEAR(observed, 2.0 / 3.0, 0.01);
    for (Index i = 0; i < m.mask.rows(); ++i) EXPECT_TRUE(m.mask.row(i).any());
}

TEST(McarMaskProperty, PerColumnRatesIndependentOfColumn) {
    for (double frac : {0.1, 1.0 / 3.0, 0.5, 0.8}) {
        Rng rng(5);
        const Index n = 20000;
        const MaskDraw m = mcar_mask(n, 6, frac, rng);
        const double dropped = static_cast<double>(n - static_cast<Index>(m.rows.size()));
        const double tol = 3.0 * std::sqrt(frac * (1.0 - frac) / static_cast<double>(n));
        for (Index j = 0; j < 6; ++j) {
            const double missing = dropped + static_cast<double>(m.mask.rows() - m.mask.col(j).count());
            EXPECT_NEAR(missing / static_cast<double>(n), frac, tol) << "frac " << frac << " column " << j;
        }
    }
}

TEST(McarMaskProperty, SeededDeterminism) {
    Rng a(6), b(6);
    const MaskDraw x = mcar_mask(300, 5, 0.4, a), y = mcar_mask(300, 5, 0.4, b);
    EXPECT_EQ(x.rows, y.rows);
    EXPECT_TRUE((x.mask == y.mask).all());
}

TEST(ToyDataset, TruthParameters) {
    const ToyData toy = make_toy_dataset(10, 10, 0);
    EXPECT_EQ(toy.truth.F(0, 0), -5.0);
    EXPECT_EQ(toy.truth.F(0, 1), -2.0);
    EXPECT_EQ(toy.truth.mu(0), 3.0);
    EXPECT_NEAR(toy.truth.psi()(2), 6.766, 1e-12);
    EXPECT_NEAR(toy.truth.gamma(2), std::log(6.766), 1e-14);
}

TEST(ToyDataset, DefaultSizesAndDeterminism) {
    const ToyData a = make_toy_dataset();
    EXPECT_EQ(a.train.rows(), 6400);
    EXPECT_EQ(a.test.rows(), 5000);
    EXPECT_EQ(a.train.cols(), 6);
    const ToyData b = make_toy_dataset();
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(a.train, make_toy_dataset(6400, 5000, 1).train);
}

TEST(IncompleteDatasetInvariants, RejectsEmptyRowsAndNonFiniteObserved) {
    Table v = Table::Ones(2, 2);
    Mask m = Mask::Constant(2, 2, true);
    m.row(1).setConstant(false);
    EXPECT_THROW(IncompleteDataset(v, m), InvalidData);
    m.setConstant(true);
    v(0, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(IncompleteDataset(v, m), InvalidData);
    m(0, 1) = false;
    const IncompleteDataset ok(v, m);
    EXPECT_TRUE(std::isnan(ok.values()(0, 1)));
}

TEST(CsvIo, RoundTripIsValueExact) {
    Rng rng(7);
    Table v(40, 5);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal() * std::pow(10.0, rng.normal() * 3.0);
    const IncompleteDataset data = apply_mask(v, mcar_mask(40, 5, 0.3, rng));
    std::stringstream ss;
    write_csv(ss, data);
    const IncompleteDataset back = read_csv(ss);
    ASSERT_EQ(back.rows(), data.rows());
    EXPECT_TRUE((back.mask() == data.mask()).all());
    for (Index i = 0; i < data.rows(); ++i)
        for (Index j = 0; j < 5; ++j)
            if (data.observed(i, j)) {
                EXPECT_EQ(back.values()(i, j), data.values()(i, j));
            }
}

TEST(CsvIo, EmptyFieldIsMissing) {
    std::istringstream is("a,b,c\n1.0,,3.0\n");
    const IncompleteDataset d = read_csv(is);
    ASSERT_EQ(d.rows(), 1);
    EXPECT_TRUE(d.observed(0, 0));
    EXPECT_FALSE(d.observed(0, 1));
    EXPECT_TRUE(d.observed(0, 2));
    EXPECT_EQ(d.values()(0, 2), 3.0);
}

TEST(CsvIo, WrongArityNamesTheRow) {
    std::istringstream is("a,b,c\n1,2,3\n1.0,2.0\n");
    try {
        read_csv(is);
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.row(), 2);
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
    }
}

TEST(CsvIo, UnparseableNumberNamesTheRow) {
    std::istringstream is("a,b\n1,abc\n");
    try {
        read_csv(is);
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.row(), 1);
    }
}

TEST(CsvIo, MaskRoundTrip) {
    Rng rng(8);
    const Mask m = mcar_mask(20, 4, 0.5, rng).mask;
    std::stringstream ss;
    write_mask_csv(ss, m);
    EXPECT_TRUE((read_mask_csv(ss) == m).all());
    std::istringstream bad("a\n2\n");
    EXPECT_THROW(read_mask_csv(bad), ParseError);
}

TEST(SplitStandardize, ZeroValFractionGivesEmptyValidation) {
    Rng rng(9);
    const IncompleteDataset d = apply_mask(fa_sample(toy_truth(), 100, rng), mcar_mask(100, 6, 0.2, rng));
    const Split s = split_standardize(d, 0.0, 1);
    EXPECT_EQ(s.val.rows(), 0);
    EXPECT_EQ(s.train.rows(), d.rows());
}

TEST(SplitStandardize, TrainColumnsStandardised) {
    Rng rng(10);
    const IncompleteDataset d = apply_mask(fa_sample(toy_truth(), 500, rng), mcar_mask(500, 6, 0.3, rng));
    const Split s = split_standardize(d, 0.1, 2);
    EXPECT_EQ(s.val.rows(), 50);
    for (Index j = 0; j < 6; ++j) {
        double sum = 0.0, n = 0.0;
        for (Index i = 0; i < s.train.rows(); ++i)
            if (s.train.observed(i, j)) {
                sum += s.train.values()(i, j);
                n += 1.0;
            }
        const double mean = sum / n;
        double ss = 0.0;
        for (Index i = 0; i < s.train.rows(); ++i)
            if (s.train.observed(i, j)) ss += (s.train.values()(i, j) - mean) * (s.train.values()(i, j) - mean);
        EXPECT_NEAR(mean, 0.0, 1e-9);
        EXPECT_NEAR(std::sqrt(ss / n), 1.0, 1e-9);
    }
}

TEST(SplitStandardize, StatisticsIgnoreValidationRows) {
    Rng rng(11);
    const Table x = fa_sample(toy_truth(), 200, rng);
    const Split a = split_standardize(IncompleteDataset::complete(x), 0.25, 3);
    Table y = x;
    for (Index v = 0; v < a.val.rows(); ++v) {
        const Vec raw = (a.val.values().row(v).transpose().array() * a.standardizer.scale.array() + a.standardizer.location.array()).matrix();
        for (Index i = 0; i < x.rows(); ++i)
            if ((x.row(i).transpose() - raw).cwiseAbs().maxCoeff() < 1e-9) y.row(i).array() += 100.0;
    }
    ASSERT_NE(x, y);
    const Split b = split_standardize(IncompleteDataset::complete(y), 0.25, 3);
    EXPECT_EQ(a.standardizer.location, b.standardizer.location);
    EXPECT_EQ(a.standardizer.scale, b.standardizer.scale);
}

TEST(SplitStandardize, UnobservedTrainColumnIsInvalidData) {
    Table v = Table::Ones(4, 2);
    Mask m = Mask::Constant(4, 2, true);
    m.col(1).setConstant(false);
    EXPECT_THROW(split_standardize(IncompleteDataset(v, m), 0.0, 0), InvalidData);
}

TEST(Standardizer, ModelRoundTrip) {
    Rng rng(12);
    const FaParams p = random_fa(4, 2, rng);
    Standardizer s{Vec(4), Vec(4)};
    for (Index j = 0; j < 4; ++j) {
        s.location(j) = rng.normal();
        s.scale(j) = 0.5 + rng.uniform();
    }
    const FaParams q = s.unapply(s.apply(p));
    EXPECT_LT((q.pack() - p.pack()).cwiseAbs().maxCoeff(), 1e-12);
    // the standardised model is the law of the standardised variable
    const GaussianMoments g = fa_marginal(p), gs = fa_marginal(s.apply(p));
    const Mat inv = s.scale.cwiseInverse().asDiagonal();
    EXPECT_LT((inv * g.cov * inv - gs.cov).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ImputedDatasetInvariants, ObservedCoordinatesMirrorBase) {
    Rng rng(13);
    const IncompleteDataset d = apply_mask(fa_sample(toy_truth(), 30, rng), mcar_mask(30, 6, 0.4, rng));
    ImputedDataset imp(d, 3);
    EXPECT_FALSE(imp.is_complete());
    for (Index k = 0; k < 3; ++k)
        for (Index i = 0; i < 30; ++i)
            for (Index j = 0; j < 6; ++j)
                if (!d.observed(i, j)) imp.chain(k)(i, j) = 0.0;
    EXPECT_TRUE(imp.is_complete());
    EXPECT_TRUE(imp.observed_intact());
    const IncompleteDataset& base = imp.base();
    Index obs_i = 0, obs_j = 0;
    while (!base.observed(obs_i, obs_j)) ++obs_j;
    imp.chain(1)(obs_i, obs_j) += 1.0;
    EXPECT_FALSE(imp.observed_intact());
    EXPECT_EQ(imp.stacked().rows(), 3 * d.rows());
}
