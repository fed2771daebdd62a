#include <gtest/gtest.h>

#include "support.hpp"

using namespace vgibbs;
using namespace vgibbs::testing;

TEST(FaMarginal, ZeroLoadingsGiveDiagonalCovariance) {
    Rng rng(1);
    FaParams p = random_fa(4, 2, rng);
    p.F.setZero();
    const GaussianMoments g = fa_marginal(p);
    EXPECT_TRUE(g.cov.isApprox(Mat(p.psi().asDiagonal()), 1e-15));
    EXPECT_EQ(g.mean, p.mu);
}

TEST(FaMarginal, ToyTruthFirstVariance) {
    const GaussianMoments g = fa_marginal(toy_truth());
    EXPECT_NEAR(g.cov(0, 0), 79.4794, 1e-10);
    EXPECT_EQ(g.mean, toy_truth().mu);
}

TEST(FaMarginalProperty, RotationInvariance) {
    Rng rng(2);
    for (int inst = 0; inst < 50; ++inst) {
        FaParams p = random_fa(5, 3, rng);
        FaParams q = p;
        q.F = p.F * random_orthonormal(3, rng);
        EXPECT_LT((fa_marginal(p).cov - fa_marginal(q).cov).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT(fa_model_kl(p, q), 1e-10);
    }
}

TEST(FaLoglikGrads, LogDensityMatchesMarginal) {
    Rng rng(3);
    const FaParams p = random_fa(4, 2, rng);
    Vec x(4);
    for (Index i = 0; i < 4; ++i) x(i) = rng.normal();
    EXPECT_NEAR(fa_loglik_grads(p, x).logp, mvn_logpdf(fa_marginal(p), x), 1e-12);
}

TEST(FaLoglikGrads, ZeroInputGradientAtMean) {
    Rng rng(4);
    const FaParams p = random_fa(4, 2, rng);
    EXPECT_LT(fa_loglik_grads(p, p.mu).dx.cwiseAbs().maxCoeff(), 1e-14);
}

TEST(FaLoglikGrads, MeanGradientIsNegatedInputGradient) {
    Rng rng(5);
    const FaParams p = random_fa(4, 2, rng);
    Vec x(4);
    for (Index i = 0; i < 4; ++i) x(i) = rng.normal();
    const auto r = fa_loglik_grads(p, x);
    EXPECT_TRUE(r.grads.mu.isApprox(-r.dx, 1e-14));
}

TEST(FaLoglikGrads, RejectsNonFiniteInput) {
    Rng rng(6);
    const FaParams p = random_fa(3, 1, rng);
    Vec x = Vec::Zero(3);
    x(1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(fa_loglik_grads(p, x), InvalidArgument);
}

TEST(FaLoglikGrads, MatchFiniteDifferences) {
    Rng rng(7);
    double worst = 0.0;
    for (int inst = 0; inst < 50; ++inst) {
        const Index d = 2 + static_cast<Index>(rng.uniform_index(5));
        const Index k = 1 + static_cast<Index>(rng.uniform_index(3));
        const FaParams p = random_fa(d, k, rng);
        Vec x(d);
        for (Index i = 0; i < d; ++i) x(i) = p.mu(i) + 2.0 * rng.normal();
        const auto r = fa_loglik_grads(p, x);
        auto f = [&](const Vec& t) {
            FaParams q = p;
            q.unpack(t);
            return mvn_logpdf(fa_marginal(q), x);
        };
        const Vec theta = p.pack();
        worst = std::max(worst, fd_check(f, theta, r.grads.pack(), all_coords(theta.size())).max_rel);
        auto fx = [&](const Vec& y) { return mvn_logpdf(fa_marginal(p), y); };
        worst = std::max(worst, fd_check(fx, x, r.dx, all_coords(d)).max_rel);
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(FaExactConditional, ZeroLoadingsIgnoreRest) {
    Rng rng(8);
    FaParams p = random_fa(3, 1, rng);
    p.F.setZero();
    Vec x(3);
    x << 5, -7, 11;
    const auto c = fa_exact_conditional(p, 1, x);
    EXPECT_NEAR(c.mean, p.mu(1), 1e-14);
    EXPECT_NEAR(c.var, std::exp(p.gamma(1)), 1e-14);
}

TEST(FaExactConditional, HandExample) {
    FaParams p{Mat::Ones(2, 1), Vec::Zero(2), Vec::Zero(2)};
    Vec x(2);
    x << 0.0, 2.0;
    const auto c = fa_exact_conditional(p, 0, x);
    EXPECT_NEAR(c.mean, 1.0, 1e-14);
    EXPECT_NEAR(c.var, 1.5, 1e-14);
}

TEST(FaExactConditionalProperty, AgreesWithJointConditioning) {
    Rng rng(9);
    for (int inst = 0; inst < 50; ++inst) {
        const Index d = 2 + static_cast<Index>(rng.uniform_index(6));
        const FaParams p = random_fa(d, 2, rng);
        Vec x(d);
        for (Index i = 0; i < d; ++i) x(i) = rng.normal();
        for (Index j = 0; j < d; ++j) {
            std::vector<Index> rest;
            Vec vals(d - 1);
            for (Index i = 0; i < d; ++i)
                if (i != j) {
                    vals(static_cast<Index>(rest.size())) = x(i);
                    rest.push_back(i);
                }
            const GaussianMoments ref = mvn_condition(fa_marginal(p), rest, vals);
            const auto c = fa_exact_conditional(p, j, x);
            EXPECT_NEAR(c.mean, ref.mean(0), 1e-10);
            EXPECT_NEAR(c.var, ref.cov(0, 0), 1e-10);
        }
    }
}

TEST(FaSample, MomentsMatch) {
    Rng rng(10);
    FaParams p = random_fa(3, 2, rng);
    const int n = 100000;
    Rng srng(11);
    const Table x = fa_sample(p, n, srng);
    const Vec mean = x.colwise().mean().transpose();
    const Vec sd = fa_marginal(p).cov.diagonal().cwiseSqrt();
    for (Index j = 0; j < 3; ++j) EXPECT_NEAR(mean(j), p.mu(j), 3.0 * sd(j) / std::sqrt(n));

    p.F.setZero();
    Rng srng2(12);
    const Table y = fa_sample(p, n, srng2);
    const Table centred = y.rowwise() - y.colwise().mean();
    const Vec var = (centred.array().square().colwise().sum() / (n - 1)).transpose();
    for (Index j = 0; j < 3; ++j) {
        const double target = std::exp(p.gamma(j));
        EXPECT_NEAR(var(j), target, 4.0 * target * std::sqrt(2.0 / n));
    }
}

TEST(FaSample, FixedSeedIsBitIdentical) {
    Rng a(13), b(13);
    const FaParams p = toy_truth();
    EXPECT_EQ(fa_sample(p, 50, a), fa_sample(p, 50, b));
}

TEST(FaModelKl, ZeroForIdenticalAndRotated) {
    Rng rng(14);
    const FaParams p = random_fa(6, 2, rng);
    EXPECT_LE(fa_model_kl(p, p), 1e-12);
    FaParams q = p;
    q.F = p.F * random_orthonormal(2, rng);
    EXPECT_LE(fa_model_kl(p, q), 1e-10);
}

TEST(FaModelKl, MatchesMonteCarlo) {
    Rng rng(15);
    const FaParams truth = random_fa(4, 2, rng);
    FaParams fit = truth;
    for (Index i = 0; i < fit.F.size(); ++i) fit.F.data()[i] += 0.3 * rng.normal();
    fit.mu.array() += 0.2;
    const FaDensity pt(truth), pf(fit);
    Rng srng(16);
    const Table x = fa_sample(truth, 1000000, srng);
    double sum = 0.0, sumsq = 0.0;
    for (Index i = 0; i < x.rows(); ++i) {
        const Vec xi = x.row(i).transpose();
        const double v = pt.logpdf(xi) - pf.logpdf(xi);
        sum += v;
        sumsq += v * v;
    }
    const double n = static_cast<double>(x.rows());
    const double mean = sum / n;
    EXPECT_NEAR(fa_model_kl(truth, fit), mean, 3.0 * std::sqrt((sumsq / n - mean * mean) / n));
}

TEST(FaParamsJson, BitExactRoundTrip) {
    Rng rng(17);
    const FaParams p = random_fa(5, 3, rng);
    const FaParams q = fa_from_json(nlohmann::json::parse(to_json(p).dump()));
    EXPECT_EQ(p.F, q.F);
    EXPECT_EQ(p.mu, q.mu);
    EXPECT_EQ(p.gamma, q.gamma);
}

TEST(FaParamsJson, RejectsInconsistentLengths) {
    nlohmann::json j = to_json(toy_truth());
    j["mu"] = std::vector<double>{1.0, 2.0};
    EXPECT_THROW(fa_from_json(j), InvalidArgument);
}

TEST(FaInit, StandardNormalLoadingsZeroMeanUnitGamma) {
    Rng rng(18);
    const FaParams p = fa_init(6, 2, rng);
    EXPECT_TRUE(p.mu.isZero(0.0));
    EXPECT_TRUE(p.gamma.isApprox(Vec::Ones(6)));
    EXPECT_EQ(p.F.rows(), 6);
    EXPECT_EQ(p.F.cols(), 2);
}
