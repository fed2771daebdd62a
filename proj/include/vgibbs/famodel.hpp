#pragma once

#include <cmath>
#include <cstring>
#include <string>

#include <json.hpp>

#include "vgibbs/core.hpp"
#include "vgibbs/gaussians.hpp"
#include "vgibbs/rng.hpp"

namespace vgibbs {

/// Factor analysis x = F z + mu + eps, z ~ N(0, I_k), eps ~ N(0, diag(exp(gamma))).
struct FaParams {
    Mat F;      // d x k loadings
    Vec mu;     // d
    Vec gamma;  // d, log noise variances

    Index d() const { return F.rows(); }
    Index k() const { return F.cols(); }
    Vec psi() const { return gamma.array().exp().matrix(); }

    void validate() const {
        require(F.rows() >= 1 && F.cols() >= 1, "FaParams: need d >= 1 and k >= 1");
        require(mu.size() == F.rows() && gamma.size() == F.rows(), "FaParams: inconsistent dimensions");
        require(gamma.allFinite() && mu.allFinite() && F.allFinite(), "FaParams: non-finite parameters");
    }

    Index num_params() const { return F.size() + mu.size() + gamma.size(); }

    /// Flat layout: F row-major, then mu, then gamma.
    Vec pack() const {
        Vec out(num_params());
        Index o = 0;
        for (Index r = 0; r < F.rows(); ++r)
            for (Index c = 0; c < F.cols(); ++c) out(o++) = F(r, c);
        out.segment(o, mu.size()) = mu;
        o += mu.size();
        out.segment(o, gamma.size()) = gamma;
        return out;
    }

    void unpack(const Vec& flat) {
        require(flat.size() == num_params(), "FaParams::unpack: size mismatch");
        Index o = 0;
        for (Index r = 0; r < F.rows(); ++r)
            for (Index c = 0; c < F.cols(); ++c) F(r, c) = flat(o++);
        mu = flat.segment(o, mu.size());
        o += mu.size();
        gamma = flat.segment(o, gamma.size());
    }

    bool operator==(const FaParams&) const = default;
};

/// Standard normal F, mu = 0, gamma = 1.
inline FaParams fa_init(Index d, Index k, Rng& rng) {
    FaParams p{Mat(d, k), Vec::Zero(d), Vec::Ones(d)};
    for (Index r = 0; r < d; ++r)
        for (Index c = 0; c < k; ++c) p.F(r, c) = rng.normal();
    return p;
}

/// FNV-1a over the raw parameter bytes; used to certify frozen models.
inline std::uint64_t fa_hash(const FaParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto eat = [&h](const double* data, Index n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    eat(p.F.data(), p.F.size());
    eat(p.mu.data(), p.mu.size());
    eat(p.gamma.data(), p.gamma.size());
    return h;
}

struct FaGrads {
    Mat F;
    Vec mu;
    Vec gamma;

    Vec pack() const { return FaParams{F, mu, gamma}.pack(); }
};

inline GaussianMoments fa_marginal(const FaParams& p) {
    GaussianMoments g{p.mu, p.F * p.F.transpose()};
    g.cov.diagonal() += p.psi();
    return g;
}

/**
 * Cached factorisation of the FA marginal. Evaluates log-densities, their
 * input gradients, and the univariate full conditionals, and accumulates
 * parameter gradients over many samples with one d x d reduction at the end.
 */
class FaDensity {
  public:
    explicit FaDensity(const FaParams& p) : params_(p), marginal_(fa_marginal(p)), llt_(robust_cholesky(marginal_.cov)) {
        const Index d = p.d();
        precision_ = llt_.solve(Mat::Identity(d, d));
        precision_ = 0.5 * (precision_ + precision_.transpose()).eval();
        log_norm_ = -0.5 * (static_cast<double>(d) * kLog2Pi + log_det(llt_));
    }

    const FaParams& params() const noexcept { return params_; }
    const GaussianMoments& marginal() const noexcept { return marginal_; }
    const Mat& precision() const noexcept { return precision_; }
    double log_norm() const noexcept { return log_norm_; }

    double logpdf(const Eigen::Ref<const Vec>& x) const {
        const Vec r = x - params_.mu;
        return log_norm_ - 0.5 * r.dot(precision_ * r);
    }

    /// log p(x); writes Sigma^{-1}(x - mu) to `a` (so d/dx log p = -a).
    double logpdf(const Eigen::Ref<const Vec>& x, Vec& a) const {
        const Vec r = x - params_.mu;
        a.noalias() = precision_ * r;
        return log_norm_ - 0.5 * r.dot(a);
    }

    /// Mean and variance of x_j given every other coordinate of `x` (x_j ignored).
    std::pair<double, double> conditional(Index j, const Eigen::Ref<const Vec>& x) const {
        const double lambda_jj = precision_(j, j);
        double acc = 0.0;
        for (Index i = 0; i < x.size(); ++i)
            if (i != j) acc += precision_(j, i) * (x(i) - params_.mu(i));
        return {params_.mu(j) - acc / lambda_jj, 1.0 / lambda_jj};
    }

    class Accumulator {
      public:
        explicit Accumulator(Index d) : outer_(Mat::Zero(d, d)), sum_a_(Vec::Zero(d)) {}

        /// Adds weight * grad_theta log p(x), given a = Sigma^{-1}(x - mu).
        void add(const Vec& a, double weight) {
            outer_.selfadjointView<Eigen::Lower>().rankUpdate(a, weight);
            sum_a_ += weight * a;
            weight_ += weight;
        }

        /// Column-wise add() of A (d x n) with nonnegative weights w (n).
        void add_batch(const Mat& A, const Vec& w) {
            if (A.cols() == 0) return;
            const Mat scaled = A * w.cwiseSqrt().asDiagonal();
            outer_.selfadjointView<Eigen::Lower>().rankUpdate(scaled, 1.0);
            sum_a_.noalias() += A * w;
            weight_ += w.sum();
        }

        FaGrads finish(const FaDensity& density) const {
            const FaParams& p = density.params();
            Mat g = outer_.selfadjointView<Eigen::Lower>();
            g -= weight_ * density.precision();
            g *= 0.5;
            FaGrads out;
            out.F = 2.0 * g * p.F;
            out.mu = sum_a_;
            out.gamma = g.diagonal().cwiseProduct(p.psi());
            return out;
        }

      private:
        Mat outer_;
        Vec sum_a_;
        double weight_ = 0.0;
    };

  private:
    FaParams params_;
    GaussianMoments marginal_;
    Eigen::LLT<Mat> llt_;
    Mat precision_;
    double log_norm_ = 0.0;
};

struct FaLoglikGrads {
    double logp;
    FaGrads grads;
    Vec dx;
};

inline FaLoglikGrads fa_loglik_grads(const FaParams& p, const Vec& x) {
    require(x.size() == p.d(), "fa_loglik_grads: dimension mismatch");
    if (!x.allFinite()) throw InvalidArgument("fa_loglik_grads: non-finite input");
    const FaDensity density(p);
    Vec a;
    const double lp = density.logpdf(x, a);
    FaDensity::Accumulator acc(p.d());
    acc.add(a, 1.0);
    return {lp, acc.finish(density), -a};
}

struct UvGaussian {
    double mean;
    double var;
};

/// Exact p(x_j | x_{-j}); coordinate j of `x` is ignored.
inline UvGaussian fa_exact_conditional(const FaParams& p, Index j, const Vec& x) {
    require(j >= 0 && j < p.d(), "fa_exact_conditional: dimension out of range");
    require(x.size() == p.d(), "fa_exact_conditional: expected a full-length vector");
    const auto [m, v] = FaDensity(p).conditional(j, x);
    return {m, v};
}

inline Table fa_sample(const FaParams& p, Index n, Rng& rng) {
    require(n >= 1, "fa_sample: n must be positive");
    const Vec sd = (0.5 * p.gamma.array()).exp().matrix();
    Table out(n, p.d());
    Vec z(p.k());
    for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < p.k(); ++c) z(c) = rng.normal();
        Vec x = p.F * z + p.mu;
        for (Index j = 0; j < p.d(); ++j) x(j) += sd(j) * rng.normal();
        out.row(i) = x.transpose();
    }
    return out;
}

inline double fa_model_kl(const FaParams& truth, const FaParams& fit) {
    require(truth.d() == fit.d(), "fa_model_kl: dimension mismatch");
    return mvn_kl(fa_marginal(truth), fa_marginal(fit));
}

inline nlohmann::json to_json(const FaParams& p) {
    nlohmann::json j;
    j["d"] = p.d();
    j["k"] = p.k();
    std::vector<double> f;
    for (Index r = 0; r < p.d(); ++r)
        for (Index c = 0; c < p.k(); ++c) f.push_back(p.F(r, c));
    j["F"] = f;
    j["mu"] = std::vector<double>(p.mu.data(), p.mu.data() + p.mu.size());
    j["gamma"] = std::vector<double>(p.gamma.data(), p.gamma.data() + p.gamma.size());
    return j;
}

inline FaParams fa_from_json(const nlohmann::json& j) {
    const Index d = j.at("d").get<Index>();
    const Index k = j.at("k").get<Index>();
    const auto f = j.at("F").get<std::vector<double>>();
    const auto mu = j.at("mu").get<std::vector<double>>();
    const auto gamma = j.at("gamma").get<std::vector<double>>();
    if (static_cast<Index>(f.size()) != d * k || static_cast<Index>(mu.size()) != d || static_cast<Index>(gamma.size()) != d)
        throw InvalidArgument("FaParams JSON: array lengths do not match d and k");
    FaParams p{Mat(d, k), Eigen::Map<const Vec>(mu.data(), d), Eigen::Map<const Vec>(gamma.data(), d)};
    for (Index r = 0; r < d; ++r)
        for (Index c = 0; c < k; ++c) p.F(r, c) = f[static_cast<std::size_t>(r * k + c)];
    p.validate();
    return p;
}

}  // namespace vgibbs
