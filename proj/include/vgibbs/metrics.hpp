#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vgibbs/csv_io.hpp"
#include "vgibbs/famodel.hpp"
#include "vgibbs/varmodel.hpp"

namespace vgibbs {

/// Orthogonal R maximising tr(R^T F_hat^T F_ref), from the eigendecomposition
/// of M^T M with M = F_hat^T F_ref. Directions with vanishing singular value
/// are completed deterministically (Gram-Schmidt over the standard basis).
inline Mat procrustes_rotation(const Mat& f_hat, const Mat& f_ref) {
    require(f_hat.rows() == f_ref.rows() && f_hat.cols() == f_ref.cols(), "procrustes_align: shape mismatch");
    const Index k = f_hat.cols();
    const Mat m = f_hat.transpose() * f_ref;
    Eigen::SelfAdjointEigenSolver<Mat> eig(m.transpose() * m);
    if (eig.info() != Eigen::Success) throw NumericError("procrustes_align: eigendecomposition failed");
    Mat v = eig.eigenvectors();
    const Vec lambda = eig.eigenvalues().cwiseMax(0.0);
    for (Index c = 0; c < k; ++c) {
        Index arg = 0;
        v.col(c).cwiseAbs().maxCoeff(&arg);
        if (v(arg, c) < 0.0) v.col(c) *= -1.0;
    }
    const double tol = lambda.maxCoeff() * 1e-12;
    Mat u = Mat::Zero(k, k);
    std::vector<bool> filled(static_cast<std::size_t>(k), false);
    // Largest singular values first so completion sees the best-determined directions.
    for (Index c = k - 1; c >= 0; --c) {
        if (lambda(c) <= tol) continue;
        u.col(c) = m * v.col(c) / std::sqrt(lambda(c));
        filled[static_cast<std::size_t>(c)] = true;
    }
    Index basis = 0;
    for (Index c = k - 1; c >= 0; --c) {
        if (filled[static_cast<std::size_t>(c)]) continue;
        for (; basis < k; ++basis) {
            Vec e = Vec::Unit(k, basis);
            for (Index o = 0; o < k; ++o)
                if (filled[static_cast<std::size_t>(o)]) e -= u.col(o).dot(e) * u.col(o);
            if (e.norm() > 1e-6) {
                u.col(c) = e.normalized();
                filled[static_cast<std::size_t>(c)] = true;
                ++basis;
                break;
            }
        }
    }
    return u * v.transpose();
}

inline Mat procrustes_align(const Mat& f_hat, const Mat& f_ref) { return f_hat * procrustes_rotation(f_hat, f_ref); }

/// RMSE over (Procrustes-aligned F, mu, Psi as variances).
inline double param_rmse(const FaParams& fit, const FaParams& truth) {
    require(fit.d() == truth.d() && fit.k() == truth.k(), "param_rmse: shape mismatch");
    const Mat f = procrustes_align(fit.F, truth.F);
    const double sq = (f - truth.F).squaredNorm() + (fit.mu - truth.mu).squaredNorm() + (fit.psi() - truth.psi()).squaredNorm();
    const double n = static_cast<double>(truth.d() * truth.k() + 2 * truth.d());
    return std::sqrt(sq / n);
}

inline double percent_bias(double ll_fit_mean, double ll_truth) {
    if (ll_truth == 0.0) throw InvalidArgument("percent_bias: reference log-likelihood is zero");
    return 100.0 * std::abs((ll_fit_mean - ll_truth) / ll_truth);
}

/// Average log-density of complete rows.
inline double complete_loglik(const FaParams& p, const Table& x) {
    require(x.cols() == p.d(), "complete_loglik: dimension mismatch");
    require(x.rows() >= 1, "complete_loglik: empty table");
    const FaDensity dens(p);
    double total = 0.0;
    for (Index i = 0; i < x.rows(); ++i) total += dens.logpdf(x.row(i).transpose());
    return total / static_cast<double>(x.rows());
}

/// Linear-interpolated quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
    require(!sorted.empty(), "quantile of empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct KlProfile {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    std::size_t count = 0;
};

/// KL(q_j(. | x_{-j}) || p(x_j | x_{-j})) over every row and dimension of a complete table.
inline KlProfile conditional_kl_profile(const VarConditionals& vc, const FaParams& ref, const Table& test) {
    require(vc.dim() == ref.d() && test.cols() == ref.d(), "conditional_kl_profile: dimension mismatch");
    require(test.rows() >= 1, "conditional_kl_profile: empty table");
    require(test.allFinite(), "conditional_kl_profile: test rows must be complete");
    const FaDensity dens(ref);
    std::vector<double> kls;
    kls.reserve(static_cast<std::size_t>(test.rows() * test.cols()));
    for (Index i = 0; i < test.rows(); ++i) {
        const Vec x = test.row(i).transpose();
        const Mat q = vc.all_params(x, VarMode::Train);
        for (Index j = 0; j < ref.d(); ++j) {
            const auto [m, v] = dens.conditional(j, x);
            kls.push_back(uv_kl(q(j, 0), std::exp(q(j, 1)), m, v));
        }
    }
    std::sort(kls.begin(), kls.end());
    return {sorted_quantile(kls, 0.5), sorted_quantile(kls, 0.25), sorted_quantile(kls, 0.75), kls.size()};
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct SeedMetrics {
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    double kl_to_truth = kNaN;
    double param_rmse = kNaN;
    double percent_bias = kNaN;
    double test_loglik = kNaN;
    double wall_seconds = kNaN;
    std::map<std::string, double> extras;
    std::map<std::string, double> timings;  // non-reproducible, kept out of the report
};

struct MeanSe {
    double mean = kNaN;
    double se = kNaN;
    std::size_t n = 0;
};

/// Mean and standard error (sample std / sqrt(n)) over finite values.
inline MeanSe mean_se(const std::vector<double>& values) {
    MeanSe out;
    double sum = 0.0;
    for (double v : values)
        if (std::isfinite(v)) {
            sum += v;
            ++out.n;
        }
    if (out.n == 0) return out;
    out.mean = sum / static_cast<double>(out.n);
    if (out.n == 1) {
        out.se = 0.0;
        return out;
    }
    double ss = 0.0;
    for (double v : values)
        if (std::isfinite(v)) ss += (v - out.mean) * (v - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(out.n - 1)) / std::sqrt(static_cast<double>(out.n));
    return out;
}

struct ExperimentReport {
    std::string method;
    double fraction = 0.0;
    std::vector<SeedMetrics> runs;

    std::vector<std::string> metric_names() const {
        std::vector<std::string> names{"kl_to_truth", "param_rmse", "percent_bias", "test_loglik"};
        std::set<std::string> extra;
        for (const auto& r : runs)
            for (const auto& [k, v] : r.extras) extra.insert(k);
        names.insert(names.end(), extra.begin(), extra.end());
        return names;
    }

    static double metric(const SeedMetrics& r, const std::string& name) {
        if (!r.ok) return kNaN;
        if (name == "kl_to_truth") return r.kl_to_truth;
        if (name == "param_rmse") return r.param_rmse;
        if (name == "percent_bias") return r.percent_bias;
        if (name == "test_loglik") return r.test_loglik;
        const auto it = r.extras.find(name);
        return it == r.extras.end() ? kNaN : it->second;
    }

    MeanSe aggregate(const std::string& name) const {
        std::vector<double> v;
        for (const auto& r : runs) v.push_back(metric(r, name));
        return mean_se(v);
    }

    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const SeedMetrics& r) { return !r.ok; }));
    }
};

namespace detail {

inline nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline std::string csv_text(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

}  // namespace detail

/// Wall time is left out so that the serialised report is reproducible.
inline nlohmann::json to_json(const ExperimentReport& r) {
    nlohmann::json j;
    j["method"] = r.method;
    j["fraction"] = r.fraction;
    const auto names = r.metric_names();
    j["runs"] = nlohmann::json::array();
    for (const auto& run : r.runs) {
        nlohmann::json row;
        row["seed"] = run.seed;
        row["status"] = run.ok ? "ok" : "failed";
        if (!run.ok) row["error"] = run.error;
        for (const auto& n : names) row[n] = detail::json_number(ExperimentReport::metric(run, n));
        j["runs"].push_back(row);
    }
    nlohmann::json agg;
    for (const auto& n : names) {
        const auto a = r.aggregate(n);
        agg[n] = {{"mean", detail::json_number(a.mean)}, {"se", detail::json_number(a.se)}, {"n", a.n}};
    }
    j["aggregate"] = agg;
    return j;
}

inline std::vector<std::string> report_columns(const std::vector<ExperimentReport>& reports) {
    std::set<std::string> extra;
    for (const auto& r : reports)
        for (const auto& n : r.metric_names()) extra.insert(n);
    std::vector<std::string> cols{"kl_to_truth", "param_rmse", "percent_bias", "test_loglik"};
    for (const auto& n : extra)
        if (std::find(cols.begin(), cols.end(), n) == cols.end()) cols.push_back(n);
    return cols;
}

/// One row per seed, then `mean` and `se` rows per report.
inline void write_reports_csv(std::ostream& os, const std::vector<ExperimentReport>& reports) {
    const auto cols = report_columns(reports);
    os << "method,fraction,seed,status";
    for (const auto& c : cols) os << ',' << c;
    os << ",error\n";
    for (const auto& r : reports) {
        for (const auto& run : r.runs) {
            os << detail::csv_text(r.method) << ',' << format_double(r.fraction) << ',' << run.seed << ',' << (run.ok ? "ok" : "failed");
            for (const auto& c : cols) os << ',' << detail::csv_number(ExperimentReport::metric(run, c));
            os << ',' << detail::csv_text(run.error) << '\n';
        }
        for (const char* kind : {"mean", "se"}) {
            os << detail::csv_text(r.method) << ',' << format_double(r.fraction) << ',' << kind << ",aggregate";
            for (const auto& c : cols) {
                const auto a = r.aggregate(c);
                os << ',' << detail::csv_number(std::string(kind) == "mean" ? a.mean : a.se);
            }
            os << ",\n";
        }
    }
}

inline void write_timing_csv(std::ostream& os, const std::vector<ExperimentReport>& reports) {
    std::set<std::string> keys;
    for (const auto& r : reports)
        for (const auto& run : r.runs)
            for (const auto& [k, v] : run.timings) keys.insert(k);
    os << "method,fraction,seed,wall_seconds";
    for (const auto& k : keys) os << ',' << k;
    os << '\n';
    for (const auto& r : reports)
        for (const auto& run : r.runs) {
            os << detail::csv_text(r.method) << ',' << format_double(r.fraction) << ',' << run.seed << ',' << detail::csv_number(run.wall_seconds);
            for (const auto& k : keys) {
                const auto it = run.timings.find(k);
                os << ',' << (it == run.timings.end() ? std::string() : detail::csv_number(it->second));
            }
            os << '\n';
        }
}

}  // namespace vgibbs
