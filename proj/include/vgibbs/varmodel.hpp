#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vgibbs/dataset.hpp"
#include "vgibbs/gaussians.hpp"
#include "vgibbs/mlp.hpp"
#include "vgibbs/optim.hpp"
#include "vgibbs/rng.hpp"

namespace vgibbs {

enum class Flavour { Independent, SharedStandard, SharedExtended };
enum class VarMode { Train, Warmup };
enum class Conditioning { Joint, Meanfield };

inline std::string to_string(Flavour f) {
    switch (f) {
        case Flavour::Independent: return "independent";
        case Flavour::SharedStandard: return "shared_standard";
        case Flavour::SharedExtended: return "shared_extended";
    }
    return "?";
}

inline Flavour flavour_from_string(const std::string& s) {
    if (s == "independent") return Flavour::Independent;
    if (s == "shared_standard" || s == "shared") return Flavour::SharedStandard;
    if (s == "shared_extended" || s == "extended") return Flavour::SharedExtended;
    throw InvalidArgument("unknown variational flavour '" + s + "'");
}

struct VarArch {
    Flavour flavour = Flavour::Independent;
    int hidden = 64;
    double clamp_lo = -10.0;
    double clamp_hi = 10.0;
};

/// Gradients for every network of a VarConditionals, in pack() order.
struct VarGrads {
    std::vector<MlpGrads> nets;
};

/// Output of a batched evaluation plus whatever backward() needs.
struct VarEval {
    Vec mu;
    Vec log_var;
    std::vector<Index> targets;
    std::vector<std::uint8_t> inside;  // 1 when log_var was not clamped
    std::vector<std::vector<Index>> groups;  // query indices per target dim
    std::vector<MlpCache> head_caches;       // per target dim (empty groups have none)
    MlpCache trunk_cache;
    Mat trunk_pre;  // trunk output before the outer leaky rectifier

    Index size() const { return mu.size(); }
};

/**
 * The d univariate Gaussian conditionals q_j(x_j | rest).
 *
 * Independent: d networks (d-1) -> h -> h -> 2 fed with x minus coordinate j.
 * Shared*: a trunk d -> h -> h (leaky output) shared by all d heads
 * h -> h -> 2. SharedStandard zeroes coordinate j before the trunk;
 * SharedExtended keeps it, except in warm-up mode.
 */
class VarConditionals {
  public:
    VarConditionals() = default;

    VarConditionals(Index d, VarArch arch, Rng& rng) : arch_(arch), d_(d) {
        require(d >= 2, "VarConditionals: need d >= 2");
        require(arch.hidden >= 1, "VarConditionals: hidden width must be positive");
        require(arch.clamp_lo < arch.clamp_hi, "VarConditionals: invalid log-variance clamp");
        const int h = arch.hidden;
        const int di = static_cast<int>(d);
        if (arch.flavour == Flavour::Independent) {
            for (Index j = 0; j < d; ++j) nets_.push_back(Mlp::kaiming({di - 1, h, h, 2}, rng));
        } else {
            nets_.push_back(Mlp::kaiming({di, h, h}, rng));
            for (Index j = 0; j < d; ++j) nets_.push_back(Mlp::kaiming({h, h, 2}, rng));
        }
    }

    VarConditionals(Index d, VarArch arch, std::vector<Mlp> nets) : arch_(arch), d_(d), nets_(std::move(nets)) {
        const auto expected = static_cast<std::size_t>(shared() ? d + 1 : d);
        require(nets_.size() == expected, "VarConditionals: wrong number of networks");
        for (Index j = 0; j < d; ++j) {
            require(head(j).output_size() == 2, "VarConditionals: heads must emit two values");
            const Index in = shared() ? trunk().output_size() : d - 1;
            require(head(j).input_size() == in, "VarConditionals: head input size mismatch");
        }
        if (shared()) require(trunk().input_size() == d, "VarConditionals: trunk input size mismatch");
    }

    Flavour flavour() const noexcept { return arch_.flavour; }
    const VarArch& arch() const noexcept { return arch_; }
    Index dim() const noexcept { return d_; }
    bool shared() const noexcept { return arch_.flavour != Flavour::Independent; }

    const std::vector<Mlp>& nets() const noexcept { return nets_; }
    std::vector<Mlp>& nets() noexcept { return nets_; }
    const Mlp& trunk() const { return nets_.front(); }
    const Mlp& head(Index j) const { return nets_[static_cast<std::size_t>(shared() ? j + 1 : j)]; }

    /// Number of input columns pushed through the shared trunk so far.
    long trunk_passes() const noexcept { return trunk_passes_; }
    void reset_trunk_passes() noexcept { trunk_passes_ = 0; }

    /// Evaluates q_{targets[b]} at the conditioning input X.col(b) for every b.
    VarEval evaluate(const Mat& X, std::span<const Index> targets, VarMode mode) const {
        require(X.rows() == d_, "var_params: input must have d rows");
        require(static_cast<Index>(targets.size()) == X.cols(), "var_params: one target per input column");
        const Index B = X.cols();
        VarEval ev;
        ev.targets.assign(targets.begin(), targets.end());
        ev.groups.assign(static_cast<std::size_t>(d_), {});
        for (Index b = 0; b < B; ++b) {
            const Index j = ev.targets[static_cast<std::size_t>(b)];
            if (j < 0 || j >= d_) throw InvalidArgument("var_params: target dimension out of range");
            ev.groups[static_cast<std::size_t>(j)].push_back(b);
        }
        ev.head_caches.resize(static_cast<std::size_t>(d_));
        Mat raw(2, B);

        if (!shared()) {
            for (Index j = 0; j < d_; ++j) {
                const auto& g = ev.groups[static_cast<std::size_t>(j)];
                if (g.empty()) continue;
                Mat in(d_ - 1, static_cast<Index>(g.size()));
                for (Index c = 0; c < in.cols(); ++c) {
                    const auto src = X.col(g[static_cast<std::size_t>(c)]);
                    in.col(c).head(j) = src.head(j);
                    in.col(c).tail(d_ - 1 - j) = src.tail(d_ - 1 - j);
                }
                const Mat out = head(j).forward(in, &ev.head_caches[static_cast<std::size_t>(j)]);
                for (Index c = 0; c < out.cols(); ++c) raw.col(g[static_cast<std::size_t>(c)]) = out.col(c);
            }
        } else {
            Mat in = X;
            if (arch_.flavour == Flavour::SharedStandard || mode == VarMode::Warmup)
                for (Index b = 0; b < B; ++b) in(ev.targets[static_cast<std::size_t>(b)], b) = 0.0;
            ev.trunk_pre = trunk().forward(in, &ev.trunk_cache);
            trunk_passes_ += B;
            const Mat s = ev.trunk_pre.unaryExpr([](double v) { return v > 0.0 ? v : Mlp::kNegativeSlope * v; });
            for (Index j = 0; j < d_; ++j) {
                const auto& g = ev.groups[static_cast<std::size_t>(j)];
                if (g.empty()) continue;
                Mat hs(s.rows(), static_cast<Index>(g.size()));
                for (Index c = 0; c < hs.cols(); ++c) hs.col(c) = s.col(g[static_cast<std::size_t>(c)]);
                const Mat out = head(j).forward(hs, &ev.head_caches[static_cast<std::size_t>(j)]);
                for (Index c = 0; c < out.cols(); ++c) raw.col(g[static_cast<std::size_t>(c)]) = out.col(c);
            }
        }

        ev.mu = raw.row(0).transpose();
        ev.log_var.resize(B);
        ev.inside.resize(static_cast<std::size_t>(B));
        for (Index b = 0; b < B; ++b) {
            const double lv = raw(1, b);
            ev.inside[static_cast<std::size_t>(b)] = lv > arch_.clamp_lo && lv < arch_.clamp_hi;
            ev.log_var(b) = std::clamp(lv, arch_.clamp_lo, arch_.clamp_hi);
        }
        return ev;
    }

    /// Accumulates into `grads` the gradient of sum_b d_mu(b) mu(b) + d_log_var(b) log_var(b).
    void backward(const VarEval& ev, const Vec& d_mu, const Vec& d_log_var, VarGrads& grads) const {
        const Index B = ev.size();
        require(d_mu.size() == B && d_log_var.size() == B, "var backward: upstream size mismatch");
        require(grads.nets.size() == nets_.size(), "var backward: gradient buffer mismatch");
        Mat ds;
        if (shared()) ds = Mat::Zero(trunk().output_size(), B);
        for (Index j = 0; j < d_; ++j) {
            const auto& g = ev.groups[static_cast<std::size_t>(j)];
            if (g.empty()) continue;
            Mat up(2, static_cast<Index>(g.size()));
            for (Index c = 0; c < up.cols(); ++c) {
                const auto b = g[static_cast<std::size_t>(c)];
                up(0, c) = d_mu(b);
                up(1, c) = ev.inside[static_cast<std::size_t>(b)] ? d_log_var(b) : 0.0;
            }
            const auto idx = static_cast<std::size_t>(shared() ? j + 1 : j);
            const Mat din = head(j).backward(ev.head_caches[static_cast<std::size_t>(j)], up, grads.nets[idx]);
            if (shared())
                for (Index c = 0; c < din.cols(); ++c) ds.col(g[static_cast<std::size_t>(c)]) += din.col(c);
        }
        if (shared()) {
            ds.array() *= ev.trunk_pre.array().unaryExpr([](double v) { return v > 0.0 ? 1.0 : Mlp::kNegativeSlope; });
            trunk().backward(ev.trunk_cache, ds, grads.nets.front());
        }
    }

    /// (mu_j, log_var_j) for every j at one input, as a d x 2 matrix. The
    /// extended flavour in train mode needs a single trunk pass for this.
    Mat all_params(const Vec& x, VarMode mode) const {
        require(x.size() == d_, "all_params: input must have length d");
        Mat out(d_, 2);
        if (arch_.flavour == Flavour::SharedExtended && mode == VarMode::Train) {
            const Vec pre = trunk().forward(x);
            ++trunk_passes_;
            const Vec s = pre.unaryExpr([](double v) { return v > 0.0 ? v : Mlp::kNegativeSlope * v; });
            for (Index j = 0; j < d_; ++j) {
                const Vec o = head(j).forward(s);
                out(j, 0) = o(0);
                out(j, 1) = std::clamp(o(1), arch_.clamp_lo, arch_.clamp_hi);
            }
            return out;
        }
        std::vector<Index> targets(static_cast<std::size_t>(d_));
        std::iota(targets.begin(), targets.end(), Index{0});
        const VarEval ev = evaluate(x.replicate(1, d_), targets, mode);
        out.col(0) = ev.mu;
        out.col(1) = ev.log_var;
        return out;
    }

    Index num_params() const {
        Index n = 0;
        for (const auto& m : nets_) n += m.num_params();
        return n;
    }

    VarGrads zero_grads() const {
        VarGrads g;
        for (const auto& m : nets_) g.nets.push_back(m.zero_grads());
        return g;
    }

    Vec pack() const {
        Vec out(num_params());
        double* p = out.data();
        for (const auto& m : nets_) {
            m.pack(p);
            p += m.num_params();
        }
        return out;
    }

    void unpack(const Vec& flat) {
        require(flat.size() == num_params(), "VarConditionals::unpack: size mismatch");
        const double* p = flat.data();
        for (auto& m : nets_) {
            m.unpack(p);
            p += m.num_params();
        }
    }

    Vec pack_grads(const VarGrads& g) const {
        Vec out(num_params());
        double* p = out.data();
        for (std::size_t i = 0; i < nets_.size(); ++i) {
            Mlp::pack(g.nets[i], p);
            p += nets_[i].num_params();
        }
        return out;
    }

  private:
    VarArch arch_;
    Index d_ = 0;
    std::vector<Mlp> nets_;
    mutable long trunk_passes_ = 0;
};

inline VarConditionals var_init(Index d, VarArch arch, Rng& rng) { return VarConditionals(d, arch, rng); }

inline nlohmann::json to_json(const VarConditionals& vc) {
    nlohmann::json j;
    j["flavour"] = to_string(vc.flavour());
    j["d"] = vc.dim();
    j["hidden"] = vc.arch().hidden;
    j["clamp"] = {vc.arch().clamp_lo, vc.arch().clamp_hi};
    nlohmann::json nets = nlohmann::json::array();
    for (const auto& m : vc.nets()) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : m.layers()) {
            std::vector<double> w;
            for (Index r = 0; r < l.weight.rows(); ++r)
                for (Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
            layers.push_back({{"out", l.weight.rows()},
                              {"in", l.weight.cols()},
                              {"weight", w},
                              {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
        }
        nets.push_back(layers);
    }
    j["nets"] = nets;
    return j;
}

inline VarConditionals var_from_json(const nlohmann::json& j) {
    VarArch arch;
    arch.flavour = flavour_from_string(j.at("flavour").get<std::string>());
    arch.hidden = j.at("hidden").get<int>();
    arch.clamp_lo = j.at("clamp").at(0).get<double>();
    arch.clamp_hi = j.at("clamp").at(1).get<double>();
    std::vector<Mlp> nets;
    for (const auto& jn : j.at("nets")) {
        std::vector<Layer> layers;
        for (const auto& jl : jn) {
            const Index out = jl.at("out").get<Index>(), in = jl.at("in").get<Index>();
            const auto w = jl.at("weight").get<std::vector<double>>();
            const auto b = jl.at("bias").get<std::vector<double>>();
            if (static_cast<Index>(w.size()) != out * in || static_cast<Index>(b.size()) != out)
                throw InvalidArgument("VarConditionals JSON: layer array sizes do not match shape");
            Layer l{Mat(out, in), Eigen::Map<const Vec>(b.data(), out)};
            for (Index r = 0; r < out; ++r)
                for (Index c = 0; c < in; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
            layers.push_back(std::move(l));
        }
        nets.emplace_back(std::move(layers));
    }
    return VarConditionals(j.at("d").get<Index>(), arch, std::move(nets));
}

/**
 * Independent conditionals that reproduce the exact full conditionals of an
 * FA model. The conditional mean is linear in x_{-j}, and a leaky-ReLU layer
 * passes a linear signal through exactly via (lrelu(v) - lrelu(-v)) / 1.01.
 */
inline VarConditionals exact_var_conditionals(const FaParams& p) {
    const Index d = p.d(), n = d - 1;
    require(d >= 2, "exact_var_conditionals: need d >= 2");
    const Mat P = FaDensity(p).precision();
    const double s = 1.0 + Mlp::kNegativeSlope;
    Mat split(2 * n, n);
    split << Mat::Identity(n, n), -Mat::Identity(n, n);
    Mat merge(n, 2 * n);
    merge << Mat::Identity(n, n) / s, -Mat::Identity(n, n) / s;
    Mat relay(2 * n, 2 * n);
    relay << merge, -merge;
    std::vector<Mlp> nets;
    for (Index j = 0; j < d; ++j) {
        Vec c(n);
        double b0 = p.mu(j);
        for (Index i = 0, a = 0; i < d; ++i) {
            if (i == j) continue;
            c(a) = -P(j, i) / P(j, j);
            b0 -= c(a) * p.mu(i);
            ++a;
        }
        Layer out{Mat::Zero(2, 2 * n), Vec(2)};
        out.weight.row(0) = c.transpose() * merge;
        out.bias << b0, -std::log(P(j, j));
        nets.emplace_back(std::vector<Layer>{{split, Vec::Zero(2 * n)}, {relay, Vec::Zero(2 * n)}, std::move(out)});
    }
    VarArch arch;
    arch.hidden = static_cast<int>(2 * n);
    return VarConditionals(d, arch, std::move(nets));
}

/// Conditioning input for one chain row: under mean-field conditioning the
/// imputed coordinates are hidden (zeroed).
template <typename Row, typename MaskRow>
inline void conditioning_input(const Row& values, const MaskRow& observed, Conditioning cond, Eigen::Ref<Vec> out) {
    for (Index j = 0; j < out.size(); ++j) out(j) = (cond == Conditioning::Meanfield && !observed(j)) ? 0.0 : values(j);
}

struct VarParamsResult {
    double mu;
    double log_var;
    VarEval cache;
};

inline VarParamsResult var_params(const VarConditionals& vc, const Vec& x_filled, Index j, VarMode mode) {
    require(j >= 0 && j < vc.dim(), "var_params: target dimension out of range");
    require(x_filled.size() == vc.dim(), "var_params: input must have length d");
    const Index t[1] = {j};
    VarEval ev = vc.evaluate(Mat(x_filled), t, mode);
    const double mu = ev.mu(0), lv = ev.log_var(0);
    return {mu, lv, std::move(ev)};
}

struct VarSampleGrad {
    double sample;
    double log_q;
    VarGrads d_sample;  // pathwise d sample / d phi
    VarGrads d_log_q;   // total d log q(sample) / d phi with eps held fixed
};

inline VarSampleGrad var_sample_grad(const VarConditionals& vc, const Vec& x_filled, Index j, double eps) {
    const auto p = var_params(vc, x_filled, j, VarMode::Train);
    const ReparamSample s = uv_reparam_sample(p.mu, p.log_var, eps);
    VarSampleGrad out{s.value, uv_logpdf(s.value, p.mu, p.log_var), vc.zero_grads(), vc.zero_grads()};
    vc.backward(p.cache, Vec::Constant(1, s.d_mu), Vec::Constant(1, s.d_log_var), out.d_sample);
    vc.backward(p.cache, Vec::Zero(1), Vec::Constant(1, -0.5), out.d_log_q);
    return out;
}

struct VarWarmupOptions {
    int epochs = 10;
    Index batch_size = 200;
    double rel_tol = 1e-3;  // stop when the epoch objective changes by less (relative)
    Conditioning conditioning = Conditioning::Joint;
};

struct VarWarmupReport {
    std::vector<double> objective;  // epoch averages
    int epochs_run = 0;
    bool converged = false;
    std::vector<Index> skipped_dims;  // never observed
};

/// Warm-up objective and gradient for one mini-batch of rows.
inline double var_warmup_batch(const VarConditionals& vc, const ImputedDataset& imputed, std::span<const Index> rows, Conditioning cond,
                               VarGrads* grads) {
    const Index d = vc.dim(), K = imputed.num_chains();
    const auto& base = imputed.base();
    std::vector<double> n_obs(static_cast<std::size_t>(d), 0.0);
    Index nq = 0;
    for (Index i : rows)
        for (Index j = 0; j < d; ++j)
            if (base.observed(i, j)) {
                n_obs[static_cast<std::size_t>(j)] += 1.0;
                nq += K;
            }
    if (nq == 0) return 0.0;
    Mat X(d, nq);
    Vec y(nq);
    std::vector<Index> targets(static_cast<std::size_t>(nq));
    Index q = 0;
    Vec buf(d);
    for (Index i : rows)
        for (Index k = 0; k < K; ++k) {
            conditioning_input(imputed.chain(k).row(i), base.mask().row(i), cond, buf);
            for (Index j = 0; j < d; ++j)
                if (base.observed(i, j)) {
                    X.col(q) = buf;
                    y(q) = base.values()(i, j);
                    targets[static_cast<std::size_t>(q)] = j;
                    ++q;
                }
        }
    const VarEval ev = vc.evaluate(X, targets, VarMode::Warmup);
    double value = 0.0;
    Vec d_mu(nq), d_lv(nq);
    for (Index b = 0; b < nq; ++b) {
        const double w = 1.0 / (n_obs[static_cast<std::size_t>(targets[static_cast<std::size_t>(b)])] * static_cast<double>(K));
        const double r = y(b) - ev.mu(b);
        const double inv_var = std::exp(-ev.log_var(b));
        value += w * uv_logpdf(y(b), ev.mu(b), ev.log_var(b));
        d_mu(b) = w * r * inv_var;
        d_lv(b) = w * (-0.5 + 0.5 * r * r * inv_var);
    }
    if (grads) vc.backward(ev, d_mu, d_lv, *grads);
    return value;
}

/// Pre-trains the conditionals by regression onto observed coordinates, with
/// the other coordinates taken from the current imputations.
inline VarWarmupReport var_warmup(VarConditionals& vc, const ImputedDataset& imputed, const VarWarmupOptions& opts, Optimizer& opt, Rng& rng) {
    require(opts.batch_size >= 1, "var_warmup: batch size must be positive");
    require(opt.first_moment().size() == vc.num_params(), "var_warmup: optimizer does not match the variational model");
    VarWarmupReport rep;
    for (Index j = 0; j < imputed.cols(); ++j)
        if (!imputed.base().mask().col(j).any()) rep.skipped_dims.push_back(j);
    std::vector<Index> order(static_cast<std::size_t>(imputed.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    Vec phi = vc.pack();
    for (int e = 0; e < opts.epochs; ++e) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
        double total = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_size)) {
            const auto len = std::min(order.size() - start, static_cast<std::size_t>(opts.batch_size));
            VarGrads g = vc.zero_grads();
            total += var_warmup_batch(vc, imputed, std::span<const Index>(order.data() + start, len), opts.conditioning, &g);
            ++batches;
            opt.step(phi, vc.pack_grads(g));
            vc.unpack(phi);
        }
        const double avg = batches ? total / batches : 0.0;
        if (!std::isfinite(avg)) throw NumericError("var_warmup: non-finite objective in epoch " + std::to_string(e + 1));
        rep.objective.push_back(avg);
        rep.epochs_run = e + 1;
        if (rep.objective.size() >= 2) {
            const double prev = rep.objective[rep.objective.size() - 2];
            if (std::abs(avg - prev) <= opts.rel_tol * std::abs(prev)) {
                rep.converged = true;
                break;
            }
        }
    }
    return rep;
}

}  // namespace vgibbs
