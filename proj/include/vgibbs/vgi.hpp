#pragma once

#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vgibbs/dataset.hpp"
#include "vgibbs/famodel.hpp"
#include "vgibbs/imputers.hpp"
#include "vgibbs/optim.hpp"
#include "vgibbs/varmodel.hpp"

namespace vgibbs {

struct VgiConfig {
    Index K = 5;
    int G = 3;
    int G_W = 0;  // 0: 3 x average missing dims per row
    int M = 1;
    double lr_theta = 3e-3;
    double lr_phi = 1e-3;
    int var_warmup_epochs = 10;
    double var_warmup_tol = 1e-3;
    int model_warmup_epochs = 5;
    int max_epochs = 200;
    int finetune_epochs = 5;
    Index batch_size = 200;
    std::uint64_t seed = 0;
    Conditioning conditioning = Conditioning::Joint;
    bool cosine = false;

    void validate() const {
        require(K >= 1, "VgiConfig: K must be >= 1");
        require(G >= 0, "VgiConfig: G must be >= 0");
        require(G_W >= 0, "VgiConfig: G_W must be >= 0");
        require(M >= 1, "VgiConfig: M must be >= 1");
        require(lr_theta > 0.0 && lr_phi > 0.0, "VgiConfig: learning rates must be positive");
        require(var_warmup_epochs >= 0 && model_warmup_epochs >= 0 && max_epochs >= 0 && finetune_epochs >= 0,
                "VgiConfig: epoch counts must be nonnegative");
        require(batch_size >= 1, "VgiConfig: batch size must be positive");
    }
};

/// Random numbers consumed by one objective evaluation. Fixing them gives a
/// deterministic function of (theta, phi), used for common-random-number checks.
struct ObjectiveNoise {
    std::vector<Index> dims;  // per (incomplete row, chain, m), row-major in that order
    std::vector<double> eps;
};

inline ObjectiveNoise draw_objective_noise(const ImputedDataset& imputed, std::span<const Index> rows, int M, Rng& rng) {
    ObjectiveNoise n;
    for (Index i : rows) {
        const auto mis = imputed.base().missing_dims(i);
        if (mis.empty()) continue;
        for (Index k = 0; k < imputed.num_chains(); ++k)
            for (int m = 0; m < M; ++m) {
                n.dims.push_back(mis[rng.uniform_index(mis.size())]);
                n.eps.push_back(rng.normal());
            }
    }
    return n;
}

struct ObjectiveResult {
    double value = 0.0;
    Vec theta_grad;  // FaParams::pack() layout
    VarGrads phi_grad;
};

/**
 * Monte-Carlo VGI objective averaged over the rows of a mini-batch.
 * Incomplete rows: (1/KM) sum over chains and sampled dims of
 * log p(completed) + H[q_j]. Complete rows: log p(x).
 */
inline ObjectiveResult vgi_objective(const FaParams& model, const VarConditionals& vc, const ImputedDataset& imputed, std::span<const Index> rows,
                                     const ObjectiveNoise& noise, Conditioning cond = Conditioning::Joint, bool want_theta = true,
                                     bool want_phi = true) {
    require(!rows.empty(), "vgi_objective: empty batch");
    require(vc.dim() == model.d() && imputed.cols() == model.d(), "vgi_objective: dimension mismatch");
    const Index d = model.d(), K = imputed.num_chains();
    const auto& base = imputed.base();
    const double inv_b = 1.0 / static_cast<double>(rows.size());
    const FaDensity dens(model);

    std::vector<Index> complete_rows, incomplete_rows;
    for (Index i : rows) (base.mask().row(i).all() ? complete_rows : incomplete_rows).push_back(i);
    const auto slots = incomplete_rows.size() * static_cast<std::size_t>(K);
    require(noise.dims.size() == noise.eps.size() && (slots == 0 ? noise.dims.empty() : noise.dims.size() % slots == 0 && !noise.dims.empty()),
            "vgi_objective: noise does not match the batch");
    const auto M = static_cast<Index>(slots == 0 ? 1 : noise.dims.size() / slots);

    ObjectiveResult res;
    FaDensity::Accumulator acc(d);

    // Complete rows.
    if (!complete_rows.empty()) {
        Mat R(d, static_cast<Index>(complete_rows.size()));
        for (Index c = 0; c < R.cols(); ++c) R.col(c) = base.values().row(complete_rows[static_cast<std::size_t>(c)]).transpose() - model.mu;
        const Mat A = dens.precision() * R;
        for (Index c = 0; c < R.cols(); ++c) res.value += inv_b * (dens.log_norm() - 0.5 * R.col(c).dot(A.col(c)));
        if (want_theta) acc.add_batch(A, Vec::Constant(R.cols(), inv_b));
    }

    // Incomplete rows.
    const auto Q = static_cast<Index>(noise.dims.size());
    if (Q > 0) {
        Mat X(d, Q), R(d, Q);
        Vec buf(d);
        Index q = 0;
        for (Index i : incomplete_rows)
            for (Index k = 0; k < K; ++k) {
                const auto row = imputed.chain(k).row(i);
                conditioning_input(row, base.mask().row(i), cond, buf);
                for (Index m = 0; m < M; ++m, ++q) {
                    X.col(q) = buf;
                    R.col(q) = row.transpose();
                }
            }
        const VarEval ev = vc.evaluate(X, noise.dims, VarMode::Train);
        Vec sd(Q);
        for (q = 0; q < Q; ++q) {
            const auto j = noise.dims[static_cast<std::size_t>(q)];
            sd(q) = std::exp(0.5 * ev.log_var(q));
            R(j, q) = ev.mu(q) + sd(q) * noise.eps[static_cast<std::size_t>(q)];
        }
        R.colwise() -= model.mu;
        const Mat A = dens.precision() * R;
        const double w = inv_b / static_cast<double>(K * M);
        Vec d_mu(Q), d_lv(Q);
        for (q = 0; q < Q; ++q) {
            const auto j = noise.dims[static_cast<std::size_t>(q)];
            res.value += w * (dens.log_norm() - 0.5 * R.col(q).dot(A.col(q)) + uv_entropy(ev.log_var(q)));
            const double dx = -A(j, q);
            d_mu(q) = w * dx;
            d_lv(q) = w * (dx * 0.5 * sd(q) * noise.eps[static_cast<std::size_t>(q)] + 0.5);
        }
        if (want_theta) acc.add_batch(A, Vec::Constant(Q, w));
        if (want_phi) {
            res.phi_grad = vc.zero_grads();
            vc.backward(ev, d_mu, d_lv, res.phi_grad);
        }
    }
    if (want_theta) res.theta_grad = acc.finish(dens).pack();
    if (want_phi && res.phi_grad.nets.empty()) res.phi_grad = vc.zero_grads();
    return res;
}

inline ObjectiveResult vgi_objective(const FaParams& model, const VarConditionals& vc, const ImputedDataset& imputed, std::span<const Index> rows, int M,
                                     Rng& rng, Conditioning cond = Conditioning::Joint) {
    return vgi_objective(model, vc, imputed, rows, draw_objective_noise(imputed, rows, M, rng), cond);
}

/// Per-dimension bounds on imputations.
struct Hypercube {
    Vec lo, hi;

    bool contains(Index j, double v) const { return v >= lo(j) && v <= hi(j); }

    static Hypercube of_observed(const IncompleteDataset& data) {
        Hypercube h{Vec::Constant(data.cols(), std::numeric_limits<double>::infinity()),
                    Vec::Constant(data.cols(), -std::numeric_limits<double>::infinity())};
        for (Index i = 0; i < data.rows(); ++i)
            for (Index j = 0; j < data.cols(); ++j)
                if (data.observed(i, j)) {
                    h.lo(j) = std::min(h.lo(j), data.values()(i, j));
                    h.hi(j) = std::max(h.hi(j), data.values()(i, j));
                }
        return h;
    }
};

struct GibbsStats {
    long proposals = 0;
    long rejections = 0;
};

/// Random-scan pseudo-Gibbs: G rounds, each redrawing one uniformly chosen
/// missing coordinate of every (row, chain). Proposals outside `box` are rejected.
inline GibbsStats pseudo_gibbs(const VarConditionals& vc, ImputedDataset& imputed, std::span<const Index> rows, int G, Rng& rng,
                               Conditioning cond = Conditioning::Joint, const Hypercube* box = nullptr) {
    require(G >= 0, "pseudo_gibbs: G must be >= 0");
    GibbsStats stats;
    const Index d = imputed.cols(), K = imputed.num_chains();
    const auto& base = imputed.base();
    struct Slot {
        Index row, chain;
        const std::vector<Index>* mis;
    };
    std::vector<std::vector<Index>> mis_sets;
    mis_sets.reserve(rows.size());
    for (Index i : rows) mis_sets.push_back(base.missing_dims(i));
    std::vector<Slot> slots;
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (!mis_sets[r].empty())
            for (Index k = 0; k < K; ++k) slots.push_back({rows[r], k, &mis_sets[r]});
    if (slots.empty() || G == 0) return stats;

    const auto S = static_cast<Index>(slots.size());
    Mat X(d, S);
    std::vector<Index> targets(slots.size());
    Vec eps(S), buf(d);
    for (int g = 0; g < G; ++g) {
        for (Index s = 0; s < S; ++s) {
            const auto& sl = slots[static_cast<std::size_t>(s)];
            targets[static_cast<std::size_t>(s)] = (*sl.mis)[rng.uniform_index(sl.mis->size())];
            eps(s) = rng.normal();
            conditioning_input(imputed.chain(sl.chain).row(sl.row), base.mask().row(sl.row), cond, buf);
            X.col(s) = buf;
        }
        const VarEval ev = vc.evaluate(X, targets, VarMode::Train);
        for (Index s = 0; s < S; ++s) {
            const auto& sl = slots[static_cast<std::size_t>(s)];
            const Index j = targets[static_cast<std::size_t>(s)];
            const double v = ev.mu(s) + std::exp(0.5 * ev.log_var(s)) * eps(s);
            ++stats.proposals;
            if (!std::isfinite(v) || (box && !box->contains(j, v))) {
                ++stats.rejections;
                continue;
            }
            imputed.chain(sl.chain)(sl.row, j) = v;
        }
    }
    return stats;
}

namespace detail {

inline std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, Rng& rng) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    std::vector<std::vector<Index>> out;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch_size))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + static_cast<std::size_t>(batch_size))));
    return out;
}

inline Index num_batches(Index n, Index batch_size) { return (n + batch_size - 1) / batch_size; }

}  // namespace detail

struct ModelWarmupReport {
    std::vector<double> objective;  // epoch averages, taken before each step
};

/// SGA on theta only; the imputations and phi stay fixed.
inline ModelWarmupReport model_warmup(FaParams& model, const VarConditionals& vc, const ImputedDataset& imputed, int epochs, Optimizer& opt,
                                      const VgiConfig& cfg, Rng& rng) {
    require(epochs >= 0, "model_warmup: epochs must be nonnegative");
    ModelWarmupReport rep;
    Vec theta = model.pack();
    for (int e = 0; e < epochs; ++e) {
        double total = 0.0;
        const auto batches = detail::shuffled_batches(imputed.rows(), cfg.batch_size, rng);
        for (const auto& b : batches) {
            const auto noise = draw_objective_noise(imputed, b, cfg.M, rng);
            const auto r = vgi_objective(model, vc, imputed, b, noise, cfg.conditioning, true, false);
            if (!std::isfinite(r.value)) throw NumericError("model_warmup: non-finite objective in epoch " + std::to_string(e + 1));
            total += r.value;
            opt.step(theta, r.theta_grad);
            model.unpack(theta);
        }
        rep.objective.push_back(total / static_cast<double>(batches.size()));
    }
    return rep;
}

struct EpochTrace {
    int epoch;
    double objective;
    std::optional<double> kl_to_truth;
    double wall_seconds;
};

struct VgiResult {
    FaParams model;
    VarConditionals vc;
    ImputedDataset imputed;
    VarWarmupReport var_warmup;
    ModelWarmupReport model_warmup;
    std::vector<EpochTrace> trace;
};

/**
 * Full training run: empirical initial imputations, variational warm-up,
 * model warm-up, then per mini-batch G Gibbs steps followed by one Adam step
 * on theta and one AMSGrad step on phi.
 */
inline VgiResult vgi_train(const IncompleteDataset& data, const FaParams& model_init, const VarConditionals& vc_init, const VgiConfig& cfg,
                           const FaParams* truth = nullptr) {
    cfg.validate();
    model_init.validate();
    require(data.cols() == model_init.d() && vc_init.dim() == model_init.d(), "vgi_train: dimension mismatch");
    require(data.rows() >= 1, "vgi_train: empty dataset");
    const auto t0 = std::chrono::steady_clock::now();
    const Rng root(cfg.seed);

    Rng f0_rng = root.substream("f0");
    VgiResult res{model_init, vc_init, empirical_impute(data, cfg.K, f0_rng), {}, {}, {}};

    const Index n_batches = detail::num_batches(data.rows(), cfg.batch_size);
    OptimizerConfig phi_cfg = optimizer_config(OptimizerMode::AMSGrad, cfg.lr_phi);
    OptimizerConfig theta_cfg = optimizer_config(OptimizerMode::Adam, cfg.lr_theta);

    {
        Rng rng = root.substream("var-warmup");
        Optimizer opt(phi_cfg, res.vc.num_params());
        VarWarmupOptions wo;
        wo.epochs = cfg.var_warmup_epochs;
        wo.batch_size = cfg.batch_size;
        wo.rel_tol = cfg.var_warmup_tol;
        wo.conditioning = cfg.conditioning;
        res.var_warmup = var_warmup(res.vc, res.imputed, wo, opt, rng);
    }
    {
        Rng rng = root.substream("model-warmup");
        Optimizer opt(theta_cfg, res.model.num_params());
        res.model_warmup = model_warmup(res.model, res.vc, res.imputed, cfg.model_warmup_epochs, opt, cfg, rng);
    }

    if (cfg.cosine) {
        phi_cfg.cosine_steps = static_cast<long>(cfg.max_epochs) * n_batches;
        theta_cfg.cosine_steps = phi_cfg.cosine_steps;
    }
    Optimizer theta_opt(theta_cfg, res.model.num_params());
    Optimizer phi_opt(phi_cfg, res.vc.num_params());
    Vec theta = res.model.pack();
    Vec phi = res.vc.pack();
    Rng rng = root.substream("train");
    for (int e = 1; e <= cfg.max_epochs; ++e) {
        double total = 0.0;
        const auto batches = detail::shuffled_batches(data.rows(), cfg.batch_size, rng);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& b = batches[bi];
            pseudo_gibbs(res.vc, res.imputed, b, cfg.G, rng, cfg.conditioning);
            const auto noise = draw_objective_noise(res.imputed, b, cfg.M, rng);
            const auto r = vgi_objective(res.model, res.vc, res.imputed, b, noise, cfg.conditioning);
            if (!std::isfinite(r.value) || !r.theta_grad.allFinite())
                throw NumericError("vgi_train: non-finite objective at epoch " + std::to_string(e) + ", batch " + std::to_string(bi));
            total += r.value;
            theta_opt.step(theta, r.theta_grad);
            phi_opt.step(phi, res.vc.pack_grads(r.phi_grad));
            res.model.unpack(theta);
            res.vc.unpack(phi);
        }
        if (!res.imputed.observed_intact()) throw NumericError("vgi_train: observed coordinates changed in epoch " + std::to_string(e));
        EpochTrace tr{e, total / static_cast<double>(batches.size()), std::nullopt,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (truth) tr.kl_to_truth = fa_model_kl(*truth, res.model);
        res.trace.push_back(tr);
    }
    return res;
}

inline int default_warmup_gibbs_steps(const IncompleteDataset& data) {
    if (data.rows() == 0) return 0;
    const double avg = static_cast<double>((!data.mask()).count()) / static_cast<double>(data.rows());
    return std::max(1, static_cast<int>(std::ceil(3.0 * avg)));
}

struct FinetuneResult {
    double objective = 0.0;  // final-epoch average objective
    double loss = 0.0;       // -objective
    std::vector<double> epoch_objective;
    ImputedDataset imputed;
    Hypercube box;
    GibbsStats warmup_gibbs;
    std::uint64_t theta_hash = 0;
};

/**
 * Held-out evaluation with a private copy of the conditionals. The first
 * epoch warms the chains up with G_W Gibbs steps confined to the observed
 * hypercube; later epochs use G unconstrained steps. Only the copy of phi
 * is trained; the model is read-only.
 */
inline FinetuneResult vgi_finetune_eval(const FaParams& model, VarConditionals vc, const IncompleteDataset& heldout, const VgiConfig& cfg,
                                        std::uint64_t seed) {
    cfg.validate();
    require(heldout.rows() >= 1, "vgi_finetune_eval: empty held-out set");
    require(heldout.cols() == model.d() && vc.dim() == model.d(), "vgi_finetune_eval: dimension mismatch");
    const Rng root(seed);
    FinetuneResult out;
    out.theta_hash = fa_hash(model);
    out.box = Hypercube::of_observed(heldout);
    Rng f0 = root.substream("finetune-f0");
    out.imputed = empirical_impute(heldout, cfg.K, f0);
    const int gw = cfg.G_W > 0 ? cfg.G_W : default_warmup_gibbs_steps(heldout);
    Optimizer opt(optimizer_config(OptimizerMode::AMSGrad, cfg.lr_phi), vc.num_params());
    Vec phi = vc.pack();
    Rng rng = root.substream("finetune");
    const int epochs = std::max(1, cfg.finetune_epochs);
    for (int e = 1; e <= epochs; ++e) {
        double total = 0.0;
        const auto batches = detail::shuffled_batches(heldout.rows(), cfg.batch_size, rng);
        for (const auto& b : batches) {
            if (e == 1) {
                const auto st = pseudo_gibbs(vc, out.imputed, b, gw, rng, cfg.conditioning, &out.box);
                out.warmup_gibbs.proposals += st.proposals;
                out.warmup_gibbs.rejections += st.rejections;
            } else {
                pseudo_gibbs(vc, out.imputed, b, cfg.G, rng, cfg.conditioning);
            }
            const auto noise = draw_objective_noise(out.imputed, b, cfg.M, rng);
            const auto r = vgi_objective(model, vc, out.imputed, b, noise, cfg.conditioning, false, true);
            total += r.value;
            const Vec g = vc.pack_grads(r.phi_grad);
            if (g.allFinite()) {
                opt.step(phi, g);
                vc.unpack(phi);
            }
        }
        out.epoch_objective.push_back(total / static_cast<double>(batches.size()));
    }
    out.objective = out.epoch_objective.back();
    out.loss = -out.objective;
    return out;
}

}  // namespace vgibbs
