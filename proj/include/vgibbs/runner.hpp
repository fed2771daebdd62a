#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "vgibbs/csv_io.hpp"
#include "vgibbs/emfit.hpp"
#include "vgibbs/imputers.hpp"
#include "vgibbs/metrics.hpp"
#include "vgibbs/vgi.hpp"

namespace vgibbs {

// ---------------------------------------------------------------------------
// Config document: `key = value` lines under optional `[section]` headers.
// Values are numbers, true/false, "strings" or single-line [arrays].

struct ConfigValue {
    enum class Kind { Number, Bool, String, Array } kind = Kind::Number;
    double number = 0.0;
    bool boolean = false;
    std::string text;
    std::vector<ConfigValue> items;
};

class ConfigDoc {
  public:
    static ConfigDoc parse(const std::string& text) {
        ConfigDoc doc;
        std::istringstream is(text);
        std::string raw;
        std::string section;
        long line_no = 0;
        while (std::getline(is, raw)) {
            ++line_no;
            const std::string line(trim(strip_comment(raw)));
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ParseError("config: malformed section header at line " + std::to_string(line_no), line_no);
                section = std::string(trim(std::string_view(line).substr(1, line.size() - 2)));
                if (section.empty()) throw ParseError("config: empty section name at line " + std::to_string(line_no), line_no);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError("config: expected key = value at line " + std::to_string(line_no), line_no);
            const std::string key(trim(std::string_view(line).substr(0, eq)));
            if (key.empty()) throw ParseError("config: missing key at line " + std::to_string(line_no), line_no);
            std::string_view rest = trim(std::string_view(line).substr(eq + 1));
            const std::string full = section.empty() ? key : section + "." + key;
            if (doc.values_.count(full)) throw ParseError("config: duplicate key '" + full + "'", line_no);
            std::size_t pos = 0;
            ConfigValue v = parse_value(rest, pos, line_no);
            if (!trim(rest.substr(pos)).empty()) throw ParseError("config: trailing characters at line " + std::to_string(line_no), line_no);
            doc.values_.emplace(full, std::move(v));
        }
        return doc;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    double number(const std::string& key, double fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        if (v->kind != ConfigValue::Kind::Number) throw InvalidArgument("config: '" + key + "' must be a number");
        return v->number;
    }

    long integer(const std::string& key, long fallback) const {
        const double x = number(key, static_cast<double>(fallback));
        if (x != std::floor(x)) throw InvalidArgument("config: '" + key + "' must be an integer");
        return static_cast<long>(x);
    }

    bool boolean(const std::string& key, bool fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        if (v->kind != ConfigValue::Kind::Bool) throw InvalidArgument("config: '" + key + "' must be true or false");
        return v->boolean;
    }

    std::string string(const std::string& key, const std::string& fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        if (v->kind != ConfigValue::Kind::String) throw InvalidArgument("config: '" + key + "' must be a quoted string");
        return v->text;
    }

    std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        std::vector<double> out;
        for (const auto& item : as_array(*v, key)) {
            if (item.kind != ConfigValue::Kind::Number) throw InvalidArgument("config: '" + key + "' must hold numbers");
            out.push_back(item.number);
        }
        return out;
    }

    std::vector<std::string> strings(const std::string& key, std::vector<std::string> fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        std::vector<std::string> out;
        for (const auto& item : as_array(*v, key)) {
            if (item.kind != ConfigValue::Kind::String) throw InvalidArgument("config: '" + key + "' must hold strings");
            out.push_back(item.text);
        }
        return out;
    }

    /// Keys present in the document that no getter asked for.
    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

  private:
    std::map<std::string, ConfigValue> values_;
    mutable std::set<std::string> used_;

    const ConfigValue* find(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return nullptr;
        used_.insert(key);
        return &it->second;
    }

    static const std::vector<ConfigValue>& as_array(const ConfigValue& v, const std::string& key) {
        if (v.kind != ConfigValue::Kind::Array) throw InvalidArgument("config: '" + key + "' must be an array");
        return v.items;
    }

    static std::string_view trim(std::string_view s) { return vgibbs::detail::trim(s); }

    static std::string strip_comment(const std::string& s) {
        bool quoted = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') quoted = !quoted;
            if (s[i] == '#' && !quoted) return s.substr(0, i);
        }
        return s;
    }

    static void skip_space(std::string_view s, std::size_t& pos) {
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    }

    static ConfigValue parse_value(std::string_view s, std::size_t& pos, long line_no) {
        skip_space(s, pos);
        if (pos >= s.size()) throw ParseError("config: missing value at line " + std::to_string(line_no), line_no);
        ConfigValue v;
        if (s[pos] == '"') {
            const auto end = s.find('"', pos + 1);
            if (end == std::string_view::npos) throw ParseError("config: unterminated string at line " + std::to_string(line_no), line_no);
            v.kind = ConfigValue::Kind::String;
            v.text = std::string(s.substr(pos + 1, end - pos - 1));
            pos = end + 1;
            return v;
        }
        if (s[pos] == '[') {
            v.kind = ConfigValue::Kind::Array;
            ++pos;
            skip_space(s, pos);
            if (pos < s.size() && s[pos] == ']') {
                ++pos;
                return v;
            }
            for (;;) {
                v.items.push_back(parse_value(s, pos, line_no));
                skip_space(s, pos);
                if (pos < s.size() && s[pos] == ',') {
                    ++pos;
                    continue;
                }
                if (pos < s.size() && s[pos] == ']') {
                    ++pos;
                    return v;
                }
                throw ParseError("config: malformed array at line " + std::to_string(line_no), line_no);
            }
        }
        std::size_t end = pos;
        while (end < s.size() && s[end] != ',' && s[end] != ']' && s[end] != ' ' && s[end] != '\t') ++end;
        const std::string_view tok = s.substr(pos, end - pos);
        pos = end;
        if (tok == "true" || tok == "false") {
            v.kind = ConfigValue::Kind::Bool;
            v.boolean = tok == "true";
            return v;
        }
        double x = 0.0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
            throw ParseError("config: cannot parse value '" + std::string(tok) + "' at line " + std::to_string(line_no), line_no);
        v.number = x;
        return v;
    }
};

// ---------------------------------------------------------------------------

enum class ExperimentKind { AccuracySweep, Consistency, MeanfieldBias, FlavourCompare };

inline std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::AccuracySweep: return "accuracy_sweep";
        case ExperimentKind::Consistency: return "consistency";
        case ExperimentKind::MeanfieldBias: return "meanfield_bias";
        case ExperimentKind::FlavourCompare: return "flavour_compare";
    }
    return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
    for (auto k : {ExperimentKind::AccuracySweep, ExperimentKind::Consistency, ExperimentKind::MeanfieldBias, ExperimentKind::FlavourCompare})
        if (to_string(k) == s) return k;
    throw InvalidArgument("unknown experiment kind '" + s + "'");
}

struct DataSpec {
    std::string source = "toy";  // "toy" or a CSV path
    std::string test_path;       // optional complete test table for CSV sources
    Index n_train = kToyTrainSize;
    Index n_test = kToyTestSize;
    std::uint64_t seed = 0;
    Index latent_dim = 2;
};

struct MethodSettings {
    VgiConfig vgi;
    VarArch arch;
    EmOptions em{500, 1e-6};
    MiceConfig mice;
    Index mice_chains = 5;
    Index empirical_chains = 5;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::AccuracySweep;
    DataSpec data;
    std::vector<double> fractions;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> methods{"em", "vgi", "mice", "empirical"};
    std::vector<Index> sizes;                 // consistency
    long consistency_steps = 0;               // 0: use vgi.max_epochs for every N
    int consistency_min_epochs = 20;
    std::vector<Flavour> flavours{Flavour::Independent, Flavour::SharedStandard, Flavour::SharedExtended};
    MethodSettings settings;
    int threads = 1;
    bool write_traces = true;

    void validate() const {
        require(!fractions.empty(), "experiment: fractions must be nonempty");
        require(!seeds.empty(), "experiment: seeds must be nonempty");
        for (double f : fractions) require(f >= 0.0 && f < 1.0, "experiment: fractions must lie in [0, 1)");
        require(threads >= 1, "experiment: threads must be >= 1");
        require(data.latent_dim >= 1, "experiment: latent_dim must be >= 1");
        static const std::set<std::string> known{"em", "vgi", "mice", "empirical"};
        for (const auto& m : methods) require(known.count(m) > 0, "experiment: unknown method '" + m + "'");
        if (kind == ExperimentKind::AccuracySweep) require(!methods.empty(), "experiment: methods must be nonempty");
        if (kind == ExperimentKind::Consistency) {
            require(sizes.size() >= 2, "consistency: need at least two sample sizes");
            for (std::size_t i = 1; i < sizes.size(); ++i) require(sizes[i] > sizes[i - 1], "consistency: sizes must increase");
            require(sizes.front() >= 1, "consistency: sizes must be positive");
            require(data.source == "toy", "consistency: requires the toy source");
        }
        if (kind == ExperimentKind::FlavourCompare) require(!flavours.empty(), "flavour_compare: flavours must be nonempty");
        settings.vgi.validate();
        settings.mice.validate();
        require(settings.mice_chains >= 1 && settings.empirical_chains >= 1, "experiment: chain counts must be >= 1");
    }
};

inline ExperimentConfig parse_experiment_config(const std::string& text) {
    const ConfigDoc doc = ConfigDoc::parse(text);
    ExperimentConfig c;
    c.kind = experiment_kind_from_string(doc.string("kind", "accuracy_sweep"));
    c.fractions = doc.numbers("fractions", {});
    for (double s : doc.numbers("seeds", {})) {
        require(s >= 0 && s == std::floor(s), "config: seeds must be nonnegative integers");
        c.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    c.methods = doc.strings("methods", c.methods);
    for (double n : doc.numbers("sizes", {})) {
        require(n >= 1 && n == std::floor(n), "config: sizes must be positive integers");
        c.sizes.push_back(static_cast<Index>(n));
    }
    if (doc.has("flavours")) {
        c.flavours.clear();
        for (const auto& f : doc.strings("flavours", {})) c.flavours.push_back(flavour_from_string(f));
    }
    c.threads = static_cast<int>(doc.integer("threads", c.threads));
    c.write_traces = doc.boolean("write_traces", c.write_traces);

    c.data.source = doc.string("data.source", c.data.source);
    c.data.test_path = doc.string("data.test_path", c.data.test_path);
    c.data.n_train = doc.integer("data.n_train", c.data.n_train);
    c.data.n_test = doc.integer("data.n_test", c.data.n_test);
    c.data.seed = static_cast<std::uint64_t>(doc.integer("data.seed", 0));
    c.data.latent_dim = doc.integer("data.latent_dim", c.data.latent_dim);

    auto& v = c.settings.vgi;
    v.K = doc.integer("vgi.chains", v.K);
    v.G = static_cast<int>(doc.integer("vgi.gibbs_steps", v.G));
    v.G_W = static_cast<int>(doc.integer("vgi.warmup_gibbs_steps", v.G_W));
    v.M = static_cast<int>(doc.integer("vgi.samples", v.M));
    v.lr_theta = doc.number("vgi.lr_theta", v.lr_theta);
    v.lr_phi = doc.number("vgi.lr_phi", v.lr_phi);
    v.var_warmup_epochs = static_cast<int>(doc.integer("vgi.var_warmup_epochs", v.var_warmup_epochs));
    v.var_warmup_tol = doc.number("vgi.var_warmup_tol", v.var_warmup_tol);
    v.model_warmup_epochs = static_cast<int>(doc.integer("vgi.model_warmup_epochs", v.model_warmup_epochs));
    v.max_epochs = static_cast<int>(doc.integer("vgi.epochs", v.max_epochs));
    v.finetune_epochs = static_cast<int>(doc.integer("vgi.finetune_epochs", v.finetune_epochs));
    v.batch_size = doc.integer("vgi.batch_size", v.batch_size);
    v.cosine = doc.boolean("vgi.cosine", v.cosine);
    const std::string cond = doc.string("vgi.conditioning", "joint");
    require(cond == "joint" || cond == "meanfield", "config: vgi.conditioning must be joint or meanfield");
    v.conditioning = cond == "joint" ? Conditioning::Joint : Conditioning::Meanfield;
    auto& a = c.settings.arch;
    a.flavour = flavour_from_string(doc.string("vgi.flavour", to_string(a.flavour)));
    a.hidden = doc.integer("vgi.hidden", a.hidden);
    c.consistency_steps = doc.integer("consistency.steps", c.consistency_steps);
    c.consistency_min_epochs = static_cast<int>(doc.integer("consistency.min_epochs", c.consistency_min_epochs));

    c.settings.em.max_iters = static_cast<int>(doc.integer("em.max_iters", c.settings.em.max_iters));
    c.settings.em.tol = doc.number("em.tol", c.settings.em.tol);
    c.settings.mice.sweeps = static_cast<int>(doc.integer("mice.sweeps", c.settings.mice.sweeps));
    c.settings.mice.prior_scale = doc.number("mice.prior_scale", c.settings.mice.prior_scale);
    c.settings.mice_chains = doc.integer("mice.chains", c.settings.mice_chains);
    c.settings.empirical_chains = doc.integer("empirical.chains", c.settings.empirical_chains);

    const auto unused = doc.unused();
    if (!unused.empty()) throw InvalidArgument("config: unknown key '" + unused.front() + "'");
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Fitting helpers. Every method runs in standardised coordinates and the
// result is mapped back to the data scale.

struct FitOutput {
    FaParams params;                // data scale
    Standardizer standardizer;
    std::vector<EpochTrace> trace;  // vgi only
    std::optional<VgiResult> vgi;   // vgi only, standardised coordinates
    std::vector<double> em_trace;   // em only
};

inline Rng method_rng(std::uint64_t seed, const std::string& name) { return Rng(seed).substream("method").substream(name); }

inline FitOutput fit_em_method(const IncompleteDataset& data, Index k, const EmOptions& opts, std::uint64_t seed) {
    FitOutput out;
    out.standardizer = Standardizer::fit(data);
    Rng rng = method_rng(seed, "em");
    const FaParams init = fa_init(data.cols(), k, rng);
    auto res = em_fit(out.standardizer.apply(data), init, opts);
    out.params = out.standardizer.unapply(res.params);
    out.em_trace = std::move(res.trace);
    return out;
}

inline FitOutput fit_vgi_method(const IncompleteDataset& data, Index k, VgiConfig cfg, const VarArch& arch, std::uint64_t seed,
                                const FaParams* truth = nullptr) {
    FitOutput out;
    out.standardizer = Standardizer::fit(data);
    Rng rng = method_rng(seed, "vgi");
    const FaParams init = fa_init(data.cols(), k, rng);
    Rng var_rng = rng.substream("var-init");
    const VarConditionals vc(data.cols(), arch, var_rng);
    cfg.seed = rng();
    std::optional<FaParams> truth_s;
    if (truth) truth_s = out.standardizer.apply(*truth);
    VgiResult res = vgi_train(out.standardizer.apply(data), init, vc, cfg, truth_s ? &*truth_s : nullptr);
    out.params = out.standardizer.unapply(res.model);
    out.trace = res.trace;
    out.vgi = std::move(res);
    return out;
}

inline FitOutput fit_imputer_method(const std::string& method, const IncompleteDataset& data, Index k, const MethodSettings& s, std::uint64_t seed) {
    FitOutput out;
    out.standardizer = Standardizer::fit(data);
    const IncompleteDataset z = out.standardizer.apply(data);
    Rng rng = method_rng(seed, method);
    const FaParams init = fa_init(data.cols(), k, rng);
    Rng imp_rng = rng.substream("impute");
    const ImputedDataset imputed = method == "mice" ? mice_impute(z, s.mice_chains, s.mice, imp_rng) : empirical_impute(z, s.empirical_chains, imp_rng);
    out.params = out.standardizer.unapply(stacked_em_fit(imputed, init, s.em));
    return out;
}

inline FitOutput fit_method(const std::string& method, const IncompleteDataset& data, Index k, const MethodSettings& s, std::uint64_t seed,
                            const FaParams* truth = nullptr) {
    if (method == "em") return fit_em_method(data, k, s.em, seed);
    if (method == "vgi") return fit_vgi_method(data, k, s.vgi, s.arch, seed, truth);
    if (method == "mice" || method == "empirical") return fit_imputer_method(method, data, k, s, seed);
    throw InvalidArgument("unknown method '" + method + "'");
}

// ---------------------------------------------------------------------------

/// Git blob hash: SHA-1 of "blob <size>\0" followed by the content.
inline std::string git_blob_sha1(const std::string& content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw NumericError("sha1: cannot allocate digest context");
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 && EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw NumericError("sha1: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string mask_hash(const Mask& m) {
    std::ostringstream os;
    write_mask_csv(os, m);
    return git_blob_sha1(os.str());
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, "loglog_slope: need at least two paired points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        require(x[i] > 0.0 && y[i] > 0.0, "loglog_slope: values must be positive");
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    require(sxx > 0.0, "loglog_slope: x values must not all be equal");
    return sxy / sxx;
}

/// Runs task(i) for i in [0, n) on `threads` workers. Results must be written
/// to per-index slots; completion order does not matter.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task) {
    const auto workers = static_cast<std::size_t>(std::max(1, threads));
    if (workers == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) task(i);
        });
    for (auto& t : pool) t.join();
}

struct LoadedData {
    IncompleteDataset train;
    std::optional<Table> test;
    std::optional<FaParams> truth;
};

inline LoadedData load_data(const DataSpec& spec, Index n_train_override = 0) {
    if (spec.source == "toy") {
        const Index n = n_train_override > 0 ? n_train_override : spec.n_train;
        ToyData toy = make_toy_dataset(n, spec.n_test, spec.seed);
        return {IncompleteDataset::complete(toy.train), toy.test, toy.truth};
    }
    LoadedData out{read_csv(spec.source), std::nullopt, std::nullopt};
    if (!spec.test_path.empty()) {
        const IncompleteDataset t = read_csv(spec.test_path);
        if (!t.mask().all()) throw InvalidData("test table must be complete");
        out.test = t.values();
    }
    return out;
}

/// Mask for one (seed, key) cell, shared by every method in that cell.
inline IncompleteDataset cell_data(const IncompleteDataset& base, double fraction, std::uint64_t seed, const std::string& key) {
    Rng rng = Rng(seed).substream("mask").substream(key);
    const MaskDraw draw = mcar_mask(base.rows(), base.cols(), fraction, rng);
    // Combined with any missingness already present in the source.
    const auto kept = static_cast<Index>(draw.rows.size());
    Table v(kept, base.cols());
    Mask m(kept, base.cols());
    for (Index r = 0; r < kept; ++r) {
        const Index i = draw.rows[static_cast<std::size_t>(r)];
        v.row(r) = base.values().row(i);
        m.row(r) = draw.mask.row(r) && base.mask().row(i);
    }
    return IncompleteDataset::dropping_empty_rows(v, m);
}

inline void score_fit(SeedMetrics& m, const FaParams& fit, const LoadedData& data) {
    if (data.truth) {
        m.kl_to_truth = fa_model_kl(*data.truth, fit);
        m.param_rmse = param_rmse(fit, *data.truth);
    }
    if (data.test) {
        m.test_loglik = complete_loglik(fit, *data.test);
        if (data.truth) m.percent_bias = percent_bias(m.test_loglik, complete_loglik(*data.truth, *data.test));
    }
}

inline std::string trace_csv(const std::vector<EpochTrace>& trace) {
    std::ostringstream os;
    os << "epoch,objective,kl_to_truth\n";
    for (const auto& t : trace) os << t.epoch << ',' << format_double(t.objective) << ',' << (t.kl_to_truth ? format_double(*t.kl_to_truth) : "") << '\n';
    return os.str();
}

struct ExperimentOutcome {
    std::vector<ExperimentReport> reports;
    nlohmann::json summary;
    std::map<std::string, std::string> files;  // extra deterministic artifacts, relative path -> content
};

struct Cell {
    std::string method;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::function<SeedMetrics(std::map<std::string, std::string>&)> run;
};

/// Runs cells on the pool; any exception becomes a failed row.
inline std::vector<ExperimentReport> run_cells(const std::vector<Cell>& cells, int threads, std::map<std::string, std::string>& files) {
    std::vector<SeedMetrics> results(cells.size());
    std::vector<std::map<std::string, std::string>> cell_files(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        SeedMetrics m;
        try {
            m = cells[i].run(cell_files[i]);
        } catch (const std::exception& e) {
            m = SeedMetrics{};
            m.ok = false;
            m.error = e.what();
            cell_files[i].clear();
        }
        m.seed = cells[i].seed;
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        results[i] = std::move(m);
    });
    std::vector<ExperimentReport> reports;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        auto it = std::find_if(reports.begin(), reports.end(),
                               [&](const ExperimentReport& r) { return r.method == cells[i].method && r.fraction == cells[i].fraction; });
        if (it == reports.end()) {
            reports.push_back(ExperimentReport{cells[i].method, cells[i].fraction, {}});
            it = std::prev(reports.end());
        }
        it->runs.push_back(results[i]);
        for (auto& [k, v] : cell_files[i]) files[k] = std::move(v);
    }
    return reports;
}

inline std::string cell_tag(const std::string& method, double fraction, std::uint64_t seed) {
    return method + "_f" + format_double(fraction) + "_s" + std::to_string(seed);
}

inline ExperimentOutcome run_accuracy_sweep(const ExperimentConfig& cfg) {
    cfg.validate();
    const LoadedData data = load_data(cfg.data);
    ExperimentOutcome out;
    std::vector<Cell> cells;
    nlohmann::json masks = nlohmann::json::object();
    for (double frac : cfg.fractions)
        for (std::uint64_t seed : cfg.seeds) {
            masks[format_double(frac) + "/" + std::to_string(seed)] = mask_hash(cell_data(data.train, frac, seed, format_double(frac)).mask());
            for (const auto& method : cfg.methods)
                cells.push_back({method, frac, seed, [&cfg, &data, method, frac, seed](std::map<std::string, std::string>& files) {
                                     const IncompleteDataset train = cell_data(data.train, frac, seed, format_double(frac));
                                     const FitOutput fit = fit_method(method, train, cfg.data.latent_dim, cfg.settings, seed,
                                                                      data.truth ? &*data.truth : nullptr);
                                     SeedMetrics m;
                                     score_fit(m, fit.params, data);
                                     if (cfg.write_traces && !fit.trace.empty()) files["traces/" + cell_tag(method, frac, seed) + ".csv"] = trace_csv(fit.trace);
                                     return m;
                                 }});
        }
    out.reports = run_cells(cells, cfg.threads, out.files);
    out.summary["masks"] = masks;
    return out;
}

struct ConsistencyRow {
    Index n = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    double param_rmse = kNaN;
    double kl_to_truth = kNaN;
    int epochs = 0;
    std::string error;
};

struct ConsistencyResult {
    std::vector<ConsistencyRow> rows;
    std::vector<double> mean_rmse;  // per size
    double slope = kNaN;
    ExperimentOutcome outcome;
};

inline int consistency_epochs(const ExperimentConfig& cfg, Index n) {
    if (cfg.consistency_steps <= 0) return cfg.settings.vgi.max_epochs;
    const Index nb = detail::num_batches(n, cfg.settings.vgi.batch_size);
    const long e = (cfg.consistency_steps + nb - 1) / nb;
    return static_cast<int>(std::max<long>(cfg.consistency_min_epochs, e));
}

/// Warm-ups keep the same share of the step budget as in the base config,
/// so every N sees about the same number of warm-up updates.
inline VgiConfig consistency_vgi_config(const ExperimentConfig& cfg, Index n) {
    VgiConfig v = cfg.settings.vgi;
    v.cosine = true;
    v.max_epochs = consistency_epochs(cfg, n);
    if (cfg.consistency_steps > 0) {
        const double ratio = static_cast<double>(v.max_epochs) / static_cast<double>(cfg.settings.vgi.max_epochs);
        v.var_warmup_epochs = static_cast<int>(std::ceil(cfg.settings.vgi.var_warmup_epochs * ratio));
        v.model_warmup_epochs = static_cast<int>(std::ceil(cfg.settings.vgi.model_warmup_epochs * ratio));
    }
    return v;
}

inline ConsistencyResult run_consistency(const ExperimentConfig& cfg) {
    cfg.validate();
    require(cfg.fractions.size() == 1, "consistency: expects exactly one missingness fraction");
    const double frac = cfg.fractions.front();
    const LoadedData full = load_data(cfg.data, cfg.sizes.back());
    ConsistencyResult res;
    std::vector<Cell> cells;
    for (Index n : cfg.sizes)
        for (std::uint64_t seed : cfg.seeds) {
            const std::string method = "vgi-n" + std::to_string(n);
            cells.push_back({method, frac, seed, [&cfg, &full, n, frac, seed, method](std::map<std::string, std::string>& files) {
                                 std::vector<Index> rows(static_cast<std::size_t>(n));
                                 std::iota(rows.begin(), rows.end(), Index{0});
                                 const IncompleteDataset base = full.train.subset(rows);
                                 const IncompleteDataset train = cell_data(base, frac, seed, "n" + std::to_string(n));
                                 const VgiConfig v = consistency_vgi_config(cfg, n);
                                 const FitOutput fit = fit_vgi_method(train, cfg.data.latent_dim, v, cfg.settings.arch, seed, &*full.truth);
                                 SeedMetrics m;
                                 score_fit(m, fit.params, full);
                                 m.extras["epochs"] = v.max_epochs;
                                 m.extras["n"] = static_cast<double>(n);
                                 if (cfg.write_traces) files["traces/" + cell_tag(method, frac, seed) + ".csv"] = trace_csv(fit.trace);
                                 return m;
                             }});
        }
    res.outcome.reports = run_cells(cells, cfg.threads, res.outcome.files);
    std::vector<double> xs, ys;
    for (std::size_t s = 0; s < cfg.sizes.size(); ++s) {
        const auto& rep = res.outcome.reports[s];
        for (const auto& run : rep.runs)
            res.rows.push_back({cfg.sizes[s], run.seed, run.ok, run.param_rmse, run.kl_to_truth, consistency_epochs(cfg, cfg.sizes[s]), run.error});
        const MeanSe a = rep.aggregate("param_rmse");
        res.mean_rmse.push_back(a.mean);
        if (a.n > 0) {
            xs.push_back(static_cast<double>(cfg.sizes[s]));
            ys.push_back(a.mean);
        }
    }
    if (xs.size() >= 2) res.slope = loglog_slope(xs, ys);
    std::ostringstream os;
    os << "n,seed,status,epochs,param_rmse,kl_to_truth\n";
    for (const auto& r : res.rows)
        os << r.n << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ',' << r.epochs << ',' << detail::csv_number(r.param_rmse) << ','
           << detail::csv_number(r.kl_to_truth) << '\n';
    res.outcome.files["consistency.csv"] = os.str();
    res.outcome.summary["slope"] = detail::json_number(res.slope);
    res.outcome.summary["sizes"] = cfg.sizes;
    nlohmann::json mr = nlohmann::json::array();
    for (double v : res.mean_rmse) mr.push_back(detail::json_number(v));
    res.outcome.summary["mean_param_rmse"] = mr;
    return res;
}

struct MeanfieldRow {
    double fraction = 0.0;
    double truth_loglik = kNaN;
    double joint_bias = kNaN;      // percent bias of the across-seed mean log-likelihood
    double meanfield_bias = kNaN;
};

struct MeanfieldResult {
    std::vector<MeanfieldRow> rows;
    ExperimentOutcome outcome;
};

inline MeanfieldResult run_meanfield_bias(const ExperimentConfig& cfg) {
    cfg.validate();
    const LoadedData data = load_data(cfg.data);
    require(data.test.has_value() && data.truth.has_value(), "meanfield_bias: needs a test table and a reference model");
    MeanfieldResult res;
    std::vector<Cell> cells;
    for (double frac : cfg.fractions)
        for (std::uint64_t seed : cfg.seeds)
            for (Conditioning cond : {Conditioning::Joint, Conditioning::Meanfield}) {
                const std::string method = cond == Conditioning::Joint ? "vgi-joint" : "vgi-meanfield";
                cells.push_back({method, frac, seed, [&cfg, &data, cond, frac, seed, method](std::map<std::string, std::string>& files) {
                                     const IncompleteDataset train = cell_data(data.train, frac, seed, format_double(frac));
                                     VgiConfig v = cfg.settings.vgi;
                                     v.conditioning = cond;
                                     const FitOutput fit = fit_vgi_method(train, cfg.data.latent_dim, v, cfg.settings.arch, seed, &*data.truth);
                                     SeedMetrics m;
                                     score_fit(m, fit.params, data);
                                     if (cfg.write_traces) files["traces/" + cell_tag(method, frac, seed) + ".csv"] = trace_csv(fit.trace);
                                     return m;
                                 }});
            }
    res.outcome.reports = run_cells(cells, cfg.threads, res.outcome.files);
    const double truth_ll = complete_loglik(*data.truth, *data.test);
    nlohmann::json rows = nlohmann::json::array();
    for (double frac : cfg.fractions) {
        MeanfieldRow row{frac, truth_ll, kNaN, kNaN};
        for (const auto& rep : res.outcome.reports) {
            if (rep.fraction != frac) continue;
            const MeanSe ll = rep.aggregate("test_loglik");
            const double bias = ll.n > 0 ? percent_bias(ll.mean, truth_ll) : kNaN;
            (rep.method == "vgi-joint" ? row.joint_bias : row.meanfield_bias) = bias;
        }
        res.rows.push_back(row);
        rows.push_back({{"fraction", frac}, {"truth_loglik", truth_ll}, {"joint_bias", detail::json_number(row.joint_bias)},
                        {"meanfield_bias", detail::json_number(row.meanfield_bias)}});
    }
    res.outcome.summary["bias_of_mean"] = rows;
    return res;
}

inline ExperimentOutcome run_flavour_compare(const ExperimentConfig& cfg) {
    cfg.validate();
    const LoadedData data = load_data(cfg.data);
    require(data.test.has_value() && data.truth.has_value(), "flavour_compare: needs a test table and a reference model");
    ExperimentOutcome out;
    std::vector<Cell> cells;
    nlohmann::json masks = nlohmann::json::object();
    for (double frac : cfg.fractions)
        for (std::uint64_t seed : cfg.seeds) {
            masks[format_double(frac) + "/" + std::to_string(seed)] = mask_hash(cell_data(data.train, frac, seed, format_double(frac)).mask());
            for (Flavour fl : cfg.flavours) {
                const std::string method = "vgi-" + to_string(fl);
                cells.push_back({method, frac, seed, [&cfg, &data, fl, frac, seed, method](std::map<std::string, std::string>& files) {
                                     const IncompleteDataset train = cell_data(data.train, frac, seed, format_double(frac));
                                     VarArch arch = cfg.settings.arch;
                                     arch.flavour = fl;
                                     const FitOutput fit = fit_vgi_method(train, cfg.data.latent_dim, cfg.settings.vgi, arch, seed, &*data.truth);
                                     SeedMetrics m;
                                     score_fit(m, fit.params, data);
                                     const Table test_s = fit.standardizer.apply(*data.test);
                                     const KlProfile to_model = conditional_kl_profile(fit.vgi->vc, fit.vgi->model, test_s);
                                     const KlProfile to_truth = conditional_kl_profile(fit.vgi->vc, fit.standardizer.apply(*data.truth), test_s);
                                     m.extras["cond_kl_median_model"] = to_model.median;
                                     m.extras["cond_kl_median_truth"] = to_truth.median;
                                     m.extras["cond_kl_q1_model"] = to_model.q1;
                                     m.extras["cond_kl_q3_model"] = to_model.q3;
                                     const auto& tr = fit.trace;
                                     if (tr.size() >= 2)
                                         m.timings["epoch_seconds"] = (tr.back().wall_seconds - tr.front().wall_seconds) / static_cast<double>(tr.size() - 1);
                                     if (cfg.write_traces) files["traces/" + cell_tag(method, frac, seed) + ".csv"] = trace_csv(fit.trace);
                                     return m;
                                 }});
            }
        }
    out.reports = run_cells(cells, cfg.threads, out.files);
    out.summary["masks"] = masks;
    return out;
}

inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    switch (cfg.kind) {
        case ExperimentKind::AccuracySweep: return run_accuracy_sweep(cfg);
        case ExperimentKind::Consistency: return run_consistency(cfg).outcome;
        case ExperimentKind::MeanfieldBias: return run_meanfield_bias(cfg).outcome;
        case ExperimentKind::FlavourCompare: return run_flavour_compare(cfg);
    }
    throw InvalidArgument("unknown experiment kind");
}

// ---------------------------------------------------------------------------
// Artifact writing.

struct ManifestInput {
    std::string name;
    std::string content;
};

class ArtifactWriter {
  public:
    explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    /// Hashed into the manifest.
    void write(const std::string& rel, const std::string& content) {
        put(rel, content);
        hashed_.emplace(rel, git_blob_sha1(content));
    }

    /// Listed in the manifest without a hash (wall-clock data).
    void write_unhashed(const std::string& rel, const std::string& content) {
        put(rel, content);
        unhashed_.insert(rel);
    }

    void finish(const std::string& command, const std::vector<ManifestInput>& inputs, const std::vector<std::uint64_t>& seeds, int threads) {
        nlohmann::json m;
        m["command"] = command;
        m["threads"] = threads;
        m["seeds"] = seeds;
        m["inputs"] = nlohmann::json::array();
        for (const auto& in : inputs) m["inputs"].push_back({{"name", in.name}, {"sha1", git_blob_sha1(in.content)}});
        m["outputs"] = nlohmann::json::array();
        for (const auto& [rel, h] : hashed_) m["outputs"].push_back({{"path", rel}, {"sha1", h}});
        for (const auto& rel : unhashed_) m["outputs"].push_back({{"path", rel}, {"sha1", nullptr}});
        put("manifest.json", m.dump(2) + "\n");
    }

    const std::filesystem::path& dir() const { return dir_; }

  private:
    std::filesystem::path dir_;
    std::map<std::string, std::string> hashed_;
    std::set<std::string> unhashed_;

    void put(const std::string& rel, const std::string& content) {
        const auto path = dir_ / rel;
        std::filesystem::create_directories(path.parent_path());
        std::ofstream os(path, std::ios::binary);
        if (!os) throw InvalidArgument("cannot write '" + path.string() + "'");
        os << content;
        if (!os) throw InvalidArgument("failed writing '" + path.string() + "'");
    }
};

inline void write_experiment(ArtifactWriter& w, const ExperimentConfig& cfg, const ExperimentOutcome& out) {
    std::ostringstream csv;
    write_reports_csv(csv, out.reports);
    w.write("reports.csv", csv.str());
    nlohmann::json j;
    j["kind"] = to_string(cfg.kind);
    j["reports"] = nlohmann::json::array();
    for (const auto& r : out.reports) j["reports"].push_back(to_json(r));
    j["summary"] = out.summary.is_null() ? nlohmann::json::object() : out.summary;
    w.write("reports.json", j.dump(2) + "\n");
    for (const auto& [rel, content] : out.files) w.write(rel, content);
    std::ostringstream timing;
    write_timing_csv(timing, out.reports);
    w.write_unhashed("timing.csv", timing.str());
}

}  // namespace vgibbs
