#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "vgibbs/vgibbs.hpp"

namespace fs = std::filesystem;
using namespace vgibbs;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidArgument("cannot open '" + path + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::string to_csv(const IncompleteDataset& d) {
    std::ostringstream os;
    write_csv(os, d);
    return os.str();
}

std::string to_csv(const Table& t) {
    std::ostringstream os;
    write_table_csv(os, t);
    return os.str();
}

std::string to_csv(const Mask& m) {
    std::ostringstream os;
    write_mask_csv(os, m);
    return os.str();
}

/// Reads a data CSV; a sibling `<stem>.mask.csv`, when present, adds missingness.
IncompleteDataset read_input(const std::string& path) {
    const std::string text = slurp(path);
    std::istringstream is(text);
    IncompleteDataset data = read_csv(is);
    fs::path mask_path = fs::path(path);
    mask_path.replace_extension(".mask.csv");
    if (fs::exists(mask_path) && mask_path != fs::path(path)) {
        std::istringstream ms(slurp(mask_path.string()));
        const Mask m = read_mask_csv(ms);
        if (m.rows() != data.rows() || m.cols() != data.cols()) throw InvalidData("mask file shape does not match '" + path + "'");
        return IncompleteDataset(data.values(), m && data.mask());
    }
    return data;
}

struct Common {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--seed", c.seed, "Random seed");
    app->add_option("--out-dir", c.out_dir, "Output directory");
    app->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Variational Gibbs inference for factor analysis with missing data"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-toy", "Sample the toy dataset and its ground truth");
    add_common(gen, common);
    Index n_train = kToyTrainSize, n_test = kToyTestSize;
    gen->add_option("--n-train", n_train)->check(CLI::PositiveNumber);
    gen->add_option("--n-test", n_test)->check(CLI::PositiveNumber);

    auto* mask = app.add_subcommand("mask", "Apply an MCAR mask to a CSV");
    add_common(mask, common);
    std::string mask_input;
    double fraction = 0.5;
    mask->add_option("input", mask_input, "Data CSV")->required();
    mask->add_option("--fraction", fraction, "Missing probability per entry")->check(CLI::Range(0.0, 0.999999));
    bool write_mask = false;
    mask->add_flag("--write-mask", write_mask, "Also write the observation mask as masked.mask.csv");

    auto* impute = app.add_subcommand("impute", "Multiply impute a CSV");
    add_common(impute, common);
    std::string impute_method = "mice", impute_input;
    Index chains = 5;
    int sweeps = 10;
    impute->add_option("method", impute_method)->required()->check(CLI::IsMember({"mice", "empirical"}));
    impute->add_option("input", impute_input)->required();
    impute->add_option("--chains", chains)->check(CLI::PositiveNumber);
    impute->add_option("--sweeps", sweeps)->check(CLI::PositiveNumber);

    auto* fit = app.add_subcommand("fit", "Fit a factor analysis model");
    add_common(fit, common);
    std::string fit_method_name, fit_input, fit_config, fit_truth;
    Index latent = 2;
    fit->add_option("method", fit_method_name)->required()->check(CLI::IsMember({"em", "vgi", "mice", "empirical"}));
    fit->add_option("input", fit_input)->required();
    fit->add_option("--latent-dim", latent)->check(CLI::PositiveNumber);
    fit->add_option("--config", fit_config, "Hyperparameter file ([vgi], [em], [mice], [empirical] sections)");
    fit->add_option("--truth", fit_truth, "Reference parameters JSON for per-epoch KL traces");
    double val_frac = 0.1;
    fit->add_option("--val-frac", val_frac, "Held-out fraction for the vgi fine-tuned validation loss (0 disables)")->check(CLI::Range(0.0, 0.9));

    auto* eval = app.add_subcommand("eval", "Score fitted parameters");
    add_common(eval, common);
    std::string eval_params, eval_test, eval_truth;
    eval->add_option("params", eval_params)->required();
    eval->add_option("--test", eval_test, "Complete test CSV");
    eval->add_option("--truth", eval_truth, "Reference parameters JSON");

    auto* exp = app.add_subcommand("experiment", "Run an experiment config");
    add_common(exp, common);
    std::string exp_config;
    exp->add_option("config", exp_config)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        ArtifactWriter w(common.out_dir);
        std::vector<ManifestInput> inputs;
        if (*gen) {
            const ToyData toy = make_toy_dataset(n_train, n_test, common.seed);
            w.write("train.csv", to_csv(toy.train));
            w.write("test.csv", to_csv(toy.test));
            w.write("truth.json", to_json(toy.truth).dump(2) + "\n");
        } else if (*mask) {
            const IncompleteDataset data = read_input(mask_input);
            inputs.push_back({mask_input, slurp(mask_input)});
            const IncompleteDataset masked = cell_data(data, fraction, common.seed, "cli");
            w.write("masked.csv", to_csv(masked));
            if (write_mask) w.write("masked.mask.csv", to_csv(masked.mask()));
        } else if (*impute) {
            const IncompleteDataset data = read_input(impute_input);
            inputs.push_back({impute_input, slurp(impute_input)});
            Rng rng = Rng(common.seed).substream("impute");
            MiceConfig mc;
            mc.sweeps = sweeps;
            const ImputedDataset imp = impute_method == "mice" ? mice_impute(data, chains, mc, rng) : empirical_impute(data, chains, rng);
            for (Index k = 0; k < imp.num_chains(); ++k) w.write("imputed_" + std::to_string(k) + ".csv", to_csv(imp.chain(k)));
        } else if (*fit) {
            const IncompleteDataset data = read_input(fit_input);
            inputs.push_back({fit_input, slurp(fit_input)});
            MethodSettings settings;
            if (!fit_config.empty()) {
                const std::string text = slurp(fit_config);
                inputs.push_back({fit_config, text});
                settings = parse_experiment_config("fractions = [0]\nseeds = [0]\n" + text).settings;
            }
            std::optional<FaParams> truth;
            if (!fit_truth.empty()) {
                const std::string text = slurp(fit_truth);
                inputs.push_back({fit_truth, text});
                truth = fa_from_json(nlohmann::json::parse(text));
            }
            const bool validate = fit_method_name == "vgi" && val_frac > 0.0;
            std::optional<Split> split;
            if (validate) {
                split = split_standardize(data, val_frac, common.seed);
                if (split->val.rows() == 0) throw InvalidArgument("fit: --val-frac leaves no validation rows");
                if (truth) truth = split->standardizer.apply(*truth);
            }
            FitOutput out = fit_method(fit_method_name, validate ? split->train : data, latent, settings, common.seed, truth ? &*truth : nullptr);
            if (validate) {
                // back to the scale of the input file
                const FinetuneResult ft = vgi_finetune_eval(out.vgi->model, out.vgi->vc, out.standardizer.apply(split->val), settings.vgi, common.seed);
                const Standardizer& outer = split->standardizer;
                out.params = outer.unapply(out.params);
                out.standardizer.location = (outer.location.array() + outer.scale.array() * out.standardizer.location.array()).matrix();
                out.standardizer.scale = (outer.scale.array() * out.standardizer.scale.array()).matrix();
                nlohmann::json vj;
                vj["val_rows"] = split->val.rows();
                vj["loss"] = detail::json_number(ft.loss);
                vj["epoch_objective"] = ft.epoch_objective;
                w.write("validation.json", vj.dump(2) + "\n");
            }
            w.write("params.json", to_json(out.params).dump(2) + "\n");
            if (out.vgi) {
                w.write("trace.csv", trace_csv(out.trace));
                nlohmann::json vj = to_json(out.vgi->vc);
                vj["standardizer"] = {{"location", std::vector<double>(out.standardizer.location.data(), out.standardizer.location.data() + out.standardizer.location.size())},
                                      {"scale", std::vector<double>(out.standardizer.scale.data(), out.standardizer.scale.data() + out.standardizer.scale.size())}};
                w.write("conditionals.json", vj.dump(2) + "\n");
            }
            if (!out.em_trace.empty()) {
                std::ostringstream os;
                os << "iteration,observed_loglik\n";
                for (std::size_t i = 0; i < out.em_trace.size(); ++i) os << i << ',' << format_double(out.em_trace[i]) << '\n';
                w.write("trace.csv", os.str());
            }
        } else if (*eval) {
            const std::string ptext = slurp(eval_params);
            inputs.push_back({eval_params, ptext});
            const FaParams p = fa_from_json(nlohmann::json::parse(ptext));
            LoadedData data;
            if (!eval_test.empty()) {
                inputs.push_back({eval_test, slurp(eval_test)});
                const IncompleteDataset t = read_csv(eval_test);
                if (!t.mask().all()) throw InvalidData("eval: test table must be complete");
                data.test = t.values();
            }
            if (!eval_truth.empty()) {
                const std::string ttext = slurp(eval_truth);
                inputs.push_back({eval_truth, ttext});
                data.truth = fa_from_json(nlohmann::json::parse(ttext));
            }
            SeedMetrics m;
            score_fit(m, p, data);
            nlohmann::json j;
            j["kl_to_truth"] = detail::json_number(m.kl_to_truth);
            j["param_rmse"] = detail::json_number(m.param_rmse);
            j["test_loglik"] = detail::json_number(m.test_loglik);
            j["percent_bias"] = detail::json_number(m.percent_bias);
            w.write("eval.json", j.dump(2) + "\n");
            std::cout << j.dump(2) << "\n";
        } else if (*exp) {
            const std::string text = slurp(exp_config);
            inputs.push_back({exp_config, text});
            ExperimentConfig cfg = parse_experiment_config(text);
            if (exp->count("--seed")) cfg.seeds = {common.seed};
            if (exp->count("--threads")) cfg.threads = common.threads;
            common.threads = cfg.threads;
            const ExperimentOutcome out = run_experiment(cfg);
            write_experiment(w, cfg, out);
            std::size_t failed = 0;
            for (const auto& r : out.reports) failed += r.failures();
            if (failed) std::cerr << "vgibbs: " << failed << " cell(s) failed; see reports.csv\n";
            w.finish(command, inputs, cfg.seeds, cfg.threads);
            return 0;
        }
        w.finish(command, inputs, {common.seed}, common.threads);
    } catch (const NumericError& e) {
        std::cerr << "vgibbs: numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "vgibbs: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
