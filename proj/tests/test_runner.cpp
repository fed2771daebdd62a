#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace vgibbs;
using namespace vgibbs::testing;

namespace {

ExperimentConfig tiny_config(ExperimentKind kind) {
    ExperimentConfig c;
    c.kind = kind;
    c.data.n_train = 300;
    c.data.n_test = 400;
    c.fractions = {0.2};
    c.seeds = {0, 1};
    c.methods = {"em", "empirical"};
    c.write_traces = true;
    auto& v = c.settings.vgi;
    v.max_epochs = 2;
    v.var_warmup_epochs = 1;
    v.model_warmup_epochs = 1;
    v.batch_size = 100;
    v.K = 2;
    c.settings.arch.hidden = 16;
    c.settings.em = {200, 1e-6};
    c.settings.mice.sweeps = 2;
    c.settings.mice_chains = 2;
    c.settings.empirical_chains = 2;
    return c;
}

std::string reports_csv(const ExperimentOutcome& out) {
    std::ostringstream os;
    write_reports_csv(os, out.reports);
    return os.str();
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("vgibbs_test_" + name);
    std::filesystem::remove_all(d);
    return d;
}

}  // namespace

TEST(LoglogSlope, ExactPowerLaw) {
    std::vector<double> x{400, 1600, 6400, 25600}, y;
    for (double n : x) y.push_back(3.7 / std::sqrt(n));
    EXPECT_NEAR(loglog_slope(x, y), -0.5, 1e-12);
    EXPECT_THROW(loglog_slope({1.0}, {1.0}), InvalidArgument);
    EXPECT_THROW(loglog_slope({2.0, 2.0}, {1.0, 3.0}), InvalidArgument);
    EXPECT_THROW(loglog_slope({1.0, 2.0}, {0.0, 3.0}), InvalidArgument);
}

TEST(GitBlobSha1, KnownHashes) {
    EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(ParallelFor, VisitsEachIndexOnce) {
    for (int threads : {1, 2, 5}) {
        std::vector<int> hits(37, 0);
        parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i] += 1; });
        for (int h : hits) EXPECT_EQ(h, 1);
    }
}

TEST(ConfigParse, FullDocument) {
    const ExperimentConfig c = parse_experiment_config(R"(kind = "flavour_compare"
fractions = [0.1, 0.5]   # comment
seeds = [0, 1, 2]
flavours = ["independent", "shared_extended"]
threads = 2

[data]
n_train = 800

[vgi]
epochs = 7
conditioning = "meanfield"
hidden = 32
)");
    EXPECT_EQ(c.kind, ExperimentKind::FlavourCompare);
    EXPECT_EQ(c.fractions, (std::vector<double>{0.1, 0.5}));
    EXPECT_EQ(c.seeds.size(), 3u);
    ASSERT_EQ(c.flavours.size(), 2u);
    EXPECT_EQ(c.flavours[1], Flavour::SharedExtended);
    EXPECT_EQ(c.threads, 2);
    EXPECT_EQ(c.data.n_train, 800);
    EXPECT_EQ(c.settings.vgi.max_epochs, 7);
    EXPECT_EQ(c.settings.vgi.conditioning, Conditioning::Meanfield);
    EXPECT_EQ(c.settings.arch.hidden, 32);
}

TEST(ConfigParse, RejectsBadDocuments) {
    const std::string base = "fractions = [0.5]\nseeds = [0]\n";
    EXPECT_THROW(parse_experiment_config(base + "bogus = 1\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "[vgi]\nlr = 1\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config("fractions = [1.0]\nseeds = [0]\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config("fractions = [0.5]\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "kind = \"nope\"\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "methods = [\"em\", \"magic\"]\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "threads = 1.5\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "threads = \"two\"\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config(base + "[vgi]\nconditioning = \"partial\"\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config("kind = \"consistency\"\n" + base + "sizes = [400]\n"), InvalidArgument);
    EXPECT_THROW(parse_experiment_config("kind = \"consistency\"\n" + base + "sizes = [400, 100]\n"), InvalidArgument);
}

TEST(ConfigParse, SyntaxErrorsCarryLine) {
    const auto line_of = [](const std::string& text) -> long {
        try {
            parse_experiment_config(text);
        } catch (const ParseError& e) {
            return e.row();
        }
        return -1;
    };
    EXPECT_EQ(line_of("seeds = [0]\nfractions = [0.5\n"), 2);
    EXPECT_EQ(line_of("[data\n"), 1);
    EXPECT_EQ(line_of("a = \"open\n"), 1);
    EXPECT_EQ(line_of("seeds = [0]\nseeds = [1]\n"), 2);
    EXPECT_EQ(line_of("\n\njust words\n"), 3);
}

TEST(CellData, SharedMaskAndPristineFractionZero) {
    const LoadedData data = load_data(tiny_config(ExperimentKind::AccuracySweep).data);
    const IncompleteDataset a = cell_data(data.train, 0.4, 3, "0.4");
    const IncompleteDataset b = cell_data(data.train, 0.4, 3, "0.4");
    EXPECT_EQ(mask_hash(a.mask()), mask_hash(b.mask()));
    EXPECT_NE(mask_hash(a.mask()), mask_hash(cell_data(data.train, 0.4, 4, "0.4").mask()));
    const IncompleteDataset z = cell_data(data.train, 0.0, 3, "0");
    EXPECT_TRUE(z.mask().all());
    EXPECT_EQ(z.values(), data.train.values());
}

TEST(RunCells, FailureIsIsolated) {
    std::vector<Cell> cells;
    for (std::uint64_t s = 0; s < 3; ++s)
        cells.push_back({"m", 0.5, s, [s](std::map<std::string, std::string>& files) {
                             files["f" + std::to_string(s)] = "x";
                             if (s == 1) throw NumericError("diverged");
                             SeedMetrics m;
                             m.kl_to_truth = static_cast<double>(s);
                             return m;
                         }});
    std::map<std::string, std::string> files;
    const auto reports = run_cells(cells, 2, files);
    ASSERT_EQ(reports.size(), 1u);
    ASSERT_EQ(reports[0].runs.size(), 3u);
    EXPECT_TRUE(reports[0].runs[0].ok);
    EXPECT_FALSE(reports[0].runs[1].ok);
    EXPECT_EQ(reports[0].runs[1].error, "diverged");
    EXPECT_TRUE(reports[0].runs[2].ok);
    EXPECT_EQ(reports[0].aggregate("kl_to_truth").mean, 1.0);
    EXPECT_EQ(files.count("f1"), 0u);
    EXPECT_EQ(files.count("f2"), 1u);
}

TEST(AccuracySweep, RowCountsAndMaskSummary) {
    ExperimentConfig c = tiny_config(ExperimentKind::AccuracySweep);
    c.fractions = {0.2, 0.4};
    c.methods = {"em", "vgi", "mice", "empirical"};
    const ExperimentOutcome out = run_experiment(c);
    ASSERT_EQ(out.reports.size(), 8u);
    for (const auto& r : out.reports) {
        ASSERT_EQ(r.runs.size(), 2u);
        for (const auto& run : r.runs) {
            EXPECT_TRUE(run.ok) << r.method << ": " << run.error;
            EXPECT_GE(run.kl_to_truth, 0.0);
            EXPECT_GE(run.percent_bias, 0.0);
        }
    }
    EXPECT_EQ(out.summary["masks"].size(), 4u);
    EXPECT_EQ(out.files.count("traces/vgi_f0.2_s1.csv"), 1u);
    const LoadedData data = load_data(c.data);
    EXPECT_EQ(out.summary["masks"]["0.4/1"], mask_hash(cell_data(data.train, 0.4, 1, "0.4").mask()));
}

TEST(AccuracySweep, DeterministicAcrossRunsAndThreads) {
    ExperimentConfig c = tiny_config(ExperimentKind::AccuracySweep);
    c.methods = {"em", "vgi", "mice"};
    const std::string a = reports_csv(run_experiment(c));
    const std::string b = reports_csv(run_experiment(c));
    EXPECT_EQ(a, b);
    c.threads = 2;
    EXPECT_EQ(reports_csv(run_experiment(c)), a);
}

TEST(AccuracySweep, FractionZeroMatchesCompleteDataEm) {
    ExperimentConfig c = tiny_config(ExperimentKind::AccuracySweep);
    c.fractions = {0.0};
    c.seeds = {5};
    c.methods = {"em"};
    const ExperimentOutcome out = run_experiment(c);
    const LoadedData data = load_data(c.data);
    const FitOutput direct = fit_em_method(data.train, 2, c.settings.em, 5);
    EXPECT_EQ(out.reports[0].runs[0].kl_to_truth, fa_model_kl(*data.truth, direct.params));
}

TEST(AccuracySweepProperty, EmKlGrowsWithMissingness) {
    ExperimentConfig c = tiny_config(ExperimentKind::AccuracySweep);
    c.data.n_train = 6400;
    c.fractions = {1.0 / 6.0, 1.0 / 3.0, 0.5};
    c.seeds = {0, 1, 2};
    c.methods = {"em"};
    c.settings.em = {500, 1e-8};
    const ExperimentOutcome out = run_experiment(c);
    ASSERT_EQ(out.reports.size(), 3u);
    for (std::size_t i = 1; i < 3; ++i)
        EXPECT_LE(out.reports[i - 1].aggregate("kl_to_truth").mean, out.reports[i].aggregate("kl_to_truth").mean);
}

TEST(Consistency, RowsPerSizeAndSeed) {
    ExperimentConfig c = tiny_config(ExperimentKind::Consistency);
    c.sizes = {100, 200, 400};
    c.consistency_steps = 6;
    c.consistency_min_epochs = 1;
    const ConsistencyResult r = run_consistency(c);
    EXPECT_EQ(r.rows.size(), 6u);
    EXPECT_EQ(r.mean_rmse.size(), 3u);
    EXPECT_TRUE(std::isfinite(r.slope));
    EXPECT_EQ(r.rows[0].epochs, 6);  // one batch per epoch at n = 100
    EXPECT_EQ(r.rows[4].epochs, 2);
    EXPECT_EQ(r.outcome.files.count("consistency.csv"), 1u);
    std::vector<double> xs{100, 200, 400};
    EXPECT_EQ(r.slope, loglog_slope(xs, r.mean_rmse));
}

TEST(MeanfieldBias, RowsAndIdenticalJointRuns) {
    ExperimentConfig c = tiny_config(ExperimentKind::MeanfieldBias);
    c.seeds = {0};
    const MeanfieldResult r = run_meanfield_bias(c);
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_TRUE(std::isfinite(r.rows[0].joint_bias));
    EXPECT_TRUE(std::isfinite(r.rows[0].meanfield_bias));
    // a second joint run with the same seed reproduces the bias exactly
    const MeanfieldResult again = run_meanfield_bias(c);
    EXPECT_EQ(again.rows[0].joint_bias, r.rows[0].joint_bias);
    EXPECT_EQ(again.rows[0].meanfield_bias, r.rows[0].meanfield_bias);
}

TEST(FlavourCompare, SameMasksAndProfileExtras) {
    ExperimentConfig c = tiny_config(ExperimentKind::FlavourCompare);
    c.seeds = {0};
    const ExperimentOutcome out = run_experiment(c);
    ASSERT_EQ(out.reports.size(), 3u);
    EXPECT_EQ(out.reports[0].method, "vgi-independent");
    EXPECT_EQ(out.summary["masks"].size(), 1u);
    for (const auto& r : out.reports) {
        ASSERT_TRUE(r.runs[0].ok) << r.runs[0].error;
        for (const char* k : {"cond_kl_median_model", "cond_kl_median_truth", "cond_kl_q1_model", "cond_kl_q3_model"})
            EXPECT_GE(r.runs[0].extras.at(k), 0.0) << k;
        EXPECT_LE(r.runs[0].extras.at("cond_kl_q1_model"), r.runs[0].extras.at("cond_kl_q3_model"));
    }
}

TEST(ArtifactWriter, ManifestHashesOutputs) {
    const auto dir = fresh_dir("manifest");
    ArtifactWriter w(dir);
    w.write("a/b.txt", "hello\n");
    w.write_unhashed("timing.csv", "t\n1\n");
    w.finish("vgibbs run x", {{"config", ""}}, {0, 1}, 3);
    EXPECT_EQ(slurp(dir / "a/b.txt"), "hello\n");
    const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
    EXPECT_EQ(m["command"], "vgibbs run x");
    EXPECT_EQ(m["threads"], 3);
    EXPECT_EQ(m["inputs"][0]["sha1"], "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    ASSERT_EQ(m["outputs"].size(), 2u);
    EXPECT_EQ(m["outputs"][0]["path"], "a/b.txt");
    EXPECT_EQ(m["outputs"][0]["sha1"], "ce013625030ba8dba906f756967f9e9ca394464a");
    EXPECT_TRUE(m["outputs"][1]["sha1"].is_null());
    std::filesystem::remove_all(dir);
}

TEST(WriteExperiment, DeterministicHashedFiles) {
    ExperimentConfig c = tiny_config(ExperimentKind::AccuracySweep);
    c.methods = {"vgi"};
    std::vector<std::string> manifests;
    for (const char* tag : {"det_a", "det_b"}) {
        const auto dir = fresh_dir(tag);
        ArtifactWriter w(dir);
        write_experiment(w, c, run_experiment(c));
        w.finish("run", {}, c.seeds, c.threads);
        manifests.push_back(slurp(dir / "manifest.json"));
        EXPECT_TRUE(std::filesystem::exists(dir / "timing.csv"));
        EXPECT_EQ(slurp(dir / "reports.json").find("wall_seconds"), std::string::npos);
        std::filesystem::remove_all(dir);
    }
    EXPECT_EQ(manifests[0], manifests[1]);
}

TEST(Consistency, WarmupsFollowTheStepBudget) {
    ExperimentConfig c;
    c.kind = ExperimentKind::Consistency;
    c.fractions = {1.0 / 3.0};
    c.seeds = {0};
    c.sizes = {1600, 25600};
    c.consistency_steps = 6400;
    const VgiConfig small = consistency_vgi_config(c, 1600), large = consistency_vgi_config(c, 25600);
    EXPECT_TRUE(small.cosine);
    EXPECT_EQ(small.max_epochs, 800);
    EXPECT_EQ(small.var_warmup_epochs, 40);
    EXPECT_EQ(small.model_warmup_epochs, 20);
    EXPECT_EQ(large.max_epochs, 50);
    EXPECT_EQ(large.var_warmup_epochs, 3);
    EXPECT_EQ(large.model_warmup_epochs, 2);
    c.consistency_steps = 0;
    EXPECT_EQ(consistency_vgi_config(c, 1600).var_warmup_epochs, c.settings.vgi.var_warmup_epochs);
}
