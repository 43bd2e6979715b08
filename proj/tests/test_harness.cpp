#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "support/fixtures.hpp"
#include "svlab/harness/config.hpp"
#include "svlab/harness/experiments.hpp"
#include "svlab/harness/pca.hpp"
#include "svlab/harness/svg.hpp"

using namespace svlab;
using namespace svlab::harness;
namespace fs = std::filesystem;

TEST(Config, ParsesCommentsAndWhitespace) {
    const auto kv = KeyValues::parse("# header\n  seeds = 3  # trailing\n\nfamilies=class_map, fixed_offset\n");
    EXPECT_EQ(kv.u64("seeds", 0), 3u);
    EXPECT_EQ(kv.list("families", {}), (std::vector<std::string>{"class_map", "fixed_offset"}));
    EXPECT_EQ(kv.u64("missing", 7), 7u);
}

TEST(Config, ErrorsNameTheLineAndKey) {
    try {
        KeyValues::parse("a = 1\nnot a pair\n", "run.cfg");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
    }
    const auto kv = KeyValues::parse("n = -3\nx = 1.5y\nb = maybe\n");
    EXPECT_THROW(kv.u64("n", 0), ConfigError);
    EXPECT_THROW(kv.f64("x", 0), ConfigError);
    EXPECT_THROW(kv.flag("b", false), ConfigError);
    EXPECT_THROW(KeyValues::from_file("/nonexistent/svlab.cfg"), ConfigError);
}

TEST(Config, FlagsOverrideFile) {
    auto kv = KeyValues::parse("seeds = 3\nmode = zero_shot\nout = a\n");
    kv.merge(parse_flags({"--mode", "few_shot", "--out=b", "--timing"}));
    EXPECT_EQ(kv.u64("seeds", 0), 3u);
    EXPECT_EQ(kv.str("mode", ""), "few_shot");
    EXPECT_EQ(kv.str("out", ""), "b");
    EXPECT_TRUE(kv.flag("timing", false));
    EXPECT_THROW(parse_flags({"stray"}), ConfigError);
}

TEST(Config, DumpRoundTrips) {
    const auto kv = KeyValues::parse("b = 2\na = x,y\n");
    EXPECT_EQ(kv.dump(), "a = x,y\nb = 2\n");
    EXPECT_EQ(KeyValues::parse(kv.dump()).entries(), kv.entries());
}

TEST(ExperimentConfig, SnapshotRoundTrips) {
    auto kv = KeyValues::parse("seeds = 2\nmethods = sv_inner,sv_ablate_adam\nbeta = 0.25\nL = 3\ntiming = on\n");
    const auto c = ExperimentConfig::from(kv);
    EXPECT_EQ(c.fixed_L, 3u);
    EXPECT_TRUE(c.timing);
    const auto again = ExperimentConfig::from(c.snapshot());
    EXPECT_EQ(again.snapshot().dump(), c.snapshot().dump());
    const auto s = c.settings();
    EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{1, 2}));
    EXPECT_EQ(s.momentum.beta, 0.25);
}

TEST(ExperimentConfig, Validation) {
    EXPECT_THROW(ExperimentConfig::from(KeyValues::parse("families = nope")), std::invalid_argument);
    EXPECT_THROW(ExperimentConfig::from(KeyValues::parse("methods = sv_magic")), std::invalid_argument);
    EXPECT_THROW(ExperimentConfig::from(KeyValues::parse("aggregation_sizes = 15")), ConfigError);
    EXPECT_THROW(ExperimentConfig::from(KeyValues::parse("beta = 1")), ConfigError);
    EXPECT_THROW(ExperimentConfig::from(KeyValues::parse("mode = sideways")), std::invalid_argument);
    const auto c = ExperimentConfig::from(KeyValues::parse("l_min = 2\nl_max = 3"));
    EXPECT_EQ(c.layer_range(4), (std::vector<std::size_t>{2, 3}));
    EXPECT_THROW(c.layer_range(2), ConfigError);
}

TEST(TrainConfigKeys, CanonicalTextFeedsBack) {
    TrainConfig c;
    c.steps = 123;
    c.learning_rate = 2.5e-3;
    c.mixture = {0.7, 0.1, 0.1, 0.1};
    const auto back = train_config_from(KeyValues::parse(c.canonical()));
    EXPECT_EQ(back.canonical(), c.canonical());
}

TEST(Pca, PlanarDataIsFullyExplained) {
    // points on the plane spanned by (1,1,0)/sqrt2 and (0,0,1)
    std::vector<std::vector<double>> rows;
    Rng rng(3);
    for (int i = 0; i < 40; ++i) {
        const double a = 3 * rng.normal(), b = rng.normal();
        rows.push_back({a + 5, a + 5, b - 2});
    }
    const auto p = pca_project(rows);
    EXPECT_NEAR(p.explained_variance[0] + p.explained_variance[1], 1.0, 1e-12);
    EXPECT_GT(p.explained_variance[0], p.explained_variance[1]);
    EXPECT_NEAR(p.mean[0], p.mean[1], 1e-12);
    double dot = 0, n0 = 0, n1 = 0;
    for (int j = 0; j < 3; ++j) {
        dot += p.components[0][j] * p.components[1][j];
        n0 += p.components[0][j] * p.components[0][j];
        n1 += p.components[1][j] * p.components[1][j];
    }
    EXPECT_NEAR(dot, 0.0, 1e-12);
    EXPECT_NEAR(n0, 1.0, 1e-12);
    EXPECT_NEAR(n1, 1.0, 1e-12);
    for (const auto& c : p.components) EXPECT_GT(*std::max_element(c.begin(), c.end()), 0.0);
    double s0 = 0, s1 = 0;
    for (const auto& pt : p.points) {
        s0 += pt[0];
        s1 += pt[1];
    }
    EXPECT_NEAR(s0, 0.0, 1e-10);
    EXPECT_NEAR(s1, 0.0, 1e-10);
    // projection preserves distances within the plane
    const double d_in = std::sqrt(std::pow(rows[0][0] - rows[1][0], 2) * 2 + std::pow(rows[0][2] - rows[1][2], 2));
    const double d_out = std::hypot(p.points[0][0] - p.points[1][0], p.points[0][1] - p.points[1][1]);
    EXPECT_NEAR(d_in, d_out, 1e-10);
}

TEST(Pca, DegenerateAndInvalidInput) {
    const auto p = pca_project({{1, 2}, {1, 2}, {1, 2}});
    EXPECT_EQ(p.explained_variance[0], 0.0);
    for (const auto& pt : p.points) EXPECT_EQ(pt, (std::array<double, 2>{0, 0}));
    EXPECT_THROW(pca_project({{1, 2}, {3, 4}}), std::invalid_argument);
    EXPECT_THROW(pca_project({{1}, {2}, {3}}), DimensionError);
    EXPECT_THROW(pca_project({{1, 2}, {3, 4}, {5}}), DimensionError);
}

TEST(Pca, StateVectorFeatures) {
    StateVector sv{{{1, 2}, {3, 4}}, {}};
    EXPECT_EQ(pca_features(sv, std::nullopt), (std::vector<double>{1, 2, 3, 4}));
    EXPECT_EQ(pca_features(sv, 2), (std::vector<double>{3, 4}));
    EXPECT_THROW(pca_features(sv, 3), std::out_of_range);
}

TEST(ClusterSeparation, CentroidsAndSpread) {
    const auto cs = cluster_separation({{0, 0}, {0, 2}, {4, 0}, {4, 2}}, {1, 1, 2, 3});
    EXPECT_NEAR(cs.first_vs_rest_distance, 4.0, 1e-12);
    EXPECT_NEAR(cs.mean_within_spread, 1.0 / 3.0, 1e-12);
}

TEST(Svg, LineAndScatterPlots) {
    const auto line = line_plot("acc & L", "L", "accuracy", {{"sv<inner>", {1, 2, 3}, {0.1, 0.5, 0.4}, {0.01, 0.02, 0.03}}});
    EXPECT_EQ(line.rfind("<svg", 0), 0u);
    EXPECT_NE(line.find("</svg>"), std::string::npos);
    EXPECT_NE(line.find("acc &amp; L"), std::string::npos);
    EXPECT_NE(line.find("sv&lt;inner&gt;"), std::string::npos);
    EXPECT_NE(line.find("<polygon"), std::string::npos);
    const auto sc = scatter_plot("pca", "PC1", "PC2", {{0, 0, 0}, {1, 1, 1}}, {"a", "b"});
    EXPECT_NE(sc.find("<circle"), std::string::npos);
}

TEST(Runs, ResultsAreByteIdenticalAcrossReruns) {
    const auto m = fixtures::small_model(2);
    const auto cfg = ExperimentConfig::from(
        KeyValues::parse("families = class_map\nseeds = 2\nepisodes_per_seed = 1\nl_max = 2\nmethods = regular,sv_momentum"));
    const auto a = run_eval(m, cfg), b = run_eval(m, cfg);
    EXPECT_EQ(a.results_csv, b.results_csv);
    EXPECT_EQ(a.report.dump(), b.report.dump());
    EXPECT_EQ(a.results_csv.substr(0, a.results_csv.find('\n')), "method,family,mode,L,seed,acc,std,time_ms");
}

TEST(Runs, WriteRunLaysOutFiles) {
    const fs::path out = fs::temp_directory_path() / "svlab_harness_runs";
    fs::remove_all(out);
    const auto d1 = make_run_dir(out, "eval"), d2 = make_run_dir(out, "eval");
    EXPECT_NE(d1, d2);
    RunArtifacts a;
    a.results_csv = "x\n";
    a.report["k"] = 1;
    a.extra_files["checkpoint.bin"] = "abc";
    write_run(d1, KeyValues::parse("seed = 1"), a);
    EXPECT_EQ(read_file(d1 / "results.csv"), "x\n");
    EXPECT_EQ(read_file(d1 / "config.txt"), "seed = 1\n");
    EXPECT_TRUE(fs::exists(d1 / "report.json"));
    EXPECT_FALSE(fs::exists(d1 / "plot.svg"));
    EXPECT_EQ(read_file(d1 / "checkpoint.bin"), "abc");
    fs::remove_all(out);
}

TEST(Runs, DualformSummary) {
    const auto cfg = ExperimentConfig::from(KeyValues::parse("instances = 50\nmax_d = 16\nmax_m = 8"));
    DualformSummary s;
    const auto a = run_dualform(cfg, &s);
    EXPECT_EQ(s.instances, 50u);
    EXPECT_LE(s.worst_rel_error, 1e-10);
    EXPECT_LE(s.worst_gd_diff, 1e-10);
    EXPECT_EQ(a.results_csv, run_dualform(cfg).results_csv);
}

TEST(Runs, PcaExport) {
    const auto m = fixtures::small_model(3);
    const auto cfg = ExperimentConfig::from(KeyValues::parse("pca_episodes = 4\npca_layer = 2"));
    const auto a = run_pca(m, cfg);
    std::size_t lines = 0;
    for (char c : a.results_csv) lines += c == '\n';
    EXPECT_EQ(lines, 1u + 4u * 10u);
    EXPECT_EQ(a.report["layer"], 2);
    EXPECT_FALSE(a.plot_svg.empty());
}

TEST(Runs, AverageReportAcrossFamilies) {
    EvalReport a, b;
    a.per_seed = {0.2, 0.4};
    b.per_seed = {0.6, 0.8};
    a.seeds = b.seeds = {1, 2};
    const auto avg = average_report({a, b});
    EXPECT_EQ(avg.family, "average");
    EXPECT_NEAR(avg.per_seed[0], 0.4, 1e-15);
    EXPECT_NEAR(avg.accuracy, 0.5, 1e-15);
}
