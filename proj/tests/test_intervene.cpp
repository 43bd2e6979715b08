#include <gtest/gtest.h>

#include <sstream>

#include "support/fixtures.hpp"
#include "svlab/intervene.hpp"

using namespace svlab;

namespace {

EvalSettings quick() {
    EvalSettings s;
    s.seeds = {1, 2};
    s.episodes_per_seed = 2;
    return s;
}

}  // namespace

TEST(Names, MethodsAndModesRoundTrip) {
    for (auto m : all_methods()) EXPECT_EQ(method_from_string(to_string(m)), m);
    EXPECT_EQ(method_from_string("sv_ablate_rmsprop"), Method::sv_ablate_rmsprop);
    EXPECT_EQ(to_string(Method::sv_ablate_adam), "sv_ablate(adam)");
    EXPECT_THROW(method_from_string("sv_magic"), std::invalid_argument);
    EXPECT_EQ(mode_from_string("few_shot"), Mode::few_shot);
    EXPECT_THROW(mode_from_string("two_shot"), std::invalid_argument);
    EXPECT_FALSE(uses_state_vector(Method::icl));
    EXPECT_TRUE(is_aggregation(Method::sv_dnc_agg));
    EXPECT_EQ(ablation_algorithm(Method::sv_ablate_adagrad), OptAlgorithm::adagrad);
    EXPECT_FALSE(ablation_algorithm(Method::sv_momentum).has_value());
}

TEST(InferencePrompt, ModeChecks) {
    const auto m = fixtures::small_model();
    const Example q{5, 140};
    EXPECT_EQ(inference_prompt(m, q, Mode::zero_shot, {}).tokens, (std::vector<Token>{5, vocab::separator}));
    EXPECT_THROW(inference_prompt(m, q, Mode::zero_shot, {q}), std::invalid_argument);
    EXPECT_THROW(inference_prompt(m, q, Mode::few_shot, {}), std::invalid_argument);
}

TEST(RunIntervened, SelfPatchLeavesPredictionUnchanged) {
    const auto m = fixtures::small_model(2);
    const auto ep = sample_episode(TaskFamily::random_bijection(), 6, 3);
    for (const auto& q : std::vector<Example>(ep.test.begin(), ep.test.begin() + 10)) {
        const auto own = extract_final(m, build_prompt({}, q), 4);
        for (std::size_t L = 1; L <= 4; ++L) {
            const auto plan = InterventionPlan::from(own, L);
            EXPECT_EQ(run_intervened(m, q, &plan, Mode::zero_shot), run_intervened(m, q, nullptr, Mode::zero_shot));
        }
    }
}

TEST(RunIntervened, PlainVectorOnItsOwnPromptReproducesIcl) {
    const auto m = fixtures::small_model(3);
    const auto s = quick();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto ep = sample_for(TaskFamily::class_map(), Method::sv_plain, s, seed);
        const auto sv = method_state_vector(m, Method::sv_plain, ep, s, 0);
        ASSERT_TRUE(sv.has_value());
        const auto plan = InterventionPlan::from(*sv, 4);
        EXPECT_EQ(run_intervened(m, ep.dummy(), &plan, Mode::few_shot, ep.demonstrations),
                  run_intervened(m, ep.dummy(), nullptr, Mode::few_shot, ep.demonstrations));
    }
}

TEST(RunIntervened, RefusesForeignStateVector) {
    const auto m = fixtures::small_model(4);
    auto sv = extract_final(m, build_prompt({}, Example{3, 131}), 2);
    sv.meta.checkpoint_hash ^= 1;
    const auto plan = InterventionPlan::from(sv, 2);
    EXPECT_THROW(run_intervened(m, Example{3, 131}, &plan, Mode::zero_shot), CheckpointMismatch);
}

TEST(InterventionPlan, PatchCoversLayersOneToL) {
    const auto m = fixtures::small_model(5);
    const auto sv = extract_final(m, build_prompt({}, Example{3, 131}), 4);
    const auto plan = InterventionPlan::from(sv, 3);
    const auto ps = plan.patch_at(7);
    EXPECT_EQ(ps.position, 7u);
    ASSERT_EQ(ps.vectors.size(), 3u);
    EXPECT_EQ(ps.vectors.at(1), sv.vectors[0]);
    EXPECT_EQ(ps.vectors.at(3), sv.vectors[2]);
    EXPECT_THROW(InterventionPlan::from(sv, 5), std::invalid_argument);
}

TEST(MethodStateVector, InnerAndMomentumFollowTheirDefinitions) {
    const auto m = fixtures::small_model(6);
    const auto s = quick();
    const auto ep = sample_for(TaskFamily::fixed_offset(17), Method::sv_inner, s, 11);
    const auto svs = extract_all(m, build_prompt(ep.demonstrations, ep.dummy()), 4);
    ASSERT_EQ(svs.size(), 10u);
    const auto inner = *method_state_vector(m, Method::sv_inner, ep, s, 0);
    const auto mom = *method_state_vector(m, Method::sv_momentum, ep, s, 0);
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t j = 0; j < inner.dim(); ++j) {
            double mean = 0;
            for (std::size_t i = 3; i < 10; ++i) mean += svs[i].vectors[l][j];
            mean /= 7;
            EXPECT_NEAR(inner.vectors[l][j], mean, 1e-12);
            double mm = 0;
            for (std::size_t i = 1; i < 10; ++i) mm = 0.5 * mm + 0.5 * (svs[i].vectors[l][j] - svs[i - 1].vectors[l][j]);
            EXPECT_NEAR(mom.vectors[l][j], mean + mm, 1e-12);
        }
    }
    EXPECT_EQ(inner.meta.family, "fixed_offset");
    EXPECT_EQ(inner.meta.checkpoint_hash, m.hash);
    EXPECT_FALSE(method_state_vector(m, Method::regular, ep, s, 0).has_value());
}

TEST(MethodStateVector, AggregationUsesGroupsAndDummies) {
    const auto m = fixtures::small_model(7);
    auto s = quick();
    s.aggregation_size = 20;
    s.group_size = 10;
    const auto ep = sample_for(TaskFamily::random_bijection(), Method::sv_avg_agg, s, 5);
    EXPECT_EQ(ep.demonstrations.size(), 20u);
    EXPECT_EQ(ep.dummies.size(), 3u);
    const auto demos = few_shot_demonstrations(Method::sv_avg_agg, ep, s);
    EXPECT_EQ(demos, std::vector<Example>(ep.dummies.begin(), ep.dummies.begin() + 2));
    const auto avg = *method_state_vector(m, Method::sv_avg_agg, ep, s, 0);
    const std::vector<Example> g0(ep.demonstrations.begin(), ep.demonstrations.begin() + 10);
    const std::vector<Example> g1(ep.demonstrations.begin() + 10, ep.demonstrations.end());
    const auto a = extract_final(m, build_prompt(g0, ep.dummies[0]), 4);
    const auto b = extract_final(m, build_prompt(g1, ep.dummies[1]), 4);
    for (std::size_t j = 0; j < avg.dim(); ++j) EXPECT_NEAR(avg.vectors[2][j], 0.5 * (a.vectors[2][j] + b.vectors[2][j]), 1e-12);
    const auto dnc = *method_state_vector(m, Method::sv_dnc_agg, ep, s, 2);
    EXPECT_EQ(dnc.L(), 2u);
    s.group_size = 7;
    EXPECT_THROW(sample_for(TaskFamily::random_bijection(), Method::sv_avg_agg, s, 5), std::invalid_argument);
}

TEST(Stats, SampleStandardDeviation) {
    EXPECT_NEAR(stddev_of({1, 2, 3, 4}), 1.2909944487358056, 1e-15);
    EXPECT_EQ(stddev_of({3}), 0.0);
    EXPECT_EQ(mean_of({}), 0.0);
}

TEST(LayerSelection, TiesGoToSmallestL) {
    LayerSweep sw;
    sw.layers = {3, 1, 2, 4};
    sw.dev_acc = {{0.5, 0.7}, {0.6, 0.6}, {0.7, 0.5}, {0.2, 0.2}};
    EXPECT_EQ(sw.layers[best_layer_index(sw)], 1u);
    sw.dev_acc[3] = {0.9, 0.1};
    EXPECT_EQ(sw.layers[best_layer_index(sw)], 1u);
    sw.dev_acc[3] = {0.9, 0.5};
    EXPECT_EQ(sw.layers[best_layer_index(sw)], 4u);
}

TEST(LayerSelection, SingleCandidateNeedsNoSweep) {
    const auto m = fixtures::small_model(8);
    EvalSettings s = quick();
    s.seeds = {};  // would make any sweep meaningless
    EXPECT_EQ(select_layer(m, TaskFamily::class_map(), Method::sv_plain, {3}, s), 3u);
}

TEST(Sweep, RepeatedCallsAreIdentical) {
    const auto m = fixtures::small_model(9);
    const auto s = quick();
    const auto a = sweep_layers(m, TaskFamily::class_map(), Method::sv_momentum, Mode::zero_shot, s, {1, 2, 3, 4});
    const auto b = sweep_layers(m, TaskFamily::class_map(), Method::sv_momentum, Mode::zero_shot, s, {1, 2, 3, 4});
    EXPECT_EQ(a.dev_acc, b.dev_acc);
    EXPECT_EQ(a.test_acc, b.test_acc);
    EXPECT_EQ(a.test_queries, b.test_queries);
}

TEST(Sweep, UnintervenedMethodsHaveOneRow) {
    const auto m = fixtures::small_model(10);
    const auto s = quick();
    const auto sw = sweep_layers(m, TaskFamily::class_map(), Method::regular, Mode::zero_shot, s, {1, 2});
    EXPECT_EQ(sw.layers, std::vector<std::size_t>{0});
    const auto ep = sample_for(TaskFamily::class_map(), Method::regular, s, episode_seed(1, "class_map", 0));
    EXPECT_EQ(sw.test_queries[0], 2 * ep.test.size());
    EXPECT_THROW(sweep_layers(m, TaskFamily::class_map(), Method::sv_plain, Mode::zero_shot, s, {}), std::invalid_argument);
    EXPECT_THROW(sweep_layers(m, TaskFamily::class_map(), Method::sv_plain, Mode::zero_shot, s, {5}), std::invalid_argument);
}

TEST(Report, IclAlwaysReportsFewShot) {
    const auto m = fixtures::small_model(11);
    const auto s = quick();
    const auto r = evaluate_method(m, TaskFamily::class_map(), Method::icl, Mode::zero_shot, s, {1});
    EXPECT_EQ(r.mode, Mode::few_shot);
    EXPECT_EQ(r.selected_L, 0u);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_TRUE(r.to_json()["time_ms"].is_null());
}

TEST(Report, CsvRowsPerSeedAndAll) {
    EvalReport r;
    r.method = "sv_inner";
    r.family = "class_map";
    r.selected_L = 2;
    r.seeds = {1, 2};
    r.per_seed = {0.5, 0.75};
    r.accuracy = 0.625;
    r.std = stddev_of(r.per_seed);
    std::ostringstream os;
    write_results_header(os);
    write_results_rows(os, r);
    EXPECT_EQ(os.str(),
              "method,family,mode,L,seed,acc,std,time_ms\n"
              "sv_inner,class_map,zero_shot,2,1,0.500000,,NA\n"
              "sv_inner,class_map,zero_shot,2,2,0.750000,,NA\n"
              "sv_inner,class_map,zero_shot,2,all,0.625000,0.176777,NA\n");
    r.timed = true;
    r.time_ms = 1.5;
    std::ostringstream timed;
    write_results_rows(timed, r);
    EXPECT_NE(timed.str().find(",1.500000\n"), std::string::npos);
}
