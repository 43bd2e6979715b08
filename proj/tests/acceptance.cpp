// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. The reference checkpoint is trained on first use and cached in
// --reference-dir together with its wall-clock training time.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "support/gradcheck.hpp"
#include "svlab/dualform.hpp"
#include "svlab/harness/experiments.hpp"
#include "svlab/intervene.hpp"
#include "svlab/statevec.hpp"
#include "svlab/trainer.hpp"

using namespace svlab;
using namespace svlab::harness;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string num(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

struct Reference {
    fs::path dir;
    std::optional<LoadedModel> model;
    double train_seconds = -1;

    const LoadedModel& get() {
        if (model) return *model;
        const auto ck_path = dir / "checkpoint.bin";
        const auto time_path = dir / "train_seconds.txt";
        if (!fs::exists(ck_path)) {
            fs::create_directories(dir);
            const TrainConfig cfg;
            std::cerr << "training reference checkpoint (" << cfg.steps << " steps) into " << dir << '\n';
            const auto t0 = clock_type::now();
            const auto r = train(cfg, [](const TrainLogRow& row) {
                std::cerr << "  step " << row.step << " loss " << row.loss << " acc";
                for (double a : row.accuracy) std::cerr << ' ' << a;
                std::cerr << '\n';
            });
            const double secs = seconds_since(t0);
            save_checkpoint(r.checkpoint, ck_path);
            write_file(time_path, num(secs, 10) + "\n");
            std::ofstream log(dir / "train_log.csv");
            r.log.write_csv(log);
        }
        if (fs::exists(time_path)) train_seconds = std::stod(read_file(time_path));
        model = LoadedModel::from(load_checkpoint(ck_path));
        return *model;
    }
};

// Random prompts over all families with 0..10 demonstrations.
std::vector<EpisodePrompt> random_prompts(std::size_t n, std::uint64_t seed) {
    const auto fams = task_catalog();
    std::vector<EpisodePrompt> out;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = fams[rng.below(fams.size())];
        const auto ep = sample_episode(f, rng.below(11), derive_seed(seed, "prompt", i));
        out.push_back(build_prompt(ep.demonstrations, ep.test.front()));
    }
    return out;
}

Outcome dual_form() {
    const auto t0 = clock_type::now();
    auto cfg = ExperimentConfig::from(KeyValues::parse("instances = 1000\nmax_d = 64\nmax_m = 32"));
    DualformSummary s;
    run_dualform(cfg, &s);
    const double secs = seconds_since(t0);
    return {s.instances == 1000 && s.worst_rel_error <= 1e-10 && s.worst_gd_diff <= 1e-12 && secs < 10.0,
            "max rel error " + num(s.worst_rel_error) + ", max |dW_GD - dW| " + num(s.worst_gd_diff) + ", " +
                num(secs, 3) + " s"};
}

Outcome self_patch(const LoadedModel& m) {
    const auto t0 = clock_type::now();
    const std::size_t n = m.config().n_layers;
    const std::set<std::size_t> Ls = {1, std::max<std::size_t>(1, n / 2), n};
    std::size_t checked = 0, identical = 0;
    for (const auto& p : random_prompts(100, 2024)) {
        const std::size_t pos = p.final_separator();
        const auto base = m.model.forward(p.tokens, TapSpec{{Ls.begin(), Ls.end()}, {pos}});
        std::set<std::size_t> all;
        for (std::size_t l = 1; l <= n; ++l) all.insert(l);
        const auto taps = m.model.forward(p.tokens, TapSpec{all, {pos}});
        for (std::size_t L : Ls) {
            PatchSpec ps;
            ps.position = pos;
            for (std::size_t l = 1; l <= L; ++l) ps.vectors[l] = taps.tap(l, pos);
            const auto patched = m.model.forward(p.tokens, {}, std::vector<PatchSpec>{ps});
            ++checked;
            identical += patched.logits == base.logits;
        }
    }
    const double secs = seconds_since(t0);
    return {identical == checked && secs < 60.0,
            std::to_string(identical) + "/" + std::to_string(checked) + " bit-identical, " + num(secs, 3) + " s"};
}

Outcome truncation(const LoadedModel& m) {
    std::size_t checked = 0, identical = 0;
    const auto fams = task_catalog();
    for (std::size_t e = 0; e < 50; ++e) {
        const auto& f = fams[e % fams.size()];
        const auto ep = sample_episode(f, 10, derive_seed(77, "truncation", e));
        const auto all = extract_all(m, build_prompt(ep.demonstrations, ep.dummy()), m.config().n_layers);
        for (std::size_t i = 1; i <= all.size(); ++i) {
            const std::vector<Example> prefix(ep.demonstrations.begin(), ep.demonstrations.begin() + i);
            const Example& next = i < ep.demonstrations.size() ? ep.demonstrations[i] : ep.dummy();
            const auto alone = extract_final(m, build_prompt(prefix, next), m.config().n_layers);
            ++checked;
            identical += alone.vectors == all[i - 1].vectors;
        }
    }
    return {identical == checked, std::to_string(identical) + "/" + std::to_string(checked) + " V_i bit-identical over 50 episodes"};
}

Outcome emergence(Reference& ref) {
    const auto& m = ref.get();
    const auto f = TaskFamily::random_bijection();
    const double few = evaluate_icl(m.model, f, 10, 1000, 9001);
    const double zero = evaluate_icl(m.model, f, 0, 1000, 9002);
    const bool timed = ref.train_seconds >= 0;
    const bool pass = few >= 0.90 && zero <= 2.0 * f.chance() && timed && ref.train_seconds <= 7200.0;
    return {pass, "10-shot " + num(few) + ", zero-shot " + num(zero) + " (chance " + num(f.chance()) + "), training " +
                      (timed ? num(ref.train_seconds, 5) + " s" : std::string("time unknown"))};
}

ExperimentConfig eval_config() {
    return ExperimentConfig::from(KeyValues::parse("seeds = 5\nseed = 1\nmode = zero_shot"));
}

Outcome trend(const LoadedModel& m) {
    const auto cfg = eval_config();
    const auto s = cfg.settings();
    const auto Ls = cfg.layer_range(m.config().n_layers);
    auto average_for = [&](Method method) {
        std::vector<EvalReport> per;
        for (const auto& f : cfg.families) per.push_back(evaluate_method(m, family_by_name(f), method, Mode::zero_shot, s, Ls));
        return average_report(per).accuracy;
    };
    const double plain = average_for(Method::sv_plain), inner = average_for(Method::sv_inner),
                 mom = average_for(Method::sv_momentum);
    return {inner >= plain && mom >= inner, "sv_plain " + num(plain) + ", sv_inner " + num(inner) + ", sv_momentum " + num(mom) +
                                               " (" + std::to_string(cfg.families.size()) + " families, 5 seeds)"};
}

Outcome robustness(const LoadedModel& m) {
    auto cfg = eval_config();
    cfg.resamples = 100;
    const auto s = cfg.settings();
    const auto Ls = cfg.layer_range(m.config().n_layers);
    std::vector<double> plain, inner;
    for (const auto& name : cfg.families) {
        const auto f = family_by_name(name);
        for (Method method : {Method::sv_plain, Method::sv_inner}) {
            const std::size_t L = select_layer(m, f, method, Ls, s);
            const auto st = resample_accuracy(m, f, method, L, ResampleKind::demonstrations, cfg, cfg.seed);
            (method == Method::sv_plain ? plain : inner).push_back(st.std);
        }
    }
    return {mean_of(inner) <= mean_of(plain),
            "mean std over 100 resamples: sv_inner " + num(mean_of(inner)) + ", sv_plain " + num(mean_of(plain))};
}

Outcome aggregation(const LoadedModel& m) {
    const auto cfg = eval_config();
    auto s = cfg.settings();
    s.aggregation_size = 100;
    s.group_size = 10;
    const auto Ls = cfg.layer_range(m.config().n_layers);
    auto average_for = [&](Method method) {
        std::vector<EvalReport> per;
        for (const auto& f : cfg.families) per.push_back(evaluate_method(m, family_by_name(f), method, Mode::zero_shot, s, Ls));
        return average_report(per).accuracy;
    };
    const double avg = average_for(Method::sv_avg_agg), dnc = average_for(Method::sv_dnc_agg);

    // one group of 10 without patching reduces to plain extraction from
    // (group, final dummy); the group vector is plain extraction from
    // (group, its dummy)
    const std::size_t n = m.config().n_layers;
    std::size_t checked = 0, identical = 0;
    for (std::size_t e = 0; e < 20; ++e) {
        SplitSpec split;
        split.n_demonstrations = 10;
        split.n_dummy = 2;
        split.seed = derive_seed(5, "single_group", e);
        const auto ep = sample_episode(task_catalog()[e % 4], split);
        const auto r = dnc_aggregate(m, {ep.demonstrations}, {ep.dummies[0]}, ep.dummies[1], n, false);
        const auto gsv = extract_final(m, build_prompt(ep.demonstrations, ep.dummies[0]), n);
        const auto plain = extract_final(m, build_prompt(ep.demonstrations, ep.dummies[1]), n);
        checked += 2;
        identical += (r.group_vectors[0].vectors == gsv.vectors) + (r.aggregated.vectors == plain.vectors);
    }
    return {dnc >= avg && identical == checked, "at 100 examples: dnc " + num(dnc) + ", avg " + num(avg) +
                                                     "; single-group degeneracy " + std::to_string(identical) + "/" +
                                                     std::to_string(checked) + " bit-identical"};
}

Outcome optimizer_algebra(const LoadedModel& m) {
    double worst = 0;
    auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    const std::size_t n = m.config().n_layers;
    for (std::size_t e = 0; e < 20; ++e) {
        const auto ep = sample_episode(task_catalog()[e % 4], 10, derive_seed(31, "algebra", e));
        const auto svs = extract_all(m, build_prompt(ep.demonstrations, ep.dummy()), n);
        const auto E = influences(svs);
        const auto v_bar = inner_optimize(svs, 7);
        OptConfig zero;
        zero.beta = 0.0;
        const auto collapsed = momentum_optimize(v_bar, E, zero);
        StateVector scaled_in;
        std::vector<StateVector> scaled;
        const double c = -1.75;
        for (const auto& sv : svs) {
            StateVector t = sv;
            for (auto& row : t.vectors)
                for (auto& x : row) x *= c;
            scaled.push_back(std::move(t));
        }
        const auto inner_scaled = inner_optimize(scaled, 7);
        for (std::size_t l = 0; l < v_bar.L(); ++l) {
            for (std::size_t j = 0; j < v_bar.dim(); ++j) {
                track(collapsed.vectors[l][j], v_bar.vectors[l][j] + E.items.back()[l][j]);
                double recon = svs.front().vectors[l][j];
                for (const auto& it : E.items) recon += it[l][j];
                track(recon, svs.back().vectors[l][j]);
                track(inner_scaled.vectors[l][j], c * v_bar.vectors[l][j]);
            }
        }
    }
    // constant influence e over n steps gives (1 - beta^n) e
    for (std::size_t steps : {1u, 3u, 9u}) {
        for (double beta : {0.0, 0.5, 0.9}) {
            std::vector<StateVector> ramp;
            for (std::size_t i = 0; i <= steps; ++i) ramp.push_back(StateVector{{{0.3 * static_cast<double>(i), -2.0 * static_cast<double>(i)}}, {}});
            OptConfig cfg;
            cfg.beta = beta;
            const auto out = momentum_optimize(StateVector{{{0.0, 0.0}}, {}}, influences(ramp), cfg);
            const double k = 1.0 - std::pow(beta, static_cast<double>(steps));
            track(out.vectors[0][0], k * 0.3);
            track(out.vectors[0][1], k * -2.0);
        }
    }
    return {worst <= 1e-12, "max deviation " + num(worst)};
}

Outcome gradient_check() {
    double worst = 0;
    std::string worst_op;
    const auto checks = fixtures::check_all_ops();
    for (const auto& c : checks) {
        if (c.worst_rel_error >= worst) {
            worst = c.worst_rel_error;
            worst_op = c.name;
        }
    }
    return {worst <= 1e-4 && !checks.empty(),
            std::to_string(checks.size()) + " ops, worst relative error " + num(worst) + " (" + worst_op + ")"};
}

Outcome determinism(const LoadedModel& m, const fs::path& ref_ck) {
    std::vector<std::string> failures;
    TrainConfig tiny;
    tiny.model.n_layers = 2;
    tiny.model.d_model = 16;
    tiny.model.n_heads = 2;
    tiny.model.d_ff = 32;
    tiny.steps = 5;
    tiny.batch_size = 2;
    tiny.eval_episodes = 4;
    if (serialize(train(tiny).checkpoint) != serialize(train(tiny).checkpoint)) failures.push_back("training");

    const auto cfg = ExperimentConfig::from(KeyValues::parse("seeds = 2\nepisodes_per_seed = 1\nmethods = sv_inner,sv_momentum"));
    if (run_eval(m, cfg).results_csv != run_eval(m, cfg).results_csv) failures.push_back("eval results");

    const std::string bytes = read_file(ref_ck);
    if (serialize(deserialize_checkpoint(bytes)) != bytes) failures.push_back("checkpoint round trip");
    std::string bad = bytes;
    bad[bad.size() / 3] ^= 0x10;
    try {
        (void)deserialize_checkpoint(bad);
        failures.push_back("corrupt checkpoint accepted");
    } catch (const ChecksumError&) {
    }

    const auto ep = sample_episode(TaskFamily::random_bijection(), 10, 3);
    const auto sv = inner_optimize(extract_all(m, build_prompt(ep.demonstrations, ep.dummy()), m.config().n_layers), 7);
    const std::string sv_bytes = serialize(sv);
    if (!(deserialize_state_vector(sv_bytes) == sv) || serialize(deserialize_state_vector(sv_bytes)) != sv_bytes) {
        failures.push_back("state vector round trip");
    }
    std::string bad_sv = sv_bytes;
    bad_sv[bad_sv.size() / 2] ^= 0x01;
    try {
        (void)deserialize_state_vector(bad_sv);
        failures.push_back("corrupt state vector accepted");
    } catch (const ChecksumError&) {
    }
    std::string detail = "training, eval, checkpoint and state vector files";
    if (!failures.empty()) {
        detail = "failed:";
        for (const auto& f : failures) detail += " " + f + ";";
    }
    return {failures.empty(), detail};
}

Outcome efficiency(const LoadedModel& m) {
    const auto r = measure_efficiency(m, TaskFamily::random_bijection(), 10, 5, 17);
    return {r.queries > 0 && r.zero_shot_ms < r.few_shot_ms,
            "per query: zero-shot intervened " + num(r.zero_shot_ms) + " ms, 10-shot ICL " + num(r.few_shot_ms) + " ms"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"svlab acceptance suite"};
    std::string ref_dir = "reference";
    std::vector<int> only;
    app.add_option("--reference-dir", ref_dir, "where the reference checkpoint is cached");
    bool prepare = false;
    app.add_option("--only", only, "run just these criteria (1-11)")->delimiter(',');
    app.add_flag("--prepare", prepare, "train and cache the reference checkpoint, then exit");
    CLI11_PARSE(app, argc, argv);

    Reference ref{ref_dir, std::nullopt, -1};
    if (prepare) {
        try {
            ref.get();
        } catch (const std::exception& e) {
            std::cerr << "acceptance: " << e.what() << '\n';
            return 1;
        }
        return 0;
    }
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"dual-form identity", [] { return dual_form(); }},
        {"self-patch oracle", [&] { return self_patch(ref.get()); }},
        {"truncation oracle", [&] { return truncation(ref.get()); }},
        {"toy ICL emergence", [&] { return emergence(ref); }},
        {"trend plain <= inner <= momentum", [&] { return trend(ref.get()); }},
        {"robustness std inner <= plain", [&] { return robustness(ref.get()); }},
        {"aggregation dnc >= avg", [&] { return aggregation(ref.get()); }},
        {"optimizer algebra", [&] { return optimizer_algebra(ref.get()); }},
        {"gradient check", [] { return gradient_check(); }},
        {"determinism and persistence", [&] { return determinism(ref.get(), ref.dir / "checkpoint.bin"); }},
        {"efficiency", [&] { return efficiency(ref.get()); }},
    };

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        const auto t0 = clock_type::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail << "  ["
                  << num(seconds_since(t0), 3) << " s]" << std::endl;
    }
    return failed ? 1 : 0;
}
