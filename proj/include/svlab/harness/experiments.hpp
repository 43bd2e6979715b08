#pragma once

// Experiment drivers behind the svlab subcommands. Each driver is a pure
// function of a loaded checkpoint and an ExperimentConfig and returns the
// artifacts of one run; write_run() persists them.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "svlab/dualform.hpp"
#include "svlab/harness/config.hpp"
#include "svlab/harness/pca.hpp"
#include "svlab/harness/svg.hpp"
#include "svlab/intervene.hpp"
#include "svlab/statevec.hpp"
#include "svlab/tasks.hpp"
#include "svlab/trainer.hpp"
#include "svlab/util/binary_io.hpp"
#include "svlab/util/parallel.hpp"

namespace svlab::harness {

struct ExperimentConfig {
    std::string checkpoint;
    std::vector<std::string> families = {"random_bijection", "fixed_offset", "bank_translation", "class_map"};
    std::vector<std::string> methods;  // empty: the command's default roster
    std::uint64_t seed = 1;            // first seed
    std::size_t seeds = 5;             // seeds used: seed, seed+1, ...
    Mode mode = Mode::zero_shot;
    std::size_t l_min = 1;
    std::size_t l_max = 0;  // 0: n_layers of the checkpoint
    std::size_t fixed_L = 0;  // robustness only; 0 selects L on dev
    std::vector<std::size_t> aggregation_sizes = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
    std::size_t group_size = 10;
    std::string out = "runs";
    std::size_t episodes_per_seed = 4;
    std::size_t n_demonstrations = 10;
    std::size_t inner_k = 7;
    double beta = 0.5;
    double ablation_lr = 0.01;
    std::size_t resamples = 100;
    bool timing = false;
    std::size_t pca_layer = 0;  // 0: flattened across layers
    std::size_t pca_episodes = 50;
    std::string pca_family = "random_bijection";
    std::size_t instances = 1000;
    std::size_t max_d = 64;
    std::size_t max_m = 32;

    static ExperimentConfig from(const KeyValues& kv) {
        ExperimentConfig c;
        c.checkpoint = kv.str("checkpoint", c.checkpoint);
        c.families = kv.list("families", c.families);
        c.methods = kv.list("methods", c.methods);
        c.seed = kv.u64("seed", c.seed);
        c.seeds = kv.u64("seeds", c.seeds);
        c.mode = mode_from_string(kv.str("mode", to_string(c.mode)));
        c.l_min = kv.u64("l_min", c.l_min);
        c.l_max = kv.u64("l_max", c.l_max);
        c.fixed_L = kv.u64("L", c.fixed_L);
        c.aggregation_sizes = kv.sizes("aggregation_sizes", c.aggregation_sizes);
        c.group_size = kv.u64("group_size", c.group_size);
        c.out = kv.str("out", c.out);
        c.episodes_per_seed = kv.u64("episodes_per_seed", c.episodes_per_seed);
        c.n_demonstrations = kv.u64("n_demonstrations", c.n_demonstrations);
        c.inner_k = kv.u64("inner_k", c.inner_k);
        c.beta = kv.f64("beta", c.beta);
        c.ablation_lr = kv.f64("ablation_lr", c.ablation_lr);
        c.resamples = kv.u64("resamples", c.resamples);
        c.timing = kv.flag("timing", c.timing);
        c.pca_layer = kv.u64("pca_layer", c.pca_layer);
        c.pca_episodes = kv.u64("pca_episodes", c.pca_episodes);
        c.pca_family = kv.str("pca_family", c.pca_family);
        c.instances = kv.u64("instances", c.instances);
        c.max_d = kv.u64("max_d", c.max_d);
        c.max_m = kv.u64("max_m", c.max_m);
        c.validate();
        return c;
    }

    void validate() const {
        if (seeds < 1) throw ConfigError("seeds must be >= 1");
        if (families.empty()) throw ConfigError("families must not be empty");
        for (const auto& f : families) (void)family_by_name(f);
        for (const auto& m : methods) (void)method_from_string(m);
        if (group_size == 0) throw ConfigError("group_size must be >= 1");
        for (auto s : aggregation_sizes) {
            if (s == 0 || s % group_size != 0) {
                throw ConfigError("aggregation size " + std::to_string(s) + " is not a multiple of group_size " +
                                  std::to_string(group_size));
            }
        }
        if (l_min < 1) throw ConfigError("l_min must be >= 1");
        if (l_max != 0 && l_max < l_min) throw ConfigError("l_max must be >= l_min");
        if (episodes_per_seed < 1) throw ConfigError("episodes_per_seed must be >= 1");
        if (inner_k < 1) throw ConfigError("inner_k must be >= 1");
        if (beta < 0 || beta >= 1) throw ConfigError("beta must be in [0, 1)");
        if (max_d < 1) throw ConfigError("max_d must be >= 1");
    }

    KeyValues snapshot() const {
        auto join = [](const auto& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) s += ',';
                if constexpr (std::is_same_v<std::decay_t<decltype(v[i])>, std::string>) {
                    s += v[i];
                } else {
                    s += std::to_string(v[i]);
                }
            }
            return s;
        };
        auto num = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        KeyValues kv;
        kv.set("checkpoint", checkpoint);
        kv.set("families", join(families));
        kv.set("methods", join(methods));
        kv.set("seed", std::to_string(seed));
        kv.set("seeds", std::to_string(seeds));
        kv.set("mode", to_string(mode));
        kv.set("l_min", std::to_string(l_min));
        kv.set("l_max", std::to_string(l_max));
        kv.set("L", std::to_string(fixed_L));
        kv.set("aggregation_sizes", join(aggregation_sizes));
        kv.set("group_size", std::to_string(group_size));
        kv.set("out", out);
        kv.set("episodes_per_seed", std::to_string(episodes_per_seed));
        kv.set("n_demonstrations", std::to_string(n_demonstrations));
        kv.set("inner_k", std::to_string(inner_k));
        kv.set("beta", num(beta));
        kv.set("ablation_lr", num(ablation_lr));
        kv.set("resamples", std::to_string(resamples));
        kv.set("timing", timing ? "true" : "false");
        kv.set("pca_layer", std::to_string(pca_layer));
        kv.set("pca_episodes", std::to_string(pca_episodes));
        kv.set("pca_family", pca_family);
        kv.set("instances", std::to_string(instances));
        kv.set("max_d", std::to_string(max_d));
        kv.set("max_m", std::to_string(max_m));
        return kv;
    }

    EvalSettings settings() const {
        EvalSettings s;
        s.seeds.clear();
        for (std::size_t i = 0; i < seeds; ++i) s.seeds.push_back(seed + i);
        s.episodes_per_seed = episodes_per_seed;
        s.n_demonstrations = n_demonstrations;
        s.inner_k = inner_k;
        s.momentum.beta = beta;
        s.ablation.lr = ablation_lr;
        s.group_size = group_size;
        s.timing = timing;
        return s;
    }

    std::vector<std::size_t> layer_range(std::size_t n_layers) const {
        const std::size_t hi = l_max == 0 ? n_layers : l_max;
        if (hi > n_layers) throw ConfigError("l_max exceeds the checkpoint's " + std::to_string(n_layers) + " layers");
        std::vector<std::size_t> v;
        for (std::size_t l = l_min; l <= hi; ++l) v.push_back(l);
        if (v.empty()) throw ConfigError("empty layer range");
        return v;
    }

    std::vector<Method> method_list(const std::vector<Method>& fallback) const {
        if (methods.empty()) return fallback;
        std::vector<Method> v;
        for (const auto& m : methods) v.push_back(method_from_string(m));
        return v;
    }
};

// Keys follow TrainConfig::canonical(), so a training snapshot can be fed
// back in. Mixture weights are `mix.<family> = w`; families without a
// weight are left out of training.
inline TrainConfig train_config_from(const KeyValues& kv) {
    TrainConfig c;
    c.model.n_layers = kv.u64("n_layers", c.model.n_layers);
    c.model.n_heads = kv.u64("n_heads", c.model.n_heads);
    c.model.d_model = kv.u64("d_model", c.model.d_model);
    c.model.d_ff = kv.u64("d_ff", c.model.d_ff);
    c.model.vocab_size = kv.u64("vocab_size", c.model.vocab_size);
    c.model.max_seq = kv.u64("max_seq", c.model.max_seq);
    try {
        c.model.attention_kind = attention_kind_from_string(kv.str("attention", to_string(c.model.attention_kind)));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    c.steps = kv.u64("steps", c.steps);
    c.batch_size = kv.u64("batch_size", c.batch_size);
    c.learning_rate = kv.f64("learning_rate", c.learning_rate);
    c.warmup_steps = kv.u64("warmup_steps", c.warmup_steps);
    c.beta1 = kv.f64("beta1", c.beta1);
    c.beta2 = kv.f64("beta2", c.beta2);
    c.adam_eps = kv.f64("adam_eps", c.adam_eps);
    c.clip_norm = kv.f64("clip_norm", c.clip_norm);
    c.seed = kv.u64("seed", c.seed);
    c.min_examples = kv.u64("min_examples", c.min_examples);
    c.max_examples = kv.u64("max_examples", c.max_examples);
    c.eval_interval = kv.u64("eval_interval", c.eval_interval);
    c.eval_episodes = kv.u64("eval_episodes", c.eval_episodes);
    c.eval_shots = kv.u64("eval_shots", c.eval_shots);
    bool any_mix = false;
    for (const auto& [k, v] : kv.entries()) any_mix = any_mix || k.rfind("mix.", 0) == 0;
    if (any_mix) {
        c.families.clear();
        c.mixture.clear();
        for (const auto& f : task_catalog()) {
            const std::string key = "mix." + f.name();
            if (!kv.has(key)) continue;
            c.families.push_back(f.name());
            c.mixture.push_back(kv.f64(key, 0.0));
        }
        for (const auto& [k, v] : kv.entries()) {
            if (k.rfind("mix.", 0) == 0 && std::find(c.families.begin(), c.families.end(), k.substr(4)) == c.families.end()) {
                throw ConfigError("unknown family in '" + k + "'");
            }
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

struct RunArtifacts {
    std::string results_csv;
    nlohmann::json report = nlohmann::json::object();
    std::string plot_svg;  // empty: no plot for this command
    std::map<std::string, std::string> extra_files;
};

inline std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string fmt_sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6e", v);
    return buf;
}

// Cross-family mean: per-seed values averaged over families, then mean and
// sample std over seeds.
inline EvalReport average_report(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("average_report: nothing to average");
    EvalReport a = reports.front();
    a.family = "average";
    a.selected_L = 0;
    a.n_queries = 0;
    a.time_ms = 0.0;
    std::fill(a.per_seed.begin(), a.per_seed.end(), 0.0);
    for (const auto& r : reports) {
        if (r.per_seed.size() != a.per_seed.size()) throw std::invalid_argument("average_report: seed counts differ");
        for (std::size_t i = 0; i < a.per_seed.size(); ++i) a.per_seed[i] += r.per_seed[i];
        a.n_queries += r.n_queries;
        a.time_ms += r.time_ms;
    }
    for (auto& v : a.per_seed) v /= static_cast<double>(reports.size());
    a.time_ms /= static_cast<double>(reports.size());
    a.accuracy = mean_of(a.per_seed);
    a.std = stddev_of(a.per_seed);
    return a;
}

inline std::string results_csv(const std::vector<EvalReport>& reports) {
    std::ostringstream os;
    write_results_header(os);
    for (const auto& r : reports) write_results_rows(os, r);
    return os.str();
}

// Per (family, method) evaluation with dev-selected L, plus cross-family
// averages per method.
inline RunArtifacts run_methods(const LoadedModel& m, const ExperimentConfig& cfg, const std::vector<Method>& methods) {
    const auto settings = cfg.settings();
    const auto Ls = cfg.layer_range(m.config().n_layers);
    std::vector<EvalReport> all;
    RunArtifacts out;
    for (Method method : methods) {
        std::vector<EvalReport> per_family;
        for (const auto& fname : cfg.families) {
            per_family.push_back(evaluate_method(m, family_by_name(fname), method, cfg.mode, settings, Ls));
        }
        const auto avg = average_report(per_family);
        for (auto& r : per_family) {
            out.report["results"].push_back(r.to_json());
            all.push_back(std::move(r));
        }
        out.report["results"].push_back(avg.to_json());
        all.push_back(avg);
    }
    out.results_csv = results_csv(all);
    return out;
}

inline const std::vector<Method>& eval_roster() {
    static const std::vector<Method> v{Method::regular, Method::icl, Method::sv_plain, Method::sv_inner,
                                       Method::sv_momentum};
    return v;
}

inline const std::vector<Method>& ablation_roster() {
    static const std::vector<Method> v{Method::sv_inner, Method::sv_momentum, Method::sv_ablate_adagrad,
                                       Method::sv_ablate_rmsprop, Method::sv_ablate_adam};
    return v;
}

inline RunArtifacts run_eval(const LoadedModel& m, const ExperimentConfig& cfg) {
    return run_methods(m, cfg, cfg.method_list(eval_roster()));
}

inline RunArtifacts run_ablate(const LoadedModel& m, const ExperimentConfig& cfg) {
    auto out = run_methods(m, cfg, cfg.method_list(ablation_roster()));
    // mean accuracy per method as a line over the roster
    Series s{"average", {}, {}, {}};
    std::size_t i = 0;
    for (const auto& r : out.report["results"]) {
        if (r["family"] != "average") continue;
        s.x.push_back(static_cast<double>(i++));
        s.y.push_back(r["accuracy"].get<double>());
        s.band.push_back(r["std"].get<double>());
    }
    out.plot_svg = line_plot("Optimizer ablation (0 = inner, 1 = momentum, 2.. = adagrad, rmsprop, adam)", "method",
                             "accuracy", {s});
    return out;
}

// Accuracy vs L averaged over families: one CSV row per (method, L) with the
// mean and std over seeds.
inline RunArtifacts run_sweep_layers(const LoadedModel& m, const ExperimentConfig& cfg) {
    const auto settings = cfg.settings();
    const auto Ls = cfg.layer_range(m.config().n_layers);
    const auto methods = cfg.method_list({Method::sv_plain, Method::sv_inner, Method::sv_momentum});
    RunArtifacts out;
    std::ostringstream csv;
    write_results_header(csv);
    std::vector<Series> series;
    for (Method method : methods) {
        if (!uses_state_vector(method)) throw ConfigError("sweep-layers needs state-vector methods");
        std::vector<LayerSweep> sweeps;
        for (const auto& f : cfg.families) sweeps.push_back(sweep_layers(m, family_by_name(f), method, cfg.mode, settings, Ls));
        Series s{to_string(method), {}, {}, {}};
        for (std::size_t li = 0; li < Ls.size(); ++li) {
            std::vector<double> per_seed(settings.seeds.size(), 0.0);
            for (const auto& sw : sweeps)
                for (std::size_t si = 0; si < per_seed.size(); ++si) per_seed[si] += sw.test_acc[li][si] / static_cast<double>(sweeps.size());
            const double mu = mean_of(per_seed), sd = stddev_of(per_seed);
            csv << to_string(method) << ",average," << to_string(cfg.mode) << ',' << Ls[li] << ",all," << fmt6(mu) << ','
                << fmt6(sd) << ",NA\n";
            s.x.push_back(static_cast<double>(Ls[li]));
            s.y.push_back(mu);
            s.band.push_back(sd);
        }
        for (const auto& sw : sweeps) {
            nlohmann::json j;
            j["method"] = to_string(method);
            j["family"] = sw.family;
            j["layers"] = sw.layers;
            j["dev_acc"] = sw.dev_acc;
            j["test_acc"] = sw.test_acc;
            out.report["sweeps"].push_back(j);
        }
        series.push_back(std::move(s));
    }
    out.results_csv = csv.str();
    out.plot_svg = line_plot("Accuracy vs L (" + to_string(cfg.mode) + ", mean +/- std over seeds)", "L", "accuracy", series);
    return out;
}

// Average vs divide-and-conquer aggregation over example counts, in both
// modes. The method column carries the example count as "<method>@<n>".
inline RunArtifacts run_aggregate(const LoadedModel& m, const ExperimentConfig& cfg) {
    const auto Ls = cfg.layer_range(m.config().n_layers);
    RunArtifacts out;
    std::vector<EvalReport> rows;
    std::vector<Series> series;
    for (Mode mode : {Mode::zero_shot, Mode::few_shot}) {
        for (Method method : {Method::sv_avg_agg, Method::sv_dnc_agg}) {
            Series s{to_string(method) + " " + to_string(mode), {}, {}, {}};
            for (std::size_t n : cfg.aggregation_sizes) {
                auto settings = cfg.settings();
                settings.aggregation_size = n;
                std::vector<EvalReport> per_family;
                for (const auto& f : cfg.families) {
                    auto r = evaluate_method(m, family_by_name(f), method, mode, settings, Ls);
                    r.method += "@" + std::to_string(n);
                    per_family.push_back(std::move(r));
                }
                const auto avg = average_report(per_family);
                for (auto& r : per_family) {
                    out.report["results"].push_back(r.to_json());
                    rows.push_back(std::move(r));
                }
                out.report["results"].push_back(avg.to_json());
                rows.push_back(avg);
                s.x.push_back(static_cast<double>(n));
                s.y.push_back(avg.accuracy);
            }
            series.push_back(std::move(s));
        }
    }
    out.results_csv = results_csv(rows);
    out.plot_svg = line_plot("Aggregation: average vs divide-and-conquer", "examples", "accuracy", series);
    return out;
}

struct ResampleStats {
    std::vector<double> accuracies;
    double mean = 0.0;
    double std = 0.0;
};

enum class ResampleKind { demonstrations, dummies };

inline std::string to_string(ResampleKind k) { return k == ResampleKind::demonstrations ? "demos" : "dummies"; }

// Zero-shot accuracy on one fixed test pool while either the demonstrations
// or the dummy query is redrawn `resamples` times.
inline ResampleStats resample_accuracy(const LoadedModel& m, const TaskFamily& family, Method method, std::size_t L,
                                       ResampleKind kind, const ExperimentConfig& cfg, std::uint64_t base_seed) {
    if (!uses_state_vector(method) || is_aggregation(method)) {
        throw std::invalid_argument("resample_accuracy: needs a single-prompt state-vector method");
    }
    const auto settings = cfg.settings();
    SplitSpec split;
    split.n_demonstrations = cfg.n_demonstrations;
    split.seed = derive_seed(base_seed, family.name() + "/robustness");
    const Episode base = sample_episode(family, split);
    std::vector<Example> candidates = base.dev;  // everything outside the test pool and base episode
    ResampleStats st;
    st.accuracies.resize(cfg.resamples);
    parallel_for(cfg.resamples, [&](std::size_t i) {
        Episode ep = base;
        std::vector<Example> pool = candidates;
        if (kind == ResampleKind::demonstrations) {
            pool.insert(pool.end(), base.demonstrations.begin(), base.demonstrations.end());
            Rng rng(derive_seed(split.seed, "demos", i));
            rng.shuffle(pool);
            ep.demonstrations.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.n_demonstrations));
        } else {
            pool.insert(pool.end(), base.dummies.begin(), base.dummies.end());
            Rng rng(derive_seed(split.seed, "dummy", i));
            ep.dummies = {pool[rng.below(pool.size())]};
        }
        const auto sv = method_state_vector(m, method, ep, settings, L);
        const auto plan = InterventionPlan::from(*sv, L);
        st.accuracies[i] = score_queries(m, base.test, &plan, Mode::zero_shot, {}, false).accuracy();
    });
    st.mean = mean_of(st.accuracies);
    st.std = stddev_of(st.accuracies);
    return st;
}

// Robustness to the choice of demonstrations and dummy query. The seed column
// of results.csv names the resampled pool ("demos" or "dummies"); acc and std
// are the mean and std over resamples.
inline RunArtifacts run_robustness(const LoadedModel& m, const ExperimentConfig& cfg) {
    const auto methods = cfg.method_list({Method::sv_plain, Method::sv_inner, Method::sv_momentum});
    const auto Ls = cfg.layer_range(m.config().n_layers);
    const auto settings = cfg.settings();
    RunArtifacts out;
    std::ostringstream csv;
    write_results_header(csv);
    std::vector<Series> series;
    for (ResampleKind kind : {ResampleKind::demonstrations, ResampleKind::dummies}) {
        Series s{"std over " + to_string(kind), {}, {}, {}};
        for (std::size_t mi = 0; mi < methods.size(); ++mi) {
            const Method method = methods[mi];
            std::vector<double> stds, means;
            for (const auto& fname : cfg.families) {
                const auto family = family_by_name(fname);
                const std::size_t L = cfg.fixed_L ? cfg.fixed_L : select_layer(m, family, method, Ls, settings);
                const auto st = resample_accuracy(m, family, method, L, kind, cfg, cfg.seed);
                csv << to_string(method) << ',' << fname << ",zero_shot," << L << ',' << to_string(kind) << ','
                    << fmt6(st.mean) << ',' << fmt6(st.std) << ",NA\n";
                nlohmann::json j;
                j["method"] = to_string(method);
                j["family"] = fname;
                j["resampled"] = to_string(kind);
                j["L"] = L;
                j["mean"] = st.mean;
                j["std"] = st.std;
                j["accuracies"] = st.accuracies;
                out.report["results"].push_back(j);
                stds.push_back(st.std);
                means.push_back(st.mean);
            }
            csv << to_string(method) << ",average,zero_shot,0," << to_string(kind) << ',' << fmt6(mean_of(means)) << ','
                << fmt6(mean_of(stds)) << ",NA\n";
            s.x.push_back(static_cast<double>(mi));
            s.y.push_back(mean_of(stds));
        }
        series.push_back(std::move(s));
    }
    out.results_csv = csv.str();
    std::string names;
    for (std::size_t i = 0; i < methods.size(); ++i) names += (i ? ", " : "") + std::to_string(i) + " = " + to_string(methods[i]);
    out.plot_svg = line_plot("Accuracy std over resamples (" + names + ")", "method", "std", series);
    return out;
}

// Per-separator state vectors of many episodes projected onto two principal
// components, labeled by example position.
inline RunArtifacts run_pca(const LoadedModel& m, const ExperimentConfig& cfg) {
    const auto family = family_by_name(cfg.pca_family);
    const std::size_t L = m.config().n_layers;
    const std::optional<std::size_t> layer = cfg.pca_layer ? std::optional<std::size_t>(cfg.pca_layer) : std::nullopt;
    std::vector<std::vector<StateVector>> per_episode(cfg.pca_episodes);
    parallel_for(cfg.pca_episodes, [&](std::size_t e) {
        const auto ep = sample_episode(family, cfg.n_demonstrations, episode_seed(cfg.seed, family.name() + "/pca", e));
        per_episode[e] = extract_all(m, build_prompt(ep.demonstrations, ep.dummy(), m.config().max_seq), L);
    });
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> positions, episodes;
    for (std::size_t e = 0; e < per_episode.size(); ++e) {
        for (std::size_t i = 0; i < per_episode[e].size(); ++i) {
            rows.push_back(pca_features(per_episode[e][i], layer));
            positions.push_back(i + 1);
            episodes.push_back(e);
        }
    }
    const auto p = pca_project(rows, positions);
    const auto sep = cluster_separation(rows, positions);
    RunArtifacts out;
    std::ostringstream csv;
    csv << "episode,position,pc1,pc2\n";
    std::vector<ScatterPoint> pts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        csv << episodes[i] << ',' << positions[i] << ',' << fmt_sci(p.points[i][0]) << ',' << fmt_sci(p.points[i][1]) << '\n';
        pts.push_back({p.points[i][0], p.points[i][1], positions[i] - 1});
    }
    out.results_csv = csv.str();
    out.report["family"] = family.name();
    out.report["layer"] = layer ? nlohmann::json(*layer) : nlohmann::json("flattened");
    out.report["explained_variance"] = {p.explained_variance[0], p.explained_variance[1]};
    out.report["first_vs_rest_centroid_distance"] = sep.first_vs_rest_distance;
    out.report["mean_within_position_spread"] = sep.mean_within_spread;
    std::vector<std::string> names;
    for (std::size_t i = 1; i <= cfg.n_demonstrations; ++i) names.push_back("position " + std::to_string(i));
    out.plot_svg = scatter_plot("State vectors by example position (PCA)", "PC1", "PC2", pts, names);
    return out;
}

struct DualformSummary {
    std::size_t instances = 0;
    double worst_rel_error = 0.0;
    double worst_gd_diff = 0.0;
};

// Random dual-form instances with d in [1, max_d] and m in [0, max_m].
inline RunArtifacts run_dualform(const ExperimentConfig& cfg, DualformSummary* summary = nullptr) {
    struct Row {
        std::size_t d, m;
        double rel, gd, gap;
    };
    std::vector<Row> rows(cfg.instances);
    parallel_for(cfg.instances, [&](std::size_t i) {
        const std::uint64_t s = derive_seed(cfg.seed, "dualform-instance", i);
        Rng rng(s);
        const std::size_t d = 1 + rng.below(cfg.max_d);
        const std::size_t mm = rng.below(cfg.max_m + 1);
        const auto inst = dualform::random_instance(s, d, mm);
        const auto dec = dualform::decomposed(inst);
        const auto gd = dualform::gd_correspondence(inst);
        rows[i] = {d, mm, dec.max_rel_error, gd.max_abs_diff, dualform::softmax_gap(inst)};
    });
    RunArtifacts out;
    std::ostringstream csv;
    csv << "instance,d,m,max_rel_error,gd_max_abs_diff,softmax_gap\n";
    DualformSummary sum;
    sum.instances = rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        csv << i << ',' << r.d << ',' << r.m << ',' << fmt_sci(r.rel) << ',' << fmt_sci(r.gd) << ',' << fmt_sci(r.gap) << '\n';
        sum.worst_rel_error = std::max(sum.worst_rel_error, r.rel);
        sum.worst_gd_diff = std::max(sum.worst_gd_diff, r.gd);
    }
    out.results_csv = csv.str();
    out.report["instances"] = sum.instances;
    out.report["worst_rel_error"] = sum.worst_rel_error;
    out.report["worst_gd_abs_diff"] = sum.worst_gd_diff;
    if (summary) *summary = sum;
    return out;
}

struct EfficiencyReport {
    double zero_shot_ms = 0.0;  // intervened, per query
    double few_shot_ms = 0.0;   // n-shot ICL, per query
    std::size_t queries = 0;
};

// Wall time per query of zero-shot intervened inference against n-shot ICL
// on the same queries. Runs single-threaded, interleaving the two so drift
// affects both alike.
inline EfficiencyReport measure_efficiency(const LoadedModel& m, const TaskFamily& family, std::size_t n_demos,
                                           std::size_t episodes, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    EfficiencyReport r;
    EvalSettings s;
    s.n_demonstrations = n_demos;
    double zs = 0.0, fs = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
        const auto ep = sample_for(family, Method::sv_momentum, s, episode_seed(seed, family.name() + "/timing", e));
        const auto sv = method_state_vector(m, Method::sv_momentum, ep, s, m.config().n_layers);
        const auto plan = InterventionPlan::from(*sv, m.config().n_layers);
        for (const auto& q : ep.test) {
            auto t0 = clock::now();
            (void)run_intervened(m, q, &plan, Mode::zero_shot);
            auto t1 = clock::now();
            (void)run_intervened(m, q, nullptr, Mode::few_shot, ep.demonstrations);
            auto t2 = clock::now();
            zs += std::chrono::duration<double, std::milli>(t1 - t0).count();
            fs += std::chrono::duration<double, std::milli>(t2 - t1).count();
            ++r.queries;
        }
    }
    if (r.queries) {
        r.zero_shot_ms = zs / static_cast<double>(r.queries);
        r.few_shot_ms = fs / static_cast<double>(r.queries);
    }
    return r;
}

// <out>/<command>-YYYYmmdd-HHMMSS, with a numeric suffix if taken.
inline std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    std::filesystem::create_directories(out);
    std::filesystem::path dir = out / (command + "-" + stamp);
    for (int k = 1; std::filesystem::exists(dir); ++k) dir = out / (command + "-" + stamp + "-" + std::to_string(k));
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_run(const std::filesystem::path& dir, const KeyValues& snapshot, const RunArtifacts& a) {
    write_file(dir / "config.txt", snapshot.dump());
    write_file(dir / "results.csv", a.results_csv);
    write_file(dir / "report.json", a.report.dump(2) + "\n");
    if (!a.plot_svg.empty()) write_file(dir / "plot.svg", a.plot_svg);
    for (const auto& [name, content] : a.extra_files) write_file(dir / name, content);
}

}  // namespace svlab::harness
