#pragma once

// Inference with state-vector intervention and first-token accuracy
// evaluation of the method roster.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "svlab/model.hpp"
#include "svlab/statevec.hpp"
#include "svlab/tasks.hpp"
#include "svlab/util/parallel.hpp"

namespace svlab {

enum class Mode { zero_shot, few_shot };

inline std::string to_string(Mode m) { return m == Mode::zero_shot ? "zero_shot" : "few_shot"; }

inline Mode mode_from_string(const std::string& s) {
    if (s == "zero_shot" || s == "zero-shot") return Mode::zero_shot;
    if (s == "few_shot" || s == "few-shot") return Mode::few_shot;
    throw std::invalid_argument("unknown mode '" + s + "'");
}

enum class Method {
    regular,      // no intervention, prompt per mode
    icl,          // no intervention, demonstrations always present
    sv_plain,     // state vector at the dummy query's separator
    sv_inner,     // mean of the last K per-separator state vectors
    sv_momentum,  // inner vector plus momentum-filtered influences
    sv_avg_agg,   // mean of group state vectors
    sv_dnc_agg,   // divide-and-conquer aggregated state vector
    sv_ablate_adagrad,
    sv_ablate_rmsprop,
    sv_ablate_adam,
};

inline std::string to_string(Method m) {
    switch (m) {
        case Method::regular: return "regular";
        case Method::icl: return "icl";
        case Method::sv_plain: return "sv_plain";
        case Method::sv_inner: return "sv_inner";
        case Method::sv_momentum: return "sv_momentum";
        case Method::sv_avg_agg: return "sv_avg_agg";
        case Method::sv_dnc_agg: return "sv_dnc_agg";
        case Method::sv_ablate_adagrad: return "sv_ablate(adagrad)";
        case Method::sv_ablate_rmsprop: return "sv_ablate(rmsprop)";
        case Method::sv_ablate_adam: return "sv_ablate(adam)";
    }
    return "?";
}

inline const std::vector<Method>& all_methods() {
    static const std::vector<Method> v{Method::regular,          Method::icl,
                                       Method::sv_plain,         Method::sv_inner,
                                       Method::sv_momentum,      Method::sv_avg_agg,
                                       Method::sv_dnc_agg,       Method::sv_ablate_adagrad,
                                       Method::sv_ablate_rmsprop, Method::sv_ablate_adam};
    return v;
}

inline Method method_from_string(std::string s) {
    if (s.rfind("sv_ablate_", 0) == 0) s = "sv_ablate(" + s.substr(10) + ")";
    for (auto m : all_methods())
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool uses_state_vector(Method m) { return m != Method::regular && m != Method::icl; }
inline bool is_aggregation(Method m) { return m == Method::sv_avg_agg || m == Method::sv_dnc_agg; }

inline std::optional<OptAlgorithm> ablation_algorithm(Method m) {
    switch (m) {
        case Method::sv_ablate_adagrad: return OptAlgorithm::adagrad;
        case Method::sv_ablate_rmsprop: return OptAlgorithm::rmsprop;
        case Method::sv_ablate_adam: return OptAlgorithm::adam;
        default: return std::nullopt;
    }
}

class CheckpointMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Replacement vectors for layers 1..L at the final separator.
struct InterventionPlan {
    StateVector sv;
    std::size_t L = 0;

    static InterventionPlan from(const StateVector& sv, std::size_t L) { return {sv.truncated(L), L}; }

    PatchSpec patch_at(std::size_t position) const {
        if (sv.L() != L) throw std::invalid_argument("intervention plan: state vector covers " + std::to_string(sv.L()) +
                                                     " layers, plan targets " + std::to_string(L));
        PatchSpec ps;
        ps.position = position;
        for (std::size_t l = 1; l <= L; ++l) ps.vectors[l] = sv.vectors[l - 1];
        return ps;
    }
};

inline EpisodePrompt inference_prompt(const LoadedModel& m, const Example& query, Mode mode,
                                      const std::vector<Example>& demonstrations) {
    if (mode == Mode::zero_shot && !demonstrations.empty()) {
        throw std::invalid_argument("zero-shot inference takes no demonstrations");
    }
    if (mode == Mode::few_shot && demonstrations.empty()) {
        throw std::invalid_argument("few-shot inference needs demonstrations");
    }
    return build_prompt(demonstrations, query, m.config().max_seq);
}

// Predicted first token for `query`, optionally patching layers 1..L of the
// final separator with the plan's state vector.
inline Token run_intervened(const LoadedModel& m, const Example& query, const InterventionPlan* plan, Mode mode,
                            const std::vector<Example>& demonstrations = {}) {
    const auto prompt = inference_prompt(m, query, mode, demonstrations);
    std::vector<PatchSpec> patches;
    if (plan) {
        if (plan->sv.meta.checkpoint_hash != m.hash) {
            throw CheckpointMismatch("state vector was extracted from checkpoint " +
                                     std::to_string(plan->sv.meta.checkpoint_hash) + ", running " +
                                     std::to_string(m.hash));
        }
        patches.push_back(plan->patch_at(prompt.final_separator()));
    }
    const auto out = m.model.forward(prompt.tokens, {}, patches);
    return logits_to_first_token(out.logits, prompt.final_separator());
}

struct EvalSettings {
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::size_t episodes_per_seed = 4;
    std::size_t n_demonstrations = 10;
    std::size_t inner_k = 7;
    OptConfig momentum{};
    OptConfig ablation{OptAlgorithm::adam, 0.5, 0.01};
    std::size_t aggregation_size = 100;
    std::size_t group_size = 10;
    bool timing = false;
};

// One sampled episode plus everything a method needs from it.
struct MethodEpisode {
    Episode episode;
    std::vector<Example> few_shot_demonstrations;
    std::optional<StateVector> sv;  // full depth, or depth L for dnc
};

inline Episode sample_for(const TaskFamily& family, Method method, const EvalSettings& s, std::uint64_t episode_seed) {
    SplitSpec split;
    split.seed = episode_seed;
    if (is_aggregation(method)) {
        if (s.group_size == 0 || s.aggregation_size % s.group_size != 0) {
            throw std::invalid_argument("aggregation size must be a multiple of the group size");
        }
        split.n_demonstrations = s.aggregation_size;
        split.n_dummy = s.aggregation_size / s.group_size + 1;
    } else {
        split.n_demonstrations = s.n_demonstrations;
        split.n_dummy = 1;
    }
    return sample_episode(family, split);
}

inline std::uint64_t episode_seed(std::uint64_t seed, const std::string& family, std::size_t index) {
    return derive_seed(derive_seed(seed, family), "episode", index);
}

// Builds the state vector of `method` from an episode. `L` is only used by
// D&C aggregation, whose conquer stage patches layers 1..L; all other
// methods return full-depth vectors that callers truncate.
inline std::optional<StateVector> method_state_vector(const LoadedModel& m, Method method, const Episode& ep,
                                                      const EvalSettings& s, std::size_t L) {
    const std::size_t depth = m.config().n_layers;
    const auto max_seq = m.config().max_seq;
    std::optional<StateVector> sv;
    switch (method) {
        case Method::regular:
        case Method::icl: return std::nullopt;
        case Method::sv_plain: sv = extract_final(m, build_prompt(ep.demonstrations, ep.dummy(), max_seq), depth); break;
        case Method::sv_inner:
        case Method::sv_momentum:
        case Method::sv_ablate_adagrad:
        case Method::sv_ablate_rmsprop:
        case Method::sv_ablate_adam: {
            const auto svs = extract_all(m, build_prompt(ep.demonstrations, ep.dummy(), max_seq), depth);
            const StateVector v_bar = inner_optimize(svs, std::min(s.inner_k, svs.size()));
            if (method == Method::sv_inner) {
                sv = v_bar;
            } else if (method == Method::sv_momentum) {
                sv = momentum_optimize(v_bar, influences(svs), s.momentum);
            } else {
                OptConfig cfg = s.ablation;
                cfg.algorithm = *ablation_algorithm(method);
                sv = ablate_optimize(v_bar, influences(svs), cfg);
            }
            break;
        }
        case Method::sv_avg_agg:
        case Method::sv_dnc_agg: {
            const std::size_t G = ep.demonstrations.size() / s.group_size;
            std::vector<std::vector<Example>> groups(G);
            for (std::size_t g = 0; g < G; ++g) {
                groups[g].assign(ep.demonstrations.begin() + static_cast<std::ptrdiff_t>(g * s.group_size),
                                 ep.demonstrations.begin() + static_cast<std::ptrdiff_t>((g + 1) * s.group_size));
            }
            const std::vector<Example> dummies(ep.dummies.begin(), ep.dummies.begin() + static_cast<std::ptrdiff_t>(G));
            if (method == Method::sv_dnc_agg) {
                sv = dnc_aggregate(m, groups, dummies, ep.dummies.at(G), L).aggregated;
            } else {
                std::vector<StateVector> gsvs;
                for (std::size_t g = 0; g < G; ++g) gsvs.push_back(extract_final(m, build_prompt(groups[g], dummies[g], max_seq), depth));
                sv = average_aggregate(gsvs);
            }
            break;
        }
    }
    sv->meta.family = ep.family;
    sv->meta.seed = ep.seed;
    sv->meta.checkpoint_hash = m.hash;
    if (method == Method::sv_plain) sv->meta.method = "plain";
    return sv;
}

// Demonstrations placed in the prompt for few-shot inference.
inline std::vector<Example> few_shot_demonstrations(Method method, const Episode& ep, const EvalSettings& s) {
    if (!is_aggregation(method)) return ep.demonstrations;
    const std::size_t G = ep.demonstrations.size() / s.group_size;
    return {ep.dummies.begin(), ep.dummies.begin() + static_cast<std::ptrdiff_t>(G)};
}

struct QueryScore {
    std::size_t correct = 0;
    std::size_t total = 0;
    double seconds = 0.0;

    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline QueryScore score_queries(const LoadedModel& m, const std::vector<Example>& queries, const InterventionPlan* plan,
                                Mode mode, const std::vector<Example>& demonstrations, bool timing) {
    QueryScore s;
    const auto& demos = mode == Mode::few_shot ? demonstrations : std::vector<Example>{};
    for (const auto& q : queries) {
        const auto t0 = timing ? std::chrono::steady_clock::now() : std::chrono::steady_clock::time_point{};
        const Token pred = run_intervened(m, q, plan, mode, demos);
        if (timing) s.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        s.correct += pred == q.label;
        ++s.total;
    }
    return s;
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// Dev/test accuracy of a method for every candidate L and every seed.
struct LayerSweep {
    Method method = Method::regular;
    std::string family;
    Mode mode = Mode::zero_shot;
    std::vector<std::size_t> layers;               // candidate L (just {0} for unintervened methods)
    std::vector<std::vector<double>> dev_acc;      // [layer][seed]
    std::vector<std::vector<double>> test_acc;     // [layer][seed]
    std::vector<std::vector<double>> time_ms;      // [layer][seed], mean per query (0 unless timing)
    std::vector<std::size_t> test_queries;         // per seed

    double mean_dev(std::size_t li) const { return mean_of(dev_acc[li]); }
    double mean_test(std::size_t li) const { return mean_of(test_acc[li]); }
};

inline LayerSweep sweep_layers(const LoadedModel& m, const TaskFamily& family, Method method, Mode mode,
                               const EvalSettings& s, std::vector<std::size_t> candidate_Ls) {
    LayerSweep r;
    r.method = method;
    r.family = family.name();
    r.mode = mode;
    if (!uses_state_vector(method)) {
        candidate_Ls = {0};
    } else if (candidate_Ls.empty()) {
        throw std::invalid_argument("sweep_layers: no candidate L");
    }
    for (std::size_t L : candidate_Ls) {
        if (L != 0) detail::check_layers(m, L);
    }
    r.layers = candidate_Ls;
    const std::size_t nL = candidate_Ls.size();
    const std::size_t nS = s.seeds.size();
    const std::size_t nE = s.episodes_per_seed;
    // cells[(seed * nE + e) * nL + li]
    std::vector<QueryScore> dev(nS * nE * nL), test(nS * nE * nL);
    parallel_for(nS * nE, [&](std::size_t cell) {
        const std::size_t si = cell / nE, e = cell % nE;
        const Episode ep = sample_for(family, method, s, episode_seed(s.seeds[si], family.name(), e));
        const auto demos = few_shot_demonstrations(method, ep, s);
        const Mode eff_mode = method == Method::icl ? Mode::few_shot : mode;
        std::optional<StateVector> full;
        if (uses_state_vector(method) && method != Method::sv_dnc_agg) full = method_state_vector(m, method, ep, s, 0);
        for (std::size_t li = 0; li < nL; ++li) {
            const std::size_t L = candidate_Ls[li];
            std::optional<InterventionPlan> plan;
            if (method == Method::sv_dnc_agg) {
                plan = InterventionPlan::from(*method_state_vector(m, method, ep, s, L), L);
            } else if (full) {
                plan = InterventionPlan::from(*full, L);
            }
            const InterventionPlan* pp = plan ? &*plan : nullptr;
            dev[cell * nL + li] = score_queries(m, ep.dev, pp, eff_mode, demos, false);
            test[cell * nL + li] = score_queries(m, ep.test, pp, eff_mode, demos, s.timing);
        }
    });
    r.dev_acc.assign(nL, std::vector<double>(nS));
    r.test_acc.assign(nL, std::vector<double>(nS));
    r.time_ms.assign(nL, std::vector<double>(nS));
    r.test_queries.assign(nS, 0);
    for (std::size_t li = 0; li < nL; ++li) {
        for (std::size_t si = 0; si < nS; ++si) {
            QueryScore d, t;
            for (std::size_t e = 0; e < nE; ++e) {
                const auto& dc = dev[(si * nE + e) * nL + li];
                const auto& tc = test[(si * nE + e) * nL + li];
                d.correct += dc.correct;
                d.total += dc.total;
                t.correct += tc.correct;
                t.total += tc.total;
                t.seconds += tc.seconds;
            }
            r.dev_acc[li][si] = d.accuracy();
            r.test_acc[li][si] = t.accuracy();
            r.time_ms[li][si] = t.total ? 1000.0 * t.seconds / static_cast<double>(t.total) : 0.0;
            r.test_queries[si] = t.total;
        }
    }
    return r;
}

// Index of the best mean dev accuracy; ties go to the smallest L.
inline std::size_t best_layer_index(const LayerSweep& sweep) {
    std::size_t best = 0;
    for (std::size_t li = 1; li < sweep.layers.size(); ++li) {
        const bool better = sweep.mean_dev(li) > sweep.mean_dev(best) ||
                            (sweep.mean_dev(li) == sweep.mean_dev(best) && sweep.layers[li] < sweep.layers[best]);
        if (better) best = li;
    }
    return best;
}

inline std::size_t select_layer(const LoadedModel& m, const TaskFamily& family, Method method,
                                const std::vector<std::size_t>& candidate_Ls, const EvalSettings& s,
                                Mode mode = Mode::zero_shot) {
    if (candidate_Ls.size() == 1) return candidate_Ls.front();
    const auto sweep = sweep_layers(m, family, method, mode, s, candidate_Ls);
    return sweep.layers[best_layer_index(sweep)];
}

struct EvalReport {
    std::string method;
    std::string family;
    Mode mode = Mode::zero_shot;
    double accuracy = 0.0;
    double std = 0.0;
    std::size_t n_queries = 0;
    std::size_t selected_L = 0;
    double time_ms = 0.0;  // mean wall time per query; 0 when timing is off
    bool timed = false;
    std::vector<std::uint64_t> seeds;
    std::vector<double> per_seed;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["method"] = method;
        j["family"] = family;
        j["mode"] = to_string(mode);
        j["accuracy"] = accuracy;
        j["std"] = std;
        j["n_queries"] = n_queries;
        j["selected_L"] = selected_L;
        j["time_ms"] = timed ? nlohmann::json(time_ms) : nlohmann::json(nullptr);
        j["seeds"] = seeds;
        j["per_seed"] = per_seed;
        return j;
    }
};

inline EvalReport report_at(const LayerSweep& sweep, std::size_t li, const EvalSettings& s) {
    EvalReport r;
    r.method = to_string(sweep.method);
    r.family = sweep.family;
    r.mode = sweep.method == Method::icl ? Mode::few_shot : sweep.mode;
    r.selected_L = sweep.layers[li];
    r.per_seed = sweep.test_acc[li];
    r.accuracy = mean_of(r.per_seed);
    r.std = stddev_of(r.per_seed);
    r.seeds = s.seeds;
    for (auto n : sweep.test_queries) r.n_queries += n;
    r.timed = s.timing;
    r.time_ms = s.timing ? mean_of(sweep.time_ms[li]) : 0.0;
    return r;
}

// Dev-selected L, then test accuracy (mean and std over seeds) at that L.
inline EvalReport evaluate_method(const LoadedModel& m, const TaskFamily& family, Method method, Mode mode,
                                  const EvalSettings& s, const std::vector<std::size_t>& candidate_Ls) {
    const auto sweep = sweep_layers(m, family, method, mode, s, candidate_Ls);
    return report_at(sweep, best_layer_index(sweep), s);
}

inline void write_results_header(std::ostream& os) { os << "method,family,mode,L,seed,acc,std,time_ms\n"; }

// One row per seed (std left empty) followed by an "all" row with the mean
// and standard deviation over seeds. time_ms is "NA" when timing is off.
inline void write_results_rows(std::ostream& os, const EvalReport& r) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    const std::string t = r.timed ? fmt(r.time_ms) : "NA";
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
        os << r.method << ',' << r.family << ',' << to_string(r.mode) << ',' << r.selected_L << ',' << r.seeds[i] << ','
           << fmt(r.per_seed[i]) << ",," << t << '\n';
    }
    os << r.method << ',' << r.family << ',' << to_string(r.mode) << ',' << r.selected_L << ",all," << fmt(r.accuracy)
       << ',' << fmt(r.std) << ',' << t << '\n';
}

}  // namespace svlab
