#pragma once

// State vectors: per-layer attention activations (pre output projection) at a
// separator position, covering layers 1..L.
//
//   extract_all       V_i at separator i+1 of an N-shot prompt, i = 1..N
//   inner_optimize    mean of the last K state vectors
//   influences        E_i = V_i - V_{i-1}, i = 2..N
//   momentum_optimize V_bar + m_last, m_i = beta m_{i-1} + (1 - beta) E_i
//   ablate_optimize   same stream through Adagrad / RMSprop / Adam
//   average_aggregate / dnc_aggregate  combine group state vectors

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "svlab/model.hpp"
#include "svlab/tasks.hpp"
#include "svlab/util/binary_io.hpp"

namespace svlab {

struct StateVectorMeta {
    std::string family;
    std::string method = "plain";
    std::size_t n_examples_seen = 0;
    std::size_t separator_index = 0;  // 1-based separator the vector was tapped at
    std::size_t inner_k = 0;
    std::uint64_t checkpoint_hash = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const StateVectorMeta&, const StateVectorMeta&) = default;
};

struct StateVector {
    std::vector<std::vector<double>> vectors;  // vectors[l-1] is layer l
    StateVectorMeta meta;

    std::size_t L() const noexcept { return vectors.size(); }
    std::size_t dim() const noexcept { return vectors.empty() ? 0 : vectors.front().size(); }

    // First `layers` layers of this vector.
    StateVector truncated(std::size_t layers) const {
        if (layers > L()) throw std::invalid_argument("state vector has only " + std::to_string(L()) + " layers");
        StateVector out{{vectors.begin(), vectors.begin() + static_cast<std::ptrdiff_t>(layers)}, meta};
        return out;
    }

    std::vector<double> flattened() const {
        std::vector<double> out;
        out.reserve(L() * dim());
        for (const auto& v : vectors) out.insert(out.end(), v.begin(), v.end());
        return out;
    }

    friend bool operator==(const StateVector&, const StateVector&) = default;
};

struct InfluenceSequence {
    std::vector<std::vector<std::vector<double>>> items;  // items[j] is E_{j+2}
};

enum class OptAlgorithm { momentum, adagrad, rmsprop, adam };

inline std::string to_string(OptAlgorithm a) {
    switch (a) {
        case OptAlgorithm::momentum: return "momentum";
        case OptAlgorithm::adagrad: return "adagrad";
        case OptAlgorithm::rmsprop: return "rmsprop";
        case OptAlgorithm::adam: return "adam";
    }
    return "?";
}

inline OptAlgorithm opt_algorithm_from_string(const std::string& s) {
    for (auto a : {OptAlgorithm::momentum, OptAlgorithm::adagrad, OptAlgorithm::rmsprop, OptAlgorithm::adam})
        if (to_string(a) == s) return a;
    throw std::invalid_argument("unknown optimizer '" + s + "'");
}

struct OptConfig {
    OptAlgorithm algorithm = OptAlgorithm::momentum;
    double beta = 0.5;  // momentum retention
    double lr = 0.01;
    double eps = 1e-8;
    double beta1 = 0.9;      // adam first moment
    double beta2 = 0.999;    // adam second moment
    double rms_decay = 0.9;  // rmsprop

    void validate() const {
        if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("opt config: beta must be in [0, 1)");
        if (algorithm != OptAlgorithm::momentum && !(lr > 0.0)) throw std::invalid_argument("opt config: lr must be > 0");
    }
};

namespace detail {

inline void require_compatible(const StateVector& a, const StateVector& b, const char* op) {
    if (a.L() != b.L() || a.dim() != b.dim()) {
        throw DimensionError(std::string(op) + ": state vector shapes differ (" + std::to_string(a.L()) + "x" +
                             std::to_string(a.dim()) + " vs " + std::to_string(b.L()) + "x" +
                             std::to_string(b.dim()) + ")");
    }
}

// Elementwise mean of svs[first..], summed in ascending order.
inline StateVector mean_of(const std::vector<StateVector>& svs, std::size_t first) {
    StateVector out;
    out.meta = svs.back().meta;
    out.vectors.assign(svs[first].L(), std::vector<double>(svs[first].dim(), 0.0));
    for (std::size_t i = first; i < svs.size(); ++i) {
        for (std::size_t l = 0; l < out.L(); ++l)
            for (std::size_t j = 0; j < out.dim(); ++j) out.vectors[l][j] += svs[i].vectors[l][j];
    }
    const auto n = static_cast<double>(svs.size() - first);
    for (auto& v : out.vectors)
        for (auto& x : v) x /= n;
    return out;
}

inline void check_layers(const LoadedModel& m, std::size_t L) {
    if (L < 1 || L > m.config().n_layers) {
        throw std::invalid_argument("L = " + std::to_string(L) + " outside 1.." + std::to_string(m.config().n_layers));
    }
}

inline std::set<std::size_t> first_layers(std::size_t L) {
    std::set<std::size_t> s;
    for (std::size_t l = 1; l <= L; ++l) s.insert(l);
    return s;
}

inline StateVector collect(const ForwardOutput& out, std::size_t L, std::size_t position) {
    StateVector sv;
    for (std::size_t l = 1; l <= L; ++l) sv.vectors.push_back(out.tap(l, position));
    return sv;
}

}  // namespace detail

// State vector at the final separator of a prompt (the plain state vector;
// for a zero-shot prompt this is the activation with no demonstrations).
inline StateVector extract_final(const LoadedModel& m, const EpisodePrompt& prompt, std::size_t L) {
    detail::check_layers(m, L);
    const std::size_t pos = prompt.final_separator();
    const auto out = m.model.forward(prompt.tokens, TapSpec{detail::first_layers(L), {pos}});
    StateVector sv = detail::collect(out, L, pos);
    sv.meta.n_examples_seen = prompt.n_examples;
    sv.meta.separator_index = prompt.separator_positions.size();
    sv.meta.checkpoint_hash = m.hash;
    return sv;
}

// V_1..V_N from a single forward pass; V_i sits at separator i+1 and has seen
// the first i examples plus the query that follows them.
inline std::vector<StateVector> extract_all(const LoadedModel& m, const EpisodePrompt& prompt, std::size_t L) {
    detail::check_layers(m, L);
    const std::size_t N = prompt.n_examples;
    if (prompt.separator_positions.size() != N + 1) throw std::invalid_argument("extract_all: prompt needs N+1 separators");
    if (N == 0) return {};
    std::vector<std::size_t> positions(prompt.separator_positions.begin() + 1, prompt.separator_positions.end());
    const auto out = m.model.forward(prompt.tokens, TapSpec{detail::first_layers(L), positions});
    std::vector<StateVector> svs;
    svs.reserve(N);
    for (std::size_t i = 1; i <= N; ++i) {
        StateVector sv = detail::collect(out, L, prompt.separator_positions[i]);
        sv.meta.n_examples_seen = i;
        sv.meta.separator_index = i + 1;
        sv.meta.checkpoint_hash = m.hash;
        svs.push_back(std::move(sv));
    }
    return svs;
}

inline StateVector inner_optimize(const std::vector<StateVector>& svs, std::size_t K) {
    if (K < 1 || K > svs.size()) {
        throw std::invalid_argument("inner_optimize: K = " + std::to_string(K) + " outside 1.." + std::to_string(svs.size()));
    }
    for (const auto& sv : svs) detail::require_compatible(sv, svs.front(), "inner_optimize");
    StateVector out = detail::mean_of(svs, svs.size() - K);
    out.meta.method = "inner";
    out.meta.inner_k = K;
    return out;
}

inline InfluenceSequence influences(const std::vector<StateVector>& svs) {
    if (svs.size() < 2) throw std::invalid_argument("influences: need at least two state vectors");
    InfluenceSequence seq;
    for (std::size_t i = 1; i < svs.size(); ++i) {
        detail::require_compatible(svs[i], svs[i - 1], "influences");
        std::vector<std::vector<double>> e(svs[i].L());
        for (std::size_t l = 0; l < e.size(); ++l) {
            e[l].resize(svs[i].dim());
            for (std::size_t j = 0; j < e[l].size(); ++j) e[l][j] = svs[i].vectors[l][j] - svs[i - 1].vectors[l][j];
        }
        seq.items.push_back(std::move(e));
    }
    return seq;
}

namespace detail {

inline void require_stream(const StateVector& v_bar, const InfluenceSequence& E) {
    if (E.items.empty()) throw std::invalid_argument("optimizer: empty influence sequence");
    for (const auto& e : E.items) {
        if (e.size() != v_bar.L() || (!e.empty() && e.front().size() != v_bar.dim())) {
            throw DimensionError("optimizer: influence shape does not match the state vector");
        }
    }
}

}  // namespace detail

inline StateVector momentum_optimize(const StateVector& v_bar, const InfluenceSequence& E, const OptConfig& cfg) {
    cfg.validate();
    if (cfg.algorithm != OptAlgorithm::momentum) {
        throw std::invalid_argument("momentum_optimize: algorithm must be momentum (use ablate_optimize)");
    }
    detail::require_stream(v_bar, E);
    StateVector out = v_bar;
    for (std::size_t l = 0; l < out.L(); ++l) {
        for (std::size_t j = 0; j < out.dim(); ++j) {
            double m = 0.0;
            for (const auto& e : E.items) m = cfg.beta * m + (1.0 - cfg.beta) * e[l][j];
            out.vectors[l][j] += m;
        }
    }
    out.meta.method = "momentum";
    return out;
}

// Treats -E_i as a gradient stream for a zero-initialized displacement and
// applies the textbook update rule; returns v_bar + displacement.
inline StateVector ablate_optimize(const StateVector& v_bar, const InfluenceSequence& E, const OptConfig& cfg) {
    cfg.validate();
    if (cfg.algorithm == OptAlgorithm::momentum) {
        throw std::invalid_argument("ablate_optimize: expects adagrad, rmsprop or adam");
    }
    detail::require_stream(v_bar, E);
    StateVector out = v_bar;
    for (std::size_t l = 0; l < out.L(); ++l) {
        for (std::size_t j = 0; j < out.dim(); ++j) {
            double theta = 0.0, s = 0.0, m = 0.0;
            std::size_t t = 0;
            for (const auto& e : E.items) {
                const double g = -e[l][j];
                ++t;
                switch (cfg.algorithm) {
                    case OptAlgorithm::adagrad:
                        s += g * g;
                        theta -= cfg.lr * g / (std::sqrt(s) + cfg.eps);
                        break;
                    case OptAlgorithm::rmsprop:
                        s = cfg.rms_decay * s + (1.0 - cfg.rms_decay) * g * g;
                        theta -= cfg.lr * g / (std::sqrt(s) + cfg.eps);
                        break;
                    case OptAlgorithm::adam: {
                        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                        s = cfg.beta2 * s + (1.0 - cfg.beta2) * g * g;
                        const double mh = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
                        const double vh = s / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
                        theta -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
                        break;
                    }
                    case OptAlgorithm::momentum: break;
                }
            }
            out.vectors[l][j] += theta;
        }
    }
    out.meta.method = to_string(cfg.algorithm);
    return out;
}

inline StateVector average_aggregate(const std::vector<StateVector>& gsvs) {
    if (gsvs.empty()) throw std::invalid_argument("average_aggregate: no group state vectors");
    for (const auto& g : gsvs) detail::require_compatible(g, gsvs.front(), "average_aggregate");
    StateVector out = detail::mean_of(gsvs, 0);
    out.meta.method = "avg_agg";
    return out;
}

struct DncResult {
    StateVector aggregated;
    std::vector<StateVector> group_vectors;
    std::vector<Example> conquer_demonstrations;  // (dummy_g, label_g) pairs
};

// Divide: one group state vector per group, tapped at the final separator of
// prompt(group, dummy_g). Conquer: prompt over the labeled dummies plus the
// final dummy, with the separator of example g patched by GSV_g at layers
// 1..L; the aggregated vector is tapped at the final separator.
// Without patching, the conquer prompt holds the groups' own examples in
// place of the dummy pairs, so a single group reduces to plain extraction
// from (group, final_dummy).
inline DncResult dnc_aggregate(const LoadedModel& m, const std::vector<std::vector<Example>>& groups,
                               const std::vector<Example>& group_dummies, const Example& final_dummy, std::size_t L,
                               bool patch_conquer = true) {
    detail::check_layers(m, L);
    if (groups.empty()) throw std::invalid_argument("dnc_aggregate: no groups");
    if (group_dummies.size() != groups.size()) {
        throw std::invalid_argument("dnc_aggregate: one labeled dummy per group required (got " +
                                    std::to_string(group_dummies.size()) + " for " + std::to_string(groups.size()) +
                                    " groups)");
    }
    const auto max_seq = m.config().max_seq;
    DncResult r;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) throw std::invalid_argument("dnc_aggregate: empty group");
        StateVector gsv = extract_final(m, build_prompt(groups[g], group_dummies[g], max_seq), L);
        gsv.meta.method = "gsv";
        r.group_vectors.push_back(std::move(gsv));
        r.conquer_demonstrations.push_back(group_dummies[g]);
    }
    for (const auto& g : r.group_vectors) detail::require_compatible(g, r.group_vectors.front(), "dnc_aggregate");

    std::vector<Example> expanded;
    if (!patch_conquer)
        for (const auto& g : groups) expanded.insert(expanded.end(), g.begin(), g.end());
    const auto prompt = build_prompt(patch_conquer ? r.conquer_demonstrations : expanded, final_dummy, max_seq);
    std::vector<PatchSpec> patches;
    if (patch_conquer) {
        for (std::size_t g = 0; g < groups.size(); ++g) {
            PatchSpec ps;
            ps.position = prompt.separator_positions[g];
            for (std::size_t l = 1; l <= L; ++l) ps.vectors[l] = r.group_vectors[g].vectors[l - 1];
            patches.push_back(std::move(ps));
        }
    }
    const std::size_t pos = prompt.final_separator();
    const auto out = m.model.forward(prompt.tokens, TapSpec{detail::first_layers(L), {pos}}, patches);
    r.aggregated = detail::collect(out, L, pos);
    r.aggregated.meta.method = "dnc_agg";
    r.aggregated.meta.n_examples_seen = 0;
    for (const auto& g : groups) r.aggregated.meta.n_examples_seen += g.size();
    r.aggregated.meta.separator_index = prompt.separator_positions.size();
    r.aggregated.meta.checkpoint_hash = m.hash;
    return r;
}

// ---------------------------------------------------------------------------
// File format: "SVEC" | u32 version | u64 checkpoint hash | u32 L | u32 dim |
// meta (str family, str method, u32 n_examples_seen, u32 separator_index,
// u32 inner_k, u64 seed) | L*dim f64 | u64 FNV-1a of all preceding bytes.
// Strings are u32 length + bytes; integers and floats little-endian.

inline constexpr std::uint32_t kStateVectorVersion = 1;

class StateVectorMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string serialize(const StateVector& sv) {
    for (const auto& v : sv.vectors)
        if (v.size() != sv.dim()) throw DimensionError("state vector layers have unequal widths");
    ByteWriter w;
    w.bytes("SVEC");
    w.u32(kStateVectorVersion);
    w.u64(sv.meta.checkpoint_hash);
    w.u32(static_cast<std::uint32_t>(sv.L()));
    w.u32(static_cast<std::uint32_t>(sv.dim()));
    w.str(sv.meta.family);
    w.str(sv.meta.method);
    w.u32(static_cast<std::uint32_t>(sv.meta.n_examples_seen));
    w.u32(static_cast<std::uint32_t>(sv.meta.separator_index));
    w.u32(static_cast<std::uint32_t>(sv.meta.inner_k));
    w.u64(sv.meta.seed);
    for (const auto& v : sv.vectors)
        for (double x : v) w.f64(x);
    w.seal();
    return w.buffer();
}

inline StateVector deserialize_state_vector(std::string_view bytes) {
    ByteReader r(bytes, "state vector");
    if (bytes.size() < 4 || bytes.substr(0, 4) != "SVEC") throw FormatError("state vector: bad magic");
    r.verify_seal();
    r.bytes(4);
    if (const auto v = r.u32(); v != kStateVectorVersion) {
        throw FormatError("state vector: unsupported version " + std::to_string(v));
    }
    StateVector sv;
    sv.meta.checkpoint_hash = r.u64();
    const std::size_t L = r.u32();
    const std::size_t dim = r.u32();
    sv.meta.family = r.str();
    sv.meta.method = r.str();
    sv.meta.n_examples_seen = r.u32();
    sv.meta.separator_index = r.u32();
    sv.meta.inner_k = r.u32();
    sv.meta.seed = r.u64();
    sv.vectors.assign(L, std::vector<double>(dim));
    for (auto& v : sv.vectors)
        for (auto& x : v) x = r.f64();
    r.expect_end();
    return sv;
}

inline void save_state_vector(const StateVector& sv, const std::filesystem::path& path) {
    write_file(path, serialize(sv));
}

// Loads a state vector and checks it belongs to `expected_hash`; a mismatch is
// refused unless `force` is set.
inline StateVector load_state_vector(const std::filesystem::path& path, std::uint64_t expected_hash,
                                     bool force = false) {
    StateVector sv = deserialize_state_vector(read_file(path));
    if (!force && sv.meta.checkpoint_hash != expected_hash) {
        throw StateVectorMismatch("state vector " + path.string() + " was extracted from checkpoint " +
                                  std::to_string(sv.meta.checkpoint_hash) + ", not " + std::to_string(expected_hash));
    }
    return sv;
}

}  // namespace svlab
