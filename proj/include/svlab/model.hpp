#pragma once

// Decoder-only causal transformer with activation taps and patches.
//
// Block layout (pre-norm):
//   h   = LN1(x)
//   cat = concat_heads(attn(h Wq, h Wk, h Wv))      <- tap / patch point
//   x   = x + cat Wo + bo
//   x   = x + W2 gelu(W1 LN2(x) + b1) + b2
// Logits come from LNf(x) Wu + bu. Layers are numbered 1..n_layers.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "svlab/numerics/autodiff.hpp"
#include "svlab/numerics/tensor.hpp"
#include "svlab/util/binary_io.hpp"
#include "svlab/util/rng.hpp"

namespace svlab {

using Token = std::uint32_t;
using ad::AttentionKind;

inline std::string to_string(AttentionKind k) {
    return k == AttentionKind::softmax ? "softmax" : "relaxed_linear";
}

inline AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "softmax") return AttentionKind::softmax;
    if (s == "relaxed_linear") return AttentionKind::relaxed_linear;
    throw std::invalid_argument("unknown attention kind '" + s + "'");
}

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 512;
    std::size_t max_seq = 40;
    AttentionKind attention_kind = AttentionKind::softmax;

    std::size_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_seq == 0) {
            throw std::invalid_argument("model config: all sizes must be positive");
        }
        if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must equal n_heads * d_head");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv;  // [d_model x d_model], columns grouped by head
    Tensor wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
    Tensor token_embedding;     // [vocab x d_model]
    Tensor position_embedding;  // [max_seq x d_model]
    std::vector<LayerWeights> layers;
    Tensor lnf_gain, lnf_bias;
    Tensor unembed, unembed_bias;  // [d_model x vocab], [vocab]

    // Visits every tensor in the canonical serialization order.
    template <class W, class F>
    static void visit(W& w, F&& f) {
        f(w.token_embedding);
        f(w.position_embedding);
        for (auto& l : w.layers) {
            f(l.ln1_gain);
            f(l.ln1_bias);
            f(l.wq);
            f(l.wk);
            f(l.wv);
            f(l.wo);
            f(l.bo);
            f(l.ln2_gain);
            f(l.ln2_bias);
            f(l.w1);
            f(l.b1);
            f(l.w2);
            f(l.b2);
        }
        f(w.lnf_gain);
        f(w.lnf_bias);
        f(w.unembed);
        f(w.unembed_bias);
    }

    template <class F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <class F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const Tensor& t) { n += t.size(); });
        return n;
    }

    friend bool operator==(const Weights&, const Weights&) = default;
};

inline Weights zero_weights(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    Weights w;
    w.token_embedding = Tensor({c.vocab_size, d});
    w.position_embedding = Tensor({c.max_seq, d});
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
        l.ln1_gain = Tensor({d}, 1.0);
        l.ln1_bias = Tensor({d});
        l.wq = Tensor({d, d});
        l.wk = Tensor({d, d});
        l.wv = Tensor({d, d});
        l.wo = Tensor({d, d});
        l.bo = Tensor({d});
        l.ln2_gain = Tensor({d}, 1.0);
        l.ln2_bias = Tensor({d});
        l.w1 = Tensor({d, c.d_ff});
        l.b1 = Tensor({c.d_ff});
        l.w2 = Tensor({c.d_ff, d});
        l.b2 = Tensor({d});
    }
    w.lnf_gain = Tensor({d}, 1.0);
    w.lnf_bias = Tensor({d});
    w.unembed = Tensor({d, c.vocab_size});
    w.unembed_bias = Tensor({c.vocab_size});
    return w;
}

// Gaussian init (std 0.02, residual-output projections scaled by
// 1/sqrt(2 n_layers)); gains 1, biases 0.
inline Weights init_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Weights w = zero_weights(c);
    Rng rng(derive_seed(seed, "init"));
    const double std0 = 0.02;
    const double std_res = std0 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
    auto fill = [&](Tensor& t, double sd) {
        for (auto& v : t.data()) v = sd * rng.normal();
    };
    fill(w.token_embedding, std0);
    fill(w.position_embedding, std0);
    for (auto& l : w.layers) {
        fill(l.wq, std0);
        fill(l.wk, std0);
        fill(l.wv, std0);
        fill(l.wo, std_res);
        fill(l.w1, std0);
        fill(l.w2, std_res);
    }
    fill(w.unembed, std0);
    return w;
}

struct TrainingMeta {
    std::uint64_t steps = 0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;  // hash of the training configuration text
    double final_loss = 0.0;

    friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

struct Checkpoint {
    ModelConfig config;
    Weights weights;
    TrainingMeta meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "SVLB" | u32 version | config (u32 x 7: n_layers, n_heads, d_model,
// d_ff, vocab_size, max_seq, attention_kind) | meta (u64 steps, u64 seed,
// u64 config_hash, f64 final_loss) | u64 parameter count | weights as f64 in
// Weights::visit order | u64 FNV-1a of all preceding bytes.
inline std::string serialize(const Checkpoint& ck, std::uint64_t* hash_out = nullptr) {
    ByteWriter w;
    w.bytes("SVLB");
    w.u32(kCheckpointVersion);
    const auto& c = ck.config;
    for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq}) {
        w.u32(static_cast<std::uint32_t>(v));
    }
    w.u32(c.attention_kind == AttentionKind::softmax ? 0u : 1u);
    w.u64(ck.meta.steps);
    w.u64(ck.meta.seed);
    w.u64(ck.meta.config_hash);
    w.f64(ck.meta.final_loss);
    w.u64(ck.weights.parameter_count());
    ck.weights.for_each([&](const Tensor& t) {
        for (double v : t.data()) w.f64(v);
    });
    const auto h = w.seal();
    if (hash_out) *hash_out = h;
    return w.buffer();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes, std::uint64_t* hash_out = nullptr) {
    ByteReader r(bytes, "checkpoint");
    if (bytes.size() < 4 || bytes.substr(0, 4) != "SVLB") throw FormatError("checkpoint: bad magic");
    const auto h = r.verify_seal();
    r.bytes(4);
    if (const auto v = r.u32(); v != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(v));
    }
    Checkpoint ck;
    auto& c = ck.config;
    c.n_layers = r.u32();
    c.n_heads = r.u32();
    c.d_model = r.u32();
    c.d_ff = r.u32();
    c.vocab_size = r.u32();
    c.max_seq = r.u32();
    const auto kind = r.u32();
    if (kind > 1) throw FormatError("checkpoint: bad attention kind");
    c.attention_kind = kind == 0 ? AttentionKind::softmax : AttentionKind::relaxed_linear;
    c.validate();
    ck.meta.steps = r.u64();
    ck.meta.seed = r.u64();
    ck.meta.config_hash = r.u64();
    ck.meta.final_loss = r.f64();
    ck.weights = zero_weights(c);
    if (r.u64() != ck.weights.parameter_count()) throw FormatError("checkpoint: parameter count mismatch");
    ck.weights.for_each([&](Tensor& t) {
        for (auto& v : t.data()) v = r.f64();
    });
    r.expect_end();
    if (hash_out) *hash_out = h;
    return ck;
}

inline std::uint64_t checkpoint_hash(const Checkpoint& ck) {
    std::uint64_t h = 0;
    serialize(ck, &h);
    return h;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_file(path, serialize(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

// Capture request: the pre-projection head concatenation at each listed
// (layer, position) pair.
struct TapSpec {
    std::set<std::size_t> layers;       // 1-based
    std::vector<std::size_t> positions;

    bool empty() const { return layers.empty() || positions.empty(); }
};

// Replacement of the pre-projection head concatenation at one position.
struct PatchSpec {
    std::size_t position = 0;
    std::map<std::size_t, std::vector<double>> vectors;  // layer (1-based) -> replacement
};

struct ForwardOutput {
    Tensor logits;  // [seq x vocab]
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> taps;  // (layer, position) -> vector

    const std::vector<double>& tap(std::size_t layer, std::size_t position) const {
        auto it = taps.find({layer, position});
        if (it == taps.end()) {
            throw std::out_of_range("no tap captured at layer " + std::to_string(layer) + ", position " +
                                    std::to_string(position));
        }
        return it->second;
    }
};

namespace detail {

struct LayerVars {
    ad::Var ln1_gain, ln1_bias, wq, wk, wv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2;
};

struct ParamVars {
    ad::Var token_embedding, position_embedding;
    std::vector<LayerVars> layers;
    ad::Var lnf_gain, lnf_bias, unembed, unembed_bias;
    std::vector<ad::Var> ordered;  // Weights::visit order
};

inline ParamVars bind(ad::Tape& tape, const Weights& w, bool trainable) {
    ParamVars p;
    auto b = [&](const Tensor& t) {
        p.ordered.push_back(tape.borrow(t, trainable));
        return p.ordered.back();
    };
    p.token_embedding = b(w.token_embedding);
    p.position_embedding = b(w.position_embedding);
    for (const auto& l : w.layers) {
        p.layers.push_back({b(l.ln1_gain), b(l.ln1_bias), b(l.wq), b(l.wk), b(l.wv), b(l.wo), b(l.bo), b(l.ln2_gain),
                            b(l.ln2_bias), b(l.w1), b(l.b1), b(l.w2), b(l.b2)});
    }
    p.lnf_gain = b(w.lnf_gain);
    p.lnf_bias = b(w.lnf_bias);
    p.unembed = b(w.unembed);
    p.unembed_bias = b(w.unembed_bias);
    return p;
}

// Hook invoked on each layer's head concatenation; may return a replacement.
using ConcatHook = std::function<ad::Var(std::size_t layer, ad::Var concat)>;

// Runs the residual stream for `batch` sequences of equal length laid out
// back to back in `tokens`; returns the final residual stream (pre-LNf).
inline ad::Var residual_stream(const ModelConfig& c, const ParamVars& p,
                               std::span<const Token> tokens, std::size_t batch, const ConcatHook& hook) {
    const std::size_t T = tokens.size() / batch;
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % T;
    ad::Var x = ad::add(ad::embedding(p.token_embedding, std::move(ids)), ad::embedding(p.position_embedding, std::move(pos)));
    const ad::AttentionShape as{batch, T, c.n_heads};
    for (std::size_t li = 0; li < c.n_layers; ++li) {
        const auto& L = p.layers[li];
        const ad::Var h = ad::layer_norm(x, L.ln1_gain, L.ln1_bias);
        ad::Var cat = ad::causal_attention(ad::matmul(h, L.wq), ad::matmul(h, L.wk), ad::matmul(h, L.wv), as,
                                           c.attention_kind);
        if (hook) cat = hook(li + 1, cat);
        x = ad::add(x, ad::add_row(ad::matmul(cat, L.wo), L.bo));
        const ad::Var h2 = ad::layer_norm(x, L.ln2_gain, L.ln2_bias);
        const ad::Var ff = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(h2, L.w1), L.b1)), L.w2), L.b2);
        x = ad::add(x, ff);
    }
    return x;
}

inline ad::Var logits_from(const ParamVars& p, ad::Var x) {
    return ad::add_row(ad::matmul(ad::layer_norm(x, p.lnf_gain, p.lnf_bias), p.unembed), p.unembed_bias);
}

}  // namespace detail

class Model {
public:
    Model(ModelConfig config, Weights weights) : config_(config), weights_(std::move(weights)) { config_.validate(); }

    const ModelConfig& config() const noexcept { return config_; }
    const Weights& weights() const noexcept { return weights_; }
    std::size_t activation_width() const noexcept { return config_.d_model; }

    // Inference forward pass over one token sequence.
    //
    // Taps record the head concatenation (before Wo) at every requested
    // (layer, position). A patch replaces that concatenation at its position
    // before Wo and the residual add; later layers see the patched stream.
    // Patches are applied before taps are read, so a tap at a patched site
    // returns the replacement.
    ForwardOutput forward(std::span<const Token> tokens, const TapSpec& taps = {},
                          std::span<const PatchSpec> patches = {}) const {
        const std::size_t T = tokens.size();
        if (T == 0) throw std::invalid_argument("forward: empty token sequence");
        if (T > config_.max_seq) {
            throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds max_seq " +
                                        std::to_string(config_.max_seq));
        }
        for (std::size_t i = 0; i < T; ++i) {
            if (tokens[i] >= config_.vocab_size) {
                throw std::invalid_argument("forward: token id " + std::to_string(tokens[i]) + " at position " +
                                            std::to_string(i) + " out of range");
            }
        }
        for (std::size_t l : taps.layers) check_layer(l, "tap");
        for (std::size_t p : taps.positions) check_position(p, T, "tap");
        for (const auto& ps : patches) {
            check_position(ps.position, T, "patch");
            for (const auto& [l, v] : ps.vectors) {
                check_layer(l, "patch");
                if (v.size() != activation_width()) {
                    throw std::invalid_argument("patch vector length " + std::to_string(v.size()) + " at layer " +
                                                std::to_string(l) + " != n_heads*d_head = " +
                                                std::to_string(activation_width()));
                }
            }
        }

        ad::Tape tape(false);
        const auto p = detail::bind(tape, weights_, false);
        ForwardOutput out;
        const detail::ConcatHook hook = [&](std::size_t layer, ad::Var cat) {
            for (const auto& ps : patches) {
                auto it = ps.vectors.find(layer);
                if (it == ps.vectors.end()) continue;
                cat = ad::replace_row(cat, ps.position, tape.constant(Tensor::vector(it->second)));
            }
            if (taps.layers.contains(layer)) {
                for (std::size_t pos : taps.positions) {
                    const auto r = cat.value().row(pos);
                    out.taps[{layer, pos}] = std::vector<double>(r.begin(), r.end());
                }
            }
            return cat;
        };
        const ad::Var x = detail::residual_stream(config_, p, tokens, 1, hook);
        out.logits = detail::logits_from(p, x).value();
        return out;
    }

private:
    void check_layer(std::size_t l, const char* what) const {
        if (l < 1 || l > config_.n_layers) {
            throw std::invalid_argument(std::string(what) + " layer " + std::to_string(l) + " outside 1.." +
                                        std::to_string(config_.n_layers));
        }
    }
    static void check_position(std::size_t p, std::size_t T, const char* what) {
        if (p >= T) {
            throw std::invalid_argument(std::string(what) + " position " + std::to_string(p) +
                                        " >= sequence length " + std::to_string(T));
        }
    }

    ModelConfig config_;
    Weights weights_;
};

inline Model make_model(const Checkpoint& ck) { return Model(ck.config, ck.weights); }

// A model together with the hash of the checkpoint it came from; state
// vectors are bound to that hash.
struct LoadedModel {
    Model model;
    std::uint64_t hash = 0;

    static LoadedModel from(const Checkpoint& ck) { return {make_model(ck), checkpoint_hash(ck)}; }

    const ModelConfig& config() const noexcept { return model.config(); }
};

// Argmax of one logits row; ties go to the lowest token id.
inline Token logits_to_first_token(const Tensor& logits, std::size_t position) {
    if (position >= logits.rows()) throw std::out_of_range("logits_to_first_token: position out of range");
    const auto r = logits.row(position);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
        if (r[j] > r[best]) best = j;
    return static_cast<Token>(best);
}

// Single attention head evaluated on explicit matrices.
//   w_k: [dk x d], w_v: [dv x d], context: [d x n] (one column per position),
//   query: length dk.
// softmax:        W_V C softmax((W_K C)^T q / sqrt(dk))
// relaxed_linear: W_V C (W_K C)^T q
inline std::vector<double> attention_head(const Tensor& w_k, const Tensor& w_v, const Tensor& context,
                                          std::span<const double> query, AttentionKind kind) {
    if (w_k.rank() != 2 || w_v.rank() != 2 || context.rank() != 2) {
        throw DimensionError("attention_head: W_K, W_V and context must be matrices");
    }
    const std::size_t d = context.rows();
    if (w_k.cols() != d || w_v.cols() != d || w_k.rows() != query.size()) {
        throw DimensionError("attention_head: inconsistent shapes W_K " + shape_str(w_k.shape()) + ", W_V " +
                             shape_str(w_v.shape()) + ", context " + shape_str(context.shape()) + ", q[" +
                             std::to_string(query.size()) + "]");
    }
    const std::size_t n = context.cols();
    const Tensor keys = matmul(w_k, context);    // [dk x n]
    const Tensor values = matmul(w_v, context);  // [dv x n]
    std::vector<double> scores(n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < query.size(); ++i) acc += keys(i, s) * query[i];
        scores[s] = acc;
    }
    if (kind == AttentionKind::softmax) {
        if (n == 0) throw DimensionError("attention_head: softmax over an empty context");
        const double sc = 1.0 / std::sqrt(static_cast<double>(query.size()));
        for (auto& v : scores) v *= sc;
        kernels::softmax_inplace(scores.data(), n);
    }
    std::vector<double> out(w_v.rows(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double acc = 0.0;
        for (std::size_t s = 0; s < n; ++s) acc += values(i, s) * scores[s];
        out[i] = acc;
    }
    return out;
}

}  // namespace svlab
