#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>

#include "svlab/model.hpp"
#include "svlab/tasks.hpp"

namespace svlab::fixtures {

// Small untrained model with the full vocabulary layout.
inline ModelConfig small_config(AttentionKind kind = AttentionKind::softmax) {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.vocab_size = vocab::min_vocab_size;
    c.max_seq = 40;
    c.attention_kind = kind;
    return c;
}

inline Checkpoint small_checkpoint(std::uint64_t seed = 1, AttentionKind kind = AttentionKind::softmax) {
    Checkpoint ck;
    ck.config = small_config(kind);
    ck.weights = init_weights(ck.config, seed);
    // larger weights so activations vary visibly across positions
    ck.weights.for_each([](Tensor& t) {
        for (auto& v : t.data()) v *= 10.0;
    });
    ck.meta.seed = seed;
    return ck;
}

inline LoadedModel small_model(std::uint64_t seed = 1) { return LoadedModel::from(small_checkpoint(seed)); }

// The acceptance suite's cached reference checkpoint, if it exists.
inline std::optional<std::filesystem::path> reference_checkpoint() {
    if (const char* env = std::getenv("SVLAB_REFERENCE_CHECKPOINT")) {
        if (std::filesystem::exists(env)) return std::filesystem::path(env);
    }
#ifdef SVLAB_REFERENCE_DIR
    const auto p = std::filesystem::path(SVLAB_REFERENCE_DIR) / "checkpoint.bin";
    if (std::filesystem::exists(p)) return p;
#endif
    return std::nullopt;
}

}  // namespace svlab::fixtures
