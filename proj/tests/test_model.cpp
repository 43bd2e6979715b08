#include <gtest/gtest.h>

#include <filesystem>

#include "support/fixtures.hpp"
#include "svlab/model.hpp"
#include "svlab/tasks.hpp"

using namespace svlab;

namespace {

std::vector<Token> sample_tokens(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Token> t(n);
    for (auto& v : t) v = static_cast<Token>(rng.below(vocab::min_vocab_size));
    return t;
}

std::set<std::size_t> all_layers(std::size_t n) {
    std::set<std::size_t> s;
    for (std::size_t l = 1; l <= n; ++l) s.insert(l);
    return s;
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
    ModelConfig c = fixtures::small_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Forward, LogitShape) {
    const auto m = fixtures::small_model();
    const auto out = m.model.forward(sample_tokens(9, 1));
    EXPECT_EQ(out.logits.shape(), (Shape{9, m.config().vocab_size}));
    EXPECT_TRUE(out.taps.empty());
}

TEST(Forward, InputValidation) {
    const auto m = fixtures::small_model();
    const std::vector<Token> bad{1, static_cast<Token>(m.config().vocab_size)};
    EXPECT_THROW(m.model.forward(bad), std::invalid_argument);
    EXPECT_THROW(m.model.forward(sample_tokens(m.config().max_seq + 1, 2)), std::invalid_argument);
    const auto t = sample_tokens(5, 3);
    EXPECT_THROW(m.model.forward(t, TapSpec{{1}, {5}}), std::invalid_argument);
    EXPECT_THROW(m.model.forward(t, TapSpec{{0}, {1}}), std::invalid_argument);
    const std::vector<PatchSpec> short_patch{{2, {{1, std::vector<double>(3, 0.0)}}}};
    EXPECT_THROW(m.model.forward(t, {}, short_patch), std::invalid_argument);
    const std::vector<PatchSpec> far_patch{{7, {{1, std::vector<double>(m.config().d_model, 0.0)}}}};
    EXPECT_THROW(m.model.forward(t, {}, far_patch), std::invalid_argument);
}

TEST(Forward, TapsPresentExactlyForRequestedPairs) {
    const auto m = fixtures::small_model();
    const auto out = m.model.forward(sample_tokens(8, 4), TapSpec{{1, 3}, {2, 7}});
    EXPECT_EQ(out.taps.size(), 4u);
    for (auto l : {1u, 3u})
        for (auto p : {2u, 7u}) EXPECT_EQ(out.tap(l, p).size(), m.config().n_heads * m.config().d_head());
}

TEST(Forward, CausalMaskIsExact) {
    const auto m = fixtures::small_model();
    auto t = sample_tokens(12, 5);
    const auto base = m.model.forward(t).logits;
    t[8] = (t[8] + 1) % vocab::min_vocab_size;
    const auto changed = m.model.forward(t).logits;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < base.cols(); ++j) ASSERT_EQ(base(i, j), changed(i, j));
    bool differs = false;
    for (std::size_t j = 0; j < base.cols(); ++j) differs |= base(8, j) != changed(8, j);
    EXPECT_TRUE(differs);
}

TEST(Forward, SelfPatchIsBitIdentical) {
    const auto m = fixtures::small_model();
    const auto t = sample_tokens(15, 6);
    const std::size_t last = t.size() - 1;
    const auto layers = all_layers(m.config().n_layers);
    const auto base = m.model.forward(t, TapSpec{layers, {last}});
    PatchSpec ps{last, {}};
    for (auto l : layers) ps.vectors[l] = base.tap(l, last);
    const std::vector<PatchSpec> patches{ps};
    EXPECT_EQ(m.model.forward(t, {}, patches).logits, base.logits);
}

TEST(Forward, SelfPatchAnyLayerSubset) {
    const auto m = fixtures::small_model(3);
    const auto t = sample_tokens(11, 7);
    for (const std::set<std::size_t>& subset : {std::set<std::size_t>{2}, std::set<std::size_t>{1, 4}}) {
        const auto base = m.model.forward(t, TapSpec{subset, {5}});
        PatchSpec ps{5, {}};
        for (auto l : subset) ps.vectors[l] = base.tap(l, 5);
        const std::vector<PatchSpec> patches{ps};
        EXPECT_EQ(m.model.forward(t, {}, patches).logits, base.logits);
    }
}

TEST(Forward, PatchLeavesEarlierPositionsAlone) {
    const auto m = fixtures::small_model();
    const auto t = sample_tokens(10, 8);
    const auto base = m.model.forward(t).logits;
    const std::vector<PatchSpec> patches{{6, {{1, std::vector<double>(m.config().d_model, 0.7)}}}};
    const auto patched = m.model.forward(t, {}, patches).logits;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < base.cols(); ++j) ASSERT_EQ(base(i, j), patched(i, j));
    bool differs = false;
    for (std::size_t j = 0; j < base.cols(); ++j) differs |= base(6, j) != patched(6, j);
    EXPECT_TRUE(differs);
}

TEST(Forward, PatchedSiteIsConsumedDownstream) {
    const auto m = fixtures::small_model();
    const auto t = sample_tokens(6, 9);
    const std::vector<double> v(m.config().d_model, -0.25);
    const std::vector<PatchSpec> patches{{5, {{2, v}}}};
    const auto out = m.model.forward(t, TapSpec{{2}, {5}}, patches);
    EXPECT_EQ(out.tap(2, 5), v);
}

TEST(Forward, RelaxedLinearKindRuns) {
    const auto m = LoadedModel::from(fixtures::small_checkpoint(2, AttentionKind::relaxed_linear));
    const auto out = m.model.forward(sample_tokens(7, 10));
    EXPECT_TRUE(out.logits.all_finite());
}

TEST(FirstToken, ArgmaxWithLowestIdTies) {
    EXPECT_EQ(logits_to_first_token(Tensor::matrix({{0.1, 0.9, 0.3}}), 0), 1u);
    EXPECT_EQ(logits_to_first_token(Tensor::matrix({{0.5, 0.5, 0.5}}), 0), 0u);
    EXPECT_EQ(logits_to_first_token(Tensor::matrix({{0.0, 2.0, 2.0}}), 0), 1u);
}

TEST(AttentionHead, HandExpandedRelaxedCase) {
    // W_V = 2, W_K = 3, context [x'=1, x=1], q = 1: (2*3 + 2*3) * 1
    const auto out = attention_head(Tensor::matrix({{3}}), Tensor::matrix({{2}}), Tensor::matrix({{1, 1}}),
                                     std::vector<double>{1.0}, AttentionKind::relaxed_linear);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0], 12.0);
}

TEST(AttentionHead, EmptyContextRelaxedIsZeroShotTerm) {
    Rng rng(3);
    Tensor wk(Shape{3, 3}), wv(Shape{3, 3}), x(Shape{3, 2});
    for (auto* t : {&wk, &wv, &x})
        for (auto& v : t->data()) v = rng.normal();
    const std::vector<double> q{0.3, -1.0, 2.0};
    const auto a = attention_head(wk, wv, x, q, AttentionKind::relaxed_linear);
    const auto w_zsl = matmul(matmul(wv, x), transpose(matmul(wk, x)));
    const auto b = matvec(w_zsl, q);
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
    const auto empty = attention_head(wk, wv, Tensor(Shape{3, 0}), q, AttentionKind::relaxed_linear);
    for (double v : empty) EXPECT_EQ(v, 0.0);
}

TEST(AttentionHead, SoftmaxSingletonReturnsValue) {
    const auto wk = Tensor::matrix({{1, 2}, {3, 4}});
    const auto wv = Tensor::matrix({{0.5, -1}, {2, 0}});
    const auto c = Tensor::matrix({{1.5}, {-0.5}});
    const auto out = attention_head(wk, wv, c, std::vector<double>{0.2, 0.1}, AttentionKind::softmax);
    EXPECT_EQ(out, matvec(wv, std::vector<double>{1.5, -0.5}));
}

TEST(AttentionHead, DimensionMismatch) {
    EXPECT_THROW(attention_head(Tensor(Shape{2, 3}), Tensor(Shape{2, 2}), Tensor(Shape{3, 1}), std::vector<double>{1, 1},
                                AttentionKind::softmax),
                 DimensionError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto ck = fixtures::small_checkpoint(4);
    std::uint64_t h1 = 0, h2 = 0;
    const auto bytes = serialize(ck, &h1);
    const auto back = deserialize_checkpoint(bytes, &h2);
    EXPECT_EQ(h1, h2);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.weights, ck.weights);
    EXPECT_EQ(back.meta, ck.meta);
    EXPECT_EQ(serialize(back), bytes);
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
    const auto dir = std::filesystem::temp_directory_path() / "svlab_test_model";
    std::filesystem::create_directories(dir);
    const auto path = dir / "ck.bin";
    const auto ck = fixtures::small_checkpoint(5);
    save_checkpoint(ck, path);
    EXPECT_EQ(load_checkpoint(path).weights, ck.weights);
    std::string bytes = read_file(path);
    bytes[bytes.size() / 2] ^= 0x01;
    EXPECT_THROW(deserialize_checkpoint(bytes), ChecksumError);
    EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, 10)), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, StartsWithMagic) {
    EXPECT_EQ(serialize(fixtures::small_checkpoint()).substr(0, 4), "SVLB");
}

TEST(Weights, InitIsSeedDeterministic) {
    const auto c = fixtures::small_config();
    EXPECT_EQ(init_weights(c, 3), init_weights(c, 3));
    EXPECT_FALSE(init_weights(c, 3) == init_weights(c, 4));
}
