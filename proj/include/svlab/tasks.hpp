#pragma once

// Synthetic in-context learning task families and prompt construction.
//
// Vocabulary layout (shared by every family):
//   0            padding (never emitted by the builders)
//   1            separator, the "->" between a query and its label
//   2..129       query bank (128 tokens, shared by all families)
//   130..257     label bank (128 tokens)
//   258..261     class labels
//
// All families draw queries from the same bank, so a bare query does not
// say which task is being asked; only demonstrations do.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "svlab/model.hpp"
#include "svlab/util/rng.hpp"

namespace svlab {

namespace vocab {
inline constexpr Token pad = 0;
inline constexpr Token separator = 1;
inline constexpr Token query_base = 2;
inline constexpr std::size_t query_count = 128;
inline constexpr Token label_base = 130;
inline constexpr std::size_t label_count = 128;
inline constexpr Token class_base = 258;
inline constexpr std::size_t class_count = 4;
inline constexpr std::size_t min_vocab_size = 262;
}  // namespace vocab

struct Example {
    Token query = 0;
    Token label = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

enum class FamilyKind { random_bijection, fixed_offset, bank_translation, class_map };

// Query -> label table for one episode, indexed by position in the query bank.
struct Mapping {
    std::vector<Token> query_bank;
    std::vector<Token> labels;

    Token operator()(Token q) const {
        const auto it = std::lower_bound(query_bank.begin(), query_bank.end(), q);
        if (it == query_bank.end() || *it != q) throw std::out_of_range("query " + std::to_string(q) + " not in bank");
        return labels[static_cast<std::size_t>(it - query_bank.begin())];
    }
};

class TaskFamily {
public:
    // random_bijection: queries fall into four fixed latent groups; every
    //   episode draws a fresh injection from groups to the label bank, so a
    //   query's label is only recoverable from demonstrations of its group.
    // fixed_offset: label_index = (query_index + k) mod bank size.
    // bank_translation: a fixed random pairing of the two banks.
    // class_map: fixed balanced assignment of queries to four class labels.
    static TaskFamily random_bijection(std::uint64_t assignment_seed = 0xc1a5) {
        TaskFamily f("random_bijection", FamilyKind::random_bijection, label_bank_tokens());
        f.groups_ = balanced_groups(assignment_seed);
        return f;
    }

    static TaskFamily fixed_offset(std::size_t k, std::string name = "fixed_offset") {
        TaskFamily f(std::move(name), FamilyKind::fixed_offset, label_bank_tokens());
        f.table_.resize(vocab::query_count);
        for (std::size_t i = 0; i < vocab::query_count; ++i) f.table_[i] = f.label_bank_[(i + k) % vocab::label_count];
        return f;
    }

    static TaskFamily bank_translation(std::uint64_t pairing_seed = 0x7a11) {
        TaskFamily f("bank_translation", FamilyKind::bank_translation, label_bank_tokens());
        std::vector<Token> perm = f.label_bank_;
        Rng rng(derive_seed(pairing_seed, "bank_translation"));
        rng.shuffle(perm);
        f.table_ = std::move(perm);
        return f;
    }

    static TaskFamily class_map(std::uint64_t assignment_seed = 0xc1a5) {
        std::vector<Token> classes(vocab::class_count);
        std::iota(classes.begin(), classes.end(), vocab::class_base);
        TaskFamily f("class_map", FamilyKind::class_map, classes);
        f.groups_ = balanced_groups(assignment_seed);
        f.table_.resize(vocab::query_count);
        for (std::size_t i = 0; i < f.table_.size(); ++i) f.table_[i] = classes[f.groups_[i]];
        return f;
    }

    const std::string& name() const noexcept { return name_; }
    FamilyKind kind() const noexcept { return kind_; }
    const std::vector<Token>& query_bank() const noexcept { return query_bank_; }
    const std::vector<Token>& label_bank() const noexcept { return label_bank_; }
    double chance() const { return 1.0 / static_cast<double>(label_bank_.size()); }
    // Latent group of each query (by bank index); empty for ungrouped families.
    const std::vector<std::size_t>& groups() const noexcept { return groups_; }
    std::size_t group_count() const { return groups_.empty() ? 0 : *std::max_element(groups_.begin(), groups_.end()) + 1; }

    Mapping sample_mapping(std::uint64_t seed) const {
        Mapping m{query_bank_, {}};
        if (kind_ == FamilyKind::random_bijection) {
            Rng rng(derive_seed(seed, "mapping"));
            std::vector<Token> pool = label_bank_;
            rng.shuffle(pool);
            m.labels.resize(query_bank_.size());
            for (std::size_t i = 0; i < query_bank_.size(); ++i) m.labels[i] = pool[groups_[i]];
        } else {
            m.labels = table_;
        }
        return m;
    }

private:
    TaskFamily(std::string name, FamilyKind kind, std::vector<Token> labels)
        : name_(std::move(name)), kind_(kind), label_bank_(std::move(labels)) {
        query_bank_.resize(vocab::query_count);
        std::iota(query_bank_.begin(), query_bank_.end(), vocab::query_base);
    }

    static std::vector<std::size_t> balanced_groups(std::uint64_t seed) {
        std::vector<std::size_t> g(vocab::query_count);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = i % vocab::class_count;
        Rng rng(derive_seed(seed, "class_map"));
        rng.shuffle(g);
        return g;
    }

    static std::vector<Token> label_bank_tokens() {
        std::vector<Token> v(vocab::label_count);
        std::iota(v.begin(), v.end(), vocab::label_base);
        return v;
    }

    std::string name_;
    FamilyKind kind_;
    std::vector<Token> query_bank_;
    std::vector<Token> label_bank_;
    std::vector<Token> table_;
    std::vector<std::size_t> groups_;
};

inline std::vector<TaskFamily> task_catalog() {
    return {TaskFamily::random_bijection(), TaskFamily::fixed_offset(17), TaskFamily::bank_translation(),
            TaskFamily::class_map()};
}

inline TaskFamily family_by_name(const std::string& name) {
    for (auto& f : task_catalog())
        if (f.name() == name) return f;
    throw std::invalid_argument("unknown task family '" + name + "'");
}

struct EpisodePrompt {
    std::vector<Token> tokens;
    std::vector<std::size_t> separator_positions;
    std::size_t n_examples = 0;
    Example final_query;  // label is the held-out gold answer

    std::size_t final_separator() const { return separator_positions.back(); }
};

class PromptOverflow : public std::length_error {
public:
    using std::length_error::length_error;
};

// Layout X1 S Y1 ... XN S YN Xq S.
inline EpisodePrompt build_prompt(const std::vector<Example>& demonstrations, const Example& query,
                                  std::size_t max_seq = static_cast<std::size_t>(-1)) {
    const std::size_t len = 3 * demonstrations.size() + 2;
    if (len > max_seq) {
        throw PromptOverflow("prompt of " + std::to_string(demonstrations.size()) + " demonstrations needs " +
                             std::to_string(len) + " tokens, max_seq is " + std::to_string(max_seq));
    }
    EpisodePrompt p;
    p.tokens.reserve(len);
    for (const auto& ex : demonstrations) {
        p.tokens.push_back(ex.query);
        p.separator_positions.push_back(p.tokens.size());
        p.tokens.push_back(vocab::separator);
        p.tokens.push_back(ex.label);
    }
    p.tokens.push_back(query.query);
    p.separator_positions.push_back(p.tokens.size());
    p.tokens.push_back(vocab::separator);
    p.n_examples = demonstrations.size();
    p.final_query = query;
    return p;
}

struct ParsedPrompt {
    std::vector<Example> demonstrations;
    Token final_query = 0;
};

// Inverse of build_prompt (the gold label of the final query is not in the
// token stream).
inline ParsedPrompt parse_prompt(const std::vector<Token>& tokens) {
    if (tokens.size() < 2 || (tokens.size() - 2) % 3 != 0 || tokens.back() != vocab::separator) {
        throw std::invalid_argument("parse_prompt: token stream does not follow the X S Y ... X S layout");
    }
    ParsedPrompt out;
    const std::size_t n = (tokens.size() - 2) / 3;
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[3 * i + 1] != vocab::separator) throw std::invalid_argument("parse_prompt: missing separator");
        out.demonstrations.push_back({tokens[3 * i], tokens[3 * i + 2]});
    }
    out.final_query = tokens[3 * n];
    return out;
}

struct SplitSpec {
    std::size_t n_demonstrations = 10;
    std::size_t n_dummy = 1;
    double dev_fraction = 0.3;
    double test_fraction = 0.7;
    std::uint64_t seed = 0;
};

struct Episode {
    std::string family;
    std::uint64_t seed = 0;
    Mapping mapping;
    std::vector<Example> demonstrations;
    std::vector<Example> dummies;
    std::vector<Example> dev;
    std::vector<Example> test;

    const Example& dummy() const { return dummies.at(0); }
};

// Random disjoint pools from one episode mapping. The leftover queries after
// demonstrations and dummies are split with floor(rest * test_fraction) going
// to test and the remainder to dev. For grouped families the demonstrations
// contain every group whenever there are at least as many as groups.
inline Episode sample_episode(const TaskFamily& family, const SplitSpec& split) {
    if (std::abs(split.dev_fraction + split.test_fraction - 1.0) > 1e-12 || split.dev_fraction < 0 ||
        split.test_fraction < 0) {
        throw std::invalid_argument("sample_episode: dev and test fractions must sum to 1");
    }
    const auto& bank = family.query_bank();
    const std::size_t used = split.n_demonstrations + split.n_dummy;
    if (bank.size() < used + 1) {
        throw std::invalid_argument("sample_episode: family '" + family.name() + "' has " +
                                    std::to_string(bank.size()) + " queries, need more than " + std::to_string(used));
    }
    Episode ep;
    ep.family = family.name();
    ep.seed = split.seed;
    ep.mapping = family.sample_mapping(split.seed);
    std::vector<Token> queries = bank;
    Rng rng(derive_seed(split.seed, "episode_pools"));
    rng.shuffle(queries);
    const std::size_t n_groups = family.group_count();
    if (n_groups > 0 && split.n_demonstrations >= n_groups) {
        std::vector<Token> cover, rest;
        std::vector<bool> seen(n_groups, false);
        for (Token q : queries) {
            const std::size_t g = family.groups()[q - bank.front()];
            if (!seen[g]) {
                seen[g] = true;
                cover.push_back(q);
            } else {
                rest.push_back(q);
            }
        }
        cover.insert(cover.end(), rest.begin(), rest.end());
        queries = std::move(cover);
        for (std::size_t i = split.n_demonstrations; i > 1; --i) std::swap(queries[i - 1], queries[rng.below(i)]);
    }
    auto take = [&](std::size_t from, std::size_t n) {
        std::vector<Example> v;
        v.reserve(n);
        for (std::size_t i = from; i < from + n; ++i) v.push_back({queries[i], ep.mapping(queries[i])});
        return v;
    };
    const std::size_t rest = bank.size() - used;
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * split.test_fraction + 1e-9));
    ep.demonstrations = take(0, split.n_demonstrations);
    ep.dummies = take(split.n_demonstrations, split.n_dummy);
    ep.test = take(used, n_test);
    ep.dev = take(used + n_test, rest - n_test);
    return ep;
}

inline Episode sample_episode(const TaskFamily& family, std::size_t n, std::uint64_t seed) {
    SplitSpec s;
    s.n_demonstrations = n;
    s.seed = seed;
    return sample_episode(family, s);
}

// One JSON object per line: family, seed, tokens, separator positions, gold.
inline std::string episode_record(const std::string& family, std::uint64_t seed, const EpisodePrompt& p) {
    nlohmann::json j;
    j["family"] = family;
    j["seed"] = seed;
    j["tokens"] = p.tokens;
    j["separators"] = p.separator_positions;
    j["gold"] = p.final_query.label;
    return j.dump();
}

struct EpisodeRecord {
    std::string family;
    std::uint64_t seed = 0;
    std::vector<Token> tokens;
    std::vector<std::size_t> separators;
    Token gold = 0;
};

inline EpisodeRecord parse_episode_record(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    EpisodeRecord r;
    r.family = j.at("family").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.tokens = j.at("tokens").get<std::vector<Token>>();
    r.separators = j.at("separators").get<std::vector<std::size_t>>();
    r.gold = j.at("gold").get<Token>();
    return r;
}

}  // namespace svlab
