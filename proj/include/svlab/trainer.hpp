#pragma once

// Trains the toy transformer on a mixture of task families. Each episode is
// X1 S Y1 ... Xn S Yn Xq S with n uniform in [min_examples, max_examples];
// cross-entropy is taken only at separator positions, against the label that
// follows (the final separator predicts the query's label).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "svlab/model.hpp"
#include "svlab/tasks.hpp"
#include "svlab/util/parallel.hpp"
#include "svlab/util/rng.hpp"

namespace svlab {

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    ModelConfig model;
    std::size_t steps = 20000;
    std::size_t batch_size = 8;
    double learning_rate = 2e-3;
    std::size_t warmup_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    std::vector<std::string> families = {"random_bijection", "fixed_offset", "bank_translation", "class_map"};
    std::vector<double> mixture = {0.6, 0.4 / 3, 0.4 / 3, 0.4 / 3};
    std::size_t min_examples = 2;
    std::size_t max_examples = 12;
    std::uint64_t seed = 1;
    std::size_t eval_interval = 1000;
    std::size_t eval_episodes = 200;
    std::size_t eval_shots = 10;

    void validate() const {
        model.validate();
        if (!(learning_rate > 0)) throw std::invalid_argument("train config: learning_rate must be > 0");
        if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (families.empty() || families.size() != mixture.size()) {
            throw std::invalid_argument("train config: one mixture weight per family required");
        }
        double total = 0.0;
        for (double w : mixture) {
            if (w < 0) throw std::invalid_argument("train config: negative mixture weight");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("train config: mixture weights must sum to 1");
        if (min_examples > max_examples) throw std::invalid_argument("train config: min_examples > max_examples");
        if (3 * max_examples + 2 > model.max_seq) {
            throw std::invalid_argument("train config: max_examples does not fit max_seq");
        }
        if (model.vocab_size < vocab::min_vocab_size) {
            throw std::invalid_argument("train config: vocab_size must be >= " + std::to_string(vocab::min_vocab_size));
        }
    }

    // Canonical text form; its hash is stored in checkpoints.
    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "n_layers=" << model.n_layers << "\nn_heads=" << model.n_heads << "\nd_model=" << model.d_model
           << "\nd_ff=" << model.d_ff << "\nvocab_size=" << model.vocab_size << "\nmax_seq=" << model.max_seq
           << "\nattention=" << to_string(model.attention_kind) << "\nsteps=" << steps << "\nbatch_size=" << batch_size
           << "\nlearning_rate=" << learning_rate << "\nwarmup_steps=" << warmup_steps << "\nbeta1=" << beta1
           << "\nbeta2=" << beta2 << "\nadam_eps=" << adam_eps << "\nclip_norm=" << clip_norm;
        for (std::size_t i = 0; i < families.size(); ++i) os << "\nmix." << families[i] << '=' << mixture[i];
        os << "\nmin_examples=" << min_examples << "\nmax_examples=" << max_examples << "\nseed=" << seed << '\n';
        return os.str();
    }
};

struct TrainLogRow {
    std::size_t step = 0;
    double loss = 0.0;
    std::vector<double> accuracy;  // one per TrainConfig::families entry
};

struct TrainLog {
    std::vector<std::string> families;
    std::vector<TrainLogRow> rows;

    void write_csv(std::ostream& os) const {
        os << "step,loss";
        for (const auto& f : families) os << ",acc_" << f;
        os << '\n';
        os.precision(10);
        for (const auto& r : rows) {
            os << r.step << ',' << r.loss;
            for (double a : r.accuracy) os << ',' << a;
            os << '\n';
        }
    }
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainLog log;
};

// First-token accuracy over n_episodes fresh episodes: the n_shots
// demonstrations of each episode followed by its first test query.
inline double evaluate_icl(const Model& model, const TaskFamily& family, std::size_t n_shots, std::size_t n_episodes,
                           std::uint64_t seed) {
    if (n_episodes == 0) return 0.0;
    std::vector<char> hit(n_episodes, 0);
    parallel_for(n_episodes, [&](std::size_t e) {
        const Episode ep = sample_episode(family, n_shots, derive_seed(seed, "icl_episode", e));
        const auto& demos = ep.demonstrations;
        const Example q = ep.test.front();
        const auto prompt = build_prompt(demos, q, model.config().max_seq);
        const auto out = model.forward(prompt.tokens);
        hit[e] = logits_to_first_token(out.logits, prompt.final_separator()) == q.label;
    });
    std::size_t n = 0;
    for (char h : hit) n += static_cast<std::size_t>(h);
    return static_cast<double>(n) / static_cast<double>(n_episodes);
}

inline double evaluate_icl(const Checkpoint& ck, const TaskFamily& family, std::size_t n_shots, std::size_t n_episodes,
                           std::uint64_t seed) {
    return evaluate_icl(make_model(ck), family, n_shots, n_episodes, seed);
}

namespace detail {

struct Batch {
    std::vector<Token> tokens;           // batch * T, back to back
    std::vector<std::size_t> loss_rows;  // flat row index of every separator
    std::vector<std::size_t> targets;
    std::size_t batch = 0;
};

inline Batch sample_batch(const TrainConfig& cfg, const std::vector<TaskFamily>& families, std::size_t step) {
    Rng rng(derive_seed(cfg.seed, "batch", step));
    const std::size_t n = cfg.min_examples + rng.below(cfg.max_examples - cfg.min_examples + 1);
    Batch b;
    b.batch = cfg.batch_size;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const auto& fam = families[rng.categorical(cfg.mixture)];
        const Mapping mapping = fam.sample_mapping(rng.next());
        std::vector<Token> queries = fam.query_bank();
        // partial Fisher-Yates for n + 1 distinct queries
        for (std::size_t j = 0; j <= n; ++j) std::swap(queries[j], queries[j + rng.below(queries.size() - j)]);
        for (std::size_t j = 0; j <= n; ++j) {
            const Token q = queries[j];
            b.tokens.push_back(q);
            b.loss_rows.push_back(b.tokens.size());
            b.tokens.push_back(vocab::separator);
            b.targets.push_back(mapping(q));
            if (j < n) b.tokens.push_back(mapping(q));
        }
    }
    return b;
}

class Adam {
public:
    Adam(const Weights& w, const TrainConfig& cfg) : cfg_(cfg) {
        w.for_each([&](const Tensor& t) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        });
    }

    void step(Weights& w, const std::vector<const Tensor*>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::size_t k = 0;
        w.for_each([&](Tensor& p) {
            auto pd = p.data();
            auto& m = m_[k];
            auto& v = v_[k];
            const Tensor* g = grads[k];
            ++k;
            if (!g) return;
            const auto gd = g->data();
            for (std::size_t i = 0; i < pd.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gd[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gd[i] * gd[i];
                pd[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
            }
        });
    }

private:
    const TrainConfig& cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace detail

using TrainProgress = std::function<void(const TrainLogRow&)>;

inline TrainResult train(const TrainConfig& cfg, const TrainProgress& progress = {}) {
    cfg.validate();
    std::vector<TaskFamily> families;
    for (const auto& name : cfg.families) families.push_back(family_by_name(name));

    Weights weights = init_weights(cfg.model, cfg.seed);
    detail::Adam adam(weights, cfg);
    TrainLog log;
    log.families = cfg.families;
    double last_loss = 0.0;

    auto eval_row = [&](std::size_t step, double loss) {
        TrainLogRow row{step, loss, {}};
        const Model model(cfg.model, weights);
        for (const auto& fam : families) {
            row.accuracy.push_back(
                evaluate_icl(model, fam, cfg.eval_shots, cfg.eval_episodes, derive_seed(cfg.seed, "train_eval")));
        }
        log.rows.push_back(row);
        if (progress) progress(row);
    };

    for (std::size_t step = 0; step < cfg.steps; ++step) try {
        const auto batch = detail::sample_batch(cfg, families, step);
        ad::Tape tape(true);
        const auto params = detail::bind(tape, weights, true);
        const ad::Var x = detail::residual_stream(cfg.model, params, batch.tokens, batch.batch, {});
        const ad::Var picked = ad::gather_rows(x, batch.loss_rows);
        const ad::Var loss = ad::cross_entropy(detail::logits_from(params, picked), batch.targets);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
            throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": loss is " +
                                   std::to_string(lv) + " (lr " + std::to_string(cfg.learning_rate) + ")");
        }
        tape.backward(loss);

        std::vector<const Tensor*> grads;
        double sq = 0.0;
        for (const auto& v : params.ordered) {
            if (!tape.has_grad(v.id)) {
                grads.push_back(nullptr);
                continue;
            }
            const Tensor& g = tape.grad(v.id);
            for (double e : g.data()) sq += e * e;
            grads.push_back(&g);
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": non-finite gradient");
        if (cfg.clip_norm > 0 && norm > cfg.clip_norm) {
            const double s = cfg.clip_norm / norm;
            for (const auto& v : params.ordered)
                if (tape.has_grad(v.id))
                    for (auto& e : tape.grad(v.id).data()) e *= s;
        }
        const double lr = cfg.warmup_steps > 0 && step < cfg.warmup_steps
                              ? cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps)
                              : cfg.learning_rate;
        adam.step(weights, grads, lr);
        last_loss = lv;
        if (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) eval_row(step + 1, lv);
    } catch (const NumericError& e) {
        // overflowing weights surface as non-finite activations
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (cfg.steps == 0 || cfg.eval_interval == 0 || cfg.steps % cfg.eval_interval != 0) eval_row(cfg.steps, last_loss);

    TrainResult r;
    r.checkpoint.config = cfg.model;
    r.checkpoint.weights = std::move(weights);
    r.checkpoint.meta = {cfg.steps, cfg.seed, fnv1a64(cfg.canonical()), last_loss};
    r.log = std::move(log);
    return r;
}

// Loss of one freshly sampled batch under the given weights (no update).
inline double batch_loss(const TrainConfig& cfg, const Weights& weights, std::size_t step) {
    std::vector<TaskFamily> families;
    for (const auto& name : cfg.families) families.push_back(family_by_name(name));
    const auto batch = detail::sample_batch(cfg, families, step);
    ad::Tape tape(false);
    const auto params = detail::bind(tape, weights, false);
    const ad::Var x = detail::residual_stream(cfg.model, params, batch.tokens, batch.batch, {});
    return ad::cross_entropy(detail::logits_from(params, ad::gather_rows(x, batch.loss_rows)), batch.targets)
        .value()
        .item();
}

}  // namespace svlab
