// svlab: command-line front end for training, state-vector evaluation and
// the analysis experiments.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "svlab/harness/config.hpp"
#include "svlab/harness/experiments.hpp"
#include "svlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace svlab;
using namespace svlab::harness;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> extras;
};

// defaults < file < flags
KeyValues resolve(const CommonArgs& a) {
    KeyValues kv;
    if (!a.config_path.empty()) kv.merge(KeyValues::from_file(a.config_path));
    kv.merge(parse_flags(a.extras));
    return kv;
}

LoadedModel open_checkpoint(const ExperimentConfig& cfg) {
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint given (use --checkpoint PATH)");
    if (!fs::exists(cfg.checkpoint)) throw ConfigError("checkpoint '" + cfg.checkpoint + "' not found");
    return LoadedModel::from(load_checkpoint(cfg.checkpoint));
}

int finish(const std::string& command, const KeyValues& snapshot, const std::string& out, const RunArtifacts& a) {
    const auto dir = make_run_dir(out, command);
    write_run(dir, snapshot, a);
    std::cout << dir.string() << '\n';
    return 0;
}

int cmd_train(const KeyValues& kv) {
    const TrainConfig cfg = train_config_from(kv);
    const std::string out = kv.str("out", "runs");
    const bool quiet = kv.flag("quiet", false);
    const auto result = train(cfg, [&](const TrainLogRow& row) {
        if (quiet) return;
        std::cerr << "step " << row.step << " loss " << row.loss;
        for (std::size_t i = 0; i < row.accuracy.size(); ++i) std::cerr << ' ' << cfg.families[i] << '=' << row.accuracy[i];
        std::cerr << '\n';
    });
    RunArtifacts a;
    std::ostringstream csv;
    result.log.write_csv(csv);
    a.results_csv = csv.str();
    std::uint64_t hash = 0;
    const std::string bytes = serialize(result.checkpoint, &hash);
    a.extra_files["checkpoint.bin"] = bytes;
    a.report["checkpoint_hash"] = hash;
    a.report["final_loss"] = result.checkpoint.meta.final_loss;
    a.report["steps"] = cfg.steps;
    std::vector<Series> series;
    for (std::size_t f = 0; f < cfg.families.size(); ++f) {
        Series s{cfg.families[f], {}, {}, {}};
        for (const auto& r : result.log.rows) {
            s.x.push_back(static_cast<double>(r.step));
            s.y.push_back(r.accuracy[f]);
        }
        series.push_back(std::move(s));
    }
    a.plot_svg = line_plot("Few-shot accuracy during training", "step", "accuracy", series);
    KeyValues snap = KeyValues::parse(cfg.canonical());
    snap.set("out", out);
    snap.set("eval_interval", std::to_string(cfg.eval_interval));
    snap.set("eval_episodes", std::to_string(cfg.eval_episodes));
    snap.set("eval_shots", std::to_string(cfg.eval_shots));
    if (kv.has("save")) {
        write_file(kv.str("save", ""), bytes);
        snap.set("save", kv.str("save", ""));
    }
    return finish("train", snap, out, a);
}

template <class F>
int cmd_experiment(const std::string& command, const KeyValues& kv, F&& run) {
    const auto cfg = ExperimentConfig::from(kv);
    const auto a = run(cfg);
    return finish(command, cfg.snapshot(), cfg.out, a);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"State-vector experiments on a toy in-context learner"};
    app.require_subcommand(1);
    struct Sub {
        const char* name;
        const char* help;
    };
    const std::vector<Sub> subs = {
        {"train", "train the toy transformer and write a checkpoint"},
        {"eval", "evaluate methods per family with dev-selected L"},
        {"sweep-layers", "accuracy as a function of the intervention depth L"},
        {"ablate", "inner / momentum against adagrad, rmsprop and adam"},
        {"aggregate", "average vs divide-and-conquer aggregation over example counts"},
        {"robustness", "accuracy spread over resampled demonstrations and dummies"},
        {"dualform", "numerical check of the dual form of linear attention"},
        {"pca", "2-D PCA of per-position state vectors"},
    };
    std::map<std::string, CommonArgs> args;
    std::map<std::string, CLI::App*> apps;
    for (const auto& s : subs) {
        auto* sub = app.add_subcommand(s.name, s.help);
        auto& a = args[s.name];
        sub->add_option("--config", a.config_path, "flat key = value config file");
        sub->allow_extras();
        sub->footer("Any config key can be given as --key VALUE; flags override the file.");
        apps[s.name] = sub;
    }
    CLI11_PARSE(app, argc, argv);

    try {
        for (const auto& s : subs) {
            auto* sub = apps[s.name];
            if (!sub->parsed()) continue;
            auto& a = args[s.name];
            a.extras = sub->remaining();
            const KeyValues kv = resolve(a);
            const std::string name = s.name;
            if (name == "train") return cmd_train(kv);
            if (name == "dualform") {
                return cmd_experiment(name, kv, [](const ExperimentConfig& c) { return run_dualform(c); });
            }
            return cmd_experiment(name, kv, [&](const ExperimentConfig& c) {
                const auto m = open_checkpoint(c);
                if (name == "eval") return run_eval(m, c);
                if (name == "sweep-layers") return run_sweep_layers(m, c);
                if (name == "ablate") return run_ablate(m, c);
                if (name == "aggregate") return run_aggregate(m, c);
                if (name == "robustness") return run_robustness(m, c);
                return run_pca(m, c);
            });
        }
    } catch (const std::exception& e) {
        std::cerr << "svlab: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
