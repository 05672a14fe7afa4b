// Command line front end: synthesise a cohort, pretrain both encoder stages,
// fit downstream probes, and export evaluation artifacts.
//
// Configuration precedence: JSON file (--config) < SOMNUS_* environment
// variables < explicit flags. Exit codes: 0 success, 2 configuration error,
// 3 data/artifact error, 1 anything else.

#include <CLI11.hpp>

#include <iostream>

#include "somnus/train.hpp"

namespace {

using namespace somnus;

std::vector<ProbeTask> parse_tasks(const std::vector<std::string>& names) {
    if (names.empty()) return all_probe_tasks();
    std::vector<ProbeTask> tasks;
    tasks.reserve(names.size());
    for (const auto& n : names) tasks.push_back(probe_task_from(n));
    return tasks;
}

void do_synth(const RunConfig& cfg, bool force) {
    CohortManifest m = cmd_synth(cfg, force);
    std::cout << "synth: " << m.rows.size() << " subjects -> "
              << RunPaths::at(cfg.out).cohort.string() << "\n";
}

void do_micro(const RunConfig& cfg) {
    MicroTrainResult r = train_micro(cfg);
    std::cout << "micro: " << r.steps << " optimizer steps -> " << r.checkpoint.string()
              << "\n";
}

void do_macro(const RunConfig& cfg) {
    MacroTrainResult r = train_macro(cfg);
    std::cout << "macro: " << r.steps << " optimizer steps -> " << r.checkpoint.string()
              << "\n";
}

void do_probe(const RunConfig& cfg, ProbeTask task) {
    ProbeArtifacts art = run_probe_task(cfg, task);
    std::cout << art.metrics_with_hash.dump() << "\n";
}

void do_eval(const RunConfig& cfg, const std::vector<ProbeTask>& tasks) {
    for (ProbeTask t : tasks) do_probe(cfg, t);
    auto path = export_subject_embeddings(cfg);
    std::cout << "eval: subject embeddings -> " << path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale sleep representation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out, stage, seed_str, limit_str;
    std::vector<std::string> task_names;
    bool force = false;

    app.add_option("--config", config_path, "JSON run configuration")
        ->check(CLI::ExistingFile);
    app.add_option("--out", out, "run directory (holds cohort, checkpoints, exports)");
    app.add_option("--seed", seed_str, "override the run seed");
    app.add_option("--limit-subjects", limit_str, "cap the cohort size");
    app.add_flag("--force", force, "overwrite an existing cohort");

    CLI::App* c_synth = app.add_subcommand("synth", "generate the synthetic cohort");
    CLI::App* c_pre = app.add_subcommand("pretrain", "train one encoder stage");
    c_pre->add_option("--stage", stage, "micro | macro")->required();
    CLI::App* c_probe = app.add_subcommand("probe", "fit and evaluate one probe head");
    c_probe->add_option("--task", task_names,
                        "stage5 | sdb3 | survival | regression | binary")
        ->expected(1);
    CLI::App* c_eval =
        app.add_subcommand("eval", "fit all probes and export metrics and embeddings");
    c_eval->add_option("--task", task_names, "restrict evaluation to these tasks");
    CLI::App* c_all = app.add_subcommand("all", "synth, pretrain both stages, evaluate");
    c_all->add_option("--task", task_names, "restrict evaluation to these tasks");

    // let --config/--out/--seed/... appear after the subcommand name as well
    for (CLI::App* sub : {c_synth, c_pre, c_probe, c_eval, c_all}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // bad flags are configuration errors
    }

    try {
        somnus::RunConfig cfg;
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            nlohmann::json j;
            try {
                f >> j;
            } catch (const nlohmann::json::exception& e) {
                throw somnus::ConfigError(std::string("config: ") + e.what());
            }
            cfg = somnus::run_config_from_json(j);
        }
        somnus::apply_env_overrides(cfg);
        auto parse_count = [](const char* what, const std::string& s) -> std::uint64_t {
            try {
                std::size_t used = 0;
                std::uint64_t v = std::stoull(s, &used);
                if (used != s.size()) throw std::invalid_argument(s);
                return v;
            } catch (const std::exception&) {
                throw somnus::ConfigError(std::string(what) + " is not an integer: '" +
                                          s + "'");
            }
        };
        if (!seed_str.empty()) cfg.seed = parse_count("--seed", seed_str);
        if (!out.empty()) cfg.out = out;
        if (!limit_str.empty())
            cfg.cohort.subjects =
                std::min<std::size_t>(cfg.cohort.subjects,
                                      parse_count("--limit-subjects", limit_str));

        if (c_synth->parsed()) {
            cfg.stage = "synth";
            do_synth(cfg, force);
        } else if (c_pre->parsed()) {
            if (stage != "micro" && stage != "macro")
                throw somnus::ConfigError("pretrain: unknown stage '" + stage + "'");
            cfg.stage = stage;
            stage == "micro" ? do_micro(cfg) : do_macro(cfg);
        } else if (c_probe->parsed()) {
            if (task_names.size() != 1)
                throw somnus::ConfigError("probe: exactly one --task is required");
            cfg.stage = "probe:" + task_names[0];
            do_probe(cfg, somnus::probe_task_from(task_names[0]));
        } else if (c_eval->parsed()) {
            cfg.stage = "eval";
            do_eval(cfg, parse_tasks(task_names));
        } else if (c_all->parsed()) {
            cfg.stage = "all";
            do_synth(cfg, force);
            do_micro(cfg);
            do_macro(cfg);
            do_eval(cfg, parse_tasks(task_names));
        }
        return 0;
    } catch (const somnus::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const somnus::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
