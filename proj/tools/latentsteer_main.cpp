// latentsteer CLI: synthetic-data pipeline stages plus the read-only explorer
// service. Exit codes: 0 success, 1 internal error, 2 missing prerequisite,
// 3 config error. Errors are emitted as machine-readable JSON on stderr.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "latentsteer/common.hpp"
#include "latentsteer/pipeline.hpp"
#include "latentsteer/service.hpp"

using latentsteer::RunConfig;
using nlohmann::json;

namespace {

struct StageArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    bool force = false;
};

RunConfig resolve_config(const StageArgs& args) {
    RunConfig cfg =
        args.config_path.empty() ? RunConfig::defaults() : RunConfig::from_file(args.config_path);
    for (const auto& ov : args.overrides) cfg.apply_override(ov);
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    cfg.validate();
    return cfg;
}

void emit_error(const std::string& stage, int code, const std::string& message,
                const std::vector<std::string>& missing = {}) {
    json err = {{"stage", stage}, {"code", code}, {"message", message}, {"missing", missing}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
}

int run_stage(const std::string& name, const StageArgs& args,
              void (*stage)(const RunConfig&), bool is_report = false) {
    try {
        RunConfig cfg = resolve_config(args);
        if (is_report) {
            latentsteer::cmd_report(cfg, args.force);
        } else {
            stage(cfg);
        }
        return 0;
    } catch (const latentsteer::MissingArtifactError& e) {
        emit_error(name, 2, e.what(), e.missing);
        return 2;
    } catch (const latentsteer::ConfigError& e) {
        emit_error(name, 3, e.what());
        return 3;
    } catch (const std::exception& e) {
        emit_error(name, 1, e.what());
        return 1;
    }
}

void add_stage_options(CLI::App* cmd, StageArgs& args) {
    cmd->add_option("--config", args.config_path, "path to the run config JSON");
    cmd->add_option("--stage-override", args.overrides,
                    "dotted-path override, e.g. sae.steps=4000 (repeatable)");
    cmd->add_option("--seed", args.seed, "override the run seed");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latentsteer: TopK-SAE interpretability pipeline on synthetic activations"};
    app.require_subcommand(1);

    StageArgs args;
    struct StageDef {
        const char* name;
        const char* help;
        void (*fn)(const RunConfig&);
    };
    const StageDef stages[] = {
        {"generate", "synthesize activations, spectra targets and splits", latentsteer::cmd_generate},
        {"train-sae", "train the (layer, expansion) SAE grid", latentsteer::cmd_train_sae},
        {"concepts", "CAVs, probes, TCAV significance, enrichment and taxonomy",
         latentsteer::cmd_concepts},
        {"sweep", "train + attribute the full grid, pick the operating point",
         latentsteer::cmd_sweep},
        {"steer", "clamping sweeps with frozen probes and permutation baselines",
         latentsteer::cmd_steer},
        {"spectral", "train the spectral decoder and render steered spectra",
         latentsteer::cmd_spectral},
    };
    std::string chosen;
    for (const StageDef& def : stages) {
        CLI::App* cmd = app.add_subcommand(def.name, def.help);
        add_stage_options(cmd, args);
        cmd->callback([&chosen, name = std::string(def.name)] { chosen = name; });
    }
    CLI::App* report = app.add_subcommand("report", "aggregate figure/table analogs into report/");
    add_stage_options(report, args);
    report->add_flag("--force", args.force, "mix artifacts from different config hashes");
    report->callback([&chosen] { chosen = "report"; });

    latentsteer::ServiceOptions sopts;
    CLI::App* serve = app.add_subcommand("serve", "read-only HTTP API over a completed run");
    serve->add_option("--run-dir", sopts.run_dir, "completed run directory")->required();
    serve->add_option("--port", sopts.port, "listen port");
    serve->add_option("--host", sopts.host, "bind address");
    serve->callback([&chosen] { chosen = "serve"; });

    CLI11_PARSE(app, argc, argv);

    if (chosen == "serve") {
        try {
            return latentsteer::run_service(sopts);
        } catch (const std::exception& e) {
            emit_error("serve", 1, e.what());
            return 1;
        }
    }
    if (chosen == "report") return run_stage("report", args, nullptr, true);
    for (const StageDef& def : stages) {
        if (chosen == def.name) return run_stage(def.name, args, def.fn);
    }
    return 1;
}
