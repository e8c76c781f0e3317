#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "agnn/cli.hpp"

int main(int argc, char** argv) {
    using namespace agnn;

    CLI::App app{"Attentive GNN few-shot toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string checkpoint;
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* cmd, bool needs_checkpoint) {
        cmd->add_option("--config", config_path, "run configuration (JSON)")->required();
        cmd->add_option("--out", out_dir, "output directory (defaults to output_dir from the config)");
        cmd->add_option("--seed", seed, "overrides the config seed");
        if (needs_checkpoint) cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
    };
    auto* gen = app.add_subcommand("gen-data", "write synthetic train/test feature CSVs");
    auto* trn = app.add_subcommand("train", "episodic training; writes checkpoint and metrics");
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on test episodes");
    auto* ana = app.add_subcommand("analyze", "smoothing profile, feature export, beta sweep");
    auto* swp = app.add_subcommand("sweep", "train+evaluate model variants from a sweep file");
    add_common(gen, false);
    add_common(trn, false);
    add_common(evl, true);
    add_common(ana, true);
    add_common(swp, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cli::kExitInvalid;
    }

    try {
        if (swp->parsed())
            return cli::cmd_sweep(config_path, seed, out_dir.empty() ? "runs/sweep" : out_dir, std::cout, std::cerr);

        RunConfig cfg;
        const int status = cli::guarded(std::cerr, [&] {
            cfg = cli::load_run_config(config_path, seed);
            return cli::kExitOk;
        });
        if (status != cli::kExitOk) return status;
        const std::string out = out_dir.empty() ? cfg.output_dir : out_dir;

        if (gen->parsed()) return cli::cmd_gen_data(cfg, out, std::cout, std::cerr);
        if (trn->parsed()) return cli::cmd_train(cfg, out, std::cout, std::cerr);
        if (evl->parsed()) return cli::cmd_eval(cfg, checkpoint, out, std::cout, std::cerr);
        if (ana->parsed()) return cli::cmd_analyze(cfg, checkpoint, out, std::cout, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "fatal: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
