#include <string>

#include <CLI11.hpp>

#include "dwnas/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"dwnas: deep-to-shallow transformable architecture search pipeline"};
    app.require_subcommand(1);

    dwnas::CliOptions opt;
    const std::vector<std::string> commands = {"gen-data", "latency-fit", "search", "train", "transform",
                                               "verify",   "calibrate",   "eval",   "ablate", "report"};
    std::string chosen;
    for (const std::string& name : commands) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", opt.config_path, "experiment config JSON")->required();
        sub->add_option("--seed", opt.seed_override, "seed override");
        sub->add_option("--out", opt.out_override, "output directory override");
        if (name == "search")
            sub->add_option("--constraint-ms", opt.constraint_override, "latency constraint override (ms)");
        if (name == "verify") sub->add_flag("--f64", opt.f64, "verify in double precision");
        if (name == "report") sub->add_flag("--force", opt.force, "mix artifacts with different config hashes");
        sub->callback([&chosen, name] { chosen = name; });
    }

    CLI11_PARSE(app, argc, argv);
    return dwnas::run_command(chosen, opt);
}
