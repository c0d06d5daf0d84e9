#pragma once

// Command implementations behind the CLI. Each command reads its inputs from
// the experiment's output directory, writes versioned artifacts plus a JSON
// summary there, and throws the structured errors that the CLI maps to exit
// codes.

#include <string>

#include "dwnas/config.hpp"

namespace dwnas {

struct CliOptions {
    std::string config_path;
    int64_t seed_override = -1;     // < 0: use config seed
    std::string out_override;       // empty: use config output_dir
    double constraint_override = 0; // <= 0: use config constraint
    bool f64 = false;
    bool force = false;
};

// Effective worker-thread cap from DWNAS_THREADS (>= 1).
int worker_threads();

ExperimentConfig load_experiment(const CliOptions& opt);

void cmd_gen_data(const ExperimentConfig& cfg);
void cmd_latency_fit(const ExperimentConfig& cfg);
void cmd_search(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_transform(const ExperimentConfig& cfg);
void cmd_verify(const ExperimentConfig& cfg, bool f64);
void cmd_calibrate(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg);
void cmd_ablate(const ExperimentConfig& cfg);
void cmd_report(const ExperimentConfig& cfg, bool force);

// Dispatches by name and maps structured errors to exit codes:
// 0 ok, 2 config, 3 data, 4 numeric, 1 other.
int run_command(const std::string& name, const CliOptions& opt);

}  // namespace dwnas
