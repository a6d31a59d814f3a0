#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stan/evaluation.hpp"

namespace stan {

// Fully resolved settings for one run: defaults, then the config file, then
// command-line flags, in that order. The resolved form is serialized into
// every run directory so a run can be reproduced from its artifacts alone.
struct RunConfig {
    StanConfig model;
    DiscriminatorConfig critic;
    TrainConfig train;
    MonitorConfig monitor;
    LabelConfig labels;
    SyntheticSpec synth;               // base recording for `synth`
    std::vector<SyntheticSpec> corpus; // per-recording overrides, resolved
    std::uint64_t seed = 0;            // the single run seed
    bool normalize = true;
    bool same_subject_only = false;
    DiscObjective objective = DiscObjective::wgan_gp;
    std::string data_dir;              // dataset root

    void validate() const;
};

// Parses a JSON config file over the defaults; unknown keys are rejected.
RunConfig load_run_config(const std::string& path);
void merge_config_text(RunConfig& rc, const std::string& text,
                       const std::string& origin);

std::string serialize_run_config(const RunConfig& rc);
void save_run_config(const std::string& path, const RunConfig& rc);

DiscObjective parse_objective(const std::string& name);
std::string objective_name(DiscObjective obj);

// The evaluation view of a run config; the run seed lands in train.seed.
EvalOptions eval_options(const RunConfig& rc);

}  // namespace stan
