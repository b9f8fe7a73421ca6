#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tcl/config.hpp"

namespace tcl {

// Command layer behind the CLI. Every command writes its resolved config
// beside its outputs; exit codes are 0 ok, 2 usage/IO, 3 numerical failure.

int cmd_generate(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path);
int cmd_dump_maps(const RunConfig& cfg, const std::string& checkpoint_path, int identity,
                  int clip_id);
int cmd_ablate(const RunConfig& cfg, const std::vector<std::string>& arms, int n_seeds);

struct AblationRun {
    std::string arm;
    std::uint64_t seed = 0;
    MetricsReport metrics;
    double seconds = 0.0;
};

// arm names: base, tse_wo_seo, tse, tsb, tclnet
RunConfig arm_config(const RunConfig& base, const std::string& arm);
std::vector<AblationRun> run_ablation(const Dataset& data, const RunConfig& cfg,
                                      const std::vector<std::string>& arms, int n_seeds,
                                      std::ostream* progress = nullptr);
std::string ablation_csv(const std::vector<AblationRun>& runs);

} // namespace tcl
