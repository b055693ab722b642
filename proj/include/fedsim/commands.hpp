#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "fedsim/config.hpp"
#include "fedsim/federation.hpp"

namespace fedsim {

/// Reads and parses a config file, then applies FEDSIM_SEED if it is set.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const ConfigOverrides& overrides = {});

/// metrics.csv, summary.csv and run.log for one finished run.
void write_run_outputs(const std::filesystem::path& out_dir, const ExperimentResult& result,
                       const ExperimentConfig& cfg, std::string_view label);

// Subcommands. Each returns a process exit status and reports failures on `err`.
int cmd_run(const std::filesystem::path& config, const std::filesystem::path& out_dir,
            std::ostream& err);
int cmd_benign_ref(const std::filesystem::path& config, const std::filesystem::path& out_dir,
                   std::ostream& err);
int cmd_sweep(const std::filesystem::path& config, const std::filesystem::path& sweep,
              const std::filesystem::path& out_dir, std::ostream& err);

/// `round` is "final" or a round number in [0, fl.rounds]; 0 exports the
/// initial model.
int cmd_export_embeddings(const std::filesystem::path& config, const std::filesystem::path& out_dir,
                          const std::string& round, std::ostream& err);

}  // namespace fedsim
