// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>

#include "dmavg/batch.hpp"
#include "dmavg_cli/config.hpp"
#include "dmavg_cli/workspace.hpp"

namespace dmavg::cli {

struct RunOptions {
  // Run directory; defaults to <workspace>/runs/<command>/<run id>.
  std::optional<std::filesystem::path> out;
  bool force = false;
  // Set for child runs executed under a parent's lock.
  bool locked = false;
};

struct RunOutcome {
  std::filesystem::path dir;
  RunManifest manifest;
  // True when an identical, intact run already existed.
  bool skipped = false;
};

RunOutcome cmd_gen_data(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_train_toy(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_sample(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_dma(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_modes(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_baseline(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_ablate(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_eval(const ResolvedConfig& config, const RunOptions& options = {});
RunOutcome cmd_report(const ResolvedConfig& config, const RunOptions& options = {});

// Dispatches on config.command.
RunOutcome run_command(const ResolvedConfig& config, const RunOptions& options = {});

// Images stored by the commands: tensor "images" of shape [n, C, H, W].
void save_images(const std::filesystem::path& path, const Batch& images, LatentShape shape);
Batch load_images(const std::filesystem::path& path, LatentShape* shape = nullptr);

}  // namespace dmavg::cli
