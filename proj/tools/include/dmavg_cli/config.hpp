// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmavg/baselines.hpp"
#include "dmavg/dma.hpp"
#include "dmavg/errors.hpp"
#include "dmavg/modes.hpp"
#include "dmavg/toy_denoiser.hpp"
#include "dmavg/toy_embedder.hpp"

namespace dmavg::cli {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kWorkspaceEnv = "DMAVG_WORKSPACE";

// Validation failure listing every violated field.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, std::vector<std::string> violations)
      : Error(message), violations_(std::move(violations)) {}
  const char* kind() const noexcept override { return "config-invalid"; }
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

const std::vector<std::string>& command_names();

// Defaults for a command, including schema_version and seed.
json default_config(const std::string& command);

// A command-line parameter mapped onto a config key.
struct FlagSpec {
  std::string flag;     // without leading dashes
  std::string pointer;  // JSON pointer into the config
  std::string help;
};

const std::vector<FlagSpec>& flags_for(const std::string& command);

struct Invocation {
  std::string command;
  std::optional<std::filesystem::path> config_file;
  // JSON pointer -> raw flag text; flags win over the file.
  std::map<std::string, std::string> overrides;
  std::optional<std::uint64_t> seed;
};

struct ResolvedConfig {
  std::string command;
  std::filesystem::path workspace;
  json config;

  json to_json() const;
};

// Pure: (defaults, file text, flags, environment) -> resolved config.
// Throws ConfigError listing every violation.
ResolvedConfig resolve_config(const Invocation& invocation, const std::optional<std::string>& file_text,
                              const std::map<std::string, std::string>& environment);

// Reads the config file (when given) and the process environment.
ResolvedConfig resolve_config(const Invocation& invocation);

// Semantic checks beyond shape and type (ranges, enum names, enum fields
// of the library configs). Returns every violation.
std::vector<std::string> validate_config(const std::string& command, const json& config);

DmaConfig dma_config_from(const json& section, std::uint64_t seed);
BaselineConfig baseline_config_from(const json& section);
ToyDenoiserConfig toy_config_from(const json& section, LatentShape shape, int num_concepts);
ToyTrainingConfig toy_training_from(const json& section, std::uint64_t seed);
ToyEmbedderConfig embedder_config_from(const json& section, std::uint64_t seed);
PerClusterOptions per_cluster_options_from(const json& section, std::uint64_t seed);

}  // namespace dmavg::cli
