// SPDX-License-Identifier: Apache-2.0
#include "dmavg_cli/app.hpp"

#include <CLI11.hpp>
#include <map>
#include <string>

#include "dmavg_cli/commands.hpp"

namespace dmavg::cli {

namespace {

struct CommandArgs {
  CLI::App* app = nullptr;
  std::string config_file;
  std::uint64_t seed = 0;
  CLI::Option* seed_option = nullptr;
  CLI::Option* config_option = nullptr;
  std::string out;
  bool force = false;
  bool print_config = false;
  std::map<std::string, std::string> values;  // pointer -> text
  std::map<std::string, CLI::Option*> options;
};

void print_error(std::ostream& err, const std::string& kind, const std::string& message,
                 const std::vector<std::string>& violations = {}) {
  json e{{"kind", kind}, {"message", message}};
  if (!violations.empty()) e["violations"] = violations;
  err << json{{"error", e}}.dump() << "\n";
}

int verify(std::ostream& out) {
  std::filesystem::path ws = "workspace";
  if (const char* env = std::getenv(kWorkspaceEnv); env && *env) ws = env;
  const auto report = verify_workspace(std::filesystem::absolute(ws).lexically_normal());
  out << report.to_json().dump() << "\n";
  return report.clean() ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototype generation by diffusion mean alignment", "dmavg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  std::map<std::string, CommandArgs> commands;
  for (const auto& name : command_names()) {
    auto& c = commands[name];
    c.app = app.add_subcommand(name);
    c.config_option = c.app->add_option("--config", c.config_file, "JSON config file");
    c.seed_option = c.app->add_option("--seed", c.seed, "master seed");
    c.app->add_option("--out", c.out, "run directory (default: under the workspace)");
    c.app->add_flag("--force", c.force, "replace an existing run directory");
    c.app->add_flag("--print-config", c.print_config, "print the resolved config and exit");
    for (const auto& f : flags_for(name)) {
      c.options[f.pointer] = c.app->add_option("--" + f.flag, c.values[f.pointer], f.help);
    }
  }
  CLI::App* verify_app = app.add_subcommand("verify", "check every workspace file against its manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << tool_version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return kExitUsage;
  }

  try {
    if (verify_app->parsed()) return verify(out);
    for (auto& [name, c] : commands) {
      if (!c.app->parsed()) continue;
      Invocation inv;
      inv.command = name;
      if (c.config_option->count()) inv.config_file = c.config_file;
      if (c.seed_option->count()) inv.seed = c.seed;
      for (const auto& [pointer, option] : c.options) {
        if (option->count()) inv.overrides[pointer] = c.values[pointer];
      }
      const auto rc = resolve_config(inv);
      if (c.print_config) {
        out << rc.to_json().dump(2) << "\n";
        return kExitOk;
      }
      RunOptions o;
      if (!c.out.empty()) o.out = c.out;
      o.force = c.force;
      const auto outcome = run_command(rc, o);
      out << json{{"status", outcome.skipped ? "skipped" : "ok"},
                  {"command", name},
                  {"run_dir", outcome.dir.string()},
                  {"run_id", outcome.manifest.run_id},
                  {"content_hash", outcome.manifest.content_hash()},
                  {"result_hash", outcome.manifest.result_hash}}
                 .dump()
          << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    print_error(err, e.kind(), e.what(), e.violations());
    return kExitUsage;
  } catch (const WorkspaceBusy& e) {
    print_error(err, e.kind(), e.what());
    return kExitLocked;
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace dmavg::cli
