// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmavg_cli/config.hpp"

namespace dmavg::cli {

std::string tool_version();

// FNV-1a of the file bytes.
std::string file_hash(const std::filesystem::path& path);

struct FileRef {
  std::string path;  // relative to the run directory
  std::string hash;
};

struct RunManifest {
  int schema_version = 1;
  std::string command;
  std::string run_id;
  std::string tool_version;
  json config;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<FileRef> inputs;  // absolute paths at run time
  std::vector<FileRef> outputs;
  // Hash of the primary numeric result (decoded images, metrics, ...).
  std::string result_hash;
  std::string trace;                // relative path, empty when none
  std::vector<std::string> children;  // relative paths of child manifests
  json summary = json::object();
  double seconds = 0.0;

  // Everything except timings; equal for bitwise-equal reruns.
  json content() const;
  std::string content_hash() const;
  json to_json() const;
  static RunManifest from_json(const json& j);
  static RunManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Exclusive workspace lock held for the lifetime of the object. A lock left
// by a dead process is taken over.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const std::filesystem::path& workspace);
  ~WorkspaceLock();
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;

  static std::filesystem::path path_for(const std::filesystem::path& workspace);

 private:
  std::filesystem::path path_;
};

class WorkspaceBusy : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "workspace-locked"; }
};

// Collects outputs of one run and writes its manifest last.
class RunWriter {
 public:
  RunWriter(std::filesystem::path dir, RunManifest manifest);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& relative) const { return dir_ / relative; }

  // Registers a written file, or every file below a directory.
  void add_output(const std::string& relative);
  void add_tree(const std::string& relative);
  void set_result_hash(std::string hash) { manifest_.result_hash = std::move(hash); }
  void set_trace(const std::string& relative);
  void add_child(const std::string& relative_manifest) { manifest_.children.push_back(relative_manifest); }
  void add_seed(const std::string& name, std::uint64_t value) { manifest_.seeds[name] = value; }
  json& summary() { return manifest_.summary; }

  // Hashes outputs and writes manifest.json atomically.
  RunManifest finish(double seconds);

 private:
  std::filesystem::path dir_;
  RunManifest manifest_;
  std::vector<std::string> pending_;
};

inline constexpr const char* kManifestName = "manifest.json";

// True when `dir` holds a manifest for run_id whose outputs all match.
bool run_is_current(const std::filesystem::path& dir, const std::string& run_id);

struct VerifyReport {
  int manifests = 0;
  int files = 0;
  std::vector<std::string> orphans;
  std::vector<std::string> missing;
  std::vector<std::string> mismatched;
  std::vector<std::string> duplicates;

  bool clean() const { return orphans.empty() && missing.empty() && mismatched.empty() && duplicates.empty(); }
  json to_json() const;
};

// Every file under the workspace must be claimed by exactly one manifest
// and match its recorded hash.
VerifyReport verify_workspace(const std::filesystem::path& workspace);

}  // namespace dmavg::cli
