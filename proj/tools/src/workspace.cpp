// SPDX-License-Identifier: Apache-2.0
#include "dmavg_cli/workspace.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "dmavg/hashing.hpp"

#ifndef DMAVG_VERSION
#define DMAVG_VERSION "0.0.0"
#endif

namespace dmavg::cli {

namespace fs = std::filesystem;

std::string tool_version() { return std::string("dmavg ") + DMAVG_VERSION; }

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  ContentHasher h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    if (n == 0) break;
    h.update(std::as_bytes(std::span<const char>(buf.data(), n)));
  }
  return h.hex();
}

namespace {

json refs_to_json(const std::vector<FileRef>& refs) {
  json a = json::array();
  for (const auto& r : refs) a.push_back({{"path", r.path}, {"hash", r.hash}});
  return a;
}

std::vector<FileRef> refs_from_json(const json& a) {
  std::vector<FileRef> out;
  for (const auto& r : a) out.push_back({r.at("path").get<std::string>(), r.at("hash").get<std::string>()});
  return out;
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

json RunManifest::content() const {
  json seeds_json = json::object();
  for (const auto& [k, v] : seeds) seeds_json[k] = v;
  return {{"schema_version", schema_version},
          {"command", command},
          {"run_id", run_id},
          {"tool_version", tool_version},
          {"config", config},
          {"seeds", seeds_json},
          {"inputs", refs_to_json(inputs)},
          {"outputs", refs_to_json(outputs)},
          {"result_hash", result_hash},
          {"trace", trace},
          {"children", children},
          {"summary", summary}};
}

std::string RunManifest::content_hash() const { return hash_hex(content().dump()); }

json RunManifest::to_json() const {
  json j = content();
  j["content_hash"] = content_hash();
  j["timings"] = {{"seconds", seconds}};
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.schema_version = j.at("schema_version").get<int>();
  m.command = j.at("command").get<std::string>();
  m.run_id = j.at("run_id").get<std::string>();
  m.tool_version = j.at("tool_version").get<std::string>();
  m.config = j.at("config");
  for (auto it = j.at("seeds").begin(); it != j.at("seeds").end(); ++it) {
    m.seeds[it.key()] = it.value().get<std::uint64_t>();
  }
  m.inputs = refs_from_json(j.at("inputs"));
  m.outputs = refs_from_json(j.at("outputs"));
  m.result_hash = j.at("result_hash").get<std::string>();
  m.trace = j.at("trace").get<std::string>();
  m.children = j.at("children").get<std::vector<std::string>>();
  m.summary = j.at("summary");
  if (j.contains("timings")) m.seconds = j.at("timings").at("seconds").get<double>();
  return m;
}

RunManifest RunManifest::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_json(json::parse(ss.str()));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

void RunManifest::save(const fs::path& path) const { write_atomic(path, to_json().dump(2) + "\n"); }

fs::path WorkspaceLock::path_for(const fs::path& workspace) { return workspace / ".dmavg.lock"; }

WorkspaceLock::WorkspaceLock(const fs::path& workspace) : path_(path_for(workspace)) {
  fs::create_directories(workspace);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const auto written = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      if (written != static_cast<ssize_t>(pid.size())) throw IoError("cannot write lock file " + path_.string());
      return;
    }
    if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    long owner = 0;
    {
      std::ifstream in(path_);
      in >> owner;
    }
    const bool alive = owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM);
    if (alive) {
      throw WorkspaceBusy("workspace " + workspace.string() + " is locked by process " + std::to_string(owner));
    }
    fs::remove(path_);
  }
  throw WorkspaceBusy("could not acquire the workspace lock " + path_.string());
}

WorkspaceLock::~WorkspaceLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

RunWriter::RunWriter(fs::path dir, RunManifest manifest) : dir_(std::move(dir)), manifest_(std::move(manifest)) {
  fs::create_directories(dir_);
}

void RunWriter::add_output(const std::string& relative) {
  if (!fs::is_regular_file(dir_ / relative)) throw IoError("expected output file " + (dir_ / relative).string());
  pending_.push_back(fs::path(relative).generic_string());
}

void RunWriter::add_tree(const std::string& relative) {
  std::vector<std::string> found;
  for (const auto& e : fs::recursive_directory_iterator(dir_ / relative)) {
    if (e.is_regular_file()) found.push_back(fs::relative(e.path(), dir_).generic_string());
  }
  std::sort(found.begin(), found.end());
  pending_.insert(pending_.end(), found.begin(), found.end());
}

void RunWriter::set_trace(const std::string& relative) {
  add_output(relative);
  manifest_.trace = relative;
}

RunManifest RunWriter::finish(double seconds) {
  std::sort(pending_.begin(), pending_.end());
  pending_.erase(std::unique(pending_.begin(), pending_.end()), pending_.end());
  manifest_.outputs.clear();
  for (const auto& p : pending_) manifest_.outputs.push_back({p, file_hash(dir_ / p)});
  manifest_.seconds = seconds;
  manifest_.save(dir_ / kManifestName);
  return manifest_;
}

bool run_is_current(const fs::path& dir, const std::string& run_id) {
  const fs::path mp = dir / kManifestName;
  if (!fs::is_regular_file(mp)) return false;
  RunManifest m;
  try {
    m = RunManifest::load(mp);
  } catch (const Error&) {
    return false;
  }
  if (m.run_id != run_id) return false;
  for (const auto& o : m.outputs) {
    const fs::path p = dir / o.path;
    if (!fs::is_regular_file(p) || file_hash(p) != o.hash) return false;
  }
  for (const auto& c : m.children) {
    const fs::path child = dir / c;
    if (!fs::is_regular_file(child)) return false;
    const auto cm = RunManifest::load(child);
    if (!run_is_current(child.parent_path(), cm.run_id)) return false;
  }
  return true;
}

json VerifyReport::to_json() const {
  return {{"manifests", manifests}, {"files", files},           {"clean", clean()},
          {"orphans", orphans},     {"missing", missing},       {"mismatched", mismatched},
          {"duplicates", duplicates}};
}

VerifyReport verify_workspace(const fs::path& workspace) {
  VerifyReport r;
  if (!fs::is_directory(workspace)) return r;
  std::map<std::string, int> claims;
  std::vector<fs::path> files;
  const fs::path lock = WorkspaceLock::path_for(workspace);
  for (const auto& e : fs::recursive_directory_iterator(workspace)) {
    if (!e.is_regular_file()) continue;
    if (e.path() == lock) continue;
    if (e.path().filename() == kManifestName) {
      ++r.manifests;
      const auto m = RunManifest::load(e.path());
      const fs::path dir = e.path().parent_path();
      for (const auto& o : m.outputs) {
        const fs::path p = (dir / o.path).lexically_normal();
        const std::string rel = fs::relative(p, workspace).generic_string();
        ++claims[rel];
        if (!fs::is_regular_file(p)) {
          r.missing.push_back(rel);
        } else if (file_hash(p) != o.hash) {
          r.mismatched.push_back(rel);
        }
      }
      continue;
    }
    files.push_back(e.path());
  }
  r.files = static_cast<int>(files.size());
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, workspace).generic_string();
    if (claims.count(rel) == 0) r.orphans.push_back(rel);
  }
  for (const auto& [rel, n] : claims) {
    if (n > 1) r.duplicates.push_back(rel);
  }
  std::sort(r.orphans.begin(), r.orphans.end());
  std::sort(r.missing.begin(), r.missing.end());
  std::sort(r.mismatched.begin(), r.mismatched.end());
  return r;
}

}  // namespace dmavg::cli
