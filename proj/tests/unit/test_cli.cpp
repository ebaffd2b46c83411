// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dmavg_cli/app.hpp"
#include "dmavg_cli/commands.hpp"
#include "dmavg_cli/config.hpp"
#include "dmavg_cli/workspace.hpp"
#include "fixture.hpp"

namespace dmavg::cli {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
  json status() const { return json::parse(out); }
  json error() const { return json::parse(err).at("error"); }
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "dmavg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

TEST(ResolveConfig, FlagsOverrideFileOverrideDefaults) {
  Invocation inv;
  inv.command = "dma";
  inv.overrides["/dma/iterations"] = "7";
  inv.overrides["/model"] = "model.bin";
  const std::string file = R"({"schema_version": 1, "dma": {"iterations": 3, "t_stop": 4}})";
  const auto rc = resolve_config(inv, file, {{kWorkspaceEnv, "/tmp/ws-x"}});
  EXPECT_EQ(rc.config.at("dma").at("iterations"), 7);
  EXPECT_EQ(rc.config.at("dma").at("t_stop"), 4);
  EXPECT_EQ(rc.config.at("dma").at("latent_count"), default_config("dma").at("dma").at("latent_count"));
  EXPECT_EQ(rc.workspace, fs::path("/tmp/ws-x"));
  inv.seed = 12;
  EXPECT_EQ(resolve_config(inv, std::nullopt, {}).config.at("seed"), 12);
}

TEST(ResolveConfig, ListsEveryViolation) {
  Invocation inv;
  inv.command = "dma";
  const std::string file = R"({"schema_version": 1, "dma": {"iterations": "many", "colour": 2}, "extra": true})";
  try {
    resolve_config(inv, file, {});
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_GE(e.violations().size(), 3u);
  }
  inv.overrides["/dma/t_stop"] = "25";
  inv.overrides["/dma/learning_rate"] = "-1";
  try {
    resolve_config(inv, std::nullopt, {});
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_GE(e.violations().size(), 2u);
  }
  EXPECT_THROW(resolve_config(inv, std::string(R"({"dma": {}})"), {}), ConfigError);
  EXPECT_THROW(resolve_config(inv, std::string("[1, 2]"), {}), ConfigError);
}

TEST(ResolveConfig, EveryCommandHasValidDefaults) {
  for (const auto& name : command_names()) {
    const auto d = default_config(name);
    EXPECT_EQ(d.at("schema_version"), kSchemaVersion) << name;
    for (const auto& f : flags_for(name)) {
      if (f.pointer == "/concept") continue;
      EXPECT_TRUE(d.contains(json::json_pointer(f.pointer))) << name << " " << f.flag;
    }
  }
}

TEST(RunCli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({"--version"}).code, kExitOk);
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_EQ(r.error().at("kind"), "usage");
  r = run({"dma", "--iterations", "lots"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_EQ(r.error().at("kind"), "config-invalid");
  r = run({"dma", "--t-stop", "99", "--lr", "0", "--print-config"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_GE(r.error().at("violations").size(), 2u);
}

TEST(RunCli, PrintConfigShowsResolvedValues) {
  const auto r = run({"dma", "--model", "m.bin", "--iterations", "4", "--seed", "9", "--print-config"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("config").at("dma").at("iterations"), 4);
  EXPECT_EQ(j.at("config").at("seed"), 9);
}

// Tiny end-to-end workspace shared by the pipeline tests.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ws_ = new fs::path(testing::scratch_dir("cli-workspace"));
    ::setenv(kWorkspaceEnv, ws_->c_str(), 1);
    auto r = run({"gen-data", "--side", "8", "--samples-per-class", "48"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    data_ = new std::string(r.status().at("run_dir").get<std::string>());
    r = run({"train-toy", "--dataset", *data_, "--epochs", "3", "--embedder-epochs", "3", "--bottleneck", "16"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    model_ = new std::string(r.status().at("run_dir").get<std::string>());
  }
  static void TearDownTestSuite() { ::unsetenv(kWorkspaceEnv); }

  static std::vector<std::string> dma_args(int latents = 4, int iterations = 2, int decode = 2) {
    return {"dma",     "--model", *model_,  "--concept",     "sun",
            "--latent-count", std::to_string(latents), "--iterations", std::to_string(iterations),
            "--steps", "5",       "--t-stop", "2",           "--decode-count", std::to_string(decode)};
  }

  static fs::path* ws_;
  static std::string* data_;
  static std::string* model_;
};

fs::path* Pipeline::ws_ = nullptr;
std::string* Pipeline::data_ = nullptr;
std::string* Pipeline::model_ = nullptr;

TEST_F(Pipeline, RerunIsSkippedAndForcedRerunIsIdentical) {
  const auto first = run(dma_args());
  ASSERT_EQ(first.code, kExitOk) << first.err;
  EXPECT_EQ(first.status().at("status"), "ok");
  const auto again = run(dma_args());
  ASSERT_EQ(again.code, kExitOk) << again.err;
  EXPECT_EQ(again.status().at("status"), "skipped");
  auto forced = dma_args();
  forced.push_back("--force");
  const auto third = run(forced);
  ASSERT_EQ(third.code, kExitOk) << third.err;
  EXPECT_EQ(third.status().at("status"), "ok");
  EXPECT_EQ(third.status().at("content_hash"), first.status().at("content_hash"));
  EXPECT_EQ(third.status().at("result_hash"), first.status().at("result_hash"));
  const auto m = RunManifest::load(fs::path(first.status().at("run_dir").get<std::string>()) / kManifestName);
  EXPECT_EQ(m.summary.at("concept"), "sun");
  EXPECT_EQ(m.summary.at("concept_id"), 0);
  EXPECT_FALSE(m.trace.empty());
}

TEST_F(Pipeline, SingleLatentDmaMatchesSampling) {
  const auto dma = run(dma_args(1, 0, 1));
  ASSERT_EQ(dma.code, kExitOk) << dma.err;
  const auto sample =
      run({"sample", "--model", *model_, "--concept", "0", "--latent-count", "1", "--steps", "5"});
  ASSERT_EQ(sample.code, kExitOk) << sample.err;
  EXPECT_EQ(dma.status().at("result_hash"), sample.status().at("result_hash"));
}

TEST_F(Pipeline, TamperedOutputIsDetected) {
  auto args = dma_args();
  args.push_back("--seed");
  args.push_back("31");
  const auto r = run(args);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const fs::path dir = r.status().at("run_dir").get<std::string>();
  EXPECT_EQ(run({"verify"}).code, kExitOk);
  {
    std::ofstream f(dir / "prototypes.bin", std::ios::binary | std::ios::app);
    f << 'x';
  }
  const auto v = run({"verify"});
  EXPECT_EQ(v.code, kExitFailure);
  EXPECT_FALSE(json::parse(v.out).at("mismatched").empty());
  const auto rerun = run(args);
  ASSERT_EQ(rerun.code, kExitOk) << rerun.err;
  EXPECT_EQ(rerun.status().at("status"), "ok");
  EXPECT_EQ(rerun.status().at("content_hash"), r.status().at("content_hash"));
  EXPECT_EQ(run({"verify"}).code, kExitOk);
}

TEST_F(Pipeline, ConflictingRunDirectoryIsRefused) {
  const fs::path out = *ws_ / "runs" / "custom-dir";
  auto a = dma_args();
  a.insert(a.end(), {"--out", out.string()});
  ASSERT_EQ(run(a).code, kExitOk);
  auto b = a;
  b.insert(b.end(), {"--seed", "5"});
  const auto refused = run(b);
  EXPECT_EQ(refused.code, kExitFailure);
  EXPECT_EQ(refused.error().at("kind"), "invalid-argument");
  b.push_back("--force");
  EXPECT_EQ(run(b).code, kExitOk);
}

TEST_F(Pipeline, HeldLockExitsThree) {
  {
    std::ofstream lock(WorkspaceLock::path_for(*ws_));
    lock << ::getpid() << "\n";
  }
  auto args = dma_args();
  args.insert(args.end(), {"--seed", "77"});
  const auto r = run(args);
  fs::remove(WorkspaceLock::path_for(*ws_));
  EXPECT_EQ(r.code, kExitLocked);
  EXPECT_EQ(r.error().at("kind"), "workspace-locked");
}

TEST_F(Pipeline, BaselinesEvalAndReport) {
  const auto dma = run(dma_args());
  ASSERT_EQ(dma.code, kExitOk) << dma.err;
  std::vector<std::string> runs{dma.status().at("run_dir").get<std::string>()};
  for (const char* kind : {"avg-codec", "d4m", "replacement"}) {
    auto args = dma_args();
    args[0] = "baseline";
    args.insert(args.end(), {"--kind", kind, "--d4m-depth", "3", "--replacement-t-stop", "2", "--single-step", "2",
                           "--mgd3-guided-steps", "3"});
    const auto r = run(args);
    ASSERT_EQ(r.code, kExitOk) << kind << ": " << r.err;
    runs.push_back(r.status().at("run_dir").get<std::string>());
  }
  const auto sample = run({"sample", "--model", *model_, "--concept", "sun", "--latent-count", "4", "--steps", "5"});
  ASSERT_EQ(sample.code, kExitOk) << sample.err;
  std::string joined;
  for (const auto& r : runs) joined += (joined.empty() ? "" : ",") + r;
  const auto eval = run({"eval", "--embedder", *model_, "--samples", sample.status().at("run_dir").get<std::string>(),
                         "--runs", joined});
  ASSERT_EQ(eval.code, kExitOk) << eval.err;
  const auto report = run({"report", "--inputs", eval.status().at("run_dir").get<std::string>()});
  ASSERT_EQ(report.code, kExitOk) << report.err;
  EXPECT_EQ(run({"verify"}).code, kExitOk);

  const auto mismatched = run({"sample", "--model", *model_, "--concept", "sun", "--latent-count", "4", "--steps", "6"});
  ASSERT_EQ(mismatched.code, kExitOk);
  const auto bad = run({"eval", "--embedder", *model_, "--samples",
                        mismatched.status().at("run_dir").get<std::string>(), "--runs", runs.front()});
  EXPECT_EQ(bad.code, kExitUsage);
}

TEST_F(Pipeline, MissingInputsAreConfigErrors) {
  auto args = dma_args();
  args[2] = (*ws_ / "no-such-model").string();
  const auto r = run(args);
  EXPECT_EQ(r.code, kExitUsage);
  auto unknown = dma_args();
  unknown[4] = "giraffe";
  EXPECT_EQ(run(unknown).code, kExitUsage);
}

}  // namespace
}  // namespace dmavg::cli
