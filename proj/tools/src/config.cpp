// SPDX-License-Identifier: Apache-2.0
#include "dmavg_cli/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace dmavg::cli {
namespace {

json dma_defaults() {
  return {{"latent_count", 64},
          {"iterations", 20},
          {"learning_rate", 2e-2},
          {"t_stop", 10},
          {"num_steps", 20},
          {"guidance", 7.0},
          {"cfg_convention", "conventional"},
          {"tap", ""},
          {"activation_branch", "conditional"},
          {"decode_count", 8},
          {"decode_indices", json::array()},
          {"workers", 1}};
}

std::vector<FlagSpec> dma_flags() {
  return {{"latent-count", "/dma/latent_count", "number of jointly optimized latents (K)"},
          {"iterations", "/dma/iterations", "Adam iterations per latent per step (N)"},
          {"lr", "/dma/learning_rate", "alignment learning rate"},
          {"t-stop", "/dma/t_stop", "last aligned sampler step (inclusive)"},
          {"steps", "/dma/num_steps", "sampler steps (S)"},
          {"guidance", "/dma/guidance", "classifier-free guidance scale"},
          {"cfg-convention", "/dma/cfg_convention", "conventional | paper-verbatim"},
          {"tap", "/dma/tap", "activation tap (empty: bottleneck)"},
          {"activation-branch", "/dma/activation_branch", "conditional | unconditional | guided"},
          {"decode-count", "/dma/decode_count", "number of prototypes to decode"},
          {"decode-indices", "/dma/decode_indices", "comma separated latent indices to decode"},
          {"workers", "/dma/workers", "alignment worker threads"}};
}

std::vector<FlagSpec> model_flags() {
  return {{"model", "/model", "toy model file or train-toy run directory"},
          {"concept", "/concept", "concept index or class name"}};
}

json with_common(json body) {
  json out{{"schema_version", kSchemaVersion}, {"seed", 0}};
  for (auto it = body.begin(); it != body.end(); ++it) out[it.key()] = it.value();
  return out;
}

const std::map<std::string, std::string>& array_element_types() {
  static const std::map<std::string, std::string> types{{"/dma/decode_indices", "integer"},
                                                        {"/sweep/values", "number"},
                                                        {"/runs", "string"},
                                                        {"/inputs", "string"}};
  return types;
}

std::string type_name(const json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

bool element_matches(const json& v, const std::string& type) {
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "string") return v.is_string();
  return false;
}

// Checks user keys against the defaults; merges valid values into `out`.
void merge_checked(const json& defaults, const json& user, const std::string& pointer, json& out,
                   std::vector<std::string>& violations) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = pointer + "/" + it.key();
    if (!defaults.contains(it.key())) {
      violations.push_back(key + ": unknown key");
      continue;
    }
    const json& d = defaults.at(it.key());
    const json& v = it.value();
    if (d.is_object()) {
      if (!v.is_object()) {
        violations.push_back(key + ": expected object, got " + type_name(v));
        continue;
      }
      merge_checked(d, v, key, out[it.key()], violations);
      continue;
    }
    bool ok = false;
    if (key == "/concept") {
      ok = (v.is_number_integer()) || v.is_string();
    } else if (key == "/seed") {
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    } else if (d.is_number_integer()) {
      ok = v.is_number_integer();
    } else if (d.is_number()) {
      ok = v.is_number();
    } else if (d.is_string()) {
      ok = v.is_string();
    } else if (d.is_boolean()) {
      ok = v.is_boolean();
    } else if (d.is_array()) {
      ok = v.is_array();
      if (ok) {
        const auto& type = array_element_types().at(key);
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (!element_matches(v[i], type)) {
            violations.push_back(key + "/" + std::to_string(i) + ": expected " + type + ", got " + type_name(v[i]));
          }
        }
      }
    }
    if (!ok) {
      const std::string want = key == "/concept" ? "integer or string" : type_name(d);
      violations.push_back(key + ": expected " + want + ", got " + type_name(v));
      continue;
    }
    out[it.key()] = v;
  }
}

std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || s.empty()) return std::nullopt;
  return v;
}

std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

std::optional<json> parse_scalar(const std::string& text, const std::string& type) {
  if (type == "integer") {
    if (auto v = parse_int(text)) return json(*v);
    return std::nullopt;
  }
  if (type == "number") {
    if (auto v = parse_double(text)) return json(*v);
    return std::nullopt;
  }
  if (type == "boolean") {
    if (text == "true" || text == "1") return json(true);
    if (text == "false" || text == "0") return json(false);
    return std::nullopt;
  }
  return json(text);
}

std::string scalar_type(const json& d) {
  if (d.is_number_integer()) return "integer";
  if (d.is_number()) return "number";
  if (d.is_boolean()) return "boolean";
  return "string";
}

// Converts flag text to a JSON value typed like the default at `pointer`.
std::optional<json> flag_value(const json& defaults, const std::string& pointer, const std::string& text) {
  if (pointer == "/concept") {
    if (auto v = parse_int(text)) return json(*v);
    return json(text);
  }
  if (pointer == "/seed") {
    if (auto v = parse_int(text); v && *v >= 0) return json(static_cast<std::uint64_t>(*v));
    return std::nullopt;
  }
  const json& d = defaults.at(json::json_pointer(pointer));
  if (d.is_array()) {
    const auto& type = array_element_types().at(pointer);
    json arr = json::array();
    if (text.empty()) return arr;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto v = parse_scalar(item, type);
      if (!v) return std::nullopt;
      arr.push_back(*v);
    }
    return arr;
  }
  return parse_scalar(text, scalar_type(d));
}

template <class Fn>
void check(std::vector<std::string>& out, bool ok, Fn message) {
  if (!ok) out.push_back(message());
}

void check_dma(const json& c, std::vector<std::string>& v) {
  try {
    const auto cfg = dma_config_from(c.at("dma"), 0);
    for (const auto& m : cfg.validate()) v.push_back("/dma: " + m);
  } catch (const Error& e) {
    v.push_back(std::string("/dma: ") + e.what());
  }
}

void check_model_and_concept(const json& c, std::vector<std::string>& v) {
  check(v, !c.at("model").get<std::string>().empty(), [] { return std::string("/model: required"); });
  const auto& concept_value = c.at("concept");
  if (concept_value.is_number_integer()) {
    check(v, concept_value.get<long long>() >= 0, [] { return std::string("/concept: must be >= 0"); });
  } else {
    check(v, !concept_value.get<std::string>().empty(), [] { return std::string("/concept: must not be empty"); });
  }
}

bool is_integral(double x) { return std::isfinite(x) && std::floor(x) == x; }

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train-toy", "sample", "dma", "modes",
                                              "baseline", "ablate",    "eval",   "report"};
  return names;
}

json default_config(const std::string& command) {
  if (command == "gen-data") {
    return with_common({{"data", {{"side", 16}, {"samples_per_class", 256}}}});
  }
  if (command == "train-toy") {
    return with_common({{"dataset", ""},
                        {"denoiser",
                         {{"time_features", 32},
                          {"cond_dim", 64},
                          {"enc1", 256},
                          {"enc2", 128},
                          {"bottleneck", 128},
                          {"train_steps", 1000},
                          {"beta_start", 1e-4},
                          {"beta_end", 0.02}}},
                        {"training",
                         {{"epochs", 100},
                          {"batch_size", 32},
                          {"learning_rate", 1e-3},
                          {"class_dropout", 0.1},
                          {"skip_dropout", 0.5}}},
                        {"embedder",
                         {{"hidden", 128},
                          {"embedding_dim", 32},
                          {"attribute_dim", 16},
                          {"epochs", 30},
                          {"batch_size", 32},
                          {"learning_rate", 2e-3}}}});
  }
  if (command == "sample") {
    return with_common({{"model", ""},
                        {"concept", 0},
                        {"sample",
                         {{"latent_count", 8},
                          {"num_steps", 20},
                          {"guidance", 7.0},
                          {"cfg_convention", "conventional"}}}});
  }
  if (command == "dma") {
    return with_common({{"model", ""}, {"concept", 0}, {"dma", dma_defaults()}});
  }
  if (command == "baseline") {
    return with_common({{"model", ""},
                        {"concept", 0},
                        {"dma", dma_defaults()},
                        {"baseline",
                         {{"kind", "avg-codec"},
                          {"d4m_depth", 14},
                          {"mgd3_lambda", 0.1},
                          {"mgd3_guided_steps", 10},
                          {"single_step", 10},
                          {"replacement_t_stop", 10}}}});
  }
  if (command == "modes") {
    return with_common({{"model", ""},
                        {"embedder", ""},
                        {"concept", 0},
                        {"dma", dma_defaults()},
                        {"modes",
                         {{"sample_guidance", 1.0},
                          {"pca_dims", 0},
                          {"n_clusters", 2},
                          {"attribute", ""},
                          {"refinement", "low-rank-adapter"},
                          {"adapter_steps", 2000},
                          {"adapter_learning_rate", 1e-4},
                          {"adapter_rank", 1},
                          {"adapter_guidance", 3.0},
                          {"inversion_steps", 3000},
                          {"inversion_learning_rate", 1e-2},
                          {"inversion_guidance", 7.0}}}});
  }
  if (command == "ablate") {
    return with_common({{"model", ""},
                        {"embedder", ""},
                        {"concept", 0},
                        {"dma", dma_defaults()},
                        {"sweep", {{"parameter", "iterations"}, {"values", json::array({0, 5, 20})}}}});
  }
  if (command == "eval") {
    return with_common({{"embedder", ""},
                        {"backend", "toy-embedder"},
                        {"samples", ""},
                        {"runs", json::array()},
                        {"category", "toy"}});
  }
  if (command == "report") {
    return with_common({{"inputs", json::array()}});
  }
  throw InvalidArgument("unknown command '" + command + "'");
}

const std::vector<FlagSpec>& flags_for(const std::string& command) {
  static const std::map<std::string, std::vector<FlagSpec>> table = [] {
    std::map<std::string, std::vector<FlagSpec>> t;
    auto join = [](std::vector<FlagSpec> a, const std::vector<FlagSpec>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    t["gen-data"] = {{"side", "/data/side", "image side length in pixels"},
                     {"samples-per-class", "/data/samples_per_class", "images per class"}};
    t["train-toy"] = {{"dataset", "/dataset", "gen-data run directory"},
                      {"epochs", "/training/epochs", "denoiser training epochs"},
                      {"batch-size", "/training/batch_size", "denoiser batch size"},
                      {"lr", "/training/learning_rate", "denoiser learning rate"},
                      {"class-dropout", "/training/class_dropout", "probability of the null condition"},
                      {"skip-dropout", "/training/skip_dropout", "probability of dropping skip paths"},
                      {"bottleneck", "/denoiser/bottleneck", "bottleneck width"},
                      {"embedder-epochs", "/embedder/epochs", "embedder training epochs"}};
    t["sample"] = join(model_flags(), {{"latent-count", "/sample/latent_count", "number of samples"},
                                       {"steps", "/sample/num_steps", "sampler steps"},
                                       {"guidance", "/sample/guidance", "classifier-free guidance scale"},
                                       {"cfg-convention", "/sample/cfg_convention", "conventional | paper-verbatim"}});
    t["dma"] = join(model_flags(), dma_flags());
    t["baseline"] = join(join(model_flags(), dma_flags()),
                         {{"kind", "/baseline/kind",
                           "avg-codec | d4m | mgd3 | precomputed-mean | single-timestep | replacement"},
                          {"d4m-depth", "/baseline/d4m_depth", "denoising steps after noise injection"},
                          {"mgd3-lambda", "/baseline/mgd3_lambda", "mode guidance weight"},
                          {"mgd3-guided-steps", "/baseline/mgd3_guided_steps", "steps with mode guidance"},
                          {"single-step", "/baseline/single_step", "aligned step of the single-timestep ablation"},
                          {"replacement-t-stop", "/baseline/replacement_t_stop", "last substituted step"}});
    t["modes"] = join(join(model_flags(), dma_flags()),
                      {{"embedder", "/embedder", "toy embedder file or train-toy run directory"},
                       {"sample-guidance", "/modes/sample_guidance", "guidance of the clustered sample pool"},
                       {"pca-dims", "/modes/pca_dims", "PCA dimensions (0: 2, or 10 when grounded)"},
                       {"clusters", "/modes/n_clusters", "number of mixture components"},
                       {"attribute", "/modes/attribute", "grounded clustering attribute (shape, color)"},
                       {"refinement", "/modes/refinement", "none | inversion-embedding | low-rank-adapter"},
                       {"adapter-steps", "/modes/adapter_steps", "adapter training steps"},
                       {"adapter-lr", "/modes/adapter_learning_rate", "adapter learning rate"},
                       {"adapter-rank", "/modes/adapter_rank", "adapter rank"},
                       {"adapter-guidance", "/modes/adapter_guidance", "guidance with an adapter"},
                       {"inversion-steps", "/modes/inversion_steps", "embedding training steps"},
                       {"inversion-lr", "/modes/inversion_learning_rate", "embedding learning rate"},
                       {"inversion-guidance", "/modes/inversion_guidance", "guidance with a learned embedding"}});
    t["ablate"] = join(join(model_flags(), dma_flags()),
                       {{"embedder", "/embedder", "optional embedder for summary consistency"},
                        {"parameter", "/sweep/parameter",
                         "iterations | t_stop | guidance | latent_count | learning_rate | num_steps"},
                        {"values", "/sweep/values", "comma separated sweep values"}});
    t["eval"] = {{"embedder", "/embedder", "toy embedder file or train-toy run directory"},
                 {"backend", "/backend", "toy-embedder | pixel-mse"},
                 {"samples", "/samples", "sample run directory used for representativeness"},
                 {"runs", "/runs", "comma separated dma, baseline or modes run directories"},
                 {"category", "/category", "category label in the report"}};
    t["report"] = {{"inputs", "/inputs", "comma separated eval run directories or metrics files"}};
    return t;
  }();
  const auto it = table.find(command);
  if (it == table.end()) throw InvalidArgument("unknown command '" + command + "'");
  return it->second;
}

json ResolvedConfig::to_json() const {
  return {{"command", command}, {"workspace", workspace.string()}, {"config", config}};
}

ResolvedConfig resolve_config(const Invocation& invocation, const std::optional<std::string>& file_text,
                              const std::map<std::string, std::string>& environment) {
  const json defaults = default_config(invocation.command);
  json config = defaults;
  std::vector<std::string> violations;
  if (file_text) {
    json user;
    try {
      user = json::parse(*file_text);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file is not valid JSON", {std::string("config: ") + e.what()});
    }
    if (!user.is_object()) {
      throw ConfigError("config file must hold a JSON object", {"config: expected object"});
    }
    if (!user.contains("schema_version")) {
      violations.push_back("/schema_version: required in config files");
    } else if (user.at("schema_version") != kSchemaVersion) {
      violations.push_back("/schema_version: unsupported version " + user.at("schema_version").dump() +
                           " (expected " + std::to_string(kSchemaVersion) + ")");
    }
    merge_checked(defaults, user, "", config, violations);
  }
  const auto& flags = flags_for(invocation.command);
  for (const auto& [pointer, text] : invocation.overrides) {
    std::string flag = pointer;
    for (const auto& f : flags) {
      if (f.pointer == pointer) flag = "--" + f.flag;
    }
    if (pointer != "/seed" && pointer != "/concept" && !defaults.contains(json::json_pointer(pointer))) {
      violations.push_back(flag + ": unknown parameter");
      continue;
    }
    auto value = flag_value(defaults, pointer, text);
    if (!value) {
      violations.push_back(flag + ": cannot parse '" + text + "'");
      continue;
    }
    config[json::json_pointer(pointer)] = *value;
  }
  if (invocation.seed) config["seed"] = *invocation.seed;
  if (violations.empty()) {
    for (auto& m : validate_config(invocation.command, config)) violations.push_back(std::move(m));
  }
  if (!violations.empty()) {
    throw ConfigError("invalid configuration for '" + invocation.command + "'", violations);
  }
  ResolvedConfig out;
  out.command = invocation.command;
  const auto ws = environment.find(kWorkspaceEnv);
  out.workspace = (ws != environment.end() && !ws->second.empty()) ? std::filesystem::path(ws->second)
                                                                   : std::filesystem::path("workspace");
  out.workspace = std::filesystem::absolute(out.workspace).lexically_normal();
  out.config = std::move(config);
  return out;
}

ResolvedConfig resolve_config(const Invocation& invocation) {
  std::optional<std::string> text;
  if (invocation.config_file) {
    std::ifstream in(*invocation.config_file, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + invocation.config_file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  std::map<std::string, std::string> env;
  if (const char* ws = std::getenv(kWorkspaceEnv)) env[kWorkspaceEnv] = ws;
  return resolve_config(invocation, text, env);
}

std::vector<std::string> validate_config(const std::string& command, const json& c) {
  std::vector<std::string> v;
  if (command == "gen-data") {
    const auto& d = c.at("data");
    check(v, d.at("side").get<int>() >= 4, [] { return std::string("/data/side: must be >= 4"); });
    check(v, d.at("samples_per_class").get<int>() >= 1,
          [] { return std::string("/data/samples_per_class: must be >= 1"); });
  } else if (command == "train-toy") {
    check(v, !c.at("dataset").get<std::string>().empty(), [] { return std::string("/dataset: required"); });
    for (const auto& key : {"time_features", "cond_dim", "enc1", "enc2", "bottleneck", "train_steps"}) {
      check(v, c.at("denoiser").at(key).get<int>() >= 1,
            [&] { return "/denoiser/" + std::string(key) + ": must be >= 1"; });
    }
    const double b0 = c.at("denoiser").at("beta_start").get<double>();
    const double b1 = c.at("denoiser").at("beta_end").get<double>();
    check(v, b0 > 0.0 && b1 < 1.0 && b0 <= b1,
          [] { return std::string("/denoiser: need 0 < beta_start <= beta_end < 1"); });
    const auto& t = c.at("training");
    check(v, t.at("epochs").get<int>() >= 0, [] { return std::string("/training/epochs: must be >= 0"); });
    check(v, t.at("batch_size").get<int>() >= 1, [] { return std::string("/training/batch_size: must be >= 1"); });
    check(v, t.at("learning_rate").get<double>() > 0.0,
          [] { return std::string("/training/learning_rate: must be > 0"); });
    for (const auto& key : {"class_dropout", "skip_dropout"}) {
      const double p = t.at(key).get<double>();
      check(v, p >= 0.0 && p < 1.0, [&] { return "/training/" + std::string(key) + ": must be in [0, 1)"; });
    }
    const auto& e = c.at("embedder");
    for (const auto& key : {"hidden", "embedding_dim", "attribute_dim", "batch_size"}) {
      check(v, e.at(key).get<int>() >= 1, [&] { return "/embedder/" + std::string(key) + ": must be >= 1"; });
    }
    check(v, e.at("epochs").get<int>() >= 0, [] { return std::string("/embedder/epochs: must be >= 0"); });
    check(v, e.at("learning_rate").get<double>() > 0.0,
          [] { return std::string("/embedder/learning_rate: must be > 0"); });
  } else if (command == "sample") {
    check_model_and_concept(c, v);
    const auto& s = c.at("sample");
    check(v, s.at("latent_count").get<int>() >= 1, [] { return std::string("/sample/latent_count: must be >= 1"); });
    check(v, s.at("num_steps").get<int>() >= 1, [] { return std::string("/sample/num_steps: must be >= 1"); });
    const auto conv = s.at("cfg_convention").get<std::string>();
    check(v, conv == "conventional" || conv == "paper-verbatim",
          [&] { return "/sample/cfg_convention: unknown convention '" + conv + "'"; });
  } else if (command == "dma") {
    check_model_and_concept(c, v);
    check_dma(c, v);
  } else if (command == "baseline") {
    check_model_and_concept(c, v);
    check_dma(c, v);
    try {
      const auto b = baseline_config_from(c.at("baseline"));
      for (const auto& m : b.validate(c.at("dma").at("num_steps").get<int>())) v.push_back("/baseline: " + m);
    } catch (const Error& e) {
      v.push_back(std::string("/baseline: ") + e.what());
    }
  } else if (command == "modes") {
    check_model_and_concept(c, v);
    check(v, !c.at("embedder").get<std::string>().empty(), [] { return std::string("/embedder: required"); });
    check_dma(c, v);
    const auto& m = c.at("modes");
    check(v, m.at("n_clusters").get<int>() >= 1, [] { return std::string("/modes/n_clusters: must be >= 1"); });
    check(v, m.at("n_clusters").get<int>() <= c.at("dma").at("latent_count").get<int>(),
          [] { return std::string("/modes/n_clusters: must not exceed /dma/latent_count"); });
    check(v, m.at("pca_dims").get<int>() >= 0, [] { return std::string("/modes/pca_dims: must be >= 0"); });
    try {
      (void)refinement_from_string(m.at("refinement").get<std::string>());
    } catch (const Error& e) {
      v.push_back(std::string("/modes/refinement: ") + e.what());
    }
    for (const auto& key : {"adapter_steps", "inversion_steps"}) {
      check(v, m.at(key).get<int>() >= 0, [&] { return "/modes/" + std::string(key) + ": must be >= 0"; });
    }
    for (const auto& key : {"adapter_learning_rate", "inversion_learning_rate"}) {
      check(v, m.at(key).get<double>() > 0.0, [&] { return "/modes/" + std::string(key) + ": must be > 0"; });
    }
    check(v, m.at("adapter_rank").get<int>() >= 1, [] { return std::string("/modes/adapter_rank: must be >= 1"); });
  } else if (command == "ablate") {
    check_model_and_concept(c, v);
    check_dma(c, v);
    const auto& s = c.at("sweep");
    static const std::set<std::string> integral{"iterations", "t_stop", "latent_count", "num_steps"};
    static const std::set<std::string> real{"guidance", "learning_rate"};
    const auto p = s.at("parameter").get<std::string>();
    const bool known = integral.count(p) || real.count(p);
    check(v, known, [&] { return "/sweep/parameter: unknown sweep parameter '" + p + "'"; });
    check(v, !s.at("values").empty(), [] { return std::string("/sweep/values: must not be empty"); });
    std::set<double> seen;
    for (std::size_t i = 0; i < s.at("values").size(); ++i) {
      const double x = s.at("values")[i].get<double>();
      if (integral.count(p)) {
        check(v, is_integral(x), [&] { return "/sweep/values/" + std::to_string(i) + ": must be an integer"; });
      }
      check(v, seen.insert(x).second, [&] { return "/sweep/values/" + std::to_string(i) + ": duplicate value"; });
      if (known && (!integral.count(p) || is_integral(x))) {
        json child = c.at("dma");
        if (integral.count(p)) {
          child[p] = static_cast<long long>(x);
        } else {
          child[p] = x;
        }
        const auto cfg = dma_config_from(child, 0);
        for (const auto& m : cfg.validate()) {
          v.push_back("/sweep/values/" + std::to_string(i) + ": " + m);
        }
      }
    }
  } else if (command == "eval") {
    const auto backend = c.at("backend").get<std::string>();
    static const std::set<std::string> known{"toy-embedder", "pixel-mse", "imagereward", "clip", "dreamsim", "lpips"};
    check(v, known.count(backend) != 0, [&] { return "/backend: unknown backend '" + backend + "'"; });
    if (backend == "toy-embedder") {
      check(v, !c.at("embedder").get<std::string>().empty(),
            [] { return std::string("/embedder: required by the toy-embedder backend"); });
    }
    check(v, !c.at("samples").get<std::string>().empty(), [] { return std::string("/samples: required"); });
    check(v, !c.at("runs").empty(), [] { return std::string("/runs: must not be empty"); });
    check(v, !c.at("category").get<std::string>().empty(), [] { return std::string("/category: must not be empty"); });
  } else if (command == "report") {
    check(v, !c.at("inputs").empty(), [] { return std::string("/inputs: must not be empty"); });
  }
  return v;
}

DmaConfig dma_config_from(const json& s, std::uint64_t seed) {
  DmaConfig c;
  c.latent_count = s.at("latent_count").get<int>();
  c.iterations = s.at("iterations").get<int>();
  c.learning_rate = s.at("learning_rate").get<double>();
  c.t_stop = s.at("t_stop").get<int>();
  c.num_steps = s.at("num_steps").get<int>();
  c.guidance.scale = s.at("guidance").get<double>();
  const auto conv = s.at("cfg_convention").get<std::string>();
  if (conv == "conventional") {
    c.guidance.convention = CfgConvention::conventional;
  } else if (conv == "paper-verbatim") {
    c.guidance.convention = CfgConvention::paper_verbatim;
  } else {
    throw InvalidArgument("unknown cfg convention '" + conv + "'");
  }
  c.tap = s.at("tap").get<std::string>();
  const auto branch = s.at("activation_branch").get<std::string>();
  if (branch == "conditional") {
    c.activation_branch = ActivationBranch::conditional;
  } else if (branch == "unconditional") {
    c.activation_branch = ActivationBranch::unconditional;
  } else if (branch == "guided") {
    c.activation_branch = ActivationBranch::guided;
  } else {
    throw InvalidArgument("unknown activation branch '" + branch + "'");
  }
  c.decode_count = s.at("decode_count").get<int>();
  c.decode_indices = s.at("decode_indices").get<std::vector<int>>();
  c.workers = s.at("workers").get<int>();
  c.seed = seed;
  return c;
}

BaselineConfig baseline_config_from(const json& s) {
  BaselineConfig b;
  b.kind = baseline_from_string(s.at("kind").get<std::string>());
  b.d4m_depth = s.at("d4m_depth").get<int>();
  b.mgd3_lambda = s.at("mgd3_lambda").get<double>();
  b.mgd3_guided_steps = s.at("mgd3_guided_steps").get<int>();
  b.single_step = s.at("single_step").get<int>();
  b.replacement_t_stop = s.at("replacement_t_stop").get<int>();
  return b;
}

ToyDenoiserConfig toy_config_from(const json& s, LatentShape shape, int num_concepts) {
  ToyDenoiserConfig c;
  c.shape = shape;
  c.num_concepts = num_concepts;
  c.time_features = s.at("time_features").get<int>();
  c.cond_dim = s.at("cond_dim").get<int>();
  c.enc1 = s.at("enc1").get<int>();
  c.enc2 = s.at("enc2").get<int>();
  c.bottleneck = s.at("bottleneck").get<int>();
  c.train_steps = s.at("train_steps").get<int>();
  c.beta = BetaSpec::linear(s.at("beta_start").get<double>(), s.at("beta_end").get<double>());
  return c;
}

ToyTrainingConfig toy_training_from(const json& s, std::uint64_t seed) {
  ToyTrainingConfig t;
  t.epochs = s.at("epochs").get<int>();
  t.batch_size = s.at("batch_size").get<int>();
  t.learning_rate = s.at("learning_rate").get<double>();
  t.class_dropout = s.at("class_dropout").get<double>();
  t.skip_dropout = s.at("skip_dropout").get<double>();
  t.seed = seed;
  return t;
}

ToyEmbedderConfig embedder_config_from(const json& s, std::uint64_t seed) {
  ToyEmbedderConfig e;
  e.hidden = s.at("hidden").get<int>();
  e.embedding_dim = s.at("embedding_dim").get<int>();
  e.attribute_dim = s.at("attribute_dim").get<int>();
  e.epochs = s.at("epochs").get<int>();
  e.batch_size = s.at("batch_size").get<int>();
  e.learning_rate = s.at("learning_rate").get<double>();
  e.seed = seed;
  return e;
}

PerClusterOptions per_cluster_options_from(const json& s, std::uint64_t seed) {
  PerClusterOptions o;
  o.kind = refinement_from_string(s.at("refinement").get<std::string>());
  o.adapter = adapter_defaults();
  o.adapter.steps = s.at("adapter_steps").get<int>();
  o.adapter.learning_rate = s.at("adapter_learning_rate").get<double>();
  o.adapter.rank = s.at("adapter_rank").get<int>();
  o.adapter.seed = seed;
  o.inversion = inversion_defaults();
  o.inversion.steps = s.at("inversion_steps").get<int>();
  o.inversion.learning_rate = s.at("inversion_learning_rate").get<double>();
  o.inversion.seed = seed;
  o.adapter_guidance = s.at("adapter_guidance").get<double>();
  o.inversion_guidance = s.at("inversion_guidance").get<double>();
  return o;
}

}  // namespace dmavg::cli
