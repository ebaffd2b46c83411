// SPDX-License-Identifier: Apache-2.0
#include "dmavg_cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include "dmavg/baselines.hpp"
#include "dmavg/container.hpp"
#include "dmavg/dma.hpp"
#include "dmavg/eval.hpp"
#include "dmavg/hashing.hpp"
#include "dmavg/modes.hpp"
#include "dmavg/random.hpp"
#include "dmavg/toy_data.hpp"
#include "dmavg/toy_denoiser.hpp"
#include "dmavg/toy_embedder.hpp"

namespace dmavg::cli {

namespace fs = std::filesystem;

void save_images(const fs::path& path, const Batch& images, LatentShape shape) {
  if (images.cols() != shape.size()) throw InvalidArgument("image rows do not match the image shape");
  Container c;
  c.tensors["images"] = TensorEntry::from(images.data(), {images.rows(), static_cast<std::uint64_t>(shape.channels),
                                                          static_cast<std::uint64_t>(shape.height),
                                                          static_cast<std::uint64_t>(shape.width)});
  c.meta_json = json{{"kind", "images"}, {"count", images.rows()}}.dump();
  write_container(c, path);
}

Batch load_images(const fs::path& path, LatentShape* shape) {
  const Container c = read_container(path);
  const auto& t = c.at("images");
  if (t.shape.size() != 4) throw IoError(path.string() + ": images tensor must be 4-D");
  const LatentShape s{static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]), static_cast<int>(t.shape[3])};
  if (shape) *shape = s;
  return Batch(static_cast<std::size_t>(t.shape[0]), s.size(), t.as_f64());
}

namespace {

using Clock = std::chrono::steady_clock;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string rel_sidecar(const std::string& relative) { return sidecar_path(relative).generic_string(); }

// Resolved inputs of a run: file references for the manifest plus the
// content identity substituted for path-valued config keys.
struct Inputs {
  std::vector<FileRef> refs;
  std::map<std::string, json> identity;  // config pointer -> content hash(es)
  std::vector<std::string> violations;

  void throw_if_invalid(const std::string& command) const {
    if (!violations.empty()) throw ConfigError("invalid inputs for '" + command + "'", violations);
  }
};

fs::path model_file(const std::string& text, const char* default_name) {
  fs::path p(text);
  if (fs::is_directory(p)) p /= default_name;
  return fs::absolute(p).lexically_normal();
}

// A model-like container file plus its sidecar.
std::string add_container_input(Inputs& in, const std::string& pointer, const std::string& text,
                                const char* default_name, fs::path* resolved) {
  const fs::path p = model_file(text, default_name);
  if (resolved) *resolved = p;
  if (!fs::is_regular_file(p) || !fs::is_regular_file(sidecar_path(p))) {
    in.violations.push_back(pointer + ": no model container at " + p.string());
    return {};
  }
  const std::string h = file_hash(p);
  const std::string hs = file_hash(sidecar_path(p));
  in.refs.push_back({p.string(), h});
  in.refs.push_back({sidecar_path(p).string(), hs});
  const std::string combined = hash_hex(h + hs);
  in.identity[pointer] = combined;
  return combined;
}

// A finished run directory: identity is its manifest content hash.
std::optional<RunManifest> add_run_input(Inputs& in, const std::string& pointer, const std::string& text,
                                         const std::set<std::string>& commands, fs::path* resolved) {
  const fs::path dir = fs::absolute(fs::path(text)).lexically_normal();
  if (resolved) *resolved = dir;
  const fs::path mp = dir / kManifestName;
  if (!fs::is_regular_file(mp)) {
    in.violations.push_back(pointer + ": " + dir.string() + " is not a run directory");
    return std::nullopt;
  }
  RunManifest m;
  try {
    m = RunManifest::load(mp);
  } catch (const Error& e) {
    in.violations.push_back(pointer + ": " + e.what());
    return std::nullopt;
  }
  if (!commands.count(m.command)) {
    in.violations.push_back(pointer + ": " + dir.string() + " holds a '" + m.command + "' run");
    return std::nullopt;
  }
  if (!run_is_current(dir, m.run_id)) {
    in.violations.push_back(pointer + ": outputs of " + dir.string() + " are missing or modified");
    return std::nullopt;
  }
  const std::string h = m.content_hash();
  in.refs.push_back({mp.string(), h});
  if (in.identity.count(pointer)) {
    if (!in.identity[pointer].is_array()) in.identity[pointer] = json::array({in.identity[pointer]});
    in.identity[pointer].push_back(h);
  } else {
    in.identity[pointer] = h;
  }
  return m;
}

std::string model_hash_of(const RunManifest& m) {
  for (const auto& r : m.inputs) {
    if (fs::path(r.path).filename() != "" && fs::path(r.path).extension() == ".bin" &&
        fs::path(r.path).filename().string().rfind("model", 0) == 0) {
      return r.hash;
    }
  }
  return {};
}

std::vector<std::string> load_class_names(const fs::path& model_path) {
  const fs::path p = model_path.parent_path() / "classes.json";
  if (!fs::is_regular_file(p)) return {};
  return json::parse(read_text(p)).at("classes").get<std::vector<std::string>>();
}

int resolve_concept(const json& value, const Denoiser& model, const fs::path& model_path) {
  int id = -1;
  if (value.is_number_integer()) {
    id = value.get<int>();
  } else {
    const auto names = load_class_names(model_path);
    const auto name = value.get<std::string>();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
      throw ConfigError("unknown concept", {"/concept: no class named '" + name + "' next to " + model_path.string()});
    }
    id = static_cast<int>(it - names.begin());
  }
  if (id < 0 || id >= model.num_concepts()) {
    throw ConfigError("unknown concept", {"/concept: " + std::to_string(id) + " is outside [0, " +
                                              std::to_string(model.num_concepts()) + ")"});
  }
  return id;
}

std::string concept_name(int id, const fs::path& model_path) {
  const auto names = load_class_names(model_path);
  if (id >= 0 && static_cast<std::size_t>(id) < names.size()) return names[static_cast<std::size_t>(id)];
  return std::to_string(id);
}

void write_images(RunWriter& w, const std::string& stem, const Batch& images, LatentShape shape) {
  save_images(w.path(stem + ".bin"), images, shape);
  w.add_output(stem + ".bin");
  w.add_output(rel_sidecar(stem + ".bin"));
  const int n = static_cast<int>(std::min<std::size_t>(images.rows(), 64));
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  render_grid(images.select(idx), shape, std::min(n, 8), w.path(stem + ".png"));
  w.add_output(stem + ".png");
}

template <class Body>
RunOutcome execute(const ResolvedConfig& rc, const RunOptions& o, const Inputs& inputs, Body&& body) {
  inputs.throw_if_invalid(rc.command);
  const auto start = Clock::now();
  json identity_config = rc.config;
  for (const auto& [pointer, value] : inputs.identity) identity_config[json::json_pointer(pointer)] = value;
  const json identity{{"command", rc.command}, {"tool", tool_version()}, {"config", identity_config}};
  const std::string run_id = hash_hex(identity.dump());
  const fs::path dir = o.out ? fs::absolute(*o.out).lexically_normal() : rc.workspace / "runs" / rc.command / run_id;

  std::optional<WorkspaceLock> lock;
  if (!o.locked) lock.emplace(rc.workspace);
  if (fs::exists(dir / kManifestName)) {
    if (!o.force && run_is_current(dir, run_id)) {
      return {dir, RunManifest::load(dir / kManifestName), true};
    }
    if (!o.force) {
      const auto previous = RunManifest::load(dir / kManifestName);
      if (previous.run_id != run_id) {
        throw InvalidArgument(dir.string() + " holds a different run (" + previous.run_id +
                              "); pass --force to replace it");
      }
    }
    fs::remove_all(dir);
  } else if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw InvalidArgument(dir.string() + " is not empty and holds no manifest");
  }

  RunManifest m;
  m.command = rc.command;
  m.run_id = run_id;
  m.tool_version = tool_version();
  m.config = rc.config;
  m.inputs = inputs.refs;
  m.seeds["master"] = rc.config.at("seed").get<std::uint64_t>();
  try {
    RunWriter w(dir, std::move(m));
    body(w);
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return {dir, w.finish(seconds), false};
  } catch (...) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    throw;
  }
}

std::uint64_t seed_of(const ResolvedConfig& rc) { return rc.config.at("seed").get<std::uint64_t>(); }

struct LoadedModel {
  std::shared_ptr<ToyDenoiser> model;
  fs::path path;
  int concept_id = 0;
};

LoadedModel load_model_and_concept(const ResolvedConfig& rc, const fs::path& path) {
  LoadedModel lm;
  lm.path = path;
  lm.model = ToyDenoiser::load(path);
  lm.concept_id = resolve_concept(rc.config.at("concept"), *lm.model, path);
  return lm;
}

json trace_summary(const DmaTrace& trace) {
  double aligned_loss_after = 0.0;
  int aligned = 0;
  for (const auto& s : trace.steps) {
    if (s.aligned) {
      aligned_loss_after += s.loss_after;
      ++aligned;
    }
  }
  return {{"aligned_steps", aligned},
          {"final_spread", trace.steps.empty() ? 0.0 : trace.steps.back().spread_after},
          {"mean_loss_after", aligned ? aligned_loss_after / aligned : 0.0},
          {"trace_hash", trace.hash()}};
}

}  // namespace

RunOutcome cmd_gen_data(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto& d = rc.config.at("data");
    const std::uint64_t seed = derive_seed(seed_of(rc), "dataset");
    w.add_seed("dataset", seed);
    const auto spec = desk_dataset_spec(d.at("side").get<int>(), d.at("samples_per_class").get<int>(), seed);
    const auto data = generate_dataset(spec);
    save_dataset(data, w.dir());
    w.add_tree("images");
    w.add_output("labels.jsonl");
    w.add_output("dataset.json");
    std::vector<int> preview;
    for (int c = 0; c < static_cast<int>(data.class_names.size()); ++c) {
      const auto idx = indices_of_class(data, c);
      for (std::size_t i = 0; i < std::min<std::size_t>(8, idx.size()); ++i) preview.push_back(idx[i]);
    }
    render_grid(data.pixels.select(preview), data.shape, 8, w.path("preview.png"));
    w.add_output("preview.png");
    w.set_result_hash(hash_hex(data.pixels.values()));
    w.summary() = {{"classes", data.class_names}, {"images", data.pixels.rows()}, {"modes", data.total_modes}};
  });
}

RunOutcome cmd_train_toy(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path dataset_dir;
  add_run_input(inputs, "/dataset", rc.config.at("dataset").get<std::string>(), {"gen-data"}, &dataset_dir);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto data = load_dataset(dataset_dir);
    const auto cfg = toy_config_from(rc.config.at("denoiser"), data.shape, static_cast<int>(data.class_names.size()));
    const std::uint64_t train_seed = derive_seed(seed_of(rc), "train");
    const std::uint64_t embedder_seed = derive_seed(seed_of(rc), "embedder");
    w.add_seed("train", train_seed);
    w.add_seed("embedder", embedder_seed);
    TrainingLog log;
    const auto model = train_toy_denoiser(data, cfg, toy_training_from(rc.config.at("training"), train_seed), &log);
    model->save(w.path("model.bin"));
    w.add_output("model.bin");
    w.add_output(rel_sidecar("model.bin"));
    const auto embedder = train_toy_embedder(data, embedder_config_from(rc.config.at("embedder"), embedder_seed));
    embedder.save(w.path("embedder.bin"));
    w.add_output("embedder.bin");
    w.add_output(rel_sidecar("embedder.bin"));
    const auto predicted = embedder.classify_modes(data.pixels);
    int correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == data.labels[i].global_mode;
    const double accuracy = predicted.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(predicted.size());
    write_text(w.path("classes.json"),
               json{{"classes", data.class_names}, {"modes", data.total_modes}}.dump(2) + "\n");
    w.add_output("classes.json");
    const json log_json{{"initial_loss", log.initial_loss},
                        {"final_loss", log.final_loss},
                        {"epoch_loss", log.epoch_loss},
                        {"embedder_mode_accuracy", accuracy}};
    write_text(w.path("training_log.json"), log_json.dump(2) + "\n");
    w.add_output("training_log.json");
    w.set_result_hash(file_hash(w.path("model.bin")));
    w.summary() = {{"initial_loss", log.initial_loss},
                   {"final_loss", log.final_loss},
                   {"embedder_mode_accuracy", accuracy},
                   {"embedder_id", embedder.id()}};
  });
}

RunOutcome cmd_sample(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path model_path;
  add_container_input(inputs, "/model", rc.config.at("model").get<std::string>(), "model.bin", &model_path);
  inputs.throw_if_invalid(rc.command);
  const auto lm = load_model_and_concept(rc, model_path);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto& s = rc.config.at("sample");
    json dma_like = {{"latent_count", s.at("latent_count")},
                     {"iterations", 0},
                     {"learning_rate", 2e-2},
                     {"t_stop", 0},
                     {"num_steps", s.at("num_steps")},
                     {"guidance", s.at("guidance")},
                     {"cfg_convention", s.at("cfg_convention")},
                     {"tap", ""},
                     {"activation_branch", "conditional"},
                     {"decode_count", 1},
                     {"decode_indices", json::array()},
                     {"workers", 1}};
    const auto cfg = dma_config_from(dma_like, seed_of(rc));
    w.add_seed("latents", cfg.seed);
    const auto latents = init_latents(cfg.latent_count, lm.model->latent_shape(), cfg.seed);
    const auto cond = ConditioningSpec::for_concept(lm.concept_id);
    const Batch clean =
        sample_ddim(*lm.model, latents.latents, schedule_for(*lm.model, cfg.num_steps), cond, cfg.guidance);
    const Batch images = decode_image(*lm.model, clean);
    write_images(w, "samples", images, lm.model->latent_shape());
    w.set_result_hash(hash_hex(images.values()));
    w.summary() = {{"concept", concept_name(lm.concept_id, model_path)},
                   {"concept_id", lm.concept_id}, {"count", images.rows()}};
  });
}

RunOutcome cmd_dma(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path model_path;
  add_container_input(inputs, "/model", rc.config.at("model").get<std::string>(), "model.bin", &model_path);
  inputs.throw_if_invalid(rc.command);
  const auto lm = load_model_and_concept(rc, model_path);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto cfg = dma_config_from(rc.config.at("dma"), seed_of(rc));
    w.add_seed("latents", cfg.seed);
    const auto result = dma_run(lm.model, ConditioningSpec::for_concept(lm.concept_id), cfg);
    write_images(w, "prototypes", result.prototypes, lm.model->latent_shape());
    write_text(w.path("trace.json"), result.trace.to_json() + "\n");
    w.set_trace("trace.json");
    result.state.save(w.path("state.bin"));
    w.add_output("state.bin");
    w.add_output(rel_sidecar("state.bin"));
    w.set_result_hash(hash_hex(result.prototypes.values()));
    w.summary() = {{"concept", concept_name(lm.concept_id, model_path)},
                   {"concept_id", lm.concept_id},
                   {"method", "dma"},
                   {"config_hash", cfg.hash()},
                   {"prototype_indices", result.prototype_indices},
                   {"trace", trace_summary(result.trace)}};
  });
}

RunOutcome cmd_baseline(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path model_path;
  add_container_input(inputs, "/model", rc.config.at("model").get<std::string>(), "model.bin", &model_path);
  inputs.throw_if_invalid(rc.command);
  const auto lm = load_model_and_concept(rc, model_path);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto cfg = dma_config_from(rc.config.at("dma"), seed_of(rc));
    const auto b = baseline_config_from(rc.config.at("baseline"));
    w.add_seed("latents", cfg.seed);
    if (b.kind == BaselineKind::d4m) w.add_seed("d4m-noise", derive_seed(cfg.seed, "d4m-noise"));
    const auto result = run_baseline(lm.model, ConditioningSpec::for_concept(lm.concept_id), cfg, b);
    write_images(w, "prototypes", result.prototypes, lm.model->latent_shape());
    if (result.trace) {
      write_text(w.path("trace.json"), result.trace->to_json() + "\n");
      w.set_trace("trace.json");
    }
    w.set_result_hash(hash_hex(result.prototypes.values()));
    w.summary() = {{"concept", concept_name(lm.concept_id, model_path)},
                   {"concept_id", lm.concept_id},
                   {"method", to_string(b.kind)},
                   {"params", json::parse(result.params_json)}};
  });
}

RunOutcome cmd_modes(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path model_path, embedder_path;
  add_container_input(inputs, "/model", rc.config.at("model").get<std::string>(), "model.bin", &model_path);
  add_container_input(inputs, "/embedder", rc.config.at("embedder").get<std::string>(), "embedder.bin",
                      &embedder_path);
  inputs.throw_if_invalid(rc.command);
  const auto lm = load_model_and_concept(rc, model_path);
  const auto embedder = ToyEmbedder::load(embedder_path);
  const auto& m = rc.config.at("modes");
  const std::string attribute = m.at("attribute").get<std::string>();
  std::vector<std::string> violations;
  if (!attribute.empty() &&
      std::find(embedder.attributes().begin(), embedder.attributes().end(), attribute) == embedder.attributes().end()) {
    violations.push_back("/modes/attribute: the embedder has no attribute '" + attribute + "'");
  }
  if (embedder.shape() != lm.model->latent_shape()) {
    violations.push_back("/embedder: image shape does not match the model");
  }
  int pca_dims = m.at("pca_dims").get<int>();
  if (pca_dims == 0) pca_dims = attribute.empty() ? 2 : 10;
  if (!violations.empty()) throw ConfigError("invalid inputs for 'modes'", violations);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto cfg = dma_config_from(rc.config.at("dma"), seed_of(rc));
    const std::uint64_t gmm_seed = derive_seed(cfg.seed, "gmm");
    const std::uint64_t refine_seed = derive_seed(cfg.seed, "refinement");
    w.add_seed("latents", cfg.seed);
    w.add_seed("gmm", gmm_seed);
    w.add_seed("refinement", refine_seed);
    const auto cond = ConditioningSpec::for_concept(lm.concept_id);
    const auto latents = init_latents(cfg.latent_count, lm.model->latent_shape(), cfg.seed);
    GuidanceSpec pool_guidance = cfg.guidance;
    pool_guidance.scale = m.at("sample_guidance").get<double>();
    const Batch samples = decode_image(
        *lm.model, sample_ddim(*lm.model, latents.latents, schedule_for(*lm.model, cfg.num_steps), cond, pool_guidance));
    write_images(w, "samples", samples, lm.model->latent_shape());
    const Batch embeddings =
        embedder.embed(samples, attribute.empty() ? std::nullopt : std::optional<std::string>(attribute));
    if (pca_dims > static_cast<int>(embeddings.cols())) {
      throw ConfigError("invalid inputs for 'modes'", {"/modes/pca_dims: exceeds the embedding dimension " +
                                                           std::to_string(embeddings.cols())});
    }
    auto assignment = cluster_samples(embeddings, pca_dims, m.at("n_clusters").get<int>(), gmm_seed);
    assignment.embedder_id = embedder.id();
    write_text(w.path("assignment.json"), assignment.to_json() + "\n");
    w.add_output("assignment.json");
    std::vector<int> identity(static_cast<std::size_t>(latents.size()));
    for (int i = 0; i < latents.size(); ++i) identity[static_cast<std::size_t>(i)] = i;
    const auto partition = map_labels_to_latents(assignment, identity);
    const auto options = per_cluster_options_from(m, refine_seed);
    const auto clusters = dma_per_cluster(lm.model, cond, latents, partition, samples, cfg, options);
    json cluster_summary = json::array();
    ContentHasher all;
    for (const auto& c : clusters) {
      const std::string base = "clusters/" + std::to_string(c.cluster) + "/";
      fs::create_directories(w.path(base));
      write_images(w, base + "prototypes", c.result.prototypes, lm.model->latent_shape());
      write_text(w.path(base + "trace.json"), c.result.trace.to_json() + "\n");
      w.add_output(base + "trace.json");
      json entry{{"cluster", c.cluster},
                 {"size", c.latent_indices.size()},
                 {"latent_indices", c.latent_indices},
                 {"guidance", c.guidance_scale},
                 {"trace", trace_summary(c.result.trace)}};
      if (c.refinement) {
        c.refinement->save(w.path(base + "refinement.bin"));
        w.add_output(base + "refinement.bin");
        w.add_output(rel_sidecar(base + "refinement.bin"));
        entry["refinement"] = {{"kind", to_string(c.refinement->kind)},
                               {"steps", c.refinement->log.steps},
                               {"final_loss", c.refinement->log.final_loss}};
      }
      cluster_summary.push_back(entry);
      all.update(c.result.prototypes.values());
    }
    w.set_result_hash(all.hex());
    w.summary() = {{"concept", concept_name(lm.concept_id, model_path)},
                   {"concept_id", lm.concept_id},
                   {"method", "dma-modes"},
                   {"pca_dims", pca_dims},
                   {"explained_variance_ratio", assignment.pca.explained_variance_ratio},
                   {"gmm_notes", assignment.gmm.notes},
                   {"clusters", cluster_summary}};
  });
}

RunOutcome cmd_ablate(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  fs::path model_path, embedder_path;
  add_container_input(inputs, "/model", rc.config.at("model").get<std::string>(), "model.bin", &model_path);
  const std::string embedder_text = rc.config.at("embedder").get<std::string>();
  if (!embedder_text.empty()) add_container_input(inputs, "/embedder", embedder_text, "embedder.bin", &embedder_path);
  inputs.throw_if_invalid(rc.command);
  const auto lm = load_model_and_concept(rc, model_path);
  std::optional<ToyEmbedder> embedder;
  if (!embedder_text.empty()) embedder = ToyEmbedder::load(embedder_path);
  return execute(rc, o, inputs, [&](RunWriter& w) {
    const auto& sweep = rc.config.at("sweep");
    const std::string parameter = sweep.at("parameter").get<std::string>();
    static const std::set<std::string> integral{"iterations", "t_stop", "latent_count", "num_steps"};
    json rows = json::array();
    std::string csv = parameter + ",run_id,result_hash,pixel_spread,embedding_consistency\n";
    ContentHasher all;
    for (const auto& v : sweep.at("values")) {
      ResolvedConfig child;
      child.command = "dma";
      child.workspace = rc.workspace;
      child.config = default_config("dma");
      child.config["seed"] = rc.config.at("seed");
      child.config["model"] = rc.config.at("model");
      child.config["concept"] = rc.config.at("concept");
      child.config["dma"] = rc.config.at("dma");
      std::ostringstream label;
      if (integral.count(parameter)) {
        child.config["dma"][parameter] = static_cast<long long>(v.get<double>());
        label << parameter << "-" << static_cast<long long>(v.get<double>());
      } else {
        child.config["dma"][parameter] = v.get<double>();
        label << parameter << "-" << v.get<double>();
      }
      const std::string rel = "children/" + label.str();
      RunOptions co;
      co.out = w.path(rel);
      co.force = true;
      co.locked = true;
      const auto out = cmd_dma(child, co);
      w.add_child(rel + "/" + kManifestName);
      const Batch prototypes = load_images(out.dir / "prototypes.bin");
      json row{{"value", v},
               {"dir", rel},
               {"run_id", out.manifest.run_id},
               {"content_hash", out.manifest.content_hash()},
               {"result_hash", out.manifest.result_hash},
               {"pixel_spread", mean_squared_deviation(prototypes)}};
      std::ostringstream line;
      line.precision(17);
      line << v.dump() << "," << out.manifest.run_id << "," << out.manifest.result_hash << ","
           << row["pixel_spread"].get<double>() << ",";
      if (embedder && prototypes.rows() >= 2) {
        const CosineBackend backend(embedder->id(), [&](const Batch& b) { return embedder->embed(b); });
        row["embedding_consistency"] = consistency(prototypes, backend);
        line << row["embedding_consistency"].get<double>();
      }
      csv += line.str() + "\n";
      all.update(out.manifest.result_hash);
      rows.push_back(row);
    }
    const json summary{{"parameter", parameter}, {"rows", rows}};
    write_text(w.path("summary.json"), summary.dump(2) + "\n");
    w.add_output("summary.json");
    write_text(w.path("summary.csv"), csv);
    w.add_output("summary.csv");
    w.set_result_hash(all.hex());
    w.summary() = summary;
  });
}

RunOutcome cmd_eval(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  const std::string backend_id = rc.config.at("backend").get<std::string>();
  fs::path embedder_path;
  if (backend_id == "toy-embedder") {
    add_container_input(inputs, "/embedder", rc.config.at("embedder").get<std::string>(), "embedder.bin",
                        &embedder_path);
  }
  fs::path samples_dir;
  const auto samples_manifest =
      add_run_input(inputs, "/samples", rc.config.at("samples").get<std::string>(), {"sample"}, &samples_dir);
  std::vector<std::pair<fs::path, RunManifest>> runs;
  const auto& run_list = rc.config.at("runs");
  for (std::size_t i = 0; i < run_list.size(); ++i) {
    fs::path dir;
    auto m = add_run_input(inputs, "/runs", run_list[i].get<std::string>(), {"dma", "baseline", "modes"}, &dir);
    if (m) runs.emplace_back(dir, std::move(*m));
  }
  inputs.throw_if_invalid(rc.command);
  // Prototypes must come from the sample set they are compared against.
  const auto& sc = samples_manifest->config;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& [dir, m] = runs[i];
    if (m.command == "modes") continue;
    const std::string where = "/runs/" + std::to_string(i) + ": ";
    const auto& mc = m.config;
    if (model_hash_of(m) != model_hash_of(*samples_manifest)) {
      inputs.violations.push_back(where + "model differs from the sample run");
    }
    if (mc.at("seed") != sc.at("seed")) inputs.violations.push_back(where + "seed differs from the sample run");
    if (m.summary.at("concept_id") != samples_manifest->summary.at("concept_id")) {
      inputs.violations.push_back(where + "concept differs from the sample run");
    }
    const auto& d = mc.at("dma");
    const auto& s = sc.at("sample");
    for (const auto& key : {"latent_count", "num_steps", "guidance", "cfg_convention"}) {
      if (d.at(key) != s.at(key)) {
        inputs.violations.push_back(where + std::string(key) + " differs from the sample run");
      }
    }
  }
  inputs.throw_if_invalid(rc.command);

  std::unique_ptr<DistanceBackend> backend;
  std::optional<ToyEmbedder> embedder;
  if (backend_id == "toy-embedder") {
    embedder = ToyEmbedder::load(embedder_path);
    backend = std::make_unique<CosineBackend>(embedder->id(),
                                              [&](const Batch& b) { return embedder->embed(b); });
  } else if (backend_id == "pixel-mse") {
    backend = std::make_unique<PixelMseBackend>();
  } else {
    backend = reserved_backend(backend_id);
  }

  return execute(rc, o, inputs, [&](RunWriter& w) {
    const Batch samples = load_images(samples_dir / "samples.bin");
    const std::string category = rc.config.at("category").get<std::string>();
    std::vector<MetricEntry> entries;
    for (const auto& [dir, m] : runs) {
      const std::string set_id = "seed-" + m.config.at("seed").dump();
      const std::string concept_label = m.summary.value("concept", m.config.at("concept").dump());
      auto add_entry = [&](const std::string& method, const std::string& set, const Batch& prototypes,
                           const Batch& pool) {
        MetricEntry e;
        e.concept_id = concept_label;
        e.category = category;
        e.method = method;
        e.set_id = set;
        e.backend = backend->id();
        e.consistency = consistency(prototypes, *backend);
        for (std::size_t p = 0; p < prototypes.rows(); ++p) {
          e.representativeness.push_back(representativeness(prototypes.row(p), pool, *backend));
        }
        entries.push_back(std::move(e));
      };
      if (m.command == "modes") {
        const Batch pool = load_images(dir / "samples.bin");
        for (const auto& c : m.summary.at("clusters")) {
          const int k = c.at("cluster").get<int>();
          const Batch prototypes = load_images(dir / ("clusters/" + std::to_string(k) + "/prototypes.bin"));
          if (prototypes.rows() < 2) continue;
          add_entry("dma-modes/cluster-" + std::to_string(k), set_id,
                    prototypes, pool.select(c.at("latent_indices").get<std::vector<int>>()));
        }
      } else {
        const Batch prototypes = load_images(dir / "prototypes.bin");
        if (prototypes.rows() < 2) {
          throw InvalidArgument(dir.string() + ": consistency needs at least two prototypes per set");
        }
        add_entry(m.summary.at("method").get<std::string>(), set_id, prototypes, samples);
      }
    }
    const auto report = aggregate_report(std::move(entries));
    write_text(w.path("metrics.json"), report.to_json() + "\n");
    w.add_output("metrics.json");
    write_text(w.path("metrics.csv"), report.to_csv());
    w.add_output("metrics.csv");
    w.set_result_hash(hash_hex(report.to_json()));
    w.summary() = {{"backend", backend->id()}, {"entries", report.entries.size()}};
  });
}

RunOutcome cmd_report(const ResolvedConfig& rc, const RunOptions& o) {
  Inputs inputs;
  std::vector<fs::path> metric_files;
  const auto& list = rc.config.at("inputs");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const fs::path p = fs::absolute(fs::path(list[i].get<std::string>())).lexically_normal();
    if (fs::is_directory(p)) {
      if (add_run_input(inputs, "/inputs", p.string(), {"eval"}, nullptr)) metric_files.push_back(p / "metrics.json");
    } else if (fs::is_regular_file(p)) {
      const std::string h = file_hash(p);
      inputs.refs.push_back({p.string(), h});
      if (!inputs.identity.count("/inputs")) inputs.identity["/inputs"] = json::array();
      inputs.identity["/inputs"].push_back(h);
      metric_files.push_back(p);
    } else {
      inputs.violations.push_back("/inputs/" + std::to_string(i) + ": " + p.string() + " does not exist");
    }
  }
  return execute(rc, o, inputs, [&](RunWriter& w) {
    std::vector<MetricEntry> entries;
    for (const auto& f : metric_files) {
      auto r = MetricsReport::from_json(read_text(f));
      for (auto& e : r.entries) entries.push_back(std::move(e));
    }
    const auto report = aggregate_report(std::move(entries));
    write_text(w.path("report.json"), report.to_json() + "\n");
    w.add_output("report.json");
    write_text(w.path("report.csv"), report.to_csv());
    w.add_output("report.csv");
    w.set_result_hash(hash_hex(report.to_json()));
    json methods = json::array();
    for (const auto& m : report.methods) {
      methods.push_back({{"method", m.method},
                         {"backend", m.backend},
                         {"groups", m.groups},
                         {"consistency", m.consistency},
                         {"representativeness", m.representativeness}});
    }
    w.summary() = {{"methods", methods}};
  });
}

RunOutcome run_command(const ResolvedConfig& rc, const RunOptions& o) {
  const auto& c = rc.command;
  if (c == "gen-data") return cmd_gen_data(rc, o);
  if (c == "train-toy") return cmd_train_toy(rc, o);
  if (c == "sample") return cmd_sample(rc, o);
  if (c == "dma") return cmd_dma(rc, o);
  if (c == "modes") return cmd_modes(rc, o);
  if (c == "baseline") return cmd_baseline(rc, o);
  if (c == "ablate") return cmd_ablate(rc, o);
  if (c == "eval") return cmd_eval(rc, o);
  if (c == "report") return cmd_report(rc, o);
  throw InvalidArgument("unknown command '" + c + "'");
}

}  // namespace dmavg::cli
