#pragma once

// The single JSON file that drives a run: dataset, model, methods, metrics, cohort and seed.
// Parsing is strict; unknown keys and unresolvable ids are configuration errors.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "attrbench/attribution.hpp"
#include "attrbench/error.hpp"
#include "attrbench/metrics.hpp"
#include "attrbench/model.hpp"
#include "attrbench/patch.hpp"
#include "attrbench/training.hpp"

namespace attrbench {

using Json = nlohmann::ordered_json;

/// Environment variable naming the directory that relative output paths are resolved against.
inline constexpr const char* kOutputRootEnv = "ATTRBENCH_OUT";

struct DatasetConfig {
  std::string kind = "synthetic";  // "synthetic" or "idx"
  // synthetic
  std::size_t size = 28;
  std::size_t classes = 4;
  std::size_t train_count = 4000;
  std::size_t test_count = 512;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  bool normalize = true;
};

struct ModelConfig {
  std::optional<std::string> weights;
  CnnSpec cnn{8, 16, 32, 1};
  TrainConfig train{5, 0.02, 32, 0.9, 0};
};

struct MethodEntry {
  std::string id;  // unique label; defaults to the method name
  MethodKind kind = MethodKind::gradient;
  MethodConfig config;
};

struct MetricEntry {
  std::string implementation;  // unique label, e.g. "Del_MoRF@blur"
  MetricSpec spec;
};

struct PilotConfig {
  std::size_t images = 64;
  double alpha_threshold = 0.3;
  double correlation_threshold = 0.8;
  std::vector<std::string> pinned;
};

struct StabilityConfig {
  std::vector<std::string> metrics;
  std::size_t repeats = 100;
  std::string method = "Gradient";
  std::optional<std::size_t> images;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output = "attrbench-run";
  DatasetConfig dataset;
  ModelConfig model;
  std::vector<MethodEntry> methods;
  std::string baseline = "Random";
  MethodEntry baseline_method;  // resolved from `baseline`
  std::vector<MetricEntry> metrics;
  std::size_t cohort = 256;
  std::size_t reference_pool = 100;
  std::size_t threads = 0;  // 0: one per hardware thread
  std::string selection = "all";  // "all" or "pilot"
  PatchConfig patch;
  std::optional<std::size_t> patch_target;
  PilotConfig pilot;
  StabilityConfig stability;
  /// The config as read, echoed into manifests.
  Json source;
  /// Relative data and weight paths are resolved against this directory.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& path) const {
    const std::filesystem::path p(path);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }

  const MethodEntry& method(const std::string& id) const {
    for (const MethodEntry& m : methods) {
      if (m.id == id) return m;
    }
    if (id == baseline) return baseline_method;
    throw ConfigError("unknown method id '" + id + "'");
  }

  /// By implementation label ("Sens_n@constant"), or by bare metric id ("Sens_n") when exactly
  /// one configured implementation has it.
  const MetricEntry* find_metric(const std::string& name) const {
    const MetricEntry* by_id = nullptr;
    std::size_t matches = 0;
    for (const MetricEntry& m : metrics) {
      if (m.implementation == name) return &m;
      if (m.spec.id() == name) {
        by_id = &m;
        ++matches;
      }
    }
    if (matches > 1) throw ConfigError("metric '" + name + "' is ambiguous; use an implementation label");
    return by_id;
  }

  const MetricEntry& metric(const std::string& name) const {
    if (const MetricEntry* m = find_metric(name)) return *m;
    throw ConfigError("unknown metric implementation '" + name + "'");
  }

  /// Methods in table order: configured methods followed by the baseline.
  std::vector<const MethodEntry*> all_methods() const {
    std::vector<const MethodEntry*> out;
    for (const MethodEntry& m : methods) out.push_back(&m);
    out.push_back(&baseline_method);
    return out;
  }
};

namespace detail {

// Reads every key of `obj` through `take`, then rejects whatever was not consumed.
class Fields {
 public:
  Fields(const Json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void take(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void take(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!obj_.contains(key) || obj_.at(key).is_null()) return;
    T v{};
    take(key, v);
    out = v;
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in " + where_);
    }
  }

 private:
  const Json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

inline MaskerKind parse_masker(const std::string& name) {
  if (name == "constant" || name == "mean") return MaskerKind::dataset_mean;
  if (name == "random" || name == "uniform") return MaskerKind::uniform_random;
  if (name == "blur") return MaskerKind::blur;
  throw ConfigError("unknown masker '" + name + "' (expected constant, random or blur)");
}

inline void read_masker(Fields& f, Masker& m) {
  std::optional<std::string> name;
  f.take("masker", name);
  if (name) m.kind = parse_masker(*name);
  f.take("blur_kernel", m.blur_kernel);
  m.validate();
}

inline MethodEntry read_method(const Json& j, std::size_t index) {
  MethodEntry e;
  if (j.is_string()) {
    e.kind = parse_method(j.get<std::string>());
    e.id = j.get<std::string>();
    return e;
  }
  Fields f(j, "methods[" + std::to_string(index) + "]");
  std::string name;
  f.take("name", name);
  if (name.empty()) throw ConfigError("methods[" + std::to_string(index) + "] needs a name");
  e.kind = parse_method(name);
  e.id = name;
  f.take("id", e.id);
  MethodConfig& c = e.config;
  f.take("path_steps", c.path_steps);
  f.take("expected_draws", c.expected_draws);
  f.take("ensemble", c.ensemble);
  f.take("noise_level", c.noise_level);
  f.take("noise_sigma", c.noise_sigma);
  f.take("references", c.references);
  f.take("surrogate_samples", c.surrogate_samples);
  f.take("superpixels", c.superpixels);
  f.take("ridge", c.ridge);
  f.take("kernel_width", c.lime_kernel_width);
  f.take("enumerate", c.enumerate_coalitions);
  read_masker(f, c.masker);
  f.finish();
  c.validate(e.kind);
  return e;
}

inline MetricEntry read_metric(const Json& j, std::size_t index) {
  MetricEntry e;
  if (j.is_string()) {
    e.spec = parse_metric_id(j.get<std::string>());
  } else {
    Fields f(j, "metrics[" + std::to_string(index) + "]");
    std::string id;
    f.take("id", id);
    if (id.empty()) throw ConfigError("metrics[" + std::to_string(index) + "] needs an id");
    e.spec = parse_metric_id(id);
    MetricSpec& s = e.spec;
    read_masker(f, s.masker);
    f.take("steps", s.steps);
    f.take("cap", s.cap);
    f.take("exact_scan", s.exact_scan);
    f.take("segments", s.segmentation.target_segments);
    f.take("compactness", s.segmentation.compactness);
    f.take("subsets", s.subsets);
    f.take("subset_size", s.subset_size);
    f.take("samples", s.samples);
    f.take("noise_sigma", s.noise_sigma);
    f.take("square_side", s.square_side);
    f.take("radius", s.radius);
    f.take("draws", s.draws);
    f.take("label", e.implementation);
    f.finish();
  }
  e.spec.validate();
  if (e.implementation.empty()) e.implementation = e.spec.implementation();
  return e;
}

}  // namespace detail

/// Builds a RunConfig from parsed JSON. Throws ConfigError on anything malformed.
inline RunConfig parse_run_config(const Json& j) {
  RunConfig cfg;
  cfg.source = j;
  detail::Fields f(j, "config");
  if (!j.contains("seed")) throw ConfigError("config needs a 'seed'");
  f.take("seed", cfg.seed);
  f.take("output", cfg.output);
  f.take("cohort", cfg.cohort);
  f.take("reference_pool", cfg.reference_pool);
  f.take("threads", cfg.threads);
  f.take("baseline", cfg.baseline);
  f.take("selection", cfg.selection);
  if (cfg.selection != "all" && cfg.selection != "pilot") throw ConfigError("selection must be 'all' or 'pilot'");
  if (cfg.cohort == 0) throw ConfigError("cohort must be positive");

  if (const Json* d = f.child("dataset")) {
    detail::Fields df(*d, "dataset");
    DatasetConfig& ds = cfg.dataset;
    df.take("kind", ds.kind);
    df.take("size", ds.size);
    df.take("classes", ds.classes);
    df.take("train", ds.train_count);
    df.take("test", ds.test_count);
    df.take("train_images", ds.train_images);
    df.take("train_labels", ds.train_labels);
    df.take("test_images", ds.test_images);
    df.take("test_labels", ds.test_labels);
    df.take("normalize", ds.normalize);
    df.finish();
    if (ds.kind != "synthetic" && ds.kind != "idx") throw ConfigError("dataset.kind must be 'synthetic' or 'idx'");
    if (ds.kind == "idx" && (ds.train_images.empty() || ds.train_labels.empty() || ds.test_images.empty() ||
                             ds.test_labels.empty())) {
      throw ConfigError("idx datasets need train_images, train_labels, test_images and test_labels");
    }
  }

  if (const Json* m = f.child("model")) {
    detail::Fields mf(*m, "model");
    ModelConfig& mc = cfg.model;
    mf.take("weights", mc.weights);
    mf.take("conv1", mc.cnn.conv1_channels);
    mf.take("conv2", mc.cnn.conv2_channels);
    mf.take("hidden", mc.cnn.hidden);
    mf.take("first_stride", mc.cnn.first_stride);
    if (const Json* t = mf.child("train")) {
      detail::Fields tf(*t, "model.train");
      tf.take("epochs", mc.train.epochs);
      tf.take("learning_rate", mc.train.learning_rate);
      tf.take("batch_size", mc.train.batch_size);
      tf.take("momentum", mc.train.momentum);
      tf.finish();
    }
    mf.finish();
    if (mc.cnn.conv1_channels == 0 || mc.cnn.conv2_channels == 0 || mc.cnn.first_stride == 0) {
      throw ConfigError("model channel counts and stride must be positive");
    }
  }
  cfg.model.train.seed = derive_seed(cfg.seed, "train");

  if (const Json* ms = f.child("methods")) {
    if (!ms->is_array()) throw ConfigError("methods must be an array");
    for (std::size_t i = 0; i < ms->size(); ++i) cfg.methods.push_back(detail::read_method((*ms)[i], i));
  }
  std::set<std::string> ids;
  for (const MethodEntry& m : cfg.methods) {
    if (m.id == cfg.baseline) throw ConfigError("method id '" + m.id + "' collides with the baseline");
    if (!ids.insert(m.id).second) throw ConfigError("duplicate method id '" + m.id + "'");
  }
  const MethodKind base_kind = parse_method(cfg.baseline);
  if (base_kind != MethodKind::random_baseline && base_kind != MethodKind::edge_baseline) {
    throw ConfigError("baseline must be Random or Edge, got '" + cfg.baseline + "'");
  }
  cfg.baseline_method = MethodEntry{cfg.baseline, base_kind, {}};

  if (const Json* ms = f.child("metrics")) {
    if (!ms->is_array()) throw ConfigError("metrics must be an array");
    for (std::size_t i = 0; i < ms->size(); ++i) cfg.metrics.push_back(detail::read_metric((*ms)[i], i));
  }
  std::set<std::string> impls;
  for (const MetricEntry& m : cfg.metrics) {
    if (!impls.insert(m.implementation).second) {
      throw ConfigError("duplicate metric implementation '" + m.implementation + "'; give one a 'label'");
    }
  }

  if (const Json* p = f.child("patch")) {
    detail::Fields pf(*p, "patch");
    pf.take("side", cfg.patch.side);
    pf.take("steps", cfg.patch.steps);
    pf.take("batch", cfg.patch.batch);
    pf.take("steps_per_epoch", cfg.patch.steps_per_epoch);
    pf.take("step_size", cfg.patch.step_size);
    pf.take("validation_images", cfg.patch.validation_images);
    pf.take("target", cfg.patch_target);
    pf.finish();
  }
  cfg.patch.seed = derive_seed(cfg.seed, "patch");

  if (const Json* p = f.child("pilot")) {
    detail::Fields pf(*p, "pilot");
    pf.take("images", cfg.pilot.images);
    pf.take("alpha_threshold", cfg.pilot.alpha_threshold);
    pf.take("correlation_threshold", cfg.pilot.correlation_threshold);
    pf.take("pinned", cfg.pilot.pinned);
    pf.finish();
    for (std::string& id : cfg.pilot.pinned) id = cfg.metric(id).implementation;
  }

  if (const Json* s = f.child("stability")) {
    detail::Fields sf(*s, "stability");
    sf.take("metrics", cfg.stability.metrics);
    sf.take("repeats", cfg.stability.repeats);
    sf.take("method", cfg.stability.method);
    sf.take("images", cfg.stability.images);
    sf.finish();
  }
  f.finish();

  // Every method carries a seed derived from its id so adding a method never reseeds another.
  for (MethodEntry& m : cfg.methods) m.config.seed = derive_seed(cfg.seed, "method:" + m.id);
  cfg.baseline_method.config.seed = derive_seed(cfg.seed, "method:" + cfg.baseline);
  return cfg;
}

/// Key marking a run manifest; a manifest can be passed wherever a config is expected and
/// replays the run it describes.
inline constexpr const char* kManifestKey = "attrbench_manifest";

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  if (j.is_object() && j.contains(kManifestKey)) {
    if (!j.contains("config") || !j.contains("config_dir")) throw ConfigError("manifest " + path + " lacks its config");
    base = j.at("config_dir").get<std::string>();
    j = Json(j.at("config"));
  }
  RunConfig cfg = parse_run_config(j);
  cfg.base_dir = std::filesystem::absolute(base.empty() ? std::filesystem::path(".") : base).lexically_normal();
  return cfg;
}

/// The run's output directory: `output` itself when absolute, otherwise resolved against
/// $ATTRBENCH_OUT (or the working directory when unset).
inline std::filesystem::path output_directory(const RunConfig& cfg) {
  const std::filesystem::path out(cfg.output);
  if (out.is_absolute()) return out;
  const char* root = std::getenv(kOutputRootEnv);
  return (root != nullptr && *root != '\0') ? std::filesystem::path(root) / out : out;
}

}  // namespace attrbench
