#pragma once

// Experiment configuration. A run is described by one JSON document built as
// defaults <- config file <- `--set path=value` overrides, and checked for
// unknown keys and wrong types before any compute starts.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include "hashkd/binary_io.hpp"
#include "hashkd/classifier.hpp"
#include "hashkd/data.hpp"
#include "hashkd/distillation.hpp"
#include "hashkd/error.hpp"
#include "hashkd/hash_losses.hpp"
#include "hashkd/model_spec.hpp"

namespace hashkd {

using Json = nlohmann::json;

inline constexpr const char* kDataRootEnv = "HASHKD_DATA_ROOT";

/// Defaults follow the published full-scale setup. `null` learning rate and
/// epochs in the distill section resolve per teacher-student pair / dataset.
inline Json default_config() {
  return Json::parse(R"({
    "name": "experiment",
    "seed": 0,
    "dataset": {
      "kind": "cifar10",
      "root": "",
      "manifest": "",
      "query_per_class": 100,
      "train_per_class": 500,
      "split_seed": 0,
      "synthetic": {"num_classes": 10, "images_per_class": 60, "image_size": 32,
                    "seed": 7, "pattern_seed": 1, "noise": 28.0}
    },
    "preprocess": {"mean": [0.485, 0.456, 0.406], "stdev": [0.229, 0.224, 0.225], "crop_padding": 4},
    "teacher": {
      "arch": "resnet50",
      "weights": "",
      "feature_dim": 32,
      "input_size": 224,
      "pretrain": {"optimizer": "adam", "learning_rate": 0.001, "epochs": 20, "batch_size": 32,
                   "augment": false, "images_per_class": 60, "data_seed": 1007}
    },
    "student": {"variant": "V1", "width_divisor": 1, "input_size": 224},
    "distill": {"optimizer": "adam", "learning_rate": null, "epochs": null, "batch_size": 64, "augment": false},
    "finetune": {"framework": "csq", "n_bits": 64, "optimizer": "rmsprop", "learning_rate": 1e-05,
                 "epochs": 100, "batch_size": 64, "augment": true, "lambda_q": null, "gamma": 20.0,
                 "from_scratch": false},
    "evaluate": {"map_at": 5000, "top_k": 5}
  })");
}

namespace detail {

// Keys whose default is null accept a number as well.
inline void check_against(const Json& given, const Json& defaults, const std::string& path) {
  if (defaults.is_object()) {
    if (!given.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    for (auto it = given.begin(); it != given.end(); ++it) {
      const std::string sub = path.empty() ? it.key() : path + "." + it.key();
      if (!defaults.contains(it.key())) throw ConfigError("config: unknown key '" + sub + "'");
      check_against(it.value(), defaults.at(it.key()), sub);
    }
    return;
  }
  const bool ok = defaults.is_null()             ? (given.is_null() || given.is_number())
                  : defaults.is_number_float()   ? given.is_number()
                  : defaults.is_number_integer() ? given.is_number_integer()
                                                 : given.type() == defaults.type();
  if (!ok) throw ConfigError("config: '" + path + "' has the wrong type (" + given.type_name() + ")");
}

/// Recursive assignment; unlike a merge patch, null is kept as a value.
inline void merge_into(Json& dst, const Json& src) {
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (it.value().is_object() && dst.contains(it.key()) && dst[it.key()].is_object()) merge_into(dst[it.key()], it.value());
    else dst[it.key()] = it.value();
  }
}

}  // namespace detail

/// Applies "a.b.c=value"; the value is parsed as JSON when it parses, and
/// taken as a string otherwise.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::string pointer;
  for (const auto& part : detail::split_list(key, '.')) pointer += "/" + part;
  const Json::json_pointer ptr(pointer);
  if (!default_config().contains(ptr)) throw ConfigError("config: unknown key '" + key + "'");
  doc[ptr] = value;
}

inline Json load_config_document(const std::string& path, const std::vector<std::string>& overrides) {
  Json doc = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: '" + path + "'");
    Json file;
    try {
      file = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    detail::check_against(file, doc, "");
    detail::merge_into(doc, file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  detail::check_against(doc, default_config(), "");
  return doc;
}

struct DatasetConfig {
  std::string kind;
  std::string root;
  std::string manifest;
  int query_per_class = 0;
  int train_per_class = 0;
  std::uint64_t split_seed = 0;
  SyntheticSpec synthetic;
};

struct TeacherConfig {
  std::string arch;
  std::string weights;
  int feature_dim = 0;
  int input_size = 0;
  ClassifierConfig pretrain;
  int pretrain_images_per_class = 0;
  std::uint64_t pretrain_data_seed = 0;
};

struct StudentConfig {
  StudentVariant variant = StudentVariant::v1;
  StudentOptions options;
};

struct EvaluateConfig {
  int map_at = 0;
  int top_k = 0;
};

struct ExperimentConfig {
  Json doc;
  std::string name;
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  Preprocess preprocess;  // size is set per model
  TeacherConfig teacher;
  StudentConfig student;
  DistillConfig distill;
  FinetuneConfig finetune;
  bool finetune_from_scratch = false;
  EvaluateConfig evaluate;

  Preprocess teacher_preprocess() const {
    Preprocess p = preprocess;
    p.size = teacher.input_size;
    return p;
  }
  Preprocess student_preprocess() const {
    Preprocess p = preprocess;
    p.size = student.options.input_size;
    return p;
  }
};

/// Published distillation learning rate of each pair.
inline double default_distill_lr(StudentVariant v) { return v == StudentVariant::v1 ? 1e-4 : 3e-6; }

/// Published distillation length per dataset; synthetic runs must say.
inline int default_distill_epochs(const std::string& dataset) {
  if (dataset == "cifar10") return 160;
  if (dataset == "nuswide") return 120;
  throw ConfigError("distill.epochs must be set for dataset kind '" + dataset + "'");
}

inline ExperimentConfig parse_config(const Json& doc) {
  ExperimentConfig c;
  c.doc = doc;
  try {
    c.name = doc.at("name").get<std::string>();
    c.seed = doc.at("seed").get<std::uint64_t>();

    const Json& d = doc.at("dataset");
    c.dataset.kind = d.at("kind").get<std::string>();
    c.dataset.root = d.at("root").get<std::string>();
    c.dataset.manifest = d.at("manifest").get<std::string>();
    c.dataset.query_per_class = d.at("query_per_class").get<int>();
    c.dataset.train_per_class = d.at("train_per_class").get<int>();
    c.dataset.split_seed = d.at("split_seed").get<std::uint64_t>();
    const Json& s = d.at("synthetic");
    c.dataset.synthetic.num_classes = s.at("num_classes").get<int>();
    c.dataset.synthetic.images_per_class = s.at("images_per_class").get<int>();
    c.dataset.synthetic.image_size = s.at("image_size").get<int>();
    c.dataset.synthetic.seed = s.at("seed").get<std::uint64_t>();
    c.dataset.synthetic.pattern_seed = s.at("pattern_seed").get<std::uint64_t>();
    c.dataset.synthetic.noise = s.at("noise").get<double>();

    const Json& p = doc.at("preprocess");
    const auto mean = p.at("mean").get<std::vector<float>>();
    const auto stdev = p.at("stdev").get<std::vector<float>>();
    if (mean.size() != 3 || stdev.size() != 3) throw ConfigError("preprocess.mean and .stdev need 3 values");
    for (int i = 0; i < 3; ++i) {
      if (!(stdev[i] > 0.0f)) throw ConfigError("preprocess.stdev must be positive");
      c.preprocess.mean[i] = mean[i];
      c.preprocess.stdev[i] = stdev[i];
    }
    c.preprocess.crop_padding = p.at("crop_padding").get<int>();

    const Json& t = doc.at("teacher");
    c.teacher.arch = t.at("arch").get<std::string>();
    c.teacher.weights = t.at("weights").get<std::string>();
    c.teacher.feature_dim = t.at("feature_dim").get<int>();
    c.teacher.input_size = t.at("input_size").get<int>();
    const Json& tp = t.at("pretrain");
    c.teacher.pretrain.optimizer = tp.at("optimizer").get<std::string>();
    c.teacher.pretrain.learning_rate = tp.at("learning_rate").get<double>();
    c.teacher.pretrain.epochs = tp.at("epochs").get<int>();
    c.teacher.pretrain.batch_size = tp.at("batch_size").get<int>();
    c.teacher.pretrain.augment = tp.at("augment").get<bool>();
    c.teacher.pretrain.seed = c.seed;
    c.teacher.pretrain_images_per_class = tp.at("images_per_class").get<int>();
    c.teacher.pretrain_data_seed = tp.at("data_seed").get<std::uint64_t>();

    const Json& st = doc.at("student");
    c.student.variant = student_variant_from_string(st.at("variant").get<std::string>());
    c.student.options.width_divisor = st.at("width_divisor").get<int>();
    c.student.options.input_size = st.at("input_size").get<int>();

    const Json& ds = doc.at("distill");
    c.distill.optimizer = ds.at("optimizer").get<std::string>();
    c.distill.learning_rate =
        ds.at("learning_rate").is_null() ? default_distill_lr(c.student.variant) : ds.at("learning_rate").get<double>();
    c.distill.epochs =
        ds.at("epochs").is_null() ? default_distill_epochs(c.dataset.kind) : ds.at("epochs").get<int>();
    c.distill.batch_size = ds.at("batch_size").get<int>();
    c.distill.augment = ds.at("augment").get<bool>();
    c.distill.seed = c.seed;

    const Json& f = doc.at("finetune");
    c.finetune.framework = framework_from_string(f.at("framework").get<std::string>());
    c.finetune.n_bits = f.at("n_bits").get<int>();
    c.finetune.optimizer = f.at("optimizer").get<std::string>();
    c.finetune.learning_rate = f.at("learning_rate").get<double>();
    c.finetune.epochs = f.at("epochs").get<int>();
    c.finetune.batch_size = f.at("batch_size").get<int>();
    c.finetune.augment = f.at("augment").get<bool>();
    c.finetune.lambda_q = f.at("lambda_q").is_null() ? -1.0 : f.at("lambda_q").get<double>();
    c.finetune.gamma = f.at("gamma").get<double>();
    c.finetune.seed = c.seed;
    c.finetune_from_scratch = f.at("from_scratch").get<bool>();

    const Json& e = doc.at("evaluate");
    c.evaluate.map_at = e.at("map_at").get<int>();
    c.evaluate.top_k = e.at("top_k").get<int>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  if (c.dataset.kind != "synthetic" && c.dataset.kind != "cifar10" && c.dataset.kind != "nuswide")
    throw ConfigError("dataset.kind must be synthetic, cifar10 or nuswide, got '" + c.dataset.kind + "'");
  if (c.dataset.kind == "nuswide" && c.dataset.manifest.empty())
    throw ConfigError("dataset.manifest is required for nuswide");
  if (c.dataset.query_per_class < 1 || c.dataset.train_per_class < 1)
    throw ConfigError("dataset quotas must be >= 1");
  if (c.teacher.arch != "tiny" && c.teacher.arch != "resnet50" && c.teacher.arch != "alexnet")
    throw ConfigError("teacher.arch must be tiny, resnet50 or alexnet, got '" + c.teacher.arch + "'");
  if (c.preprocess.crop_padding < 0) throw ConfigError("preprocess.crop_padding must be >= 0");
  if (c.teacher.input_size < 8 || c.student.options.input_size < 8) throw ConfigError("input sizes must be >= 8");
  if (c.teacher.pretrain_images_per_class < 1) throw ConfigError("teacher.pretrain.images_per_class must be >= 1");
  if (c.evaluate.map_at < 1) throw ConfigError("evaluate.map_at must be >= 1");
  if (c.evaluate.top_k < 1) throw ConfigError("evaluate.top_k must be >= 1");
  validate(c.distill);
  validate(c.finetune);
  if (c.teacher.pretrain.epochs < 1 || c.teacher.pretrain.batch_size < 1)
    throw ConfigError("teacher.pretrain epochs and batch_size must be >= 1");
  make_optimizer(c.teacher.pretrain.optimizer, c.teacher.pretrain.learning_rate);
  return c;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  return parse_config(load_config_document(path, overrides));
}

// ---------------------------------------------------------------------------
// Stage hashes. Each stage hashes the sections it reads plus the hash of the
// stage it builds on. Epoch counts are left out so that a finished run can be
// extended with --resume.

namespace detail {

inline Json without_epochs(Json j) {
  if (j.is_object()) {
    j.erase("epochs");
    for (auto& [k, v] : j.items()) v = without_epochs(v);
  }
  return j;
}

inline std::string hash_parts(std::initializer_list<std::string> parts) {
  io::Fnv1a h;
  for (const auto& p : parts) {
    h.update(p);
    h.update("\x1f", 1);
  }
  return io::hex64(h.digest());
}

}  // namespace detail

inline std::string teacher_hash(const ExperimentConfig& c) {
  return detail::hash_parts({"teacher", std::to_string(c.seed), c.doc.at("dataset").dump(),
                             c.doc.at("preprocess").dump(), detail::without_epochs(c.doc.at("teacher")).dump()});
}

inline std::string distill_hash(const ExperimentConfig& c) {
  return detail::hash_parts({"distill", teacher_hash(c), c.doc.at("student").dump(),
                             detail::without_epochs(c.doc.at("distill")).dump()});
}

inline std::string finetune_hash(const ExperimentConfig& c) {
  return detail::hash_parts({"finetune", distill_hash(c), detail::without_epochs(c.doc.at("finetune")).dump()});
}

inline std::string evaluate_hash(const ExperimentConfig& c) {
  return detail::hash_parts({"evaluate", finetune_hash(c), c.doc.at("evaluate").dump()});
}

/// Dataset root: the configured one, else $HASHKD_DATA_ROOT.
inline std::string data_root(const DatasetConfig& d) {
  if (!d.root.empty()) return d.root;
  const char* env = std::getenv(kDataRootEnv);
  if (env == nullptr || *env == '\0')
    throw ConfigError(std::string("dataset root not set: use dataset.root or ") + kDataRootEnv);
  return env;
}

}  // namespace hashkd
