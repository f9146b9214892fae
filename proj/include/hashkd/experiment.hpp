#pragma once

// The two-stage pipeline as resumable stages over one run directory:
//
//   teacher   pretrain the tiny teacher (desk scale only)
//   distill   regress the frozen teacher's features into the student
//   finetune  add a hash head and train the student under CSQ or DCH
//   encode    binarize query and database codes
//   evaluate  mAP@N, random-ranking baseline and a top-k listing
//
// Every stage writes config_<stage>.json and metrics_<stage>.json, and
// appends model loads and saves to audit.jsonl.

#include <sys/utsname.h>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "hashkd/classifier.hpp"
#include "hashkd/config.hpp"
#include "hashkd/counting.hpp"
#include "hashkd/data.hpp"
#include "hashkd/distillation.hpp"
#include "hashkd/hash_losses.hpp"
#include "hashkd/metrics.hpp"
#include "hashkd/model.hpp"
#include "hashkd/retrieval.hpp"

namespace hashkd {

struct RunOptions {
  bool resume = false;
  std::function<void(const std::string&)> log;
};

struct RunPaths {
  std::filesystem::path dir;

  explicit RunPaths(const std::string& d) : dir(d) {}
  std::string file(const std::string& name) const { return (dir / name).string(); }
  std::string config(const std::string& stage) const { return file("config_" + stage + ".json"); }
  std::string metrics(const std::string& stage) const { return file("metrics_" + stage + ".json"); }
  std::string split() const { return file("split.txt"); }
  std::string teacher() const { return file("teacher.ckpt"); }
  std::string student_kd() const { return file("student_kd.ckpt"); }
  std::string student_ft() const { return file("student_ft.ckpt"); }
  std::string centers() const { return file("centers.txt"); }
  std::string codes_query() const { return file("codes_query.cukd"); }
  std::string codes_db() const { return file("codes_db.cukd"); }
  std::string topk() const { return file("topk.txt"); }
  std::string audit() const { return file("audit.jsonl"); }
  std::filesystem::path features() const { return dir / "features"; }
};

inline Json environment_fingerprint() {
  utsname u{};
  uname(&u);
#if defined(__clang__)
  const std::string compiler = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  const std::string compiler = std::string("gcc ") + __VERSION__;
#else
  const std::string compiler = "unknown";
#endif
  return {{"os", std::string(u.sysname) + " " + u.release},
          {"machine", u.machine},
          {"compiler", compiler},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"simd", Eigen::SimdInstructionSetsInUse()},
          {"hardware_threads", std::thread::hardware_concurrency()}};
}

namespace detail {

class Stage {
 public:
  Stage(std::string name, const ExperimentConfig& cfg, const std::string& out, const RunOptions& opt,
        std::string config_hash)
      : paths(out), opt_(opt) {
    std::filesystem::create_directories(paths.dir);
    report.stage = std::move(name);
    report.config_hash = std::move(config_hash);
    report.experiment = cfg.name;
    report.dataset = cfg.dataset.kind;
    report.environment = environment_fingerprint();
    std::ofstream(paths.config(report.stage)) << cfg.doc.dump(2) << '\n';
  }

  void log(const std::string& line) const {
    if (opt_.log) opt_.log(report.stage + ": " + line);
  }

  void audit(const std::string& event, const std::string& role, const std::string& path, std::uint64_t checksum) {
    Json entry = {{"stage", report.stage}, {"event", event}, {"role", role},
                  {"path", path},          {"checksum", io::hex64(checksum)}, {"config_hash", report.config_hash}};
    std::ofstream(paths.audit(), std::ios::app) << entry.dump() << '\n';
    if (event == "load") report.model_loads.push_back(entry);
  }

  Checkpoint load(const std::string& role, const std::string& path) {
    if (!std::filesystem::exists(path)) throw CheckpointError("missing " + role + " checkpoint '" + path + "'");
    return load_checkpoint(path);
  }

  Model load_model(const std::string& role, const Checkpoint& ck, const std::string& path) {
    Model m = model_from_checkpoint(ck);
    audit("load", role, path, m.checksum());
    return m;
  }

  void save(const std::string& role, const std::string& path, Model& m, const Optimizer* opt,
            const TrainHistory& h, Json meta = Json::object()) {
    Checkpoint ck;
    ck.stage = report.stage;
    ck.config_hash = report.config_hash;
    ck.spec = m.spec();
    meta["history"] = {{"loss", h.loss}, {"seconds", h.seconds}};
    if (opt) meta["optimizer"] = opt->kind();
    ck.meta = std::move(meta);
    ck.tensors = m.state();
    if (opt) {
      const auto os = opt->state();
      ck.tensors.insert(ck.tensors.end(), os.begin(), os.end());
    }
    save_checkpoint(path, ck);
    audit("save", role, path, m.checksum());
  }

  void finish() { write_metrics(paths.metrics(report.stage), report); }

  RunPaths paths;
  MetricsReport report;

 private:
  const RunOptions& opt_;
};

inline TrainHistory history_from_meta(const Json& meta) {
  TrainHistory h;
  if (meta.contains("history")) {
    h.loss = meta["history"].at("loss").get<std::vector<double>>();
    h.seconds = meta["history"].at("seconds").get<std::vector<double>>();
  }
  return h;
}

inline void require_hash(const Checkpoint& ck, const std::string& expected, const std::string& what) {
  if (ck.config_hash != expected)
    throw CheckpointError(what + " was produced under config hash " + ck.config_hash + ", this config hashes to " +
                          expected);
}

inline std::string epoch_line(int epoch, int total, const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch " << epoch << "/" << total << " loss " << h.loss.back() << " (" << std::fixed
     << std::setprecision(2) << h.seconds.back() << " s)";
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Data and models

inline Dataset load_dataset(const DatasetConfig& d) {
  if (d.kind == "synthetic") return make_synthetic(d.synthetic);
  const std::string root = data_root(d);
  if (d.kind == "cifar10") return load_cifar10(root);
  const std::filesystem::path manifest(d.manifest);
  return load_manifest(manifest.is_absolute() ? manifest.string() : (std::filesystem::path(root) / manifest).string(),
                       root);
}

struct DataContext {
  Dataset data;
  DatasetSplit split;
};

/// Loads the dataset and its split. The split is written on first use and
/// must agree with split.txt afterwards.
inline DataContext prepare_data(const ExperimentConfig& c, const RunPaths& p) {
  DataContext ctx{load_dataset(c.dataset), {}};
  ctx.split = split_by_class_quota(ctx.data.labels, ctx.data.num_classes, c.dataset.query_per_class,
                                   c.dataset.train_per_class, c.dataset.split_seed);
  if (std::filesystem::exists(p.split())) {
    DatasetSplit stored;
    try {
      stored = read_split_manifest(p.split(), ctx.data);
    } catch (const DataError& e) {
      throw ConfigError(std::string("run directory belongs to other data: ") + e.what());
    }
    if (stored.train != ctx.split.train || stored.query != ctx.split.query || stored.database != ctx.split.database)
      throw ConfigError("run directory holds a different split (" + p.split() + "); use a fresh output directory");
  } else {
    write_split_manifest(p.split(), ctx.data, ctx.split);
  }
  return ctx;
}

inline ModelSpec teacher_spec(const TeacherConfig& t) {
  ModelSpec s;
  if (t.arch == "tiny") return tiny_teacher_spec(t.feature_dim, t.input_size);
  s = t.arch == "resnet50" ? resnet50_spec() : alexnet_spec();
  s.input = {3, t.input_size, t.input_size};
  return s;
}

inline ModelSpec configured_student_spec(const ExperimentConfig& c) {
  return student_spec(c.student.variant, c.student.options);
}

/// Row label in result tables.
inline std::string student_label(const ExperimentConfig& c) {
  std::string s = configured_student_spec(c).name;
  if (c.student.options.width_divisor > 1) s += " w/" + std::to_string(c.student.options.width_divisor);
  return s;
}

inline std::string teacher_weights_path(const ExperimentConfig& c, const RunPaths& p) {
  return c.teacher.weights.empty() ? p.teacher() : c.teacher.weights;
}

// ---------------------------------------------------------------------------
// Stages

/// Pretrains the tiny teacher as a classifier on a separate synthetic draw
/// that shares the class patterns but none of the downstream images.
inline MetricsReport run_teacher(const ExperimentConfig& c, const std::string& out, const RunOptions& opt = {}) {
  if (c.teacher.arch != "tiny")
    throw ConfigError("the teacher stage only trains the tiny teacher; " + c.teacher.arch +
                      " weights must be supplied through teacher.weights");
  if (c.dataset.kind != "synthetic") throw ConfigError("the tiny teacher is pretrained on synthetic data only");
  SyntheticSpec pre_spec = c.dataset.synthetic;
  pre_spec.images_per_class = c.teacher.pretrain_images_per_class;
  pre_spec.seed = c.teacher.pretrain_data_seed;
  if (pre_spec.seed == c.dataset.synthetic.seed)
    throw ConfigError("teacher.pretrain.data_seed must differ from dataset.synthetic.seed");

  detail::Stage st("teacher", c, out, opt, teacher_hash(c));
  const Dataset pretrain = make_synthetic(pre_spec);
  const ModelSpec backbone_spec = teacher_spec(c.teacher);
  ModelSpec clf_spec = backbone_spec;
  clf_spec.stages.push_back({kClassifierStage, {BlockSpec::linear(pretrain.num_classes, false)}});
  Model clf(clf_spec, c.seed);
  std::vector<std::size_t> items(pretrain.size());
  std::iota(items.begin(), items.end(), std::size_t{0});

  const ClassifierConfig& cc = c.teacher.pretrain;
  const ClassifierHistory h =
      train_classifier(clf, pretrain, items, c.teacher_preprocess(), cc, [&](int epoch, const ClassifierHistory& sofar) {
        std::ostringstream acc;
        acc << " accuracy " << std::fixed << std::setprecision(3) << sofar.accuracy.back();
        st.log(detail::epoch_line(epoch, cc.epochs, sofar.train) + acc.str());
      });
  const TrainHistory& th = h.train;

  Model teacher(backbone_spec, c.seed);
  teacher.load_state(clf.state());
  st.save("teacher", st.paths.teacher(), teacher, nullptr, th,
          {{"train_accuracy", h.accuracy}, {"pretrain_images", pretrain.size()}});
  st.report.model = backbone_spec.name;
  st.report.history = th;
  st.report.counts = {count_parameters(backbone_spec)};
  st.report.extra = {{"train_accuracy", h.accuracy.back()}, {"checksum", io::hex64(teacher.checksum())}};
  st.finish();
  return st.report;
}

inline MetricsReport run_distill(const ExperimentConfig& c, const std::string& out, const RunOptions& opt = {}) {
  const ModelSpec sspec = configured_student_spec(c);
  const ModelSpec tspec = teacher_spec(c.teacher);
  if (sspec.feature_dim != tspec.feature_dim)
    throw ShapeError("teacher " + tspec.name + " emits " + std::to_string(tspec.feature_dim) + " features, student " +
                     sspec.name + " emits " + std::to_string(sspec.feature_dim));

  detail::Stage st("distill", c, out, opt, distill_hash(c));
  const std::string tpath = teacher_weights_path(c, st.paths);
  if (!std::filesystem::exists(tpath)) throw CheckpointError("missing teacher weights '" + tpath + "'");
  const Checkpoint tck = load_checkpoint(tpath);
  if (c.teacher.weights.empty()) detail::require_hash(tck, teacher_hash(c), "teacher checkpoint '" + tpath + "'");
  if (!(tck.spec == tspec))
    throw CheckpointError("teacher weights '" + tpath + "' describe " + tck.spec.name + ", config expects " +
                          tspec.name);
  Model teacher = st.load_model("teacher", tck, tpath);
  const std::uint64_t before = teacher.checksum();
  st.report.teacher_checksum_before = io::hex64(before);

  DataContext ctx = prepare_data(c, st.paths);
  Model student = build_student(c.student.variant, c.seed, c.student.options);
  auto optimizer = make_optimizer(c.distill.optimizer, c.distill.learning_rate);
  KdRun run;
  if (opt.resume && std::filesystem::exists(st.paths.student_kd())) {
    const Checkpoint ck = load_checkpoint(st.paths.student_kd());
    detail::require_hash(ck, st.report.config_hash, "refusing to resume: " + st.paths.student_kd());
    student = st.load_model("student", ck, st.paths.student_kd());
    optimizer->load_state(ck.tensors, student.parameters());
    run.history = detail::history_from_meta(ck.meta);
    if (run.history.epochs_done() > c.distill.epochs)
      throw ConfigError("checkpoint already holds " + std::to_string(run.history.epochs_done()) +
                        " epochs, config asks for " + std::to_string(c.distill.epochs));
    st.log("resuming after epoch " + std::to_string(run.history.epochs_done()));
  }
  st.report.extra["resumed_from_epoch"] = run.history.epochs_done();

  const Preprocess tpre = c.teacher_preprocess(), spre = c.student_preprocess();
  if (!c.distill.augment) {
    // Teacher targets only depend on the teacher weights and the images.
    io::Fnv1a h;
    h.update(ctx.data.fingerprint());
    for (std::size_t i : ctx.split.train) h.update(&i, sizeof i);
    const auto size = static_cast<std::uint32_t>(tpre.size);
    h.update(&size, sizeof size);
    h.update(tpre.mean.data(), sizeof(float) * 3);
    h.update(tpre.stdev.data(), sizeof(float) * 3);
    std::filesystem::create_directories(st.paths.features());
    const std::string cache =
        (st.paths.features() / ("teacher_" + io::hex64(before) + "_" + io::hex64(h.digest()) + ".hkfc")).string();
    if (std::filesystem::exists(cache)) {
      run.teacher_features = read_feature_cache(cache);
      st.log("teacher features from cache");
    } else {
      run.teacher_features = extract_dataset_features(teacher, ctx.data, ctx.split.train, tpre, c.distill.batch_size);
      write_feature_cache(cache, run.teacher_features);
    }
  }
  run.optimizer = optimizer.get();
  run.on_epoch = [&](int epoch, const TrainHistory& h, const Optimizer& o) {
    st.save("student", st.paths.student_kd(), student, &o, h);
    st.log(detail::epoch_line(epoch, c.distill.epochs, h));
  };
  st.report.history = train_kd(teacher, student, ctx.data, ctx.split.train, tpre, spre, c.distill, std::move(run));

  st.report.teacher_checksum_after = io::hex64(teacher.checksum());
  st.report.model = student_label(c);
  st.report.counts = {count_flops(tspec), count_flops(sspec)};
  st.report.extra["teacher"] = tspec.name;
  st.report.extra["train_items"] = ctx.split.train.size();
  st.finish();
  return st.report;
}

inline MetricsReport run_finetune(const ExperimentConfig& c, const std::string& out, const RunOptions& opt = {}) {
  detail::Stage st("finetune", c, out, opt, finetune_hash(c));
  DataContext ctx = prepare_data(c, st.paths);
  const FinetuneConfig& fc = c.finetune;

  Model model = [&] {
    if (c.finetune_from_scratch) return attach_hash_head(build_student(c.student.variant, c.seed, c.student.options), fc.n_bits, c.seed + 1);
    const Checkpoint kd = st.load("distilled student", st.paths.student_kd());
    detail::require_hash(kd, distill_hash(c), "distilled student '" + st.paths.student_kd() + "'");
    const int done = detail::history_from_meta(kd.meta).epochs_done();
    if (done != c.distill.epochs)
      throw CheckpointError("distillation is incomplete (" + std::to_string(done) + " of " +
                            std::to_string(c.distill.epochs) + " epochs); rerun distill with --resume");
    return attach_hash_head(st.load_model("student_kd", kd, st.paths.student_kd()), fc.n_bits, c.seed + 1);
  }();

  auto optimizer = make_optimizer(fc.optimizer, fc.learning_rate);
  FinetuneRun run;
  if (opt.resume && std::filesystem::exists(st.paths.student_ft())) {
    const Checkpoint ck = load_checkpoint(st.paths.student_ft());
    detail::require_hash(ck, st.report.config_hash, "refusing to resume: " + st.paths.student_ft());
    model = st.load_model("student_ft", ck, st.paths.student_ft());
    optimizer->load_state(ck.tensors, model.parameters());
    run.history = detail::history_from_meta(ck.meta);
    if (run.history.epochs_done() > fc.epochs)
      throw ConfigError("checkpoint already holds " + std::to_string(run.history.epochs_done()) +
                        " epochs, config asks for " + std::to_string(fc.epochs));
    st.log("resuming after epoch " + std::to_string(run.history.epochs_done()));
  }
  st.report.extra["resumed_from_epoch"] = run.history.epochs_done();

  std::optional<HashCenterSet> centers;
  if (fc.framework == Framework::csq) {
    centers = generate_hash_centers(ctx.data.num_classes, fc.n_bits, c.seed);
    write_centers(st.paths.centers(), *centers);
    const CenterStats cs = center_stats(*centers);
    st.report.extra["centers"] = {{"method", centers->method},
                                  {"min_distance", cs.min_distance},
                                  {"mean_distance", cs.mean_distance}};
  }
  run.optimizer = optimizer.get();
  run.on_epoch = [&](int epoch, const TrainHistory& h, const Optimizer& o) {
    st.save("student_ft", st.paths.student_ft(), model, &o, h);
    st.log(detail::epoch_line(epoch, fc.epochs, h));
  };
  st.report.history = finetune_retrieval(model, ctx.data, ctx.split.train, c.student_preprocess(), fc,
                                         centers ? &*centers : nullptr, std::move(run));
  st.report.model = student_label(c);
  st.report.framework = to_string(fc.framework);
  st.report.n_bits = fc.n_bits;
  st.report.counts = {count_flops(model.spec())};
  st.report.extra["lambda_q"] = fc.effective_lambda_q();
  st.finish();
  return st.report;
}

inline MetricsReport run_encode(const ExperimentConfig& c, const std::string& out, const RunOptions& opt = {}) {
  detail::Stage st("encode", c, out, opt, finetune_hash(c));
  const Checkpoint ck = st.load("fine-tuned student", st.paths.student_ft());
  detail::require_hash(ck, finetune_hash(c), "fine-tuned student '" + st.paths.student_ft() + "'");
  Model model = st.load_model("student_ft", ck, st.paths.student_ft());
  if (model.output_dim() != c.finetune.n_bits)
    throw CheckpointError("checkpoint emits " + std::to_string(model.output_dim()) + " bits, config asks for " +
                          std::to_string(c.finetune.n_bits));
  DataContext ctx = prepare_data(c, st.paths);
  const Preprocess pre = c.student_preprocess();
  auto encode = [&](const std::vector<std::size_t>& items, const std::string& path) {
    std::vector<std::uint64_t> ids;
    std::vector<std::vector<int>> labels;
    for (std::size_t i : items) {
      ids.push_back(ctx.data.ids[i]);
      labels.push_back(ctx.data.labels[i]);
    }
    const CodeMatrix codes = binarize(extract_dataset_features(model, ctx.data, items, pre), ids, labels);
    write_codes(path, codes);
    return codes.size();
  };
  Stopwatch clock;
  st.report.extra["query_codes"] = encode(ctx.split.query, st.paths.codes_query());
  st.report.extra["database_codes"] = encode(ctx.split.database, st.paths.codes_db());
  st.report.extra["seconds"] = clock.seconds();
  st.log("wrote " + st.paths.codes_query() + " and " + st.paths.codes_db());
  st.report.model = student_label(c);
  st.report.framework = to_string(c.finetune.framework);
  st.report.n_bits = c.finetune.n_bits;
  st.finish();
  return st.report;
}

inline MetricsReport run_evaluate(const ExperimentConfig& c, const std::string& out, const RunOptions& opt = {}) {
  detail::Stage st("evaluate", c, out, opt, evaluate_hash(c));
  const std::string encoded = st.paths.metrics("encode");
  if (!std::filesystem::exists(encoded)) throw CheckpointError("no encoded codes in '" + out + "'; run encode first");
  if (read_metrics(encoded).config_hash != finetune_hash(c))
    throw CheckpointError("codes in '" + out + "' were encoded under a different config");
  const CodeMatrix q = read_codes(st.paths.codes_query());
  const CodeMatrix db = read_codes(st.paths.codes_db());
  if (q.k_bits != c.finetune.n_bits || db.k_bits != c.finetune.n_bits)
    throw ConfigError("codes have " + std::to_string(q.k_bits) + " bits, config asks for " +
                      std::to_string(c.finetune.n_bits));
  const auto n = static_cast<std::size_t>(c.evaluate.map_at);
  const MapResult r = map_at_n(q, db, n);
  const double baseline = random_ranking_map(q.labels, db.labels, n);
  {
    std::ofstream topk(st.paths.topk(), std::ios::trunc);
    topk << topk_listing(q, db, static_cast<std::size_t>(c.evaluate.top_k));
    if (!topk) throw IoError("cannot write '" + st.paths.topk() + "'");
  }
  st.report.map = MapRecord{c.evaluate.map_at, r.map, baseline};
  st.report.model = student_label(c);
  st.report.framework = to_string(c.finetune.framework);
  st.report.n_bits = c.finetune.n_bits;
  st.report.counts = {count_flops(with_hash_head(configured_student_spec(c), c.finetune.n_bits))};
  st.report.extra["per_query_ap"] = r.ap;
  std::ostringstream line;
  line << "mAP@" << n << " = " << r.map << " (random ranking " << baseline << ")";
  st.log(line.str());
  st.finish();
  return st.report;
}

/// Every stage in order; the teacher stage runs only when the tiny teacher
/// has no weights yet.
inline std::vector<MetricsReport> run_all(const ExperimentConfig& c, const std::string& out,
                                          const RunOptions& opt = {}) {
  std::vector<MetricsReport> reports;
  if (c.teacher.arch == "tiny" && c.teacher.weights.empty() && !std::filesystem::exists(RunPaths(out).teacher()))
    reports.push_back(run_teacher(c, out, opt));
  reports.push_back(run_distill(c, out, opt));
  reports.push_back(run_finetune(c, out, opt));
  reports.push_back(run_encode(c, out, opt));
  reports.push_back(run_evaluate(c, out, opt));
  return reports;
}

// ---------------------------------------------------------------------------
// Parameter and FLOP comparison of the published pairs

inline std::vector<CountReport> published_pair_counts(int n_bits = 64) {
  std::vector<CountReport> rows;
  for (const ModelSpec& s : {resnet50_spec(), student_spec(StudentVariant::v1), alexnet_spec(),
                             student_spec(StudentVariant::v2)}) {
    CountReport r = count_flops(with_hash_head(s, n_bits));
    r.model = s.name;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace hashkd
