#pragma once

// Feature-regression distillation: the student learns to reproduce a frozen
// teacher's last-layer features under a squared error that sums over the
// feature dimension and averages over the batch.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hashkd/binary_io.hpp"
#include "hashkd/data.hpp"
#include "hashkd/model.hpp"
#include "hashkd/optim.hpp"
#include "hashkd/train.hpp"

namespace hashkd {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Real-valued hash-layer output, N x K_bits.
using HashOutput = FeatureMatrix;

enum class FeatureSource { teacher, student };

struct FeatureBatch {
  FeatureMatrix values;  // N x K
  FeatureSource source = FeatureSource::student;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

inline FeatureMatrix to_matrix(const Tensor& t) {
  FeatureMatrix m(t.batch(), static_cast<Eigen::Index>(t.sample_size()));
  for (int n = 0; n < t.batch(); ++n)
    for (std::size_t k = 0; k < t.sample_size(); ++k) m(n, static_cast<Eigen::Index>(k)) = t.sample(n)[k];
  return m;
}

inline Tensor to_tensor(const FeatureMatrix& m, TensorShape shape) {
  if (shape.size() != static_cast<std::size_t>(m.cols())) throw ShapeError("feature width does not match shape");
  Tensor t(static_cast<int>(m.rows()), shape);
  for (Eigen::Index n = 0; n < m.rows(); ++n)
    for (Eigen::Index k = 0; k < m.cols(); ++k) t.sample(static_cast<int>(n))[k] = static_cast<float>(m(n, k));
  return t;
}

namespace detail {

inline void check_pair(const FeatureMatrix& t, const FeatureMatrix& s) {
  if (t.rows() != s.rows() || t.cols() != s.cols())
    throw ShapeError("feature batches differ in shape: teacher " + std::to_string(t.rows()) + "x" +
                     std::to_string(t.cols()) + ", student " + std::to_string(s.rows()) + "x" +
                     std::to_string(s.cols()));
  if (t.rows() == 0) throw ShapeError("empty feature batch");
  if (!t.allFinite()) throw NumericError("teacher features contain non-finite values");
  if (!s.allFinite()) throw NumericError("student features contain non-finite values");
}

}  // namespace detail

/// (1/N) sum_i sum_j (S_ij - T_ij)^2
inline double kd_loss(const FeatureMatrix& teacher, const FeatureMatrix& student) {
  detail::check_pair(teacher, student);
  return (student - teacher).squaredNorm() / static_cast<double>(student.rows());
}

inline double kd_loss(const FeatureBatch& teacher, const FeatureBatch& student) {
  return kd_loss(teacher.values, student.values);
}

/// d loss / d S = (2/N)(S - T); the teacher receives no gradient.
inline FeatureMatrix kd_loss_gradient(const FeatureMatrix& teacher, const FeatureMatrix& student) {
  detail::check_pair(teacher, student);
  return (2.0 / static_cast<double>(student.rows())) * (student - teacher);
}

/// Inference-mode features, one row per image.
inline FeatureBatch extract_features(Model& model, const Tensor& images,
                                     FeatureSource source = FeatureSource::student) {
  return {to_matrix(model.forward(images, Mode::eval)), source};
}

/// Features for `items` of `data`, computed in chunks of `batch_size`.
inline FeatureMatrix extract_dataset_features(Model& model, const Dataset& data, std::span<const std::size_t> items,
                                              const Preprocess& pre, int batch_size = 64) {
  FeatureMatrix out(static_cast<Eigen::Index>(items.size()), model.output_dim());
  for (std::size_t i = 0; i < items.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(items.size() - i, static_cast<std::size_t>(batch_size));
    const Tensor x = make_batch(data, items.subspan(i, n), pre);
    out.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = to_matrix(model.forward(x, Mode::eval));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature cache: "HKFC", u16 version, u32 K, u64 count, count*K f32 row-major

inline constexpr char kFeatureCacheMagic[4] = {'H', 'K', 'F', 'C'};
inline constexpr std::uint16_t kFeatureCacheVersion = 1;

inline void write_feature_cache(const std::string& path, const FeatureMatrix& f) {
  io::Writer w;
  w.raw(std::string_view(kFeatureCacheMagic, 4));
  w.u16(kFeatureCacheVersion);
  w.u32(static_cast<std::uint32_t>(f.cols()));
  w.u64(static_cast<std::uint64_t>(f.rows()));
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index k = 0; k < f.cols(); ++k) w.f32(static_cast<float>(f(i, k)));
  w.save(path);
}

inline FeatureMatrix read_feature_cache(const std::string& path) {
  auto r = io::Reader::from_file(path);
  if (r.raw(4) != std::string_view(kFeatureCacheMagic, 4)) throw DataError("'" + path + "' is not a feature cache");
  const auto version = r.u16();
  if (version != kFeatureCacheVersion)
    throw DataError("feature cache version " + std::to_string(version) + " unsupported");
  const auto k = r.u32();
  const auto n = r.u64();
  r.require(n * k * 4);
  FeatureMatrix f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index j = 0; j < f.cols(); ++j) f(i, j) = r.f32();
  return f;
}

// ---------------------------------------------------------------------------
// Training

struct DistillConfig {
  std::string optimizer = "adam";
  double learning_rate = 1e-4;
  int epochs = 1;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool augment = false;
};

inline void validate(const DistillConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("distill: learning_rate must be > 0");
  if (c.epochs < 1) throw ConfigError("distill: epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
  make_optimizer(c.optimizer, c.learning_rate);
}

struct KdRun {
  /// Optimizer to continue with (resume); a fresh one is made when null.
  Optimizer* optimizer = nullptr;
  /// Epochs already completed (resume); training continues after them.
  TrainHistory history;
  /// Teacher features for every item in `items` order; computed if empty.
  FeatureMatrix teacher_features;
  EpochHook on_epoch;
};

/// Trains `student` to regress `teacher` features on `items` of `data`. The
/// teacher only ever runs in inference mode and is never written to.
inline TrainHistory train_kd(Model& teacher, Model& student, const Dataset& data,
                             std::span<const std::size_t> items, const Preprocess& teacher_pre,
                             const Preprocess& student_pre, const DistillConfig& cfg, KdRun run = {}) {
  validate(cfg);
  if (items.empty()) throw DataError("distillation dataset is empty");
  if (teacher.output_dim() != student.output_dim())
    throw ShapeError("teacher feature dim " + std::to_string(teacher.output_dim()) + " != student feature dim " +
                     std::to_string(student.output_dim()));
  if (teacher.spec().input != TensorShape{3, teacher_pre.size, teacher_pre.size})
    throw ShapeError("teacher expects " + to_string(teacher.spec().input) + ", preprocessing gives size " +
                     std::to_string(teacher_pre.size));
  if (student.spec().input != TensorShape{3, student_pre.size, student_pre.size})
    throw ShapeError("student expects " + to_string(student.spec().input) + ", preprocessing gives size " +
                     std::to_string(student_pre.size));

  std::unique_ptr<Optimizer> owned;
  Optimizer* opt = run.optimizer;
  if (opt == nullptr) {
    owned = make_optimizer(cfg.optimizer, cfg.learning_rate);
    opt = owned.get();
  }
  // Fixed teacher targets can be computed once; augmented inputs cannot.
  if (!cfg.augment && run.teacher_features.rows() == 0)
    run.teacher_features = extract_dataset_features(teacher, data, items, teacher_pre, cfg.batch_size);
  if (!cfg.augment && run.teacher_features.rows() != static_cast<Eigen::Index>(items.size()))
    throw DataError("cached teacher features cover " + std::to_string(run.teacher_features.rows()) +
                    " items, dataset has " + std::to_string(items.size()));

  TrainHistory history = std::move(run.history);
  const ParamRefs params = student.parameters();
  for (int epoch = history.epochs_done(); epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(epoch_seed(cfg.seed, epoch));
    const auto batches = make_batches(items.size(), cfg.batch_size, rng);
    Stopwatch clock;
    double total = 0.0;
    for (const auto& b : batches) {
      std::vector<std::size_t> idx;
      for (std::size_t p : b) idx.push_back(items[p]);
      FeatureMatrix target;
      std::vector<Augment> augs;
      if (cfg.augment) {
        // Both models see the same crop and flip, each at its own resolution.
        augs = draw_augments(idx.size(), student_pre, rng);
        target = to_matrix(teacher.forward(make_batch(data, idx, teacher_pre, augs), Mode::eval));
      } else {
        target.resize(static_cast<Eigen::Index>(b.size()), run.teacher_features.cols());
        for (std::size_t r = 0; r < b.size(); ++r)
          target.row(static_cast<Eigen::Index>(r)) = run.teacher_features.row(static_cast<Eigen::Index>(b[r]));
      }
      const Tensor y = student.forward(make_batch(data, idx, student_pre, augs), Mode::train);
      const FeatureMatrix s = to_matrix(y);
      const double loss = kd_loss(target, s);
      student.zero_grad();
      student.backward(to_tensor(kd_loss_gradient(target, s), y.shape()));
      opt->step(params);
      total += loss * static_cast<double>(b.size());
    }
    history.loss.push_back(total / static_cast<double>(items.size()));
    history.seconds.push_back(clock.seconds());
    if (!std::isfinite(history.loss.back()))
      throw NumericError("distillation loss diverged at epoch " + std::to_string(epoch + 1));
    if (run.on_epoch) run.on_epoch(epoch + 1, history, *opt);
  }
  return history;
}

}  // namespace hashkd
