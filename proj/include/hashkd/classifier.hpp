#pragma once

// Softmax classification on top of a feature extractor. Used to pretrain the
// desk-scale teacher and as a separability check for synthetic data.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hashkd/data.hpp"
#include "hashkd/distillation.hpp"
#include "hashkd/model.hpp"
#include "hashkd/optim.hpp"
#include "hashkd/train.hpp"

namespace hashkd {

inline constexpr const char* kClassifierStage = "Classifier";

struct ClassifierConfig {
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool augment = false;
};

struct CrossEntropy {
  double loss = 0.0;
  int correct = 0;
  FeatureMatrix grad;
};

/// Mean softmax cross-entropy over the batch; targets are single class ids.
inline CrossEntropy softmax_cross_entropy(const FeatureMatrix& logits, std::span<const int> targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) throw ShapeError("cross entropy: one target per row");
  CrossEntropy ce;
  ce.grad.resize(logits.rows(), logits.cols());
  const double n = static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw DataError("cross entropy: target " + std::to_string(t) + " out of range");
    Eigen::Index arg = 0;
    const double mx = logits.row(i).maxCoeff(&arg);
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    ce.loss += std::log(z) - (logits(i, t) - mx);
    ce.grad.row(i) = e / (z * n);
    ce.grad(i, t) -= 1.0 / n;
    ce.correct += arg == t;
  }
  ce.loss /= n;
  return ce;
}

struct ClassifierHistory {
  TrainHistory train;
  std::vector<double> accuracy;  // training accuracy per epoch
};

/// Trains `model` (whose output is the logits) on the first label of each item.
inline ClassifierHistory train_classifier(Model& model, const Dataset& data, std::span<const std::size_t> items,
                                          const Preprocess& pre, const ClassifierConfig& cfg,
                                          const std::function<void(int, const ClassifierHistory&)>& on_epoch = {}) {
  if (items.empty()) throw DataError("classifier training set is empty");
  if (model.output_dim() != data.num_classes)
    throw ShapeError("classifier emits " + std::to_string(model.output_dim()) + " logits for " +
                     std::to_string(data.num_classes) + " classes");
  auto opt = make_optimizer(cfg.optimizer, cfg.learning_rate);
  const ParamRefs params = model.parameters();
  ClassifierHistory h;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(epoch_seed(cfg.seed, epoch));
    Stopwatch clock;
    double total = 0.0;
    int correct = 0;
    for (const auto& b : make_batches(items.size(), cfg.batch_size, rng)) {
      std::vector<std::size_t> idx;
      std::vector<int> targets;
      for (std::size_t p : b) {
        idx.push_back(items[p]);
        targets.push_back(data.labels[items[p]].at(0));
      }
      const auto augs = cfg.augment ? draw_augments(idx.size(), pre, rng) : std::vector<Augment>{};
      const Tensor y = model.forward(make_batch(data, idx, pre, augs), Mode::train);
      const CrossEntropy ce = softmax_cross_entropy(to_matrix(y), targets);
      model.zero_grad();
      model.backward(to_tensor(ce.grad, y.shape()));
      opt->step(params);
      total += ce.loss * static_cast<double>(b.size());
      correct += ce.correct;
    }
    h.train.loss.push_back(total / static_cast<double>(items.size()));
    h.train.seconds.push_back(clock.seconds());
    h.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(items.size()));
    if (!std::isfinite(h.train.loss.back()))
      throw NumericError("classifier loss diverged at epoch " + std::to_string(epoch + 1));
    if (on_epoch) on_epoch(epoch + 1, h);
  }
  return h;
}

/// Inference-mode accuracy on `items`.
inline double classifier_accuracy(Model& model, const Dataset& data, std::span<const std::size_t> items,
                                  const Preprocess& pre) {
  const FeatureMatrix logits = extract_dataset_features(model, data, items, pre);
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += arg == data.labels[items[static_cast<std::size_t>(i)]].at(0);
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace hashkd
