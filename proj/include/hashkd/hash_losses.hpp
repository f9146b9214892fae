#pragma once

// Objectives for the hash head: central similarity (CSQ) against per-class
// hash centers, and the Cauchy pairwise loss with quantization (DCH).
// Both operate on the raw head outputs h (N x K_bits, before any tanh).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hashkd/data.hpp"
#include "hashkd/distillation.hpp"
#include "hashkd/model.hpp"
#include "hashkd/optim.hpp"
#include "hashkd/train.hpp"

namespace hashkd {

// ---------------------------------------------------------------------------
// Hash centers

struct HashCenterSet {
  int k_bits = 0;
  std::vector<std::vector<std::uint8_t>> centers;  // num_classes x k_bits, 0/1
  std::string method;                              // "hadamard" or "random"

  int num_classes() const { return static_cast<int>(centers.size()); }
};

struct CenterStats {
  bool distinct = true;
  int min_distance = 0;
  double mean_distance = 0.0;
};

inline int hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

/// Exhaustive pair enumeration.
inline CenterStats center_stats(const HashCenterSet& s) {
  CenterStats st;
  st.min_distance = s.k_bits;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.centers.size(); ++i)
    for (std::size_t j = i + 1; j < s.centers.size(); ++j) {
      const int d = hamming(s.centers[i], s.centers[j]);
      if (d == 0) st.distinct = false;
      st.min_distance = std::min(st.min_distance, d);
      sum += d;
      ++pairs;
    }
  st.mean_distance = pairs ? sum / static_cast<double>(pairs) : static_cast<double>(s.k_bits);
  return st;
}

inline bool centers_valid(const CenterStats& st, int k_bits) {
  return st.distinct && 2.0 * st.mean_distance >= static_cast<double>(k_bits);
}

/// Sylvester Hadamard matrix of order n (a power of two), entries +-1.
inline std::vector<std::vector<int>> sylvester_hadamard(int n) {
  std::vector<std::vector<int>> h{{1}};
  for (int m = 1; m < n; m *= 2) {
    std::vector<std::vector<int>> next(static_cast<std::size_t>(2 * m), std::vector<int>(static_cast<std::size_t>(2 * m)));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        const int v = h[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        next[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
        next[static_cast<std::size_t>(i)][static_cast<std::size_t>(j + m)] = v;
        next[static_cast<std::size_t>(i + m)][static_cast<std::size_t>(j)] = v;
        next[static_cast<std::size_t>(i + m)][static_cast<std::size_t>(j + m)] = -v;
      }
    h = std::move(next);
  }
  return h;
}

inline constexpr int kCenterRounds = 200;

/// Rows of [H; -H] mapped to {0,1} when K_bits is a power of two and
/// 2*K_bits >= num_classes (any two rows then differ in exactly K/2 or K
/// bits). Otherwise balanced random codes: a fixed number of seeded rounds,
/// keeping the valid set with the largest minimum distance.
inline HashCenterSet generate_hash_centers(int num_classes, int k_bits, std::uint64_t seed = 0) {
  if (num_classes < 2) throw ConfigError("hash centers need at least 2 classes");
  if (k_bits < 2) throw ConfigError("hash centers need at least 2 bits");
  HashCenterSet set;
  set.k_bits = k_bits;
  const bool pow2 = (k_bits & (k_bits - 1)) == 0;
  if (pow2 && 2 * k_bits >= num_classes) {
    set.method = "hadamard";
    const auto h = sylvester_hadamard(k_bits);
    for (int c = 0; c < num_classes; ++c) {
      const auto& row = h[static_cast<std::size_t>(c % k_bits)];
      const int sign = c < k_bits ? 1 : -1;
      std::vector<std::uint8_t> code;
      for (int v : row) code.push_back(sign * v > 0 ? 1 : 0);
      set.centers.push_back(std::move(code));
    }
    return set;
  }

  set.method = "random";
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> base(static_cast<std::size_t>(k_bits), 0);
  std::fill(base.begin(), base.begin() + k_bits / 2, 1);
  HashCenterSet best;
  int best_min = -1;
  int best_seen = -1;
  for (int round = 0; round < kCenterRounds; ++round) {
    HashCenterSet cand{k_bits, {}, "random"};
    for (int c = 0; c < num_classes; ++c) {
      auto code = base;
      std::shuffle(code.begin(), code.end(), rng);
      cand.centers.push_back(std::move(code));
    }
    const CenterStats st = center_stats(cand);
    best_seen = std::max(best_seen, st.distinct ? st.min_distance : 0);
    if (centers_valid(st, k_bits) && st.min_distance > best_min) {
      best_min = st.min_distance;
      best = std::move(cand);
    }
  }
  if (best_min < 0)
    throw ConfigError("no valid hash center set for " + std::to_string(num_classes) + " classes at " +
                      std::to_string(k_bits) + " bits after " + std::to_string(kCenterRounds) +
                      " rounds (best minimum distance " + std::to_string(best_seen) + ")");
  return best;
}

inline void write_centers(const std::string& path, const HashCenterSet& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& c : s.centers) {
    for (std::uint8_t b : c) out << static_cast<char>('0' + b);
    out << '\n';
  }
}

inline HashCenterSet read_centers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  HashCenterSet s;
  s.method = "file";
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::uint8_t> c;
    for (char ch : line) {
      if (ch != '0' && ch != '1') throw DataError("hash center file '" + path + "' has a non-binary character");
      c.push_back(static_cast<std::uint8_t>(ch - '0'));
    }
    if (s.k_bits == 0) s.k_bits = static_cast<int>(c.size());
    if (static_cast<int>(c.size()) != s.k_bits) throw DataError("hash center file '" + path + "' has ragged rows");
    s.centers.push_back(std::move(c));
  }
  return s;
}

/// Target center per sample: the class center, or for several labels the
/// bitwise majority of their centers with ties going to 1.
inline FeatureMatrix csq_targets(const std::vector<std::vector<int>>& labels, const HashCenterSet& centers) {
  FeatureMatrix t(static_cast<Eigen::Index>(labels.size()), centers.k_bits);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& ls = labels[i];
    if (ls.empty()) throw DataError("sample " + std::to_string(i) + " has no label for a CSQ target");
    for (int k = 0; k < centers.k_bits; ++k) {
      int ones = 0;
      for (int l : ls) {
        if (l < 0 || l >= centers.num_classes())
          throw ConfigError("label " + std::to_string(l) + " has no hash center (" +
                            std::to_string(centers.num_classes()) + " centers)");
        ones += centers.centers[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)];
      }
      t(static_cast<Eigen::Index>(i), k) = 2 * ones >= static_cast<int>(ls.size()) ? 1.0 : 0.0;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses

struct LossValue {
  double total = 0.0;
  double main = 0.0;          // central or pairwise term
  double quantization = 0.0;  // before the lambda_q weight
  FeatureMatrix grad;         // d total / d h
};

namespace detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double sign(double x) { return (x > 0) - (x < 0); }

inline void check_output(const HashOutput& h, const char* who) {
  if (h.rows() == 0 || h.cols() == 0) throw ShapeError(std::string(who) + ": empty hash output");
  if (!h.allFinite()) throw NumericError(std::string(who) + ": hash output has non-finite values");
}

}  // namespace detail

/// Central term: binary cross-entropy between (tanh(h)+1)/2 and the target
/// bits, averaged over samples and bits. Quantization term: mean of
/// log cosh(|tanh h| - 1).
inline LossValue csq_loss(const HashOutput& h, const FeatureMatrix& targets, double lambda_q) {
  detail::check_output(h, "csq_loss");
  if (targets.rows() != h.rows() || targets.cols() != h.cols())
    throw ShapeError("csq_loss: targets are " + std::to_string(targets.rows()) + "x" +
                     std::to_string(targets.cols()) + ", outputs " + std::to_string(h.rows()) + "x" +
                     std::to_string(h.cols()));
  if (lambda_q < 0.0) throw ConfigError("csq_loss: lambda_q must be non-negative");
  const double n = static_cast<double>(h.size());
  LossValue out;
  out.grad.resize(h.rows(), h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index k = 0; k < h.cols(); ++k) {
      const double c = targets(i, k);
      if (c != 0.0 && c != 1.0)
        throw DataError("csq_loss: target bit (" + std::to_string(i) + ", " + std::to_string(k) + ") is not 0/1");
      const double x = h(i, k);
      // (tanh x + 1) / 2 == sigmoid(2x)
      out.main += c * detail::softplus(-2.0 * x) + (1.0 - c) * detail::softplus(2.0 * x);
      const double u = std::tanh(x);
      const double r = std::abs(u) - 1.0;
      out.quantization += std::log(std::cosh(r));
      const double dmain = 2.0 * (detail::sigmoid(2.0 * x) - c);
      const double dq = std::tanh(r) * detail::sign(u) * (1.0 - u * u);
      out.grad(i, k) = (dmain + lambda_q * dq) / n;
    }
  }
  out.main /= n;
  out.quantization /= n;
  out.total = out.main + lambda_q * out.quantization;
  return out;
}

/// s_ij = 1 iff the label sets of i and j intersect.
struct PairwiseSimilarity {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> s;

  static PairwiseSimilarity from_labels(const std::vector<std::vector<int>>& labels) {
    PairwiseSimilarity p;
    const auto n = static_cast<Eigen::Index>(labels.size());
    p.s.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        p.s(i, j) = i == j || share_label(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
    return p;
  }
  Eigen::Index size() const { return s.rows(); }
};

struct DchParams {
  double gamma = 20.0;
  double lambda_q = 0.1;
};

/// Floor on the distance of dissimilar pairs, where -log(1-p) = log(1+gamma/d)
/// diverges as d -> 0.
inline constexpr double kDchMinDistance = 1e-6;

/// Pairwise term over i<j: w_ij * [s log(1 + d/gamma) + (1-s) log(1 + gamma/d)]
/// with d = (K/2)(1 - cos(h_i, h_j)) and weights 1/(2 S1), 1/(2 S0) balancing
/// similar and dissimilar pairs (1/S when only one kind is present).
/// Quantization: mean over samples of log(1 + d(|h_i|, 1)/gamma).
inline LossValue dch_loss(const HashOutput& h, const PairwiseSimilarity& sim, DchParams p = {}) {
  detail::check_output(h, "dch_loss");
  const Eigen::Index n = h.rows();
  const double k = static_cast<double>(h.cols());
  if (n < 2) throw ShapeError("dch_loss: needs at least 2 samples, got " + std::to_string(n));
  if (sim.size() != n) throw ShapeError("dch_loss: similarity is " + std::to_string(sim.size()) + "x" +
                                        std::to_string(sim.size()) + " for " + std::to_string(n) + " samples");
  if (!(p.gamma > 0.0)) throw ConfigError("dch_loss: gamma must be positive");
  if (p.lambda_q < 0.0) throw ConfigError("dch_loss: lambda_q must be non-negative");

  Eigen::VectorXd norm(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    norm(i) = h.row(i).norm();
    if (!(norm(i) > 0.0)) throw NumericError("dch_loss: hash vector of sample " + std::to_string(i) + " has zero norm");
  }
  std::size_t s1 = 0, s0 = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) (sim.s(i, j) ? s1 : s0) += 1;
  const double w1 = s0 == 0 ? 1.0 / static_cast<double>(s1) : 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(s1, 1)));
  const double w0 = s1 == 0 ? 1.0 / static_cast<double>(s0) : 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(s0, 1)));

  LossValue out;
  out.grad = FeatureMatrix::Zero(n, h.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double cos = h.row(i).dot(h.row(j)) / (norm(i) * norm(j));
      const double d = 0.5 * k * (1.0 - cos);
      double l, dl_dd;
      if (sim.s(i, j)) {
        l = w1 * std::log1p(d / p.gamma);
        dl_dd = w1 / (p.gamma + d);
      } else {
        const double dc = std::max(d, kDchMinDistance);
        l = w0 * std::log1p(p.gamma / dc);
        dl_dd = d > kDchMinDistance ? -w0 * p.gamma / (dc * (p.gamma + dc)) : 0.0;
      }
      out.main += l;
      // d cos / d h_i = h_j / (|h_i||h_j|) - cos h_i / |h_i|^2 ; d d / d cos = -K/2
      const double g = -0.5 * k * dl_dd;
      out.grad.row(i) += g * (h.row(j) / (norm(i) * norm(j)) - cos * h.row(i) / (norm(i) * norm(i)));
      out.grad.row(j) += g * (h.row(i) / (norm(i) * norm(j)) - cos * h.row(j) / (norm(j) * norm(j)));
    }
  }
  const double sqrt_k = std::sqrt(k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double l1 = h.row(i).cwiseAbs().sum();
    const double cos = l1 / (norm(i) * sqrt_k);
    const double d = 0.5 * k * (1.0 - cos);
    out.quantization += std::log1p(d / p.gamma);
    const double g = p.lambda_q / static_cast<double>(n) * (-0.5 * k) / (p.gamma + d);
    for (Eigen::Index c = 0; c < h.cols(); ++c) {
      const double x = h(i, c);
      const double dcos = detail::sign(x) / (norm(i) * sqrt_k) - cos * x / (norm(i) * norm(i));
      out.grad(i, c) += g * dcos;
    }
  }
  out.quantization /= static_cast<double>(n);
  out.total = out.main + p.lambda_q * out.quantization;
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

enum class Framework { csq, dch };

inline std::string to_string(Framework f) { return f == Framework::csq ? "CSQ" : "DCH"; }

inline Framework framework_from_string(const std::string& s) {
  if (s == "csq" || s == "CSQ") return Framework::csq;
  if (s == "dch" || s == "DCH") return Framework::dch;
  throw ConfigError("unknown framework '" + s + "' (expected csq or dch)");
}

inline double default_lambda_q(Framework f) { return f == Framework::csq ? 1e-4 : 0.1; }

struct FinetuneConfig {
  Framework framework = Framework::csq;
  int n_bits = 64;
  std::string optimizer = "rmsprop";
  double learning_rate = 1e-5;
  int epochs = 1;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool augment = true;
  double lambda_q = -1.0;  // < 0: framework default
  double gamma = 20.0;

  double effective_lambda_q() const { return lambda_q < 0.0 ? default_lambda_q(framework) : lambda_q; }
};

inline void validate(const FinetuneConfig& c) {
  if (c.n_bits < 1) throw ConfigError("finetune: n_bits must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ConfigError("finetune: learning_rate must be > 0");
  if (c.epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  if (c.batch_size < (c.framework == Framework::dch ? 2 : 1))
    throw ConfigError("finetune: batch_size too small for " + to_string(c.framework));
  if (!(c.gamma > 0.0)) throw ConfigError("finetune: gamma must be positive");
  make_optimizer(c.optimizer, c.learning_rate);
}

struct FinetuneRun {
  Optimizer* optimizer = nullptr;
  TrainHistory history;
  EpochHook on_epoch;
};

/// Loss and gradient of the configured objective for one batch of outputs.
inline LossValue retrieval_loss(const FinetuneConfig& cfg, const HashOutput& h,
                                const std::vector<std::vector<int>>& labels, const HashCenterSet* centers) {
  if (cfg.framework == Framework::csq) return csq_loss(h, csq_targets(labels, *centers), cfg.effective_lambda_q());
  return dch_loss(h, PairwiseSimilarity::from_labels(labels), {cfg.gamma, cfg.effective_lambda_q()});
}

/// Fine-tunes backbone and head together on `items`. Only the student is
/// involved; no teacher is needed or accepted.
inline TrainHistory finetune_retrieval(Model& model, const Dataset& data, std::span<const std::size_t> items,
                                       const Preprocess& pre, const FinetuneConfig& cfg,
                                       const HashCenterSet* centers, FinetuneRun run = {}) {
  validate(cfg);
  if (items.empty()) throw DataError("fine-tuning set is empty");
  if (model.output_dim() != cfg.n_bits)
    throw ConfigError("model emits " + std::to_string(model.output_dim()) + " values, config asks for " +
                      std::to_string(cfg.n_bits) + " bits");
  if (cfg.framework == Framework::csq) {
    if (centers == nullptr) throw ConfigError("CSQ needs hash centers");
    if (centers->k_bits != cfg.n_bits) throw ConfigError("hash centers have " + std::to_string(centers->k_bits) +
                                                         " bits, config asks for " + std::to_string(cfg.n_bits));
    if (centers->num_classes() < data.num_classes)
      throw ConfigError("hash centers cover " + std::to_string(centers->num_classes()) + " classes, dataset has " +
                        std::to_string(data.num_classes));
  }
  std::unique_ptr<Optimizer> owned;
  Optimizer* opt = run.optimizer;
  if (opt == nullptr) {
    owned = make_optimizer(cfg.optimizer, cfg.learning_rate);
    opt = owned.get();
  }
  TrainHistory history = std::move(run.history);
  const ParamRefs params = model.parameters();
  for (int epoch = history.epochs_done(); epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(epoch_seed(cfg.seed, epoch));
    const auto batches = make_batches(items.size(), cfg.batch_size, rng);
    Stopwatch clock;
    double total = 0.0;
    for (const auto& b : batches) {
      std::vector<std::size_t> idx;
      std::vector<std::vector<int>> labels;
      for (std::size_t p : b) {
        idx.push_back(items[p]);
        labels.push_back(data.labels[items[p]]);
      }
      const auto augs = cfg.augment ? draw_augments(idx.size(), pre, rng) : std::vector<Augment>{};
      const Tensor x = make_batch(data, idx, pre, augs);
      const Tensor y = model.forward(x, Mode::train);
      const LossValue lv = retrieval_loss(cfg, to_matrix(y), labels, centers);
      model.zero_grad();
      model.backward(to_tensor(lv.grad, y.shape()));
      opt->step(params);
      total += lv.total * static_cast<double>(b.size());
    }
    history.loss.push_back(total / static_cast<double>(items.size()));
    history.seconds.push_back(clock.seconds());
    if (!std::isfinite(history.loss.back()))
      throw NumericError("fine-tuning loss diverged at epoch " + std::to_string(epoch + 1));
    if (run.on_epoch) run.on_epoch(epoch + 1, history, *opt);
  }
  return history;
}

}  // namespace hashkd
