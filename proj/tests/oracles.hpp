#pragma once

// Brute-force references shared by the unit suites and the acceptance binary.
// Each is written from the definition, independently of the library code.

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "hashkd/distillation.hpp"
#include "hashkd/retrieval.hpp"

namespace hashkd::oracle {

inline FeatureMatrix random_features(int n, int k, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  FeatureMatrix m(n, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline std::vector<std::vector<int>> random_labels(int n, int classes, std::mt19937_64& rng, bool multi) {
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int> ls{static_cast<int>(rng() % classes)};
    if (multi && rng() % 2) ls.push_back(static_cast<int>(rng() % classes));
    std::sort(ls.begin(), ls.end());
    ls.erase(std::unique(ls.begin(), ls.end()), ls.end());
    out.push_back(ls);
  }
  return out;
}

inline CodeMatrix random_codes(std::size_t n, int k, int classes, std::mt19937_64& rng, bool multi = false,
                        std::uint64_t id_base = 0) {
  FeatureMatrix h(static_cast<Eigen::Index>(n), k);
  std::normal_distribution<double> d;
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = d(rng);
  std::vector<std::uint64_t> ids(n);
  std::vector<std::vector<int>> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = id_base + i;
    labels[i] = {static_cast<int>(rng() % classes)};
    if (multi && rng() % 3 == 0) labels[i].push_back(static_cast<int>(rng() % classes));
    std::sort(labels[i].begin(), labels[i].end());
    labels[i].erase(std::unique(labels[i].begin(), labels[i].end()), labels[i].end());
  }
  return binarize(h, ids, labels);
}

// Straight double loop over the definition.
inline double kd_loss(const FeatureMatrix& t, const FeatureMatrix& s) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double d = s(i, j) - t(i, j);
      sum += d * d;
    }
  return sum / static_cast<double>(s.rows());
}

// All-pairs DCH written from the probability form: p = gamma / (gamma + d),
// cross-entropy -[s log p + (1 - s) log(1 - p)], with class-balanced weights
// counted separately, plus the mean of -log(gamma / (gamma + d(|h|, 1))).
inline double dch_oracle(const FeatureMatrix& h, const std::vector<std::vector<int>>& labels, double gamma,
                  double lambda_q, double* pairwise_out = nullptr) {
  const int n = static_cast<int>(h.rows()), k = static_cast<int>(h.cols());
  auto cosine = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (int c = 0; c < k; ++c) {
      ab += a[c] * b[c];
      aa += a[c] * a[c];
      bb += b[c] * b[c];
    }
    return ab / std::sqrt(aa * bb);
  };
  auto row = [&](int i) {
    std::vector<double> r(k);
    for (int c = 0; c < k; ++c) r[c] = h(i, c);
    return r;
  };
  auto similar = [&](int i, int j) {
    for (int a : labels[i])
      for (int b : labels[j])
        if (a == b) return true;
    return false;
  };
  int s1 = 0, s0 = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) similar(i, j) ? ++s1 : ++s0;
  double pairwise = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = k / 2.0 * (1.0 - cosine(row(i), row(j)));
      const double p = gamma / (gamma + d);
      const bool s = similar(i, j);
      double w;
      if (s) w = s0 == 0 ? 1.0 / s1 : 0.5 / s1;
      else w = s1 == 0 ? 1.0 / s0 : 0.5 / s0;
      pairwise += -w * (s ? std::log(p) : std::log(1.0 - p));
    }
  double q = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> a = row(i), ones(k, 1.0);
    for (double& v : a) v = std::abs(v);
    const double d = k / 2.0 * (1.0 - cosine(a, ones));
    q += -std::log(gamma / (gamma + d));
  }
  if (pairwise_out) *pairwise_out = pairwise;
  return pairwise + lambda_q * q / n;
}

// Straight-line reference: bits compared one at a time, full stable sort on
// (distance, id), AP from the printed precision formula.
inline double map_at_n(const CodeMatrix& q, const CodeMatrix& db, std::size_t n) {
  double total = 0.0;
  for (std::size_t a = 0; a < q.size(); ++a) {
    std::vector<std::tuple<int, std::uint64_t, std::size_t>> rows;
    for (std::size_t b = 0; b < db.size(); ++b) {
      int d = 0;
      for (int j = 0; j < q.k_bits; ++j) d += q.bit(a, j) != db.bit(b, j);
      rows.emplace_back(d, db.ids[b], b);
    }
    std::sort(rows.begin(), rows.end());
    double num = 0.0, den = 0.0, hits = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      bool rel = false;
      for (int x : q.labels[a])
        for (int y : db.labels[std::get<2>(rows[i])]) rel = rel || x == y;
      if (rel) {
        hits += 1.0;
        num += hits / static_cast<double>(i + 1);
        den += 1.0;
      }
    }
    total += den == 0.0 ? 0.0 : num / den;
  }
  return total / static_cast<double>(q.size());
}

/// Largest elementwise relative error between central differences of `loss`
/// and `grad`. A 1e-4 step keeps truncation at O(1e-8) while cancellation
/// noise stays near 1e-12; at 1e-6 the noise alone exceeds 1e-4 of the
/// smallest gradient entries.
template <class F>
double worst_fd_error(const FeatureMatrix& h, const FeatureMatrix& grad, F loss, double eps = 1e-4,
                      double floor = 1e-7) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    FeatureMatrix up = h, down = h;
    up.data()[i] += eps;
    down.data()[i] -= eps;
    const double fd = (loss(up) - loss(down)) / (2 * eps);
    const double g = grad.data()[i];
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), floor}));
  }
  return worst;
}

}  // namespace hashkd::oracle
