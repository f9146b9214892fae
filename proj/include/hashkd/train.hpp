#pragma once

// Pieces shared by the distillation and fine-tuning loops.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "hashkd/optim.hpp"

namespace hashkd {

struct TrainHistory {
  std::vector<double> loss;     // mean loss per epoch
  std::vector<double> seconds;  // wall clock per epoch

  int epochs_done() const { return static_cast<int>(loss.size()); }
};

/// Called after each completed epoch (1-based), e.g. to checkpoint.
using EpochHook = std::function<void(int epoch, const TrainHistory&, const Optimizer&)>;

/// Seed for everything random inside one epoch. Derived from the run seed and
/// the epoch alone, so a resumed run replays the same batches.
inline std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Shuffled positions 0..n-1 cut into batches. A trailing batch of one is
/// folded into its predecessor: train-mode normalization over a single
/// 1x1 sample has zero variance.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < n; i += bs) out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + bs));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace hashkd
