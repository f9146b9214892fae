#pragma once

// Reference retrieval path: sign binarization, exhaustive Hamming ranking
// with an ascending-id tie-break, and AP@N / mAP@N.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hashkd/binary_io.hpp"
#include "hashkd/data.hpp"
#include "hashkd/distillation.hpp"
#include "hashkd/error.hpp"

namespace hashkd {

/// Bit-packed codes: item i occupies words_per_code() words, bit j of the code
/// is bit (j % 64) of word j / 64. Padding bits are zero.
struct CodeMatrix {
  int k_bits = 0;
  std::vector<std::uint64_t> words;
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<int>> labels;  // empty when the set carries no labels

  int words_per_code() const { return (k_bits + 63) / 64; }
  std::size_t size() const { return ids.size(); }
  bool has_labels() const { return !labels.empty(); }

  const std::uint64_t* code(std::size_t i) const { return words.data() + i * static_cast<std::size_t>(words_per_code()); }
  bool bit(std::size_t i, int j) const { return (code(i)[j / 64] >> (j % 64)) & 1u; }

  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

/// bit = 1 iff the value is not negative (so exactly 0 maps to 1).
inline CodeMatrix binarize(const HashOutput& h, std::vector<std::uint64_t> ids = {},
                           std::vector<std::vector<int>> labels = {}) {
  if (!h.allFinite()) throw NumericError("binarize: non-finite hash output");
  CodeMatrix m;
  m.k_bits = static_cast<int>(h.cols());
  if (ids.empty()) {
    ids.resize(static_cast<std::size_t>(h.rows()));
    std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  }
  if (ids.size() != static_cast<std::size_t>(h.rows())) throw ShapeError("binarize: ids do not match rows");
  if (!labels.empty() && labels.size() != ids.size()) throw ShapeError("binarize: labels do not match rows");
  m.ids = std::move(ids);
  m.labels = std::move(labels);
  const int w = m.words_per_code();
  m.words.assign(static_cast<std::size_t>(h.rows()) * static_cast<std::size_t>(w), 0);
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    for (int j = 0; j < m.k_bits; ++j)
      if (!(h(i, j) < 0.0)) m.words[static_cast<std::size_t>(i) * w + j / 64] |= std::uint64_t{1} << (j % 64);
  return m;
}

inline int hamming_distance(const std::uint64_t* a, const std::uint64_t* b, int words) {
  int d = 0;
  for (int w = 0; w < words; ++w) d += std::popcount(a[w] ^ b[w]);
  return d;
}

struct RankedList {
  std::vector<std::size_t> index;  // positions in the database
  std::vector<std::uint64_t> ids;
  std::vector<int> distances;

  std::size_t size() const { return ids.size(); }
};

/// The n database items nearest to `query`, ordered by (distance, id).
inline RankedList hamming_rank(const std::uint64_t* query, int k_bits, const CodeMatrix& db, std::size_t n) {
  if (k_bits != db.k_bits)
    throw ShapeError("hamming_rank: query has " + std::to_string(k_bits) + " bits, database " +
                     std::to_string(db.k_bits));
  if (n > db.size())
    throw ConfigError("hamming_rank: N = " + std::to_string(n) + " exceeds database size " + std::to_string(db.size()));
  const int w = db.words_per_code();
  std::vector<std::pair<int, std::size_t>> all(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) all[i] = {hamming_distance(query, db.code(i), w), i};
  auto less = [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : db.ids[a.second] < db.ids[b.second];
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), less);
  RankedList r;
  for (std::size_t i = 0; i < n; ++i) {
    r.index.push_back(all[i].second);
    r.ids.push_back(db.ids[all[i].second]);
    r.distances.push_back(all[i].first);
  }
  return r;
}

inline RankedList hamming_rank(const CodeMatrix& queries, std::size_t q, const CodeMatrix& db, std::size_t n) {
  return hamming_rank(queries.code(q), queries.k_bits, db, n);
}

/// sum_i P(i) alpha(i) / sum_i alpha(i) over the ranked list; 0 when nothing
/// retrieved is relevant.
inline double average_precision_at_n(std::span<const std::uint8_t> relevant) {
  if (relevant.empty()) throw ConfigError("average precision of an empty ranked list");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (!relevant[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

struct MapResult {
  double map = 0.0;
  std::vector<double> ap;  // per query, in query order
};

inline MapResult map_at_n(const CodeMatrix& queries, const CodeMatrix& db, std::size_t n) {
  if (queries.size() == 0) throw ConfigError("map_at_n: no queries");
  if (!queries.has_labels() || !db.has_labels()) throw DataError("map_at_n: codes carry no labels");
  MapResult res;
  std::vector<std::uint8_t> rel;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const RankedList r = hamming_rank(queries, q, db, n);
    rel.assign(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) rel[i] = share_label(queries.labels[q], db.labels[r.index[i]]);
    res.ap.push_back(average_precision_at_n(rel));
  }
  res.map = std::accumulate(res.ap.begin(), res.ap.end(), 0.0) / static_cast<double>(res.ap.size());
  return res;
}

// ---------------------------------------------------------------------------
// Random-ranking baseline

/// Expected AP@N when the database (M items, R relevant) is ranked uniformly
/// at random. Given k relevant items in the top N, their positions are a
/// uniform k-subset, so E[AP | k] = (1/N) sum_i (1/i)(1 + (i-1)(k-1)/(N-1));
/// k is hypergeometric.
inline double random_ranking_ap(std::size_t m, std::size_t r, std::size_t n) {
  if (n == 0 || n > m || r > m) throw ConfigError("random_ranking_ap: need 0 < N <= M and R <= M");
  auto log_choose = [](double a, double b) { return std::lgamma(a + 1) - std::lgamma(b + 1) - std::lgamma(a - b + 1); };
  const double md = static_cast<double>(m), rd = static_cast<double>(r), nd = static_cast<double>(n);
  double harmonic = 0.0, tail = 0.0;  // sum 1/i and sum (i-1)/i over i = 1..N
  for (std::size_t i = 1; i <= n; ++i) {
    harmonic += 1.0 / static_cast<double>(i);
    tail += static_cast<double>(i - 1) / static_cast<double>(i);
  }
  double e = 0.0;
  const std::size_t kmin = n + r > m ? n + r - m : 0;
  for (std::size_t k = std::max<std::size_t>(kmin, 1); k <= std::min(n, r); ++k) {
    const double kd = static_cast<double>(k);
    const double pk = std::exp(log_choose(rd, kd) + log_choose(md - rd, nd - kd) - log_choose(md, nd));
    const double ap = n == 1 ? 1.0 : (harmonic + tail * (kd - 1.0) / (nd - 1.0)) / nd;
    e += pk * ap;
  }
  return e;
}

/// Mean of random_ranking_ap over queries, with R counted from label overlap.
inline double random_ranking_map(const std::vector<std::vector<int>>& query_labels,
                                 const std::vector<std::vector<int>>& db_labels, std::size_t n) {
  if (query_labels.empty()) throw ConfigError("random_ranking_map: no queries");
  double sum = 0.0;
  for (const auto& q : query_labels) {
    std::size_t r = 0;
    for (const auto& d : db_labels) r += share_label(q, d);
    sum += random_ranking_ap(db_labels.size(), r, n);
  }
  return sum / static_cast<double>(query_labels.size());
}

// ---------------------------------------------------------------------------
// Code file
//
//   "CUKD", u16 version, u16 K_bits, u64 count,
//   count x (u64 id, ceil(K/64) x u64 words),
//   optional label block: count x (u32 n, n x u32 label)

inline constexpr char kCodeFileMagic[4] = {'C', 'U', 'K', 'D'};
inline constexpr std::uint16_t kCodeFileVersion = 1;

inline void write_codes(const std::string& path, const CodeMatrix& m) {
  if (m.k_bits < 1 || m.k_bits > 0xffff) throw ConfigError("code file: K_bits out of range");
  io::Writer w;
  w.raw(std::string_view(kCodeFileMagic, 4));
  w.u16(kCodeFileVersion);
  w.u16(static_cast<std::uint16_t>(m.k_bits));
  w.u64(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    w.u64(m.ids[i]);
    for (int j = 0; j < m.words_per_code(); ++j) w.u64(m.code(i)[j]);
  }
  if (m.has_labels()) {
    for (const auto& ls : m.labels) {
      w.u32(static_cast<std::uint32_t>(ls.size()));
      for (int l : ls) w.u32(static_cast<std::uint32_t>(l));
    }
  }
  w.save(path);
}

inline CodeMatrix read_codes(const std::string& path) {
  auto r = io::Reader::from_file(path);
  r.require(16);
  if (r.raw(4) != std::string_view(kCodeFileMagic, 4)) throw DataError("'" + path + "' is not a code file (bad magic)");
  const auto version = r.u16();
  if (version != kCodeFileVersion)
    throw DataError("code file '" + path + "' has version " + std::to_string(version) + ", expected " +
                    std::to_string(kCodeFileVersion));
  CodeMatrix m;
  m.k_bits = r.u16();
  if (m.k_bits < 1) throw DataError("code file '" + path + "' declares 0 bits");
  const std::uint64_t count = r.u64();
  const auto w = static_cast<std::size_t>(m.words_per_code());
  r.require(count * (8 + 8 * w));
  m.ids.reserve(count);
  m.words.reserve(count * w);
  const int spare = static_cast<int>(w * 64) - m.k_bits;
  const std::uint64_t pad_mask = spare == 0 ? 0 : ~std::uint64_t{0} << (64 - spare);
  for (std::uint64_t i = 0; i < count; ++i) {
    m.ids.push_back(r.u64());
    for (std::size_t j = 0; j < w; ++j) m.words.push_back(r.u64());
    if (m.words.back() & pad_mask)
      throw DataError("code file '" + path + "': item " + std::to_string(i) + " has bits set beyond K_bits");
  }
  if (r.at_end()) return m;
  m.labels.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto n = r.u32();
    r.require(4 * static_cast<std::size_t>(n));
    for (std::uint32_t j = 0; j < n; ++j) m.labels[i].push_back(static_cast<int>(r.u32()));
  }
  if (!r.at_end())
    throw DataError("code file '" + path + "' has " + std::to_string(r.remaining()) + " trailing bytes");
  return m;
}

/// "<query id>: id(distance) ..." per query, the nearest k items.
inline std::string topk_listing(const CodeMatrix& queries, const CodeMatrix& db, std::size_t k) {
  std::ostringstream os;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const RankedList r = hamming_rank(queries, q, db, std::min(k, db.size()));
    os << queries.ids[q] << ':';
    for (std::size_t i = 0; i < r.size(); ++i) os << ' ' << r.ids[i] << '(' << r.distances[i] << ')';
    os << '\n';
  }
  return os.str();
}

}  // namespace hashkd
