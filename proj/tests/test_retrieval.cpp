#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <tuple>
#include <vector>

#include "hashkd/retrieval.hpp"
#include "oracles.hpp"

using namespace hashkd;

namespace {

using oracle::random_codes;

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}



double ap_of(std::initializer_list<int> rel) {
  std::vector<std::uint8_t> v(rel.begin(), rel.end());
  return average_precision_at_n(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// binarize

TEST(Binarize, SignWithZeroMappedToOne) {
  FeatureMatrix h(1, 4);
  h << 0.3, -0.1, 0.0, 2.0;
  const CodeMatrix c = binarize(h);
  EXPECT_EQ(c.words[0], 0b1101u);
  h << -1, -1, -1, -1;
  EXPECT_EQ(binarize(h).words[0], 0u);
  h << -0.0, 1e-300, -1e-300, 5;
  EXPECT_EQ(binarize(h).words[0], 0b1011u);
}

TEST(Binarize, SeventyBitsUseTwoWordsWithZeroPadding) {
  FeatureMatrix h = FeatureMatrix::Ones(2, 70);
  h(1, 64) = -1.0;
  const CodeMatrix c = binarize(h);
  EXPECT_EQ(c.words_per_code(), 2);
  EXPECT_EQ(c.words[0], ~std::uint64_t{0});
  EXPECT_EQ(c.words[1], 0x3Fu);
  EXPECT_EQ(c.words[3], 0x3Eu);
  EXPECT_FALSE(c.bit(1, 64));
  EXPECT_TRUE(c.bit(1, 69));
}

TEST(Binarize, RejectsNonFiniteAndMismatchedIds) {
  FeatureMatrix h = FeatureMatrix::Ones(2, 4);
  EXPECT_THROW(binarize(h, {1}), ShapeError);
  h(0, 1) = std::nan("");
  EXPECT_THROW(binarize(h), NumericError);
}

// ---------------------------------------------------------------------------
// ranking

TEST(HammingRank, DistancesAndIdTieBreak) {
  CodeMatrix db;
  db.k_bits = 4;
  db.words = {0b0000, 0b0001, 0b1111, 0b0011, 0b1000};
  db.ids = {40, 10, 20, 30, 5};
  const std::uint64_t q = 0b0000;
  const RankedList r = hamming_rank(&q, 4, db, 5);
  EXPECT_EQ(r.ids, (std::vector<std::uint64_t>{40, 5, 10, 30, 20}));
  EXPECT_EQ(r.distances, (std::vector<int>{0, 1, 1, 2, 4}));
}

TEST(HammingRank, ErrorsOnOversizedNAndBitMismatch) {
  std::mt19937_64 rng(1);
  const CodeMatrix db = random_codes(10, 16, 3, rng);
  const CodeMatrix q32 = random_codes(1, 32, 3, rng);
  EXPECT_THROW(hamming_rank(db, 0, db, 11), ConfigError);
  EXPECT_THROW(hamming_rank(q32, 0, db, 5), ShapeError);
}

TEST(HammingRank, DistancesArePopcountOfXor) {
  std::mt19937_64 rng(2);
  const CodeMatrix db = random_codes(60, 100, 4, rng);
  const CodeMatrix q = random_codes(5, 100, 4, rng);
  for (std::size_t a = 0; a < q.size(); ++a) {
    const RankedList r = hamming_rank(q, a, db, db.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
      int d = 0;
      for (int j = 0; j < 100; ++j) d += q.bit(a, j) != db.bit(r.index[i], j);
      EXPECT_EQ(r.distances[i], d);
      if (i > 0) {
        EXPECT_TRUE(r.distances[i - 1] < r.distances[i] ||
                    (r.distances[i - 1] == r.distances[i] && r.ids[i - 1] < r.ids[i]));
      }
    }
  }
}

TEST(HammingRank, StorageOrderDoesNotMatter) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const CodeMatrix db = random_codes(200, 8, 5, rng);  // 8 bits: many ties
    const CodeMatrix q = random_codes(3, 8, 5, rng);
    std::vector<std::size_t> perm(db.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    CodeMatrix shuffled;
    shuffled.k_bits = db.k_bits;
    for (std::size_t p : perm) {
      shuffled.ids.push_back(db.ids[p]);
      shuffled.labels.push_back(db.labels[p]);
      shuffled.words.push_back(db.words[p]);
    }
    for (std::size_t a = 0; a < q.size(); ++a) {
      const RankedList x = hamming_rank(q, a, db, 50), y = hamming_rank(q, a, shuffled, 50);
      EXPECT_EQ(x.ids, y.ids);
      EXPECT_EQ(x.distances, y.distances);
    }
    EXPECT_EQ(map_at_n(q, db, 50).ap, map_at_n(q, shuffled, 50).ap);
  }
}

// ---------------------------------------------------------------------------
// AP and mAP

TEST(AveragePrecision, HandCases) {
  EXPECT_EQ(ap_of({1, 1, 1, 1, 1}), 1.0);
  EXPECT_NEAR(ap_of({1, 0, 1}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_NEAR(ap_of({1, 0, 1}), 0.8333, 1e-4);
  EXPECT_EQ(ap_of({0, 0, 0}), 0.0);
  EXPECT_NEAR(ap_of({0, 1}), 0.5, 1e-15);
  EXPECT_THROW(average_precision_at_n({}), ConfigError);
}

TEST(AveragePrecision, BoundedOnRandomLists) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::uint8_t> rel(1 + rng() % 40);
    for (auto& r : rel) r = rng() % 2;
    const double ap = average_precision_at_n(rel);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
  }
}

TEST(MeanAveragePrecision, SingleAndTwoQueries) {
  CodeMatrix db;
  db.k_bits = 2;
  db.words = {0b00, 0b01, 0b11};
  db.ids = {0, 1, 2};
  db.labels = {{0}, {1}, {0}};
  CodeMatrix q;
  q.k_bits = 2;
  q.words = {0b00};
  q.ids = {100};
  q.labels = {{0}};
  // ranking 0, 1, 2 -> relevance 1, 0, 1
  const MapResult one = map_at_n(q, db, 3);
  EXPECT_NEAR(one.map, 0.8333333333333333, 1e-15);
  EXPECT_EQ(one.ap.size(), 1u);
  EXPECT_EQ(one.map, one.ap[0]);
  // Query {0,1} is relevant to everything (AP 1); query {1} at code 11 ranks
  // 2, 1, 0 with relevance 0, 1, 0 (AP 0.5).
  q.labels[0] = {0, 1};
  q.words.push_back(0b11);
  q.ids.push_back(101);
  q.labels.push_back({1});
  const MapResult two = map_at_n(q, db, 3);
  EXPECT_EQ(two.ap[0], 1.0);
  EXPECT_EQ(two.ap[1], 0.5);
  EXPECT_EQ(two.map, 0.75);
}

TEST(MeanAveragePrecision, MatchesOracleOnRandomInstances) {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const int k = std::array{8, 16, 32, 64, 100}[t % 5];
    const int classes = 2 + static_cast<int>(rng() % 8);
    const bool multi = t % 2 == 1;
    const CodeMatrix db = random_codes(300, k, classes, rng, multi);
    const CodeMatrix q = random_codes(20, k, classes, rng, multi, 10000);
    const std::size_t n = 1 + rng() % 300;
    const MapResult r = map_at_n(q, db, n);
    worst = std::max(worst, std::abs(r.map - oracle::map_at_n(q, db, n)));
    EXPECT_GE(r.map, 0.0);
    EXPECT_LE(r.map, 1.0);
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(MeanAveragePrecision, IdenticalCodesLeaveOnlyIdOrder) {
  // Every database item equals the query's code, so the ranking is ascending
  // id and AP depends only on where the relevant items sit in that order.
  CodeMatrix db;
  db.k_bits = 16;
  db.ids = {7, 3, 9, 1, 5, 2};
  db.labels = {{1}, {0}, {1}, {0}, {1}, {1}};
  db.words.assign(6, 0xBEEF);
  CodeMatrix q;
  q.k_bits = 16;
  q.ids = {50};
  q.labels = {{1}};
  q.words = {0xBEEF};
  // id order 1 2 3 5 7 9 -> relevance 0 1 0 1 1 1
  const double expected = (1.0 / 2 + 2.0 / 4 + 3.0 / 5 + 4.0 / 6) / 4.0;
  EXPECT_NEAR(map_at_n(q, db, 6).map, expected, 1e-15);
}

TEST(MeanAveragePrecision, Errors) {
  std::mt19937_64 rng(6);
  const CodeMatrix db = random_codes(10, 16, 3, rng);
  CodeMatrix none;
  none.k_bits = 16;
  EXPECT_THROW(map_at_n(none, db, 5), ConfigError);
  CodeMatrix unlabeled = db;
  unlabeled.labels.clear();
  EXPECT_THROW(map_at_n(unlabeled, db, 5), DataError);
}

// ---------------------------------------------------------------------------
// random-ranking baseline

namespace {

// Exact expectation by enumerating every placement of the relevant items.
double enumerate_random_ap(int m, int r, int n) {
  std::vector<std::uint8_t> order(static_cast<std::size_t>(m), 0);
  std::fill(order.end() - r, order.end(), 1);
  double sum = 0.0;
  long count = 0;
  do {
    sum += average_precision_at_n(std::span<const std::uint8_t>(order.data(), static_cast<std::size_t>(n)));
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  return sum / static_cast<double>(count);
}

}  // namespace

TEST(RandomBaseline, MatchesExhaustiveEnumeration) {
  for (int m = 1; m <= 9; ++m)
    for (int r = 0; r <= m; ++r)
      for (int n = 1; n <= m; ++n)
        EXPECT_NEAR(random_ranking_ap(m, r, n), enumerate_random_ap(m, r, n), 1e-12)
            << "M=" << m << " R=" << r << " N=" << n;
}

TEST(RandomBaseline, AgreesWithMonteCarlo) {
  std::mt19937_64 rng(7);
  const int m = 500, r = 50, n = 100;
  std::vector<std::uint8_t> order(m, 0);
  std::fill(order.begin(), order.begin() + r, 1);
  double sum = 0.0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    std::shuffle(order.begin(), order.end(), rng);
    sum += average_precision_at_n(std::span<const std::uint8_t>(order.data(), n));
  }
  EXPECT_NEAR(random_ranking_ap(m, r, n), sum / trials, 3e-3);
}

TEST(RandomBaseline, MapAveragesPerQueryRelevance) {
  const std::vector<std::vector<int>> db{{0}, {1}, {0}, {2}, {0, 2}};
  const std::vector<std::vector<int>> q{{0}, {2}};
  const double expect = (random_ranking_ap(5, 3, 3) + random_ranking_ap(5, 2, 3)) / 2.0;
  EXPECT_DOUBLE_EQ(random_ranking_map(q, db, 3), expect);
  EXPECT_THROW(random_ranking_ap(3, 1, 4), ConfigError);
}

// ---------------------------------------------------------------------------
// code file

TEST(CodeFile, ByteLayoutIsLittleEndian) {
  CodeMatrix c;
  c.k_bits = 3;
  c.ids = {0x0102030405060708ULL};
  c.words = {0b101};
  c.labels = {{4, 9}};
  const auto path = tmp("hashkd_layout.cukd");
  write_codes(path.string(), c);
  const std::vector<unsigned char> expect{
      'C', 'U', 'K', 'D', 1, 0, 3, 0,                // magic, version, K
      1, 0, 0, 0, 0, 0, 0, 0,                        // count
      8, 7, 6, 5, 4, 3, 2, 1,                        // id
      5, 0, 0, 0, 0, 0, 0, 0,                        // word
      2, 0, 0, 0, 4, 0, 0, 0, 9, 0, 0, 0};           // labels
  EXPECT_EQ(slurp(path), expect);
  std::filesystem::remove(path);
}

TEST(CodeFile, RoundTripIsBitExact) {
  std::mt19937_64 rng(8);
  for (int k : {1, 16, 48, 64, 65, 128, 200}) {
    const CodeMatrix c = random_codes(37, k, 5, rng, true, 1000);
    const auto path = tmp("hashkd_rt.cukd");
    write_codes(path.string(), c);
    EXPECT_EQ(read_codes(path.string()), c) << k << " bits";
    CodeMatrix bare = c;
    bare.labels.clear();
    write_codes(path.string(), bare);
    EXPECT_EQ(read_codes(path.string()), bare);
    std::filesystem::remove(path);
  }
}

TEST(CodeFile, HundredThousandCodes) {
  std::mt19937_64 rng(9);
  CodeMatrix c;
  c.k_bits = 64;
  for (std::uint64_t i = 0; i < 100000; ++i) {
    c.ids.push_back(i * 3);
    c.words.push_back(rng());
    c.labels.push_back({static_cast<int>(i % 21)});
  }
  const auto path = tmp("hashkd_big.cukd");
  write_codes(path.string(), c);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 100000u * 16u + 100000u * 8u);
  EXPECT_EQ(read_codes(path.string()), c);
  std::filesystem::remove(path);
}

TEST(CodeFile, RejectsDamagedFiles) {
  std::mt19937_64 rng(10);
  const CodeMatrix c = random_codes(4, 48, 3, rng);
  const auto path = tmp("hashkd_bad.cukd");
  write_codes(path.string(), c);
  const auto good = slurp(path);

  auto bad = good;
  bad[0] = 'X';
  spit(path, bad);
  EXPECT_THROW(read_codes(path.string()), DataError);

  bad = good;
  bad[4] = 2;
  spit(path, bad);
  EXPECT_THROW(read_codes(path.string()), DataError);

  bad.assign(good.begin(), good.begin() + 40);
  spit(path, bad);
  EXPECT_THROW(read_codes(path.string()), Error);

  bad = good;
  bad[16 + 8 + 7] |= 0x80;  // bit 63 of the first item, beyond K = 48
  spit(path, bad);
  EXPECT_THROW(read_codes(path.string()), DataError);

  bad = good;
  bad.push_back(0);
  spit(path, bad);
  EXPECT_THROW(read_codes(path.string()), Error);

  std::filesystem::remove(path);
  EXPECT_THROW(read_codes(path.string()), Error);
}

TEST(TopK, FiveIdsPerQueryWithNonDecreasingDistance) {
  std::mt19937_64 rng(11);
  const CodeMatrix db = random_codes(50, 16, 3, rng);
  const CodeMatrix q = random_codes(4, 16, 3, rng, false, 900);
  std::istringstream in(topk_listing(q, db, 5));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    EXPECT_EQ(head, std::to_string(900 + lines) + ":");
    std::string item;
    int prev = -1, count = 0;
    while (ls >> item) {
      const auto open = item.find('(');
      const int d = std::stoi(item.substr(open + 1));
      EXPECT_GE(d, prev);
      prev = d;
      ++count;
    }
    EXPECT_EQ(count, 5);
    ++lines;
  }
  EXPECT_EQ(lines, 4);
}
