#pragma once

// Datasets, split protocols and preprocessing.
//
// Images are kept as 8-bit CHW arrays (in memory for CIFAR10 and synthetic
// data, on disk as PPM files for manifest datasets) and only converted to
// normalized float tensors when a batch is assembled.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hashkd/binary_io.hpp"
#include "hashkd/error.hpp"
#include "hashkd/tensor.hpp"

namespace hashkd {

struct RawImage {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // CHW

  std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

// ---------------------------------------------------------------------------
// PPM (binary P6, 8-bit)

namespace detail {

inline void skip_ppm_space(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_ppm_int(std::istream& in, const std::string& path) {
  skip_ppm_space(in);
  int v = -1;
  if (!(in >> v) || v < 0) throw DataError("malformed PPM header in '" + path + "'");
  return v;
}

}  // namespace detail

inline RawImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw DataError("'" + path + "' is not a binary PPM (P6)");
  RawImage img;
  img.width = detail::read_ppm_int(in, path);
  img.height = detail::read_ppm_int(in, path);
  const int maxval = detail::read_ppm_int(in, path);
  if (maxval != 255 || img.width < 1 || img.height < 1)
    throw DataError("unsupported PPM '" + path + "' (need 8-bit, non-empty)");
  in.get();  // single whitespace before the raster
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  std::vector<std::uint8_t> hwc(plane * 3);
  in.read(reinterpret_cast<char*>(hwc.data()), static_cast<std::streamsize>(hwc.size()));
  if (in.gcount() != static_cast<std::streamsize>(hwc.size()))
    throw DataError("truncated PPM raster in '" + path + "': expected " + std::to_string(hwc.size()) +
                    " bytes, got " + std::to_string(in.gcount()));
  img.pixels.resize(hwc.size());
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) img.pixels[c * plane + p] = hwc[p * 3 + static_cast<std::size_t>(c)];
  return img;
}

inline void write_ppm(const std::string& path, const RawImage& img) {
  if (img.channels != 3) throw DataError("PPM output needs 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) out.put(static_cast<char>(img.pixels[c * plane + p]));
}

// ---------------------------------------------------------------------------
// Dataset

/// Labelled image collection. Either `pixels` holds every image at
/// `raw_shape`, or `paths` names one PPM per item relative to `root`.
struct Dataset {
  std::string name;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<int>> labels;

  TensorShape raw_shape{};
  std::vector<std::uint8_t> pixels;

  std::string root;
  std::vector<std::string> paths;

  std::size_t size() const { return ids.size(); }
  bool in_memory() const { return paths.empty(); }

  RawImage image(std::size_t i) const {
    if (i >= size()) throw DataError("image index " + std::to_string(i) + " out of range");
    if (!in_memory()) {
      return read_ppm((std::filesystem::path(root) / paths[i]).string());
    }
    RawImage img{raw_shape.channels, raw_shape.height, raw_shape.width, {}};
    const std::size_t n = raw_shape.size();
    img.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                      pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return img;
  }

  /// Identity of the content, used to key feature caches.
  std::string fingerprint() const {
    io::Fnv1a h;
    h.update(name);
    for (std::size_t i = 0; i < size(); ++i) {
      h.update(&ids[i], sizeof ids[i]);
      for (int l : labels[i]) h.update(&l, sizeof l);
      if (!in_memory()) h.update(paths[i]);
    }
    if (!pixels.empty()) h.update(pixels.data(), pixels.size());
    return io::hex64(h.digest());
  }
};

// ---------------------------------------------------------------------------
// Preprocessing

struct Preprocess {
  int size = 224;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stdev{0.229f, 0.224f, 0.225f};
  /// Zero padding (raw pixels) around the image before a random crop.
  int crop_padding = 4;
};

namespace detail {

// Bilinear resampling with half-pixel centres (align_corners = false).
inline void resize_plane(const float* src, int sh, int sw, float* dst, int dh, int dw) {
  const double sy = static_cast<double>(sh) / dh;
  const double sx = static_cast<double>(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), sh - 1);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), sw - 1);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      dst[y * dw + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
}

}  // namespace detail

/// Random crop offset and flip for one image, drawn once so that teacher and
/// student inputs can share it.
struct Augment {
  int dy = 0;
  int dx = 0;
  bool flip = false;
};

inline Augment draw_augment(const Preprocess& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> off(-cfg.crop_padding, cfg.crop_padding);
  Augment a;
  a.dy = off(rng);
  a.dx = off(rng);
  a.flip = (rng() & 1u) != 0;
  return a;
}

/// Writes one preprocessed image into `out` (3 x size x size floats). Without
/// an augment the result depends only on the image and the config.
inline void preprocess_into(const RawImage& img, const Preprocess& cfg, const Augment* aug, float* out) {
  if (img.channels != 3) throw DataError("expected 3-channel images, got " + std::to_string(img.channels));
  const int h = img.height, w = img.width;
  const Augment a = aug ? *aug : Augment{};
  std::vector<float> plane(static_cast<std::size_t>(h) * w);
  const std::size_t out_plane = static_cast<std::size_t>(cfg.size) * cfg.size;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int sy = y + a.dy;
        const int sx0 = x + a.dx;
        const int sx = a.flip ? (w - 1 - sx0) : sx0;
        const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
        plane[static_cast<std::size_t>(y) * w + x] = inside ? img.at(c, sy, sx) / 255.0f : 0.0f;
      }
    }
    float* dst = out + c * out_plane;
    if (h == cfg.size && w == cfg.size) {
      std::copy(plane.begin(), plane.end(), dst);
    } else {
      detail::resize_plane(plane.data(), h, w, dst, cfg.size, cfg.size);
    }
    for (std::size_t i = 0; i < out_plane; ++i) dst[i] = (dst[i] - cfg.mean[c]) / cfg.stdev[c];
  }
}

/// Batch tensor for `indices`. `augs`, when given, holds one augment per item.
inline Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, const Preprocess& cfg,
                         std::span<const Augment> augs = {}) {
  if (!augs.empty() && augs.size() != indices.size()) throw ShapeError("one augment per batch item expected");
  Tensor t(static_cast<int>(indices.size()), TensorShape{3, cfg.size, cfg.size});
  for (std::size_t b = 0; b < indices.size(); ++b)
    preprocess_into(data.image(indices[b]), cfg, augs.empty() ? nullptr : &augs[b], t.sample(static_cast<int>(b)));
  return t;
}

inline std::vector<Augment> draw_augments(std::size_t n, const Preprocess& cfg, std::mt19937_64& rng) {
  std::vector<Augment> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw_augment(cfg, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> query;
  std::vector<std::size_t> database;
};

/// Per-class quota split. Items are visited in a seeded random order; each
/// item is charged to one of its labels (drawn uniformly for multi-label
/// items) and goes to the query set while that class's query quota is open,
/// then to the train set, otherwise to the database.
inline DatasetSplit split_by_class_quota(const std::vector<std::vector<int>>& labels, int num_classes,
                                         int query_per_class, int train_per_class, std::uint64_t seed) {
  if (num_classes < 1) throw ConfigError("split needs at least one class");
  if (query_per_class < 0 || train_per_class < 0) throw ConfigError("split quotas must be non-negative");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<int> q(static_cast<std::size_t>(num_classes), 0), t(q), seen(q);
  DatasetSplit s;
  for (std::size_t i : order) {
    const auto& ls = labels[i];
    if (ls.empty()) {
      s.database.push_back(i);
      continue;
    }
    const int c = ls.size() == 1 ? ls[0] : ls[std::uniform_int_distribution<std::size_t>(0, ls.size() - 1)(rng)];
    if (c < 0 || c >= num_classes) throw DataError("item " + std::to_string(i) + " has label " +
                                                   std::to_string(c) + " outside [0, " +
                                                   std::to_string(num_classes) + ")");
    auto cu = static_cast<std::size_t>(c);
    ++seen[cu];
    if (q[cu] < query_per_class) {
      ++q[cu];
      s.query.push_back(i);
    } else if (t[cu] < train_per_class) {
      ++t[cu];
      s.train.push_back(i);
    } else {
      s.database.push_back(i);
    }
  }
  for (int c = 0; c < num_classes; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    if (q[cu] < query_per_class || t[cu] < train_per_class)
      throw DataError("class " + std::to_string(c) + " has only " + std::to_string(seen[cu]) +
                      " charged items, quota needs " + std::to_string(query_per_class + train_per_class));
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.query.begin(), s.query.end());
  std::sort(s.database.begin(), s.database.end());
  return s;
}

// ---------------------------------------------------------------------------
// CIFAR10 (binary version: 1 label byte + 3072 pixel bytes per record)

inline constexpr int kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

inline Dataset load_cifar10(const std::string& root) {
  Dataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  d.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  d.raw_shape = {3, kCifarSide, kCifarSide};
  const std::array<const char*, 6> files = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                            "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"};
  for (const char* f : files) {
    const std::string path = (std::filesystem::path(root) / f).string();
    if (!std::filesystem::exists(path)) throw DataError("CIFAR10 file missing: '" + path + "'");
    auto r = io::Reader::from_file(path);
    if (r.size() == 0 || r.size() % kCifarRecord != 0)
      throw DataError("corrupt CIFAR10 file '" + path + "': " + std::to_string(r.size()) +
                      " bytes is not a multiple of " + std::to_string(kCifarRecord));
    while (!r.at_end()) {
      const int label = r.u8();
      if (label > 9) throw DataError("corrupt CIFAR10 file '" + path + "': label " + std::to_string(label));
      const std::string px = r.raw(kCifarRecord - 1);
      d.ids.push_back(d.ids.size());
      d.labels.push_back({label});
      d.pixels.insert(d.pixels.end(), px.begin(), px.end());
    }
  }
  return d;
}

inline constexpr int kCifarQueryPerClass = 100;
inline constexpr int kCifarTrainPerClass = 500;

inline DatasetSplit make_cifar10_split(const Dataset& cifar, std::uint64_t seed) {
  return split_by_class_quota(cifar.labels, cifar.num_classes, kCifarQueryPerClass, kCifarTrainPerClass, seed);
}

// ---------------------------------------------------------------------------
// NUS-WIDE manifest
//
//   categories: name,name,...
//   relative/path.ppm<TAB>name,name
//
// Blank lines and lines starting with '#' are ignored.

inline constexpr int kNusWideCategories = 21;
inline constexpr int kNusWideQueryPerClass = 100;
inline constexpr int kNusWideTrainPerClass = 500;

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t\r");
    const auto e = item.find_last_not_of(" \t\r");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace detail

inline Dataset load_manifest(const std::string& manifest_path, const std::string& image_root,
                             int expected_categories = kNusWideCategories) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("manifest not found: '" + manifest_path + "'");
  Dataset d;
  d.name = "nuswide";
  d.root = image_root;
  std::unordered_map<std::string, int> index;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line.rfind("categories:", 0) == 0) {
      d.class_names = detail::split_list(line.substr(11), ',');
      for (std::size_t i = 0; i < d.class_names.size(); ++i) index[d.class_names[i]] = static_cast<int>(i);
      continue;
    }
    if (d.class_names.empty())
      throw DataError(manifest_path + ":" + std::to_string(lineno) + ": item before the categories line");
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(manifest_path + ":" + std::to_string(lineno) + ": expected '<path>\\t<labels>'");
    std::vector<int> ls;
    for (const auto& name : detail::split_list(line.substr(tab + 1), ',')) {
      const auto it = index.find(name);
      if (it == index.end())
        throw DataError(manifest_path + ":" + std::to_string(lineno) + ": unknown category '" + name + "'");
      ls.push_back(it->second);
    }
    std::sort(ls.begin(), ls.end());
    ls.erase(std::unique(ls.begin(), ls.end()), ls.end());
    d.ids.push_back(d.ids.size());
    d.paths.push_back(line.substr(0, tab));
    d.labels.push_back(std::move(ls));
  }
  d.num_classes = static_cast<int>(d.class_names.size());
  if (d.num_classes != expected_categories)
    throw DataError("manifest declares " + std::to_string(d.num_classes) + " categories, expected " +
                    std::to_string(expected_categories));
  std::vector<int> count(d.class_names.size(), 0);
  for (const auto& ls : d.labels)
    for (int l : ls) ++count[static_cast<std::size_t>(l)];
  for (std::size_t c = 0; c < count.size(); ++c)
    if (count[c] == 0) throw DataError("manifest missing category '" + d.class_names[c] + "' (no items)");
  return d;
}

inline DatasetSplit make_nuswide_split(const Dataset& nus, std::uint64_t seed) {
  return split_by_class_quota(nus.labels, nus.num_classes, kNusWideQueryPerClass, kNusWideTrainPerClass, seed);
}

// ---------------------------------------------------------------------------
// Synthetic class-pattern images

struct SyntheticSpec {
  int num_classes = 10;
  int images_per_class = 60;
  int image_size = 32;
  std::uint64_t seed = 7;
  /// Fixes the class patterns; datasets that share it share classes.
  std::uint64_t pattern_seed = 1;
  double noise = 28.0;
};

/// Each class is an oriented colour grating with its own frequency; images
/// draw a random phase, a small orientation jitter, amplitude and pixel noise.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.images_per_class < 1 || spec.image_size < 4)
    throw ConfigError("synthetic spec needs >= 1 class, >= 1 image per class and size >= 4");
  struct Pattern {
    double theta, freq;
    std::array<double, 3> color;
  };
  std::mt19937_64 prng(spec.pattern_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Pattern> pats;
  for (int c = 0; c < spec.num_classes; ++c) {
    Pattern p;
    p.theta = std::numbers::pi * (c + 0.3 * u(prng)) / spec.num_classes;
    p.freq = 1.5 + 3.0 * u(prng);
    for (double& v : p.color) v = 2.0 * u(prng) - 1.0;
    pats.push_back(p);
  }

  Dataset d;
  d.name = "synthetic";
  d.num_classes = spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  const int s = spec.image_size;
  d.raw_shape = {3, s, s};
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  d.pixels.resize(static_cast<std::size_t>(spec.num_classes) * spec.images_per_class * 3 * plane);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::size_t item = 0;
  // Items are interleaved by class so any prefix is roughly balanced.
  for (int k = 0; k < spec.images_per_class; ++k) {
    for (int c = 0; c < spec.num_classes; ++c, ++item) {
      const Pattern& p = pats[static_cast<std::size_t>(c)];
      const double phase = 2.0 * std::numbers::pi * u(rng);
      const double theta = p.theta + 0.12 * (u(rng) - 0.5);
      const double amp = 55.0 + 35.0 * u(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      std::uint8_t* px = d.pixels.data() + item * 3 * plane;
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double t = 2.0 * std::numbers::pi * p.freq * (x * ct + y * st) / s + phase;
          const double wave = std::sin(t);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = 128.0 + amp * p.color[static_cast<std::size_t>(ch)] * wave + noise(rng);
            px[ch * plane + static_cast<std::size_t>(y) * s + x] =
                static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
        }
      }
      d.ids.push_back(item);
      d.labels.push_back({c});
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Split manifests
//
//   hashkd-split 1
//   dataset <name> <fingerprint>
//   <train|query|database><TAB><id><TAB><path or -><TAB><label,label>

inline constexpr int kSplitManifestVersion = 1;

inline void write_split_manifest(const std::string& path, const Dataset& d, const DatasetSplit& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "hashkd-split " << kSplitManifestVersion << '\n';
  out << "dataset " << d.name << ' ' << d.fingerprint() << '\n';
  auto emit = [&](const char* set, const std::vector<std::size_t>& idx) {
    for (std::size_t i : idx) {
      out << set << '\t' << d.ids[i] << '\t' << (d.in_memory() ? std::string("-") : d.paths[i]) << '\t';
      for (std::size_t j = 0; j < d.labels[i].size(); ++j) out << (j ? "," : "") << d.labels[i][j];
      out << '\n';
    }
  };
  emit("train", s.train);
  emit("query", s.query);
  emit("database", s.database);
  if (!out) throw IoError("short write to '" + path + "'");
}

/// Replays a split manifest against `d`; refuses manifests written for other
/// content.
inline DatasetSplit read_split_manifest(const std::string& path, const Dataset& d) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split manifest '" + path + "'");
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "hashkd-split") throw DataError("'" + path + "' is not a split manifest");
  if (version != kSplitManifestVersion)
    throw DataError("split manifest version " + std::to_string(version) + " unsupported");
  std::string tag, name, fp;
  in >> tag >> name >> fp;
  if (tag != "dataset" || name != d.name || fp != d.fingerprint())
    throw DataError("split manifest '" + path + "' was written for different data (" + name + " " + fp + ")");
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < d.size(); ++i) by_id[d.ids[i]] = i;
  DatasetSplit s;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = detail::split_list(line, '\t');
    if (cols.size() < 3) throw DataError("malformed split manifest line: '" + line + "'");
    const auto it = by_id.find(std::stoull(cols[1]));
    if (it == by_id.end()) throw DataError("split manifest names unknown id " + cols[1]);
    if (cols[0] == "train") s.train.push_back(it->second);
    else if (cols[0] == "query") s.query.push_back(it->second);
    else if (cols[0] == "database") s.database.push_back(it->second);
    else throw DataError("split manifest has unknown set '" + cols[0] + "'");
  }
  return s;
}

/// Label-set intersection, the relevance and similarity rule for both
/// single- and multi-label data (label lists are kept sorted).
inline bool share_label(const std::vector<int>& a, const std::vector<int>& b) {
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i == *j) return true;
    if (*i < *j) ++i;
    else ++j;
  }
  return false;
}

}  // namespace hashkd
