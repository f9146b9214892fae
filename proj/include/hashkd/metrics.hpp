#pragma once

// Per-stage metrics documents and the mAP comparison tables built from them.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hashkd/counting.hpp"
#include "hashkd/error.hpp"
#include "hashkd/train.hpp"

namespace hashkd {

inline constexpr const char* kMetricsSchema = "hashkd.metrics";
inline constexpr int kMetricsVersion = 1;

struct MapRecord {
  int n = 0;
  double value = 0.0;
  double baseline = 0.0;  // expected mAP@n under random ranking
};

struct MetricsReport {
  std::string stage;
  std::string config_hash;
  std::string experiment;
  std::string model;
  std::string dataset;
  TrainHistory history;
  std::string teacher_checksum_before;
  std::string teacher_checksum_after;
  std::optional<MapRecord> map;
  std::string framework;
  int n_bits = 0;
  std::vector<CountReport> counts;
  nlohmann::json environment = nlohmann::json::object();
  nlohmann::json model_loads = nlohmann::json::array();
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const CountReport& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.per_stage) stages.push_back({{"name", s.name}, {"parameters", s.parameters}, {"flops", s.flops}});
  return {{"model", r.model}, {"trainable_parameters", r.trainable_parameters}, {"flops", r.flops},
          {"per_stage", stages}};
}

inline CountReport count_report_from_json(const nlohmann::json& j) {
  CountReport r;
  r.model = j.at("model").get<std::string>();
  r.trainable_parameters = j.at("trainable_parameters").get<std::uint64_t>();
  r.flops = j.at("flops").get<std::uint64_t>();
  for (const auto& s : j.at("per_stage"))
    r.per_stage.push_back({s.at("name").get<std::string>(), s.at("parameters").get<std::uint64_t>(),
                           s.at("flops").get<std::uint64_t>()});
  return r;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j;
  j["schema"] = kMetricsSchema;
  j["version"] = kMetricsVersion;
  j["stage"] = m.stage;
  j["config_hash"] = m.config_hash;
  j["experiment"] = m.experiment;
  j["model"] = m.model;
  j["dataset"] = m.dataset;
  nlohmann::json epochs = nlohmann::json::array();
  for (int e = 0; e < m.history.epochs_done(); ++e)
    epochs.push_back({{"epoch", e + 1}, {"loss", m.history.loss[e]}, {"seconds", m.history.seconds[e]}});
  j["epochs"] = epochs;
  if (!m.history.loss.empty()) {
    const auto& l = m.history.loss;
    double secs = 0.0;
    for (double s : m.history.seconds) secs += s;
    j["loss_summary"] = {{"first", l.front()},
                         {"last", l.back()},
                         {"min", *std::min_element(l.begin(), l.end())},
                         {"last_over_first", l.back() / l.front()},
                         {"mean_epoch_seconds", secs / static_cast<double>(l.size())}};
  }
  if (!m.teacher_checksum_before.empty())
    j["teacher_checksum"] = {{"before", m.teacher_checksum_before}, {"after", m.teacher_checksum_after}};
  if (m.map) j["map"] = {{"n", m.map->n}, {"value", m.map->value}, {"baseline", m.map->baseline}};
  if (!m.framework.empty()) j["framework"] = m.framework;
  if (m.n_bits > 0) j["n_bits"] = m.n_bits;
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& c : m.counts) counts.push_back(to_json(c));
  j["counts"] = counts;
  j["environment"] = m.environment;
  j["model_loads"] = m.model_loads;
  if (!m.extra.empty()) j["extra"] = m.extra;
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != kMetricsSchema) throw DataError("not a metrics document");
    if (j.at("version").get<int>() != kMetricsVersion)
      throw DataError("metrics version " + j.at("version").dump() + " unsupported");
    MetricsReport m;
    m.stage = j.at("stage").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.experiment = j.at("experiment").get<std::string>();
    m.model = j.at("model").get<std::string>();
    m.dataset = j.at("dataset").get<std::string>();
    for (const auto& e : j.at("epochs")) {
      m.history.loss.push_back(e.at("loss").get<double>());
      m.history.seconds.push_back(e.at("seconds").get<double>());
    }
    if (j.contains("teacher_checksum")) {
      m.teacher_checksum_before = j["teacher_checksum"].at("before").get<std::string>();
      m.teacher_checksum_after = j["teacher_checksum"].at("after").get<std::string>();
    }
    if (j.contains("map"))
      m.map = MapRecord{j["map"].at("n").get<int>(), j["map"].at("value").get<double>(),
                        j["map"].at("baseline").get<double>()};
    m.framework = j.value("framework", "");
    m.n_bits = j.value("n_bits", 0);
    for (const auto& c : j.at("counts")) m.counts.push_back(count_report_from_json(c));
    m.environment = j.at("environment");
    m.model_loads = j.at("model_loads");
    m.extra = j.value("extra", nlohmann::json::object());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metrics document: ") + e.what());
  }
}

inline void write_metrics(const std::string& path, const MetricsReport& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("short write to '" + path + "'");
}

inline MetricsReport read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("metrics '" + path + "' is not valid JSON: " + e.what());
  }
  return metrics_from_json(j);
}

// ---------------------------------------------------------------------------
// Result tables: one per framework, rows = models, columns = "<dataset> <bits> bit".

struct ResultTable {
  std::string framework;
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::map<std::pair<std::string, std::string>, double> cells;  // (row, column)
};

inline std::vector<ResultTable> report_tables(const std::vector<MetricsReport>& runs) {
  std::map<std::string, ResultTable> by_framework;
  std::map<std::string, std::set<std::pair<std::string, int>>> columns;
  for (const auto& r : runs) {
    if (!r.map) continue;
    ResultTable& t = by_framework[r.framework];
    t.framework = r.framework;
    if (std::find(t.rows.begin(), t.rows.end(), r.model) == t.rows.end()) t.rows.push_back(r.model);
    columns[r.framework].insert({r.dataset, r.n_bits});
    t.cells[{r.model, r.dataset + " " + std::to_string(r.n_bits) + " bit"}] = r.map->value;
  }
  std::vector<ResultTable> out;
  for (auto& [fw, t] : by_framework) {
    for (const auto& [ds, bits] : columns[fw]) t.columns.push_back(ds + " " + std::to_string(bits) + " bit");
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline std::string table_csv(const ResultTable& t) {
  std::ostringstream os;
  os << "Model";
  for (const auto& c : t.columns) os << ',' << c;
  os << '\n';
  for (const auto& r : t.rows) {
    os << r;
    for (const auto& c : t.columns) {
      os << ',';
      const auto it = t.cells.find({r, c});
      if (it != t.cells.end()) os << detail::exact(it->second);
    }
    os << '\n';
  }
  return os.str();
}

inline std::string table_text(const ResultTable& t) {
  std::size_t w0 = 5;
  for (const auto& r : t.rows) w0 = std::max(w0, r.size());
  std::vector<std::size_t> w;
  for (const auto& c : t.columns) w.push_back(std::max<std::size_t>(c.size(), 6));
  std::ostringstream os;
  os << "Comparison of mAP of different bits under " << t.framework << '\n';
  os << std::left << std::setw(static_cast<int>(w0)) << "Model";
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << "  " << std::right << std::setw(static_cast<int>(w[i])) << t.columns[i];
  os << '\n';
  for (const auto& r : t.rows) {
    os << std::left << std::setw(static_cast<int>(w0)) << r;
    for (std::size_t i = 0; i < t.columns.size(); ++i) {
      const auto it = t.cells.find({r, t.columns[i]});
      std::ostringstream cell;
      if (it != t.cells.end()) cell << std::fixed << std::setprecision(4) << it->second;
      os << "  " << std::right << std::setw(static_cast<int>(w[i])) << cell.str();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace hashkd
