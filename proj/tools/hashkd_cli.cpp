// hashkd: command-line driver for the distill -> finetune -> encode -> evaluate
// pipeline, plus result and parameter-count tables.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "hashkd/experiment.hpp"

namespace {

int exit_code(hashkd::ErrorCategory c) {
  switch (c) {
    case hashkd::ErrorCategory::config: return 2;
    case hashkd::ErrorCategory::data: return 3;
    case hashkd::ErrorCategory::shape: return 4;
    case hashkd::ErrorCategory::checkpoint: return 5;
    case hashkd::ErrorCategory::io: return 6;
    case hashkd::ErrorCategory::numeric: return 7;
  }
  return 1;
}

struct StageArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  bool resume = false;
  bool quiet = false;
};

void add_stage_options(CLI::App* sub, StageArgs& a) {
  sub->add_option("-c,--config", a.config, "experiment config (JSON)");
  sub->add_option("-s,--set", a.overrides, "override a config value, e.g. finetune.n_bits=32")->take_all();
  sub->add_option("-o,--out", a.out, "run directory")->required();
  sub->add_flag("--resume", a.resume, "continue from the stage checkpoint in the run directory");
  sub->add_flag("-q,--quiet", a.quiet, "no per-epoch progress");
}

void print_summary(const hashkd::MetricsReport& r) {
  std::cout << r.stage << ": " << hashkd::to_json(r).value("loss_summary", nlohmann::json::object()).dump();
  if (r.map) std::cout << " mAP@" << r.map->n << "=" << r.map->value << " baseline=" << r.map->baseline;
  if (!r.teacher_checksum_before.empty())
    std::cout << " teacher " << r.teacher_checksum_before << (r.teacher_checksum_before == r.teacher_checksum_after ? " unchanged" : " CHANGED");
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hashkd: distill a compact hashing student from a frozen teacher and evaluate retrieval"};
  app.require_subcommand(1);

  StageArgs args;
  const std::vector<std::pair<const char*, const char*>> stages = {
      {"teacher", "pretrain the tiny desk-scale teacher"},
      {"distill", "train the student on the frozen teacher's features"},
      {"finetune", "add a hash head and fine-tune under CSQ or DCH"},
      {"encode", "write binary codes for the query and database sets"},
      {"evaluate", "mAP@N, random baseline and top-k listing from the codes"},
      {"all", "run every stage in order"}};
  std::vector<CLI::App*> stage_cmds;
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_stage_options(sub, args);
    stage_cmds.push_back(sub);
  }

  std::vector<std::string> runs;
  std::string format = "text", output;
  CLI::App* report = app.add_subcommand("report", "mAP tables from evaluated run directories");
  report->add_option("runs", runs, "run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("-f,--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  report->add_option("-o,--output", output, "write to a file instead of stdout");

  int bits = 64;
  CLI::App* counts = app.add_subcommand("counts", "parameter and FLOP table of the published pairs");
  counts->add_option("-f,--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  counts->add_option("--bits", bits, "hash head width included in every row")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (CLI::App* sub : stage_cmds) {
      if (!sub->parsed()) continue;
      const hashkd::ExperimentConfig cfg = hashkd::load_config(args.config, args.overrides);
      hashkd::RunOptions opt;
      opt.resume = args.resume;
      if (!args.quiet) opt.log = [](const std::string& line) { std::cerr << line << '\n'; };
      const std::string name = sub->get_name();
      std::vector<hashkd::MetricsReport> reports;
      if (name == "teacher") reports.push_back(hashkd::run_teacher(cfg, args.out, opt));
      else if (name == "distill") reports.push_back(hashkd::run_distill(cfg, args.out, opt));
      else if (name == "finetune") reports.push_back(hashkd::run_finetune(cfg, args.out, opt));
      else if (name == "encode") reports.push_back(hashkd::run_encode(cfg, args.out, opt));
      else if (name == "evaluate") reports.push_back(hashkd::run_evaluate(cfg, args.out, opt));
      else reports = hashkd::run_all(cfg, args.out, opt);
      for (const auto& r : reports) print_summary(r);
      return 0;
    }

    std::ostringstream doc;
    if (report->parsed()) {
      std::vector<hashkd::MetricsReport> evaluated;
      for (const auto& dir : runs) {
        const std::string path = hashkd::RunPaths(dir).metrics("evaluate");
        if (!std::filesystem::exists(path)) throw hashkd::DataError("'" + dir + "' has no evaluation metrics");
        evaluated.push_back(hashkd::read_metrics(path));
      }
      for (const auto& t : hashkd::report_tables(evaluated)) {
        if (format == "csv") doc << "# " << t.framework << '\n' << hashkd::table_csv(t);
        else doc << hashkd::table_text(t) << '\n';
      }
    } else if (counts->parsed()) {
      const auto rows = hashkd::published_pair_counts(bits);
      doc << (format == "csv" ? hashkd::count_table_csv(rows) : hashkd::count_table_text(rows));
      if (format == "text") {
        doc << "\nparameter reduction, ResNet50 -> StudentV1: "
            << 100.0 * hashkd::parameter_reduction(rows[1].trainable_parameters, rows[0].trainable_parameters)
            << "%\nparameter reduction, AlexNet -> StudentV2: "
            << 100.0 * hashkd::parameter_reduction(rows[3].trainable_parameters, rows[2].trainable_parameters) << "%\n";
      }
    }
    if (output.empty()) {
      std::cout << doc.str();
    } else {
      std::ofstream out(output, std::ios::trunc);
      out << doc.str();
      if (!out) throw hashkd::IoError("cannot write '" + output + "'");
    }
    return 0;
  } catch (const hashkd::Error& e) {
    std::cerr << "error[" << hashkd::to_string(e.category()) << "]: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 1;
  }
}
