#pragma once

// Analytic parameter and FLOP accounting over a ModelSpec.
//
// FLOPs are multiply-accumulates of convolutions and fully-connected layers;
// normalization, activations, pooling and identity additions count zero.
// Convolutions followed by normalization carry no bias; normalization has
// two trainable parameters per channel.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hashkd/model_spec.hpp"

namespace hashkd {

struct StageCount {
  std::string name;
  std::uint64_t parameters = 0;
  std::uint64_t flops = 0;
};

struct CountReport {
  std::string model;
  std::uint64_t trainable_parameters = 0;
  std::uint64_t flops = 0;
  std::vector<StageCount> per_stage;
};

namespace detail {

struct BlockCost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

inline BlockCost conv_cost(std::uint64_t in_c, std::uint64_t out_c, std::uint64_t k, const TensorShape& out,
                           bool bias, bool norm) {
  BlockCost c;
  c.params = out_c * in_c * k * k + (bias ? out_c : 0) + (norm ? 2 * out_c : 0);
  c.macs = static_cast<std::uint64_t>(out.height) * out.width * out_c * in_c * k * k;
  return c;
}

inline BlockCost block_cost(const BlockSpec& b, const TensorShape& in, const TensorShape& out) {
  const std::uint64_t c = static_cast<std::uint64_t>(in.channels);
  const std::uint64_t f = static_cast<std::uint64_t>(b.filters);
  switch (b.kind) {
    case BlockKind::initial_module:
    case BlockKind::plain_conv:
      return conv_cost(c, f, static_cast<std::uint64_t>(b.kernel), out, b.bias, b.has_norm);
    case BlockKind::basic_block: {
      BlockCost a = conv_cost(c, f, 3, out, false, true);
      const BlockCost second = conv_cost(f, f, 3, out, false, true);
      a.params += second.params;
      a.macs += second.macs;
      if (c != f) {
        const BlockCost proj = conv_cost(c, f, 1, out, false, true);
        a.params += proj.params;
        a.macs += proj.macs;
      }
      return a;
    }
    case BlockKind::bottleneck: {
      const BlockCost reduce = conv_cost(c, f, 1, in, false, true);
      const BlockCost spatial = conv_cost(f, f, 3, out, false, true);
      const BlockCost expand = conv_cost(f, 4 * f, 1, out, false, true);
      BlockCost total{reduce.params + spatial.params + expand.params, reduce.macs + spatial.macs + expand.macs};
      if (b.stride != 1 || c != 4 * f) {
        const BlockCost proj = conv_cost(c, 4 * f, 1, out, false, true);
        total.params += proj.params;
        total.macs += proj.macs;
      }
      return total;
    }
    case BlockKind::linear: {
      const std::uint64_t in_features = in.size();
      return {in_features * f + f, in_features * f};
    }
    case BlockKind::maxpool:
    case BlockKind::adaptive_avgpool:
    case BlockKind::flatten:
      return {};
  }
  return {};
}

inline CountReport account(const ModelSpec& spec, TensorShape input) {
  CountReport report;
  report.model = spec.name;
  if (!input.valid()) throw ShapeError("input shape must be at least 1x1x1");
  TensorShape s = input;
  for (const auto& stage : spec.stages) {
    StageCount sc{stage.name, 0, 0};
    for (const auto& b : stage.blocks) {
      validate(b, stage.name);
      const TensorShape out = block_output_shape(b, s, stage.name);
      const BlockCost cost = block_cost(b, s, out);
      sc.parameters += cost.params;
      sc.flops += cost.macs;
      s = out;
    }
    report.trainable_parameters += sc.parameters;
    report.flops += sc.flops;
    report.per_stage.push_back(std::move(sc));
  }
  return report;
}

}  // namespace detail

/// Trainable parameter count at the spec's nominal input (only linear blocks
/// depend on the input size, through their flattened fan-in).
inline CountReport count_parameters(const ModelSpec& spec) { return detail::account(spec, spec.input); }

inline CountReport count_flops(const ModelSpec& spec, TensorShape input) { return detail::account(spec, input); }

inline CountReport count_flops(const ModelSpec& spec) { return detail::account(spec, spec.input); }

/// Fractional reduction in trainable parameters, 1 - student / teacher.
inline double parameter_reduction(std::uint64_t student, std::uint64_t teacher) {
  return 1.0 - static_cast<double>(student) / static_cast<double>(teacher);
}

/// Comparison table in the layout "Model, Trainable Parameters, FLOPs".
inline std::string count_table_csv(const std::vector<CountReport>& rows) {
  std::ostringstream os;
  os << "Model,Trainable Parameters,FLOPs,FLOPs (Giga)\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.trainable_parameters << ',' << r.flops << ',' << std::fixed << std::setprecision(3)
       << static_cast<double>(r.flops) / 1e9 << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

inline std::string count_table_text(const std::vector<CountReport>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Model" << std::right << std::setw(22) << "Trainable Parameters"
     << std::setw(14) << "FLOPs" << '\n';
  for (const auto& r : rows) {
    std::ostringstream g;
    g << std::fixed << std::setprecision(3) << static_cast<double>(r.flops) / 1e9 << " Giga";
    os << std::left << std::setw(14) << r.model << std::right << std::setw(22) << r.trainable_parameters
       << std::setw(14) << g.str() << '\n';
  }
  return os.str();
}

inline std::string per_stage_csv(const CountReport& r) {
  std::ostringstream os;
  os << "Stage,Parameters,FLOPs\n";
  for (const auto& s : r.per_stage) os << s.name << ',' << s.parameters << ',' << s.flops << '\n';
  os << "Total," << r.trainable_parameters << ',' << r.flops << '\n';
  return os.str();
}

}  // namespace hashkd
