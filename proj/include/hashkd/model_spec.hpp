#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hashkd/error.hpp"
#include "hashkd/tensor.hpp"

namespace hashkd {

enum class BlockKind {
  initial_module,
  maxpool,
  basic_block,
  plain_conv,
  bottleneck,
  adaptive_avgpool,
  flatten,
  linear,
};

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::initial_module: return "initial-module";
    case BlockKind::maxpool: return "maxpool";
    case BlockKind::basic_block: return "basic-block";
    case BlockKind::plain_conv: return "plain-conv";
    case BlockKind::bottleneck: return "bottleneck";
    case BlockKind::adaptive_avgpool: return "adaptive-avgpool";
    case BlockKind::flatten: return "flatten";
    case BlockKind::linear: return "linear";
  }
  return "?";
}

inline BlockKind block_kind_from_string(std::string_view s) {
  for (auto k : {BlockKind::initial_module, BlockKind::maxpool, BlockKind::basic_block,
                 BlockKind::plain_conv, BlockKind::bottleneck, BlockKind::adaptive_avgpool,
                 BlockKind::flatten, BlockKind::linear}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown block kind '" + std::string(s) + "'");
}

/// One unit of a stage. `filters` is the output channel count (for a
/// bottleneck, the inner width; it outputs 4x that), or the output width of
/// a linear block. `output_size` is only used by adaptive pooling.
struct BlockSpec {
  BlockKind kind = BlockKind::plain_conv;
  int filters = 1;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  bool has_norm = false;
  bool has_activation = false;
  bool bias = false;
  int output_size = 1;

  static BlockSpec initial_module(int filters) {
    return {BlockKind::initial_module, filters, 7, 2, 3, true, true, false, 1};
  }
  static BlockSpec max_pool(int kernel, int stride, int padding) {
    return {BlockKind::maxpool, 0, kernel, stride, padding, false, false, false, 1};
  }
  static BlockSpec basic_block(int filters) {
    return {BlockKind::basic_block, filters, 3, 1, 1, true, true, false, 1};
  }
  /// Convolution; carries a bias only when it is not followed by normalization.
  static BlockSpec plain_conv(int filters, int kernel, int stride, int padding, bool norm, bool activation) {
    return {BlockKind::plain_conv, filters, kernel, stride, padding, norm, activation, !norm, 1};
  }
  static BlockSpec bottleneck(int width, int stride) {
    return {BlockKind::bottleneck, width, 3, stride, 1, true, true, false, 1};
  }
  static BlockSpec adaptive_avgpool(int output_size) {
    return {BlockKind::adaptive_avgpool, 0, 1, 1, 0, false, false, false, output_size};
  }
  static BlockSpec flatten() { return {BlockKind::flatten, 0, 1, 1, 0, false, false, false, 1}; }
  static BlockSpec linear(int out_features, bool activation) {
    return {BlockKind::linear, out_features, 1, 1, 0, false, activation, true, 1};
  }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct StageSpec {
  std::string name;
  std::vector<BlockSpec> blocks;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct ModelSpec {
  std::string name;
  TensorShape input{3, 224, 224};
  std::vector<StageSpec> stages;
  std::vector<int> blocks_per_layer;
  std::vector<int> layer_filters;
  int feature_dim = 0;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class StudentVariant { v1, v2 };

inline std::string_view to_string(StudentVariant v) { return v == StudentVariant::v1 ? "V1" : "V2"; }

inline StudentVariant student_variant_from_string(std::string_view s) {
  if (s == "V1" || s == "v1" || s == "StudentV1") return StudentVariant::v1;
  if (s == "V2" || s == "v2" || s == "StudentV2") return StudentVariant::v2;
  throw ConfigError("unknown student variant '" + std::string(s) + "' (expected V1 or V2)");
}

// ---------------------------------------------------------------------------
// Block validation and shape arithmetic

inline void validate(const BlockSpec& b, std::string_view stage) {
  auto fail = [&](const std::string& why) {
    throw ConfigError("stage '" + std::string(stage) + "' " + std::string(to_string(b.kind)) + ": " + why);
  };
  if (b.kernel < 1 || b.stride < 1 || b.padding < 0) fail("kernel/stride must be positive, padding non-negative");
  switch (b.kind) {
    case BlockKind::basic_block:
      if (b.kernel != 3 || b.stride != 1 || b.padding != 1) fail("basic block must be 3x3, stride 1, padding 1");
      [[fallthrough]];
    case BlockKind::plain_conv:
    case BlockKind::bottleneck:
    case BlockKind::linear:
      if (b.filters < 1) fail("filters must be positive");
      break;
    case BlockKind::initial_module:
      if (b.kernel != 7 || b.stride != 2 || b.padding != 3) fail("initial module must be 7x7, stride 2, padding 3");
      if (b.filters < 1) fail("filters must be positive");
      break;
    case BlockKind::adaptive_avgpool:
      if (b.output_size < 1) fail("output size must be positive");
      break;
    case BlockKind::maxpool:
    case BlockKind::flatten:
      break;
  }
}

inline int conv_output_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

/// Output shape of one block. A strided block needs at least `stride`
/// pixels per spatial dimension, otherwise halving would reach zero.
inline TensorShape block_output_shape(const BlockSpec& b, const TensorShape& in, std::string_view stage) {
  auto strided = [&](int out_channels) {
    if (b.stride > 1 && (in.height < b.stride || in.width < b.stride)) {
      throw ShapeError("stage '" + std::string(stage) + "': spatial size would reach 0 (input " +
                       to_string(in) + ", stride " + std::to_string(b.stride) + ")");
    }
    TensorShape out{out_channels, conv_output_size(in.height, b.kernel, b.stride, b.padding),
                    conv_output_size(in.width, b.kernel, b.stride, b.padding)};
    if (out.height < 1 || out.width < 1) {
      throw ShapeError("stage '" + std::string(stage) + "': spatial size would reach 0 (input " +
                       to_string(in) + ", kernel " + std::to_string(b.kernel) + ")");
    }
    return out;
  };
  switch (b.kind) {
    case BlockKind::initial_module:
    case BlockKind::plain_conv: return strided(b.filters);
    case BlockKind::maxpool: return strided(in.channels);
    case BlockKind::basic_block: return {b.filters, in.height, in.width};
    case BlockKind::bottleneck: {
      BlockSpec mid = b;
      mid.kind = BlockKind::plain_conv;
      mid.kernel = 3;
      mid.padding = 1;
      TensorShape s = block_output_shape(mid, in, stage);
      return {4 * b.filters, s.height, s.width};
    }
    case BlockKind::adaptive_avgpool: return {in.channels, b.output_size, b.output_size};
    case BlockKind::flatten: return {static_cast<int>(in.size()), 1, 1};
    case BlockKind::linear: return {b.filters, 1, 1};
  }
  return in;
}

/// Shape after every stage, starting with ("InputLayer", input).
inline std::vector<std::pair<std::string, TensorShape>> shape_trace(const ModelSpec& spec, TensorShape input) {
  if (!input.valid()) throw ShapeError("input shape must be at least 1x1x1");
  std::vector<std::pair<std::string, TensorShape>> trace;
  trace.emplace_back("InputLayer", input);
  TensorShape s = input;
  for (const auto& stage : spec.stages) {
    for (const auto& b : stage.blocks) {
      validate(b, stage.name);
      s = block_output_shape(b, s, stage.name);
    }
    trace.emplace_back(stage.name, s);
  }
  return trace;
}

inline std::vector<std::pair<std::string, TensorShape>> shape_trace(const ModelSpec& spec) {
  return shape_trace(spec, spec.input);
}

// ---------------------------------------------------------------------------
// Builders

struct StudentOptions {
  /// Divides every filter count (desk-scale students); 1 gives the full model.
  int width_divisor = 1;
  int input_size = 224;
};

inline ModelSpec student_spec(StudentVariant variant, StudentOptions opt = {}) {
  if (opt.width_divisor < 1) throw ConfigError("width divisor must be >= 1");
  auto scaled = [&](int f) {
    const int s = f / opt.width_divisor;
    if (s < 1) throw ConfigError("width divisor too large");
    return s;
  };
  ModelSpec spec;
  spec.name = variant == StudentVariant::v1 ? "StudentV1" : "StudentV2";
  spec.input = {3, opt.input_size, opt.input_size};
  spec.blocks_per_layer = {2, 3, 5, 3, 2};
  const int last = variant == StudentVariant::v1 ? 128 : 256;
  for (int f : {64, 64, 128, 128, last}) spec.layer_filters.push_back(scaled(f));
  // Downsampling conv after layer k carries layer k+1's filters, except the
  // last one, which keeps layer 4's width (128 in both variants).
  const std::array<int, 4> down = {spec.layer_filters[1], spec.layer_filters[2], spec.layer_filters[3],
                                   spec.layer_filters[3]};

  spec.stages.push_back({"Initial Module", {BlockSpec::initial_module(scaled(64))}});
  spec.stages.push_back({"Max Pool", {BlockSpec::max_pool(3, 2, 1)}});
  for (std::size_t layer = 0; layer < 5; ++layer) {
    StageSpec st{"Layer_" + std::to_string(layer + 1), {}};
    for (int i = 0; i < spec.blocks_per_layer[layer]; ++i)
      st.blocks.push_back(BlockSpec::basic_block(spec.layer_filters[layer]));
    spec.stages.push_back(std::move(st));
    if (layer < 4) {
      spec.stages.push_back({"Conv_2d_" + std::to_string(layer + 1),
                             {BlockSpec::plain_conv(down[layer], 3, 2, 1, true, false)}});
    }
  }
  spec.stages.push_back({"Flatten", {BlockSpec::flatten()}});
  spec.feature_dim = shape_trace(spec).back().second.channels;
  return spec;
}

/// ResNet-50 backbone up to the pooled, flattened 2048-d feature.
inline ModelSpec resnet50_spec() {
  ModelSpec spec;
  spec.name = "ResNet50";
  spec.blocks_per_layer = {3, 4, 6, 3};
  spec.layer_filters = {64, 128, 256, 512};
  spec.stages.push_back({"conv1", {BlockSpec::initial_module(64)}});
  spec.stages.push_back({"maxpool", {BlockSpec::max_pool(3, 2, 1)}});
  for (std::size_t i = 0; i < 4; ++i) {
    StageSpec st{"layer" + std::to_string(i + 1), {}};
    for (int b = 0; b < spec.blocks_per_layer[i]; ++b)
      st.blocks.push_back(BlockSpec::bottleneck(spec.layer_filters[i], (b == 0 && i > 0) ? 2 : 1));
    spec.stages.push_back(std::move(st));
  }
  spec.stages.push_back({"avgpool", {BlockSpec::adaptive_avgpool(1)}});
  spec.stages.push_back({"flatten", {BlockSpec::flatten()}});
  spec.feature_dim = shape_trace(spec).back().second.channels;
  return spec;
}

/// AlexNet up to the fc7 activations (4096-d); dropout is inference-inert.
inline ModelSpec alexnet_spec() {
  ModelSpec spec;
  spec.name = "AlexNet";
  spec.blocks_per_layer = {1, 1, 1, 1, 1};
  spec.layer_filters = {64, 192, 384, 256, 256};
  spec.stages.push_back({"conv1", {BlockSpec::plain_conv(64, 11, 4, 2, false, true), BlockSpec::max_pool(3, 2, 0)}});
  spec.stages.push_back({"conv2", {BlockSpec::plain_conv(192, 5, 1, 2, false, true), BlockSpec::max_pool(3, 2, 0)}});
  spec.stages.push_back({"conv3", {BlockSpec::plain_conv(384, 3, 1, 1, false, true)}});
  spec.stages.push_back({"conv4", {BlockSpec::plain_conv(256, 3, 1, 1, false, true)}});
  spec.stages.push_back({"conv5", {BlockSpec::plain_conv(256, 3, 1, 1, false, true), BlockSpec::max_pool(3, 2, 0)}});
  spec.stages.push_back({"avgpool", {BlockSpec::adaptive_avgpool(6), BlockSpec::flatten()}});
  spec.stages.push_back({"fc6", {BlockSpec::linear(4096, true)}});
  spec.stages.push_back({"fc7", {BlockSpec::linear(4096, true)}});
  spec.feature_dim = 4096;
  return spec;
}

/// Small plain CNN used as a desk-scale teacher: three conv/BN/ReLU/pool
/// stages, a final conv to `feature_dim` channels and global average pooling.
inline ModelSpec tiny_teacher_spec(int feature_dim, int input_size) {
  ModelSpec spec;
  spec.name = "TinyTeacher";
  spec.input = {3, input_size, input_size};
  spec.blocks_per_layer = {1, 1, 1, 1};
  spec.layer_filters = {32, 64, 64, feature_dim};
  spec.stages.push_back({"block1", {BlockSpec::plain_conv(32, 3, 1, 1, true, true), BlockSpec::max_pool(2, 2, 0)}});
  spec.stages.push_back({"block2", {BlockSpec::plain_conv(64, 3, 1, 1, true, true), BlockSpec::max_pool(2, 2, 0)}});
  spec.stages.push_back({"block3", {BlockSpec::plain_conv(64, 3, 1, 1, true, true), BlockSpec::max_pool(2, 2, 0)}});
  spec.stages.push_back({"block4", {BlockSpec::plain_conv(feature_dim, 3, 1, 1, true, true)}});
  spec.stages.push_back({"pool", {BlockSpec::adaptive_avgpool(1), BlockSpec::flatten()}});
  spec.feature_dim = shape_trace(spec).back().second.channels;
  return spec;
}

// ---------------------------------------------------------------------------
// Canonical JSON document

inline constexpr std::string_view kModelSpecSchema = "hashkd.model_spec";
inline constexpr int kModelSpecVersion = 1;

inline nlohmann::json to_json(const BlockSpec& b) {
  nlohmann::json j{{"kind", to_string(b.kind)},       {"filters", b.filters},
                   {"kernel", b.kernel},              {"stride", b.stride},
                   {"padding", b.padding},            {"has_norm", b.has_norm},
                   {"has_activation", b.has_activation}, {"bias", b.bias}};
  if (b.kind == BlockKind::adaptive_avgpool) j["output_size"] = b.output_size;
  return j;
}

inline nlohmann::json to_json(const ModelSpec& spec) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : spec.stages) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : st.blocks) blocks.push_back(to_json(b));
    stages.push_back({{"name", st.name}, {"blocks", blocks}});
  }
  return {{"schema", kModelSpecSchema},
          {"version", kModelSpecVersion},
          {"name", spec.name},
          {"input", {spec.input.channels, spec.input.height, spec.input.width}},
          {"blocks_per_layer", spec.blocks_per_layer},
          {"layer_filters", spec.layer_filters},
          {"feature_dim", spec.feature_dim},
          {"stages", stages}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != kModelSpecSchema) throw ConfigError("not a model spec document");
    const int version = j.at("version").get<int>();
    if (version != kModelSpecVersion)
      throw ConfigError("unsupported model spec version " + std::to_string(version));
    ModelSpec spec;
    spec.name = j.at("name").get<std::string>();
    const auto in = j.at("input").get<std::vector<int>>();
    if (in.size() != 3) throw ConfigError("model spec input must be [channels, height, width]");
    spec.input = {in[0], in[1], in[2]};
    spec.blocks_per_layer = j.at("blocks_per_layer").get<std::vector<int>>();
    spec.layer_filters = j.at("layer_filters").get<std::vector<int>>();
    spec.feature_dim = j.at("feature_dim").get<int>();
    for (const auto& js : j.at("stages")) {
      StageSpec st{js.at("name").get<std::string>(), {}};
      for (const auto& jb : js.at("blocks")) {
        BlockSpec b;
        b.kind = block_kind_from_string(jb.at("kind").get<std::string>());
        b.filters = jb.at("filters").get<int>();
        b.kernel = jb.at("kernel").get<int>();
        b.stride = jb.at("stride").get<int>();
        b.padding = jb.at("padding").get<int>();
        b.has_norm = jb.at("has_norm").get<bool>();
        b.has_activation = jb.at("has_activation").get<bool>();
        b.bias = jb.at("bias").get<bool>();
        b.output_size = jb.value("output_size", 1);
        validate(b, st.name);
        st.blocks.push_back(b);
      }
      spec.stages.push_back(std::move(st));
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
}

}  // namespace hashkd
