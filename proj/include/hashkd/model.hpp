#pragma once

#include <cstdint>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hashkd/binary_io.hpp"
#include "hashkd/layers.hpp"
#include "hashkd/model_spec.hpp"

namespace hashkd {

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

inline Sequential conv_bn(const std::string& name, int in_c, int out_c, int k, int stride, int pad, bool relu,
                          std::mt19937_64& rng) {
  Sequential s;
  s.add(std::make_unique<Conv2d>(name, in_c, out_c, k, stride, pad, false, rng));
  s.add(std::make_unique<BatchNorm2d>(name + ".bn", out_c));
  if (relu) s.add(std::make_unique<ReLU>());
  return s;
}

inline void append(Sequential& dst, Sequential src) {
  dst.add(std::make_unique<Sequential>(std::move(src)));
}

inline std::unique_ptr<Layer> build_block(const BlockSpec& b, const TensorShape& in, const std::string& name,
                                          std::mt19937_64& rng) {
  switch (b.kind) {
    case BlockKind::initial_module:
      return std::make_unique<Sequential>(conv_bn(name + ".conv", in.channels, b.filters, 7, 2, 3, true, rng));
    case BlockKind::plain_conv: {
      auto s = std::make_unique<Sequential>();
      s->add(std::make_unique<Conv2d>(name + ".conv", in.channels, b.filters, b.kernel, b.stride, b.padding,
                                      b.bias, rng));
      if (b.has_norm) s->add(std::make_unique<BatchNorm2d>(name + ".bn", b.filters));
      if (b.has_activation) s->add(std::make_unique<ReLU>());
      return s;
    }
    case BlockKind::maxpool: return std::make_unique<MaxPool2d>(b.kernel, b.stride, b.padding);
    case BlockKind::basic_block: {
      Sequential main;
      append(main, conv_bn(name + ".conv1", in.channels, b.filters, 3, 1, 1, true, rng));
      append(main, conv_bn(name + ".conv2", b.filters, b.filters, 3, 1, 1, false, rng));
      Sequential shortcut;
      if (in.channels != b.filters)
        append(shortcut, conv_bn(name + ".proj", in.channels, b.filters, 1, 1, 0, false, rng));
      return std::make_unique<Residual>(std::move(main), std::move(shortcut));
    }
    case BlockKind::bottleneck: {
      const int w = b.filters;
      Sequential main;
      append(main, conv_bn(name + ".conv1", in.channels, w, 1, 1, 0, true, rng));
      append(main, conv_bn(name + ".conv2", w, w, 3, b.stride, 1, true, rng));
      append(main, conv_bn(name + ".conv3", w, 4 * w, 1, 1, 0, false, rng));
      Sequential shortcut;
      if (b.stride != 1 || in.channels != 4 * w)
        append(shortcut, conv_bn(name + ".proj", in.channels, 4 * w, 1, b.stride, 0, false, rng));
      return std::make_unique<Residual>(std::move(main), std::move(shortcut));
    }
    case BlockKind::adaptive_avgpool: return std::make_unique<AdaptiveAvgPool2d>(b.output_size);
    case BlockKind::flatten: return std::make_unique<Flatten>();
    case BlockKind::linear: {
      auto s = std::make_unique<Sequential>();
      s->add(std::make_unique<Linear>(name + ".fc", static_cast<int>(in.size()), b.filters, rng));
      if (b.has_activation) s->add(std::make_unique<ReLU>());
      return s;
    }
  }
  throw ConfigError("unsupported block kind");
}

}  // namespace detail

/// Trainable network instantiated from a ModelSpec, one Sequential per stage.
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    std::mt19937_64 rng(seed);
    TensorShape s = spec_.input;
    for (const auto& stage : spec_.stages) {
      Sequential seq;
      for (std::size_t i = 0; i < stage.blocks.size(); ++i) {
        const auto& b = stage.blocks[i];
        validate(b, stage.name);
        seq.add(detail::build_block(b, s, stage.name + "." + std::to_string(i), rng));
        s = block_output_shape(b, s, stage.name);
      }
      stages_.emplace_back(stage.name, std::move(seq));
    }
    output_ = s;
  }

  const ModelSpec& spec() const { return spec_; }
  const TensorShape& output_shape() const { return output_; }
  int output_dim() const { return static_cast<int>(output_.size()); }

  Tensor forward(const Tensor& x, Mode mode) {
    if (x.shape() != spec_.input)
      throw ShapeError(spec_.name + ": expected input " + to_string(spec_.input) + ", got " + to_string(x.shape()));
    Tensor h = x;
    for (auto& [name, seq] : stages_) h = seq.forward(h, mode);
    return h;
  }

  Tensor backward(const Tensor& grad) {
    Tensor d = grad;
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) d = it->second.backward(d);
    return d;
  }

  ParamRefs parameters() {
    ParamRefs out;
    for (auto& [name, seq] : stages_) seq.collect_parameters(out);
    return out;
  }

  std::vector<Buffer> buffers() {
    std::vector<Buffer> out;
    for (auto& [name, seq] : stages_) seq.collect_buffers(out);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->grad.fill(0.0f);
  }

  /// Trainable array sizes actually instantiated, per stage.
  std::vector<std::pair<std::string, std::uint64_t>> enumerate_stage_parameters() {
    std::vector<std::pair<std::string, std::uint64_t>> out;
    for (auto& [name, seq] : stages_) {
      ParamRefs refs;
      seq.collect_parameters(refs);
      std::uint64_t n = 0;
      for (const Parameter* p : refs) n += p->value.size();
      out.emplace_back(name, n);
    }
    return out;
  }

  std::uint64_t enumerate_parameters() {
    std::uint64_t n = 0;
    for (const Parameter* p : parameters()) n += p->value.size();
    return n;
  }

  /// FNV-1a over every parameter and buffer (names and raw bits).
  std::uint64_t checksum() {
    io::Fnv1a h;
    for (const Parameter* p : parameters()) {
      h.update(p->name);
      h.update(p->value.data(), p->value.size() * sizeof(float));
    }
    for (const Buffer& b : buffers()) {
      h.update(b.name);
      h.update(b.value->data(), b.value->size() * sizeof(float));
    }
    return h.digest();
  }

  std::vector<NamedTensor> state() {
    std::vector<NamedTensor> out;
    for (const Parameter* p : parameters()) out.push_back({"param:" + p->name, p->value});
    for (const Buffer& b : buffers()) out.push_back({"buffer:" + b.name, *b.value});
    return out;
  }

  /// Restores every parameter and buffer; names and sizes must match exactly.
  void load_state(const std::vector<NamedTensor>& tensors) {
    auto find = [&](const std::string& name) -> const Tensor& {
      for (const auto& t : tensors)
        if (t.name == name) return t.value;
      throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    };
    for (Parameter* p : parameters()) {
      const Tensor& t = find("param:" + p->name);
      if (t.size() != p->value.size()) throw CheckpointError("size mismatch for '" + p->name + "'");
      p->value.values() = t.values();
    }
    for (const Buffer& b : buffers()) {
      const Tensor& t = find("buffer:" + b.name);
      if (t.size() != b.value->size()) throw CheckpointError("size mismatch for '" + b.name + "'");
      b.value->values() = t.values();
    }
  }

  /// Appends a stage; used for hash heads and classifier heads.
  void append_stage(const StageSpec& stage, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Sequential seq;
    TensorShape s = output_;
    for (std::size_t i = 0; i < stage.blocks.size(); ++i) {
      validate(stage.blocks[i], stage.name);
      seq.add(detail::build_block(stage.blocks[i], s, stage.name + "." + std::to_string(i), rng));
      s = block_output_shape(stage.blocks[i], s, stage.name);
    }
    spec_.stages.push_back(stage);
    stages_.emplace_back(stage.name, std::move(seq));
    output_ = s;
  }

 private:
  ModelSpec spec_;
  std::vector<std::pair<std::string, Sequential>> stages_;
  TensorShape output_{};
};

inline constexpr const char* kHashHeadStage = "HashHead";

/// Appends a freshly initialized fully-connected stage with `n_bits` outputs.
inline Model attach_hash_head(Model model, int n_bits, std::uint64_t seed) {
  if (n_bits <= 0) throw ConfigError("hash head needs a positive bit count, got " + std::to_string(n_bits));
  if (model.output_shape().height != 1 || model.output_shape().width != 1)
    throw ShapeError("hash head needs a flattened feature, model outputs " + to_string(model.output_shape()));
  model.append_stage({kHashHeadStage, {BlockSpec::linear(n_bits, false)}}, seed);
  return model;
}

/// Spec-level counterpart of attach_hash_head, for accounting.
inline ModelSpec with_hash_head(ModelSpec spec, int n_bits) {
  spec.stages.push_back({kHashHeadStage, {BlockSpec::linear(n_bits, false)}});
  return spec;
}

inline Model build_student(StudentVariant variant, std::uint64_t seed, StudentOptions opt = {}) {
  return Model(student_spec(variant, opt), seed);
}

// ---------------------------------------------------------------------------
// Checkpoint container

inline constexpr char kCheckpointMagic[4] = {'H', 'K', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage;
  std::string config_hash;
  ModelSpec spec;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  io::Writer w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.str(ck.stage);
  w.str(ck.config_hash);
  w.str(to_json(ck.spec).dump());
  w.str(ck.meta.dump());
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.batch()));
    w.u32(static_cast<std::uint32_t>(t.value.channels()));
    w.u32(static_cast<std::uint32_t>(t.value.height()));
    w.u32(static_cast<std::uint32_t>(t.value.width()));
    w.f32s(t.value.span());
  }
  // Write-then-rename so a crash mid-save never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  w.save(tmp);
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto r = io::Reader::from_file(path);
  try {
    if (r.raw(4) != std::string_view(kCheckpointMagic, 4)) throw CheckpointError("'" + path + "' is not a checkpoint");
    const auto version = r.u16();
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.stage = r.str();
    ck.config_hash = r.str();
    ck.spec = model_spec_from_json(nlohmann::json::parse(r.str()));
    ck.meta = nlohmann::json::parse(r.str());
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      NamedTensor t;
      t.name = r.str();
      const int b = static_cast<int>(r.u32()), c = static_cast<int>(r.u32());
      const int h = static_cast<int>(r.u32()), wd = static_cast<int>(r.u32());
      t.value = Tensor(b, c, h, wd);
      r.f32s(t.value.span());
      ck.tensors.push_back(std::move(t));
    }
    return ck;
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata in '" + path + "': " + e.what());
  }
}

/// Rebuilds a model from a checkpoint's spec and restores its weights.
inline Model model_from_checkpoint(const Checkpoint& ck) {
  Model m(ck.spec, 0);
  m.load_state(ck.tensors);
  return m;
}

}  // namespace hashkd
