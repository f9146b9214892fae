#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "hashkd/layers.hpp"
#include "hashkd/model.hpp"

namespace hashkd {

/// First-order optimizer over a fixed, ordered parameter list. Per-parameter
/// state is keyed by position, so the list must be collected the same way on
/// every step (Model::parameters() is stable).
class Optimizer {
 public:
  explicit Optimizer(double lr) : lr_(lr) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  }
  virtual ~Optimizer() = default;

  virtual std::string kind() const = 0;
  virtual void step(const ParamRefs& params) = 0;

  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

  /// Named tensors for checkpointing; restored by load_state.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    Tensor t(1, 1, 1, 1, static_cast<float>(t_));
    out.push_back({"opt:" + kind() + ":t", t});
    for (std::size_t s = 0; s < slots_.size(); ++s)
      for (std::size_t i = 0; i < slots_[s].size(); ++i)
        out.push_back({"opt:" + kind() + ":" + std::to_string(s) + ":" + std::to_string(i), slots_[s][i]});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& tensors, const ParamRefs& params) {
    const std::string prefix = "opt:" + kind() + ":";
    bool found = false;
    for (const auto& t : tensors) {
      if (t.name == prefix + "t") {
        t_ = static_cast<long>(t.value[0]);
        found = true;
      }
    }
    if (!found) throw CheckpointError("checkpoint has no " + kind() + " optimizer state");
    ensure_slots(params);
    for (std::size_t s = 0; s < slots_.size(); ++s)
      for (std::size_t i = 0; i < slots_[s].size(); ++i) {
        const std::string name = prefix + std::to_string(s) + ":" + std::to_string(i);
        bool ok = false;
        for (const auto& t : tensors)
          if (t.name == name && t.value.size() == slots_[s][i].size()) {
            slots_[s][i] = t.value;
            ok = true;
          }
        if (!ok) throw CheckpointError("checkpoint optimizer state missing '" + name + "'");
      }
  }

 protected:
  void ensure_slots(const ParamRefs& params) {
    if (!slots_.empty() && slots_[0].size() == params.size()) return;
    slots_.assign(static_cast<std::size_t>(slot_count()), {});
    for (auto& slot : slots_)
      for (const Parameter* p : params) slot.emplace_back(p->value.batch(), p->value.shape());
  }
  virtual int slot_count() const = 0;

  double lr_;
  long t_ = 0;
  std::vector<std::vector<Tensor>> slots_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : Optimizer(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  std::string kind() const override { return "adam"; }

  void step(const ParamRefs& params) override {
    ensure_slots(params);
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      Tensor& m = slots_[0][i];
      Tensor& v = slots_[1][i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        m[j] = static_cast<float>(b1_ * m[j] + (1.0 - b1_) * g);
        v[j] = static_cast<float>(b2_ * v[j] + (1.0 - b2_) * g * g);
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p.value[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  int slot_count() const override { return 2; }
  double b1_, b2_, eps_;
};

/// RMSProp in the PyTorch formulation (smoothing 0.99, eps outside the root).
class RmsProp final : public Optimizer {
 public:
  explicit RmsProp(double lr, double alpha = 0.99, double eps = 1e-8) : Optimizer(lr), alpha_(alpha), eps_(eps) {}

  std::string kind() const override { return "rmsprop"; }

  void step(const ParamRefs& params) override {
    ensure_slots(params);
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      Tensor& v = slots_[0][i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        v[j] = static_cast<float>(alpha_ * v[j] + (1.0 - alpha_) * g * g);
        p.value[j] -= static_cast<float>(lr_ * g / (std::sqrt(static_cast<double>(v[j])) + eps_));
      }
    }
  }

 private:
  int slot_count() const override { return 1; }
  double alpha_, eps_;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : Optimizer(lr) {}
  std::string kind() const override { return "sgd"; }
  void step(const ParamRefs& params) override {
    ++t_;
    for (Parameter* p : params)
      for (std::size_t j = 0; j < p->value.size(); ++j) p->value[j] -= static_cast<float>(lr_ * p->grad[j]);
  }

 private:
  int slot_count() const override { return 0; }
};

inline std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, double lr) {
  if (kind == "adam") return std::make_unique<Adam>(lr);
  if (kind == "rmsprop") return std::make_unique<RmsProp>(lr);
  if (kind == "sgd") return std::make_unique<Sgd>(lr);
  throw ConfigError("unknown optimizer '" + kind + "' (expected adam, rmsprop or sgd)");
}

}  // namespace hashkd
