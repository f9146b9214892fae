#pragma once

// Minimal CPU layer stack with explicit backward passes. Layers cache what
// they need from the most recent forward call, so a backward call must follow
// the forward call it differentiates.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hashkd/tensor.hpp"

namespace hashkd {

enum class Mode { train, eval };

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value) {
    grad.fill(0.0f);
  }
};

/// Non-trainable state that still belongs to the model (BN running stats).
struct Buffer {
  std::string name;
  Tensor* value;
};

using ParamRefs = std::vector<Parameter*>;

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void collect_parameters(ParamRefs&) {}
  virtual void collect_buffers(std::vector<Buffer>&) {}
};

namespace detail {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatF>;
using CMapF = Eigen::Map<const RowMatF>;

inline int conv_out(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

inline void im2col(const float* img, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
                   float* cols) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        float* row = cols + (static_cast<std::size_t>(ch) * k * k + ki * k + kj) * plane;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride - pad + ki;
          float* dst = row + static_cast<std::size_t>(y) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = img + (static_cast<std::size_t>(ch) * h + iy) * w;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * stride - pad + kj;
            dst[x] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im(const float* cols, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
                   float* img) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const float* row = cols + (static_cast<std::size_t>(ch) * k * k + ki * k + kj) * plane;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          float* dst = img + (static_cast<std::size_t>(ch) * h + iy) * w;
          const float* src = row + static_cast<std::size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding,
         bool bias, std::mt19937_64& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding) {
    Tensor w(out_channels, in_channels, kernel, kernel);
    // He-normal, fan-in scaled
    const double fan_in = static_cast<double>(in_channels) * kernel * kernel;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (float& v : w.values()) v = static_cast<float>(dist(rng));
    weight_ = Parameter(name + ".weight", std::move(w));
    if (bias) bias_ = std::make_unique<Parameter>(name + ".bias", Tensor(1, out_channels, 1, 1));
  }

  Conv2d(const Conv2d& o)
      : in_(o.in_), out_(o.out_), k_(o.k_), stride_(o.stride_), pad_(o.pad_), weight_(o.weight_),
        bias_(o.bias_ ? std::make_unique<Parameter>(*o.bias_) : nullptr) {}

  Tensor forward(const Tensor& x, Mode) override {
    if (x.channels() != in_) throw ShapeError(weight_.name + ": expected " + std::to_string(in_) +
                                              " input channels, got " + std::to_string(x.channels()));
    input_ = x;
    const int oh = detail::conv_out(x.height(), k_, stride_, pad_);
    const int ow = detail::conv_out(x.width(), k_, stride_, pad_);
    if (oh < 1 || ow < 1) throw ShapeError(weight_.name + ": spatial size collapses");
    Tensor y(x.batch(), out_, oh, ow);
    const int ckk = in_ * k_ * k_;
    const int plane = oh * ow;
    cols_.resize(static_cast<std::size_t>(ckk) * plane);
    detail::CMapF w(weight_.value.data(), out_, ckk);
    for (int n = 0; n < x.batch(); ++n) {
      detail::im2col(x.sample(n), in_, x.height(), x.width(), k_, stride_, pad_, oh, ow, cols_.data());
      detail::MapF out(y.sample(n), out_, plane);
      out.noalias() = w * detail::CMapF(cols_.data(), ckk, plane);
      if (bias_) {
        for (int f = 0; f < out_; ++f) out.row(f).array() += bias_->value[static_cast<std::size_t>(f)];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    const int oh = g.height(), ow = g.width();
    const int ckk = in_ * k_ * k_;
    const int plane = oh * ow;
    Tensor dx(input_.batch(), input_.shape());
    FloatBuffer dcols(static_cast<std::size_t>(ckk) * plane);
    detail::CMapF w(weight_.value.data(), out_, ckk);
    detail::MapF dw(weight_.grad.data(), out_, ckk);
    for (int n = 0; n < g.batch(); ++n) {
      detail::im2col(input_.sample(n), in_, input_.height(), input_.width(), k_, stride_, pad_, oh, ow,
                     cols_.data());
      detail::CMapF gn(g.sample(n), out_, plane);
      dw.noalias() += gn * detail::CMapF(cols_.data(), ckk, plane).transpose();
      detail::MapF dc(dcols.data(), ckk, plane);
      dc.noalias() = w.transpose() * gn;
      detail::col2im(dcols.data(), in_, input_.height(), input_.width(), k_, stride_, pad_, oh, ow,
                     dx.sample(n));
      if (bias_) {
        for (int f = 0; f < out_; ++f) {
          const float* row = g.sample(n) + static_cast<std::size_t>(f) * plane;
          float acc = 0.0f;
          for (int i = 0; i < plane; ++i) acc += row[i];
          bias_->grad[static_cast<std::size_t>(f)] += acc;
        }
      }
    }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  void collect_parameters(ParamRefs& out) override {
    out.push_back(&weight_);
    if (bias_) out.push_back(bias_.get());
  }

 private:
  int in_, out_, k_, stride_, pad_;
  Parameter weight_;
  std::unique_ptr<Parameter> bias_;
  Tensor input_;
  FloatBuffer cols_;
};

class BatchNorm2d final : public Layer {
 public:
  static constexpr float kEps = 1e-5f;
  static constexpr float kMomentum = 0.1f;

  BatchNorm2d(std::string name, int channels)
      : gamma_(name + ".weight", Tensor(1, channels, 1, 1, 1.0f)),
        beta_(name + ".bias", Tensor(1, channels, 1, 1, 0.0f)),
        running_mean_(1, channels, 1, 1, 0.0f),
        running_var_(1, channels, 1, 1, 1.0f),
        name_(std::move(name)) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    const int c = x.channels();
    const std::size_t plane = static_cast<std::size_t>(x.height()) * x.width();
    const double m = static_cast<double>(x.batch()) * static_cast<double>(plane);
    Tensor y(x.batch(), x.shape());
    xhat_ = Tensor(x.batch(), x.shape());
    inv_std_.assign(static_cast<std::size_t>(c), 0.0f);
    train_ = mode == Mode::train;
    for (int ch = 0; ch < c; ++ch) {
      double mean, var;
      if (train_) {
        double s = 0.0, s2 = 0.0;
        for (int n = 0; n < x.batch(); ++n) {
          const float* p = x.sample(n) + ch * plane;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        mean = s / m;
        for (int n = 0; n < x.batch(); ++n) {
          const float* p = x.sample(n) + ch * plane;
          for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - mean) * (p[i] - mean);
        }
        var = s2 / m;
        const double unbiased = m > 1 ? s2 / (m - 1) : var;
        running_mean_[ch] = static_cast<float>((1 - kMomentum) * running_mean_[ch] + kMomentum * mean);
        running_var_[ch] = static_cast<float>((1 - kMomentum) * running_var_[ch] + kMomentum * unbiased);
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const float inv = static_cast<float>(1.0 / std::sqrt(var + kEps));
      inv_std_[ch] = inv;
      const float g = gamma_.value[ch], b = beta_.value[ch];
      const float mu = static_cast<float>(mean);
      for (int n = 0; n < x.batch(); ++n) {
        const float* p = x.sample(n) + ch * plane;
        float* xh = xhat_.sample(n) + ch * plane;
        float* q = y.sample(n) + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = (p[i] - mu) * inv;
          q[i] = g * xh[i] + b;
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gout) override {
    const int c = gout.channels();
    const std::size_t plane = static_cast<std::size_t>(gout.height()) * gout.width();
    const double m = static_cast<double>(gout.batch()) * static_cast<double>(plane);
    Tensor dx(gout.batch(), gout.shape());
    for (int ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int n = 0; n < gout.batch(); ++n) {
        const float* g = gout.sample(n) + ch * plane;
        const float* xh = xhat_.sample(n) + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += g[i];
          sum_gx += static_cast<double>(g[i]) * xh[i];
        }
      }
      gamma_.grad[ch] += static_cast<float>(sum_gx);
      beta_.grad[ch] += static_cast<float>(sum_g);
      const double gam = gamma_.value[ch];
      const double inv = inv_std_[ch];
      for (int n = 0; n < gout.batch(); ++n) {
        const float* g = gout.sample(n) + ch * plane;
        const float* xh = xhat_.sample(n) + ch * plane;
        float* d = dx.sample(n) + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (train_) {
            d[i] = static_cast<float>(gam * inv * (g[i] - sum_g / m - xh[i] * sum_gx / m));
          } else {
            d[i] = static_cast<float>(gam * inv * g[i]);
          }
        }
      }
    }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

  void collect_parameters(ParamRefs& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    out.push_back({name_ + ".running_mean", &running_mean_});
    out.push_back({name_ + ".running_var", &running_var_});
  }

 private:
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  std::string name_;
  Tensor xhat_;
  std::vector<float> inv_std_;
  bool train_ = true;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    Tensor y = x;
    for (float& v : y.values()) v = v > 0.0f ? v : 0.0f;
    output_ = y;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor d = g;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (output_[i] <= 0.0f) d[i] = 0.0f;
    return d;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  Tensor output_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int padding) : k_(kernel), stride_(stride), pad_(padding) {}

  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    const int oh = detail::conv_out(x.height(), k_, stride_, pad_);
    const int ow = detail::conv_out(x.width(), k_, stride_, pad_);
    if (oh < 1 || ow < 1) throw ShapeError("max pool: spatial size collapses");
    Tensor y(x.batch(), x.channels(), oh, ow);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.batch(); ++n) {
      for (int c = 0; c < x.channels(); ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * x.channels() + c) * x.height() * x.width();
        for (int yy = 0; yy < oh; ++yy) {
          for (int xx = 0; xx < ow; ++xx, ++o) {
            float best = -std::numeric_limits<float>::infinity();
            std::size_t best_i = base;
            for (int ki = 0; ki < k_; ++ki) {
              const int iy = yy * stride_ - pad_ + ki;
              if (iy < 0 || iy >= x.height()) continue;
              for (int kj = 0; kj < k_; ++kj) {
                const int ix = xx * stride_ - pad_ + kj;
                if (ix < 0 || ix >= x.width()) continue;
                const std::size_t i = base + static_cast<std::size_t>(iy) * x.width() + ix;
                if (x[i] > best) {
                  best = x[i];
                  best_i = i;
                }
              }
            }
            y[o] = best;
            argmax_[o] = best_i;
          }
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    Tensor dx(g.batch(), in_shape_);
    for (std::size_t o = 0; o < g.size(); ++o) dx[argmax_[o]] += g[o];
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }

 private:
  int k_, stride_, pad_;
  TensorShape in_shape_{};
  std::vector<std::size_t> argmax_;
};

/// Adaptive average pooling with PyTorch bin boundaries.
class AdaptiveAvgPool2d final : public Layer {
 public:
  explicit AdaptiveAvgPool2d(int output_size) : out_(output_size) {}

  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    Tensor y(x.batch(), x.channels(), out_, out_);
    for (int n = 0; n < x.batch(); ++n)
      for (int c = 0; c < x.channels(); ++c)
        for (int i = 0; i < out_; ++i)
          for (int j = 0; j < out_; ++j) {
            const auto [h0, h1] = bin(i, x.height());
            const auto [w0, w1] = bin(j, x.width());
            double s = 0.0;
            for (int a = h0; a < h1; ++a)
              for (int b = w0; b < w1; ++b) s += x.at(n, c, a, b);
            y.at(n, c, i, j) = static_cast<float>(s / ((h1 - h0) * (w1 - w0)));
          }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    Tensor dx(g.batch(), in_shape_);
    for (int n = 0; n < g.batch(); ++n)
      for (int c = 0; c < g.channels(); ++c)
        for (int i = 0; i < out_; ++i)
          for (int j = 0; j < out_; ++j) {
            const auto [h0, h1] = bin(i, in_shape_.height);
            const auto [w0, w1] = bin(j, in_shape_.width);
            const float share = g.at(n, c, i, j) / static_cast<float>((h1 - h0) * (w1 - w0));
            for (int a = h0; a < h1; ++a)
              for (int b = w0; b < w1; ++b) dx.at(n, c, a, b) += share;
          }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<AdaptiveAvgPool2d>(*this); }

 private:
  std::pair<int, int> bin(int i, int in) const {
    return {(i * in) / out_, ((i + 1) * in + out_ - 1) / out_};
  }
  int out_;
  TensorShape in_shape_{};
};

class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    return x.reshaped({static_cast<int>(x.sample_size()), 1, 1});
  }
  Tensor backward(const Tensor& g) override { return g.reshaped(in_shape_); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  TensorShape in_shape_{};
};

/// Fully-connected layer over the flattened per-sample input.
class Linear final : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features, std::mt19937_64& rng)
      : in_(in_features), out_(out_features) {
    Tensor w(out_features, in_features, 1, 1);
    Tensor b(1, out_features, 1, 1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (float& v : w.values()) v = static_cast<float>(dist(rng));
    for (float& v : b.values()) v = static_cast<float>(dist(rng));
    weight_ = Parameter(name + ".weight", std::move(w));
    bias_ = Parameter(name + ".bias", std::move(b));
  }

  Tensor forward(const Tensor& x, Mode) override {
    if (static_cast<int>(x.sample_size()) != in_)
      throw ShapeError(weight_.name + ": expected " + std::to_string(in_) + " input features, got " +
                       std::to_string(x.sample_size()));
    input_ = x;
    Tensor y(x.batch(), out_, 1, 1);
    detail::CMapF xm(x.data(), x.batch(), in_);
    detail::CMapF w(weight_.value.data(), out_, in_);
    detail::MapF ym(y.data(), x.batch(), out_);
    ym.noalias() = xm * w.transpose();
    for (int n = 0; n < x.batch(); ++n)
      for (int o = 0; o < out_; ++o) ym(n, o) += bias_.value[static_cast<std::size_t>(o)];
    return y;
  }

  Tensor backward(const Tensor& g) override {
    detail::CMapF gm(g.data(), g.batch(), out_);
    detail::CMapF xm(input_.data(), input_.batch(), in_);
    detail::CMapF w(weight_.value.data(), out_, in_);
    detail::MapF dw(weight_.grad.data(), out_, in_);
    dw.noalias() += gm.transpose() * xm;
    for (int n = 0; n < g.batch(); ++n)
      for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += gm(n, o);
    Tensor dx(input_.batch(), input_.shape());
    detail::MapF dxm(dx.data(), input_.batch(), in_);
    dxm.noalias() = gm * w;
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  void collect_parameters(ParamRefs& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Parameter weight_, bias_;
  Tensor input_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      layers_.clear();
      for (const auto& l : o.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer& operator[](std::size_t i) { return *layers_[i]; }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }
  Tensor backward(const Tensor& g) override {
    Tensor d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sequential>(*this); }
  void collect_parameters(ParamRefs& out) override {
    for (auto& l : layers_) l->collect_parameters(out);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    for (auto& l : layers_) l->collect_buffers(out);
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// relu(main(x) + shortcut(x)); an empty shortcut is the identity.
class Residual final : public Layer {
 public:
  Residual(Sequential main, Sequential shortcut) : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y = main_.forward(x, mode);
    if (shortcut_.empty()) {
      if (y.size() != x.size()) throw ShapeError("residual: identity shortcut shape mismatch");
      y += x;
    } else {
      y += shortcut_.forward(x, mode);
    }
    return relu_.forward(y, mode);
  }

  Tensor backward(const Tensor& g) override {
    Tensor d = relu_.backward(g);
    Tensor dx = main_.backward(d);
    if (shortcut_.empty()) {
      dx += d;
    } else {
      dx += shortcut_.backward(d);
    }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Residual>(*this); }
  void collect_parameters(ParamRefs& out) override {
    main_.collect_parameters(out);
    shortcut_.collect_parameters(out);
  }
  void collect_buffers(std::vector<Buffer>& out) override {
    main_.collect_buffers(out);
    shortcut_.collect_buffers(out);
  }

 private:
  Sequential main_, shortcut_;
  ReLU relu_;
};

}  // namespace hashkd
