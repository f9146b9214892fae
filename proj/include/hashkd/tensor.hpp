#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "hashkd/error.hpp"

namespace hashkd {

/// Fixed 64-byte alignment. Vectorized reductions split their work according
/// to the address they start at, so storage alignment has to be the same on
/// every run for results to be bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Per-sample activation shape (channels x height x width).
struct TensorShape {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  bool valid() const { return channels >= 1 && height >= 1 && width >= 1; }

  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

inline std::string to_string(const TensorShape& s) {
  if (s.height == 1 && s.width == 1) return std::to_string(s.channels);
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// Dense NCHW float tensor. Features and vectors use H = W = 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int batch, TensorShape shape, float fill = 0.0f)
      : batch_(batch), shape_(shape), values_(static_cast<std::size_t>(batch) * shape.size(), fill) {}
  Tensor(int batch, int channels, int height, int width, float fill = 0.0f)
      : Tensor(batch, TensorShape{channels, height, width}, fill) {}

  int batch() const { return batch_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  const TensorShape& shape() const { return shape_; }
  std::size_t sample_size() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  float* data() { return values_.data(); }
  const float* data() const { return values_.data(); }
  std::span<float> span() { return values_; }
  std::span<const float> span() const { return values_; }
  FloatBuffer& values() { return values_; }
  const FloatBuffer& values() const { return values_; }

  float* sample(int n) { return values_.data() + static_cast<std::size_t>(n) * sample_size(); }
  const float* sample(int n) const {
    return values_.data() + static_cast<std::size_t>(n) * sample_size();
  }

  float& at(int n, int c, int h, int w) { return values_[index(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const { return values_[index(n, c, h, w)]; }
  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }

  /// Same storage viewed with a different per-sample shape of equal size.
  Tensor reshaped(TensorShape shape) const {
    if (shape.size() != sample_size())
      throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape) + " changes size");
    Tensor t = *this;
    t.shape_ = shape;
    return t;
  }

  void fill(float v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (o.size() != size()) throw ShapeError("tensor add: size mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }

 private:
  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.channels + c) * shape_.height + h) * shape_.width + w;
  }

  int batch_ = 0;
  TensorShape shape_{};
  FloatBuffer values_;
};

}  // namespace hashkd
