#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "animediff/error.hpp"
#include "animediff/rng.hpp"

namespace animediff {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Single image channel, rows = height, cols = width.
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Batched channels-first image tensor.
///
/// Storage is a `channels x (batch * height * width)` matrix: one column per
/// pixel, pixels ordered by (sample, row, column). A convolution then becomes a
/// single matrix product over all pixels of the batch, and a pixel's channel
/// vector is contiguous.
template <typename Scalar>
struct Tensor {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix<Scalar> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : batch(n), channels(c), height(h), width(w),
        data(Matrix<Scalar>::Zero(c, static_cast<Eigen::Index>(n) * h * w)) {}

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

  static Tensor constant(int n, int c, int h, int w, Scalar value) {
    Tensor t(n, c, h, w);
    t.data.setConstant(value);
    return t;
  }

  static Tensor randn(int n, int c, int h, int w, Rng& rng) {
    Tensor t(n, c, h, w);
    for (Eigen::Index j = 0; j < t.data.cols(); ++j)
      for (Eigen::Index i = 0; i < t.data.rows(); ++i)
        t.data(i, j) = static_cast<Scalar>(rng.normal());
    return t;
  }

  /// Zero tensor with the same shape as `other`.
  template <typename Other>
  static Tensor zeros_like(const Tensor<Other>& other) {
    return Tensor(other.batch, other.channels, other.height, other.width);
  }

  [[nodiscard]] Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
  [[nodiscard]] Eigen::Index size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.size() == 0; }

  [[nodiscard]] Eigen::Index column(int n, int y, int x) const {
    return (static_cast<Eigen::Index>(n) * height + y) * width + x;
  }

  Scalar& operator()(int n, int c, int y, int x) { return data(c, column(n, y, x)); }
  Scalar operator()(int n, int c, int y, int x) const { return data(c, column(n, y, x)); }

  /// Columns belonging to sample `n`.
  auto sample(int n) { return data.middleCols(static_cast<Eigen::Index>(n) * pixels(), pixels()); }
  auto sample(int n) const {
    return data.middleCols(static_cast<Eigen::Index>(n) * pixels(), pixels());
  }

  template <typename Other>
  [[nodiscard]] bool same_shape(const Tensor<Other>& o) const {
    return batch == o.batch && channels == o.channels && height == o.height && width == o.width;
  }

  template <typename Target>
  [[nodiscard]] Tensor<Target> cast() const {
    Tensor<Target> out(batch, channels, height, width);
    out.data = data.template cast<Target>();
    return out;
  }

  /// Copy of one channel of one sample as a plane.
  [[nodiscard]] Plane<Scalar> plane(int n, int c) const {
    Plane<Scalar> p(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) p(y, x) = (*this)(n, c, y, x);
    return p;
  }

  void set_plane(int n, int c, const Plane<Scalar>& p) {
    if (p.rows() != height || p.cols() != width) throw ShapeError("plane size does not match tensor");
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) (*this)(n, c, y, x) = p(y, x);
  }

  /// Samples [first, first + count) as a new tensor.
  [[nodiscard]] Tensor slice(int first, int count) const {
    Tensor out(count, channels, height, width);
    out.data = data.middleCols(static_cast<Eigen::Index>(first) * pixels(), count * pixels());
    return out;
  }

  /// Channels [first, first + count) as a new tensor.
  [[nodiscard]] Tensor channel_slice(int first, int count) const {
    Tensor out(batch, count, height, width);
    out.data = data.middleRows(first, count);
    return out;
  }
};

/// Channel-wise concatenation; all parts must agree in batch and spatial size.
template <typename Scalar>
Tensor<Scalar> concat_channels(std::initializer_list<const Tensor<Scalar>*> parts) {
  const Tensor<Scalar>& first = **parts.begin();
  int channels = 0;
  for (const auto* p : parts) {
    if (p->batch != first.batch || p->height != first.height || p->width != first.width)
      throw ShapeError("concat_channels: spatial or batch size mismatch");
    channels += p->channels;
  }
  Tensor<Scalar> out(first.batch, channels, first.height, first.width);
  int row = 0;
  for (const auto* p : parts) {
    out.data.middleRows(row, p->channels) = p->data;
    row += p->channels;
  }
  return out;
}

/// Stack single-sample tensors along the batch axis.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<Tensor<Scalar>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  const auto& f = items.front();
  int total = 0;
  for (const auto& t : items) {
    if (t.channels != f.channels || t.height != f.height || t.width != f.width)
      throw ShapeError("stack_batch: item shapes differ");
    total += t.batch;
  }
  Tensor<Scalar> out(total, f.channels, f.height, f.width);
  Eigen::Index col = 0;
  for (const auto& t : items) {
    out.data.middleCols(col, t.data.cols()) = t.data;
    col += t.data.cols();
  }
  return out;
}

/// Map [0, 1] pixel values to the model range [-1, 1].
template <typename Scalar>
Tensor<Scalar> to_model_range(const Tensor<Scalar>& unit) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(unit);
  out.data = (unit.data.array() * Scalar(2) - Scalar(1)).matrix();
  return out;
}

/// Map model-range values back to [0, 1], clamping.
template <typename Scalar>
Tensor<Scalar> to_unit_range(const Tensor<Scalar>& model) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(model);
  out.data = ((model.data.array() + Scalar(1)) * Scalar(0.5)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1)).matrix();
  return out;
}

/// Order-dependent FNV-1a over the raw bytes; used for determinism checks.
template <typename Scalar>
std::uint64_t checksum(const Matrix<Scalar>& m, std::uint64_t seed = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(Scalar);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace animediff
