#pragma once

#include <optional>
#include <string>
#include <vector>

#include "animediff/rng.hpp"
#include "animediff/tensor.hpp"

// Building blocks of the denoising U-Net. Every layer is a value type with a
// const forward pass and a backward pass that accumulates parameter gradients.
// Whatever backward needs is written into a caller-owned Cache during forward,
// so concurrent forward calls on one layer are safe when no cache is requested.
namespace animediff::nn {

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
using ConstParameterList = std::vector<const Parameter<Scalar>*>;

/// Sigmoid-weighted linear unit x * sigmoid(x).
template <typename Scalar>
Matrix<Scalar> silu(const Matrix<Scalar>& x);

/// Gradient of silu given the pre-activation input.
template <typename Scalar>
Matrix<Scalar> silu_backward(const Matrix<Scalar>& grad_out, const Matrix<Scalar>& input);

/// Largest divisor of `channels` not exceeding `preferred`.
int group_count(int channels, int preferred);

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features, Rng& rng);

  struct Cache {
    Matrix<Scalar> input;
  };

  /// `input` is in_features x batch.
  Matrix<Scalar> forward(const Matrix<Scalar>& input, Cache* cache) const;
  Matrix<Scalar> backward(const Matrix<Scalar>& grad_out, const Cache& cache);
  void collect(ParameterList<Scalar>& out) { out.insert(out.end(), {&weight, &bias}); }

  Parameter<Scalar> weight;  // out x in
  Parameter<Scalar> bias;    // out x 1
};

/// Square-kernel 2-D convolution with zero padding kernel/2.
template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, Rng& rng);

  struct Cache {
    Tensor<Scalar> input;
  };

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out, const Cache& cache);
  void collect(ParameterList<Scalar>& out) { out.insert(out.end(), {&weight, &bias}); }

  [[nodiscard]] int in_channels() const { return in_channels_; }
  [[nodiscard]] int out_channels() const { return out_channels_; }

  Parameter<Scalar> weight;  // out x (kernel * kernel * in), taps ordered (ky, kx, channel)
  Parameter<Scalar> bias;

 private:
  [[nodiscard]] int output_size(int n) const { return (n + 2 * (kernel_ / 2) - kernel_) / stride_ + 1; }
  Matrix<Scalar> im2col(const Tensor<Scalar>& x) const;
  Tensor<Scalar> col2im(const Matrix<Scalar>& cols, const Tensor<Scalar>& like) const;

  int in_channels_ = 0;
  int out_channels_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
};

template <typename Scalar>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(const std::string& name, int channels, int groups, double eps = 1e-5);

  struct Cache {
    Matrix<Scalar> normalized;
    std::vector<Scalar> inv_std;  // per (sample, group)
    int batch = 0;
    Eigen::Index pixels = 0;
  };

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out, const Cache& cache);
  void collect(ParameterList<Scalar>& out) { out.insert(out.end(), {&gamma, &beta}); }

  [[nodiscard]] int groups() const { return groups_; }

  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;

 private:
  int channels_ = 0;
  int groups_ = 1;
  double eps_ = 1e-5;
};

/// Pre-normalized multi-head self-attention over the spatial positions of a
/// feature map, with a residual connection: x + proj(attend(qkv(norm(x)))).
template <typename Scalar>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const std::string& name, int channels, int heads, int norm_groups, Rng& rng);

  struct Cache {
    typename GroupNorm<Scalar>::Cache norm;
    typename Conv2d<Scalar>::Cache qkv;
    Tensor<Scalar> qkv_out;
    std::vector<Matrix<Scalar>> probs;  // per (sample, head): queries x keys
    typename Conv2d<Scalar>::Cache proj;
  };

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out, const Cache& cache);
  void collect(ParameterList<Scalar>& out);

  [[nodiscard]] int heads() const { return heads_; }

  GroupNorm<Scalar> norm;
  Conv2d<Scalar> qkv;
  Conv2d<Scalar> proj;

 private:
  int channels_ = 0;
  int heads_ = 1;
};

/// norm -> SiLU -> conv -> (+ time projection) -> norm -> SiLU -> conv, plus a
/// skip path (1x1 conv when the channel count changes).
template <typename Scalar>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, int in_channels, int out_channels, int time_dim, int norm_groups, Rng& rng);

  struct Cache {
    typename GroupNorm<Scalar>::Cache norm1;
    Matrix<Scalar> pre_act1;
    typename Conv2d<Scalar>::Cache conv1;
    typename Linear<Scalar>::Cache time;
    typename GroupNorm<Scalar>::Cache norm2;
    Matrix<Scalar> pre_act2;
    typename Conv2d<Scalar>::Cache conv2;
    typename Conv2d<Scalar>::Cache skip;
  };

  /// `time_act` is the activated time embedding, time_dim x batch.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Matrix<Scalar>& time_act, Cache* cache) const;
  /// Adds the gradient w.r.t. `time_act` into `grad_time_act`.
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out, const Cache& cache, Matrix<Scalar>& grad_time_act);
  void collect(ParameterList<Scalar>& out);

  [[nodiscard]] int out_channels() const { return conv2.out_channels(); }

  GroupNorm<Scalar> norm1;
  Conv2d<Scalar> conv1;
  Linear<Scalar> time_proj;
  GroupNorm<Scalar> norm2;
  Conv2d<Scalar> conv2;
  std::optional<Conv2d<Scalar>> skip;
};

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
template <typename Scalar>
class Upsample {
 public:
  Upsample() = default;
  Upsample(const std::string& name, int channels, Rng& rng);

  using Cache = typename Conv2d<Scalar>::Cache;

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out, const Cache& cache);
  void collect(ParameterList<Scalar>& out) { conv.collect(out); }

  Conv2d<Scalar> conv;
};

/// Sinusoidal features [sin(t f_i), cos(t f_i)], f_i = 10000^(-i / (dim/2)).
/// Returns dim x timesteps.size().
template <typename Scalar>
Matrix<Scalar> sinusoidal_embedding(const std::vector<int>& timesteps, int dim);

}  // namespace animediff::nn
