#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "animediff/diffusion.hpp"
#include "animediff/nn/layers.hpp"

namespace animediff {

/// Shape of the conditional noise-prediction U-Net.
struct DenoiserConfig {
  int base_channels = 64;
  std::vector<int> channel_mults{1, 2, 4, 8};
  int blocks_per_level = 2;
  std::vector<int> attention_levels{2, 3};  ///< never level 0
  bool mid_attention = true;                ///< standalone attention in the bottleneck
  int attention_heads = 4;
  int time_embed_dim = 128;  ///< sinusoidal feature size; the MLP widens to 4 * base_channels
  int norm_groups = 32;
  int input_channels = 7;   ///< 3 noisy + 1 line + 3 reference
  int output_channels = 3;
  int image_size = 256;

  /// base 16, mults {1, 2}, one block per level, no attention, 16 px.
  static DenoiserConfig toy();

  [[nodiscard]] int levels() const { return static_cast<int>(channel_mults.size()); }
  [[nodiscard]] int time_hidden_dim() const { return 4 * base_channels; }
  [[nodiscard]] bool has_attention(int level) const;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// Conditional U-Net: 7-channel input [noisy, line, reference] to 3-channel
/// predicted noise. The timestep goes through a sinusoidal embedding and a
/// 2-layer MLP, and is added to every residual block after its first conv.
template <typename Scalar>
class Denoiser {
 public:
  struct Block {
    nn::ResBlock<Scalar> res;
    std::optional<nn::AttentionBlock<Scalar>> attn;
  };

  struct BlockCache {
    typename nn::ResBlock<Scalar>::Cache res;
    typename nn::AttentionBlock<Scalar>::Cache attn;
  };

  /// Everything backward() needs from one forward pass.
  struct Trace {
    Matrix<Scalar> time_features;
    typename nn::Linear<Scalar>::Cache time1;
    Matrix<Scalar> time_hidden;
    typename nn::Linear<Scalar>::Cache time2;
    Matrix<Scalar> time_embedding;
    typename nn::Conv2d<Scalar>::Cache conv_in;
    std::vector<BlockCache> down;
    std::vector<typename nn::Conv2d<Scalar>::Cache> downsample;
    BlockCache mid1;
    typename nn::AttentionBlock<Scalar>::Cache mid_attn;
    BlockCache mid2;
    std::vector<BlockCache> up;
    std::vector<int> up_skip_channels;
    std::vector<typename nn::Upsample<Scalar>::Cache> upsample;
    typename nn::GroupNorm<Scalar>::Cache norm_out;
    Matrix<Scalar> pre_act_out;
    typename nn::Conv2d<Scalar>::Cache conv_out;
  };

  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  [[nodiscard]] const DenoiserConfig& config() const { return config_; }

  /// `input` is Bx7xHxW in model range; one timestep per sample.
  Tensor<Scalar> forward(const Tensor<Scalar>& input, std::span<const int> timesteps, Trace* trace = nullptr) const;

  /// Back-propagates d loss / d output, accumulating parameter gradients.
  /// Returns d loss / d input.
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_output, const Trace& trace);

  /// Concatenates [noisy, line, reference] and runs the network at one shared timestep.
  Tensor<Scalar> predict_noise(const Tensor<Scalar>& line, const Tensor<Scalar>& reference,
                               const Tensor<Scalar>& noisy, int t) const;
  Tensor<Scalar> predict_noise(const Tensor<Scalar>& line, const Tensor<Scalar>& reference,
                               const Tensor<Scalar>& noisy, std::span<const int> timesteps) const;

  /// Predictor view for the samplers; the model must outlive it.
  [[nodiscard]] diffusion::NoisePredictor<Scalar> predictor() const;

  /// Stable order; names are unique.
  nn::ParameterList<Scalar> parameters();
  [[nodiscard]] nn::ConstParameterList<Scalar> parameters() const;
  [[nodiscard]] std::size_t parameter_count() const;
  void zero_grad();

  /// Concatenate all parameter values into one vector (for checksums and comparisons).
  [[nodiscard]] Vector<Scalar> flat_parameters() const;

 private:
  Tensor<Scalar> run_block(const Block& block, const Tensor<Scalar>& x, const Matrix<Scalar>& time_act,
                           BlockCache* cache) const;
  Tensor<Scalar> back_block(Block& block, const Tensor<Scalar>& g, const BlockCache& cache,
                            Matrix<Scalar>& grad_time_act);

  DenoiserConfig config_;
  nn::Linear<Scalar> time1_;
  nn::Linear<Scalar> time2_;
  nn::Conv2d<Scalar> conv_in_;
  std::vector<Block> down_;
  std::vector<nn::Conv2d<Scalar>> downsample_;
  Block mid1_;
  std::optional<nn::AttentionBlock<Scalar>> mid_attn_;
  Block mid2_;
  std::vector<Block> up_;
  std::vector<nn::Upsample<Scalar>> upsample_;
  nn::GroupNorm<Scalar> norm_out_;
  nn::Conv2d<Scalar> conv_out_;
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

}  // namespace animediff
