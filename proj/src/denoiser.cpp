#include "animediff/denoiser.hpp"

#include <algorithm>
#include <string>

namespace animediff {

DenoiserConfig DenoiserConfig::toy() {
  DenoiserConfig c;
  c.base_channels = 16;
  c.channel_mults = {1, 2};
  c.blocks_per_level = 1;
  c.attention_levels = {};
  c.mid_attention = false;
  c.attention_heads = 1;
  c.time_embed_dim = 32;
  c.norm_groups = 8;
  c.image_size = 16;
  return c;
}

bool DenoiserConfig::has_attention(int level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

void DenoiserConfig::validate() const {
  if (input_channels != 7) throw ConfigError("denoiser: input_channels must be 7 (3 noisy + 1 line + 3 reference)");
  if (output_channels != 3) throw ConfigError("denoiser: output_channels must be 3");
  if (base_channels < 1) throw ConfigError("denoiser: base_channels must be positive");
  if (channel_mults.empty()) throw ConfigError("denoiser: channel_mults is empty");
  for (int m : channel_mults)
    if (m < 1) throw ConfigError("denoiser: channel multipliers must be positive");
  if (blocks_per_level < 1) throw ConfigError("denoiser: blocks_per_level must be >= 1");
  for (int l : attention_levels) {
    if (l == 0) throw ConfigError("denoiser: attention is not allowed at level 0");
    if (l < 0 || l >= levels()) throw ConfigError("denoiser: attention level out of range");
  }
  if (attention_heads < 1) throw ConfigError("denoiser: attention_heads must be >= 1");
  for (int l : attention_levels)
    if ((base_channels * channel_mults[l]) % attention_heads != 0)
      throw ConfigError("denoiser: channels at level " + std::to_string(l) + " not divisible by heads");
  if (mid_attention && (base_channels * channel_mults.back()) % attention_heads != 0)
    throw ConfigError("denoiser: bottleneck channels not divisible by heads");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("denoiser: time_embed_dim must be even");
  if (norm_groups < 1) throw ConfigError("denoiser: norm_groups must be >= 1");
  const int factor = 1 << (levels() - 1);
  if (image_size < factor || image_size % factor != 0)
    throw ConfigError("denoiser: image_size " + std::to_string(image_size) + " not divisible by " +
                      std::to_string(factor));
}

template <typename Scalar>
Denoiser<Scalar>::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int tdim = config_.time_hidden_dim();
  const int groups = config_.norm_groups;
  const int heads = config_.attention_heads;
  time1_ = nn::Linear<Scalar>("time.fc1", config_.time_embed_dim, tdim, rng);
  time2_ = nn::Linear<Scalar>("time.fc2", tdim, tdim, rng);
  conv_in_ = nn::Conv2d<Scalar>("conv_in", config_.input_channels, config_.base_channels, 3, 1, rng);

  std::vector<int> skip_channels{config_.base_channels};
  int ch = config_.base_channels;
  for (int l = 0; l < config_.levels(); ++l) {
    const int out = config_.base_channels * config_.channel_mults[l];
    for (int b = 0; b < config_.blocks_per_level; ++b) {
      const std::string name = "down." + std::to_string(l) + "." + std::to_string(b);
      Block block{nn::ResBlock<Scalar>(name + ".res", ch, out, tdim, groups, rng), std::nullopt};
      if (config_.has_attention(l)) block.attn.emplace(name + ".attn", out, heads, groups, rng);
      down_.push_back(std::move(block));
      ch = out;
      skip_channels.push_back(ch);
    }
    if (l + 1 < config_.levels()) {
      downsample_.emplace_back("down." + std::to_string(l) + ".downsample", ch, ch, 3, 2, rng);
      skip_channels.push_back(ch);
    }
  }

  mid1_ = Block{nn::ResBlock<Scalar>("mid.res1", ch, ch, tdim, groups, rng), std::nullopt};
  if (config_.mid_attention) mid_attn_.emplace("mid.attn", ch, heads, groups, rng);
  mid2_ = Block{nn::ResBlock<Scalar>("mid.res2", ch, ch, tdim, groups, rng), std::nullopt};

  for (int l = config_.levels() - 1; l >= 0; --l) {
    const int out = config_.base_channels * config_.channel_mults[l];
    for (int b = 0; b <= config_.blocks_per_level; ++b) {
      const std::string name = "up." + std::to_string(l) + "." + std::to_string(b);
      const int skip = skip_channels.back();
      skip_channels.pop_back();
      Block block{nn::ResBlock<Scalar>(name + ".res", ch + skip, out, tdim, groups, rng), std::nullopt};
      if (config_.has_attention(l)) block.attn.emplace(name + ".attn", out, heads, groups, rng);
      up_.push_back(std::move(block));
      ch = out;
    }
    if (l > 0) upsample_.emplace_back("up." + std::to_string(l) + ".upsample", ch, rng);
  }

  norm_out_ = nn::GroupNorm<Scalar>("norm_out", ch, nn::group_count(ch, groups));
  conv_out_ = nn::Conv2d<Scalar>("conv_out", ch, config_.output_channels, 3, 1, rng);
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::run_block(const Block& block, const Tensor<Scalar>& x,
                                           const Matrix<Scalar>& time_act, BlockCache* cache) const {
  Tensor<Scalar> h = block.res.forward(x, time_act, cache ? &cache->res : nullptr);
  if (block.attn) h = block.attn->forward(h, cache ? &cache->attn : nullptr);
  return h;
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::back_block(Block& block, const Tensor<Scalar>& g, const BlockCache& cache,
                                            Matrix<Scalar>& grad_time_act) {
  if (block.attn) return block.res.backward(block.attn->backward(g, cache.attn), cache.res, grad_time_act);
  return block.res.backward(g, cache.res, grad_time_act);
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::forward(const Tensor<Scalar>& input, std::span<const int> timesteps,
                                         Trace* trace) const {
  if (input.channels != config_.input_channels)
    throw ShapeError("denoiser: expected " + std::to_string(config_.input_channels) + " input channels, got " +
                     std::to_string(input.channels));
  const int factor = 1 << (config_.levels() - 1);
  if (input.height % factor != 0 || input.width % factor != 0 || input.height == 0 || input.width == 0)
    throw ShapeError("denoiser: spatial size must be a positive multiple of " + std::to_string(factor));
  if (static_cast<int>(timesteps.size()) != input.batch)
    throw ShapeError("denoiser: need one timestep per sample");

  const std::vector<int> ts(timesteps.begin(), timesteps.end());
  const Matrix<Scalar> features = nn::sinusoidal_embedding<Scalar>(ts, config_.time_embed_dim);
  const Matrix<Scalar> hidden = time1_.forward(features, trace ? &trace->time1 : nullptr);
  const Matrix<Scalar> temb = time2_.forward(nn::silu(hidden), trace ? &trace->time2 : nullptr);
  const Matrix<Scalar> time_act = nn::silu(temb);
  if (trace) {
    trace->time_features = features;
    trace->time_hidden = hidden;
    trace->time_embedding = temb;
    trace->down.assign(down_.size(), BlockCache{});
    trace->downsample.assign(downsample_.size(), {});
    trace->up.assign(up_.size(), BlockCache{});
    trace->upsample.assign(upsample_.size(), {});
    trace->up_skip_channels.clear();
  }

  std::vector<Tensor<Scalar>> skips;
  Tensor<Scalar> h = conv_in_.forward(input, trace ? &trace->conv_in : nullptr);
  skips.push_back(h);
  std::size_t bi = 0;
  for (int l = 0; l < config_.levels(); ++l) {
    for (int b = 0; b < config_.blocks_per_level; ++b, ++bi) {
      h = run_block(down_[bi], h, time_act, trace ? &trace->down[bi] : nullptr);
      skips.push_back(h);
    }
    if (l + 1 < config_.levels()) {
      h = downsample_[l].forward(h, trace ? &trace->downsample[l] : nullptr);
      skips.push_back(h);
    }
  }

  h = run_block(mid1_, h, time_act, trace ? &trace->mid1 : nullptr);
  if (mid_attn_) h = mid_attn_->forward(h, trace ? &trace->mid_attn : nullptr);
  h = run_block(mid2_, h, time_act, trace ? &trace->mid2 : nullptr);

  std::size_t ui = 0;
  std::size_t si = 0;
  for (int l = config_.levels() - 1; l >= 0; --l) {
    for (int b = 0; b <= config_.blocks_per_level; ++b, ++ui) {
      const Tensor<Scalar> skip = std::move(skips.back());
      skips.pop_back();
      if (trace) trace->up_skip_channels.push_back(skip.channels);
      h = run_block(up_[ui], concat_channels<Scalar>({&h, &skip}), time_act, trace ? &trace->up[ui] : nullptr);
    }
    if (l > 0) {
      h = upsample_[si].forward(h, trace ? &trace->upsample[si] : nullptr);
      ++si;
    }
  }

  h = norm_out_.forward(h, trace ? &trace->norm_out : nullptr);
  if (trace) trace->pre_act_out = h.data;
  h.data = nn::silu(h.data);
  return conv_out_.forward(h, trace ? &trace->conv_out : nullptr);
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::backward(const Tensor<Scalar>& grad_output, const Trace& trace) {
  Matrix<Scalar> g_time = Matrix<Scalar>::Zero(config_.time_hidden_dim(), grad_output.batch);

  Tensor<Scalar> g = conv_out_.backward(grad_output, trace.conv_out);
  g.data = nn::silu_backward(g.data, trace.pre_act_out);
  g = norm_out_.backward(g, trace.norm_out);

  // Walk the decoder backwards; the k-th block visited consumed skip k.
  std::vector<Tensor<Scalar>> g_skips;
  std::size_t ui = up_.size();
  std::size_t si = upsample_.size();
  for (int l = 0; l < config_.levels(); ++l) {
    if (l > 0) {
      --si;
      g = upsample_[si].backward(g, trace.upsample[si]);
    }
    for (int b = 0; b <= config_.blocks_per_level; ++b) {
      --ui;
      const Tensor<Scalar> g_cat = back_block(up_[ui], g, trace.up[ui], g_time);
      const int skip_ch = trace.up_skip_channels[ui];
      g = g_cat.channel_slice(0, g_cat.channels - skip_ch);
      g_skips.push_back(g_cat.channel_slice(g_cat.channels - skip_ch, skip_ch));
    }
  }

  g = back_block(mid2_, g, trace.mid2, g_time);
  if (mid_attn_) g = mid_attn_->backward(g, trace.mid_attn);
  g = back_block(mid1_, g, trace.mid1, g_time);

  std::size_t s = g_skips.size();
  std::size_t bi = down_.size();
  for (int l = config_.levels() - 1; l >= 0; --l) {
    if (l + 1 < config_.levels()) {
      g.data += g_skips[--s].data;
      g = downsample_[l].backward(g, trace.downsample[l]);
    }
    for (int b = 0; b < config_.blocks_per_level; ++b) {
      --bi;
      g.data += g_skips[--s].data;
      g = back_block(down_[bi], g, trace.down[bi], g_time);
    }
  }
  g.data += g_skips[--s].data;
  Tensor<Scalar> g_input = conv_in_.backward(g, trace.conv_in);

  const Matrix<Scalar> g_temb = nn::silu_backward(g_time, trace.time_embedding);
  const Matrix<Scalar> g_hidden = nn::silu_backward(time2_.backward(g_temb, trace.time2), trace.time_hidden);
  time1_.backward(g_hidden, trace.time1);
  return g_input;
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::predict_noise(const Tensor<Scalar>& line, const Tensor<Scalar>& reference,
                                               const Tensor<Scalar>& noisy, std::span<const int> timesteps) const {
  if (line.channels != 1 || reference.channels != 3 || noisy.channels != 3)
    throw ShapeError("predict_noise: expected 1-channel line, 3-channel reference and 3-channel noisy image");
  if (!(line.batch == noisy.batch && reference.batch == noisy.batch && line.height == noisy.height &&
        line.width == noisy.width && reference.height == noisy.height && reference.width == noisy.width))
    throw ShapeError("predict_noise: inputs differ in batch or spatial size");
  return forward(concat_channels<Scalar>({&noisy, &line, &reference}), timesteps);
}

template <typename Scalar>
Tensor<Scalar> Denoiser<Scalar>::predict_noise(const Tensor<Scalar>& line, const Tensor<Scalar>& reference,
                                               const Tensor<Scalar>& noisy, int t) const {
  const std::vector<int> ts(static_cast<std::size_t>(noisy.batch), t);
  return predict_noise(line, reference, noisy, ts);
}

template <typename Scalar>
diffusion::NoisePredictor<Scalar> Denoiser<Scalar>::predictor() const {
  return [this](const Tensor<Scalar>& line, const Tensor<Scalar>& reference, const Tensor<Scalar>& noisy, int t) {
    return predict_noise(line, reference, noisy, t);
  };
}

template <typename Scalar>
nn::ParameterList<Scalar> Denoiser<Scalar>::parameters() {
  nn::ParameterList<Scalar> out;
  const auto add_block = [&out](Block& b) {
    b.res.collect(out);
    if (b.attn) b.attn->collect(out);
  };
  time1_.collect(out);
  time2_.collect(out);
  conv_in_.collect(out);
  std::size_t bi = 0;
  for (int l = 0; l < config_.levels(); ++l) {
    for (int b = 0; b < config_.blocks_per_level; ++b) add_block(down_[bi++]);
    if (l + 1 < config_.levels()) downsample_[l].collect(out);
  }
  add_block(mid1_);
  if (mid_attn_) mid_attn_->collect(out);
  add_block(mid2_);
  std::size_t ui = 0;
  std::size_t si = 0;
  for (int l = config_.levels() - 1; l >= 0; --l) {
    for (int b = 0; b <= config_.blocks_per_level; ++b) add_block(up_[ui++]);
    if (l > 0) upsample_[si++].collect(out);
  }
  norm_out_.collect(out);
  conv_out_.collect(out);
  return out;
}

template <typename Scalar>
nn::ConstParameterList<Scalar> Denoiser<Scalar>::parameters() const {
  const auto mutable_list = const_cast<Denoiser*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

template <typename Scalar>
std::size_t Denoiser<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename Scalar>
void Denoiser<Scalar>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename Scalar>
Vector<Scalar> Denoiser<Scalar>::flat_parameters() const {
  const auto params = parameters();
  Vector<Scalar> flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index offset = 0;
  for (const auto* p : params) {
    flat.segment(offset, p->value.size()) = p->value.reshaped();
    offset += p->value.size();
  }
  return flat;
}

template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace animediff
