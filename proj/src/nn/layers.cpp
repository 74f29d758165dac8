#include "animediff/nn/layers.hpp"

#include <cmath>

namespace animediff::nn {

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in double so float and
// double models built from one seed hold the same values.
template <typename Scalar>
Matrix<Scalar> uniform_init(Eigen::Index rows, Eigen::Index cols, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  return m;
}

template <typename Scalar>
Parameter<Scalar> make_param(std::string name, Matrix<Scalar> value) {
  Parameter<Scalar> p{std::move(name), std::move(value), {}};
  p.zero_grad();
  return p;
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> silu(const Matrix<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return v / (Scalar(1) + std::exp(-v)); });
}

template <typename Scalar>
Matrix<Scalar> silu_backward(const Matrix<Scalar>& grad_out, const Matrix<Scalar>& input) {
  return grad_out.binaryExpr(input, [](Scalar g, Scalar v) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
    return g * (s + v * s * (Scalar(1) - s));
  });
}

int group_count(int channels, int preferred) {
  for (int g = std::min(channels, preferred); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Scalar>
Linear<Scalar>::Linear(const std::string& name, int in_features, int out_features, Rng& rng)
    : weight(make_param(name + ".weight", uniform_init<Scalar>(out_features, in_features, in_features, rng))),
      bias(make_param(name + ".bias", uniform_init<Scalar>(out_features, 1, in_features, rng))) {}

template <typename Scalar>
Matrix<Scalar> Linear<Scalar>::forward(const Matrix<Scalar>& input, Cache* cache) const {
  if (input.rows() != weight.value.cols()) throw ShapeError("linear: input feature count mismatch");
  if (cache) cache->input = input;
  Matrix<Scalar> out = weight.value * input;
  out.colwise() += bias.value.col(0);
  return out;
}

template <typename Scalar>
Matrix<Scalar> Linear<Scalar>::backward(const Matrix<Scalar>& grad_out, const Cache& cache) {
  weight.grad.noalias() += grad_out * cache.input.transpose();
  bias.grad += grad_out.rowwise().sum();
  return weight.value.transpose() * grad_out;
}

// ---------------------------------------------------------------------------
// Conv2d

template <typename Scalar>
Conv2d<Scalar>::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
                       Rng& rng)
    : weight(make_param(name + ".weight", uniform_init<Scalar>(out_channels, kernel * kernel * in_channels,
                                                               kernel * kernel * in_channels, rng))),
      bias(make_param(name + ".bias", uniform_init<Scalar>(out_channels, 1, kernel * kernel * in_channels, rng))),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride) {
  if (kernel % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
}

template <typename Scalar>
Matrix<Scalar> Conv2d<Scalar>::im2col(const Tensor<Scalar>& x) const {
  const int pad = kernel_ / 2;
  const int ho = output_size(x.height);
  const int wo = output_size(x.width);
  const int c = in_channels_;
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(kernel_) * kernel_ * c,
                                             static_cast<Eigen::Index>(x.batch) * ho * wo);
  Eigen::Index col = 0;
  for (int n = 0; n < x.batch; ++n) {
    for (int yo = 0; yo < ho; ++yo) {
      for (int xo = 0; xo < wo; ++xo, ++col) {
        for (int ky = 0; ky < kernel_; ++ky) {
          const int yi = yo * stride_ - pad + ky;
          if (yi < 0 || yi >= x.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int xi = xo * stride_ - pad + kx;
            if (xi < 0 || xi >= x.width) continue;
            cols.col(col).segment((ky * kernel_ + kx) * c, c) = x.data.col(x.column(n, yi, xi));
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::col2im(const Matrix<Scalar>& cols, const Tensor<Scalar>& like) const {
  const int pad = kernel_ / 2;
  const int ho = output_size(like.height);
  const int wo = output_size(like.width);
  const int c = in_channels_;
  Tensor<Scalar> gx = Tensor<Scalar>::zeros_like(like);
  Eigen::Index col = 0;
  for (int n = 0; n < like.batch; ++n) {
    for (int yo = 0; yo < ho; ++yo) {
      for (int xo = 0; xo < wo; ++xo, ++col) {
        for (int ky = 0; ky < kernel_; ++ky) {
          const int yi = yo * stride_ - pad + ky;
          if (yi < 0 || yi >= like.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int xi = xo * stride_ - pad + kx;
            if (xi < 0 || xi >= like.width) continue;
            gx.data.col(gx.column(n, yi, xi)) += cols.col(col).segment((ky * kernel_ + kx) * c, c);
          }
        }
      }
    }
  }
  return gx;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x, Cache* cache) const {
  if (x.channels != in_channels_)
    throw ShapeError("conv2d " + weight.name + ": expected " + std::to_string(in_channels_) + " channels, got " +
                     std::to_string(x.channels));
  if (cache) cache->input = x;
  Tensor<Scalar> out(x.batch, out_channels_, output_size(x.height), output_size(x.width));
  if (kernel_ == 1 && stride_ == 1) {
    out.data.noalias() = weight.value * x.data;
  } else {
    out.data.noalias() = weight.value * im2col(x);
  }
  out.data.colwise() += bias.value.col(0);
  return out;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& grad_out, const Cache& cache) {
  const Tensor<Scalar>& x = cache.input;
  bias.grad += grad_out.data.rowwise().sum();
  if (kernel_ == 1 && stride_ == 1) {
    weight.grad.noalias() += grad_out.data * x.data.transpose();
    Tensor<Scalar> gx = Tensor<Scalar>::zeros_like(x);
    gx.data.noalias() = weight.value.transpose() * grad_out.data;
    return gx;
  }
  const Matrix<Scalar> cols = im2col(x);
  weight.grad.noalias() += grad_out.data * cols.transpose();
  const Matrix<Scalar> gcols = weight.value.transpose() * grad_out.data;
  return col2im(gcols, x);
}

// ---------------------------------------------------------------------------
// GroupNorm

template <typename Scalar>
GroupNorm<Scalar>::GroupNorm(const std::string& name, int channels, int groups, double eps)
    : gamma(make_param<Scalar>(name + ".gamma", Matrix<Scalar>::Ones(channels, 1))),
      beta(make_param<Scalar>(name + ".beta", Matrix<Scalar>::Zero(channels, 1))),
      channels_(channels),
      groups_(groups),
      eps_(eps) {
  if (groups < 1 || channels % groups != 0) throw ConfigError("group_norm: groups must divide channels");
}

template <typename Scalar>
Tensor<Scalar> GroupNorm<Scalar>::forward(const Tensor<Scalar>& x, Cache* cache) const {
  if (x.channels != channels_) throw ShapeError("group_norm " + gamma.name + ": channel mismatch");
  const int cg = channels_ / groups_;
  const Eigen::Index hw = x.pixels();
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(x);
  if (cache) {
    cache->inv_std.assign(static_cast<std::size_t>(x.batch) * groups_, Scalar(0));
    cache->batch = x.batch;
    cache->pixels = hw;
  }
  for (int n = 0; n < x.batch; ++n) {
    for (int g = 0; g < groups_; ++g) {
      const auto block = x.data.block(g * cg, n * hw, cg, hw);
      const Scalar mean = block.mean();
      const Scalar var = (block.array() - mean).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps_));
      out.data.block(g * cg, n * hw, cg, hw) = (block.array() - mean) * inv;
      if (cache) cache->inv_std[static_cast<std::size_t>(n) * groups_ + g] = inv;
    }
  }
  if (cache) cache->normalized = out.data;
  out.data = (out.data.array().colwise() * gamma.value.col(0).array()).matrix();
  out.data.colwise() += beta.value.col(0);
  return out;
}

template <typename Scalar>
Tensor<Scalar> GroupNorm<Scalar>::backward(const Tensor<Scalar>& grad_out, const Cache& cache) {
  const int cg = channels_ / groups_;
  const Eigen::Index hw = cache.pixels;
  gamma.grad += grad_out.data.cwiseProduct(cache.normalized).rowwise().sum();
  beta.grad += grad_out.data.rowwise().sum();
  const Matrix<Scalar> g_norm = (grad_out.data.array().colwise() * gamma.value.col(0).array()).matrix();
  Tensor<Scalar> gx = Tensor<Scalar>::zeros_like(grad_out);
  const Scalar count = static_cast<Scalar>(cg * hw);
  for (int n = 0; n < cache.batch; ++n) {
    for (int g = 0; g < groups_; ++g) {
      const auto gn = g_norm.block(g * cg, n * hw, cg, hw).array();
      const auto xh = cache.normalized.block(g * cg, n * hw, cg, hw).array();
      const Scalar sum_g = gn.sum();
      const Scalar sum_gx = (gn * xh).sum();
      const Scalar inv = cache.inv_std[static_cast<std::size_t>(n) * groups_ + g];
      gx.data.block(g * cg, n * hw, cg, hw) = ((count * gn - sum_g - xh * sum_gx) * (inv / count)).matrix();
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// AttentionBlock

template <typename Scalar>
AttentionBlock<Scalar>::AttentionBlock(const std::string& name, int channels, int heads, int norm_groups,
                                       Rng& rng)
    : norm(name + ".norm", channels, group_count(channels, norm_groups)),
      qkv(name + ".qkv", channels, 3 * channels, 1, 1, rng),
      proj(name + ".proj", channels, channels, 1, 1, rng),
      channels_(channels),
      heads_(heads) {
  if (heads < 1 || channels % heads != 0)
    throw ConfigError("attention: channels (" + std::to_string(channels) + ") not divisible by heads (" +
                      std::to_string(heads) + ")");
}

template <typename Scalar>
void AttentionBlock<Scalar>::collect(ParameterList<Scalar>& out) {
  norm.collect(out);
  qkv.collect(out);
  proj.collect(out);
}

template <typename Scalar>
Tensor<Scalar> AttentionBlock<Scalar>::forward(const Tensor<Scalar>& x, Cache* cache) const {
  const Tensor<Scalar> h = norm.forward(x, cache ? &cache->norm : nullptr);
  Tensor<Scalar> q_k_v = qkv.forward(h, cache ? &cache->qkv : nullptr);
  const int d = channels_ / heads_;
  const Eigen::Index hw = x.pixels();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> attended = Tensor<Scalar>::zeros_like(x);
  if (cache) cache->probs.assign(static_cast<std::size_t>(x.batch) * heads_, Matrix<Scalar>());
  for (int n = 0; n < x.batch; ++n) {
    for (int head = 0; head < heads_; ++head) {
      const auto q = q_k_v.data.block(head * d, n * hw, d, hw);
      const auto k = q_k_v.data.block(channels_ + head * d, n * hw, d, hw);
      const auto v = q_k_v.data.block(2 * channels_ + head * d, n * hw, d, hw);
      Matrix<Scalar> probs = (q.transpose() * k) * scale;  // queries x keys
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const Scalar m = probs.row(i).maxCoeff();
        probs.row(i) = (probs.row(i).array() - m).exp().matrix();
        probs.row(i) /= probs.row(i).sum();
      }
      attended.data.block(head * d, n * hw, d, hw).noalias() = v * probs.transpose();
      if (cache) cache->probs[static_cast<std::size_t>(n) * heads_ + head] = std::move(probs);
    }
  }
  if (cache) cache->qkv_out = std::move(q_k_v);
  Tensor<Scalar> out = proj.forward(attended, cache ? &cache->proj : nullptr);
  out.data += x.data;
  return out;
}

template <typename Scalar>
Tensor<Scalar> AttentionBlock<Scalar>::backward(const Tensor<Scalar>& grad_out, const Cache& cache) {
  const Tensor<Scalar> g_att = proj.backward(grad_out, cache.proj);
  const int d = channels_ / heads_;
  const Eigen::Index hw = grad_out.pixels();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> g_qkv = Tensor<Scalar>::zeros_like(cache.qkv_out);
  for (int n = 0; n < grad_out.batch; ++n) {
    for (int head = 0; head < heads_; ++head) {
      const Matrix<Scalar>& probs = cache.probs[static_cast<std::size_t>(n) * heads_ + head];
      const auto q = cache.qkv_out.data.block(head * d, n * hw, d, hw);
      const auto k = cache.qkv_out.data.block(channels_ + head * d, n * hw, d, hw);
      const auto v = cache.qkv_out.data.block(2 * channels_ + head * d, n * hw, d, hw);
      const auto go = g_att.data.block(head * d, n * hw, d, hw);
      g_qkv.data.block(2 * channels_ + head * d, n * hw, d, hw).noalias() = go * probs;
      const Matrix<Scalar> g_probs = go.transpose() * v;
      const Vector<Scalar> row_dot = g_probs.cwiseProduct(probs).rowwise().sum();
      const Matrix<Scalar> g_scores =
          (probs.array() * (g_probs.colwise() - row_dot).array()).matrix() * scale;
      g_qkv.data.block(head * d, n * hw, d, hw).noalias() = k * g_scores.transpose();
      g_qkv.data.block(channels_ + head * d, n * hw, d, hw).noalias() = q * g_scores;
    }
  }
  Tensor<Scalar> gx = norm.backward(qkv.backward(g_qkv, cache.qkv), cache.norm);
  gx.data += grad_out.data;
  return gx;
}

// ---------------------------------------------------------------------------
// ResBlock

template <typename Scalar>
ResBlock<Scalar>::ResBlock(const std::string& name, int in_channels, int out_channels, int time_dim,
                           int norm_groups, Rng& rng)
    : norm1(name + ".norm1", in_channels, group_count(in_channels, norm_groups)),
      conv1(name + ".conv1", in_channels, out_channels, 3, 1, rng),
      time_proj(name + ".time_proj", time_dim, out_channels, rng),
      norm2(name + ".norm2", out_channels, group_count(out_channels, norm_groups)),
      conv2(name + ".conv2", out_channels, out_channels, 3, 1, rng) {
  if (in_channels != out_channels) skip.emplace(name + ".skip", in_channels, out_channels, 1, 1, rng);
}

template <typename Scalar>
void ResBlock<Scalar>::collect(ParameterList<Scalar>& out) {
  norm1.collect(out);
  conv1.collect(out);
  time_proj.collect(out);
  norm2.collect(out);
  conv2.collect(out);
  if (skip) skip->collect(out);
}

template <typename Scalar>
Tensor<Scalar> ResBlock<Scalar>::forward(const Tensor<Scalar>& x, const Matrix<Scalar>& time_act,
                                         Cache* cache) const {
  Tensor<Scalar> h = norm1.forward(x, cache ? &cache->norm1 : nullptr);
  if (cache) cache->pre_act1 = h.data;
  h.data = silu(h.data);
  h = conv1.forward(h, cache ? &cache->conv1 : nullptr);

  const Matrix<Scalar> t = time_proj.forward(time_act, cache ? &cache->time : nullptr);
  for (int n = 0; n < x.batch; ++n) h.sample(n).colwise() += t.col(n);

  h = norm2.forward(h, cache ? &cache->norm2 : nullptr);
  if (cache) cache->pre_act2 = h.data;
  h.data = silu(h.data);
  h = conv2.forward(h, cache ? &cache->conv2 : nullptr);

  if (skip) {
    h.data += skip->forward(x, cache ? &cache->skip : nullptr).data;
  } else {
    h.data += x.data;
  }
  return h;
}

template <typename Scalar>
Tensor<Scalar> ResBlock<Scalar>::backward(const Tensor<Scalar>& grad_out, const Cache& cache,
                                          Matrix<Scalar>& grad_time_act) {
  Tensor<Scalar> gx = skip ? skip->backward(grad_out, cache.skip) : grad_out;

  Tensor<Scalar> g = conv2.backward(grad_out, cache.conv2);
  g.data = silu_backward(g.data, cache.pre_act2);
  g = norm2.backward(g, cache.norm2);

  Matrix<Scalar> g_t(g.channels, g.batch);
  for (int n = 0; n < g.batch; ++n) g_t.col(n) = g.sample(n).rowwise().sum();
  grad_time_act += time_proj.backward(g_t, cache.time);

  g = conv1.backward(g, cache.conv1);
  g.data = silu_backward(g.data, cache.pre_act1);
  g = norm1.backward(g, cache.norm1);
  gx.data += g.data;
  return gx;
}

// ---------------------------------------------------------------------------
// Upsample

template <typename Scalar>
Upsample<Scalar>::Upsample(const std::string& name, int channels, Rng& rng)
    : conv(name + ".conv", channels, channels, 3, 1, rng) {}

template <typename Scalar>
Tensor<Scalar> Upsample<Scalar>::forward(const Tensor<Scalar>& x, Cache* cache) const {
  Tensor<Scalar> up(x.batch, x.channels, 2 * x.height, 2 * x.width);
  for (int n = 0; n < x.batch; ++n)
    for (int y = 0; y < up.height; ++y)
      for (int xx = 0; xx < up.width; ++xx) up.data.col(up.column(n, y, xx)) = x.data.col(x.column(n, y / 2, xx / 2));
  return conv.forward(up, cache);
}

template <typename Scalar>
Tensor<Scalar> Upsample<Scalar>::backward(const Tensor<Scalar>& grad_out, const Cache& cache) {
  const Tensor<Scalar> g_up = conv.backward(grad_out, cache);
  Tensor<Scalar> gx(g_up.batch, g_up.channels, g_up.height / 2, g_up.width / 2);
  for (int n = 0; n < g_up.batch; ++n)
    for (int y = 0; y < g_up.height; ++y)
      for (int xx = 0; xx < g_up.width; ++xx) gx.data.col(gx.column(n, y / 2, xx / 2)) += g_up.data.col(g_up.column(n, y, xx));
  return gx;
}

template <typename Scalar>
Matrix<Scalar> sinusoidal_embedding(const std::vector<int>& timesteps, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("time embedding dimension must be even and >= 2");
  const int half = dim / 2;
  Matrix<Scalar> out(dim, static_cast<Eigen::Index>(timesteps.size()));
  for (std::size_t j = 0; j < timesteps.size(); ++j) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[j] * freq;
      out(i, static_cast<Eigen::Index>(j)) = static_cast<Scalar>(std::sin(arg));
      out(half + i, static_cast<Eigen::Index>(j)) = static_cast<Scalar>(std::cos(arg));
    }
  }
  return out;
}

#define ANIMEDIFF_INSTANTIATE(Scalar)                                                          \
  template Matrix<Scalar> silu<Scalar>(const Matrix<Scalar>&);                                 \
  template Matrix<Scalar> silu_backward<Scalar>(const Matrix<Scalar>&, const Matrix<Scalar>&); \
  template Matrix<Scalar> sinusoidal_embedding<Scalar>(const std::vector<int>&, int);          \
  template class Linear<Scalar>;                                                               \
  template class Conv2d<Scalar>;                                                               \
  template class GroupNorm<Scalar>;                                                            \
  template class AttentionBlock<Scalar>;                                                       \
  template class ResBlock<Scalar>;                                                             \
  template class Upsample<Scalar>;

ANIMEDIFF_INSTANTIATE(float)
ANIMEDIFF_INSTANTIATE(double)

#undef ANIMEDIFF_INSTANTIATE

}  // namespace animediff::nn
