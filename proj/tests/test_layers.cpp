#include "animediff/nn/layers.hpp"

#include <cmath>
#include <functional>

#include "doctest.h"
#include "support.hpp"

using namespace animediff;
using namespace animediff::nn;

namespace {

using TD = Tensor<double>;

// Direct convolution with explicit loops; taps ordered (ky, kx, channel).
TD conv_oracle(const TD& x, const Conv2d<double>& conv, int k, int stride) {
  const int pad = k / 2;
  const int oh = (x.height + 2 * pad - k) / stride + 1;
  const int ow = (x.width + 2 * pad - k) / stride + 1;
  const int in = x.channels;
  TD out(x.batch, conv.out_channels(), oh, ow);
  for (int n = 0; n < x.batch; ++n)
    for (int o = 0; o < conv.out_channels(); ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = conv.bias.value(o, 0);
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
              for (int c = 0; c < in; ++c) {
                const int sy = y * stride + ky - pad;
                const int sx = xx * stride + kx - pad;
                if (sy < 0 || sy >= x.height || sx < 0 || sx >= x.width) continue;
                acc += conv.weight.value(o, (ky * k + kx) * in + c) * x(n, c, sy, sx);
              }
          out(n, o, y, xx) = acc;
        }
  return out;
}

TD group_norm_oracle(const TD& x, const GroupNorm<double>& gn) {
  const int cg = x.channels / gn.groups();
  TD out = TD::zeros_like(x);
  for (int n = 0; n < x.batch; ++n)
    for (int g = 0; g < gn.groups(); ++g) {
      double sum = 0;
      double count = 0;
      for (int c = g * cg; c < (g + 1) * cg; ++c)
        for (int y = 0; y < x.height; ++y)
          for (int xx = 0; xx < x.width; ++xx) {
            sum += x(n, c, y, xx);
            count += 1;
          }
      const double mean = sum / count;
      double sq = 0;
      for (int c = g * cg; c < (g + 1) * cg; ++c)
        for (int y = 0; y < x.height; ++y)
          for (int xx = 0; xx < x.width; ++xx) sq += (x(n, c, y, xx) - mean) * (x(n, c, y, xx) - mean);
      const double inv = 1.0 / std::sqrt(sq / count + 1e-5);
      for (int c = g * cg; c < (g + 1) * cg; ++c)
        for (int y = 0; y < x.height; ++y)
          for (int xx = 0; xx < x.width; ++xx)
            out(n, c, y, xx) = (x(n, c, y, xx) - mean) * inv * gn.gamma.value(c, 0) + gn.beta.value(c, 0);
    }
  return out;
}

void randomize(Parameter<double>& p, Rng& rng, double scale = 0.5) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = scale * rng.normal();
}

// Central-difference check of d<weights, f(x)>/d(entry) against an analytic value.
double numeric_grad(const std::function<double()>& loss, double& entry, double h = 1e-6) {
  const double saved = entry;
  entry = saved + h;
  const double up = loss();
  entry = saved - h;
  const double down = loss();
  entry = saved;
  return (up - down) / (2 * h);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b)); }

double dot(const TD& a, const TD& b) { return a.data.cwiseProduct(b.data).sum(); }

}  // namespace

TEST_CASE("group_count picks the largest divisor not above the preference") {
  CHECK(group_count(16, 8) == 8);
  CHECK(group_count(12, 8) == 6);
  CHECK(group_count(7, 8) == 7);
  CHECK(group_count(7, 4) == 1);
  CHECK(group_count(3, 32) == 3);
}

TEST_CASE("conv2d matches a direct loop for several kernels and strides") {
  Rng rng(1);
  const TD x = testing::gaussian_tensor<double>(2, 3, 7, 6, 2);
  for (auto [k, stride] : {std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 1}, std::pair{5, 2}}) {
    CAPTURE(k);
    CAPTURE(stride);
    const Conv2d<double> conv("c", 3, 4, k, stride, rng);
    const TD out = conv.forward(x, nullptr);
    const TD expected = conv_oracle(x, conv, k, stride);
    REQUIRE(out.same_shape(expected));
    CHECK(testing::max_abs_diff(out.data, expected.data) < 1e-12);
  }
  CHECK_THROWS_AS(Conv2d<double>("c", 3, 4, 2, 1, rng), ConfigError);
  CHECK_THROWS_AS(Conv2d<double>("c", 3, 4, 3, 0, rng), ConfigError);
}

TEST_CASE("conv2d backward agrees with finite differences") {
  Rng rng(3);
  Conv2d<double> conv("c", 2, 3, 3, 2, rng);
  TD x = testing::gaussian_tensor<double>(2, 2, 5, 5, 4);
  const TD probe = testing::gaussian_tensor<double>(2, 3, 3, 3, 5);
  Conv2d<double>::Cache cache;
  conv.forward(x, &cache);
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  const TD gx = conv.backward(probe, cache);
  auto loss = [&] { return dot(conv.forward(x, nullptr), probe); };
  for (int i = 0; i < 8; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(x.data.size()));
    CHECK(rel_err(gx.data.data()[j], numeric_grad(loss, x.data.data()[j])) < 1e-6);
    const Eigen::Index w = static_cast<Eigen::Index>(rng.index(conv.weight.value.size()));
    CHECK(rel_err(conv.weight.grad.data()[w], numeric_grad(loss, conv.weight.value.data()[w])) < 1e-6);
  }
  CHECK(rel_err(conv.bias.grad(1, 0), numeric_grad(loss, conv.bias.value(1, 0))) < 1e-6);
}

TEST_CASE("group norm matches the per-group statistics and its gradient") {
  Rng rng(7);
  GroupNorm<double> gn("g", 6, 3);
  randomize(gn.gamma, rng);
  randomize(gn.beta, rng);
  TD x = testing::gaussian_tensor<double>(2, 6, 3, 4, 8);
  x.data.array() += 2.0;
  GroupNorm<double>::Cache cache;
  const TD out = gn.forward(x, &cache);
  CHECK(testing::max_abs_diff(out.data, group_norm_oracle(x, gn).data) < 1e-12);

  const TD probe = testing::gaussian_tensor<double>(2, 6, 3, 4, 9);
  gn.gamma.zero_grad();
  gn.beta.zero_grad();
  const TD gx = gn.backward(probe, cache);
  auto loss = [&] { return dot(gn.forward(x, nullptr), probe); };
  for (int i = 0; i < 10; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(x.data.size()));
    CHECK(rel_err(gx.data.data()[j], numeric_grad(loss, x.data.data()[j])) < 1e-5);
  }
  for (int c = 0; c < 6; ++c) {
    CHECK(rel_err(gn.gamma.grad(c, 0), numeric_grad(loss, gn.gamma.value(c, 0))) < 1e-6);
    CHECK(rel_err(gn.beta.grad(c, 0), numeric_grad(loss, gn.beta.value(c, 0))) < 1e-6);
  }
  CHECK_THROWS_AS(GroupNorm<double>("g", 6, 4), ConfigError);
}

TEST_CASE("attention matches a scalar softmax oracle") {
  for (int heads : {1, 2}) {
    CAPTURE(heads);
    Rng rng(10 + heads);
    AttentionBlock<double> attn("a", 2, heads, 1, rng);
    randomize(attn.qkv.weight, rng);
    randomize(attn.proj.weight, rng);
    const TD x = testing::gaussian_tensor<double>(1, 2, 2, 2, 12);
    const TD out = attn.forward(x, nullptr);

    // Oracle over four tokens with explicit sums.
    const TD h = group_norm_oracle(x, attn.norm);
    const int C = 2;
    const int d = C / heads;
    auto qkv = [&](int row, int token) {
      double acc = attn.qkv.bias.value(row, 0);
      for (int c = 0; c < C; ++c) acc += attn.qkv.weight.value(row, c) * h.data(c, token);
      return acc;
    };
    Eigen::MatrixXd attended(C, 4);
    for (int hd = 0; hd < heads; ++hd)
      for (int i = 0; i < 4; ++i) {
        double score[4];
        double top = -1e300;
        for (int j = 0; j < 4; ++j) {
          double s = 0;
          for (int e = 0; e < d; ++e) s += qkv(hd * d + e, i) * qkv(C + hd * d + e, j);
          score[j] = s / std::sqrt(double(d));
          top = std::max(top, score[j]);
        }
        double z = 0;
        for (double& s : score) z += (s = std::exp(s - top));
        for (int e = 0; e < d; ++e) {
          double acc = 0;
          for (int j = 0; j < 4; ++j) acc += score[j] / z * qkv(2 * C + hd * d + e, j);
          attended(hd * d + e, i) = acc;
        }
      }
    Eigen::MatrixXd expected = x.data;
    for (int i = 0; i < 4; ++i)
      for (int o = 0; o < C; ++o) {
        double acc = attn.proj.bias.value(o, 0);
        for (int c = 0; c < C; ++c) acc += attn.proj.weight.value(o, c) * attended(c, i);
        expected(o, i) += acc;
      }
    CHECK(testing::max_abs_diff(out.data, expected) < 1e-12);
  }
  Rng rng(1);
  CHECK_THROWS_AS(AttentionBlock<double>("a", 6, 4, 2, rng), ConfigError);
}

TEST_CASE("attention and resblock backward agree with finite differences") {
  Rng rng(21);
  AttentionBlock<double> attn("a", 4, 2, 2, rng);
  randomize(attn.qkv.weight, rng);
  TD x = testing::gaussian_tensor<double>(2, 4, 3, 3, 22);
  const TD probe = testing::gaussian_tensor<double>(2, 4, 3, 3, 23);
  ParameterList<double> params;
  attn.collect(params);
  for (auto* p : params) p->zero_grad();
  AttentionBlock<double>::Cache cache;
  attn.forward(x, &cache);
  const TD gx = attn.backward(probe, cache);
  auto loss = [&] { return dot(attn.forward(x, nullptr), probe); };
  for (int i = 0; i < 8; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(x.data.size()));
    CHECK(rel_err(gx.data.data()[j], numeric_grad(loss, x.data.data()[j])) < 1e-5);
  }
  for (auto* p : params) {
    CAPTURE(p->name);
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(p->value.size()));
    CHECK(rel_err(p->grad.data()[j], numeric_grad(loss, p->value.data()[j])) < 1e-5);
  }

  ResBlock<double> block("r", 4, 6, 5, 2, rng);
  CHECK(block.skip.has_value());
  Matrix<double> t = Matrix<double>::Random(5, 2);
  const TD rprobe = testing::gaussian_tensor<double>(2, 6, 3, 3, 24);
  ParameterList<double> rparams;
  block.collect(rparams);
  for (auto* p : rparams) p->zero_grad();
  ResBlock<double>::Cache rcache;
  block.forward(x, t, &rcache);
  Matrix<double> gt = Matrix<double>::Zero(5, 2);
  const TD rgx = block.backward(rprobe, rcache, gt);
  auto rloss = [&] { return dot(block.forward(x, t, nullptr), rprobe); };
  for (int i = 0; i < 6; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(x.data.size()));
    CHECK(rel_err(rgx.data.data()[j], numeric_grad(rloss, x.data.data()[j])) < 1e-5);
  }
  for (int i = 0; i < 4; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(t.size()));
    CHECK(rel_err(gt.data()[j], numeric_grad(rloss, t.data()[j])) < 1e-5);
  }
  for (auto* p : rparams) {
    CAPTURE(p->name);
    const Eigen::Index j = static_cast<Eigen::Index>(rng.index(p->value.size()));
    CHECK(rel_err(p->grad.data()[j], numeric_grad(rloss, p->value.data()[j])) < 1e-5);
  }
}

TEST_CASE("linear and silu") {
  Rng rng(30);
  Linear<double> lin("l", 3, 2, rng);
  Matrix<double> in = Matrix<double>::Random(3, 4);
  const Matrix<double> out = lin.forward(in, nullptr);
  const Matrix<double> expected = (lin.weight.value * in).colwise() + lin.bias.value.col(0);
  CHECK(testing::max_abs_diff(out, expected) < 1e-15);
  CHECK_THROWS_AS(lin.forward(Matrix<double>::Zero(2, 1), nullptr), ShapeError);

  Matrix<double> z(1, 3);
  z << -2.0, 0.0, 1.5;
  const Matrix<double> s = silu(z);
  for (int i = 0; i < 3; ++i) CHECK(s(0, i) == doctest::Approx(z(0, i) / (1 + std::exp(-z(0, i)))));
  const Matrix<double> g = silu_backward<double>(Matrix<double>::Ones(1, 3), z);
  for (int i = 0; i < 3; ++i) {
    double v = z(0, i);
    auto f = [&] { return v / (1 + std::exp(-v)); };
    CHECK(g(0, i) == doctest::Approx(numeric_grad(f, v)).epsilon(1e-6));
  }
}

TEST_CASE("upsample doubles resolution by pixel replication before the conv") {
  Rng rng(40);
  Upsample<double> up("u", 2, rng);
  const TD x = testing::gaussian_tensor<double>(1, 2, 3, 4, 41);
  TD doubled(1, 2, 6, 8);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int xx = 0; xx < 8; ++xx) doubled(0, c, y, xx) = x(0, c, y / 2, xx / 2);
  const TD out = up.forward(x, nullptr);
  CHECK(out.height == 6);
  CHECK(out.width == 8);
  CHECK(testing::max_abs_diff(out.data, conv_oracle(doubled, up.conv, 3, 1).data) < 1e-12);
}

TEST_CASE("sinusoidal embedding layout and distinctness") {
  const std::vector<int> steps{0, 1, 7, 500, 999};
  const Matrix<double> e = sinusoidal_embedding<double>(steps, 8);
  REQUIRE(e.rows() == 8);
  REQUIRE(e.cols() == 5);
  for (int j = 0; j < 5; ++j)
    for (int i = 0; i < 4; ++i) {
      const double f = std::exp(-std::log(10000.0) * i / 4.0);
      CHECK(e(i, j) == doctest::Approx(std::sin(steps[j] * f)));
      CHECK(e(i + 4, j) == doctest::Approx(std::cos(steps[j] * f)));
    }
  for (int a = 0; a < 5; ++a)
    for (int b = a + 1; b < 5; ++b) CHECK((e.col(a) - e.col(b)).norm() > 1e-3);
  CHECK_THROWS_AS(sinusoidal_embedding<double>(steps, 7), ConfigError);
  CHECK_THROWS_AS(sinusoidal_embedding<double>(steps, 0), ConfigError);
}
