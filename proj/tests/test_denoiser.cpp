#include "animediff/denoiser.hpp"

#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace animediff;

namespace {

std::size_t conv(int in, int out, int k) { return std::size_t(out) * k * k * in + out; }
std::size_t linear(int in, int out) { return std::size_t(out) * in + out; }
std::size_t norm(int c) { return 2 * std::size_t(c); }
std::size_t res(int in, int out, int t) {
  return norm(in) + conv(in, out, 3) + linear(t, out) + norm(out) + conv(out, out, 3) + (in != out ? conv(in, out, 1) : 0);
}
std::size_t attn(int c) { return norm(c) + conv(c, 3 * c, 1) + conv(c, c, 1); }

// Parameter count of the U-Net described by `c`, walked level by level.
std::size_t expected_params(const DenoiserConfig& c) {
  const int b = c.base_channels;
  const int t = 4 * b;
  std::size_t total = linear(c.time_embed_dim, t) + linear(t, t) + conv(7, b, 3);
  std::vector<int> skips{b};
  int ch = b;
  for (int l = 0; l < c.levels(); ++l) {
    const int out = b * c.channel_mults[l];
    for (int k = 0; k < c.blocks_per_level; ++k) {
      total += res(ch, out, t) + (c.has_attention(l) ? attn(out) : 0);
      ch = out;
      skips.push_back(ch);
    }
    if (l + 1 < c.levels()) {
      total += conv(ch, ch, 3);
      skips.push_back(ch);
    }
  }
  total += 2 * res(ch, ch, t) + (c.mid_attention ? attn(ch) : 0);
  for (int l = c.levels() - 1; l >= 0; --l) {
    const int out = b * c.channel_mults[l];
    for (int k = 0; k <= c.blocks_per_level; ++k) {
      total += res(ch + skips.back(), out, t) + (c.has_attention(l) ? attn(out) : 0);
      skips.pop_back();
      ch = out;
    }
    if (l > 0) total += conv(ch, ch, 3);
  }
  return total + norm(b) + conv(b, 3, 3);
}

DenoiserConfig with_attention() {
  DenoiserConfig c = DenoiserConfig::toy();
  c.channel_mults = {1, 2, 2};
  c.attention_levels = {1};
  c.mid_attention = true;
  c.attention_heads = 2;
  c.blocks_per_level = 2;
  c.image_size = 8;
  return c;
}

}  // namespace

TEST_CASE("toy denoiser maps 7 channels to 3 at the input resolution") {
  const Denoiser<float> model(testing::tiny_config(16), 1);
  const Tensor<float> x = testing::gaussian_tensor<float>(2, 7, 16, 16, 2);
  const std::vector<int> t{10, 900};
  const Tensor<float> out = model.forward(x, t);
  CHECK(out.batch == 2);
  CHECK(out.channels == 3);
  CHECK(out.height == 16);
  CHECK(out.width == 16);
  CHECK(out.data.allFinite());
  CHECK_THROWS_AS(model.forward(testing::gaussian_tensor<float>(1, 6, 16, 16, 2), std::vector<int>{1}), ShapeError);
}

TEST_CASE("parameter count follows the architecture") {
  for (const DenoiserConfig& c : {DenoiserConfig::toy(), with_attention(), DenoiserConfig{}}) {
    const Denoiser<float> model(c, 0);
    CHECK(model.parameter_count() == expected_params(c));
    std::set<std::string> names;
    for (const auto* p : model.parameters()) names.insert(p->name);
    CHECK(names.size() == model.parameters().size());
  }
}

TEST_CASE("initialization and forward pass are seeded") {
  const DenoiserConfig c = testing::tiny_config(8);
  const Denoiser<float> a(c, 5);
  const Denoiser<float> b(c, 5);
  const Denoiser<float> other(c, 6);
  CHECK(checksum<float>(a.flat_parameters()) == checksum<float>(b.flat_parameters()));
  CHECK(checksum<float>(a.flat_parameters()) != checksum<float>(other.flat_parameters()));
  const Tensor<float> x = testing::gaussian_tensor<float>(1, 7, 8, 8, 3);
  const std::vector<int> t{321};
  CHECK(checksum(a.forward(x, t).data) == checksum(b.forward(x, t).data));

  // Float and double models built from one seed agree.
  const Denoiser<double> d(c, 5);
  CHECK(testing::max_abs_diff(a.forward(x, t).data, d.forward(x.cast<double>(), t).data) < 1e-4);
}

TEST_CASE("timestep changes the prediction and samples are independent") {
  const DenoiserConfig c = testing::tiny_config(8);
  const Denoiser<double> model(c, 9);
  const Tensor<double> x = testing::gaussian_tensor<double>(2, 7, 8, 8, 4);
  const Tensor<double> early = model.forward(x, std::vector<int>{1, 1});
  const Tensor<double> late = model.forward(x, std::vector<int>{999, 999});
  CHECK((early.data - late.data).norm() > 1e-3);

  const Tensor<double> mixed = model.forward(x, std::vector<int>{1, 999});
  const Tensor<double> second = model.forward(x.slice(1, 1), std::vector<int>{999});
  CHECK(testing::max_abs_diff(mixed.slice(0, 1).data, early.slice(0, 1).data) < 1e-12);
  CHECK(testing::max_abs_diff(mixed.slice(1, 1).data, second.data) < 1e-12);
  CHECK_THROWS_AS(model.forward(x, std::vector<int>{1}), ShapeError);
}

TEST_CASE("predict_noise concatenates noisy, line and reference") {
  const DenoiserConfig c = testing::tiny_config(8);
  const Denoiser<double> model(c, 2);
  const Tensor<double> noisy = testing::gaussian_tensor<double>(1, 3, 8, 8, 1);
  const Tensor<double> line = testing::gaussian_tensor<double>(1, 1, 8, 8, 2);
  const Tensor<double> ref = testing::gaussian_tensor<double>(1, 3, 8, 8, 3);
  const Tensor<double> stacked = concat_channels({&noisy, &line, &ref});
  CHECK(testing::max_abs_diff(model.predict_noise(line, ref, noisy, 40).data,
                              model.forward(stacked, std::vector<int>{40}).data) == 0.0);
}

TEST_CASE("float64 gradients match central differences and reach every parameter") {
  for (const DenoiserConfig& c : {testing::tiny_config(8), with_attention()}) {
    Denoiser<double> model(c, 17);
    const Tensor<double> x = testing::gaussian_tensor<double>(2, 7, c.image_size, c.image_size, 18);
    const Tensor<double> probe = testing::gaussian_tensor<double>(2, 3, c.image_size, c.image_size, 19);
    const std::vector<int> t{37, 640};
    auto loss = [&] { return model.forward(x, t).data.cwiseProduct(probe.data).sum(); };

    model.zero_grad();
    typename Denoiser<double>::Trace trace;
    model.forward(x, t, &trace);
    model.backward(probe, trace);

    auto params = model.parameters();
    for (const auto* p : params) {
      CAPTURE(p->name);
      CHECK(p->grad.norm() > 0.0);
    }

    Rng rng(23);
    for (int i = 0; i < 10; ++i) {
      auto* p = params[rng.index(params.size())];
      const auto j = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(p->value.size())));
      double& w = p->value.data()[j];
      const double saved = w;
      const double h = 1e-5;
      w = saved + h;
      const double up = loss();
      w = saved - h;
      const double down = loss();
      w = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[j];
      CAPTURE(p->name);
      CHECK(std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric) + std::abs(analytic)) < 1e-2);
    }
  }
}

TEST_CASE("invalid configurations are rejected") {
  auto rejects = [](auto mutate) {
    DenoiserConfig c = DenoiserConfig::toy();
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  rejects([](DenoiserConfig& c) { c.input_channels = 6; });
  rejects([](DenoiserConfig& c) { c.output_channels = 4; });
  rejects([](DenoiserConfig& c) { c.attention_levels = {0}; });
  rejects([](DenoiserConfig& c) { c.attention_levels = {2}; });
  rejects([](DenoiserConfig& c) {
    c.attention_levels = {1};
    c.attention_heads = 3;
  });
  rejects([](DenoiserConfig& c) { c.time_embed_dim = 31; });
  rejects([](DenoiserConfig& c) { c.image_size = 15; });
  rejects([](DenoiserConfig& c) { c.channel_mults = {}; });
  rejects([](DenoiserConfig& c) { c.blocks_per_level = 0; });
  CHECK_NOTHROW(DenoiserConfig::toy().validate());
  CHECK_NOTHROW(DenoiserConfig{}.validate());
  CHECK_THROWS_AS(Denoiser<float>([] {
                    DenoiserConfig c = DenoiserConfig::toy();
                    c.image_size = 15;
                    return c;
                  }(), 1),
                  ConfigError);
}
