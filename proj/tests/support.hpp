#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "animediff/denoiser.hpp"
#include "animediff/rng.hpp"
#include "animediff/tensor.hpp"

namespace testing {

using namespace animediff;

inline Tensor<float> uniform_image(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = static_cast<float>(rng.uniform());
  return t;
}

template <typename Scalar>
Tensor<Scalar> gaussian_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<Scalar>::randn(n, c, h, w, rng);
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  return (a.template cast<double>() - b.template cast<double>()).array().abs().maxCoeff();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("animediff_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// toy() resized; small enough for many forward passes.
inline DenoiserConfig tiny_config(int size = 16) {
  DenoiserConfig c = DenoiserConfig::toy();
  c.image_size = size;
  return c;
}

}  // namespace testing
