#pragma once

#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::lineart {

/// Parameters of the extended difference-of-Gaussians extractor.
struct XDoGParams {
  double sigma = 0.4;     ///< std of the narrow Gaussian, pixels
  double k = 4.5;         ///< ratio between the wide and narrow std
  double p = 9.0;         ///< edge emphasis
  double phi = 1e9;       ///< sharpness of the soft threshold
  double epsilon = 0.01;  ///< threshold level in normalized luminance

  /// Throws ParameterError unless sigma > 0, k > 1, p >= 0 and phi > 0.
  void validate() const;
};

/// Single-channel line image in [0, 1]; 1 is paper white.
struct LineDrawing {
  Plane<float> pixels;

  [[nodiscard]] int height() const { return static_cast<int>(pixels.rows()); }
  [[nodiscard]] int width() const { return static_cast<int>(pixels.cols()); }

  /// 1x1xHxW tensor holding the [0, 1] values.
  [[nodiscard]] Tensor<float> to_tensor() const;
};

/// Reflect-101 index into [0, n) (mirror without repeating the edge pixel).
int reflect_index(int i, int n);

/// Normalized 1-D Gaussian taps, radius ceil(4 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur with reflect-101 borders.
Plane<double> gaussian_blur(const Plane<double>& image, double sigma);

/// Rec.601 luma of a 1x3xHxW [0, 1] tensor. Single-channel input passes through.
Plane<double> luminance(const Tensor<float>& image);

/// (1 + p) G_sigma(x) - p G_{k sigma}(x).
Plane<double> xdog_response(const Plane<double>& image, const XDoGParams& params);

/// Soft step: 1 where u >= epsilon, else 1 + tanh(phi (u - epsilon)), clamped to [0, 1].
Plane<double> xdog_threshold(const Plane<double>& response, double phi, double epsilon);

/// Color (or gray) [0, 1] image to an XDoG line drawing.
LineDrawing extract_lines(const Tensor<float>& image, const XDoGParams& params);

/// Candidate values for the (k, p) grid search.
struct XDoGSearchGrid {
  std::vector<double> k_values;
  std::vector<double> p_values;

  /// k in [1.1, 10] step 0.1, p in [0, 20] step 0.5.
  static XDoGSearchGrid standard();
};

struct XDoGPair {
  Tensor<float> color;
  LineDrawing hand_drawn;
};

struct XDoGFit {
  double k = 0.0;
  double p = 0.0;
  double loss = 0.0;  ///< summed squared error at the chosen point
};

/// Exhaustive search for the (k, p) whose extracted lines best match the
/// hand-drawn targets in summed squared error. sigma, phi and epsilon come from
/// `fixed`. Ties go to the smallest k, then the smallest p.
XDoGFit fit_xdog_params(const std::vector<XDoGPair>& pairs, const XDoGSearchGrid& grid,
                        const XDoGParams& fixed);

}  // namespace animediff::lineart
