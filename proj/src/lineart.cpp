#include "animediff/lineart.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace animediff::lineart {

void XDoGParams::validate() const {
  if (!(sigma > 0.0)) throw ParameterError("xdog: sigma must be > 0, got " + std::to_string(sigma));
  if (!(k > 1.0)) throw ParameterError("xdog: k must be > 1, got " + std::to_string(k));
  if (!(p >= 0.0)) throw ParameterError("xdog: p must be >= 0, got " + std::to_string(p));
  if (!(phi > 0.0)) throw ParameterError("xdog: phi must be > 0, got " + std::to_string(phi));
  if (!std::isfinite(epsilon)) throw ParameterError("xdog: epsilon must be finite");
}

Tensor<float> LineDrawing::to_tensor() const {
  Tensor<float> t(1, 1, height(), width());
  t.set_plane(0, 0, pixels);
  return t;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("gaussian_kernel: sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    taps[i + radius] = v;
    total += v;
  }
  for (double& v : taps) v /= total;
  return taps;
}

Plane<double> gaussian_blur(const Plane<double>& image, double sigma) {
  if (image.size() == 0) throw ShapeError("gaussian_blur: empty image");
  const auto taps = gaussian_kernel(sigma);
  const int radius = static_cast<int>(taps.size() / 2);
  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());

  Plane<double> horizontal(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += taps[d + radius] * image(y, reflect_index(x + d, w));
      horizontal(y, x) = acc;
    }
  }
  Plane<double> out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d)
        acc += taps[d + radius] * horizontal(reflect_index(y + d, h), x);
      out(y, x) = acc;
    }
  }
  return out;
}

Plane<double> luminance(const Tensor<float>& image) {
  if (image.empty()) throw ShapeError("luminance: empty image");
  if (image.batch != 1) throw ShapeError("luminance: expected a single image");
  if (image.channels == 1) return image.plane(0, 0).cast<double>();
  if (image.channels != 3) throw ShapeError("luminance: expected 1 or 3 channels");
  return 0.299 * image.plane(0, 0).cast<double>() + 0.587 * image.plane(0, 1).cast<double>() +
         0.114 * image.plane(0, 2).cast<double>();
}

Plane<double> xdog_response(const Plane<double>& image, const XDoGParams& params) {
  params.validate();
  if (image.size() == 0) throw ShapeError("xdog_response: empty image");
  const Plane<double> narrow = gaussian_blur(image, params.sigma);
  const Plane<double> wide = gaussian_blur(image, params.k * params.sigma);
  return (1.0 + params.p) * narrow - params.p * wide;
}

Plane<double> xdog_threshold(const Plane<double>& response, double phi, double epsilon) {
  return response.unaryExpr([phi, epsilon](double u) {
    const double v = u >= epsilon ? 1.0 : 1.0 + std::tanh(phi * (u - epsilon));
    return std::clamp(v, 0.0, 1.0);
  });
}

LineDrawing extract_lines(const Tensor<float>& image, const XDoGParams& params) {
  const Plane<double> response = xdog_response(luminance(image), params);
  return LineDrawing{xdog_threshold(response, params.phi, params.epsilon).cast<float>()};
}

XDoGSearchGrid XDoGSearchGrid::standard() {
  XDoGSearchGrid grid;
  // Integer numerators keep grid points such as 4.5 exact.
  for (int i = 11; i <= 100; ++i) grid.k_values.push_back(i / 10.0);
  for (int i = 0; i <= 40; ++i) grid.p_values.push_back(i / 2.0);
  return grid;
}

XDoGFit fit_xdog_params(const std::vector<XDoGPair>& pairs, const XDoGSearchGrid& grid,
                        const XDoGParams& fixed) {
  if (pairs.empty()) throw InputError("fit_xdog_params: no image pairs");
  if (grid.k_values.empty() || grid.p_values.empty())
    throw InputError("fit_xdog_params: empty search space");
  XDoGParams probe = fixed;
  probe.k = 2.0;
  probe.validate();
  for (double k : grid.k_values)
    if (!(k > 1.0)) throw ParameterError("fit_xdog_params: grid k must be > 1");
  for (double p : grid.p_values)
    if (!(p >= 0.0)) throw ParameterError("fit_xdog_params: grid p must be >= 0");

  struct Prepared {
    Plane<double> luma;
    Plane<double> narrow;
    Plane<double> target;
  };
  std::vector<Prepared> prepared;
  prepared.reserve(pairs.size());
  for (const auto& pair : pairs) {
    Prepared item;
    item.luma = luminance(pair.color);
    if (item.luma.rows() != pair.hand_drawn.height() || item.luma.cols() != pair.hand_drawn.width())
      throw ShapeError("fit_xdog_params: color and hand-drawn sizes differ");
    item.narrow = gaussian_blur(item.luma, fixed.sigma);
    item.target = pair.hand_drawn.pixels.cast<double>();
    prepared.push_back(std::move(item));
  }

  // loss[ki][pi], accumulated pair by pair; G_sigma is shared by every k.
  std::vector<std::vector<double>> loss(grid.k_values.size(),
                                        std::vector<double>(grid.p_values.size(), 0.0));
  for (const auto& item : prepared) {
    for (std::size_t ki = 0; ki < grid.k_values.size(); ++ki) {
      const Plane<double> wide = gaussian_blur(item.luma, grid.k_values[ki] * fixed.sigma);
      for (std::size_t pi = 0; pi < grid.p_values.size(); ++pi) {
        const double p = grid.p_values[pi];
        const Plane<double> response = (1.0 + p) * item.narrow - p * wide;
        const Plane<double> lines = xdog_threshold(response, fixed.phi, fixed.epsilon);
        loss[ki][pi] += (lines - item.target).square().sum();
      }
    }
  }

  XDoGFit best;
  best.loss = std::numeric_limits<double>::infinity();
  bool found = false;
  for (std::size_t ki = 0; ki < grid.k_values.size(); ++ki) {
    for (std::size_t pi = 0; pi < grid.p_values.size(); ++pi) {
      const double k = grid.k_values[ki];
      const double p = grid.p_values[pi];
      const double l = loss[ki][pi];
      const bool better = !found || l < best.loss ||
                          (l == best.loss && (k < best.k || (k == best.k && p < best.p)));
      if (better) {
        best = XDoGFit{k, p, l};
        found = true;
      }
    }
  }
  return best;
}

}  // namespace animediff::lineart
