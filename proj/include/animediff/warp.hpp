#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

#include "animediff/rng.hpp"
#include "animediff/tensor.hpp"

namespace animediff::warp {

using Point = Eigen::Vector2d;

/// Control points in normalized [0,1]^2 image coordinates plus their displacements.
struct TPSWarp {
  std::vector<Point> control_points;
  std::vector<Point> displacements;
  double regularization = 0.0;

  /// Throws ParameterError on size mismatch, fewer than 3 points or negative regularization.
  void validate() const;
  [[nodiscard]] bool is_identity() const;
};

/// Augmentation defaults used when loading training data.
struct TPSAugment {
  int grid_size = 4;
  double max_disp = 0.08;
  double regularization = 1e-6;
};

/// grid_size x grid_size regular grid over [0,1]^2 with zero displacement.
TPSWarp regular_grid(int grid_size);

/// Regular grid with i.i.d. uniform displacements in [-max_disp, max_disp]^2.
TPSWarp sample_random_tps(int grid_size, double max_disp, std::uint64_t rng_seed,
                          double regularization = 1e-6);
TPSWarp sample_random_tps(int grid_size, double max_disp, Rng& rng, double regularization = 1e-6);

/// Fitted thin-plate spline f(p) = p + u(p), where u interpolates the
/// displacements with the r^2 log r radial basis plus an affine part.
class ThinPlateSpline {
 public:
  explicit ThinPlateSpline(const TPSWarp& warp);

  [[nodiscard]] Point operator()(const Point& p) const;

  static double kernel(double r) { return r > 0.0 ? r * r * std::log(r) : 0.0; }

 private:
  std::vector<Point> centers_;
  Eigen::MatrixX2d radial_;  // one row per control point
  Eigen::Matrix<double, 3, 2> affine_;
};

/// Backward warp: output pixel p samples the input at f(p) bilinearly,
/// replicating the border. The output keeps the input shape.
template <typename Scalar>
Tensor<Scalar> apply_tps(const Tensor<Scalar>& image, const TPSWarp& warp) {
  if (image.empty()) throw ShapeError("apply_tps: empty image");
  warp.validate();
  if (warp.is_identity()) return image;

  const ThinPlateSpline tps(warp);
  const int h = image.height;
  const int w = image.width;
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(image);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Point target = tps(Point((x + 0.5) / w, (y + 0.5) / h));
      const double sx = std::clamp(target.x() * w - 0.5, 0.0, double(w - 1));
      const double sy = std::clamp(target.y() * h - 0.5, 0.0, double(h - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const Scalar fx = static_cast<Scalar>(sx - x0);
      const Scalar fy = static_cast<Scalar>(sy - y0);
      for (int n = 0; n < image.batch; ++n) {
        const auto c00 = image.data.col(image.column(n, y0, x0));
        const auto c01 = image.data.col(image.column(n, y0, x1));
        const auto c10 = image.data.col(image.column(n, y1, x0));
        const auto c11 = image.data.col(image.column(n, y1, x1));
        out.data.col(out.column(n, y, x)) =
            (Scalar(1) - fy) * ((Scalar(1) - fx) * c00 + fx * c01) + fy * ((Scalar(1) - fx) * c10 + fx * c11);
      }
    }
  }
  return out;
}

}  // namespace animediff::warp
