#include "animediff/warp.hpp"

#include <Eigen/LU>

#include <string>

namespace animediff::warp {

void TPSWarp::validate() const {
  if (control_points.size() != displacements.size())
    throw ParameterError("tps: control point and displacement counts differ");
  if (control_points.size() < 3) throw ParameterError("tps: need at least 3 control points");
  if (!(regularization >= 0.0)) throw ParameterError("tps: regularization must be >= 0");
}

bool TPSWarp::is_identity() const {
  for (const auto& d : displacements)
    if (d.x() != 0.0 || d.y() != 0.0) return false;
  return true;
}

TPSWarp regular_grid(int grid_size) {
  if (grid_size < 2) throw ParameterError("tps: grid_size must be >= 2, got " + std::to_string(grid_size));
  TPSWarp warp;
  for (int j = 0; j < grid_size; ++j)
    for (int i = 0; i < grid_size; ++i)
      warp.control_points.emplace_back(double(i) / (grid_size - 1), double(j) / (grid_size - 1));
  warp.displacements.assign(warp.control_points.size(), Point::Zero());
  return warp;
}

TPSWarp sample_random_tps(int grid_size, double max_disp, Rng& rng, double regularization) {
  if (!(max_disp >= 0.0 && max_disp <= 0.5))
    throw ParameterError("tps: max_disp must lie in [0, 0.5], got " + std::to_string(max_disp));
  TPSWarp warp = regular_grid(grid_size);
  warp.regularization = regularization;
  if (max_disp == 0.0) return warp;
  for (auto& d : warp.displacements) {
    const double dx = rng.uniform(-max_disp, max_disp);
    const double dy = rng.uniform(-max_disp, max_disp);
    d = Point(dx, dy);
  }
  return warp;
}

TPSWarp sample_random_tps(int grid_size, double max_disp, std::uint64_t rng_seed, double regularization) {
  Rng rng(rng_seed);
  return sample_random_tps(grid_size, max_disp, rng, regularization);
}

ThinPlateSpline::ThinPlateSpline(const TPSWarp& warp) : centers_(warp.control_points) {
  warp.validate();
  const auto n = static_cast<Eigen::Index>(centers_.size());
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n + 3, n + 3);
  Eigen::MatrixX2d rhs = Eigen::MatrixX2d::Zero(n + 3, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) system(i, j) = kernel((centers_[i] - centers_[j]).norm());
    system(i, i) += warp.regularization;
    system(i, n) = 1.0;
    system(i, n + 1) = centers_[i].x();
    system(i, n + 2) = centers_[i].y();
    system(n, i) = 1.0;
    system(n + 1, i) = centers_[i].x();
    system(n + 2, i) = centers_[i].y();
    rhs.row(i) = warp.displacements[i].transpose();
  }
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible())
    throw InvalidWarpError("tps: singular system (control points collinear or duplicated)");
  const Eigen::MatrixX2d solution = lu.solve(rhs);
  radial_ = solution.topRows(n);
  affine_ = solution.bottomRows(3);
}

Point ThinPlateSpline::operator()(const Point& p) const {
  Point u = affine_.row(0).transpose() + p.x() * affine_.row(1).transpose() + p.y() * affine_.row(2).transpose();
  for (std::size_t i = 0; i < centers_.size(); ++i)
    u += kernel((p - centers_[i]).norm()) * radial_.row(static_cast<Eigen::Index>(i)).transpose();
  return p + u;
}

}  // namespace animediff::warp
