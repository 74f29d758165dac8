#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "animediff/nn/layers.hpp"

namespace animediff {

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. Moment buffers follow the list order, so
/// the same model layout must be used when restoring state.
template <typename Scalar>
class Adam {
 public:
  Adam(nn::ParameterList<Scalar> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto* p : params_) {
      first_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      second_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(options_.beta1);
    const auto b2 = static_cast<Scalar>(options_.beta2);
    const auto step_size = static_cast<Scalar>(options_.lr / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto eps = static_cast<Scalar>(options_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * p.grad;
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step_size * first_[i].array() / ((second_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  [[nodiscard]] const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  [[nodiscard]] std::uint64_t steps() const { return steps_; }

  // State access for checkpointing.
  [[nodiscard]] const std::vector<Matrix<Scalar>>& first_moments() const { return first_; }
  [[nodiscard]] const std::vector<Matrix<Scalar>>& second_moments() const { return second_; }
  void restore(std::uint64_t steps, std::vector<Matrix<Scalar>> first, std::vector<Matrix<Scalar>> second) {
    if (first.size() != params_.size() || second.size() != params_.size())
      throw FormatError("adam: optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (first[i].rows() != params_[i]->value.rows() || first[i].cols() != params_[i]->value.cols() ||
          second[i].rows() != params_[i]->value.rows() || second[i].cols() != params_[i]->value.cols())
        throw FormatError("adam: moment shape mismatch for " + params_[i]->name);
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  nn::ParameterList<Scalar> params_;
  AdamOptions options_;
  std::vector<Matrix<Scalar>> first_;
  std::vector<Matrix<Scalar>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace animediff
