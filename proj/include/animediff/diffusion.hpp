#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::diffusion {

/// Variance schedule beta_1..beta_T and its cumulative products.
///
/// Timesteps are 1-based for beta and alpha; alpha_bar additionally defines
/// alpha_bar(0) = 1 so that t = 0 means "no noise". Everything is kept in
/// double precision and cast to the working scalar at the point of use.
class NoiseSchedule {
 public:
  /// betas linearly spaced from beta_start to beta_end inclusive.
  static NoiseSchedule linear(double beta_start, double beta_end, int steps);

  /// Arbitrary betas, each in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas);

  [[nodiscard]] int steps() const { return static_cast<int>(betas_.size()); }
  [[nodiscard]] double beta_start() const { return betas_.front(); }
  [[nodiscard]] double beta_end() const { return betas_.back(); }

  [[nodiscard]] double beta(int t) const;
  [[nodiscard]] double alpha(int t) const { return 1.0 - beta(t); }
  /// Product of (1 - beta_i) for i <= t; t in [0, T].
  [[nodiscard]] double alpha_bar(int t) const;
  /// Posterior variance ((1 - abar_{t-1}) / (1 - abar_t)) beta_t.
  [[nodiscard]] double posterior_variance(int t) const;

  [[nodiscard]] const std::vector<double>& betas() const { return betas_; }
  [[nodiscard]] const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  explicit NoiseSchedule(std::vector<double> betas);
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;  // index t, alpha_bars_[0] = 1
};

/// Uniformly strided sub-sequence of [0, T): i * floor((T-1)/(n-1)).
/// A single step yields {T-1}.
std::vector<int> make_subsequence(int steps, int n_steps);

/// DDIM time ladder and stochasticity.
struct SamplerConfig {
  std::vector<int> times;  ///< strictly increasing, in [0, T)
  double eta = 0.0;

  static SamplerConfig uniform(int schedule_steps, int n_steps, double eta = 0.0) {
    return SamplerConfig{make_subsequence(schedule_steps, n_steps), eta};
  }

  /// Throws ConfigError if the ladder is empty, unsorted or outside [0, T), or eta is outside [0, 1].
  void validate(int schedule_steps) const;

  /// `times` with a leading 0 when absent; consecutive entries are the DDIM step pairs.
  [[nodiscard]] std::vector<int> ladder() const;
};

/// DDIM sampling std between two ladder points: sqrt((1-abar_lo)/(1-abar_hi) (1 - abar_hi/abar_lo)).
/// Reduces to the posterior std when t_lo = t_hi - 1.
double ddim_sigma(const NoiseSchedule& schedule, int t_hi, int t_lo);

/// Scale applied to the fresh noise in ddpm_reverse_step.
enum class DdpmNoiseScale {
  variance,  ///< sigma_t^2 * eps, literal transcription of the ancestral step
  stddev,    ///< sigma_t * eps, standard ancestral sampling
};

DdpmNoiseScale parse_noise_scale(const std::string& name);
std::string to_string(DdpmNoiseScale scale);

/// Conditioning images fed alongside the noisy sample.
template <typename Scalar>
struct Condition {
  Tensor<Scalar> line;       ///< Bx1xHxW
  Tensor<Scalar> reference;  ///< Bx3xHxW
};

/// eps_theta(line, reference, noisy, t) -> predicted noise shaped like `noisy`.
template <typename Scalar>
using NoisePredictor = std::function<Tensor<Scalar>(const Tensor<Scalar>& line, const Tensor<Scalar>& reference,
                                                    const Tensor<Scalar>& noisy, int t)>;

namespace detail {

inline void check_time(const NoiseSchedule& s, int t, int lo, const char* what) {
  if (t < lo || t > s.steps())
    throw ParameterError(std::string(what) + ": timestep " + std::to_string(t) + " outside [" +
                         std::to_string(lo) + ", " + std::to_string(s.steps()) + "]");
}

template <typename Scalar>
void check_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": tensor shapes differ");
}

template <typename Scalar>
Tensor<Scalar> combine(double a, const Tensor<Scalar>& x, double b, const Tensor<Scalar>& y) {
  Tensor<Scalar> out = Tensor<Scalar>::zeros_like(x);
  out.data = static_cast<Scalar>(a) * x.data + static_cast<Scalar>(b) * y.data;
  return out;
}

}  // namespace detail

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t in [0, T].
template <typename Scalar>
Tensor<Scalar> forward_diffuse(const Tensor<Scalar>& x0, int t, const Tensor<Scalar>& eps,
                               const NoiseSchedule& schedule) {
  detail::check_time(schedule, t, 0, "forward_diffuse");
  detail::check_same(x0, eps, "forward_diffuse");
  const double ab = schedule.alpha_bar(t);
  return detail::combine(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// One Markov noising step with an explicit beta: sqrt(1 - beta) x + sqrt(beta) eps.
template <typename Scalar>
Tensor<Scalar> single_forward_step(const Tensor<Scalar>& prev, double beta, const Tensor<Scalar>& eps) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("single_forward_step: beta outside [0, 1]");
  detail::check_same(prev, eps, "single_forward_step");
  return detail::combine(std::sqrt(1.0 - beta), prev, std::sqrt(beta), eps);
}

template <typename Scalar>
Tensor<Scalar> single_forward_step(const Tensor<Scalar>& prev, int t, const Tensor<Scalar>& eps,
                                   const NoiseSchedule& schedule) {
  detail::check_time(schedule, t, 1, "single_forward_step");
  return single_forward_step(prev, schedule.beta(t), eps);
}

/// (x_t - sqrt(1 - abar_t) n_pred) / sqrt(abar_t).
template <typename Scalar>
Tensor<Scalar> estimate_x0(const Tensor<Scalar>& noisy, int t, const Tensor<Scalar>& n_pred,
                           const NoiseSchedule& schedule) {
  detail::check_time(schedule, t, 0, "estimate_x0");
  detail::check_same(noisy, n_pred, "estimate_x0");
  const double ab = schedule.alpha_bar(t);
  if (!(ab > 0.0)) throw NumericalError("estimate_x0: alpha_bar is zero");
  const double inv = 1.0 / std::sqrt(ab);
  return detail::combine(inv, noisy, -inv * std::sqrt(1.0 - ab), n_pred);
}

/// Coefficients of the reverse-process mean on (x0_est, x_t).
inline std::pair<double, double> posterior_mean_coefficients(const NoiseSchedule& s, int t) {
  detail::check_time(s, t, 1, "posterior_mean");
  const double ab = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t - 1);
  const double denom = 1.0 - ab;
  return {std::sqrt(ab_prev) * s.beta(t) / denom, (1.0 - ab_prev) * std::sqrt(s.alpha(t)) / denom};
}

template <typename Scalar>
Tensor<Scalar> posterior_mean(const Tensor<Scalar>& noisy, const Tensor<Scalar>& x0_est, int t,
                              const NoiseSchedule& schedule) {
  detail::check_same(noisy, x0_est, "posterior_mean");
  const auto [c_x0, c_xt] = posterior_mean_coefficients(schedule, t);
  return detail::combine(c_x0, x0_est, c_xt, noisy);
}

/// Ancestral step t -> t-1: posterior mean plus scaled fresh noise.
template <typename Scalar>
Tensor<Scalar> ddpm_reverse_step(const Tensor<Scalar>& noisy, int t, const NoisePredictor<Scalar>& predictor,
                                 const Condition<Scalar>& cond, const Tensor<Scalar>& eps,
                                 const NoiseSchedule& schedule,
                                 DdpmNoiseScale scale = DdpmNoiseScale::stddev) {
  detail::check_time(schedule, t, 1, "ddpm_reverse_step");
  const Tensor<Scalar> n_pred = predictor(cond.line, cond.reference, noisy, t);
  const Tensor<Scalar> mean = posterior_mean(noisy, estimate_x0(noisy, t, n_pred, schedule), t, schedule);
  const double var = schedule.posterior_variance(t);
  const double k = scale == DdpmNoiseScale::variance ? var : std::sqrt(var);
  return detail::combine(1.0, mean, k, eps);
}

/// For eta = 0 the reverse DDIM step is affine in (x, eps_theta):
/// x_lo = x_coef * x + eps_coef * eps_theta(x, t_hi).
struct DdimCoefficients {
  double x_coef;
  double eps_coef;
};

inline DdimCoefficients ddim_coefficients(const NoiseSchedule& s, int t_hi, int t_lo) {
  const double ab_hi = s.alpha_bar(t_hi);
  const double ab_lo = s.alpha_bar(t_lo);
  const double r = std::sqrt(ab_lo / ab_hi);
  return {r, std::sqrt(1.0 - ab_lo) - r * std::sqrt(1.0 - ab_hi)};
}

/// Non-Markov DDIM step t_hi -> t_lo:
/// sqrt(abar_lo) x0_est + sqrt(1 - abar_lo - eta^2 sigma^2) eps_theta + eta sigma eps.
template <typename Scalar>
Tensor<Scalar> ddim_reverse_step(const Tensor<Scalar>& noisy, int t_hi, int t_lo,
                                 const NoisePredictor<Scalar>& predictor, const Condition<Scalar>& cond,
                                 double eta, const Tensor<Scalar>& eps, const NoiseSchedule& schedule) {
  if (!(t_hi > t_lo && t_lo >= 0)) throw ParameterError("ddim_reverse_step: need t_hi > t_lo >= 0");
  detail::check_time(schedule, t_hi, 1, "ddim_reverse_step");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ParameterError("ddim_reverse_step: eta outside [0, 1]");
  const Tensor<Scalar> n_pred = predictor(cond.line, cond.reference, noisy, t_hi);
  detail::check_same(noisy, n_pred, "ddim_reverse_step");
  const Tensor<Scalar> x0 = estimate_x0(noisy, t_hi, n_pred, schedule);
  const double ab_lo = schedule.alpha_bar(t_lo);
  const double sigma = eta > 0.0 ? ddim_sigma(schedule, t_hi, t_lo) : 0.0;
  const double radicand = 1.0 - ab_lo - eta * eta * sigma * sigma;
  if (radicand < 0.0) throw ConfigError("ddim_reverse_step: eta too large for this step pair");
  Tensor<Scalar> out = detail::combine(std::sqrt(ab_lo), x0, std::sqrt(radicand), n_pred);
  if (eta > 0.0) {
    detail::check_same(noisy, eps, "ddim_reverse_step");
    out.data += static_cast<Scalar>(eta * sigma) * eps.data;
  }
  return out;
}

/// Deterministic inversion step t_lo -> t_hi:
/// sqrt(abar_hi) x0_est(x_lo) + sqrt(1 - abar_hi) eps_theta(x_lo, t_lo).
template <typename Scalar>
Tensor<Scalar> ddim_forward_step(const Tensor<Scalar>& noisy, int t_lo, int t_hi,
                                 const NoisePredictor<Scalar>& predictor, const Condition<Scalar>& cond,
                                 const NoiseSchedule& schedule) {
  if (!(t_hi > t_lo && t_lo >= 0)) throw ParameterError("ddim_forward_step: need t_hi > t_lo >= 0");
  detail::check_time(schedule, t_hi, 1, "ddim_forward_step");
  const Tensor<Scalar> n_pred = predictor(cond.line, cond.reference, noisy, t_lo);
  detail::check_same(noisy, n_pred, "ddim_forward_step");
  const Tensor<Scalar> x0 = estimate_x0(noisy, t_lo, n_pred, schedule);
  const double ab_hi = schedule.alpha_bar(t_hi);
  return detail::combine(std::sqrt(ab_hi), x0, std::sqrt(1.0 - ab_hi), n_pred);
}

/// Walk `start` (a clean image at t = 0) up the whole ladder with ddim_forward_step.
template <typename Scalar>
Tensor<Scalar> ddim_invert(const Tensor<Scalar>& start, const SamplerConfig& sampler,
                           const NoisePredictor<Scalar>& predictor, const Condition<Scalar>& cond,
                           const NoiseSchedule& schedule) {
  sampler.validate(schedule.steps());
  const auto ladder = sampler.ladder();
  Tensor<Scalar> x = start;
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i)
    x = ddim_forward_step(x, ladder[i], ladder[i + 1], predictor, cond, schedule);
  return x;
}

/// Reverse DDIM from the top of the ladder down to t = 0. Fresh noise is drawn
/// from `rng` only when eta > 0.
template <typename Scalar>
Tensor<Scalar> ddim_sample(const Tensor<Scalar>& top, const SamplerConfig& sampler,
                           const NoisePredictor<Scalar>& predictor, const Condition<Scalar>& cond,
                           const NoiseSchedule& schedule, Rng& rng) {
  sampler.validate(schedule.steps());
  const auto ladder = sampler.ladder();
  Tensor<Scalar> x = top;
  Tensor<Scalar> eps = Tensor<Scalar>::zeros_like(top);
  for (std::size_t i = ladder.size() - 1; i > 0; --i) {
    if (sampler.eta > 0.0) eps = Tensor<Scalar>::randn(top.batch, top.channels, top.height, top.width, rng);
    x = ddim_reverse_step(x, ladder[i], ladder[i - 1], predictor, cond, sampler.eta, eps, schedule);
  }
  return x;
}

}  // namespace animediff::diffusion
