#include "animediff/diffusion.hpp"

#include <string>

namespace animediff::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  alpha_bars_.resize(betas_.size() + 1);
  alpha_bars_[0] = 1.0;
  for (std::size_t t = 1; t <= betas_.size(); ++t) alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - betas_[t - 1]);
}

NoiseSchedule NoiseSchedule::linear(double beta_start, double beta_end, int steps) {
  if (steps < 1) throw ParameterError("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("build_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < steps; ++i)
      betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
    betas.back() = beta_end;
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ParameterError("schedule: no betas");
  for (double b : betas)
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("schedule: every beta must lie in (0, 1)");
  return NoiseSchedule(std::move(betas));
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > steps()) throw ParameterError("schedule: beta index " + std::to_string(t) + " outside [1, T]");
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps())
    throw ParameterError("schedule: alpha_bar index " + std::to_string(t) + " outside [0, T]");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::posterior_variance(int t) const {
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

std::vector<int> make_subsequence(int steps, int n_steps) {
  if (steps < 1) throw ParameterError("make_subsequence: T must be >= 1");
  if (n_steps < 1 || n_steps > steps)
    throw ParameterError("make_subsequence: n_steps must lie in [1, T], got " + std::to_string(n_steps));
  if (n_steps == 1) return {steps - 1};
  const int stride = (steps - 1) / (n_steps - 1);
  std::vector<int> times(static_cast<std::size_t>(n_steps));
  for (int i = 0; i < n_steps; ++i) times[i] = i * stride;
  return times;
}

void SamplerConfig::validate(int schedule_steps) const {
  if (times.empty()) throw ConfigError("sampler: empty time sequence");
  if (times.front() < 0 || times.back() >= schedule_steps)
    throw ConfigError("sampler: times must lie in [0, T)");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] <= times[i - 1]) throw ConfigError("sampler: times must be strictly increasing");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("sampler: eta must lie in [0, 1]");
}

std::vector<int> SamplerConfig::ladder() const {
  std::vector<int> out;
  out.reserve(times.size() + 1);
  if (times.empty() || times.front() != 0) out.push_back(0);
  out.insert(out.end(), times.begin(), times.end());
  return out;
}

double ddim_sigma(const NoiseSchedule& schedule, int t_hi, int t_lo) {
  const double ab_hi = schedule.alpha_bar(t_hi);
  const double ab_lo = schedule.alpha_bar(t_lo);
  return std::sqrt((1.0 - ab_lo) / (1.0 - ab_hi) * (1.0 - ab_hi / ab_lo));
}

DdpmNoiseScale parse_noise_scale(const std::string& name) {
  if (name == "variance") return DdpmNoiseScale::variance;
  if (name == "stddev") return DdpmNoiseScale::stddev;
  throw ConfigError("unknown ddpm_noise_scale '" + name + "' (expected variance or stddev)");
}

std::string to_string(DdpmNoiseScale scale) {
  return scale == DdpmNoiseScale::variance ? "variance" : "stddev";
}

}  // namespace animediff::diffusion
