#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "animediff/denoiser.hpp"
#include "animediff/diffusion.hpp"
#include "animediff/lineart.hpp"
#include "animediff/warp.hpp"
#include "json.hpp"

namespace animediff {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string root = "data/prepared";  ///< prepared dataset folder (holds manifest.json)
  int image_size = 256;
  std::vector<double> sigma_choices{0.3, 0.4, 0.5};
  lineart::XDoGParams xdog{};  ///< sigma here is the inference value
  warp::TPSAugment tps{};
  bool cache_images = false;  ///< keep decoded training images in memory
};

struct ScheduleConfig {
  double beta_start = 1e-6;
  double beta_end = 1e-2;
  int steps = 1000;

  [[nodiscard]] diffusion::NoiseSchedule build() const {
    return diffusion::NoiseSchedule::linear(beta_start, beta_end, steps);
  }
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct PretrainConfig {
  int batch_size = 32;
  int epochs = 300;
  long max_steps = 0;  ///< stops early when > 0
  double lr = 1e-5;
  int loss_p = 2;
  double cond_dropout = 0.0;  ///< probability of blanking both conditions for a sample
  int checkpoint_every = 1000;
  int log_every = 10;
  std::uint64_t seed = 0;
};

/// Image the fine-tuning chain is seeded from by DDIM inversion.
enum class InversionSource {
  ground_truth,  ///< reconstruct I_gt from its own inversion
  reference,     ///< start from the inverted reference, as inference does
};

InversionSource parse_inversion_source(const std::string& name);
std::string to_string(InversionSource source);

struct FinetuneConfig {
  int batch_size = 4;
  int epochs = 1;
  double lr = 1e-5;
  int ddim_steps = 10;
  double eta = 0.0;
  int truncate_steps = 0;        ///< back-propagate through the last k reverse steps only; 0 = full chain
  bool warped_reference = true;  ///< condition on TPS-warped references, as in pre-training
  InversionSource invert_from = InversionSource::ground_truth;
  std::uint64_t seed = 1;
};

struct SamplerSection {
  int ddim_steps = 10;
  double eta = 0.0;
  double guidance_scale = 1.0;
  diffusion::DdpmNoiseScale ddpm_noise_scale = diffusion::DdpmNoiseScale::stddev;
};

struct ServiceConfig {
  std::string bind = "127.0.0.1:8080";
  int max_queue = 4;
  std::string checkpoint;
};

struct AppConfig {
  DataConfig data;
  DenoiserConfig model;
  ScheduleConfig schedule;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  SamplerSection sampler;
  ServiceConfig service;

  /// Validates cross-section invariants (positive sizes, eta = 0 for fine-tuning, ...).
  void validate() const;

  static AppConfig from_json(const Json& j);
  [[nodiscard]] Json to_json() const;

  /// Parses a JSON file; unknown keys are rejected.
  static AppConfig load(const std::filesystem::path& path);
};

/// Config file to use: the explicit flag if given, else $ANIMEDIFF_CONFIG, else none.
std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::string>& flag);

Json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const Json& j);
Json to_json(const ScheduleConfig& c);
ScheduleConfig schedule_config_from_json(const Json& j);
Json to_json(const lineart::XDoGParams& p);
lineart::XDoGParams xdog_params_from_json(const Json& j);

}  // namespace animediff
