#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "animediff/checkpoint.hpp"
#include "animediff/datapipe.hpp"
#include "animediff/metrics.hpp"

namespace animediff {

struct ColorizeOptions {
  std::optional<int> ddim_steps;     ///< overrides the stored ladder with a uniform one
  std::optional<std::uint64_t> seed; ///< only used when eta > 0
  bool restyle_line = true;          ///< run the line input through the XDoG extractor first
  double guidance_scale = 1.0;       ///< 1 = plain conditional prediction
};

struct ColorizeResult {
  Tensor<float> image;             ///< 1x3xSxS in [0, 1]
  std::vector<unsigned char> png;
  double elapsed_ms = 0.0;
  std::string checkpoint_hash;
  int steps = 0;
};

/// Read-only inference wrapper around a checkpoint. The chain is seeded by
/// deterministic DDIM inversion of the reference and then run backwards with
/// eta = 0, so equal inputs give equal outputs. Safe to share across threads.
class Colorizer {
 public:
  explicit Colorizer(const Checkpoint& checkpoint);

  /// Arbitrary-size [0, 1] inputs: the line may be gray or color.
  [[nodiscard]] ColorizeResult colorize(const Tensor<float>& line_image, const Tensor<float>& reference_image,
                                        const ColorizeOptions& options = {}) const;

  /// Batched model-range core: line Bx1xSxS, reference Bx3xSxS, returns Bx3xSxS model range.
  [[nodiscard]] Tensor<float> generate(const Tensor<float>& line, const Tensor<float>& reference,
                                       const diffusion::SamplerConfig& sampler, Rng& rng,
                                       double guidance_scale = 1.0) const;

  /// Same on [0, 1] inputs already at model size (no re-styling).
  [[nodiscard]] Tensor<float> generate_unit(const Tensor<float>& line_unit, const Tensor<float>& reference_unit) const;

  [[nodiscard]] diffusion::SamplerConfig sampler_for(std::optional<int> ddim_steps) const;
  [[nodiscard]] int image_size() const { return model_->config().image_size; }
  [[nodiscard]] const std::string& checkpoint_hash() const { return hash_; }
  [[nodiscard]] Stage stage() const { return stage_; }
  [[nodiscard]] const Denoiser<float>& model() const { return *model_; }

 private:
  std::shared_ptr<const Denoiser<float>> model_;
  diffusion::NoiseSchedule schedule_;
  diffusion::SamplerConfig sampler_;
  lineart::XDoGParams xdog_;
  std::string hash_;
  Stage stage_;
};

/// Batched colorizer on [0, 1] images: (lines Bx1, references Bx3) -> Bx3.
using BatchColorizeFn = std::function<Tensor<float>(const Tensor<float>& lines, const Tensor<float>& references)>;

struct EvalOptions {
  metrics::Protocol protocol = metrics::Protocol::self_reference;
  std::uint64_t seed = 0;
  lineart::XDoGParams xdog{};
  warp::TPSAugment tps{};
  const metrics::FeatureExtractor* features = nullptr;  ///< random projection when null
  int batch_size = 8;
};

/// Self-reference: lines from each ground truth, references are TPS-distorted
/// ground truths, outputs scored by PSNR and MS-SSIM against the undistorted
/// ground truth. Random-reference: references are the ground truths under a
/// seeded permutation and FID compares outputs with the reference set.
metrics::EvalReport evaluate(const BatchColorizeFn& colorize, const data::ImageDataset& images,
                             const EvalOptions& options);

metrics::EvalReport evaluate(const Colorizer& colorizer, const data::ImageDataset& images, const EvalOptions& options);

}  // namespace animediff
