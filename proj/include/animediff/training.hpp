#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "animediff/config.hpp"
#include "animediff/datapipe.hpp"
#include "animediff/denoiser.hpp"
#include "animediff/diffusion.hpp"
#include "animediff/optim.hpp"

namespace animediff::training {

/// How training triples are built from a color image.
struct AugmentOptions {
  std::vector<double> sigma_choices{0.3, 0.4, 0.5};
  lineart::XDoGParams xdog{};  ///< sigma is replaced by the per-sample draw
  warp::TPSAugment tps{};
  bool warp_reference = true;

  static AugmentOptions from(const DataConfig& data, bool warp_reference = true);
};

/// A batch of training triples in model range [-1, 1].
struct TrainBatch {
  Tensor<float> ground_truth;  ///< Bx3xHxW
  Tensor<float> line;          ///< Bx1xHxW, white = 1
  Tensor<float> reference;     ///< Bx3xHxW
  std::vector<double> sigmas;
  std::vector<warp::TPSWarp> warps;
  std::vector<std::size_t> indices;  ///< dataset indices

  [[nodiscard]] int size() const { return ground_truth.batch; }
  [[nodiscard]] diffusion::Condition<float> condition() const { return {line, reference}; }
};

/// Builds one triple from a [0, 1] color image.
void make_triple(const Tensor<float>& color, const AugmentOptions& aug, Rng& rng, Tensor<float>& gt,
                 Tensor<float>& line, Tensor<float>& reference, double& sigma, warp::TPSWarp& tps);

/// Loads the given dataset indices. Unreadable images are skipped with a
/// warning and replaced by the next readable index (cyclically); throws
/// InputError when no index can be read.
TrainBatch load_training_batch(const data::ImageDataset& dataset, std::span<const std::size_t> indices,
                               const AugmentOptions& aug, Rng& rng);

/// Draws batch_size indices uniformly with replacement.
TrainBatch load_training_batch(const data::ImageDataset& dataset, int batch_size, const AugmentOptions& aug, Rng& rng);

/// Epoch-ordered index stream: a fresh seeded permutation per epoch, cut into batches.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t dataset_size, int batch_size, Rng& rng);
  /// Next batch of indices; the last batch of an epoch may be short.
  std::vector<std::size_t> next();
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] std::size_t batches_per_epoch() const;

 private:
  std::size_t size_;
  int batch_size_;
  Rng* rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  int epoch_ = -1;
};

/// Noise predictor over a batch with one timestep per sample.
using BatchPredictor = std::function<Tensor<float>(const Tensor<float>& line, const Tensor<float>& reference,
                                                   const Tensor<float>& noisy, std::span<const int> t)>;

/// Timesteps in [1, T] and unit Gaussian noise for one batch, with the noised images.
struct NoisingDraw {
  std::vector<int> timesteps;
  Tensor<float> eps;
  Tensor<float> noisy;
};

NoisingDraw draw_noising(const Tensor<float>& ground_truth, const diffusion::NoiseSchedule& schedule, Rng& rng);

/// Mean over all elements of (eps - prediction)^2.
double noise_prediction_loss(const Tensor<float>& eps, const Tensor<float>& prediction);

/// Loss of an arbitrary predictor on one batch; no parameter update.
double pretrain_loss(const BatchPredictor& predictor, const TrainBatch& batch, const diffusion::NoiseSchedule& schedule,
                     Rng& rng);

struct PretrainStepResult {
  double loss = 0.0;
  std::vector<int> timesteps;
};

/// One noise-prediction update. With cond_dropout > 0 each sample's line and
/// reference are blanked (line white, reference zero) with that probability.
/// Throws NumericalError naming timesteps and dataset indices on a non-finite loss.
PretrainStepResult pretrain_step(Denoiser<float>& model, Adam<float>& optimizer, const TrainBatch& batch,
                                 const diffusion::NoiseSchedule& schedule, Rng& rng, double cond_dropout = 0.0);

struct FinetuneStepResult {
  double loss = 0.0;       ///< mean squared reconstruction error, model range
  double psnr = 0.0;       ///< mean per-image PSNR on [0, 1] images
  Tensor<float> generated; ///< model range
};

/// Deterministic reconstruction of `batch.ground_truth` through the ladder:
/// inversion of the chosen source with ddim_forward_step, then the eta = 0 reverse chain.
Tensor<float> reconstruct(const diffusion::NoisePredictor<float>& predictor, const TrainBatch& batch,
                          const diffusion::SamplerConfig& sampler, const diffusion::NoiseSchedule& schedule,
                          InversionSource source = InversionSource::ground_truth);

/// One reconstruction fine-tuning update. The inversion runs without
/// gradients; the reverse chain is differentiated step by step with the
/// network re-run at each state (activation recomputation). truncate_steps > 0
/// limits back-propagation to the last k reverse steps.
FinetuneStepResult finetune_step(Denoiser<float>& model, Adam<float>& optimizer, const TrainBatch& batch,
                                 const diffusion::SamplerConfig& sampler, const diffusion::NoiseSchedule& schedule,
                                 int truncate_steps = 0, InversionSource source = InversionSource::ground_truth);

/// JSON-lines record {step, stage, loss, lr, wallclock}.
class TrainingLog {
 public:
  TrainingLog() = default;
  explicit TrainingLog(const std::filesystem::path& path, bool append = false);
  void write(long step, const std::string& stage, double loss, double lr, double wallclock);
  [[nodiscard]] bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
};

struct PretrainReport {
  long steps = 0;
  double final_loss = 0.0;  ///< mean of the last logging window
  std::vector<double> losses;
};

/// Called with (step, model, optimizer, data rng) every checkpoint_every steps and at the end.
using CheckpointHook = std::function<void(long step, const Denoiser<float>&, const Adam<float>&, const Rng&)>;

/// Noise-prediction pre-training for `config.epochs` epochs (or max_steps when > 0),
/// continuing from `start_step`.
PretrainReport run_pretrain(Denoiser<float>& model, Adam<float>& optimizer, const data::ImageDataset& dataset,
                            const diffusion::NoiseSchedule& schedule, const PretrainConfig& config,
                            const AugmentOptions& aug, Rng& rng, long start_step = 0, TrainingLog* log = nullptr,
                            const CheckpointHook& hook = {});

struct FinetuneReport {
  long steps = 0;
  double mean_loss = 0.0;
  double mean_psnr = 0.0;
};

/// Reconstruction fine-tuning over whole epochs with the fixed ladder `sampler`.
FinetuneReport finetune_epochs(Denoiser<float>& model, Adam<float>& optimizer, const data::ImageDataset& dataset,
                               const diffusion::NoiseSchedule& schedule, const diffusion::SamplerConfig& sampler,
                               const FinetuneConfig& config, const AugmentOptions& aug, Rng& rng,
                               TrainingLog* log = nullptr);

}  // namespace animediff::training
