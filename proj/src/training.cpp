#include "animediff/training.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <sstream>

#include "animediff/lineart.hpp"
#include "animediff/metrics.hpp"
#include "animediff/warp.hpp"

namespace animediff::training {

using diffusion::NoiseSchedule;
using diffusion::SamplerConfig;

AugmentOptions AugmentOptions::from(const DataConfig& data, bool warp_reference) {
  AugmentOptions a;
  a.sigma_choices = data.sigma_choices;
  a.xdog = data.xdog;
  a.tps = data.tps;
  a.warp_reference = warp_reference;
  return a;
}

void make_triple(const Tensor<float>& color, const AugmentOptions& aug, Rng& rng, Tensor<float>& gt,
                 Tensor<float>& line, Tensor<float>& reference, double& sigma, warp::TPSWarp& tps) {
  if (aug.sigma_choices.empty()) throw ConfigError("augment: no sigma choices");
  gt = to_model_range(color);
  sigma = aug.sigma_choices[rng.index(aug.sigma_choices.size())];
  lineart::XDoGParams params = aug.xdog;
  params.sigma = sigma;
  line = to_model_range(lineart::extract_lines(color, params).to_tensor());
  tps = aug.warp_reference
            ? warp::sample_random_tps(aug.tps.grid_size, aug.tps.max_disp, rng, aug.tps.regularization)
            : warp::regular_grid(aug.tps.grid_size);
  reference = warp::apply_tps(gt, tps);
}

TrainBatch load_training_batch(const data::ImageDataset& dataset, std::span<const std::size_t> indices,
                               const AugmentOptions& aug, Rng& rng) {
  if (dataset.empty()) throw InputError("training batch: dataset is empty");
  if (indices.empty()) throw InputError("training batch: no indices");
  std::vector<Tensor<float>> gts;
  std::vector<Tensor<float>> lines;
  std::vector<Tensor<float>> refs;
  TrainBatch batch;
  for (std::size_t wanted : indices) {
    std::optional<Tensor<float>> color;
    std::size_t used = wanted;
    for (std::size_t attempt = 0; attempt < dataset.size() && !color; ++attempt) {
      used = (wanted + attempt) % dataset.size();
      color = dataset.load(used);
    }
    if (!color) throw InputError("training batch: no readable image in the dataset");
    Tensor<float> gt;
    Tensor<float> line;
    Tensor<float> ref;
    double sigma = 0.0;
    warp::TPSWarp tps;
    make_triple(*color, aug, rng, gt, line, ref, sigma, tps);
    gts.push_back(std::move(gt));
    lines.push_back(std::move(line));
    refs.push_back(std::move(ref));
    batch.sigmas.push_back(sigma);
    batch.warps.push_back(std::move(tps));
    batch.indices.push_back(used);
  }
  batch.ground_truth = stack_batch(gts);
  batch.line = stack_batch(lines);
  batch.reference = stack_batch(refs);
  return batch;
}

TrainBatch load_training_batch(const data::ImageDataset& dataset, int batch_size, const AugmentOptions& aug,
                               Rng& rng) {
  if (batch_size < 1) throw ParameterError("training batch: batch_size must be positive");
  if (dataset.empty()) throw InputError("training batch: dataset is empty");
  std::vector<std::size_t> indices(batch_size);
  for (auto& i : indices) i = rng.index(dataset.size());
  return load_training_batch(dataset, indices, aug, rng);
}

BatchSchedule::BatchSchedule(std::size_t dataset_size, int batch_size, Rng& rng)
    : size_(dataset_size), batch_size_(batch_size), rng_(&rng) {
  if (dataset_size == 0) throw InputError("batch schedule: dataset is empty");
  if (batch_size < 1) throw ParameterError("batch schedule: batch_size must be positive");
}

std::size_t BatchSchedule::batches_per_epoch() const { return (size_ + batch_size_ - 1) / batch_size_; }

std::vector<std::size_t> BatchSchedule::next() {
  if (order_.empty() || pos_ >= order_.size()) {
    order_.resize(size_);
    for (std::size_t i = 0; i < size_; ++i) order_[i] = i;
    rng_->shuffle(order_);
    pos_ = 0;
    ++epoch_;
  }
  const std::size_t end = std::min(order_.size(), pos_ + static_cast<std::size_t>(batch_size_));
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
  pos_ = end;
  return out;
}

NoisingDraw draw_noising(const Tensor<float>& ground_truth, const NoiseSchedule& schedule, Rng& rng) {
  NoisingDraw d;
  const int b = ground_truth.batch;
  d.timesteps.resize(b);
  for (int& t : d.timesteps) t = rng.integer(1, schedule.steps());
  d.eps = Tensor<float>::randn(b, ground_truth.channels, ground_truth.height, ground_truth.width, rng);
  d.noisy = Tensor<float>::zeros_like(ground_truth);
  for (int n = 0; n < b; ++n) {
    const double ab = schedule.alpha_bar(d.timesteps[n]);
    d.noisy.sample(n) = static_cast<float>(std::sqrt(ab)) * ground_truth.sample(n) +
                        static_cast<float>(std::sqrt(1.0 - ab)) * d.eps.sample(n);
  }
  return d;
}

double noise_prediction_loss(const Tensor<float>& eps, const Tensor<float>& prediction) {
  if (!eps.same_shape(prediction)) throw ShapeError("loss: prediction shape differs from the noise");
  return (eps.data.cast<double>() - prediction.data.cast<double>()).squaredNorm() / static_cast<double>(eps.size());
}

double pretrain_loss(const BatchPredictor& predictor, const TrainBatch& batch, const NoiseSchedule& schedule,
                     Rng& rng) {
  const NoisingDraw d = draw_noising(batch.ground_truth, schedule, rng);
  return noise_prediction_loss(d.eps, predictor(batch.line, batch.reference, d.noisy, d.timesteps));
}

namespace {

std::string describe_batch(const std::vector<int>& timesteps, const std::vector<std::size_t>& indices) {
  std::ostringstream os;
  os << "timesteps [";
  for (std::size_t i = 0; i < timesteps.size(); ++i) os << (i ? ", " : "") << timesteps[i];
  os << "], dataset indices [";
  for (std::size_t i = 0; i < indices.size(); ++i) os << (i ? ", " : "") << indices[i];
  os << "]";
  return os.str();
}

double mean_psnr(const Tensor<float>& generated, const Tensor<float>& gt) {
  double total = 0.0;
  for (int n = 0; n < gt.batch; ++n)
    total += metrics::psnr(to_unit_range(generated.slice(n, 1)), to_unit_range(gt.slice(n, 1)));
  return total / gt.batch;
}

}  // namespace

PretrainStepResult pretrain_step(Denoiser<float>& model, Adam<float>& optimizer, const TrainBatch& batch,
                                 const NoiseSchedule& schedule, Rng& rng, double cond_dropout) {
  if (batch.size() == 0) throw InputError("pretrain_step: empty batch");
  NoisingDraw d = draw_noising(batch.ground_truth, schedule, rng);
  Tensor<float> line = batch.line;
  Tensor<float> reference = batch.reference;
  if (cond_dropout > 0.0) {
    for (int n = 0; n < batch.size(); ++n)
      if (rng.uniform() < cond_dropout) {
        line.sample(n).setOnes();
        reference.sample(n).setZero();
      }
  }
  const Tensor<float> input = concat_channels({&d.noisy, &line, &reference});
  typename Denoiser<float>::Trace trace;
  const Tensor<float> pred = model.forward(input, d.timesteps, &trace);
  const double loss = noise_prediction_loss(d.eps, pred);
  if (!std::isfinite(loss))
    throw NumericalError("pretrain_step: non-finite loss at " + describe_batch(d.timesteps, batch.indices));

  Tensor<float> grad = Tensor<float>::zeros_like(pred);
  grad.data = (pred.data - d.eps.data) * static_cast<float>(2.0 / static_cast<double>(pred.size()));
  model.zero_grad();
  model.backward(grad, trace);
  optimizer.step();
  return {loss, std::move(d.timesteps)};
}

Tensor<float> reconstruct(const diffusion::NoisePredictor<float>& predictor, const TrainBatch& batch,
                          const SamplerConfig& sampler, const NoiseSchedule& schedule, InversionSource source) {
  const auto cond = batch.condition();
  const Tensor<float>& start = source == InversionSource::reference ? batch.reference : batch.ground_truth;
  const Tensor<float> top = diffusion::ddim_invert(start, sampler, predictor, cond, schedule);
  Rng unused(0);
  return diffusion::ddim_sample(top, SamplerConfig{sampler.times, 0.0}, predictor, cond, schedule, unused);
}

FinetuneStepResult finetune_step(Denoiser<float>& model, Adam<float>& optimizer, const TrainBatch& batch,
                                 const SamplerConfig& sampler, const NoiseSchedule& schedule, int truncate_steps,
                                 InversionSource source) {
  if (batch.size() == 0) throw InputError("finetune_step: empty batch");
  if (sampler.eta != 0.0) throw ConfigError("finetune_step: the reverse chain must be deterministic (eta = 0)");
  sampler.validate(schedule.steps());
  const auto ladder = sampler.ladder();
  const auto predictor = model.predictor();
  const auto cond = batch.condition();

  Tensor<float> x = source == InversionSource::reference ? batch.reference : batch.ground_truth;
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i)
    x = diffusion::ddim_forward_step(x, ladder[i], ladder[i + 1], predictor, cond, schedule);

  // states[i] is the chain at ladder[i]; the reverse pass fills it top-down.
  std::vector<Tensor<float>> states(ladder.size());
  states.back() = x;
  const Tensor<float> no_noise;
  for (std::size_t i = ladder.size() - 1; i > 0; --i)
    states[i - 1] = diffusion::ddim_reverse_step(states[i], ladder[i], ladder[i - 1], predictor, cond, 0.0, no_noise,
                                                 schedule);

  const Tensor<float>& generated = states.front();
  const double loss = noise_prediction_loss(batch.ground_truth, generated);
  if (!std::isfinite(loss))
    throw NumericalError("finetune_step: non-finite reconstruction loss at ladder " +
                         describe_batch(ladder, batch.indices));

  Tensor<float> g = Tensor<float>::zeros_like(generated);
  g.data = (generated.data - batch.ground_truth.data) * static_cast<float>(2.0 / static_cast<double>(generated.size()));
  model.zero_grad();
  const std::size_t steps = ladder.size() - 1;
  const std::size_t depth = truncate_steps > 0 ? std::min<std::size_t>(steps, truncate_steps) : steps;
  for (std::size_t i = 1; i <= depth; ++i) {
    const auto c = diffusion::ddim_coefficients(schedule, ladder[i], ladder[i - 1]);
    const std::vector<int> ts(batch.size(), ladder[i]);
    typename Denoiser<float>::Trace trace;
    const Tensor<float> input = concat_channels({&states[i], &cond.line, &cond.reference});
    model.forward(input, ts, &trace);
    Tensor<float> grad_eps = g;
    grad_eps.data *= static_cast<float>(c.eps_coef);
    const Tensor<float> grad_in = model.backward(grad_eps, trace);
    g.data = static_cast<float>(c.x_coef) * g.data + grad_in.data.topRows(3);
  }
  optimizer.step();
  return {loss, mean_psnr(generated, batch.ground_truth), generated};
}

TrainingLog::TrainingLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw InputError("training log: cannot open " + path.string());
}

void TrainingLog::write(long step, const std::string& stage, double loss, double lr, double wallclock) {
  if (!out_.is_open()) return;
  const Json j{{"step", step}, {"stage", stage}, {"loss", loss}, {"lr", lr}, {"wallclock", wallclock}};
  out_ << j.dump() << '\n';
  out_.flush();
}

PretrainReport run_pretrain(Denoiser<float>& model, Adam<float>& optimizer, const data::ImageDataset& dataset,
                            const NoiseSchedule& schedule, const PretrainConfig& config, const AugmentOptions& aug,
                            Rng& rng, long start_step, TrainingLog* log, const CheckpointHook& hook) {
  BatchSchedule batches(dataset.size(), config.batch_size, rng);
  const long total = config.max_steps > 0 ? config.max_steps
                                          : static_cast<long>(config.epochs) * static_cast<long>(batches.batches_per_epoch());
  const auto t0 = std::chrono::steady_clock::now();
  PretrainReport report;
  report.steps = start_step;
  double window = 0.0;
  int window_n = 0;
  for (long step = start_step; step < total; ++step) {
    const auto indices = batches.next();
    const TrainBatch batch = load_training_batch(dataset, indices, aug, rng);
    const auto r = pretrain_step(model, optimizer, batch, schedule, rng, config.cond_dropout);
    report.losses.push_back(r.loss);
    report.steps = step + 1;
    window += r.loss;
    ++window_n;
    const bool last = step + 1 == total;
    if (config.log_every > 0 && ((step + 1) % config.log_every == 0 || last)) {
      const double mean = window / window_n;
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (log) log->write(step + 1, "pretrain", mean, optimizer.options().lr, elapsed);
      spdlog::info("pretrain step {}/{} loss {:.5f}", step + 1, total, mean);
      report.final_loss = mean;
      window = 0.0;
      window_n = 0;
    }
    if (hook && (last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0)))
      hook(step + 1, model, optimizer, rng);
  }
  if (window_n > 0) report.final_loss = window / window_n;
  return report;
}

FinetuneReport finetune_epochs(Denoiser<float>& model, Adam<float>& optimizer, const data::ImageDataset& dataset,
                               const NoiseSchedule& schedule, const SamplerConfig& sampler,
                               const FinetuneConfig& config, const AugmentOptions& aug, Rng& rng, TrainingLog* log) {
  AugmentOptions a = aug;
  a.warp_reference = config.warped_reference;
  BatchSchedule batches(dataset.size(), config.batch_size, rng);
  const long total = static_cast<long>(config.epochs) * static_cast<long>(batches.batches_per_epoch());
  const auto t0 = std::chrono::steady_clock::now();
  FinetuneReport report;
  double loss_sum = 0.0;
  double psnr_sum = 0.0;
  long images = 0;
  for (long step = 0; step < total; ++step) {
    const auto indices = batches.next();
    const TrainBatch batch = load_training_batch(dataset, indices, a, rng);
    const auto r =
        finetune_step(model, optimizer, batch, sampler, schedule, config.truncate_steps, config.invert_from);
    loss_sum += r.loss * batch.size();
    psnr_sum += r.psnr * batch.size();
    images += batch.size();
    report.steps = step + 1;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) log->write(step + 1, "finetune", r.loss, optimizer.options().lr, elapsed);
    spdlog::info("finetune step {}/{} loss {:.5f} psnr {:.2f}", step + 1, total, r.loss, r.psnr);
  }
  if (images > 0) {
    report.mean_loss = loss_sum / images;
    report.mean_psnr = psnr_sum / images;
  }
  return report;
}

}  // namespace animediff::training
