#include "animediff/colorize.hpp"

#include <spdlog/spdlog.h>

#include <chrono>

#include "animediff/image_io.hpp"
#include "animediff/lineart.hpp"
#include "animediff/warp.hpp"

namespace animediff {

Colorizer::Colorizer(const Checkpoint& checkpoint)
    : model_(checkpoint.build_model()),
      schedule_(checkpoint.schedule.build()),
      sampler_(checkpoint.sampler),
      xdog_(checkpoint.xdog),
      hash_(checkpoint.hash),
      stage_(checkpoint.stage) {
  sampler_.validate(schedule_.steps());
  if (stage_ == Stage::pretrained)
    spdlog::warn("colorize: checkpoint is only pre-trained; expect dim colors until it is fine-tuned");
}

diffusion::SamplerConfig Colorizer::sampler_for(std::optional<int> ddim_steps) const {
  if (!ddim_steps) return sampler_;
  if (*ddim_steps < 1 || *ddim_steps > schedule_.steps())
    throw ParameterError("colorize: steps must be in [1, " + std::to_string(schedule_.steps()) + "]");
  return diffusion::SamplerConfig::uniform(schedule_.steps(), *ddim_steps, sampler_.eta);
}

Tensor<float> Colorizer::generate(const Tensor<float>& line, const Tensor<float>& reference,
                                  const diffusion::SamplerConfig& sampler, Rng& rng, double guidance_scale) const {
  const int s = image_size();
  if (line.channels != 1 || reference.channels != 3 || line.batch != reference.batch || line.height != s ||
      line.width != s || reference.height != s || reference.width != s)
    throw InputError("colorize: expected Bx1x" + std::to_string(s) + "x" + std::to_string(s) + " lines and Bx3 references");
  diffusion::NoisePredictor<float> predictor = model_->predictor();
  if (guidance_scale != 1.0) {
    const auto* model = model_.get();
    predictor = [model, guidance_scale](const Tensor<float>& l, const Tensor<float>& r, const Tensor<float>& x, int t) {
      const Tensor<float> cond = model->predict_noise(l, r, x, t);
      const Tensor<float> blank_line = Tensor<float>::constant(l.batch, 1, l.height, l.width, 1.0f);
      const Tensor<float> blank_ref = Tensor<float>::zeros_like(r);
      Tensor<float> out = model->predict_noise(blank_line, blank_ref, x, t);
      out.data += static_cast<float>(guidance_scale) * (cond.data - out.data);
      return out;
    };
  }
  const diffusion::Condition<float> cond{line, reference};
  const Tensor<float> top = diffusion::ddim_invert(reference, sampler, predictor, cond, schedule_);
  return diffusion::ddim_sample(top, sampler, predictor, cond, schedule_, rng);
}

Tensor<float> Colorizer::generate_unit(const Tensor<float>& line_unit, const Tensor<float>& reference_unit) const {
  Rng rng(0);
  return to_unit_range(generate(to_model_range(line_unit), to_model_range(reference_unit), sampler_, rng));
}

ColorizeResult Colorizer::colorize(const Tensor<float>& line_image, const Tensor<float>& reference_image,
                                   const ColorizeOptions& options) const {
  const auto t0 = std::chrono::steady_clock::now();
  if (line_image.empty() || reference_image.empty()) throw InputError("colorize: empty input image");
  if (line_image.batch != 1 || reference_image.batch != 1) throw InputError("colorize: expected single images");
  if (reference_image.channels != 3) throw InputError("colorize: reference must be RGB");
  const int s = image_size();

  const Tensor<float> line_sized = io::resize_center_crop(line_image, s);
  Tensor<float> line_unit;
  if (options.restyle_line) {
    line_unit = lineart::extract_lines(line_sized, xdog_).to_tensor();
  } else {
    line_unit = Tensor<float>(1, 1, s, s);
    line_unit.set_plane(0, 0, lineart::luminance(line_sized).cast<float>());
  }
  const Tensor<float> ref_unit = io::resize_center_crop(reference_image, s);

  const auto sampler = sampler_for(options.ddim_steps);
  Rng rng(options.seed.value_or(0));
  ColorizeResult result;
  result.image = to_unit_range(
      generate(to_model_range(line_unit), to_model_range(ref_unit), sampler, rng, options.guidance_scale));
  result.png = io::encode_png(result.image);
  result.checkpoint_hash = hash_;
  result.steps = static_cast<int>(sampler.times.size());
  result.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

metrics::EvalReport evaluate(const BatchColorizeFn& colorize, const data::ImageDataset& images,
                             const EvalOptions& options) {
  if (images.empty()) throw InputError("evaluate: no images");
  if (options.batch_size < 1) throw ParameterError("evaluate: batch_size must be positive");
  std::vector<Tensor<float>> gts;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (auto img = images.load(i)) gts.push_back(std::move(*img));
  if (gts.empty()) throw InputError("evaluate: no readable images");
  const std::size_t n = gts.size();

  Rng rng(options.seed);
  std::vector<Tensor<float>> lines(n);
  std::vector<Tensor<float>> refs(n);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  if (options.protocol == metrics::Protocol::random_reference) rng.shuffle(perm);
  for (std::size_t i = 0; i < n; ++i) {
    lines[i] = lineart::extract_lines(gts[i], options.xdog).to_tensor();
    if (options.protocol == metrics::Protocol::self_reference) {
      const auto tps = warp::sample_random_tps(options.tps.grid_size, options.tps.max_disp, rng,
                                               options.tps.regularization);
      refs[i] = warp::apply_tps(gts[i], tps);
    } else {
      refs[i] = gts[perm[i]];
    }
  }

  std::vector<Tensor<float>> outputs;
  for (std::size_t first = 0; first < n; first += options.batch_size) {
    const std::size_t count = std::min<std::size_t>(options.batch_size, n - first);
    const std::vector<Tensor<float>> l(lines.begin() + first, lines.begin() + first + count);
    const std::vector<Tensor<float>> r(refs.begin() + first, refs.begin() + first + count);
    const Tensor<float> out = colorize(stack_batch(l), stack_batch(r));
    if (out.batch != static_cast<int>(count) || out.channels != 3 || out.height != gts[first].height ||
        out.width != gts[first].width)
      throw ShapeError("evaluate: colorizer returned the wrong shape");
    for (std::size_t k = 0; k < count; ++k) outputs.push_back(out.slice(static_cast<int>(k), 1));
  }

  metrics::EvalReport report;
  report.protocol = options.protocol;
  report.n_images = static_cast<int>(n);
  if (options.protocol == metrics::Protocol::self_reference) {
    double p = 0.0;
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p += metrics::psnr(outputs[i], gts[i]);
      m += metrics::ms_ssim(outputs[i], gts[i]);
    }
    report.psnr_mean = p / n;
    report.msssim_mean = m / n;
  } else {
    const metrics::RandomProjectionFeatures fallback;
    report.fid = metrics::fid(outputs, refs, options.features ? *options.features : fallback);
  }
  return report;
}

metrics::EvalReport evaluate(const Colorizer& colorizer, const data::ImageDataset& images, const EvalOptions& options) {
  return evaluate(
      [&colorizer](const Tensor<float>& lines, const Tensor<float>& refs) {
        return colorizer.generate_unit(lines, refs);
      },
      images, options);
}

}  // namespace animediff
