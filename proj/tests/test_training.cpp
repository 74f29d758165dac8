#include "animediff/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "animediff/checkpoint.hpp"
#include "animediff/synthetic.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace animediff;
using namespace animediff::training;

namespace {

data::ImageDataset characters(int count, int size) {
  return data::ImageDataset::from_images(synth::character_set(count, size));
}

TrainBatch batch_of(int count, int size, std::uint64_t seed, bool warp = true) {
  AugmentOptions aug;
  aug.warp_reference = warp;
  Rng rng(seed);
  std::vector<std::size_t> idx(count);
  for (int i = 0; i < count; ++i) idx[i] = std::size_t(i);
  return load_training_batch(characters(count, size), idx, aug, rng);
}

const diffusion::NoiseSchedule& schedule() {
  static const auto s = ScheduleConfig{}.build();
  return s;
}

// Predicts exactly the noise that maps `noisy` back onto `target` at step t.
diffusion::NoisePredictor<float> oracle_for(const Tensor<float>& target) {
  return [target](const Tensor<float>&, const Tensor<float>&, const Tensor<float>& noisy, int t) {
    Tensor<float> eps = Tensor<float>::zeros_like(noisy);
    if (t == 0) return eps;
    const double ab = schedule().alpha_bar(t);
    eps.data = ((noisy.data - float(std::sqrt(ab)) * target.data) / float(std::sqrt(1.0 - ab))).eval();
    return eps;
  };
}

Adam<float> frozen(Denoiser<float>& model) { return Adam<float>(model.parameters(), AdamOptions{0.0}); }

}  // namespace

TEST_CASE("training triples have the expected shapes and ranges") {
  const TrainBatch b = batch_of(3, 24, 1);
  CHECK(b.size() == 3);
  CHECK(b.ground_truth.channels == 3);
  CHECK(b.line.channels == 1);
  CHECK(b.reference.channels == 3);
  CHECK(b.line.height == 24);
  for (const auto* t : {&b.ground_truth, &b.line, &b.reference}) {
    CHECK(t->data.minCoeff() >= -1.0f);
    CHECK(t->data.maxCoeff() <= 1.0f);
  }
  CHECK(b.line.data.minCoeff() == -1.0f);  // ink present
  CHECK(b.line.data.maxCoeff() == 1.0f);   // paper white
  CHECK(b.reference.data != b.ground_truth.data);
  CHECK(b.warps.size() == 3);

  const TrainBatch plain = batch_of(2, 24, 1, false);
  CHECK(plain.reference.data == plain.ground_truth.data);
}

TEST_CASE("batches are seeded and warps are drawn per sample") {
  const auto dataset = characters(32, 16);
  AugmentOptions aug;
  Rng a(7);
  Rng b(7);
  const TrainBatch first = load_training_batch(dataset, 32, aug, a);
  const TrainBatch second = load_training_batch(dataset, 32, aug, b);
  CHECK(first.indices == second.indices);
  CHECK(first.reference.data == second.reference.data);
  CHECK(first.line.data == second.line.data);
  std::set<std::vector<double>> distinct;
  for (const auto& w : first.warps) {
    std::vector<double> flat;
    for (const auto& d : w.displacements) flat.insert(flat.end(), {d.x(), d.y()});
    distinct.insert(flat);
  }
  CHECK(distinct.size() == 32);
}

TEST_CASE("line sigma is drawn uniformly from the configured choices") {
  const auto color = synth::character(16, 4);
  AugmentOptions aug;
  aug.warp_reference = false;
  Rng rng(5);
  std::map<double, int> counts;
  const int n = 3000;
  for (int i = 0; i < n; ++i) {
    Tensor<float> gt, line, ref;
    double sigma = 0;
    warp::TPSWarp w;
    make_triple(color, aug, rng, gt, line, ref, sigma, w);
    ++counts[sigma];
  }
  REQUIRE(counts.size() == 3);
  for (double s : {0.3, 0.4, 0.5}) CHECK(std::abs(counts[s] / double(n) - 1.0 / 3.0) < 0.03);
}

TEST_CASE("loss of a zero predictor is the noise variance and of an oracle is zero") {
  const TrainBatch b = batch_of(4, 32, 2);
  Rng rng(3);
  const BatchPredictor zero = [](const Tensor<float>&, const Tensor<float>&, const Tensor<float>& noisy,
                                 std::span<const int>) { return Tensor<float>::zeros_like(noisy); };
  CHECK(std::abs(pretrain_loss(zero, b, schedule(), rng) - 1.0) < 0.05);

  const BatchPredictor oracle = [&](const Tensor<float>&, const Tensor<float>&, const Tensor<float>& noisy,
                                    std::span<const int> t) {
    Tensor<float> eps = Tensor<float>::zeros_like(noisy);
    for (int n = 0; n < noisy.batch; ++n) {
      const double ab = schedule().alpha_bar(t[n]);
      eps.sample(n) = (noisy.sample(n) - float(std::sqrt(ab)) * b.ground_truth.sample(n)) / float(std::sqrt(1 - ab));
    }
    return eps;
  };
  CHECK(pretrain_loss(oracle, b, schedule(), rng) < 1e-6);

  Rng draws(4);
  for (int i = 0; i < 50; ++i)
    for (int t : draw_noising(b.ground_truth, schedule(), draws).timesteps) {
      CHECK(t >= 1);
      CHECK(t <= 1000);
    }
}

TEST_CASE("a zero learning rate leaves the weights untouched") {
  Denoiser<float> model(testing::tiny_config(16), 1);
  const Vector<float> before = model.flat_parameters();
  Adam<float> adam = frozen(model);
  Rng rng(2);
  const auto r = pretrain_step(model, adam, batch_of(2, 16, 3), schedule(), rng);
  CHECK(std::isfinite(r.loss));
  CHECK(model.flat_parameters() == before);
  bool any_grad = false;
  for (const auto* p : model.parameters()) any_grad |= p->grad.norm() > 0;
  CHECK(any_grad);

  Adam<float> live(model.parameters(), AdamOptions{1e-4});
  pretrain_step(model, live, batch_of(2, 16, 3), schedule(), rng);
  CHECK(model.flat_parameters() != before);
}

TEST_CASE("pre-training reduces the loss on a small set") {
  Denoiser<float> model(testing::tiny_config(16), 4);
  Adam<float> adam(model.parameters(), AdamOptions{1e-3});
  PretrainConfig config;
  config.batch_size = 8;  // whole set per step, so window means differ by training, not by the draw of t
  config.max_steps = 500;
  config.log_every = 0;
  Rng rng(5);
  const auto report = run_pretrain(model, adam, characters(8, 16), schedule(), config, AugmentOptions{}, rng);
  REQUIRE(report.losses.size() == 500);
  double previous = 1e9;
  for (int w = 0; w < 5; ++w) {
    double mean = 0;
    for (int i = 0; i < 100; ++i) mean += report.losses[w * 100 + i] / 100;
    CAPTURE(w);
    CHECK(mean < previous);
    previous = mean;
  }
  double early = 0;
  double late = 0;
  for (int i = 0; i < 10; ++i) {
    early += report.losses[i] / 10;
    late += report.losses[490 + i] / 10;
  }
  CHECK(late < early);
}

TEST_CASE("reconstruction with an oracle predictor returns the ground truth") {
  const TrainBatch b = batch_of(2, 16, 6);
  for (int steps : {1, 5, 10}) {
    const auto sampler = diffusion::SamplerConfig::uniform(1000, steps);
    const Tensor<float> out = reconstruct(oracle_for(b.ground_truth), b, sampler, schedule());
    CHECK(testing::max_abs_diff(out.data, b.ground_truth.data) < 1e-4);
  }
}

TEST_CASE("fine-tuning gradient matches finite differences through the reverse chain") {
  DenoiserConfig c = testing::tiny_config(8);
  Denoiser<float> model(c, 8);
  Adam<float> adam = frozen(model);
  const TrainBatch b = batch_of(1, 8, 9);
  const auto sampler = diffusion::SamplerConfig::uniform(1000, 3);
  const Vector<float> before = model.flat_parameters();
  const auto r = finetune_step(model, adam, b, sampler, schedule());
  CHECK(model.flat_parameters() == before);

  // The inversion is treated as a constant, so hold its output fixed.
  const Tensor<float> top = diffusion::ddim_invert(b.ground_truth, sampler, model.predictor(), b.condition(), schedule());
  auto loss = [&] {
    Rng unused(0);
    const Tensor<float> out = diffusion::ddim_sample(top, sampler, model.predictor(), b.condition(), schedule(), unused);
    return noise_prediction_loss(b.ground_truth, out);
  };
  CHECK(loss() == doctest::Approx(r.loss).epsilon(1e-6));

  // The ten largest gradient entries, where float differences are well resolved.
  std::vector<std::pair<float, std::pair<nn::Parameter<float>*, Eigen::Index>>> ranked;
  for (auto* p : model.parameters())
    for (Eigen::Index i = 0; i < p->value.size(); ++i) ranked.push_back({std::abs(p->grad.data()[i]), {p, i}});
  std::partial_sort(ranked.begin(), ranked.begin() + 10, ranked.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; k < 10; ++k) {
    auto [p, i] = ranked[k].second;
    float& w = p->value.data()[i];
    const float saved = w;
    const float h = 1e-2f * std::max(1.0f, std::abs(saved));
    w = saved + h;
    const double up = loss();
    w = saved - h;
    const double down = loss();
    w = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p->grad.data()[i];
    CAPTURE(p->name);
    CHECK(std::abs(numeric - analytic) / std::abs(analytic) < 5e-2);
  }
}

TEST_CASE("truncated back-propagation keeps only the last reverse steps") {
  Denoiser<float> model(testing::tiny_config(8), 10);
  Adam<float> adam = frozen(model);
  const TrainBatch b = batch_of(2, 8, 11);
  const auto sampler = diffusion::SamplerConfig::uniform(1000, 4);
  finetune_step(model, adam, b, sampler, schedule(), 0);
  const Vector<float> full = [&] {
    std::vector<float> g;
    for (const auto* p : model.parameters()) g.insert(g.end(), p->grad.data(), p->grad.data() + p->grad.size());
    return Eigen::Map<const Vector<float>>(g.data(), Eigen::Index(g.size())).eval();
  }();
  finetune_step(model, adam, b, sampler, schedule(), 1);
  double diff = 0;
  Eigen::Index offset = 0;
  for (const auto* p : model.parameters()) {
    diff += (p->grad.reshaped() - full.segment(offset, p->grad.size())).squaredNorm();
    offset += p->grad.size();
  }
  CHECK(diff > 0.0);
  CHECK_THROWS_AS(finetune_step(model, adam, b, diffusion::SamplerConfig::uniform(1000, 4, 0.5), schedule()),
                  ConfigError);
}

TEST_CASE("inverting the reference changes the starting point of the chain") {
  Denoiser<float> model(testing::tiny_config(8), 12);
  const TrainBatch b = batch_of(1, 8, 13);
  const auto sampler = diffusion::SamplerConfig::uniform(1000, 3);
  const Tensor<float> from_gt = reconstruct(model.predictor(), b, sampler, schedule(), InversionSource::ground_truth);
  const Tensor<float> from_ref = reconstruct(model.predictor(), b, sampler, schedule(), InversionSource::reference);
  CHECK(from_gt.data != from_ref.data);
  Adam<float> adam = frozen(model);
  const auto r = finetune_step(model, adam, b, sampler, schedule(), 0, InversionSource::reference);
  CHECK(testing::max_abs_diff(r.generated.data, from_ref.data) < 1e-6);
}

TEST_CASE("non-finite losses raise a numerical error naming the batch") {
  Denoiser<float> model(testing::tiny_config(8), 14);
  model.parameters().back()->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  Adam<float> adam = frozen(model);
  const TrainBatch b = batch_of(2, 8, 15);
  Rng rng(1);
  try {
    pretrain_step(model, adam, b, schedule(), rng);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("timestep") != std::string::npos);
  }
  CHECK_THROWS_AS(finetune_step(model, adam, b, diffusion::SamplerConfig::uniform(1000, 2), schedule()),
                  NumericalError);
}

TEST_CASE("resuming at an epoch boundary reproduces an uninterrupted run") {
  const auto dataset = characters(4, 16);
  const DenoiserConfig c = testing::tiny_config(16);
  PretrainConfig config;
  config.batch_size = 2;
  config.log_every = 0;
  config.max_steps = 4;

  Denoiser<float> straight(c, 20);
  Adam<float> adam_a(straight.parameters(), AdamOptions{1e-3});
  Rng rng_a(21);
  run_pretrain(straight, adam_a, dataset, schedule(), config, AugmentOptions{}, rng_a);

  // Stop after one epoch (two batches), persist, restore into fresh objects, continue.
  const auto dir = testing::scratch_dir("resume");
  {
    Denoiser<float> first(c, 20);
    Adam<float> adam(first.parameters(), AdamOptions{1e-3});
    Rng rng(21);
    PretrainConfig half = config;
    half.max_steps = 2;
    run_pretrain(first, adam, dataset, schedule(), half, AugmentOptions{}, rng);
    Checkpoint ck = Checkpoint::capture(first, ScheduleConfig{}, diffusion::SamplerConfig::uniform(1000, 10),
                                        lineart::XDoGParams{}, Stage::pretrained);
    ck.capture_optimizer(adam);
    ck.step = 2;
    ck.rng_state = rng.state();
    ck.save(dir / "half.ckpt");
  }
  const Checkpoint ck = Checkpoint::load(dir / "half.ckpt");
  auto resumed = ck.build_model();
  Adam<float> adam_b(resumed->parameters(), AdamOptions{1e-3});
  ck.restore_optimizer(adam_b);
  Rng rng_b(0);
  rng_b.set_state(ck.rng_state);
  run_pretrain(*resumed, adam_b, dataset, schedule(), config, AugmentOptions{}, rng_b, ck.step);
  CHECK(resumed->flat_parameters() == straight.flat_parameters());
}

TEST_CASE("batch schedule visits every index once per epoch") {
  Rng rng(30);
  BatchSchedule s(10, 4, rng);
  CHECK(s.batches_per_epoch() == 3);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<int> seen(10, 0);
    std::size_t total = 0;
    for (int i = 0; i < 3; ++i)
      for (auto idx : s.next()) {
        ++seen[idx];
        ++total;
      }
    CHECK(total == 10);
    CHECK(std::count(seen.begin(), seen.end(), 1) == 10);
    CHECK(s.epoch() == epoch);
  }
}

TEST_CASE("training log writes one json object per line") {
  const auto dir = testing::scratch_dir("trainlog");
  {
    TrainingLog log(dir / "log.jsonl");
    log.write(1, "pretrain", 0.5, 1e-5, 0.1);
    log.write(2, "pretrain", 0.25, 1e-5, 0.2);
  }
  std::ifstream in(dir / "log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j["stage"] == "pretrain");
    CHECK(j.contains("wallclock"));
    ++n;
  }
  CHECK(n == 2);
}
