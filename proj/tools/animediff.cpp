#include <spdlog/spdlog.h>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "animediff/checkpoint.hpp"
#include "animediff/colorize.hpp"
#include "animediff/config.hpp"
#include "animediff/datapipe.hpp"
#include "animediff/image_io.hpp"
#include "animediff/lineart.hpp"
#include "animediff/service.hpp"
#include "animediff/synthetic.hpp"
#include "animediff/training.hpp"
#include "animediff/version.hpp"

namespace fs = std::filesystem;
using namespace animediff;

namespace {

AppConfig load_config(const std::optional<std::string>& flag) {
  const auto path = resolve_config_path(flag);
  if (!path) return AppConfig{};
  spdlog::info("config: {}", path->string());
  return AppConfig::load(*path);
}

/// A prepared folder (with manifest.json) yields the requested split; any
/// other folder is read as a flat image directory.
data::ImageDataset open_dataset(const fs::path& dir, data::Split split, int size, bool cache) {
  if (fs::exists(dir / "manifest.json")) return data::ImageDataset::from_manifest(dir, split, size, cache);
  return data::ImageDataset::from_folder(dir, size, cache);
}

void write_json(const fs::path& path, const Json& j) {
  const std::string text = j.dump(2) + "\n";
  io::write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

service::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

struct PretrainArgs {
  std::optional<std::string> config;
  std::optional<std::string> data;
  std::string out = "checkpoints/pretrained.ckpt";
  long steps = 0;
  std::optional<std::string> resume;
  std::optional<std::string> log;
};

int cmd_pretrain(const PretrainArgs& a) {
  AppConfig cfg = load_config(a.config);
  if (a.data) cfg.data.root = *a.data;
  if (a.steps > 0) cfg.pretrain.max_steps = a.steps;
  cfg.validate();

  std::unique_ptr<Denoiser<float>> model;
  Rng rng(cfg.pretrain.seed);
  long start = 0;
  std::optional<Checkpoint> resumed;
  if (a.resume) {
    resumed = Checkpoint::load(*a.resume);
    if (!resumed->optimizer) throw FormatError("resume: checkpoint has no optimizer state");
    model = resumed->build_model();
    cfg.model = resumed->model;
    cfg.schedule = resumed->schedule;
    if (!resumed->rng_state.empty()) rng.set_state(resumed->rng_state);
    start = resumed->step;
    spdlog::info("resuming from step {}", start);
  } else {
    model = std::make_unique<Denoiser<float>>(cfg.model, cfg.pretrain.seed);
  }
  Adam<float> adam(model->parameters(), AdamOptions{cfg.pretrain.lr});
  if (resumed) resumed->restore_optimizer(adam);

  const auto dataset =
      open_dataset(cfg.data.root, data::Split::train, cfg.model.image_size, cfg.data.cache_images);
  spdlog::info("pretrain: {} images, {} parameters", dataset.size(), model->parameter_count());
  const auto schedule = cfg.schedule.build();
  const auto sampler = diffusion::SamplerConfig::uniform(cfg.schedule.steps, cfg.sampler.ddim_steps, cfg.sampler.eta);
  const auto aug = training::AugmentOptions::from(cfg.data);

  std::optional<training::TrainingLog> log;
  if (a.log) log.emplace(*a.log, a.resume.has_value());

  const auto save = [&](long step, const Denoiser<float>& m, const Adam<float>& opt, const Rng& r) {
    Checkpoint ck = Checkpoint::capture(m, cfg.schedule, sampler, cfg.data.xdog, Stage::pretrained);
    ck.capture_optimizer(opt);
    ck.seed = cfg.pretrain.seed;
    ck.step = step;
    ck.rng_state = r.state();
    ck.save(a.out);
    spdlog::info("step {}: saved {} ({})", step, a.out, ck.hash.substr(0, 12));
  };
  const auto report = training::run_pretrain(*model, adam, dataset, schedule, cfg.pretrain, aug, rng, start,
                                             log ? &*log : nullptr, save);
  std::cout << Json{{"steps", report.steps}, {"final_loss", report.final_loss}, {"checkpoint", a.out}}.dump() << "\n";
  return 0;
}

struct FinetuneArgs {
  std::optional<std::string> config;
  std::string checkpoint;
  std::optional<std::string> data;
  std::string out = "checkpoints/finetuned.ckpt";
  std::optional<std::string> log;
};

int cmd_finetune(const FinetuneArgs& a) {
  AppConfig cfg = load_config(a.config);
  if (a.data) cfg.data.root = *a.data;
  cfg.validate();
  const Checkpoint base = Checkpoint::load(a.checkpoint);
  auto model = base.build_model();
  const auto schedule = base.schedule.build();
  const auto sampler = diffusion::SamplerConfig::uniform(base.schedule.steps, cfg.finetune.ddim_steps, 0.0);
  Adam<float> adam(model->parameters(), AdamOptions{cfg.finetune.lr});
  const auto dataset =
      open_dataset(cfg.data.root, data::Split::train, base.model.image_size, cfg.data.cache_images);
  const auto aug = training::AugmentOptions::from(cfg.data, cfg.finetune.warped_reference);
  Rng rng(cfg.finetune.seed);
  std::optional<training::TrainingLog> log;
  if (a.log) log.emplace(*a.log, true);

  const auto report =
      training::finetune_epochs(*model, adam, dataset, schedule, sampler, cfg.finetune, aug, rng, log ? &*log : nullptr);
  Checkpoint ck = Checkpoint::capture(*model, base.schedule, sampler, base.xdog, Stage::finetuned);
  ck.seed = cfg.finetune.seed;
  ck.step = base.step + report.steps;
  ck.save(a.out);
  std::cout << Json{{"steps", report.steps},
                    {"mean_loss", report.mean_loss},
                    {"mean_psnr", report.mean_psnr},
                    {"checkpoint", a.out},
                    {"hash", ck.hash}}
                   .dump()
            << "\n";
  return 0;
}

struct ColorizeArgs {
  std::string checkpoint;
  std::string line;
  std::string ref;
  std::string out;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  bool raw_line = false;
  double guidance = 1.0;
};

int cmd_colorize(const ColorizeArgs& a) {
  const Colorizer colorizer(Checkpoint::load(a.checkpoint));
  ColorizeOptions opts;
  opts.ddim_steps = a.steps;
  opts.seed = a.seed;
  opts.restyle_line = !a.raw_line;
  opts.guidance_scale = a.guidance;
  const auto result = colorizer.colorize(io::read_image(a.line, 3), io::read_image(a.ref, 3), opts);
  io::write_file(a.out, result.png);
  std::cout << "colorized in " << result.elapsed_ms << " ms (" << result.steps << " steps) -> " << a.out << "\n";
  return 0;
}

struct ServeArgs {
  std::optional<std::string> config;
  std::optional<std::string> checkpoint;
  std::optional<std::string> bind;
  std::optional<int> max_queue;
};

int cmd_serve(const ServeArgs& a) {
  AppConfig cfg = load_config(a.config);
  if (a.checkpoint) cfg.service.checkpoint = *a.checkpoint;
  if (a.bind) cfg.service.bind = *a.bind;
  if (a.max_queue) cfg.service.max_queue = *a.max_queue;
  if (cfg.service.checkpoint.empty()) throw ConfigError("serve: no checkpoint given");

  const Checkpoint ck = Checkpoint::load(cfg.service.checkpoint);
  auto colorizer = std::make_shared<const Colorizer>(ck);
  service::ModelInfo info{ck.hash, to_string(ck.stage), ck.summary()};
  service::Server server(
      info,
      [colorizer](const Tensor<float>& line, const Tensor<float>& ref, const ColorizeOptions& o) {
        return colorizer->colorize(line, ref, o);
      },
      cfg.service.max_queue);
  const auto [host, port] = service::parse_bind(cfg.service.bind);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  spdlog::info("serving {} on http://{}:{} (max_queue {})", ck.hash.substr(0, 12), host, bound, cfg.service.max_queue);
  server.run();
  g_server = nullptr;
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::string protocol = "self";
  std::uint64_t seed = 0;
  std::optional<std::string> out;
  std::optional<std::string> features;
  std::string features_sha256;
  std::string split = "test";
  int batch_size = 8;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Checkpoint ck = Checkpoint::load(a.checkpoint);
  const Colorizer colorizer(ck);
  const auto dataset = open_dataset(a.data, data::parse_split(a.split), ck.model.image_size, false);
  EvalOptions opts;
  opts.protocol = metrics::parse_protocol(a.protocol);
  opts.seed = a.seed;
  opts.xdog = ck.xdog;
  opts.batch_size = a.batch_size;
  std::unique_ptr<metrics::FeatureExtractor> features;
  if (a.features) {
    features = std::make_unique<metrics::PinnedLinearFeatures>(*a.features, a.features_sha256);
    opts.features = features.get();
  }
  Json report = evaluate(colorizer, dataset, opts).to_json();
  report["checkpoint_hash"] = ck.hash;
  report["stage"] = to_string(ck.stage);
  report["feature_extractor"] = features ? features->name() : metrics::RandomProjectionFeatures().name();
  if (a.out) write_json(*a.out, report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct PrepareArgs {
  std::string src;
  std::string out;
  int size = 256;
  std::optional<int> test_count;
  double test_ratio = 0.0;
  std::uint64_t seed = 0;
};

int cmd_prepare(const PrepareArgs& a) {
  const auto manifest = data::prepare_dataset(a.src, a.out, a.size, data::SplitSpec{a.test_count, a.test_ratio}, a.seed);
  const auto issues = data::validate_manifest(manifest, a.out);
  for (const auto& issue : issues) spdlog::warn("manifest: {}", issue.message);
  std::cout << "prepared " << manifest.entries.size() << " images (" << manifest.split_entries(data::Split::test).size()
            << " test) in " << a.out << "\n";
  return issues.empty() ? 0 : 1;
}

struct ExtractArgs {
  std::string in;
  std::string out;
  lineart::XDoGParams params;
};

int cmd_extract(const ExtractArgs& a) {
  a.params.validate();
  const auto lines = lineart::extract_lines(io::read_image(a.in, 3), a.params);
  io::write_png(a.out, lines.to_tensor());
  return 0;
}

struct FitArgs {
  std::string pairs;
  lineart::XDoGParams fixed;
};

/// Manifest: [{"color": PATH, "line": PATH}, ...] with paths relative to the file.
int cmd_fit(const FitArgs& a) {
  std::ifstream in(a.pairs);
  if (!in) throw InputError("cannot open " + a.pairs);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("fit-xdog: ") + e.what());
  }
  if (!j.is_array() || j.empty()) throw FormatError("fit-xdog: expected a non-empty array of {color, line}");
  const fs::path base = fs::path(a.pairs).parent_path();
  std::vector<lineart::XDoGPair> pairs;
  for (const auto& e : j) {
    const auto color = io::read_image(base / e.at("color").get<std::string>(), 3);
    const auto line = io::read_image(base / e.at("line").get<std::string>(), 1);
    if (line.height != color.height || line.width != color.width)
      throw ShapeError("fit-xdog: line and color sizes differ for " + e.at("color").get<std::string>());
    pairs.push_back({color, lineart::LineDrawing{line.plane(0, 0)}});
  }
  const auto fit = lineart::fit_xdog_params(pairs, lineart::XDoGSearchGrid::standard(), a.fixed);
  std::cout << Json{{"k", fit.k}, {"p", fit.p}, {"loss", fit.loss}, {"pairs", pairs.size()}}.dump() << "\n";
  return 0;
}

struct BenchArgs {
  std::optional<std::string> checkpoint;
  int size = 64;
  int steps = 10;
  int runs = 5;
};

int cmd_benchmark(const BenchArgs& a) {
  std::optional<Checkpoint> ck;
  if (a.checkpoint) {
    ck = Checkpoint::load(*a.checkpoint);
  } else {
    DenoiserConfig mc = DenoiserConfig::toy();
    mc.image_size = a.size;
    const Denoiser<float> model(mc, 0);
    ck = Checkpoint::capture(model, ScheduleConfig{}, diffusion::SamplerConfig::uniform(1000, a.steps), {},
                             Stage::pretrained);
  }
  const Colorizer colorizer(*ck);
  const int s = colorizer.image_size();
  const auto line = synth::character(s, 1);
  const auto ref = synth::character(s, 2);
  ColorizeOptions opts;
  opts.ddim_steps = a.steps;
  std::vector<double> ms;
  for (int i = 0; i < a.runs; ++i) ms.push_back(colorizer.colorize(line, ref, opts).elapsed_ms);
  std::sort(ms.begin(), ms.end());
  double mean = 0.0;
  for (double m : ms) mean += m;
  mean /= ms.size();
  std::cout << Json{{"image_size", s},
                    {"steps", a.steps},
                    {"runs", a.runs},
                    {"parameters", colorizer.model().parameter_count()},
                    {"mean_ms", mean},
                    {"median_ms", ms[ms.size() / 2]},
                    {"min_ms", ms.front()}}
                   .dump()
            << "\n";
  return 0;
}

struct SynthArgs {
  std::string out;
  int count = 32;
  int size = 64;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthArgs& a) {
  for (int i = 0; i < a.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "char_%04d.png", i);
    io::write_png(fs::path(a.out) / name, synth::character(a.size, a.seed + i));
  }
  std::cout << "wrote " << a.count << " images to " << a.out << "\n";
  return 0;
}

void add_xdog_flags(CLI::App* cmd, lineart::XDoGParams& p) {
  cmd->add_option("--sigma", p.sigma, "narrow Gaussian std (px)")->capture_default_str();
  cmd->add_option("--k", p.k, "wide/narrow std ratio")->capture_default_str();
  cmd->add_option("--p", p.p, "edge emphasis")->capture_default_str();
  cmd->add_option("--phi", p.phi, "threshold sharpness")->capture_default_str();
  cmd->add_option("--epsilon", p.epsilon, "threshold level")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-based line-drawing colorization with diffusion models"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "noise-prediction pre-training");
  c_pre->add_option("--config", pre.config, "JSON config (else $ANIMEDIFF_CONFIG)");
  c_pre->add_option("--data", pre.data, "prepared dataset or image folder");
  c_pre->add_option("--out", pre.out, "checkpoint to write")->capture_default_str();
  c_pre->add_option("--steps", pre.steps, "stop after this many steps (0 = use epochs)");
  c_pre->add_option("--resume", pre.resume, "training checkpoint to continue from");
  c_pre->add_option("--log", pre.log, "JSON-lines training log");

  FinetuneArgs fin;
  auto* c_fin = app.add_subcommand("finetune", "reconstruction fine-tuning through the DDIM chain");
  c_fin->add_option("--config", fin.config, "JSON config (else $ANIMEDIFF_CONFIG)");
  c_fin->add_option("--checkpoint", fin.checkpoint, "pre-trained checkpoint")->required();
  c_fin->add_option("--data", fin.data, "prepared dataset or image folder");
  c_fin->add_option("--out", fin.out, "checkpoint to write")->capture_default_str();
  c_fin->add_option("--log", fin.log, "JSON-lines training log");

  ColorizeArgs col;
  auto* c_col = app.add_subcommand("colorize", "colorize one line drawing from a reference");
  c_col->add_option("--checkpoint", col.checkpoint)->required();
  c_col->add_option("--line", col.line, "line drawing (any style)")->required()->check(CLI::ExistingFile);
  c_col->add_option("--ref", col.ref, "color reference")->required()->check(CLI::ExistingFile);
  c_col->add_option("--out", col.out, "output PNG")->required();
  c_col->add_option("--steps", col.steps, "DDIM steps (default: checkpoint ladder)");
  c_col->add_option("--seed", col.seed, "only used with eta > 0");
  c_col->add_flag("--raw-line", col.raw_line, "skip XDoG re-styling of the line input");
  c_col->add_option("--guidance", col.guidance, "classifier-free guidance scale")->capture_default_str();

  ServeArgs srv;
  auto* c_srv = app.add_subcommand("serve", "HTTP colorization service");
  c_srv->add_option("--config", srv.config, "JSON config (else $ANIMEDIFF_CONFIG)");
  c_srv->add_option("--checkpoint", srv.checkpoint);
  c_srv->add_option("--bind", srv.bind, "HOST:PORT");
  c_srv->add_option("--max-queue", srv.max_queue, "jobs accepted at once, running one included");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "PSNR / MS-SSIM (self) or FID (random) on a dataset");
  c_ev->add_option("--checkpoint", ev.checkpoint)->required();
  c_ev->add_option("--data", ev.data, "prepared dataset or image folder")->required();
  c_ev->add_option("--protocol", ev.protocol)->check(CLI::IsMember({"self", "random"}))->capture_default_str();
  c_ev->add_option("--split", ev.split, "manifest split")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  c_ev->add_option("--seed", ev.seed)->capture_default_str();
  c_ev->add_option("--batch-size", ev.batch_size)->capture_default_str();
  c_ev->add_option("--features", ev.features, "pinned linear feature file for FID");
  c_ev->add_option("--features-sha256", ev.features_sha256, "expected hash of --features");
  c_ev->add_option("--out", ev.out, "JSON report path");

  PrepareArgs prep;
  auto* c_prep = app.add_subcommand("prepare-data", "resize a folder of images and write a manifest");
  c_prep->add_option("--src", prep.src)->required()->check(CLI::ExistingDirectory);
  c_prep->add_option("--out", prep.out)->required();
  c_prep->add_option("--size", prep.size)->capture_default_str();
  c_prep->add_option("--test-count", prep.test_count, "held-out images");
  c_prep->add_option("--test-ratio", prep.test_ratio, "held-out fraction when --test-count is absent");
  c_prep->add_option("--seed", prep.seed)->capture_default_str();

  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract-lines", "XDoG line drawing from a color image");
  c_ex->add_option("--in", ex.in)->required()->check(CLI::ExistingFile);
  c_ex->add_option("--out", ex.out)->required();
  add_xdog_flags(c_ex, ex.params);

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit-xdog", "grid-search k and p against hand-drawn lines");
  c_fit->add_option("--pairs", fit.pairs, "JSON list of {color, line}")->required()->check(CLI::ExistingFile);
  add_xdog_flags(c_fit, fit.fixed);

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("benchmark", "colorization latency");
  c_bench->add_option("--checkpoint", bench.checkpoint, "default: untrained toy model");
  c_bench->add_option("--size", bench.size, "toy image size without a checkpoint")->capture_default_str();
  c_bench->add_option("--steps", bench.steps)->capture_default_str();
  c_bench->add_option("--runs", bench.runs)->capture_default_str();

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "write a synthetic cartoon-character image set");
  c_syn->add_option("--out", syn.out)->required();
  c_syn->add_option("--count", syn.count)->capture_default_str();
  c_syn->add_option("--size", syn.size)->capture_default_str();
  c_syn->add_option("--seed", syn.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*c_pre) return cmd_pretrain(pre);
    if (*c_fin) return cmd_finetune(fin);
    if (*c_col) return cmd_colorize(col);
    if (*c_srv) return cmd_serve(srv);
    if (*c_ev) return cmd_evaluate(ev);
    if (*c_prep) return cmd_prepare(prep);
    if (*c_ex) return cmd_extract(ex);
    if (*c_fit) return cmd_fit(fit);
    if (*c_bench) return cmd_benchmark(bench);
    if (*c_syn) return cmd_synth(syn);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
