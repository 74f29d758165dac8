#include "animediff/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace animediff {

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  [[nodiscard]] const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("config: unknown key '" + name_ + "." + item.key() + "'");
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

InversionSource parse_inversion_source(const std::string& name) {
  if (name == "ground_truth") return InversionSource::ground_truth;
  if (name == "reference") return InversionSource::reference;
  throw ConfigError("unknown inversion source '" + name + "' (expected ground_truth or reference)");
}

std::string to_string(InversionSource source) {
  return source == InversionSource::reference ? "reference" : "ground_truth";
}

Json to_json(const DenoiserConfig& c) {
  return Json{{"base_channels", c.base_channels},
              {"channel_mults", c.channel_mults},
              {"blocks_per_level", c.blocks_per_level},
              {"attention_levels", c.attention_levels},
              {"mid_attention", c.mid_attention},
              {"attention_heads", c.attention_heads},
              {"time_embed_dim", c.time_embed_dim},
              {"norm_groups", c.norm_groups},
              {"input_channels", c.input_channels},
              {"output_channels", c.output_channels},
              {"image_size", c.image_size}};
}

DenoiserConfig denoiser_config_from_json(const Json& j) {
  DenoiserConfig c;
  Section s(j, "model");
  s.get("base_channels", c.base_channels);
  s.get("channel_mults", c.channel_mults);
  s.get("blocks_per_level", c.blocks_per_level);
  s.get("attention_levels", c.attention_levels);
  s.get("mid_attention", c.mid_attention);
  s.get("attention_heads", c.attention_heads);
  s.get("time_embed_dim", c.time_embed_dim);
  s.get("norm_groups", c.norm_groups);
  s.get("input_channels", c.input_channels);
  s.get("output_channels", c.output_channels);
  s.get("image_size", c.image_size);
  s.finish();
  return c;
}

Json to_json(const ScheduleConfig& c) {
  return Json{{"beta_start", c.beta_start}, {"beta_end", c.beta_end}, {"steps", c.steps}};
}

ScheduleConfig schedule_config_from_json(const Json& j) {
  ScheduleConfig c;
  Section s(j, "schedule");
  s.get("beta_start", c.beta_start);
  s.get("beta_end", c.beta_end);
  s.get("steps", c.steps);
  s.finish();
  return c;
}

Json to_json(const lineart::XDoGParams& p) {
  return Json{{"sigma", p.sigma}, {"k", p.k}, {"p", p.p}, {"phi", p.phi}, {"epsilon", p.epsilon}};
}

lineart::XDoGParams xdog_params_from_json(const Json& j) {
  lineart::XDoGParams p;
  Section s(j, "xdog");
  s.get("sigma", p.sigma);
  s.get("k", p.k);
  s.get("p", p.p);
  s.get("phi", p.phi);
  s.get("epsilon", p.epsilon);
  s.finish();
  return p;
}

void AppConfig::validate() const {
  model.validate();
  if (data.image_size != model.image_size)
    throw ConfigError("config: data.image_size and model.image_size differ");
  if (data.sigma_choices.empty()) throw ConfigError("config: data.sigma_choices is empty");
  for (double sigma : data.sigma_choices)
    if (!(sigma > 0.0)) throw ConfigError("config: data.sigma_choices must be positive");
  data.xdog.validate();
  if (data.tps.grid_size < 2 || data.tps.max_disp < 0.0 || data.tps.max_disp > 0.5)
    throw ConfigError("config: data.tps needs grid_size >= 2 and max_disp in [0, 0.5]");
  if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1.0) ||
      schedule.steps < 1)
    throw ConfigError("config: schedule needs 0 < beta_start <= beta_end < 1 and steps >= 1");
  if (pretrain.batch_size < 1 || pretrain.epochs < 0 || !(pretrain.lr > 0.0))
    throw ConfigError("config: pretrain needs batch_size >= 1 and lr > 0");
  if (pretrain.loss_p != 2) throw ConfigError("config: pretrain.loss_p must be 2");
  if (pretrain.cond_dropout < 0.0 || pretrain.cond_dropout >= 1.0)
    throw ConfigError("config: pretrain.cond_dropout must be in [0, 1)");
  if (finetune.batch_size < 1 || finetune.epochs < 0 || !(finetune.lr >= 0.0))
    throw ConfigError("config: finetune needs batch_size >= 1 and lr >= 0");
  if (finetune.eta != 0.0) throw ConfigError("config: finetune.eta must be 0 (deterministic reverse chain)");
  if (finetune.ddim_steps < 1 || finetune.ddim_steps > schedule.steps)
    throw ConfigError("config: finetune.ddim_steps must be in [1, schedule.steps]");
  if (finetune.truncate_steps < 0) throw ConfigError("config: finetune.truncate_steps must be >= 0");
  if (sampler.ddim_steps < 1 || sampler.ddim_steps > schedule.steps)
    throw ConfigError("config: sampler.ddim_steps must be in [1, schedule.steps]");
  if (sampler.eta < 0.0 || sampler.eta > 1.0) throw ConfigError("config: sampler.eta must be in [0, 1]");
  if (service.max_queue < 1) throw ConfigError("config: service.max_queue must be >= 1");
}

AppConfig AppConfig::from_json(const Json& j) {
  AppConfig c;
  Section root(j, "root");
  if (const Json* d = root.child("data")) {
    Section s(*d, "data");
    s.get("root", c.data.root);
    s.get("image_size", c.data.image_size);
    s.get("sigma_choices", c.data.sigma_choices);
    s.get("cache_images", c.data.cache_images);
    if (const Json* x = s.child("xdog")) c.data.xdog = xdog_params_from_json(*x);
    if (const Json* t = s.child("tps")) {
      Section ts(*t, "data.tps");
      ts.get("grid_size", c.data.tps.grid_size);
      ts.get("max_disp", c.data.tps.max_disp);
      ts.get("regularization", c.data.tps.regularization);
      ts.finish();
    }
    s.finish();
  }
  if (const Json* m = root.child("model")) c.model = denoiser_config_from_json(*m);
  if (const Json* m = root.child("schedule")) c.schedule = schedule_config_from_json(*m);
  if (const Json* p = root.child("pretrain")) {
    Section s(*p, "pretrain");
    s.get("batch_size", c.pretrain.batch_size);
    s.get("epochs", c.pretrain.epochs);
    s.get("max_steps", c.pretrain.max_steps);
    s.get("lr", c.pretrain.lr);
    s.get("loss_p", c.pretrain.loss_p);
    s.get("cond_dropout", c.pretrain.cond_dropout);
    s.get("checkpoint_every", c.pretrain.checkpoint_every);
    s.get("log_every", c.pretrain.log_every);
    s.get("seed", c.pretrain.seed);
    s.finish();
  }
  if (const Json* f = root.child("finetune")) {
    Section s(*f, "finetune");
    s.get("batch_size", c.finetune.batch_size);
    s.get("epochs", c.finetune.epochs);
    s.get("lr", c.finetune.lr);
    s.get("ddim_steps", c.finetune.ddim_steps);
    s.get("eta", c.finetune.eta);
    s.get("truncate_steps", c.finetune.truncate_steps);
    s.get("warped_reference", c.finetune.warped_reference);
    std::string source = to_string(c.finetune.invert_from);
    s.get("invert_from", source);
    c.finetune.invert_from = parse_inversion_source(source);
    s.get("seed", c.finetune.seed);
    s.finish();
  }
  if (const Json* p = root.child("sampler")) {
    Section s(*p, "sampler");
    s.get("ddim_steps", c.sampler.ddim_steps);
    s.get("eta", c.sampler.eta);
    s.get("guidance_scale", c.sampler.guidance_scale);
    std::string scale = diffusion::to_string(c.sampler.ddpm_noise_scale);
    s.get("ddpm_noise_scale", scale);
    c.sampler.ddpm_noise_scale = diffusion::parse_noise_scale(scale);
    s.finish();
  }
  if (const Json* p = root.child("service")) {
    Section s(*p, "service");
    s.get("bind", c.service.bind);
    s.get("max_queue", c.service.max_queue);
    s.get("checkpoint", c.service.checkpoint);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

Json AppConfig::to_json() const {
  Json j;
  j["data"] = Json{{"root", data.root},
                   {"image_size", data.image_size},
                   {"sigma_choices", data.sigma_choices},
                   {"cache_images", data.cache_images},
                   {"xdog", animediff::to_json(data.xdog)},
                   {"tps",
                    Json{{"grid_size", data.tps.grid_size},
                         {"max_disp", data.tps.max_disp},
                         {"regularization", data.tps.regularization}}}};
  j["model"] = animediff::to_json(model);
  j["schedule"] = animediff::to_json(schedule);
  j["pretrain"] = Json{{"batch_size", pretrain.batch_size},   {"epochs", pretrain.epochs},
                       {"max_steps", pretrain.max_steps},     {"lr", pretrain.lr},
                       {"loss_p", pretrain.loss_p},           {"cond_dropout", pretrain.cond_dropout},
                       {"checkpoint_every", pretrain.checkpoint_every}, {"log_every", pretrain.log_every},
                       {"seed", pretrain.seed}};
  j["finetune"] = Json{{"batch_size", finetune.batch_size},
                       {"epochs", finetune.epochs},
                       {"lr", finetune.lr},
                       {"ddim_steps", finetune.ddim_steps},
                       {"eta", finetune.eta},
                       {"truncate_steps", finetune.truncate_steps},
                       {"warped_reference", finetune.warped_reference},
                       {"invert_from", to_string(finetune.invert_from)},
                       {"seed", finetune.seed}};
  j["sampler"] = Json{{"ddim_steps", sampler.ddim_steps},
                      {"eta", sampler.eta},
                      {"guidance_scale", sampler.guidance_scale},
                      {"ddpm_noise_scale", diffusion::to_string(sampler.ddpm_noise_scale)}};
  j["service"] = Json{{"bind", service.bind}, {"max_queue", service.max_queue}, {"checkpoint", service.checkpoint}};
  return j;
}

AppConfig AppConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return std::filesystem::path(*flag);
  if (const char* env = std::getenv("ANIMEDIFF_CONFIG"); env != nullptr && *env != '\0')
    return std::filesystem::path(env);
  return std::nullopt;
}

}  // namespace animediff
