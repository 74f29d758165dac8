#include "animediff/checkpoint.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <cstring>

#include "animediff/image_io.hpp"
#include "animediff/version.hpp"

namespace animediff {

namespace {

constexpr unsigned char kMagic[8] = {'A', 'D', 'C', 'K', 'P', 'T', 0, 0};
constexpr std::size_t kDigest = SHA256_DIGEST_LENGTH;

template <typename T>
void put(std::vector<unsigned char>& out, T value) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

void put_matrix(std::vector<unsigned char>& out, const Matrix<float>& m) {
  const auto* raw = reinterpret_cast<const unsigned char*>(m.data());
  out.insert(out.end(), raw, raw + m.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  Matrix<float> matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix<float> m(rows, cols);
    std::memcpy(m.data(), take(static_cast<std::size_t>(m.size()) * sizeof(float)), m.size() * sizeof(float));
    return m;
  }

  const unsigned char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint: unexpected end of data");
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::string hex(const unsigned char* digest, std::size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    s[2 * i] = kHex[digest[i] >> 4];
    s[2 * i + 1] = kHex[digest[i] & 15];
  }
  return s;
}

}  // namespace

std::string sha256_hex_digest(std::span<const unsigned char> bytes) {
  unsigned char digest[kDigest];
  SHA256(bytes.data(), bytes.size(), digest);
  return hex(digest, kDigest);
}

Stage parse_stage(const std::string& name) {
  if (name == "pretrained") return Stage::pretrained;
  if (name == "finetuned") return Stage::finetuned;
  throw FormatError("unknown training stage '" + name + "'");
}

std::string to_string(Stage stage) { return stage == Stage::pretrained ? "pretrained" : "finetuned"; }

Checkpoint Checkpoint::capture(const Denoiser<float>& model, const ScheduleConfig& schedule,
                               const diffusion::SamplerConfig& sampler, const lineart::XDoGParams& xdog,
                               Stage stage) {
  sampler.validate(schedule.steps);
  Checkpoint c;
  c.model = model.config();
  c.schedule = schedule;
  c.sampler = sampler;
  c.xdog = xdog;
  c.stage = stage;
  for (const auto* p : model.parameters()) c.parameters.emplace_back(p->name, p->value);
  return c;
}

void Checkpoint::capture_optimizer(const Adam<float>& adam) {
  optimizer = OptimizerState{adam.options(), adam.steps(), adam.first_moments(), adam.second_moments()};
}

void Checkpoint::load_into(Denoiser<float>& model) const {
  if (!(model.config() == this->model)) throw FormatError("checkpoint: model config does not match");
  auto params = model.parameters();
  if (params.size() != parameters.size())
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " parameters, file has " +
                      std::to_string(parameters.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = parameters[i];
    if (params[i]->name != name || params[i]->value.rows() != value.rows() || params[i]->value.cols() != value.cols())
      throw FormatError("checkpoint: parameter " + name + " does not match the model layout");
    params[i]->value = value;
  }
}

std::unique_ptr<Denoiser<float>> Checkpoint::build_model() const {
  auto m = std::make_unique<Denoiser<float>>(model, seed);
  load_into(*m);
  return m;
}

void Checkpoint::restore_optimizer(Adam<float>& adam) const {
  if (!optimizer) throw FormatError("checkpoint: no optimizer state stored");
  adam.restore(optimizer->steps, optimizer->first, optimizer->second);
}

std::vector<unsigned char> Checkpoint::serialize() const {
  Json header;
  header["tool_version"] = kToolVersion;
  header["stage"] = to_string(stage);
  header["seed"] = seed;
  header["step"] = step;
  header["rng_state"] = rng_state;
  header["model"] = to_json(model);
  header["schedule"] = Json{{"beta_start", schedule.beta_start},
                            {"beta_end", schedule.beta_end},
                            {"T", schedule.steps},
                            {"subsequence_steps", sampler.times.size()},
                            {"eta", sampler.eta}};
  header["sampler"] = Json{{"times", sampler.times}, {"eta", sampler.eta}};
  header["xdog"] = to_json(xdog);
  Json shapes = Json::array();
  for (const auto& [name, value] : parameters) shapes.push_back(Json{{"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
  header["parameters"] = shapes;
  if (optimizer)
    header["optimizer"] = Json{{"lr", optimizer->options.lr},
                               {"beta1", optimizer->options.beta1},
                               {"beta2", optimizer->options.beta2},
                               {"eps", optimizer->options.eps},
                               {"steps", optimizer->steps}};
  else
    header["optimizer"] = nullptr;

  const std::string text = header.dump();
  std::vector<unsigned char> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : parameters) put_matrix(out, p.second);
  if (optimizer) {
    if (optimizer->first.size() != parameters.size() || optimizer->second.size() != parameters.size())
      throw FormatError("checkpoint: optimizer state does not cover every parameter");
    for (const auto& m : optimizer->first) put_matrix(out, m);
    for (const auto& m : optimizer->second) put_matrix(out, m);
  }
  unsigned char digest[kDigest];
  SHA256(out.data(), out.size(), digest);
  out.insert(out.end(), digest, digest + kDigest);
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const unsigned char> bytes) {
  if (bytes.empty()) throw HashError("checkpoint: empty file");
  const std::size_t prefix = std::min<std::size_t>(bytes.size(), 8);
  if (std::memcmp(bytes.data(), kMagic, prefix) != 0)
    throw FormatError("checkpoint: not a checkpoint file (bad magic)");
  if (bytes.size() < 12) throw HashError("checkpoint: truncated file");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  if (version != kFormatVersion)
    throw UnsupportedVersionError("checkpoint: format version " + std::to_string(version) +
                                  " is not supported (this build reads version " + std::to_string(kFormatVersion) +
                                  ")");
  if (bytes.size() < 12 + 8 + kDigest) throw HashError("checkpoint: truncated file");
  const auto body = bytes.first(bytes.size() - kDigest);
  unsigned char digest[kDigest];
  SHA256(body.data(), body.size(), digest);
  if (std::memcmp(digest, bytes.data() + body.size(), kDigest) != 0)
    throw HashError("checkpoint: content hash mismatch (file is corrupt or truncated)");

  Reader r(body);
  r.take(12);
  const auto header_len = r.get<std::uint64_t>();
  if (header_len > r.remaining()) throw FormatError("checkpoint: header length exceeds file size");
  const auto* text = reinterpret_cast<const char*>(r.take(header_len));
  Checkpoint c;
  try {
    const Json h = Json::parse(text, text + header_len);
    c.stage = parse_stage(h.at("stage").get<std::string>());
    c.seed = h.at("seed").get<std::uint64_t>();
    c.step = h.at("step").get<long>();
    c.rng_state = h.at("rng_state").get<std::string>();
    c.model = denoiser_config_from_json(h.at("model"));
    const Json& s = h.at("schedule");
    c.schedule.beta_start = s.at("beta_start").get<double>();
    c.schedule.beta_end = s.at("beta_end").get<double>();
    c.schedule.steps = s.at("T").get<int>();
    c.sampler.times = h.at("sampler").at("times").get<std::vector<int>>();
    c.sampler.eta = h.at("sampler").at("eta").get<double>();
    c.xdog = xdog_params_from_json(h.at("xdog"));
    for (const auto& p : h.at("parameters")) {
      const auto rows = p.at("rows").get<Eigen::Index>();
      const auto cols = p.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw FormatError("checkpoint: negative parameter shape");
      c.parameters.emplace_back(p.at("name").get<std::string>(), r.matrix(rows, cols));
    }
    if (!h.at("optimizer").is_null()) {
      const Json& o = h.at("optimizer");
      OptimizerState st;
      st.options.lr = o.at("lr").get<double>();
      st.options.beta1 = o.at("beta1").get<double>();
      st.options.beta2 = o.at("beta2").get<double>();
      st.options.eps = o.at("eps").get<double>();
      st.steps = o.at("steps").get<std::uint64_t>();
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& [name, value] : c.parameters)
          (pass == 0 ? st.first : st.second).push_back(r.matrix(value.rows(), value.cols()));
      c.optimizer = std::move(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after the payload");
  c.sampler.validate(c.schedule.steps);
  c.hash = hex(bytes.data() + body.size(), kDigest);
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  io::write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
  hash = hex(bytes.data() + bytes.size() - kDigest, kDigest);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  return deserialize(io::read_file(path));
}

Json Checkpoint::summary() const {
  std::size_t count = 0;
  for (const auto& p : parameters) count += static_cast<std::size_t>(p.second.size());
  return Json{{"stage", to_string(stage)},
              {"checkpoint_hash", hash},
              {"image_size", model.image_size},
              {"parameter_count", count},
              {"step", step},
              {"model", to_json(model)},
              {"schedule", Json{{"beta_start", schedule.beta_start},
                                {"beta_end", schedule.beta_end},
                                {"T", schedule.steps},
                                {"subsequence_steps", sampler.times.size()},
                                {"eta", sampler.eta}}},
              {"sampler", Json{{"times", sampler.times}, {"eta", sampler.eta}}},
              {"xdog", to_json(xdog)}};
}

}  // namespace animediff
