#include "animediff/service.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <charconv>

#include "animediff/image_io.hpp"
#include "httplib.h"

namespace animediff::service {

JobQueue::JobQueue(int capacity, ColorizeHandler handler) : capacity_(capacity), handler_(std::move(handler)) {
  if (capacity < 1) throw ParameterError("job queue: capacity must be >= 1");
  worker_ = std::thread([this] { run(); });
}

JobQueue::~JobQueue() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  ready_.notify_all();
  worker_.join();
}

std::optional<std::future<ColorizeResult>> JobQueue::submit(Tensor<float> line, Tensor<float> reference,
                                                            ColorizeOptions options) {
  std::lock_guard lock(mutex_);
  if (stopping_ || in_flight_ >= capacity_) return std::nullopt;
  Job job{std::move(line), std::move(reference), std::move(options), {}};
  auto future = job.promise.get_future();
  waiting_.push_back(std::move(job));
  ++in_flight_;
  ready_.notify_one();
  return future;
}

int JobQueue::in_flight() const {
  std::lock_guard lock(mutex_);
  return in_flight_;
}

void JobQueue::run() {
  for (;;) {
    Job job;
    {
      std::unique_lock lock(mutex_);
      ready_.wait(lock, [this] { return stopping_ || !waiting_.empty(); });
      if (waiting_.empty()) return;
      job = std::move(waiting_.front());
      waiting_.pop_front();
    }
    try {
      job.promise.set_value(handler_(job.line, job.reference, job.options));
    } catch (...) {
      job.promise.set_exception(std::current_exception());
    }
    std::lock_guard lock(mutex_);
    --in_flight_;
  }
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length is not a multiple of 4");
  std::vector<unsigned char> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("base64: invalid input");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("bind address must be HOST:PORT, got '" + bind + "'");
  int port = -1;
  const char* first = bind.data() + colon + 1;
  const char* last = bind.data() + bind.size();
  const auto [ptr, ec] = std::from_chars(first, last, port);
  if (ec != std::errc() || ptr != last || port < 0 || port > 65535)
    throw ConfigError("bind address has an invalid port: '" + bind + "'");
  return {bind.substr(0, colon), port};
}

namespace {

bool is_png(const std::string& bytes) {
  static const std::string sig("\x89PNG\r\n\x1a\n", 8);
  return bytes.compare(0, sig.size(), sig) == 0;
}

void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& reason) {
  send_json(res, status, Json{{"error", reason}});
}

std::optional<int> int_field(const httplib::Request& req, const char* name) {
  std::string text;
  if (req.has_file(name)) text = req.get_file_value(name).content;
  else if (req.has_param(name)) text = req.get_param_value(name);
  else return std::nullopt;
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw InputError(std::string("field '") + name + "' is not an integer");
  return value;
}

Tensor<float> decode_upload(const httplib::Request& req, const char* name, int channels) {
  if (!req.has_file(name)) throw InputError(std::string("missing multipart field '") + name + "'");
  const std::string& bytes = req.get_file_value(name).content;
  if (!is_png(bytes)) throw InputError(std::string("field '") + name + "' is not a PNG image");
  return io::decode_image(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()), channels);
}

}  // namespace

struct Server::Impl {
  ModelInfo info;
  JobQueue queue;
  httplib::Server http;

  Impl(ModelInfo i, ColorizeHandler handler, int max_queue) : info(std::move(i)), queue(max_queue, std::move(handler)) {
    http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    http.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    http.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, Json{{"status", "ok"}, {"checkpoint_hash", info.checkpoint_hash}, {"stage", info.stage}});
    });
    http.Get("/v1/model",
             [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, info.summary); });
    http.Post("/v1/colorize", [this](const httplib::Request& req, httplib::Response& res) { colorize(req, res); });
  }

  void colorize(const httplib::Request& req, httplib::Response& res) {
    Tensor<float> line;
    Tensor<float> reference;
    ColorizeOptions options;
    try {
      if (!req.is_multipart_form_data()) throw InputError("expected multipart/form-data with line and reference");
      line = decode_upload(req, "line", 3);
      reference = decode_upload(req, "reference", 3);
      options.ddim_steps = int_field(req, "steps");
      if (const auto seed = int_field(req, "seed")) options.seed = static_cast<std::uint64_t>(*seed);
    } catch (const Error& e) {
      send_error(res, 400, e.what());
      return;
    }
    auto future = queue.submit(std::move(line), std::move(reference), options);
    if (!future) {
      send_error(res, 429, "queue full");
      return;
    }
    try {
      const ColorizeResult r = future->get();
      send_json(res, 200,
                Json{{"image_png_base64", base64_encode(r.png)},
                     {"elapsed_ms", r.elapsed_ms},
                     {"checkpoint_hash", r.checkpoint_hash},
                     {"steps", r.steps},
                     {"width", r.image.width},
                     {"height", r.image.height}});
    } catch (const InputError& e) {
      send_error(res, 400, e.what());
    } catch (const ParameterError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      spdlog::error("colorize failed: {}", e.what());
      send_error(res, 500, e.what());
    }
  }
};

Server::Server(ModelInfo info, ColorizeHandler handler, int max_queue)
    : impl_(std::make_unique<Impl>(std::move(info), std::move(handler), max_queue)) {}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->http.bind_to_any_port(host);
    if (p <= 0) throw ConfigError("cannot bind " + host);
    return p;
  }
  if (!impl_->http.bind_to_port(host, port)) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Server::run() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace animediff::service
