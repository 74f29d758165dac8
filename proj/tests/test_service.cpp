#include "animediff/service.hpp"

#include <atomic>
#include <chrono>

#include "animediff/image_io.hpp"
#include "animediff/synthetic.hpp"
#include "doctest.h"
#include "httplib.h"
#include "support.hpp"

using namespace animediff;
using namespace animediff::service;

namespace {

std::string png_of(const Tensor<float>& image) {
  const auto bytes = io::encode_png(image);
  return {bytes.begin(), bytes.end()};
}

// Server on a free loopback port, stopped and joined on scope exit.
class RunningServer {
 public:
  RunningServer(ModelInfo info, ColorizeHandler handler, int max_queue)
      : server_(std::move(info), std::move(handler), max_queue) {
    port_ = server_.bind("127.0.0.1", 0);
    thread_ = std::thread([this] { server_.run(); });
    server_.wait_until_ready();
  }
  ~RunningServer() {
    server_.stop();
    thread_.join();
  }
  [[nodiscard]] httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    return c;
  }

 private:
  Server server_;
  int port_ = 0;
  std::thread thread_;
};

httplib::MultipartFormDataItems upload(const std::string& line, const std::string& reference) {
  return {{"line", line, "line.png", "image/png"}, {"reference", reference, "reference.png", "image/png"}};
}

struct ToyModel {
  std::filesystem::path path;
  Checkpoint checkpoint;
  std::unique_ptr<Colorizer> colorizer;

  ToyModel() {
    path = testing::scratch_dir("service_model") / "toy.ckpt";
    const Denoiser<float> model(testing::tiny_config(16), 41);
    Checkpoint ck = Checkpoint::capture(model, ScheduleConfig{}, diffusion::SamplerConfig::uniform(1000, 3),
                                        lineart::XDoGParams{}, Stage::finetuned);
    ck.save(path);
    checkpoint = Checkpoint::load(path);
    colorizer = std::make_unique<Colorizer>(checkpoint);
  }

  [[nodiscard]] ModelInfo info() const { return {checkpoint.hash, to_string(checkpoint.stage), checkpoint.summary()}; }
  [[nodiscard]] ColorizeHandler handler() const {
    return [c = colorizer.get()](const Tensor<float>& l, const Tensor<float>& r, const ColorizeOptions& o) {
      return c->colorize(l, r, o);
    };
  }
};

}  // namespace

TEST_CASE("health, model and preflight endpoints") {
  const ToyModel toy;
  const RunningServer server(toy.info(), toy.handler(), 2);
  auto cli = server.client();

  const auto health = cli.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");
  const Json h = Json::parse(health->body);
  CHECK(h["status"] == "ok");
  CHECK(h["checkpoint_hash"] == toy.checkpoint.hash);
  CHECK(h["stage"] == "finetuned");

  const auto model = cli.Get("/v1/model");
  REQUIRE(model);
  CHECK(model->status == 200);
  const Json m = Json::parse(model->body);
  CHECK(m["image_size"] == 16);
  CHECK(m["schedule"]["T"] == 1000);
  CHECK(m["schedule"]["subsequence_steps"] == 3);

  const auto pre = cli.Options("/v1/colorize");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
}

TEST_CASE("colorize returns a png at the model resolution") {
  const ToyModel toy;
  const auto before = io::read_file(toy.path);
  const RunningServer server(toy.info(), toy.handler(), 2);
  auto cli = server.client();

  auto items = upload(png_of(synth::character(32, 1)), png_of(synth::character(20, 2)));
  items.push_back({"steps", "2", "", ""});
  const auto res = cli.Post("/v1/colorize", items);
  REQUIRE(res);
  CHECK(res->status == 200);
  const Json body = Json::parse(res->body);
  CHECK(body["steps"] == 2);
  CHECK(body["width"] == 16);
  CHECK(body["checkpoint_hash"] == toy.checkpoint.hash);
  CHECK(body["elapsed_ms"].get<double>() >= 0.0);
  const Tensor<float> img = io::decode_image(base64_decode(body["image_png_base64"].get<std::string>()), 3);
  CHECK(img.height == 16);
  CHECK(img.width == 16);

  // Identical requests give identical images.
  const auto again = cli.Post("/v1/colorize", items);
  REQUIRE(again);
  CHECK(Json::parse(again->body)["image_png_base64"] == body["image_png_base64"]);

  // Serving never writes to the checkpoint.
  CHECK(io::read_file(toy.path) == before);
}

TEST_CASE("malformed uploads are rejected with 400") {
  const ToyModel toy;
  const RunningServer server(toy.info(), toy.handler(), 2);
  auto cli = server.client();
  const std::string good = png_of(synth::character(16, 3));

  const auto missing = cli.Post("/v1/colorize", httplib::MultipartFormDataItems{{"line", good, "l.png", "image/png"}});
  REQUIRE(missing);
  CHECK(missing->status == 400);
  CHECK(Json::parse(missing->body)["error"].get<std::string>().find("reference") != std::string::npos);

  const auto not_png = cli.Post("/v1/colorize", upload(good, "GIF89a this is not a png"));
  REQUIRE(not_png);
  CHECK(not_png->status == 400);

  const auto broken = cli.Post("/v1/colorize", upload(good, good.substr(0, 40)));
  REQUIRE(broken);
  CHECK(broken->status == 400);

  auto bad_steps = upload(good, good);
  bad_steps.push_back({"steps", "ten", "", ""});
  const auto steps = cli.Post("/v1/colorize", bad_steps);
  REQUIRE(steps);
  CHECK(steps->status == 400);

  const auto json = cli.Post("/v1/colorize", R"({"line": 1})", "application/json");
  REQUIRE(json);
  CHECK(json->status == 400);
}

TEST_CASE("a full queue answers 429") {
  std::atomic<int> calls{0};
  const ColorizeHandler slow = [&](const Tensor<float>& line, const Tensor<float>&, const ColorizeOptions&) {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    ColorizeResult r;
    r.image = Tensor<float>::constant(1, 3, line.height, line.width, 0.5f);
    r.png = io::encode_png(r.image);
    r.steps = 1;
    return r;
  };
  const RunningServer server(ModelInfo{"hash", "finetuned", Json::object()}, slow, 1);
  const std::string png = png_of(synth::character(16, 4));
  std::vector<int> statuses(3, 0);
  std::vector<std::thread> clients;
  for (int i = 0; i < 3; ++i)
    clients.emplace_back([&, i] {
      auto cli = server.client();
      if (const auto res = cli.Post("/v1/colorize", upload(png, png))) statuses[i] = res->status;
    });
  for (auto& t : clients) t.join();
  CHECK(std::count(statuses.begin(), statuses.end(), 429) >= 1);
  CHECK(std::count(statuses.begin(), statuses.end(), 200) >= 1);
  CHECK(std::count(statuses.begin(), statuses.end(), 200) == calls.load());
}

TEST_CASE("job queue capacity counts the running job") {
  std::promise<void> release;
  std::shared_future<void> gate = release.get_future().share();
  const ColorizeHandler blocking = [gate](const Tensor<float>&, const Tensor<float>&, const ColorizeOptions& o) {
    gate.wait();
    ColorizeResult r;
    r.steps = o.ddim_steps.value_or(0);
    return r;
  };
  JobQueue queue(2, blocking);
  CHECK(queue.capacity() == 2);
  auto a = queue.submit({}, {}, ColorizeOptions{1});
  auto b = queue.submit({}, {}, ColorizeOptions{2});
  REQUIRE(a);
  REQUIRE(b);
  CHECK(queue.in_flight() == 2);
  CHECK_FALSE(queue.submit({}, {}, {}).has_value());
  release.set_value();
  CHECK(a->get().steps == 1);
  CHECK(b->get().steps == 2);
  for (int i = 0; i < 100 && queue.in_flight() > 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  CHECK(queue.in_flight() == 0);
  auto c = queue.submit({}, {}, ColorizeOptions{3});
  REQUIRE(c);
  CHECK(c->get().steps == 3);
  CHECK_THROWS(JobQueue(0, blocking));
}

TEST_CASE("handler failures reach the caller") {
  JobQueue queue(1, [](const Tensor<float>&, const Tensor<float>&, const ColorizeOptions&) -> ColorizeResult {
    throw InputError("bad input");
  });
  auto f = queue.submit({}, {}, {});
  REQUIRE(f);
  CHECK_THROWS_AS(f->get(), InputError);
}

TEST_CASE("bind addresses") {
  CHECK(parse_bind("127.0.0.1:8080") == std::pair<std::string, int>{"127.0.0.1", 8080});
  CHECK(parse_bind("0.0.0.0:0").second == 0);
  CHECK_THROWS_AS(parse_bind("localhost"), ConfigError);
  CHECK_THROWS_AS(parse_bind("localhost:http"), ConfigError);
  CHECK_THROWS_AS(parse_bind("localhost:70000"), ConfigError);
}

TEST_CASE("base64 follows the standard alphabet with padding") {
  auto enc = [](const std::string& s) { return base64_encode({s.begin(), s.end()}); };
  CHECK(enc("") == "");
  CHECK(enc("f") == "Zg==");
  CHECK(enc("fo") == "Zm8=");
  CHECK(enc("foo") == "Zm9v");
  CHECK(enc("foobar") == "Zm9vYmFy");
  std::vector<unsigned char> all(256);
  for (int i = 0; i < 256; ++i) all[i] = static_cast<unsigned char>(i);
  CHECK(base64_decode(base64_encode(all)) == all);
  CHECK_THROWS(base64_decode("not base64!"));
}
