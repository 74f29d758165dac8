#include "animediff/checkpoint.hpp"

#include <fstream>

#include "animediff/image_io.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace animediff;

namespace {

Checkpoint toy_checkpoint(std::uint64_t seed = 3) {
  const Denoiser<float> model(testing::tiny_config(8), seed);
  return Checkpoint::capture(model, ScheduleConfig{}, diffusion::SamplerConfig::uniform(1000, 10, 0.0),
                             lineart::XDoGParams{}, Stage::finetuned);
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) { return io::read_file(p); }

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) { io::write_file(p, b); }

}  // namespace

TEST_CASE("sha256 matches the published test vectors") {
  const std::string abc = "abc";
  CHECK(sha256_hex_digest({reinterpret_cast<const unsigned char*>(abc.data()), abc.size()}) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex_digest({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("save then load restores weights bit for bit") {
  const auto dir = testing::scratch_dir("ckpt_roundtrip");
  const auto path = dir / "model.ckpt";
  Checkpoint ck = toy_checkpoint();
  ck.seed = 77;
  ck.step = 1234;
  ck.rng_state = "engine state";
  ck.xdog.k = 5.2;
  ck.save(path);
  CHECK(ck.hash.size() == 64);
  CHECK_FALSE(std::filesystem::exists(dir / "model.ckpt.tmp"));

  const Checkpoint back = Checkpoint::load(path);
  CHECK(back.hash == ck.hash);
  CHECK(back.model == ck.model);
  CHECK(back.schedule == ck.schedule);
  CHECK(back.sampler.times == ck.sampler.times);
  CHECK(back.stage == Stage::finetuned);
  CHECK(back.seed == 77);
  CHECK(back.step == 1234);
  CHECK(back.rng_state == "engine state");
  CHECK(back.xdog.k == 5.2);
  REQUIRE(back.parameters.size() == ck.parameters.size());
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    CHECK(back.parameters[i].first == ck.parameters[i].first);
    CHECK(back.parameters[i].second == ck.parameters[i].second);
  }

  const auto original = Denoiser<float>(testing::tiny_config(8), 3);
  const auto rebuilt = back.build_model();
  CHECK(checksum<float>(rebuilt->flat_parameters()) == checksum<float>(original.flat_parameters()));
  const Tensor<float> x = testing::gaussian_tensor<float>(1, 7, 8, 8, 1);
  CHECK(checksum(rebuilt->forward(x, std::vector<int>{5}).data) ==
        checksum(original.forward(x, std::vector<int>{5}).data));

  // Saving the loaded checkpoint reproduces the file exactly.
  Checkpoint again = back;
  again.save(dir / "again.ckpt");
  CHECK(read_bytes(dir / "again.ckpt") == read_bytes(path));
}

TEST_CASE("optimizer moments round trip") {
  const auto dir = testing::scratch_dir("ckpt_optimizer");
  Denoiser<float> model(testing::tiny_config(8), 4);
  Adam<float> adam(model.parameters(), AdamOptions{1e-3});
  for (auto* p : model.parameters()) p->grad = Matrix<float>::Constant(p->value.rows(), p->value.cols(), 0.25f);
  adam.step();
  adam.step();
  Checkpoint ck = Checkpoint::capture(model, ScheduleConfig{}, diffusion::SamplerConfig::uniform(1000, 10, 0.0),
                                      lineart::XDoGParams{}, Stage::pretrained);
  ck.capture_optimizer(adam);
  ck.save(dir / "opt.ckpt");

  const Checkpoint back = Checkpoint::load(dir / "opt.ckpt");
  REQUIRE(back.optimizer.has_value());
  Denoiser<float> restored(testing::tiny_config(8), 99);
  back.load_into(restored);
  Adam<float> adam2(restored.parameters(), AdamOptions{1e-3});
  back.restore_optimizer(adam2);
  CHECK(adam2.steps() == 2);
  for (std::size_t i = 0; i < adam.first_moments().size(); ++i) {
    CHECK(adam2.first_moments()[i] == adam.first_moments()[i]);
    CHECK(adam2.second_moments()[i] == adam.second_moments()[i]);
  }
  // One more identical step keeps both copies in lockstep.
  for (auto* p : model.parameters()) p->grad.setConstant(-0.5f);
  for (auto* p : restored.parameters()) p->grad.setConstant(-0.5f);
  adam.step();
  adam2.step();
  CHECK(model.flat_parameters() == restored.flat_parameters());

  Checkpoint plain = toy_checkpoint();
  CHECK_THROWS_AS(plain.restore_optimizer(adam2), FormatError);
}

TEST_CASE("damaged files are refused with specific errors") {
  const auto dir = testing::scratch_dir("ckpt_damage");
  const auto path = dir / "model.ckpt";
  Checkpoint ck = toy_checkpoint();
  ck.save(path);
  const auto bytes = read_bytes(path);

  SUBCASE("empty file") {
    write_bytes(path, {});
    CHECK_THROWS_AS(Checkpoint::load(path), HashError);
  }
  SUBCASE("truncated") {
    for (std::size_t keep : {bytes.size() - 1, bytes.size() / 2, std::size_t{10}}) {
      write_bytes(path, std::vector<unsigned char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(keep)));
      CHECK_THROWS_AS(Checkpoint::load(path), HashError);
    }
  }
  SUBCASE("flipped payload byte") {
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x40;
    write_bytes(path, bad);
    CHECK_THROWS_AS(Checkpoint::load(path), HashError);
  }
  SUBCASE("wrong magic") {
    auto bad = bytes;
    bad[0] = 'X';
    write_bytes(path, bad);
    CHECK_THROWS_AS(Checkpoint::load(path), FormatError);
    std::ofstream(path) << "hello world, this is not a model";
    CHECK_THROWS_AS(Checkpoint::load(path), FormatError);
  }
  SUBCASE("future format version") {
    auto bad = bytes;
    bad[8] = 2;
    write_bytes(path, bad);
    try {
      Checkpoint::load(path);
      FAIL("expected UnsupportedVersionError");
    } catch (const UnsupportedVersionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find('2') != std::string::npos);
      CHECK(msg.find('1') != std::string::npos);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS(Checkpoint::load(dir / "absent.ckpt")); }
}

TEST_CASE("weights must match the configured layout") {
  Checkpoint ck = toy_checkpoint();
  Denoiser<float> other(DenoiserConfig::toy(), 1);
  CHECK_THROWS_AS(ck.load_into(other), FormatError);
  ck.parameters.pop_back();
  CHECK_THROWS_AS(ck.build_model(), FormatError);
}

TEST_CASE("summary reports stage, size and hash") {
  const auto dir = testing::scratch_dir("ckpt_summary");
  Checkpoint ck = toy_checkpoint();
  ck.save(dir / "m.ckpt");
  const Json s = ck.summary();
  CHECK(s["stage"] == "finetuned");
  CHECK(s["image_size"] == 8);
  CHECK(s["checkpoint_hash"] == ck.hash);
  CHECK(s["parameter_count"] == Denoiser<float>(testing::tiny_config(8), 0).parameter_count());
  CHECK(parse_stage("pretrained") == Stage::pretrained);
  CHECK_THROWS_AS(parse_stage("half"), FormatError);
}
