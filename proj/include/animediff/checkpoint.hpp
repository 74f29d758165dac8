#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "animediff/config.hpp"
#include "animediff/denoiser.hpp"
#include "animediff/optim.hpp"

namespace animediff {

/// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex_digest(std::span<const unsigned char> bytes);

enum class Stage { pretrained, finetuned };

Stage parse_stage(const std::string& name);
std::string to_string(Stage stage);

struct OptimizerState {
  AdamOptions options;
  std::uint64_t steps = 0;
  std::vector<Matrix<float>> first;
  std::vector<Matrix<float>> second;
};

/// Self-describing model container.
///
/// File layout: 8-byte magic "ADCKPT\0\0", uint32 format version, uint64 header
/// length, UTF-8 JSON header, float32 parameter values in header order
/// (column-major per matrix), optional float32 Adam moments, then a 32-byte
/// SHA-256 of everything before it. Integers are little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  DenoiserConfig model;
  ScheduleConfig schedule;
  diffusion::SamplerConfig sampler;  ///< the fixed ladder shared by fine-tuning and inference
  lineart::XDoGParams xdog;          ///< line re-styling at inference
  Stage stage = Stage::pretrained;
  std::uint64_t seed = 0;
  long step = 0;                     ///< training steps taken so far
  std::string rng_state;             ///< training data stream, for exact resumption
  std::vector<std::pair<std::string, Matrix<float>>> parameters;
  std::optional<OptimizerState> optimizer;
  std::string hash;                  ///< hex content hash; filled by save and load

  /// Snapshot of a model's weights.
  static Checkpoint capture(const Denoiser<float>& model, const ScheduleConfig& schedule,
                            const diffusion::SamplerConfig& sampler, const lineart::XDoGParams& xdog, Stage stage);

  void capture_optimizer(const Adam<float>& adam);

  /// New model with these weights. Names and shapes must match the config's layout.
  [[nodiscard]] std::unique_ptr<Denoiser<float>> build_model() const;
  void load_into(Denoiser<float>& model) const;
  /// Restores the Adam moments; throws FormatError when absent or mismatched.
  void restore_optimizer(Adam<float>& adam) const;

  [[nodiscard]] std::vector<unsigned char> serialize() const;
  static Checkpoint deserialize(std::span<const unsigned char> bytes);

  /// Writes atomically (temporary file then rename) and sets `hash`.
  void save(const std::filesystem::path& path);
  static Checkpoint load(const std::filesystem::path& path);

  /// Summary for the service's model endpoint.
  [[nodiscard]] Json summary() const;
};

}  // namespace animediff
