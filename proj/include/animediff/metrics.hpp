#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::metrics {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for [0, 1] images; identical inputs give `cap`.
double psnr(const Tensor<float>& a, const Tensor<float>& b, double cap = kPsnrCap);

/// Standard MS-SSIM weights for five scales.
inline constexpr double kMsSsimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Largest usable scale count (at most 5) for the given smaller image side,
/// or 0 when even one 11x11 window does not fit.
int ms_ssim_scales(int min_side);

/// Multi-scale SSIM of two single [0, 1] images, averaged over channels.
/// Uses an 11x11 Gaussian window (sigma 1.5) with valid borders and 2x2
/// average pooling between scales. Images below 161 px use fewer scales with
/// the leading weights renormalized to sum to one.
double ms_ssim(const Tensor<float>& a, const Tensor<float>& b);

/// Maps an image to a fixed-length feature vector.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  [[nodiscard]] virtual Vector<double> extract(const Tensor<float>& image) const = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

/// Flattened pixel values.
class IdentityFeatures final : public FeatureExtractor {
 public:
  [[nodiscard]] Vector<double> extract(const Tensor<float>& image) const override;
  [[nodiscard]] std::string name() const override { return "identity"; }
};

/// Fixed Gaussian random projection of the image resized to input_size x input_size.
class RandomProjectionFeatures final : public FeatureExtractor {
 public:
  RandomProjectionFeatures(int dim = 64, int input_size = 32, std::uint64_t seed = 2023);
  [[nodiscard]] Vector<double> extract(const Tensor<float>& image) const override;
  [[nodiscard]] std::string name() const override { return "random-projection"; }

 private:
  int input_size_;
  Matrix<double> projection_;
};

/// Linear feature map loaded from a weights file whose SHA-256 must match a
/// pinned digest. Layout: "ADFEAT01", uint32 dim, uint32 input_size, then
/// dim x (3 * input_size^2) float32 values row-major, all little-endian.
class PinnedLinearFeatures final : public FeatureExtractor {
 public:
  PinnedLinearFeatures(const std::filesystem::path& path, const std::string& sha256_hex);
  [[nodiscard]] Vector<double> extract(const Tensor<float>& image) const override;
  [[nodiscard]] std::string name() const override { return "pinned-linear"; }

 private:
  int input_size_ = 0;
  Matrix<double> weights_;
};

/// Frechet distance between Gaussian fits of two feature sets (one row per sample).
/// The matrix square root goes through symmetric eigendecompositions with
/// small negative eigenvalues clamped to zero.
double frechet_distance(const Matrix<double>& features_a, const Matrix<double>& features_b);

double fid(const std::vector<Tensor<float>>& set_a, const std::vector<Tensor<float>>& set_b,
           const FeatureExtractor& features);

/// Reads every image in both folders.
double fid(const std::filesystem::path& folder_a, const std::filesystem::path& folder_b,
           const FeatureExtractor& features);

enum class Protocol { self_reference, random_reference };

Protocol parse_protocol(const std::string& name);
std::string to_string(Protocol protocol);

struct EvalReport {
  Protocol protocol = Protocol::self_reference;
  int n_images = 0;
  std::optional<double> psnr_mean;
  std::optional<double> msssim_mean;
  std::optional<double> fid;

  /// JSON text; absent metrics are omitted.
  [[nodiscard]] std::string to_json() const;
};

}  // namespace animediff::metrics
