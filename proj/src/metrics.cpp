#include "animediff/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "animediff/checkpoint.hpp"
#include "animediff/image_io.hpp"
#include "json.hpp"

namespace animediff::metrics {

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> window_taps() {
  std::vector<double> taps(kWindow);
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    taps[i] = std::exp(-0.5 * d * d / (kWindowSigma * kWindowSigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

// Separable Gaussian filter keeping only fully covered positions.
Plane<double> filter_valid(const Plane<double>& x, const std::vector<double>& taps) {
  const Eigen::Index h = x.rows() - kWindow + 1;
  const Eigen::Index w = x.cols() - kWindow + 1;
  Plane<double> rows(x.rows(), w);
  for (Eigen::Index y = 0; y < x.rows(); ++y)
    for (Eigen::Index j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * x(y, j + k);
      rows(y, j) = acc;
    }
  Plane<double> out(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * rows(i + k, j);
      out(i, j) = acc;
    }
  return out;
}

struct SsimTerms {
  double luminance_structure;  // mean of l * cs
  double contrast_structure;   // mean of cs
};

SsimTerms ssim_terms(const Plane<double>& a, const Plane<double>& b, const std::vector<double>& taps) {
  const Plane<double> mu_a = filter_valid(a, taps);
  const Plane<double> mu_b = filter_valid(b, taps);
  const Plane<double> var_a = filter_valid(a * a, taps) - mu_a * mu_a;
  const Plane<double> var_b = filter_valid(b * b, taps) - mu_b * mu_b;
  const Plane<double> cov = filter_valid(a * b, taps) - mu_a * mu_b;
  const Plane<double> cs = (2.0 * cov + kC2) / (var_a + var_b + kC2);
  const Plane<double> l = (2.0 * mu_a * mu_b + kC1) / (mu_a * mu_a + mu_b * mu_b + kC1);
  return {(l * cs).mean(), cs.mean()};
}

Plane<double> pool2(const Plane<double>& x) {
  Plane<double> out(x.rows() / 2, x.cols() / 2);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(y, j) = 0.25 * (x(2 * y, 2 * j) + x(2 * y + 1, 2 * j) + x(2 * y, 2 * j + 1) + x(2 * y + 1, 2 * j + 1));
  return out;
}

Matrix<double> stack_features(const std::vector<Tensor<float>>& images, const FeatureExtractor& f) {
  if (images.empty()) throw InputError("fid: image set is empty");
  Matrix<double> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Vector<double> v = f.extract(images[i]);
    if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), v.size());
    if (v.size() != out.cols()) throw ShapeError("fid: feature length changed between images");
    out.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return out;
}

// Symmetric PSD square root with negative eigenvalues clamped to zero.
Matrix<double> sqrt_psd(const Matrix<double>& m) {
  Eigen::SelfAdjointEigenSolver<Matrix<double>> es(m);
  const Vector<double> root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<Tensor<float>> read_folder(const std::filesystem::path& dir) {
  std::vector<Tensor<float>> out;
  for (const auto& p : io::list_images(dir)) out.push_back(io::read_image(p, 3));
  return out;
}

}  // namespace

double psnr(const Tensor<float>& a, const Tensor<float>& b, double cap) {
  if (!a.same_shape(b)) throw ShapeError("psnr: image shapes differ");
  if (a.empty()) throw ShapeError("psnr: empty image");
  const double mse = (a.data.cast<double>() - b.data.cast<double>()).squaredNorm() / static_cast<double>(a.size());
  if (mse == 0.0) return cap;
  return std::min(cap, -10.0 * std::log10(mse));
}

int ms_ssim_scales(int min_side) {
  int scales = 0;
  for (int m = 1; m <= 5; ++m)
    if (min_side > (kWindow - 1) * (1 << (m - 1))) scales = m;
  return scales;
}

double ms_ssim(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.empty()) throw ShapeError("ms_ssim: empty image");
  if (!a.same_shape(b)) throw ShapeError("ms_ssim: image shapes differ");
  if (a.batch != 1) throw ShapeError("ms_ssim: expected single images");
  const int scales = ms_ssim_scales(std::min(a.height, a.width));
  if (scales == 0) throw ShapeError("ms_ssim: image smaller than the 11x11 window");

  double weight_total = 0.0;
  for (int m = 0; m < scales; ++m) weight_total += kMsSsimWeights[m];
  const auto taps = window_taps();

  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    Plane<double> x = a.plane(0, c).cast<double>();
    Plane<double> y = b.plane(0, c).cast<double>();
    double value = 1.0;
    for (int m = 0; m < scales; ++m) {
      const SsimTerms terms = ssim_terms(x, y, taps);
      const double w = kMsSsimWeights[m] / weight_total;
      const double term = m + 1 == scales ? terms.luminance_structure : terms.contrast_structure;
      value *= std::pow(std::max(term, 0.0), w);
      if (m + 1 < scales) {
        x = pool2(x);
        y = pool2(y);
      }
    }
    total += value;
  }
  return total / a.channels;
}

Vector<double> IdentityFeatures::extract(const Tensor<float>& image) const {
  Vector<double> v(image.size());
  Eigen::Index i = 0;
  for (int c = 0; c < image.channels; ++c)
    for (Eigen::Index j = 0; j < image.data.cols(); ++j) v(i++) = image.data(c, j);
  return v;
}

RandomProjectionFeatures::RandomProjectionFeatures(int dim, int input_size, std::uint64_t seed)
    : input_size_(input_size) {
  if (dim < 1 || input_size < 1) throw ParameterError("random projection: dim and input size must be positive");
  Rng rng(seed);
  const int in = 3 * input_size * input_size;
  projection_.resize(dim, in);
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index j = 0; j < projection_.cols(); ++j)
    for (Eigen::Index i = 0; i < projection_.rows(); ++i) projection_(i, j) = scale * rng.normal();
}

Vector<double> RandomProjectionFeatures::extract(const Tensor<float>& image) const {
  Tensor<float> rgb = image;
  if (rgb.channels == 1) rgb = concat_channels({&image, &image, &image});
  const Tensor<float> small = io::resize(rgb, input_size_, input_size_);
  return projection_ * IdentityFeatures().extract(small);
}

PinnedLinearFeatures::PinnedLinearFeatures(const std::filesystem::path& path, const std::string& sha256_hex) {
  const auto bytes = io::read_file(path);
  const std::string digest = sha256_hex_digest(bytes);
  if (digest != sha256_hex)
    throw HashError("feature weights " + path.string() + ": sha256 " + digest + " does not match pinned " +
                    sha256_hex);
  constexpr char kMagic[8] = {'A', 'D', 'F', 'E', 'A', 'T', '0', '1'};
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw FormatError("feature weights: bad magic");
  std::uint32_t dim = 0;
  std::uint32_t size = 0;
  std::memcpy(&dim, bytes.data() + 8, 4);
  std::memcpy(&size, bytes.data() + 12, 4);
  const std::size_t in = 3ULL * size * size;
  if (dim == 0 || size == 0 || bytes.size() != 16 + 4ULL * dim * in)
    throw FormatError("feature weights: size does not match header");
  input_size_ = static_cast<int>(size);
  weights_.resize(dim, static_cast<Eigen::Index>(in));
  const unsigned char* p = bytes.data() + 16;
  for (Eigen::Index r = 0; r < weights_.rows(); ++r)
    for (Eigen::Index c = 0; c < weights_.cols(); ++c, p += 4) {
      float v = 0.0f;
      std::memcpy(&v, p, 4);
      weights_(r, c) = v;
    }
}

Vector<double> PinnedLinearFeatures::extract(const Tensor<float>& image) const {
  Tensor<float> rgb = image;
  if (rgb.channels == 1) rgb = concat_channels({&image, &image, &image});
  return weights_ * IdentityFeatures().extract(io::resize(rgb, input_size_, input_size_));
}

double frechet_distance(const Matrix<double>& fa, const Matrix<double>& fb) {
  if (fa.rows() == 0 || fb.rows() == 0) throw InputError("fid: feature set is empty");
  if (fa.cols() != fb.cols()) throw ShapeError("fid: feature dimensions differ");
  const Eigen::Index dim = fa.cols();
  if (fa.rows() <= dim || fb.rows() <= dim)
    spdlog::warn("fid: {} and {} samples for {} features; covariance is singular", fa.rows(), fb.rows(), dim);

  auto moments = [](const Matrix<double>& f) {
    const Vector<double> mu = f.colwise().mean().transpose();
    const Matrix<double> centered = f.rowwise() - mu.transpose();
    const double denom = f.rows() > 1 ? static_cast<double>(f.rows() - 1) : 1.0;
    return std::pair<Vector<double>, Matrix<double>>{mu, centered.transpose() * centered / denom};
  };
  const auto [mu_a, cov_a] = moments(fa);
  const auto [mu_b, cov_b] = moments(fb);

  // Tr sqrt(A B) = Tr sqrt(A^1/2 B A^1/2), the latter being symmetric PSD.
  const Matrix<double> root_a = sqrt_psd(cov_a);
  const Matrix<double> inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Matrix<double>> es((inner + inner.transpose()) / 2.0, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

double fid(const std::vector<Tensor<float>>& set_a, const std::vector<Tensor<float>>& set_b,
           const FeatureExtractor& features) {
  return frechet_distance(stack_features(set_a, features), stack_features(set_b, features));
}

double fid(const std::filesystem::path& folder_a, const std::filesystem::path& folder_b,
           const FeatureExtractor& features) {
  return fid(read_folder(folder_a), read_folder(folder_b), features);
}

Protocol parse_protocol(const std::string& name) {
  if (name == "self" || name == "self_reference") return Protocol::self_reference;
  if (name == "random" || name == "random_reference") return Protocol::random_reference;
  throw ParameterError("unknown protocol '" + name + "' (expected self or random)");
}

std::string to_string(Protocol protocol) {
  return protocol == Protocol::self_reference ? "self_reference" : "random_reference";
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = metrics::to_string(protocol);
  j["n_images"] = n_images;
  if (psnr_mean) j["psnr_mean"] = *psnr_mean;
  if (msssim_mean) j["msssim_mean"] = *msssim_mean;
  if (fid) j["fid"] = *fid;
  return j.dump(2);
}

}  // namespace animediff::metrics
