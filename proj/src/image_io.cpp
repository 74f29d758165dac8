#include "animediff/image_io.hpp"

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace animediff::io {

namespace {

bool is_png(std::span<const unsigned char> b) {
  static constexpr unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

bool is_jpeg(std::span<const unsigned char> b) { return b.size() >= 3 && b[0] == 0xff && b[1] == 0xd8 && b[2] == 0xff; }

Tensor<float> from_interleaved(const std::vector<unsigned char>& px, int h, int w, int c) {
  Tensor<float> t(1, c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        t(0, ch, y, x) = static_cast<float>(px[(static_cast<std::size_t>(y) * w + x) * c + ch]) / 255.0f;
  return t;
}

Tensor<float> decode_png(std::span<const unsigned char> bytes, int channels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw InputError(std::string("png decode failed: ") + image.message);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw InputError("png decode failed: " + msg);
  }
  return from_interleaved(px, static_cast<int>(image.height), static_cast<int>(image.width), channels);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegErrorManager*>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

Tensor<float> decode_jpeg(std::span<const unsigned char> bytes, int channels) {
  jpeg_decompress_struct info{};
  JpegErrorManager err{};
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<unsigned char> px;
  int h = 0;
  int w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw InputError(std::string("jpeg decode failed: ") + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_mem_src(&info, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&info, TRUE);
  info.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&info);
  h = static_cast<int>(info.output_height);
  w = static_cast<int>(info.output_width);
  const int stride = w * static_cast<int>(info.output_components);
  px.resize(static_cast<std::size_t>(h) * stride);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = px.data() + static_cast<std::size_t>(info.output_scanline) * stride;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return from_interleaved(px, h, w, channels);
}

// Triangle-filter weights for resampling `in` samples onto `out` samples.
struct Taps {
  std::vector<int> first;
  std::vector<std::vector<double>> weights;
};

Taps resample_taps(int in, int out) {
  Taps taps;
  const double scale = static_cast<double>(in) / out;
  const double support = std::max(1.0, scale);
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - support)) + 1;
    const int hi = static_cast<int>(std::ceil(center + support)) - 1;
    std::vector<double> w;
    double total = 0.0;
    for (int j = lo; j <= hi; ++j) {
      const double v = std::max(0.0, 1.0 - std::abs(j - center) / support);
      w.push_back(v);
      total += v;
    }
    if (total <= 0.0) {
      w.assign(1, 1.0);
      taps.first.push_back(std::clamp(static_cast<int>(std::lround(center)), 0, in - 1));
    } else {
      for (double& v : w) v /= total;
      taps.first.push_back(lo);
    }
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

}  // namespace

Tensor<float> decode_image(std::span<const unsigned char> bytes, int channels) {
  if (channels != 1 && channels != 3) throw ParameterError("decode_image: channels must be 1 or 3");
  if (is_png(bytes)) return decode_png(bytes, channels);
  if (is_jpeg(bytes)) return decode_jpeg(bytes, channels);
  throw InputError("decode_image: not a PNG or JPEG stream");
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for " + path.string());
}

Tensor<float> read_image(const std::filesystem::path& path, int channels) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes, channels);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<unsigned char> encode_png(const Tensor<float>& image) {
  if (image.batch != 1 || (image.channels != 1 && image.channels != 3) || image.empty())
    throw ShapeError("encode_png: expected a single 1- or 3-channel image");
  const int c = image.channels;
  std::vector<unsigned char> px(static_cast<std::size_t>(image.height) * image.width * c);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const float v = std::clamp(image(0, ch, y, x), 0.0f, 1.0f);
        px[(static_cast<std::size_t>(y) * image.width + x) * c + ch] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, px.data(), 0, nullptr))
    throw InputError(std::string("png encode failed: ") + png.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, px.data(), 0, nullptr))
    throw InputError(std::string("png encode failed: ") + png.message);
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image) { write_file(path, encode_png(image)); }

bool is_image_file(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

Tensor<float> resize(const Tensor<float>& image, int height, int width) {
  if (height < 1 || width < 1) throw ParameterError("resize: target size must be positive");
  if (image.empty()) throw ShapeError("resize: empty image");
  if (image.height == height && image.width == width) return image;
  const Taps tx = resample_taps(image.width, width);
  const Taps ty = resample_taps(image.height, height);

  Tensor<float> horizontal(image.batch, image.channels, image.height, width);
  for (int n = 0; n < image.batch; ++n)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < width; ++x) {
        auto dst = horizontal.data.col(horizontal.column(n, y, x));
        for (std::size_t k = 0; k < tx.weights[x].size(); ++k) {
          const int sx = std::clamp(tx.first[x] + static_cast<int>(k), 0, image.width - 1);
          dst += static_cast<float>(tx.weights[x][k]) * image.data.col(image.column(n, y, sx));
        }
      }
  Tensor<float> out(image.batch, image.channels, height, width);
  for (int n = 0; n < image.batch; ++n)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        auto dst = out.data.col(out.column(n, y, x));
        for (std::size_t k = 0; k < ty.weights[y].size(); ++k) {
          const int sy = std::clamp(ty.first[y] + static_cast<int>(k), 0, image.height - 1);
          dst += static_cast<float>(ty.weights[y][k]) * horizontal.data.col(horizontal.column(n, sy, x));
        }
      }
  return out;
}

Tensor<float> resize_center_crop(const Tensor<float>& image, int size) {
  if (size < 1) throw ParameterError("resize_center_crop: size must be positive");
  if (image.empty()) throw ShapeError("resize_center_crop: empty image");
  const double scale = static_cast<double>(size) / std::min(image.height, image.width);
  const int h = std::max(size, static_cast<int>(std::lround(image.height * scale)));
  const int w = std::max(size, static_cast<int>(std::lround(image.width * scale)));
  const Tensor<float> scaled = resize(image, h, w);
  const int top = (h - size) / 2;
  const int left = (w - size) / 2;
  Tensor<float> out(image.batch, image.channels, size, size);
  for (int n = 0; n < image.batch; ++n)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.data.col(out.column(n, y, x)) = scaled.data.col(scaled.column(n, top + y, left + x));
  return out;
}

}  // namespace animediff::io
