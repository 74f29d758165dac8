#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::io {

/// Decode PNG or JPEG bytes (detected by signature) into a 1xCxHxW tensor in
/// [0, 1]. `channels` is 1 (gray) or 3 (RGB); color conversion is done by the decoder.
Tensor<float> decode_image(std::span<const unsigned char> bytes, int channels = 3);

Tensor<float> read_image(const std::filesystem::path& path, int channels = 3);

/// 8-bit PNG of a 1x1xHxW or 1x3xHxW [0, 1] tensor; values are clamped and rounded.
std::vector<unsigned char> encode_png(const Tensor<float>& image);

void write_png(const std::filesystem::path& path, const Tensor<float>& image);

/// Whole-file read.
std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);

/// True for .png, .jpg and .jpeg (case-insensitive).
bool is_image_file(const std::filesystem::path& path);

/// Sorted list of image files directly inside `dir`.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Separable triangle-filter resampling; the filter widens when shrinking so
/// downscaling averages instead of aliasing.
Tensor<float> resize(const Tensor<float>& image, int height, int width);

/// Aspect-preserving resize so the short side equals `size`, then center crop to size x size.
Tensor<float> resize_center_crop(const Tensor<float>& image, int size);

}  // namespace animediff::io
