#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::data {

enum class Split { train, test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ManifestEntry {
  std::string id;
  std::string color_path;  ///< relative to the manifest's folder
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int image_size = 0;
  std::string created_at;  ///< ISO-8601 UTC
  std::string tool_version;

  [[nodiscard]] std::string to_json_text() const;
  static DatasetManifest from_json_text(const std::string& text);

  /// Throws FormatError when the file is not a manifest.
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  [[nodiscard]] std::vector<ManifestEntry> split_entries(Split split) const;
};

struct SplitSpec {
  std::optional<int> test_count;  ///< takes precedence over the ratio
  double test_ratio = 0.0;
};

/// Resizes (aspect-preserving, then center crop) every readable image of `src`
/// to image_size, writes them as PNG under out/images and writes
/// out/manifest.json. Files are visited in sorted order and the test split is
/// chosen by a seeded shuffle, so reruns over the same input agree.
DatasetManifest prepare_dataset(const std::filesystem::path& src, const std::filesystem::path& out, int image_size,
                                const SplitSpec& split, std::uint64_t seed);

struct ManifestIssue {
  enum class Kind { missing_file, duplicate_id, split_overlap };
  Kind kind;
  std::string id;
  std::string message;
};

std::string to_string(ManifestIssue::Kind kind);

/// Missing files (resolved against `base_dir`), duplicate ids and entries
/// shared between splits. Empty means valid.
std::vector<ManifestIssue> validate_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir);

/// Color images addressed by index, resized to a square size on load.
class ImageDataset {
 public:
  struct Item {
    std::string id;
    std::filesystem::path path;
  };

  ImageDataset(std::vector<Item> items, int image_size, bool cache = false);

  /// Entries of one split of the manifest at dir/manifest.json.
  static ImageDataset from_manifest(const std::filesystem::path& dir, Split split, int image_size, bool cache = false);
  /// Every image directly inside `dir`, sorted by name.
  static ImageDataset from_folder(const std::filesystem::path& dir, int image_size, bool cache = false);
  /// In-memory images (already sized); used by tests and tools.
  static ImageDataset from_images(std::vector<Tensor<float>> images, std::vector<std::string> ids = {});

  [[nodiscard]] std::size_t size() const { return items_.size(); }
  [[nodiscard]] bool empty() const { return items_.empty(); }
  [[nodiscard]] const Item& item(std::size_t i) const { return items_.at(i); }
  [[nodiscard]] int image_size() const { return image_size_; }

  /// 1x3xSxS image in [0, 1], or nullopt (with a warning) when unreadable.
  [[nodiscard]] std::optional<Tensor<float>> load(std::size_t i) const;

 private:
  std::vector<Item> items_;
  int image_size_;
  bool cache_;
  mutable std::vector<std::optional<Tensor<float>>> cached_;
};

}  // namespace animediff::data
