#include "animediff/datapipe.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "animediff/image_io.hpp"
#include "animediff/version.hpp"
#include "json.hpp"

namespace animediff::data {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw FormatError("unknown split '" + name + "'");
}

std::string DatasetManifest::to_json_text() const {
  Json entries_json = Json::array();
  for (const auto& e : entries)
    entries_json.push_back(Json{{"id", e.id}, {"color_path", e.color_path}, {"split", to_string(e.split)}});
  const Json j{{"entries", entries_json},
               {"image_size", image_size},
               {"created_at", created_at},
               {"tool_version", tool_version}};
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json_text(const std::string& text) {
  DatasetManifest m;
  try {
    const Json j = Json::parse(text);
    for (const auto& e : j.at("entries"))
      m.entries.push_back({e.at("id").get<std::string>(), e.at("color_path").get<std::string>(),
                           parse_split(e.at("split").get<std::string>())});
    m.image_size = j.at("image_size").get<int>();
    m.created_at = j.value("created_at", "");
    m.tool_version = j.value("tool_version", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("manifest: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void DatasetManifest::save(const fs::path& path) const {
  const std::string text = to_json_text();
  io::write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::vector<ManifestEntry> DatasetManifest::split_entries(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [split](const ManifestEntry& e) { return e.split == split; });
  return out;
}

DatasetManifest prepare_dataset(const fs::path& src, const fs::path& out, int image_size, const SplitSpec& split,
                                std::uint64_t seed) {
  if (image_size < 1) throw ParameterError("prepare_dataset: image_size must be positive");
  if (split.test_count && *split.test_count < 0) throw ParameterError("prepare_dataset: negative test count");
  if (split.test_ratio < 0.0 || split.test_ratio >= 1.0)
    throw ParameterError("prepare_dataset: test ratio must be in [0, 1)");

  std::vector<ManifestEntry> entries;
  std::set<std::string> ids;
  for (const auto& path : io::list_images(src)) {
    Tensor<float> image;
    try {
      image = io::read_image(path, 3);
    } catch (const Error& e) {
      spdlog::warn("prepare-data: skipping {}: {}", path.string(), e.what());
      continue;
    }
    std::string id = path.stem().string();
    if (ids.count(id)) id += "_" + path.extension().string().substr(1);
    ids.insert(id);
    const std::string rel = "images/" + id + ".png";
    io::write_png(out / rel, io::resize_center_crop(image, image_size));
    entries.push_back({id, rel, Split::train});
  }
  if (entries.empty()) throw InputError("prepare_dataset: no readable images in " + src.string());

  const int n = static_cast<int>(entries.size());
  const int n_test = split.test_count ? *split.test_count : static_cast<int>(std::lround(split.test_ratio * n));
  if (n_test >= n)
    throw ParameterError("prepare_dataset: test count " + std::to_string(n_test) + " leaves no training images out of " +
                         std::to_string(n));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (int i = 0; i < n_test; ++i) entries[order[i]].split = Split::test;

  DatasetManifest m;
  m.entries = std::move(entries);
  m.image_size = image_size;
  m.created_at = utc_now();
  m.tool_version = kToolVersion;
  m.save(out / "manifest.json");
  return m;
}

std::string to_string(ManifestIssue::Kind kind) {
  switch (kind) {
    case ManifestIssue::Kind::missing_file: return "missing_file";
    case ManifestIssue::Kind::duplicate_id: return "duplicate_id";
    case ManifestIssue::Kind::split_overlap: return "split_overlap";
  }
  return "unknown";
}

std::vector<ManifestIssue> validate_manifest(const DatasetManifest& manifest, const fs::path& base_dir) {
  std::vector<ManifestIssue> issues;
  std::map<std::string, std::vector<const ManifestEntry*>> by_id;
  std::map<std::string, std::set<Split>> splits_by_path;
  for (const auto& e : manifest.entries) {
    if (!fs::is_regular_file(base_dir / e.color_path))
      issues.push_back({ManifestIssue::Kind::missing_file, e.id, "missing file " + e.color_path});
    by_id[e.id].push_back(&e);
    splits_by_path[e.color_path].insert(e.split);
  }
  for (const auto& [id, group] : by_id) {
    if (group.size() < 2) continue;
    std::set<Split> splits;
    for (const auto* e : group) splits.insert(e->split);
    if (splits.size() > 1)
      issues.push_back({ManifestIssue::Kind::split_overlap, id, "id " + id + " appears in both train and test"});
    else
      issues.push_back({ManifestIssue::Kind::duplicate_id, id,
                        "id " + id + " appears " + std::to_string(group.size()) + " times"});
  }
  for (const auto& [path, splits] : splits_by_path) {
    if (splits.size() < 2) continue;
    // Already reported above when the shared entries also share an id.
    std::set<std::string> owners;
    for (const auto& e : manifest.entries)
      if (e.color_path == path) owners.insert(e.id);
    if (owners.size() > 1)
      issues.push_back({ManifestIssue::Kind::split_overlap, *owners.begin(), "file " + path + " is used by both splits"});
  }
  return issues;
}

ImageDataset::ImageDataset(std::vector<Item> items, int image_size, bool cache)
    : items_(std::move(items)), image_size_(image_size), cache_(cache), cached_(items_.size()) {
  if (image_size < 1) throw ParameterError("dataset: image_size must be positive");
}

ImageDataset ImageDataset::from_manifest(const fs::path& dir, Split split, int image_size, bool cache) {
  const auto manifest = DatasetManifest::load(dir / "manifest.json");
  std::vector<Item> items;
  for (const auto& e : manifest.split_entries(split)) items.push_back({e.id, dir / e.color_path});
  return ImageDataset(std::move(items), image_size, cache);
}

ImageDataset ImageDataset::from_folder(const fs::path& dir, int image_size, bool cache) {
  std::vector<Item> items;
  for (const auto& p : io::list_images(dir)) items.push_back({p.stem().string(), p});
  return ImageDataset(std::move(items), image_size, cache);
}

ImageDataset ImageDataset::from_images(std::vector<Tensor<float>> images, std::vector<std::string> ids) {
  if (images.empty()) throw InputError("dataset: no images");
  const int size = images.front().height;
  std::vector<Item> items;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].batch != 1 || images[i].channels != 3 || images[i].height != size || images[i].width != size)
      throw ShapeError("dataset: in-memory images must be 1x3xSxS with a common S");
    items.push_back({i < ids.size() ? ids[i] : std::to_string(i), {}});
  }
  ImageDataset d(std::move(items), size, true);
  for (std::size_t i = 0; i < images.size(); ++i) d.cached_[i] = std::move(images[i]);
  return d;
}

std::optional<Tensor<float>> ImageDataset::load(std::size_t i) const {
  if (cached_.at(i)) return cached_[i];
  const Item& it = items_.at(i);
  try {
    Tensor<float> image = io::read_image(it.path, 3);
    if (image.height != image_size_ || image.width != image_size_) image = io::resize_center_crop(image, image_size_);
    if (cache_) cached_[i] = image;
    return image;
  } catch (const Error& e) {
    spdlog::warn("dataset: skipping unreadable image {}: {}", it.path.string(), e.what());
    return std::nullopt;
  }
}

}  // namespace animediff::data
