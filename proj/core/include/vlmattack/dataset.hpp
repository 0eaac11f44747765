#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace vlmattack {

enum class Polarity { positive, negative };

std::optional<Polarity> polarity_from_id(std::string_view id);
std::string_view polarity_id(Polarity p);

struct QueryRecord {
  std::string query_id;
  std::string text;
  Polarity polarity = Polarity::positive;

  bool operator==(const QueryRecord&) const = default;
};

struct ImageEntry {
  std::string image_id;
  std::string image;  // path relative to the manifest directory
  std::string target_object;
  std::string target_prompt;
  std::vector<QueryRecord> queries;

  bool operator==(const ImageEntry&) const = default;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  int schema_version = kSchemaVersion;
  std::vector<ImageEntry> entries;
  std::filesystem::path base_dir;  // where relative image paths resolve; not serialized

  std::filesystem::path image_path(const ImageEntry& e) const { return base_dir / e.image; }
  const ImageEntry* find(std::string_view image_id) const;
  const QueryRecord* find_query(std::string_view query_id) const;
};

struct ManifestStats {
  std::size_t images = 0;
  std::size_t queries = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;

  bool operator==(const ManifestStats&) const = default;
  ManifestStats& operator+=(const ManifestStats& o);
};

struct LoadOptions {
  bool check_files = true;  // require every image path to exist
};

// Every problem found in a parsed document; empty means valid.
std::vector<std::string> validate_manifest_json(const nlohmann::json& doc);

// Parses and validates; throws ValidationError listing every violation.
DatasetManifest manifest_from_json(const nlohmann::json& doc);
nlohmann::json manifest_to_json(const DatasetManifest& m);

DatasetManifest load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

ManifestStats manifest_stats(const DatasetManifest& m);

}  // namespace vlmattack
