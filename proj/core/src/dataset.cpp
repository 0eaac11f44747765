#include "vlmattack/dataset.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"
#include "vlmattack/io.hpp"

namespace vlmattack {

namespace fs = std::filesystem;

std::optional<Polarity> polarity_from_id(std::string_view id) {
  if (id == "positive") return Polarity::positive;
  if (id == "negative") return Polarity::negative;
  return std::nullopt;
}

std::string_view polarity_id(Polarity p) { return p == Polarity::positive ? "positive" : "negative"; }

const ImageEntry* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& e : entries) {
    if (e.image_id == image_id) return &e;
  }
  return nullptr;
}

const QueryRecord* DatasetManifest::find_query(std::string_view query_id) const {
  for (const auto& e : entries) {
    for (const auto& q : e.queries) {
      if (q.query_id == query_id) return &q;
    }
  }
  return nullptr;
}

ManifestStats& ManifestStats::operator+=(const ManifestStats& o) {
  images += o.images;
  queries += o.queries;
  positives += o.positives;
  negatives += o.negatives;
  return *this;
}

namespace {

bool non_empty_string(const nlohmann::json& obj, const char* key) {
  return obj.contains(key) && obj.at(key).is_string() && !obj.at(key).get<std::string>().empty();
}

}  // namespace

std::vector<std::string> validate_manifest_json(const nlohmann::json& doc) {
  std::vector<std::string> errors;
  if (!doc.is_object()) return {"manifest must be a JSON object"};

  if (!doc.contains("schema_version")) {
    errors.push_back("schema_version is missing");
  } else if (!doc.at("schema_version").is_number_integer()) {
    errors.push_back("schema_version must be an integer");
  } else if (doc.at("schema_version").get<int>() != DatasetManifest::kSchemaVersion) {
    errors.push_back("unsupported schema_version " + doc.at("schema_version").dump() +
                     " (expected " + std::to_string(DatasetManifest::kSchemaVersion) + ")");
  }
  if (!doc.contains("entries") || !doc.at("entries").is_array()) {
    errors.push_back("entries must be an array");
    return errors;
  }

  std::set<std::string> image_ids;
  std::set<std::string> query_ids;
  const auto& entries = doc.at("entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    std::string where = "entries[" + std::to_string(i) + "]";
    if (!e.is_object()) {
      errors.push_back(where + " must be an object");
      continue;
    }
    if (non_empty_string(e, "image_id")) {
      const auto id = e.at("image_id").get<std::string>();
      where += " (image_id " + id + ")";
      if (!image_ids.insert(id).second) errors.push_back(where + ": duplicate image_id");
    } else {
      errors.push_back(where + ": image_id must be a non-empty string");
    }
    for (const char* key : {"image", "target_object", "target_prompt"}) {
      if (!non_empty_string(e, key)) errors.push_back(where + ": " + key + " must be a non-empty string");
    }
    if (!e.contains("queries") || !e.at("queries").is_array()) {
      errors.push_back(where + ": queries must be an array");
      continue;
    }
    const auto& queries = e.at("queries");
    if (queries.empty()) errors.push_back(where + ": at least one query is required");
    for (std::size_t j = 0; j < queries.size(); ++j) {
      const auto& q = queries[j];
      std::string qwhere = where + ".queries[" + std::to_string(j) + "]";
      if (!q.is_object()) {
        errors.push_back(qwhere + " must be an object");
        continue;
      }
      if (non_empty_string(q, "query_id")) {
        const auto id = q.at("query_id").get<std::string>();
        qwhere = "query " + id;
        if (!query_ids.insert(id).second) errors.push_back(qwhere + ": duplicate query_id");
      } else {
        errors.push_back(qwhere + ": query_id must be a non-empty string");
      }
      if (!non_empty_string(q, "text")) errors.push_back(qwhere + ": text must be a non-empty string");
      if (!q.contains("polarity")) {
        errors.push_back(qwhere + ": polarity is missing");
      } else if (!q.at("polarity").is_string() ||
                 !polarity_from_id(q.at("polarity").get<std::string>())) {
        errors.push_back(qwhere + ": polarity must be \"positive\" or \"negative\"");
      }
    }
  }
  return errors;
}

DatasetManifest manifest_from_json(const nlohmann::json& doc) {
  if (auto errors = validate_manifest_json(doc); !errors.empty()) {
    throw ValidationError(std::move(errors));
  }
  DatasetManifest m;
  m.schema_version = doc.at("schema_version").get<int>();
  for (const auto& e : doc.at("entries")) {
    ImageEntry entry;
    entry.image_id = e.at("image_id").get<std::string>();
    entry.image = e.at("image").get<std::string>();
    entry.target_object = e.at("target_object").get<std::string>();
    entry.target_prompt = e.at("target_prompt").get<std::string>();
    for (const auto& q : e.at("queries")) {
      entry.queries.push_back({q.at("query_id").get<std::string>(), q.at("text").get<std::string>(),
                               *polarity_from_id(q.at("polarity").get<std::string>())});
    }
    m.entries.push_back(std::move(entry));
  }
  return m;
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json queries = nlohmann::json::array();
    for (const auto& q : e.queries) {
      queries.push_back({{"query_id", q.query_id},
                         {"text", q.text},
                         {"polarity", std::string(polarity_id(q.polarity))}});
    }
    entries.push_back({{"image_id", e.image_id},
                       {"image", e.image},
                       {"target_object", e.target_object},
                       {"target_prompt", e.target_prompt},
                       {"queries", queries}});
  }
  return {{"schema_version", m.schema_version}, {"entries", entries}};
}

DatasetManifest load_manifest(const fs::path& path, const LoadOptions& options) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError({path.string() + ": " + e.what()});
  }
  DatasetManifest m = manifest_from_json(doc);
  m.base_dir = path.parent_path();
  if (options.check_files) {
    std::vector<std::string> missing;
    for (const auto& e : m.entries) {
      if (!fs::exists(m.image_path(e))) {
        missing.push_back("image_id " + e.image_id + ": image file " + m.image_path(e).string() +
                          " does not exist");
      }
    }
    if (!missing.empty()) throw ValidationError(std::move(missing));
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  io::write_text_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

ManifestStats manifest_stats(const DatasetManifest& m) {
  ManifestStats s;
  s.images = m.entries.size();
  for (const auto& e : m.entries) {
    s.queries += e.queries.size();
    for (const auto& q : e.queries) (q.polarity == Polarity::positive ? s.positives : s.negatives)++;
  }
  return s;
}

}  // namespace vlmattack
