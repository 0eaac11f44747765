#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmattack/augmentation.hpp"
#include "vlmattack/dataset.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/evaluation.hpp"
#include "vlmattack/objectives.hpp"
#include "vlmattack/replace.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack::harness {

using Logger = std::function<void(const std::string&)>;

// A number, or a string "a/b" such as "16/255".
double parse_fraction(const nlohmann::json& value);

struct RunConfig {
  std::string run_id = "run";
  std::filesystem::path dataset;
  BackendConfig encoder;
  nlohmann::json segmenter = {{"id", "center_box"}};
  nlohmann::json inpainter = {{"id", "prompt_color"}};
  SegmentOptions segmentation;
  std::string method = "contrastive_adv";
  std::string objective = "contrastive";
  FeatureNorm norm = FeatureNorm::frobenius;
  AttackConfig attack;
  std::vector<double> epsilon_sweep;  // one child run per value when non-empty
  TransformConfig transforms;
  std::vector<nlohmann::json> providers;
  std::string target_provider;
  std::vector<nlohmann::json> metrics{"bleu", "gleu"};  // see eval::make_similarity
  int workers = 1;
  std::vector<std::string> images;  // subset of image ids; empty = all
  std::filesystem::path output_dir = "runs";
  std::filesystem::path answer_cache;   // default <output_dir>/answer_cache.jsonl
  std::filesystem::path replace_cache;  // default <output_dir>/replace_cache

  // Relative paths resolve against base_dir. Throws ValidationError listing every problem.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

struct ImageRecord {
  std::string image_id;
  std::string status;  // "ok" or "failed"
  std::string error;
  std::string original;     // paths relative to the run directory
  std::string target;       // empty for the latent objective
  std::string adversarial;
  std::string sidecar;
  double loss_initial = 0.0;
  double loss_final = 0.0;
  double linf = 0.0;
};

struct RunManifest {
  std::string run_id;
  std::string parent;  // sweep parent, empty otherwise
  double epsilon = 0.0;
  nlohmann::json config;
  std::vector<ImageRecord> images;
  std::vector<std::string> children;
  std::string started_at;
  std::string finished_at;
  std::filesystem::path dir;  // not serialized

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::filesystem::path& run_dir);
  void save() const;
};

struct AttackOptions {
  Logger log;
};

/// Runs the configured attack on every dataset image and writes
///   <output_dir>/<run_id>/{manifest.json, images/, sidecars/, scores/, tables/, plots/}
/// With an epsilon sweep the parent directory only holds a manifest listing
/// the children <run_id>__eps<k>; the children are returned.
std::vector<RunManifest> cmd_attack(const RunConfig& config, const AttackOptions& options = {});
std::vector<RunManifest> cmd_attack(const std::filesystem::path& config_path,
                                    const AttackOptions& options = {});

// ---------------------------------------------------------------- providers

class AnswerProvider {
 public:
  virtual ~AnswerProvider() = default;
  virtual std::string id() const = 0;
  // Throws on failure; callers retry and then record the answer as missing.
  virtual std::string answer(const ImageTensor& image, std::string_view question) const = 0;
  virtual nlohmann::json decoding() const { return nlohmann::json::object(); }
};

/// Deterministic template answers built from the colours of the image centre
/// and border. Questions containing any `fail_on` substring throw.
class StubProvider final : public AnswerProvider {
 public:
  explicit StubProvider(std::string id, std::vector<std::string> fail_on = {});

  std::string id() const override { return id_; }
  std::string answer(const ImageTensor& image, std::string_view question) const override;

 private:
  std::string id_;
  std::vector<std::string> fail_on_;
  std::size_t style_;
};

/// OpenAI-compatible chat completions endpoint. The API key is read from the
/// environment variable named by api_key_env at call time.
class HttpChatProvider final : public AnswerProvider {
 public:
  struct Options {
    std::string id;
    std::string base_url;  // e.g. https://api.openai.com
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env;
    int timeout_seconds = 60;
    nlohmann::json decoding = {{"temperature", 0}, {"max_tokens", 128}};
  };

  explicit HttpChatProvider(Options options) : options_(std::move(options)) {}

  std::string id() const override { return options_.id; }
  std::string answer(const ImageTensor& image, std::string_view question) const override;
  nlohmann::json decoding() const override { return options_.decoding; }

 private:
  Options options_;
};

// {"id": "...", "kind": "stub", "fail_on": [...]} or {"id": "...", "kind": "http", ...}
std::shared_ptr<const AnswerProvider> make_provider(const nlohmann::json& config);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_png(const ImageTensor& image);

// ---------------------------------------------------------------- answer cache

struct AnswerKey {
  std::string provider;
  std::string image_hash;
  std::string query_id;

  auto operator<=>(const AnswerKey&) const = default;
};

/// Append-only JSONL store. Existing entries are never rewritten; a put for
/// a key that is already present is ignored.
class AnswerCache {
 public:
  explicit AnswerCache(std::filesystem::path path);

  std::optional<std::string> get(const AnswerKey& key) const;
  // Returns false when the key was already cached.
  bool put(const AnswerKey& key, const std::string& answer, const nlohmann::json& decoding);
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::map<AnswerKey, std::string> entries_;
};

// One provider's answers for one query; missing answers stay empty.
struct AnswerRecord {
  std::string run_id;
  std::string query_id;
  std::string provider;
  std::optional<std::string> ans;
  std::optional<std::string> ans_target;
  std::optional<std::string> ans_adv;

  bool complete() const { return ans && ans_target && ans_adv; }
  bool operator==(const AnswerRecord&) const = default;
};

nlohmann::json to_json(const AnswerRecord& r);
AnswerRecord answer_record_from_json(const nlohmann::json& j);
void write_answer_records(const std::filesystem::path& path, const std::vector<AnswerRecord>& records);
std::vector<AnswerRecord> read_answer_records(const std::filesystem::path& path);

struct FetchStats {
  std::size_t requests = 0;  // answers needed
  std::size_t cache_hits = 0;
  std::size_t provider_calls = 0;
  std::size_t failures = 0;  // answers left missing
};

struct FetchOptions {
  int max_attempts = 3;
};

/// ans and ans_target come from each evaluation provider on x and x_target;
/// ans_adv comes from the target provider on x'. Failed entries stay missing.
std::vector<AnswerRecord> fetch_answers(const RunManifest& run, const DatasetManifest& dataset,
                                        const std::vector<std::shared_ptr<const AnswerProvider>>& providers,
                                        const AnswerProvider& target, AnswerCache& cache,
                                        FetchStats* stats = nullptr, const FetchOptions& options = {});

// ---------------------------------------------------------------- evaluation

struct RunColumn {
  std::string run_id;
  std::string label;  // run id without the sweep suffix
  double epsilon = 0.0;
};

struct EvaluateOutput {
  std::vector<eval::ScoreRecord> records;
  std::map<std::string, eval::ResultTable> tables;  // "all", "positive", "negative"
  std::vector<std::filesystem::path> files;
};

/// Scores answer records with every metric (binary score per record), writes
///   scores/scores.jsonl, tables/<polarity>.csv and .txt,
///   tables/positive_comparison_<metric>.csv when there are several runs,
///   plots/<metric>_vs_epsilon.svg when the runs span several epsilons.
EvaluateOutput evaluate_answers(const std::vector<AnswerRecord>& answers,
                                const std::map<std::string, Polarity>& polarity,
                                const std::vector<std::shared_ptr<const eval::Similarity>>& metrics,
                                const std::vector<RunColumn>& runs,
                                const std::filesystem::path& out_dir);

struct EvaluateRequest {
  std::filesystem::path runs_dir = "runs";
  std::vector<std::string> run_ids;  // a sweep parent expands to its children
  std::vector<nlohmann::json> metrics;
  std::optional<std::filesystem::path> answers;  // score these instead of querying providers
  std::optional<std::filesystem::path> dataset;  // overrides the dataset in the run config
  std::optional<std::filesystem::path> out_dir;  // default <runs_dir>/<first run id>
  Logger log;
};

EvaluateOutput cmd_evaluate(const EvaluateRequest& request);

// ---------------------------------------------------------------- plots

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Minimal SVG line chart.
std::string line_plot_svg(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series);

}  // namespace vlmattack::harness
