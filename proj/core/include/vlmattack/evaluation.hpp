#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

namespace vlmattack::eval {

/// Answers of one provider to one query on the original and target images,
/// plus the target model's answer on the adversarial image.
struct AnswerSet {
  std::string ans;
  std::string ans_target;
  std::string ans_adv;
  std::string provider;
  std::string query_id;
};

/// Scores how close `candidate` is to `reference`; larger is closer.
class Similarity {
 public:
  virtual ~Similarity() = default;
  virtual std::string id() const = 0;
  virtual double similarity(std::string_view candidate, std::string_view reference) const = 0;
};

/// Similarity given by the cosine of two text embeddings.
class EmbeddingSimilarity : public Similarity {
 public:
  virtual Eigen::VectorXd embed(std::string_view text) const = 0;
  double similarity(std::string_view candidate, std::string_view reference) const override;
};

/// Deterministic stub: signed feature hashing of the token bag.
class HashEmbedding final : public EmbeddingSimilarity {
 public:
  explicit HashEmbedding(int dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}

  std::string id() const override { return "hash"; }
  Eigen::VectorXd embed(std::string_view text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Runs `command embed TEXT_FILE OUT` (see external.hpp for the file format).
class ExternalEmbedding final : public EmbeddingSimilarity {
 public:
  ExternalEmbedding(std::string id, std::string command) : id_(std::move(id)), command_(std::move(command)) {}

  std::string id() const override { return id_; }
  Eigen::VectorXd embed(std::string_view text) const override;

 private:
  std::string id_;
  std::string command_;
};

class BleuSimilarity final : public Similarity {
 public:
  std::string id() const override { return "bleu"; }
  double similarity(std::string_view candidate, std::string_view reference) const override;
};

class GleuSimilarity final : public Similarity {
 public:
  std::string id() const override { return "gleu"; }
  double similarity(std::string_view candidate, std::string_view reference) const override;
};

// "bleu", "gleu", "hash", or {"id": name, "command": ...} for an external embedding.
std::shared_ptr<const Similarity> make_similarity(const nlohmann::json& spec);

// 0 when either vector is zero.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// 1 iff sim_to_target >= sim_to_original.
int binary_score(double sim_to_target, double sim_to_original);
int binary_score(const AnswerSet& set, const Similarity& sim);

// 1 iff sum(votes) >= N/2. Throws ContractViolation on an empty vector or non-binary votes.
int majority_vote(std::span<const int> votes);

// Lower-cased; maximal runs of ASCII letters and digits are tokens, every
// other non-space character is a token of its own.
std::vector<std::string> tokenize(std::string_view text);

/// Sentence BLEU: clipped n-gram precisions up to order min(4, candidate
/// length), uniform weights, brevity penalty. A zero count at order n >= 2
/// is replaced by 0.1 / (candidate n-grams of order n); no unigram match
/// scores 0.
double bleu(std::span<const std::string> candidate, std::span<const std::string> reference);

/// Sentence GLEU: all 1..4-grams, min(precision, recall) of clipped matches.
double gleu(std::span<const std::string> candidate, std::span<const std::string> reference);

struct WordOverlap {
  double bleu = 0.0;
  double gleu = 0.0;
};
WordOverlap word_overlap_scores(std::string_view candidate, std::string_view reference);

// Ranks by descending score, 1-based; tied scores share the mean of their ranks.
std::vector<double> rank_with_ties(std::span<const double> scores);

struct EloConfig {
  double base = 1000.0;
  double k = 32.0;
};

// similarities[method][(query_id, provider)] = similarity on a positive query.
using MethodScores = std::map<std::string, std::map<std::pair<std::string, std::string>, double>>;

struct MethodComparison {
  std::map<std::string, double> avg_rank;
  std::map<std::string, double> elo;
};

/// Ranks methods per (query, provider) item, then replays one Elo match per
/// method pair and item. Items are visited in lexicographic (query, provider)
/// order, pairs in lexicographic method order; equal similarity is a draw.
MethodComparison positive_question_comparison(const MethodScores& scores, EloConfig config = {});

// ---------------------------------------------------------------- records and tables

struct ScoreRecord {
  std::string query_id;
  std::string provider;
  std::string metric;
  double value = 0.0;
  std::string run_id;

  bool operator==(const ScoreRecord&) const = default;
};

nlohmann::json to_json(const ScoreRecord& r);
ScoreRecord score_record_from_json(const nlohmann::json& j);
void write_score_records(const std::filesystem::path& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_score_records(const std::filesystem::path& path);

struct TableOptions {
  std::vector<std::string> runs;       // column order; empty = sorted run ids
  std::vector<std::string> providers;  // row order; empty = sorted provider ids
  std::vector<std::string> metrics;    // empty = sorted metric ids
  // Keeps only queries for which this returns true (e.g. one polarity).
  std::function<bool(const std::string&)> query_filter;
};

/// Provider rows (mean over queries), one majority-vote row per metric (mean
/// over queries of the vote across providers, only on queries every provider
/// answered) and one average row per metric (mean of the provider cells and
/// the majority cell). Cells with no data are empty and listed in `missing`.
struct ResultTable {
  struct Row {
    std::string group;  // provider id, "majority vote" or "avg"
    std::string metric;
    std::vector<std::optional<double>> cells;
  };
  std::vector<std::string> columns;
  std::vector<Row> rows;
  std::vector<std::string> missing;
};

ResultTable aggregate_table(const std::vector<ScoreRecord>& records, const TableOptions& options = {});

// Fixed six decimals, "NA" for missing cells.
std::string to_csv(const ResultTable& table);
// Aligned plain-text layout with three decimals.
std::string to_text(const ResultTable& table);

}  // namespace vlmattack::eval
