#include "vlmattack/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"
#include "vlmattack/external.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/random.hpp"

namespace vlmattack::eval {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- similarity

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ContractViolation("embedding dimensions differ");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double EmbeddingSimilarity::similarity(std::string_view candidate, std::string_view reference) const {
  return cosine(embed(candidate), embed(reference));
}

Eigen::VectorXd HashEmbedding::embed(std::string_view text) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
  for (const auto& token : tokenize(text)) {
    const std::uint64_t h = mix_seed(seed_, fnv1a(token));
    v[static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_))] += (h >> 63) ? -1.0 : 1.0;
  }
  return v;
}

Eigen::VectorXd ExternalEmbedding::embed(std::string_view text) const {
  ScratchDir dir;
  {
    std::ofstream f(dir.file("text.txt"), std::ios::binary);
    f << text;
  }
  auto argv = split_command(command_);
  argv.push_back("embed");
  argv.push_back(dir.file("text.txt").string());
  argv.push_back(dir.file("embedding.bin").string());
  const auto r = run_command(argv);
  if (r.exit_code != 0) throw BackendError("similarity backend '" + id_ + "' failed: " + r.output);
  const auto f = io::read_features(dir.file("embedding.bin"), true);
  if (f.matrix.cols() != 1) throw BackendError("similarity backend returned a matrix, not a vector");
  return f.matrix.col(0);
}

double BleuSimilarity::similarity(std::string_view candidate, std::string_view reference) const {
  return bleu(tokenize(candidate), tokenize(reference));
}

double GleuSimilarity::similarity(std::string_view candidate, std::string_view reference) const {
  return gleu(tokenize(candidate), tokenize(reference));
}

std::shared_ptr<const Similarity> make_similarity(const nlohmann::json& spec) {
  if (spec.is_string()) {
    const auto id = spec.get<std::string>();
    if (id == "bleu") return std::make_shared<BleuSimilarity>();
    if (id == "gleu") return std::make_shared<GleuSimilarity>();
    if (id == "hash") return std::make_shared<HashEmbedding>();
    throw BackendError("unknown metric '" + id + "' (known: bleu, gleu, hash)");
  }
  const auto id = spec.at("id").get<std::string>();
  if (!spec.contains("command")) return make_similarity(nlohmann::json(id));
  return std::make_shared<ExternalEmbedding>(id, spec.at("command").get<std::string>());
}

int binary_score(double sim_to_target, double sim_to_original) {
  return sim_to_target >= sim_to_original ? 1 : 0;
}

int binary_score(const AnswerSet& set, const Similarity& sim) {
  return binary_score(sim.similarity(set.ans_adv, set.ans_target), sim.similarity(set.ans_adv, set.ans));
}

int majority_vote(std::span<const int> votes) {
  if (votes.empty()) throw ContractViolation("majority vote over zero providers");
  long sum = 0;
  for (int v : votes) {
    if (v != 0 && v != 1) throw ContractViolation("votes must be 0 or 1");
    sum += v;
  }
  return 2 * sum >= static_cast<long>(votes.size()) ? 1 : 0;
}

// ---------------------------------------------------------------- word overlap

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
      continue;
    }
    if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
    if (!(c < 0x80 && std::isspace(c))) out.emplace_back(1, ch);
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

long clipped_matches(const NgramCounts& cand, const NgramCounts& ref) {
  long m = 0;
  for (const auto& [g, c] : cand) {
    if (auto it = ref.find(g); it != ref.end()) m += std::min(c, it->second);
  }
  return m;
}

}  // namespace

double bleu(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t order = std::min<std::size_t>(4, candidate.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= order; ++n) {
    const long matches = clipped_matches(ngrams(candidate, n), ngrams(reference, n));
    const double total = static_cast<double>(candidate.size() - n + 1);
    if (matches == 0) {
      if (n == 1) return 0.0;
      log_sum += std::log(0.1 / total);
    } else {
      log_sum += std::log(static_cast<double>(matches) / total);
    }
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(order));
}

double gleu(std::span<const std::string> candidate, std::span<const std::string> reference) {
  long matches = 0;
  long cand_total = 0;
  long ref_total = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto c = ngrams(candidate, n);
    const auto r = ngrams(reference, n);
    matches += clipped_matches(c, r);
    cand_total += candidate.size() >= n ? static_cast<long>(candidate.size() - n + 1) : 0;
    ref_total += reference.size() >= n ? static_cast<long>(reference.size() - n + 1) : 0;
  }
  if (cand_total == 0 || ref_total == 0) return 0.0;
  return std::min(static_cast<double>(matches) / cand_total, static_cast<double>(matches) / ref_total);
}

WordOverlap word_overlap_scores(std::string_view candidate, std::string_view reference) {
  const auto c = tokenize(candidate);
  const auto r = tokenize(reference);
  return {bleu(c, r), gleu(c, r)};
}

// ---------------------------------------------------------------- ranks and Elo

std::vector<double> rank_with_ties(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> ranks(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mean = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean;
    i = j + 1;
  }
  return ranks;
}

MethodComparison positive_question_comparison(const MethodScores& scores, EloConfig config) {
  MethodComparison out;
  if (scores.empty()) return out;

  const auto& first = scores.begin()->second;
  for (const auto& [method, items] : scores) {
    if (items.size() != first.size() ||
        !std::equal(items.begin(), items.end(), first.begin(),
                    [](const auto& a, const auto& b) { return a.first == b.first; })) {
      throw ContractViolation("method '" + method + "' covers different (query, provider) items than '" +
                              scores.begin()->first + "'");
    }
  }

  std::vector<std::string> methods;
  for (const auto& [m, _] : scores) methods.push_back(m);
  std::map<std::string, double> rank_sum;
  for (const auto& m : methods) {
    rank_sum[m] = 0.0;
    out.elo[m] = config.base;
  }

  for (const auto& [item, _] : first) {
    std::vector<double> sims;
    for (const auto& m : methods) sims.push_back(scores.at(m).at(item));
    const auto ranks = rank_with_ties(sims);
    for (std::size_t i = 0; i < methods.size(); ++i) rank_sum[methods[i]] += ranks[i];

    for (std::size_t i = 0; i < methods.size(); ++i) {
      for (std::size_t j = i + 1; j < methods.size(); ++j) {
        double& ra = out.elo[methods[i]];
        double& rb = out.elo[methods[j]];
        const double expected_a = 1.0 / (1.0 + std::pow(10.0, (rb - ra) / 400.0));
        const double expected_b = 1.0 - expected_a;
        const double sa = sims[i] > sims[j] ? 1.0 : (sims[i] < sims[j] ? 0.0 : 0.5);
        ra += config.k * (sa - expected_a);
        rb += config.k * ((1.0 - sa) - expected_b);
      }
    }
  }
  for (const auto& m : methods) out.avg_rank[m] = rank_sum[m] / static_cast<double>(first.size());
  return out;
}

// ---------------------------------------------------------------- records

nlohmann::json to_json(const ScoreRecord& r) {
  return {{"query_id", r.query_id},
          {"provider", r.provider},
          {"metric", r.metric},
          {"value", r.value},
          {"run_id", r.run_id}};
}

ScoreRecord score_record_from_json(const nlohmann::json& j) {
  ScoreRecord r;
  r.query_id = j.at("query_id").get<std::string>();
  r.provider = j.at("provider").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").get<double>();
  r.run_id = j.at("run_id").get<std::string>();
  if (!std::isfinite(r.value)) throw ContractViolation("score record value is not finite");
  return r;
}

void write_score_records(const fs::path& path, const std::vector<ScoreRecord>& records) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  io::write_text_atomic(path, text);
}

std::vector<ScoreRecord> read_score_records(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<ScoreRecord> out;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(score_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- tables

namespace {

std::vector<std::string> sorted_unique(const std::vector<ScoreRecord>& records,
                                       std::string ScoreRecord::*field) {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.*field);
  return {s.begin(), s.end()};
}

std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

ResultTable aggregate_table(const std::vector<ScoreRecord>& input, const TableOptions& options) {
  std::vector<ScoreRecord> records;
  for (const auto& r : input) {
    if (!options.query_filter || options.query_filter(r.query_id)) records.push_back(r);
  }
  // Fixed summation order regardless of input order.
  std::sort(records.begin(), records.end(), [](const ScoreRecord& a, const ScoreRecord& b) {
    return std::tie(a.run_id, a.metric, a.provider, a.query_id, a.value) <
           std::tie(b.run_id, b.metric, b.provider, b.query_id, b.value);
  });

  ResultTable table;
  table.columns = options.runs.empty() ? sorted_unique(records, &ScoreRecord::run_id) : options.runs;
  const auto providers =
      options.providers.empty() ? sorted_unique(records, &ScoreRecord::provider) : options.providers;
  const auto metrics =
      options.metrics.empty() ? sorted_unique(records, &ScoreRecord::metric) : options.metrics;

  // (run, metric, provider) -> query -> value
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, double>> cells;
  for (const auto& r : records) {
    auto& q = cells[{r.run_id, r.metric, r.provider}];
    if (!q.emplace(r.query_id, r.value).second) {
      throw ContractViolation("duplicate score for (" + r.run_id + ", " + r.metric + ", " +
                              r.provider + ", " + r.query_id + ")");
    }
  }

  auto mean_of = [](const std::map<std::string, double>& m) {
    double s = 0.0;
    for (const auto& [_, v] : m) s += v;
    return s / static_cast<double>(m.size());
  };

  std::map<std::pair<std::string, std::string>, std::vector<std::optional<double>>> provider_cells;
  for (const auto& provider : providers) {
    for (const auto& metric : metrics) {
      ResultTable::Row row{provider, metric, {}};
      for (const auto& run : table.columns) {
        auto it = cells.find({run, metric, provider});
        if (it == cells.end() || it->second.empty()) {
          row.cells.push_back(std::nullopt);
          table.missing.push_back(run + " / " + provider + " / " + metric + ": no scores");
        } else {
          row.cells.push_back(mean_of(it->second));
        }
      }
      provider_cells[{provider, metric}] = row.cells;
      table.rows.push_back(std::move(row));
    }
  }

  std::map<std::string, std::vector<std::optional<double>>> majority_cells;
  for (const auto& metric : metrics) {
    ResultTable::Row row{"majority vote", metric, {}};
    for (const auto& run : table.columns) {
      std::set<std::string> queries;
      for (const auto& provider : providers) {
        if (auto it = cells.find({run, metric, provider}); it != cells.end()) {
          for (const auto& [q, _] : it->second) queries.insert(q);
        }
      }
      double sum = 0.0;
      std::size_t count = 0;
      std::size_t incomplete = 0;
      bool binary = true;
      for (const auto& q : queries) {
        std::vector<int> votes;
        for (const auto& provider : providers) {
          auto it = cells.find({run, metric, provider});
          if (it == cells.end()) break;
          auto v = it->second.find(q);
          if (v == it->second.end()) break;
          if (v->second != 0.0 && v->second != 1.0) binary = false;
          votes.push_back(v->second == 1.0 ? 1 : 0);
        }
        if (votes.size() != providers.size()) {
          ++incomplete;
          continue;
        }
        sum += majority_vote(votes);
        ++count;
      }
      if (incomplete > 0) {
        table.missing.push_back(run + " / majority vote / " + metric + ": " +
                                std::to_string(incomplete) +
                                " queries lack an answer from every provider and were left out");
      }
      if (!binary) {
        row.cells.push_back(std::nullopt);
        table.missing.push_back(run + " / majority vote / " + metric + ": scores are not binary");
      } else if (count == 0) {
        row.cells.push_back(std::nullopt);
        table.missing.push_back(run + " / majority vote / " + metric + ": no complete query");
      } else {
        row.cells.push_back(sum / static_cast<double>(count));
      }
    }
    majority_cells[metric] = row.cells;
    table.rows.push_back(std::move(row));
  }

  for (const auto& metric : metrics) {
    ResultTable::Row row{"avg", metric, {}};
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      double sum = 0.0;
      bool complete = true;
      for (const auto& provider : providers) {
        const auto& cell = provider_cells[{provider, metric}][c];
        complete = complete && cell.has_value();
        if (cell) sum += *cell;
      }
      const auto& maj = majority_cells[metric][c];
      complete = complete && maj.has_value();
      if (maj) sum += *maj;
      if (complete) {
        row.cells.push_back(sum / static_cast<double>(providers.size() + 1));
      } else {
        row.cells.push_back(std::nullopt);
        table.missing.push_back(table.columns[c] + " / avg / " + metric + ": depends on a missing cell");
      }
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string to_csv(const ResultTable& table) {
  std::string out = "group,metric";
  for (const auto& c : table.columns) out += "," + csv_field(c);
  out += "\n";
  for (const auto& row : table.rows) {
    out += csv_field(row.group) + "," + csv_field(row.metric);
    for (const auto& cell : row.cells) out += "," + (cell ? format_fixed(*cell, 6) : std::string("NA"));
    out += "\n";
  }
  return out;
}

std::string to_text(const ResultTable& table) {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"", ""});
  for (const auto& c : table.columns) grid.back().push_back(c);
  std::string previous;
  for (const auto& row : table.rows) {
    std::vector<std::string> line{row.group == previous ? "" : row.group, row.metric};
    previous = row.group;
    for (const auto& cell : row.cells) line.push_back(cell ? format_fixed(*cell, 3) : "NA");
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& line : grid) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::string out;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    std::string line;
    for (std::size_t i = 0; i < grid[r].size(); ++i) {
      const auto& s = grid[r][i];
      const std::string pad(width[i] - s.size(), ' ');
      line += (i < 2 ? s + pad : pad + s);
      if (i + 1 < grid[r].size()) line += i == 1 ? " | " : "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) out += std::string(line.size(), '-') + "\n";
  }
  if (!table.missing.empty()) {
    out += "\nmissing:\n";
    for (const auto& m : table.missing) out += "  " + m + "\n";
  }
  return out;
}

}  // namespace vlmattack::eval
