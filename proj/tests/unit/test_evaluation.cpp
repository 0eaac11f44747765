#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/evaluation.hpp"

using namespace vlmattack;
using namespace vlmattack::eval;
using namespace vlmattack::testing;

namespace {

// Fixed vectors per text.
class TableEmbedding final : public EmbeddingSimilarity {
 public:
  explicit TableEmbedding(std::map<std::string, Eigen::VectorXd> table) : table_(std::move(table)) {}
  std::string id() const override { return "table"; }
  Eigen::VectorXd embed(std::string_view text) const override { return table_.at(std::string(text)); }

 private:
  std::map<std::string, Eigen::VectorXd> table_;
};

ScoreRecord rec(std::string run, std::string provider, std::string query, double v,
                std::string metric = "bleu") {
  return {std::move(query), std::move(provider), std::move(metric), v, std::move(run)};
}

}  // namespace

TEST(Cosine, ScaleInvarianceAndZeroVectors) {
  Eigen::VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << -2, 0.5, 4;
  EXPECT_NEAR(cosine(a, b), cosine(7.0 * a, 0.25 * b), 1e-15);
  EXPECT_NEAR(cosine(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine(a, -a), -1.0, 1e-15);
  EXPECT_EQ(cosine(a, Eigen::VectorXd::Zero(3)), 0.0);
}

TEST(BinaryScore, TiesGoToTheTarget) {
  EXPECT_EQ(binary_score(0.4, 0.4), 1);
  EXPECT_EQ(binary_score(0.5, 0.4), 1);
  EXPECT_EQ(binary_score(0.3, 0.4), 0);

  Eigen::VectorXd adv(2), tgt(2), org(2);
  adv << 1, 0.2;
  tgt << 1, 0;
  org << 0, 1;
  const TableEmbedding e({{"adv", adv}, {"tgt", tgt}, {"org", org}});
  EXPECT_EQ(binary_score({"org", "tgt", "adv", "p", "q"}, e), 1);
  EXPECT_EQ(binary_score({"tgt", "org", "adv", "p", "q"}, e), 0);
}

TEST(MajorityVote, MatchesHalfThresholdForEverySmallVector) {
  for (int n = 1; n <= 6; ++n) {
    for (int mask = 0; mask < (1 << n); ++mask) {
      std::vector<int> votes;
      int ones = 0;
      for (int i = 0; i < n; ++i) {
        votes.push_back((mask >> i) & 1);
        ones += votes.back();
      }
      EXPECT_EQ(majority_vote(votes), ones >= n / 2.0 ? 1 : 0) << n << " " << mask;
    }
  }
  EXPECT_THROW(majority_vote(std::vector<int>{}), ContractViolation);
  EXPECT_THROW(majority_vote(std::vector<int>{1, 2}), ContractViolation);
}

TEST(Tokenize, LowercasesAndSplitsPunctuation) {
  EXPECT_EQ(tokenize("It's a RED balloon!"),
            (std::vector<std::string>{"it", "'", "s", "a", "red", "balloon", "!"}));
  EXPECT_EQ(tokenize("  3.5 kg\tapples "), (std::vector<std::string>{"3", ".", "5", "kg", "apples"}));
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(WordOverlap, MatchesReferenceImplementationFixture) {
  std::ifstream f(fixture("word_overlap_pairs.json"));
  const auto pairs = nlohmann::json::parse(f);
  ASSERT_GE(pairs.size(), 50u);
  for (const auto& p : pairs) {
    const auto c = p.at("candidate").get<std::string>();
    const auto r = p.at("reference").get<std::string>();
    const auto s = word_overlap_scores(c, r);
    EXPECT_NEAR(s.bleu, p.at("bleu").get<double>(), 1e-12) << c << " | " << r;
    EXPECT_NEAR(s.gleu, p.at("gleu").get<double>(), 1e-12) << c << " | " << r;
    EXPECT_EQ(BleuSimilarity().similarity(c, r), s.bleu);
    EXPECT_EQ(GleuSimilarity().similarity(c, r), s.gleu);
  }
}

TEST(WordOverlap, IdenticalAndDisjointSentences) {
  const std::vector<std::string> a{"a", "red", "balloon", "in", "the", "sky"};
  const std::vector<std::string> b{"green", "car"};
  EXPECT_DOUBLE_EQ(bleu(a, a), 1.0);
  EXPECT_DOUBLE_EQ(gleu(a, a), 1.0);
  EXPECT_EQ(bleu(b, a), 0.0);
  EXPECT_EQ(gleu(b, a), 0.0);
  EXPECT_EQ(bleu({}, a), 0.0);
}

TEST(RankWithTies, SharedRanksAndRankSum) {
  const std::vector<double> s{0.9, 0.5, 0.5};
  EXPECT_EQ(rank_with_ties(s), (std::vector<double>{1.0, 2.5, 2.5}));
  EXPECT_EQ(rank_with_ties(std::vector<double>{0.1, 0.1, 0.1, 0.1}),
            (std::vector<double>{2.5, 2.5, 2.5, 2.5}));

  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 8));
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(uniform_index(rng, 4));
    const auto r = rank_with_ties(v);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      total += r[i];
      int greater = 0, equal = 0;
      for (int j = 0; j < n; ++j) {
        greater += v[j] > v[i];
        equal += v[j] == v[i];
      }
      EXPECT_DOUBLE_EQ(r[i], greater + (equal + 1) / 2.0);
    }
    EXPECT_DOUBLE_EQ(total, n * (n + 1) / 2.0);
  }
}

TEST(PositiveComparison, FrozenEloReplayAndAverageRanks) {
  const MethodScores scores{
      {"a", {{{"q1", "p"}, 0.9}, {{"q1", "r"}, 0.2}, {{"q2", "p"}, 0.5}}},
      {"b", {{{"q1", "p"}, 0.5}, {{"q1", "r"}, 0.2}, {{"q2", "p"}, 0.7}}},
      {"c", {{{"q1", "p"}, 0.5}, {{"q1", "r"}, 0.1}, {{"q2", "p"}, 0.1}}},
  };
  const auto out = positive_question_comparison(scores);
  EXPECT_NEAR(out.elo.at("a"), 1037.994344146638, 1e-9);
  EXPECT_NEAR(out.elo.at("b"), 1031.9109293587821, 1e-9);
  EXPECT_NEAR(out.elo.at("c"), 930.0947264945798, 1e-9);
  EXPECT_NEAR(out.elo.at("a") + out.elo.at("b") + out.elo.at("c"), 3000.0, 1e-9);
  EXPECT_DOUBLE_EQ(out.avg_rank.at("a"), 1.5);
  EXPECT_DOUBLE_EQ(out.avg_rank.at("b"), 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(out.avg_rank.at("c"), 8.5 / 3.0);
}

TEST(PositiveComparison, AllEqualStaysAtBase) {
  MethodScores scores;
  for (const char* m : {"x", "y", "z", "w"}) {
    for (int q = 0; q < 5; ++q) scores[m][{"q" + std::to_string(q), "p"}] = 0.25;
  }
  const auto out = positive_question_comparison(scores);
  for (const auto& [m, elo] : out.elo) EXPECT_DOUBLE_EQ(elo, 1000.0) << m;
  for (const auto& [m, rank] : out.avg_rank) EXPECT_DOUBLE_EQ(rank, 2.5) << m;
}

TEST(PositiveComparison, RejectsMismatchedItems) {
  MethodScores scores{{"a", {{{"q1", "p"}, 0.1}}}, {"b", {{{"q2", "p"}, 0.1}}}};
  EXPECT_THROW(positive_question_comparison(scores), ContractViolation);
}

TEST(AggregateTable, ProviderMajorityAndAverageRows) {
  const std::vector<ScoreRecord> records{
      rec("r1", "p1", "q1", 1), rec("r1", "p2", "q1", 0), rec("r1", "p3", "q1", 0),
      rec("r1", "p1", "q2", 1), rec("r1", "p2", "q2", 1), rec("r1", "p3", "q2", 0),
      rec("r1", "p1", "q3", 0), rec("r1", "p2", "q3", 1),
  };
  const auto t = aggregate_table(records);
  ASSERT_EQ(t.columns, std::vector<std::string>{"r1"});
  ASSERT_EQ(t.rows.size(), 5u);
  EXPECT_EQ(t.rows[0].group, "p1");
  EXPECT_DOUBLE_EQ(*t.rows[0].cells[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*t.rows[1].cells[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*t.rows[2].cells[0], 0.0);
  // q3 lacks p3 and is left out of the vote: q1 -> 0, q2 -> 1.
  EXPECT_EQ(t.rows[3].group, "majority vote");
  EXPECT_DOUBLE_EQ(*t.rows[3].cells[0], 0.5);
  EXPECT_EQ(t.rows[4].group, "avg");
  EXPECT_DOUBLE_EQ(*t.rows[4].cells[0], (2.0 / 3.0 + 2.0 / 3.0 + 0.0 + 0.5) / 4.0);
  ASSERT_EQ(t.missing.size(), 1u);
  EXPECT_NE(t.missing[0].find("1 queries"), std::string::npos);
}

TEST(AggregateTable, MissingCellsPropagateToAverage) {
  const std::vector<ScoreRecord> records{
      rec("r1", "p1", "q1", 1), rec("r1", "p2", "q1", 1),
      rec("r2", "p1", "q1", 0),
  };
  const auto t = aggregate_table(records);
  ASSERT_EQ(t.columns, (std::vector<std::string>{"r1", "r2"}));
  EXPECT_FALSE(t.rows[1].cells[1].has_value());
  EXPECT_FALSE(t.rows[2].cells[1].has_value());
  EXPECT_FALSE(t.rows[3].cells[1].has_value());
  EXPECT_DOUBLE_EQ(*t.rows[3].cells[0], 1.0);
  const auto csv = to_csv(t);
  EXPECT_EQ(csv,
            "group,metric,r1,r2\n"
            "p1,bleu,1.000000,0.000000\n"
            "p2,bleu,1.000000,NA\n"
            "majority vote,bleu,1.000000,NA\n"
            "avg,bleu,1.000000,NA\n");
  EXPECT_NE(to_text(t).find("NA"), std::string::npos);
}

TEST(AggregateTable, OrderIndependentAndFiltered) {
  Rng rng(2);
  std::vector<ScoreRecord> records;
  for (int q = 0; q < 10; ++q) {
    for (const char* p : {"p1", "p2", "p3"}) {
      records.push_back(rec("r", p, "q" + std::to_string(q), uniform01(rng) < 0.5 ? 0.0 : 1.0));
      records.push_back(rec("r", p, "q" + std::to_string(q), uniform01(rng), "hash"));
    }
  }
  auto shuffled = records;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937(3));
  EXPECT_EQ(to_csv(aggregate_table(records)), to_csv(aggregate_table(shuffled)));

  TableOptions only_even;
  only_even.query_filter = [](const std::string& q) { return (q.back() - '0') % 2 == 0; };
  only_even.metrics = {"bleu"};
  const auto t = aggregate_table(records, only_even);
  double expected = 0.0;
  for (const auto& r : records) {
    if (r.provider == "p1" && r.metric == "bleu" && (r.query_id.back() - '0') % 2 == 0) expected += r.value / 5;
  }
  EXPECT_NEAR(*t.rows[0].cells[0], expected, 1e-15);

  records.push_back(records.front());
  EXPECT_THROW(aggregate_table(records), ContractViolation);
}

TEST(ScoreRecords, JsonlRoundTrip) {
  TempDir dir;
  const std::vector<ScoreRecord> records{rec("r1", "p1", "q1", 0.125), rec("r2", "p,2", "q\"2", 1.0 / 3.0, "gleu")};
  write_score_records(dir / "s.jsonl", records);
  EXPECT_EQ(read_score_records(dir / "s.jsonl"), records);
}

TEST(Similarity, FactoryAndHashEmbedding) {
  EXPECT_EQ(make_similarity("bleu")->id(), "bleu");
  EXPECT_EQ(make_similarity("gleu")->id(), "gleu");
  const auto h = make_similarity("hash");
  EXPECT_NEAR(h->similarity("a red balloon", "A red balloon"), 1.0, 1e-15);
  EXPECT_THROW(make_similarity("rouge"), BackendError);
  const HashEmbedding e(32, 4);
  EXPECT_EQ(e.embed("apple pie"), e.embed("pie apple"));
}
