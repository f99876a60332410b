#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "metric_cases.hpp"
#include "patsim/reporting.hpp"
#include "support.hpp"

using namespace patsim;
namespace pt = patsim::testing;

namespace {

ConversationLog log_for(const std::string& id, LinguisticKind l, BehavioralKind b, const std::string& profile,
                        std::optional<std::string> rec) {
  ConversationLog log;
  log.conversation.id = id;
  log.conversation.linguistic = std::string(to_string(l));
  log.conversation.behavioral = std::string(to_string(b));
  log.conversation.profile_id = profile;
  log.conversation.final_recommendation = std::move(rec);
  return log;
}

ConversationMetrics metrics_for(const ConversationLog& log) {
  ConversationMetrics m;
  m.conversation_id = log.conversation.id;
  m.linguistic = log.conversation.linguistic;
  m.behavioral = log.conversation.behavioral;
  m.profile_id = log.conversation.profile_id;
  return m;
}

const std::vector<std::string>& row(const Table& t, const std::string& first) {
  for (const auto& r : t.rows)
    if (r.front() == first) return r;
  static const std::vector<std::string> none;
  ADD_FAILURE() << "no row " << first << " in " << t.name;
  return none;
}

constexpr auto kCoop = BehavioralKind::StructuredCooperative;
constexpr auto kFunc = LinguisticKind::FunctionalHL;

}  // namespace

TEST(WeightedPrf, HandComputedExample) {
  const auto w = weighted_prf({"a", "a", "b", "c"}, {"a", "b", "b", "a"});
  EXPECT_EQ(w.n, 4u);
  ASSERT_EQ(w.classes.size(), 3u);
  EXPECT_EQ(w.classes[1].label, "b");
  EXPECT_DOUBLE_EQ(w.classes[1].f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(w.precision, 0.375);
  EXPECT_DOUBLE_EQ(w.recall, 0.5);
  EXPECT_NEAR(w.f1, (2 * 0.5 + 2.0 / 3.0) / 4.0, 1e-15);
  EXPECT_EQ(weighted_prf({}, {}).n, 0u);
  EXPECT_THROW(weighted_prf({"a"}, {}), AlignmentError);
}

// Weighted recall over single-label items equals accuracy.
TEST(WeightedPrf, RecallEqualsAccuracy) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> t, p;
    std::size_t same = 0;
    for (int i = 0; i < 60; ++i) {
      t.push_back("D" + std::to_string(rng.below(4)));
      p.push_back(rng.uniform() < 0.5 ? t.back() : "D" + std::to_string(rng.below(5)));
      same += t.back() == p.back();
    }
    EXPECT_NEAR(weighted_prf(t, p).recall, static_cast<double>(same) / 60.0, 1e-12);
  }
}

TEST(Policy, RoundTripAndErrors) {
  const ReferencePolicy p{{"P1", "RESP_A"}, {"P2", std::string(kNoRecommendation)}};
  std::ostringstream out;
  write_policy(out, p);
  std::istringstream in(out.str());
  EXPECT_EQ(read_policy(in), p);
  std::istringstream bad("profile\texpected\nP1\n");
  EXPECT_THROW(read_policy(bad), ParseError);
}

TEST(ReportTables, EmptyInputsKeepEveryRowAsMissing) {
  const auto b = report_tables({});
  const std::pair<const char*, std::size_t> shapes[] = {
      {"table05_agreement", 1},           {"table06_labels_by_linguistic", 5}, {"table07_labels_by_behavioral", 3},
      {"table08_linguistic_metrics", 5},  {"table09_behavioral_metrics", 3},   {"table10_recall", 5},
      {"table11_rank", 7},                {"table12_recommendation", 15}};
  ASSERT_EQ(b.tables.size(), 8u);
  for (const auto& [name, rows] : shapes) {
    const auto* t = b.find(name);
    ASSERT_NE(t, nullptr) << name;
    EXPECT_EQ(t->rows.size(), rows) << name;
    for (const auto& r : t->rows) EXPECT_EQ(r.size(), t->header.size()) << name;
  }
  EXPECT_EQ(row(*b.find("table06_labels_by_linguistic"), "Limited HL")[1], "MISSING");
  EXPECT_EQ(row(*b.find("table10_recall"), "recall_pct")[1], "MISSING");
  EXPECT_EQ(row(*b.find("table11_rank"), "rank1_pct")[1], "MISSING");
  EXPECT_EQ(b.find("table12_recommendation")->rows[0][5], "MISSING");
  EXPECT_THROW(report_tables({{log_for("c", kFunc, kCoop, "P", {})}, {}, {}, {}, {}}), Error);
}

TEST(ReportTables, LabelCountsAndMetricMeansByCell) {
  ReportInputs in;
  in.logs = {log_for("c1", LinguisticKind::LimitedHL, kCoop, "P1", "A"),
             log_for("c2", LinguisticKind::LimitedHL, kCoop, "P2", "B"),
             log_for("c3", kFunc, BehavioralKind::AdversarialCombative, "P1", std::nullopt),
             log_for("c4", LinguisticKind::Depression, BehavioralKind::DistractedUnfocused, "P1", "A")};
  for (const auto& l : in.logs) in.metrics.push_back(metrics_for(l));
  in.metrics[0].fkgl = 1.0;
  in.metrics[1].fkgl = 2.0;
  in.metrics[0].depression.mean = 0.25;
  in.metrics[2].on_topic.mean = 0.5;
  in.metrics[2].toxicity.mean = 0.125;
  AnnotationSet judge;
  judge.items = {{{"c1", 1, "2.1"}, "judge", Label::Accurate},  {{"c2", 1, "2.1"}, "judge", Label::Accurate},
                 {{"c2", 2, "2.2"}, "judge", Label::Unsupported}, {{"c3", 1, "2.1"}, "judge", Label::Inaccurate},
                 {{"c4", 1, "2.1"}, "judge", Label::Inaccurate},  {{"c1", 2, "2.3"}, "judge", std::nullopt}};
  in.judge = judge;
  in.policy = {{"P1", "A"}, {"P2", "A"}};
  const auto b = report_tables(in);

  const auto* t6 = b.find("table06_labels_by_linguistic");
  EXPECT_EQ(row(*t6, "Limited HL"), (std::vector<std::string>{"Limited HL", "2", "0", "1"}));
  EXPECT_EQ(row(*t6, "Depression")[1], "MISSING");  // only seen under another behavior
  const auto* t7 = b.find("table07_labels_by_behavioral");
  EXPECT_EQ(row(*t7, "Adversarial & Combative"), (std::vector<std::string>{"Adversarial & Combative", "0", "1", "0"}));
  EXPECT_EQ(row(*t7, "Structured & Cooperative")[1], "MISSING");

  const auto& t8 = row(*b.find("table08_linguistic_metrics"), "Limited HL");
  EXPECT_EQ(t8[1], "2");
  EXPECT_EQ(t8[2], "1.5000");
  EXPECT_EQ(t8[3], "MISSING");
  EXPECT_EQ(t8[5], "0.2500");
  const auto& t9 = row(*b.find("table09_behavioral_metrics"), "Adversarial & Combative");
  EXPECT_EQ(t9, (std::vector<std::string>{"Adversarial & Combative", "1", "0.5000", "0.1250"}));

  const auto* t12 = b.find("table12_recommendation");
  for (const auto& r : t12->rows) {
    if (r[0] == "Structured & Cooperative" && r[1] == "Limited HL") {
      EXPECT_EQ(r[2], "2");
      EXPECT_EQ(r[4], "0.5000");  // one of two matches
    }
    if (r[0] == "Adversarial & Combative" && r[1] == "Functional HL") {
      EXPECT_EQ(r[5], "0.0000");
    }
  }
}

TEST(ReportTables, RankAndRecallPartitions) {
  ReportInputs in;
  const auto planted = pt::planted_rank_items(200, 17);
  for (std::size_t i = 0; i < 4; ++i) {
    in.logs.push_back(log_for("c" + std::to_string(i), kFunc, kCoop, "P1", std::nullopt));
    in.metrics.push_back(metrics_for(in.logs.back()));
  }
  std::size_t r1 = 0, none = 0;
  for (std::size_t i = 0; i < planted.size(); ++i) {
    in.metrics[i % 4].rank_items.push_back(planted[i].item);
    r1 += planted[i].rank == 1u;
    none += !planted[i].rank;
  }
  in.metrics[0].recall = concept_recall({{"D1", Vocabulary::Diagnosis}, {"M1", Vocabulary::Medication}},
                                        {{"D1", Vocabulary::Diagnosis}, {"P9", Vocabulary::Procedure}});
  in.metrics[1].recall = concept_recall({{"M2", Vocabulary::Medication}}, {{"M2", Vocabulary::Medication}});
  const auto b = report_tables(in);

  const auto* t11 = b.find("table11_rank");
  EXPECT_EQ(row(*t11, "reference_concepts")[1], "200");
  EXPECT_EQ(row(*t11, "rank1_pct")[2], std::to_string(r1));
  EXPECT_EQ(row(*t11, "not_retrieved_pct")[2], std::to_string(none));
  std::size_t parts = 0;
  double pct = 0.0;
  for (const char* k : {"rank1_pct", "beyond_rank1_pct", "not_retrieved_pct"}) {
    parts += std::stoul(row(*t11, k)[2]);
    pct += std::stod(row(*t11, k)[1]);
  }
  EXPECT_EQ(parts, 200u);
  EXPECT_NEAR(pct, 100.0, 0.015);

  const auto* t10 = b.find("table10_recall");
  EXPECT_EQ(row(*t10, "reference_concepts"), (std::vector<std::string>{"reference_concepts", "3", "1", "2", "0"}));
  EXPECT_EQ(row(*t10, "recall_pct")[1], "66.67");
  EXPECT_EQ(row(*t10, "recall_pct")[4], "MISSING");
  EXPECT_EQ(row(*t10, "outside_reference")[4], "1");
}

TEST(ReportTables, AgreementSplitsPerturbedItems) {
  ReportInputs in;
  in.logs = {log_for("c1", kFunc, kCoop, "P1", std::nullopt)};
  in.logs[0].perturbations.push_back({"P1", "2.2", {}, {}, 1, 3, 0, 20, 3});
  in.metrics = {metrics_for(in.logs[0])};
  AnnotationSet h1, h2;
  for (std::size_t t = 1; t <= 4; ++t) {
    for (const char* k : {"2.1", "2.2"}) {
      h1.items.push_back({{"c1", t, k}, "h1", t % 2 ? Label::Accurate : Label::Inaccurate});
      h2.items.push_back({{"c1", t, k}, "h2", Label::Accurate});
    }
  }
  in.annotators = {{"h1", h1}, {"h2", h2}};
  const auto bundle = report_tables(in);
  const auto* t5 = bundle.find("table05_agreement");
  ASSERT_NE(t5, nullptr);
  ASSERT_EQ(t5->rows.size(), 2u);
  EXPECT_EQ(t5->rows[0], (std::vector<std::string>{"unperturbed", "h1~h2", "4", "0.5000", "0.0000"}));
  EXPECT_EQ(t5->rows[1][0], "perturbed");
  EXPECT_EQ(t5->rows[1][2], "4");
}

TEST(ReportFiles, WriteThenVerify) {
  const auto b = report_tables({});
  pt::TempDir dir("report");
  write_report(b, dir.path());
  EXPECT_TRUE(verify_report(b, dir.path()).empty());
  const auto text = pt::slurp(dir.path() / "table11_rank.tsv");
  EXPECT_TRUE(text.starts_with("# Concept retrieval rank metrics\nmetric\tvalue\tcount\n"));
  {
    std::ofstream(dir.path() / "table10_recall.tsv", std::ios::app) << "extra\n";
  }
  std::filesystem::remove(dir.path() / "table05_agreement.tsv");
  const auto diffs = verify_report(b, dir.path());
  ASSERT_EQ(diffs.size(), 2u);
  EXPECT_EQ(diffs[0].table, "table05_agreement");
  EXPECT_EQ(diffs[0].detail, "file missing");
  EXPECT_EQ(diffs[1].table, "table10_recall");
  EXPECT_NE(diffs[1].detail.find("line 8"), std::string::npos) << diffs[1].detail;
}
