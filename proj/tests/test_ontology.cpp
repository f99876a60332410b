#include <gtest/gtest.h>

#include <sstream>

#include "patsim/ontology.hpp"
#include "support.hpp"

using namespace patsim;
using patsim::testing::make_ontology;
using patsim::testing::random_dag;

namespace {

Ontology chain() {
  return make_ontology({{"A", Vocabulary::Diagnosis, "a", {}},
                        {"B", Vocabulary::Diagnosis, "b", {"A"}},
                        {"C", Vocabulary::Diagnosis, "c", {"B"}}});
}

ConceptCode dx(const std::string& id) { return {id, Vocabulary::Diagnosis}; }

}  // namespace

TEST(OntologyLoad, ChainHasSingleRoot) {
  std::istringstream in("id\tvocabulary\tdisplay_name\tparent_ids\nA\tDIAGNOSIS\ta\t\nB\tDIAGNOSIS\tb\tA\nC\tDIAGNOSIS\tc\tB\n");
  const auto o = parse_ontology(in);
  ASSERT_EQ(o.size(), 3u);
  ASSERT_EQ(o.roots().size(), 1u);
  EXPECT_EQ(o.code(o.roots()[0]).id, "A");
}

TEST(OntologyLoad, DanglingParentIsResolutionError) {
  std::istringstream in("A\tDIAGNOSIS\ta\t\nB\tDIAGNOSIS\tb\tZ\n");
  EXPECT_THROW(parse_ontology(in), ResolutionError);
}

TEST(OntologyLoad, SelfParentIsRejected) {
  std::istringstream in("A\tDIAGNOSIS\ta\tA\n");
  EXPECT_THROW(parse_ontology(in), ResolutionError);
}

TEST(OntologyLoad, CycleNamesOffendingCode) {
  std::istringstream in("R\tDIAGNOSIS\troot\t\nA\tDIAGNOSIS\ta\tB|R\nB\tDIAGNOSIS\tb\tA\n");
  try {
    parse_ontology(in);
    FAIL() << "expected a cycle error";
  } catch (const StructureError& e) {
    EXPECT_TRUE(e.code() == "A" || e.code() == "B") << e.code();
  }
}

TEST(OntologyLoad, UnknownVocabularyAndBadColumnsAreParseErrors) {
  std::istringstream a("A\tSYMPTOM\ta\t\n");
  EXPECT_THROW(parse_ontology(a), ParseError);
  std::istringstream b("A\tDIAGNOSIS\n");
  EXPECT_THROW(parse_ontology(b), ParseError);
  std::istringstream c("A\tDIAGNOSIS\ta\t\nA\tMEDICATION\ta2\t\n");
  EXPECT_THROW(parse_ontology(c), ParseError);
}

TEST(OntologyLoad, WriteThenParseRoundTrips) {
  const auto o = random_dag(40, 3);
  std::stringstream ss;
  write_ontology(ss, o);
  const auto back = parse_ontology(ss);
  ASSERT_EQ(back.size(), o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    EXPECT_EQ(back.code(c), o.code(c));
    EXPECT_EQ(back.node(c).parent_ids, o.node(c).parent_ids);
  }
}

TEST(Hierarchy, ReflexiveAndTransitive) {
  const auto o = chain();
  EXPECT_TRUE(is_ancestor_or_descendant(o, dx("A"), dx("A")));
  EXPECT_TRUE(is_ancestor_or_descendant(o, dx("A"), dx("C")));
  EXPECT_TRUE(is_ancestor_or_descendant(o, dx("C"), dx("A")));
}

TEST(Hierarchy, SiblingsAreUnrelatedAtDistanceTwo) {
  const auto o = make_ontology({{"A", Vocabulary::Diagnosis, "a", {}},
                                {"B", Vocabulary::Diagnosis, "b", {"A"}},
                                {"B2", Vocabulary::Diagnosis, "b2", {"A"}}});
  EXPECT_FALSE(is_ancestor_or_descendant(o, dx("B"), dx("B2")));
  EXPECT_EQ(hierarchical_distance(o, dx("B"), dx("B2")), 2u);
  EXPECT_EQ(hierarchical_distance(o, dx("B"), dx("B")), 0u);
}

TEST(Hierarchy, DisconnectedIsUnreachable) {
  const auto o = make_ontology({{"A", Vocabulary::Diagnosis, "a", {}},
                                {"B", Vocabulary::Diagnosis, "b", {"A"}},
                                {"X", Vocabulary::Diagnosis, "x", {}},
                                {"Y", Vocabulary::Diagnosis, "y", {"X"}}});
  EXPECT_EQ(hierarchical_distance(o, dx("B"), dx("Y")), kUnreachable);
}

TEST(Hierarchy, UnknownCodeIsLookupError) {
  const auto o = chain();
  EXPECT_THROW(is_ancestor_or_descendant(o, dx("A"), dx("Q")), LookupError);
  EXPECT_THROW(hierarchical_distance(o, dx("Q"), dx("A")), LookupError);
  EXPECT_THROW(o.require(ConceptCode{"A", Vocabulary::Medication}), LookupError);
}

// Property: the DAG check accepts and topologically orders every generated ontology,
// and reachability / distance agree with matrix oracles.
class RandomDag : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(RandomDag, TopologicalOrderCoversAllNodes) {
  const auto o = random_dag(50, GetParam());
  const auto order = o.topological_order();
  ASSERT_EQ(order.size(), o.size());
  std::vector<std::size_t> pos(o.size());
  for (std::size_t i = 0; i < order.size(); ++i) pos[to_index(order[i])] = i;
  for (std::size_t i = 0; i < o.size(); ++i)
    for (auto p : o.parents(static_cast<ConceptIdx>(i))) EXPECT_LT(pos[to_index(p)], pos[i]);
}

TEST_P(RandomDag, AncestryMatchesReachabilityMatrix) {
  const auto o = random_dag(50, GetParam());
  const auto r = patsim::testing::reachability_matrix(o);
  for (std::size_t a = 0; a < o.size(); ++a)
    for (std::size_t b = 0; b < o.size(); ++b)
      ASSERT_EQ(o.is_ancestor_or_descendant(static_cast<ConceptIdx>(a), static_cast<ConceptIdx>(b)),
                r[a][b] || r[b][a])
          << a << "," << b;
}

TEST_P(RandomDag, DistanceMatchesRelaxationOracle) {
  const auto o = random_dag(50, GetParam());
  const auto d = patsim::testing::distance_matrix(o);
  for (std::size_t a = 0; a < o.size(); ++a)
    for (std::size_t b = 0; b < o.size(); ++b)
      ASSERT_EQ(o.hierarchical_distance(static_cast<ConceptIdx>(a), static_cast<ConceptIdx>(b)), d[a][b]);
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomDag, ::testing::Values(1u, 2u, 3u, 4u, 5u, 6u));

// ---------------------------------------------------------------------------
// Lexicon matching

namespace {

struct LexFixture {
  Ontology o;
  Lexicon lex;
};

LexFixture lex_fixture(const std::vector<std::string>& terms) {
  std::vector<patsim::testing::NodeSpec> specs;
  for (std::size_t i = 0; i < terms.size(); ++i) specs.push_back({"T" + std::to_string(i), Vocabulary::Diagnosis, terms[i], {}});
  LexFixture f{make_ontology(specs), {}};
  f.lex = build_lexicon(f.o);
  return f;
}

// Independent greedy oracle: at each start try every n-gram length by
// enumeration, keep the longest that is a lexicon key.
std::vector<TermMatch> oracle_matches(const Lexicon& lex, const std::vector<std::string>& toks) {
  std::vector<TermMatch> out;
  std::size_t i = 0;
  while (i < toks.size()) {
    std::optional<TermMatch> best;
    for (std::size_t len = 1; len <= 6 && i + len <= toks.size(); ++len) {
      std::vector<std::string> gram(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                    toks.begin() + static_cast<std::ptrdiff_t>(i + len));
      if (auto c = lex.lookup(text::join(gram, " "))) best = TermMatch{i, i + len, *c};
    }
    if (best) {
      out.push_back(*best);
      i = best->end;
    } else {
      ++i;
    }
  }
  return out;
}

}  // namespace

TEST(Lexicon, EmptyTextHasNoMatches) {
  auto f = lex_fixture({"anxiety"});
  EXPECT_TRUE(match_medical_terms(f.lex, "").empty());
}

TEST(Lexicon, LongestMatchWins) {
  auto f = lex_fixture({"generalized anxiety disorder", "anxiety"});
  const auto m = match_medical_terms(f.lex, "generalized anxiety disorder");
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].end - m[0].begin, 3u);
  EXPECT_EQ(m, oracle_matches(f.lex, text::tokenize("generalized anxiety disorder")));
}

TEST(Lexicon, RepeatedTermMatchesTwice) {
  auto f = lex_fixture({"anxiety"});
  EXPECT_EQ(match_medical_terms(f.lex, "anxiety anxiety").size(), 2u);
}

TEST(Lexicon, NormalizationDropsHyphensAndCase) {
  auto f = lex_fixture({"Pre-Hypertension"});
  const auto m = match_medical_terms(f.lex, "I have  prehypertension, doc.");
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(text::normalize_term("  Pre-Hypertension  "), "prehypertension");
}

TEST(Lexicon, TermsLongerThanSixTokensAreNotIndexed) {
  auto f = lex_fixture({"one two three four five six seven"});
  EXPECT_EQ(f.lex.size(), 0u);
}

TEST(Lexicon, GreedyMatchesAgreeWithEnumerationOracle) {
  const std::vector<std::string> vocab = {"a", "b", "c", "d", "e"};
  const std::vector<std::string> terms = {"a", "a b", "b c d", "c", "d e", "a b c d e f", "e", "b c"};
  auto f = lex_fixture(terms);
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> toks;
    const auto n = rng.below(31);
    for (std::uint64_t i = 0; i < n; ++i) toks.push_back(i % 7 == 6 ? "f" : vocab[rng.below(vocab.size())]);
    const auto got = match_medical_terms(f.lex, toks);
    ASSERT_EQ(got, oracle_matches(f.lex, toks));
    for (std::size_t i = 1; i < got.size(); ++i) ASSERT_LE(got[i - 1].end, got[i].begin);
  }
}
