#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "patsim/perturbation.hpp"
#include "support.hpp"

using namespace patsim;
using namespace patsim::testing;

namespace {

// Embeds a name as a fixed vector from a table; unknown names get the zero vector.
class TableEmbedder final : public Embedder {
 public:
  explicit TableEmbedder(std::map<std::string, Embedding> t) : table_(std::move(t)) {}
  Embedding embed(std::string_view s) const override {
    auto it = table_.find(std::string(s));
    return it == table_.end() ? Embedding(2, 0.0) : it->second;
  }

 private:
  std::map<std::string, Embedding> table_;
};

PerturbationPlan plan_no_relax(std::uint64_t seed = 1) {
  PerturbationPlan p;
  p.seed = seed;
  return p;
}

// Independent filter: rank by a fresh cosine pass, replay the seeded
// shuffle, filter with matrix oracles.
std::optional<std::pair<ConceptIdx, std::size_t>> oracle_select(const Ontology& o, const Embedder& e, ConceptIdx code,
                                                                const PerturbationPlan& plan) {
  const auto reach = reachability_matrix(o);
  const auto dist = distance_matrix(o);
  const auto me = e.embed(o.display_name(code));
  std::vector<std::tuple<double, std::string, ConceptIdx>> scored;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    if (c == code || o.code(c).vocabulary != o.code(code).vocabulary) continue;
    const auto v = e.embed(o.display_name(c));
    double d = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < v.size(); ++k) d += me[k] * v[k], na += me[k] * me[k], nb += v[k] * v[k];
    const double cs = (na == 0 || nb == 0) ? -2.0 : d / std::sqrt(na * nb);
    scored.emplace_back(-cs, o.code(c).id, c);
  }
  std::sort(scored.begin(), scored.end());
  Rng rng(mix_seed(plan.seed, stable_hash(o.code(code).id)));
  std::vector<RelaxStep> levels{{plan.candidate_pool_size, plan.min_distance}};
  levels.insert(levels.end(), plan.relaxation.begin(), plan.relaxation.end());
  for (std::size_t level = 0; level < levels.size(); ++level) {
    std::vector<std::size_t> order(std::min(levels[level].pool_size, scored.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (auto pos : order) {
      const auto cand = std::get<2>(scored[pos]);
      const auto a = to_index(code), b = to_index(cand);
      if (reach[a][b] || reach[b][a]) continue;
      if (dist[a][b] < levels[level].min_distance) continue;
      return std::pair{cand, level};
    }
  }
  return std::nullopt;
}

MedicalProfile profile_of(const Ontology& o, const std::vector<ConceptIdx>& facts, const std::string& id = "P00001") {
  MedicalProfile m;
  m.profile_id = id;
  m.section(SectionKind::Demographics).facts = {{"1.1", {"AGE", Vocabulary::Demographic}, "Age: 34", {}, {}},
                                                {"1.2", {"G_M", Vocabulary::Demographic}, "Gender: Male", {}, {}}};
  for (auto c : facts) {
    auto& s = m.section(section_for(o.code(c).vocabulary));
    s.facts.push_back({fact_index(s.number, s.facts.size() + 1), o.code(c), o.display_name(c), {}, {}});
  }
  return m;
}

}  // namespace

TEST(SelectPerturbation, OnlyDescendantsNearbyMeansNoReplacement) {
  const auto o = make_ontology({{"A", Vocabulary::Diagnosis, "anxiety", {}},
                                {"A1", Vocabulary::Diagnosis, "anxiety acute", {"A"}},
                                {"A2", Vocabulary::Diagnosis, "anxiety chronic", {"A1"}}});
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  try {
    select_perturbation(idx, o.require("A"), plan_no_relax());
    FAIL();
  } catch (const NoReplacementError& err) {
    EXPECT_EQ(err.code(), "A");
  }
}

TEST(SelectPerturbation, SiblingChosenOnceDistanceRelaxes) {
  // Hypertension's only non-relative neighbour is its sibling (distance 2).
  const auto o = make_ontology({{"CV", Vocabulary::Diagnosis, "cardiovascular", {}},
                                {"HTN", Vocabulary::Diagnosis, "hypertension", {"CV"}},
                                {"PRE", Vocabulary::Diagnosis, "prehypertension", {"CV"}},
                                {"HTN2", Vocabulary::Diagnosis, "hypertension stage 2", {"HTN"}}});
  TableEmbedder e({{"cardiovascular", {0.0, 1.0}},
                   {"hypertension", {1.0, 0.0}},
                   {"prehypertension", {0.9, 0.1}},
                   {"hypertension stage 2", {0.95, 0.05}}});
  ConceptVectorIndex idx(o, e);
  auto plan = plan_no_relax();
  plan.candidate_pool_size = 2;
  EXPECT_THROW(select_perturbation(idx, o.require("HTN"), plan), NoReplacementError);

  plan.relaxation = default_relaxation(plan.candidate_pool_size, plan.min_distance);
  const auto rec = select_perturbation(idx, o.require("HTN"), plan);
  EXPECT_EQ(rec.replacement.id, "PRE");
  EXPECT_EQ(rec.distance, 2u);
  EXPECT_EQ(rec.effective_min_distance, 2u);
  EXPECT_EQ(rec.relaxation_level, 2u);
}

TEST(SelectPerturbation, DistantLookalikeChosenAtBaseLevel) {
  const auto o = make_ontology({{"CV", Vocabulary::Diagnosis, "cardiovascular", {}},
                                {"HTD", Vocabulary::Diagnosis, "hypertensive disease", {"CV"}},
                                {"HTN", Vocabulary::Diagnosis, "hypertension", {"HTD"}},
                                {"BP", Vocabulary::Diagnosis, "blood pressure finding", {"CV"}},
                                {"PRE", Vocabulary::Diagnosis, "prehypertension", {"BP"}}});
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  auto plan = default_perturbation_plan(3);
  const auto rec = select_perturbation(idx, o.require("HTN"), plan);
  EXPECT_EQ(rec.replacement.id, "PRE");
  EXPECT_EQ(rec.distance, 4u);
  EXPECT_EQ(rec.relaxation_level, 0u);
}

TEST(SelectPerturbation, VocabularyIsPreserved) {
  const auto o = make_ontology({{"D", Vocabulary::Diagnosis, "depression", {}},
                                {"M", Vocabulary::Medication, "depression pill", {}},
                                {"D2", Vocabulary::Diagnosis, "insomnia", {}}});
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  EXPECT_EQ(select_perturbation(idx, o.require("D"), plan_no_relax()).replacement.id, "D2");
}

class FortyConcepts : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(FortyConcepts, MatchesExhaustiveFilterOracle) {
  const auto o = random_dag(40, GetParam(), 0.1);
  HashEmbedder e(64, GetParam());
  ConceptVectorIndex idx(o, e);
  auto plan = default_perturbation_plan(GetParam());
  plan.candidate_pool_size = 8;
  plan.relaxation = default_relaxation(plan.candidate_pool_size, plan.min_distance);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    const auto want = oracle_select(o, e, c, plan);
    try {
      const auto got = select_perturbation(idx, c, plan);
      ASSERT_TRUE(want) << o.code(c).id;
      EXPECT_EQ(got.replacement, o.code(want->first));
      EXPECT_EQ(got.relaxation_level, want->second);
    } catch (const NoReplacementError&) {
      EXPECT_FALSE(want) << o.code(c).id;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FortyConcepts, ::testing::Values(1u, 2u, 3u, 4u));

TEST(PerturbProfile, OneOfTenFacts) {
  const auto o = random_dag(120, 5, 0.05);
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  std::vector<ConceptIdx> facts;
  for (std::size_t i = 0; i < 10; ++i) facts.push_back(static_cast<ConceptIdx>(i * 11 + 3));
  auto plan = default_perturbation_plan(1);
  plan.target_fraction = 0.1;
  const auto out = perturb_profile(profile_of(o, facts), idx, plan);
  EXPECT_EQ(out.records.size(), 1u);
}

TEST(PerturbProfile, DeterministicForSameInputs) {
  const auto o = random_dag(120, 6, 0.05);
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  std::vector<ConceptIdx> facts;
  for (std::size_t i = 0; i < 20; ++i) facts.push_back(static_cast<ConceptIdx>(i * 5 + 1));
  auto plan = default_perturbation_plan(9);
  plan.target_fraction = 0.5;
  const auto m = profile_of(o, facts);
  const auto a = perturb_profile(m, idx, plan);
  const auto b = perturb_profile(m, idx, plan);
  EXPECT_EQ(to_json(a.profile).dump(), to_json(b.profile).dump());
  std::ostringstream ra, rb;
  write_perturbations(ra, a.records);
  write_perturbations(rb, b.records);
  EXPECT_EQ(ra.str(), rb.str());
}

TEST(PerturbProfile, HundredFactsAtTwentyPercent) {
  const auto o = random_dag(300, 7, 0.03);
  HashEmbedder e;
  ConceptVectorIndex idx(o, e);
  std::vector<ConceptIdx> facts;
  for (std::size_t i = 0; i < 100; ++i) facts.push_back(static_cast<ConceptIdx>(i * 3));
  auto plan = default_perturbation_plan(11);
  plan.target_fraction = 0.2;
  const auto m = profile_of(o, facts);
  const auto out = perturb_profile(m, idx, plan);
  ASSERT_EQ(out.records.size(), 20u);

  const auto reach = reachability_matrix(o);
  const auto dist = distance_matrix(o);
  std::set<std::string> touched;
  for (const auto& r : out.records) {
    const auto a = to_index(o.require(r.original)), b = to_index(o.require(r.replacement));
    EXPECT_NE(a, b);
    EXPECT_FALSE(reach[a][b] || reach[b][a]) << r.original.id << " -> " << r.replacement.id;
    EXPECT_EQ(dist[a][b], r.distance);
    EXPECT_GE(r.distance, r.effective_min_distance);
    EXPECT_LE(r.similarity_rank, r.pool_size);
    // The replacement sits at the recorded rank of a fresh retrieval.
    EXPECT_EQ(idx.ranked_neighbors(o.require(r.original)).at(r.similarity_rank - 1), o.require(r.replacement));
    const Fact* f = out.profile.find_fact(r.index);
    ASSERT_NE(f, nullptr);
    EXPECT_EQ(f->code, r.replacement);
    EXPECT_EQ(f->original, r.original);
    EXPECT_EQ(m.find_fact(r.index)->code, r.original);
    touched.insert(r.index);
  }
  EXPECT_EQ(touched.size(), 20u);
  // Everything else, demographics included, is untouched and indices survive.
  m.for_each_fact([&](const Section&, const Fact& f) {
    const Fact* g = out.profile.find_fact(f.index);
    ASSERT_NE(g, nullptr);
    if (!touched.contains(f.index)) {
      EXPECT_EQ(g->code, f.code);
    }
  });
  EXPECT_EQ(out.profile.fact_count(), m.fact_count());
}

TEST(PerturbProfile, UnreplaceableFactIsSkippedForAnother) {
  // A has only descendants; B and C are unrelated and far apart.
  const auto o = make_ontology({{"R1", Vocabulary::Diagnosis, "root one", {}},
                                {"R2", Vocabulary::Diagnosis, "root two", {}},
                                {"A", Vocabulary::Diagnosis, "alpha", {"R1"}},
                                {"A1", Vocabulary::Diagnosis, "alpha one", {"A"}},
                                {"B", Vocabulary::Diagnosis, "beta", {"R1"}},
                                {"C", Vocabulary::Diagnosis, "gamma", {"R2"}}});
  TableEmbedder e({{"alpha", {1, 0}}, {"alpha one", {1, 0.1}}, {"beta", {0, 1}}, {"gamma", {0.1, 1}},
                   {"root one", {-1, 0}}, {"root two", {-1, -0.1}}});
  ConceptVectorIndex idx(o, e);
  auto plan = plan_no_relax();
  plan.candidate_pool_size = 1;
  plan.target_fraction = 0.5;
  const auto out = perturb_profile(profile_of(o, {o.require("A"), o.require("B")}), idx, plan);
  ASSERT_EQ(out.records.size(), 1u);
  EXPECT_EQ(out.records[0].original.id, "B");
  EXPECT_EQ(out.records[0].replacement.id, "C");
}

TEST(PerturbationPlanRules, CountIsCeilingAndPlanValidated) {
  EXPECT_EQ(perturbation_count(0.16, 25), 4u);
  EXPECT_EQ(perturbation_count(0.2, 100), 20u);
  EXPECT_EQ(perturbation_count(0.1, 10), 1u);
  EXPECT_EQ(perturbation_count(0.01, 1), 1u);
  PerturbationPlan p;
  p.target_fraction = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.min_distance = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.candidate_pool_size = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  const auto steps = default_relaxation(20, 3);
  ASSERT_EQ(steps.size(), 2u);
  EXPECT_EQ(steps[0].pool_size, 40u);
  EXPECT_EQ(steps[0].min_distance, 3u);
  EXPECT_EQ(steps[1].min_distance, 2u);
}

TEST(PerturbationPlanRules, ProfileSelectorPicksCeilingShare) {
  std::vector<MedicalProfile> ps(30);
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].profile_id = ProfileGenerator::make_profile_id(i);
  const auto a = select_profiles_for_perturbation(ps, 0.16, 4);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(a, select_profiles_for_perturbation(ps, 0.16, 4));
  EXPECT_EQ(select_profiles_for_perturbation(ps, 1.0, 4).size(), 30u);
}

TEST(PerturbationRecords, JsonRoundTrip) {
  PerturbationRecord r{"P00003", "2.4", {"D1", Vocabulary::Diagnosis}, {"D9", Vocabulary::Diagnosis}, 3, kUnreachable, 1, 40, 3};
  std::stringstream ss;
  write_perturbations(ss, {r});
  const auto back = read_perturbations(ss);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(to_json(back[0]).dump(), to_json(r).dump());
  EXPECT_EQ(back[0].distance, kUnreachable);
}

TEST(HashEmbedderPort, DeterministicAndUnitNorm) {
  HashEmbedder e;
  const auto a = e.embed("Generalized anxiety disorder");
  EXPECT_EQ(a, e.embed("generalized  ANXIETY disorder"));
  EXPECT_NEAR(norm(a), 1.0, 1e-12);
  EXPECT_GT(*cosine(a, e.embed("anxiety disorder")), *cosine(a, e.embed("hip replacement")));
  EXPECT_FALSE(cosine(a, e.embed("")));
}
