#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patsim/embedding.hpp"
#include "patsim/error.hpp"
#include "patsim/ontology.hpp"
#include "patsim/profilegen.hpp"
#include "patsim/rng.hpp"

namespace patsim {

struct RelaxStep {
  std::size_t pool_size = 0;
  std::size_t min_distance = 0;
};

struct PerturbationPlan {
  double target_fraction = 0.16;
  std::size_t candidate_pool_size = 20;
  std::size_t min_distance = 3;
  std::uint64_t seed = 0;
  std::vector<RelaxStep> relaxation;  // tried in order after the base level

  void validate() const {
    if (!(target_fraction > 0.0 && target_fraction <= 1.0))
      throw ConfigError("target_fraction must be in (0, 1]");
    if (candidate_pool_size < 1) throw ConfigError("candidate_pool_size must be >= 1");
    if (min_distance < 1) throw ConfigError("min_distance must be >= 1");
  }
};

// Double the pool, then lower the distance floor one step at a time to 2.
inline std::vector<RelaxStep> default_relaxation(std::size_t pool, std::size_t min_distance) {
  std::vector<RelaxStep> steps{{pool * 2, min_distance}};
  for (std::size_t d = min_distance; d > 2; --d) steps.push_back({pool * 2, d - 1});
  return steps;
}

inline PerturbationPlan default_perturbation_plan(std::uint64_t seed = 0) {
  PerturbationPlan p;
  p.seed = seed;
  p.relaxation = default_relaxation(p.candidate_pool_size, p.min_distance);
  return p;
}

struct PerturbationRecord {
  std::string profile_id;
  std::string index;
  ConceptCode original;
  ConceptCode replacement;
  std::size_t similarity_rank = 0;  // 1-based position in the cosine ranking
  std::size_t distance = 0;         // kUnreachable when disconnected
  std::size_t relaxation_level = 0; // 0 = base plan
  std::size_t pool_size = 0;
  std::size_t effective_min_distance = 0;
};

class NoReplacementError : public Error {
 public:
  NoReplacementError(std::string code, const std::string& what) : Error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

/// Display-name embeddings for every clinical concept, grouped for
/// same-vocabulary nearest-neighbour search.
class ConceptVectorIndex {
 public:
  ConceptVectorIndex(const Ontology& o, const Embedder& embedder) : ontology_(o) {
    vectors_.resize(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
      const auto c = static_cast<ConceptIdx>(i);
      if (!is_clinical(o.code(c).vocabulary)) continue;
      vectors_[i] = embedder.embed(o.display_name(c));
    }
  }

  const Ontology& ontology() const noexcept { return ontology_; }
  const Embedding& vector(ConceptIdx c) const { return vectors_.at(to_index(c)); }

  // All same-vocabulary concepts except `c`, by cosine descending then id.
  std::vector<ConceptIdx> ranked_neighbors(ConceptIdx c) const {
    const auto vocab = ontology_.code(c).vocabulary;
    std::vector<std::pair<double, ConceptIdx>> scored;
    for (std::size_t i = 0; i < vectors_.size(); ++i) {
      const auto other = static_cast<ConceptIdx>(i);
      if (other == c || ontology_.code(other).vocabulary != vocab) continue;
      scored.emplace_back(cosine(vectors_[to_index(c)], vectors_[i]).value_or(-2.0), other);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return ontology_.code(a.second).id < ontology_.code(b.second).id;
    });
    std::vector<ConceptIdx> out;
    out.reserve(scored.size());
    for (const auto& [s, o] : scored) out.push_back(o);
    return out;
  }

 private:
  const Ontology& ontology_;
  std::vector<Embedding> vectors_;
};

/// Picks a semantically close but clinically distinct replacement for `code`.
///
/// For each level (base plan, then each relaxation step): take the top
/// pool_size neighbours, shuffle them under the plan seed, and return the
/// first that is neither an ancestor nor a descendant, is at least
/// min_distance away in the hierarchy, and is not in `exclude`.
inline PerturbationRecord select_perturbation(const ConceptVectorIndex& index, ConceptIdx code,
                                              const PerturbationPlan& plan,
                                              const std::set<ConceptIdx>& exclude = {}) {
  const auto& o = index.ontology();
  const auto ranked = index.ranked_neighbors(code);
  Rng rng(mix_seed(plan.seed, stable_hash(o.code(code).id)));

  std::vector<RelaxStep> levels{{plan.candidate_pool_size, plan.min_distance}};
  levels.insert(levels.end(), plan.relaxation.begin(), plan.relaxation.end());

  for (std::size_t level = 0; level < levels.size(); ++level) {
    const auto [pool_size, min_d] = levels[level];
    std::vector<std::size_t> order(std::min(pool_size, ranked.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (auto pos : order) {
      const auto cand = ranked[pos];
      if (exclude.contains(cand)) continue;
      if (o.is_ancestor_or_descendant(code, cand)) continue;
      const auto d = o.hierarchical_distance(code, cand);
      if (d < min_d) continue;
      return {{}, {}, o.code(code), o.code(cand), pos + 1, d, level, pool_size, min_d};
    }
  }
  throw NoReplacementError(o.code(code).id,
                           "no replacement survives filtering for '" + o.code(code).id + "'");
}

inline std::size_t perturbation_count(double fraction, std::size_t eligible) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(eligible) - 1e-9));
}

struct PerturbedProfile {
  MedicalProfile profile;
  std::vector<PerturbationRecord> records;
};

/// Replaces ceil(target_fraction * eligible) non-demographic facts, chosen
/// uniformly under the plan seed. Indices are preserved; a fact without a
/// viable replacement is skipped in favour of the next one in the draw.
inline PerturbedProfile perturb_profile(const MedicalProfile& profile, const ConceptVectorIndex& index,
                                        const PerturbationPlan& plan) {
  plan.validate();
  const auto& o = index.ontology();
  PerturbedProfile out{profile, {}};
  std::vector<Fact*> eligible;
  std::set<ConceptIdx> present;
  for (auto& s : out.profile.sections) {
    for (auto& f : s.facts) {
      if (auto c = o.find(f.code.id)) present.insert(*c);
      if (s.number != static_cast<int>(SectionKind::Demographics)) eligible.push_back(&f);
    }
  }
  const auto want = perturbation_count(plan.target_fraction, eligible.size());
  Rng rng(mix_seed(plan.seed, stable_hash(profile.profile_id)));
  rng.shuffle(eligible);
  for (Fact* f : eligible) {
    if (out.records.size() >= want) break;
    const auto c = o.require(f->code);
    PerturbationPlan fact_plan = plan;
    fact_plan.seed = mix_seed(plan.seed, stable_hash(profile.profile_id + "/" + f->index));
    try {
      auto rec = select_perturbation(index, c, fact_plan, present);
      rec.profile_id = profile.profile_id;
      rec.index = f->index;
      present.insert(o.require(rec.replacement));
      f->original = f->code;
      f->code = rec.replacement;
      f->text = o.display_name(o.require(rec.replacement));
      out.records.push_back(std::move(rec));
    } catch (const NoReplacementError&) {
      continue;
    }
  }
  return out;
}

// Profile-level selector: which profiles receive perturbations at all.
inline std::set<std::string> select_profiles_for_perturbation(
    const std::vector<MedicalProfile>& profiles, double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& p : profiles) ids.push_back(p.profile_id);
  std::sort(ids.begin(), ids.end());
  Rng rng(mix_seed(seed, 0x5E1EC7ULL));
  rng.shuffle(ids);
  ids.resize(std::min(ids.size(), perturbation_count(fraction, ids.size())));
  return {ids.begin(), ids.end()};
}

// Ground-truth file: one JSON object per perturbed fact.
inline nlohmann::json to_json(const PerturbationRecord& r) {
  return {{"profile_id", r.profile_id},
          {"index", r.index},
          {"original", to_json(r.original)},
          {"replacement", to_json(r.replacement)},
          {"similarity_rank", r.similarity_rank},
          {"distance", r.distance == kUnreachable ? nlohmann::json(nullptr) : nlohmann::json(r.distance)},
          {"relaxation_level", r.relaxation_level},
          {"pool_size", r.pool_size},
          {"min_distance", r.effective_min_distance}};
}

inline PerturbationRecord perturbation_from_json(const nlohmann::json& j) {
  PerturbationRecord r;
  r.profile_id = j.at("profile_id").get<std::string>();
  r.index = j.at("index").get<std::string>();
  r.original = concept_from_json(j.at("original"));
  r.replacement = concept_from_json(j.at("replacement"));
  r.similarity_rank = j.at("similarity_rank").get<std::size_t>();
  r.distance = j.at("distance").is_null() ? kUnreachable : j.at("distance").get<std::size_t>();
  r.relaxation_level = j.at("relaxation_level").get<std::size_t>();
  r.pool_size = j.at("pool_size").get<std::size_t>();
  r.effective_min_distance = j.at("min_distance").get<std::size_t>();
  return r;
}

inline void write_perturbations(std::ostream& out, const std::vector<PerturbationRecord>& recs) {
  for (const auto& r : recs) out << to_json(r).dump() << '\n';
}

inline std::vector<PerturbationRecord> read_perturbations(std::istream& in) {
  std::vector<PerturbationRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    out.push_back(perturbation_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace patsim
