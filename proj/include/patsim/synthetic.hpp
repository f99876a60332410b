#pragma once

// Synthetic look-alike ontologies and cohorts for offline runs and tests.
// Nothing here is derived from a licensed vocabulary.

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <optional>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "patsim/cohort.hpp"
#include "patsim/ontology.hpp"
#include "patsim/rng.hpp"

namespace patsim::synthetic {

struct VocabularySeed {
  Vocabulary vocabulary;
  std::string prefix;
  std::string root_name;
  std::vector<std::string> bases;
  std::vector<std::string> modifiers;
};

inline const std::vector<VocabularySeed>& vocabulary_seeds() {
  static const std::vector<VocabularySeed> seeds = {
      {Vocabulary::Diagnosis, "D", "Clinical finding",
       {"anxiety disorder", "hypertension", "diabetes mellitus", "insomnia", "migraine", "asthma",
        "hyperlipidemia", "hypothyroidism", "obesity", "back pain", "osteoarthritis",
        "panic disorder", "sleep apnea", "gastroesophageal reflux", "fibromyalgia", "anemia",
        "allergic rhinitis", "tobacco dependence", "neuropathy", "kidney disease"},
       {"chronic", "acute", "mild", "severe", "recurrent", "generalized", "secondary", "essential",
        "persistent", "episodic"}},
      {Vocabulary::Medication, "M", "Pharmaceutical product",
       {"lisinopril", "metformin", "atorvastatin", "levothyroxine", "omeprazole", "albuterol",
        "gabapentin", "amlodipine", "losartan", "buspirone", "hydroxyzine", "melatonin",
        "prednisone", "ibuprofen", "trazodone", "fluoxetine", "sertraline", "duloxetine"},
       {"oral tablet", "oral capsule", "extended release", "injectable solution", "topical cream"}},
      {Vocabulary::Procedure, "P", "Procedure",
       {"psychotherapy", "diagnostic interview examination", "electrocardiogram",
        "blood count panel", "lipid panel", "sleep study", "physical therapy evaluation",
        "colonoscopy", "chest radiograph", "thyroid function test", "metabolic panel",
        "office visit"},
       {"individual", "group", "comprehensive", "limited", "follow up", "initial", "extended"}},
  };
  return seeds;
}

inline std::string format_id(const std::string& prefix, std::size_t n) {
  std::string digits = std::to_string(n);
  return prefix + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

inline const std::vector<std::string>& outcome_drugs() {
  static const std::vector<std::string> drugs = {"fluoxetine", "sertraline", "trazodone",
                                                 "duloxetine"};
  return drugs;
}

inline std::string outcome_id(const std::string& drug) {
  std::string up;
  for (char c : drug) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return "RESP_" + up;
}

/// Ontology with demographic and outcome concepts plus `n_clinical` clinical
/// concepts split roughly 50/25/25 across diagnoses, medications and
/// procedures. Clinical concepts form a multi-parent DAG: vocabulary root ->
/// base term -> "<modifier> <base>" -> "<m2> <m1> <base>" (two parents).
inline Ontology build_ontology(std::size_t n_clinical) {
  std::vector<ConceptNode> nodes;
  auto add = [&](std::string id, Vocabulary v, std::string name, std::vector<std::string> parents) {
    nodes.push_back({{std::move(id), v}, std::move(name), std::move(parents)});
  };
  add(std::string(kGenderRoot), Vocabulary::Demographic, "Gender", {});
  add("G_F", Vocabulary::Demographic, "Female", {std::string(kGenderRoot)});
  add("G_M", Vocabulary::Demographic, "Male", {std::string(kGenderRoot)});
  add(std::string(kAgeBinRoot), Vocabulary::Demographic, "Age bin", {});
  for (const char* bin : {"18-29", "30-39", "40-49", "50-64", "65-80"})
    add(std::string("AGE_") + bin, Vocabulary::Demographic, bin, {std::string(kAgeBinRoot)});
  add("RESP", Vocabulary::Outcome, "Antidepressant response", {});
  for (const auto& d : outcome_drugs())
    add(outcome_id(d), Vocabulary::Outcome, "Response to " + d, {"RESP"});

  const std::array<std::size_t, 3> quota = {n_clinical - 2 * (n_clinical / 4), n_clinical / 4,
                                            n_clinical / 4};
  const auto& seeds = vocabulary_seeds();
  for (std::size_t vi = 0; vi < seeds.size(); ++vi) {
    const auto& s = seeds[vi];
    std::size_t count = 0;
    std::size_t next_id = 0;
    std::map<std::string, std::string> id_of;  // name -> id
    auto emit = [&](const std::string& name, std::vector<std::string> parents) {
      if (count >= quota[vi] || id_of.contains(name)) return;
      auto id = format_id(s.prefix, next_id++);
      id_of[name] = id;
      add(id, s.vocabulary, name, std::move(parents));
      ++count;
    };
    if (quota[vi] == 0) continue;
    emit(s.root_name, {});
    const auto root_id = id_of[s.root_name];
    for (const auto& b : s.bases) emit(b, {root_id});
    for (const auto& m : s.modifiers)
      for (const auto& b : s.bases)
        if (id_of.contains(b)) emit(m + " " + b, {id_of[b]});
    for (std::size_t i = 0; i < s.modifiers.size(); ++i)
      for (std::size_t k = 0; k < s.modifiers.size(); ++k) {
        if (i == k) continue;
        for (const auto& b : s.bases) {
          const auto p1 = s.modifiers[i] + " " + b;
          const auto p2 = s.modifiers[k] + " " + b;
          if (id_of.contains(p1) && id_of.contains(p2))
            emit(s.modifiers[k] + " " + p1, {id_of[p1], id_of[p2]});
        }
      }
  }
  return Ontology::from_nodes(std::move(nodes));
}

struct CohortSpec {
  std::size_t n_patients = 2000;
  std::size_t clusters = 6;
  std::uint64_t seed = 7;
  double strong_effect_rate = 0.04;
};

/// Latent-cluster cohort: each patient belongs to one cluster that boosts the
/// prevalence of a cluster-specific concept subset; response to each drug is
/// logistic in a sparse set of concept effects plus a cluster effect.
inline std::vector<PatientRecord> build_cohort(const Ontology& o, const CohortSpec& spec) {
  Rng rng(spec.seed);
  std::vector<ConceptIdx> clinical, outcomes;
  std::optional<ConceptIdx> female, male;
  std::vector<ConceptIdx> ages;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    const auto& code = o.code(c);
    if (is_clinical(code.vocabulary) && !o.parents(c).empty()) clinical.push_back(c);
    if (code.vocabulary == Vocabulary::Outcome && !o.parents(c).empty()) outcomes.push_back(c);
    if (demographic_kind(o, c) == DemographicKind::AgeBin) ages.push_back(c);
  }
  female = o.find("G_F");
  male = o.find("G_M");

  const std::size_t nc = clinical.size();
  std::vector<double> base(nc);
  std::vector<std::vector<double>> boost(spec.clusters, std::vector<double>(nc, 1.0));
  for (std::size_t i = 0; i < nc; ++i) {
    base[i] = 0.01 + 0.07 * rng.uniform();
    for (std::size_t k = 0; k < spec.clusters; ++k)
      if (rng.uniform() < 0.12) boost[k][i] = 3.0 + 4.0 * rng.uniform();
  }
  std::vector<std::vector<double>> effect(outcomes.size(), std::vector<double>(nc, 0.0));
  std::vector<std::vector<double>> cluster_effect(outcomes.size(),
                                                  std::vector<double>(spec.clusters, 0.0));
  for (std::size_t d = 0; d < outcomes.size(); ++d) {
    for (std::size_t i = 0; i < nc; ++i) {
      const double u = rng.uniform();
      if (u < spec.strong_effect_rate) {
        // Strong effects push some pairwise ratios past the gate's upper bound.
        effect[d][i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (2.5 + 1.5 * rng.uniform());
      } else if (u < 0.15) {
        effect[d][i] = 2.4 * rng.uniform() - 1.2;
      }
    }
    for (std::size_t k = 0; k < spec.clusters; ++k)
      cluster_effect[d][k] = 1.6 * rng.uniform() - 0.8;
  }
  const std::array<double, 5> age_w = {0.18, 0.22, 0.22, 0.24, 0.14};

  std::vector<PatientRecord> out;
  for (std::size_t p = 0; p < spec.n_patients; ++p) {
    PatientRecord r;
    r.patient_id = format_id("PT", p);
    const auto k = static_cast<std::size_t>(rng.below(spec.clusters));
    if (female && male) r.concepts.push_back(rng.uniform() < 0.56 ? *female : *male);
    if (!ages.empty())
      r.concepts.push_back(ages[rng.weighted(std::span(age_w).first(ages.size()))]);
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < nc; ++i) {
      if (rng.uniform() < std::min(0.6, base[i] * boost[k][i])) present.push_back(i);
    }
    for (auto i : present) r.concepts.push_back(clinical[i]);
    for (std::size_t d = 0; d < outcomes.size(); ++d) {
      if (rng.uniform() >= 0.45) continue;  // not treated with this drug
      double logit = -0.4 + cluster_effect[d][k];
      for (auto i : present) logit += effect[d][i];
      r.outcomes[outcomes[d]] = rng.uniform() < 1.0 / (1.0 + std::exp(-logit));
    }
    std::sort(r.concepts.begin(), r.concepts.end());
    r.concepts.erase(std::unique(r.concepts.begin(), r.concepts.end()), r.concepts.end());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace patsim::synthetic
