#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "patsim/cohort.hpp"
#include "patsim/error.hpp"
#include "patsim/ontology.hpp"
#include "patsim/rng.hpp"

namespace patsim {

enum class GateMode {
  Aggregate,     // MAX over pairwise RRs must lie in (low, high]
  StrictPerPair  // every defined pairwise RR must lie in (low, high]
};

struct GenConfig {
  ConceptIdx outcome{};
  std::size_t n_patients = 1;
  std::size_t top_k = 500;
  double rr_high = 7.0;
  double rr_low = 1.0 / 1.5;
  double diversity_threshold = 1.5;
  std::size_t max_residual_additions = 5;
  std::uint64_t rng_seed = 0;
  GateMode gate_mode = GateMode::Aggregate;

  void validate() const {
    if (!(rr_low < 1.0 && 1.0 < rr_high))
      throw ConfigError("risk-ratio band must satisfy rr_low < 1 < rr_high");
    if (!(diversity_threshold > 1.0)) throw ConfigError("diversity_threshold must exceed 1");
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
  }
};

enum class Stage { DemographicSeed, IndependenceScreen, DiversityExpansion };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::DemographicSeed: return "demographic_seed";
    case Stage::IndependenceScreen: return "independence_screen";
    case Stage::DiversityExpansion: return "diversity_expansion";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (auto st : {Stage::DemographicSeed, Stage::IndependenceScreen, Stage::DiversityExpansion})
    if (to_string(st) == s) return st;
  throw ParseError("unknown stage '" + std::string(s) + "'");
}

struct PairwiseRR {
  std::string against;  // concept id already in the profile
  std::optional<double> rr;
};

struct Provenance {
  Stage stage = Stage::DemographicSeed;
  std::vector<PairwiseRR> pairs;     // in selection order of `against`
  std::optional<double> aggregate;   // MAX of the defined pairwise values
};

struct Fact {
  std::string index;  // "X.Y"
  ConceptCode code;
  std::string text;
  Provenance provenance;
  std::optional<ConceptCode> original;  // set when the fact was perturbed
};

struct Section {
  int number = 0;
  std::string title;
  std::vector<Fact> facts;
};

// Candidate considered by Stage 3 or 4, admitted or not.
struct GateDecision {
  std::string candidate;
  Stage stage = Stage::IndependenceScreen;
  bool admitted = false;
  std::optional<double> aggregate;
};

enum class SectionKind { Demographics = 1, Diagnoses = 2, Medications = 3, Procedures = 4 };

inline constexpr std::array<std::string_view, 4> kSectionTitles = {
    "Demographics", "Diagnosis History", "Medications", "Procedures"};

/// Indexed fact list handed to the patient simulator.
///
/// Section numbers are fixed (1 demographics, 2 diagnoses, 3 medications,
/// 4 procedures) and fact indices run 1..len inside each section.
struct MedicalProfile {
  std::string profile_id;
  ConceptCode outcome;
  std::uint64_t seed = 0;
  std::array<Section, 4> sections;
  double predicted_response = 0.0;
  std::vector<GateDecision> decisions;

  MedicalProfile() {
    for (int i = 0; i < 4; ++i) sections[i] = Section{i + 1, std::string(kSectionTitles[i]), {}};
  }

  Section& section(SectionKind k) { return sections[static_cast<int>(k) - 1]; }
  const Section& section(SectionKind k) const { return sections[static_cast<int>(k) - 1]; }

  std::size_t fact_count() const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.facts.size();
    return n;
  }

  const Fact* find_fact(std::string_view index) const {
    for (const auto& s : sections)
      for (const auto& f : s.facts)
        if (f.index == index) return &f;
    return nullptr;
  }

  template <typename F>
  void for_each_fact(F&& fn) const {
    for (const auto& s : sections)
      for (const auto& f : s.facts) fn(s, f);
  }
};

inline SectionKind section_for(Vocabulary v) {
  switch (v) {
    case Vocabulary::Diagnosis: return SectionKind::Diagnoses;
    case Vocabulary::Medication: return SectionKind::Medications;
    case Vocabulary::Procedure: return SectionKind::Procedures;
    default: return SectionKind::Demographics;
  }
}

inline std::string fact_index(int section, std::size_t position) {
  return std::to_string(section) + "." + std::to_string(position);
}

// ---------------------------------------------------------------------------
// Risk-ratio gates

struct GateResult {
  bool pass = false;
  std::vector<std::pair<ConceptIdx, std::optional<double>>> pairs;
  std::optional<double> aggregate;
};

// `rr(s, v)` supplies the pairwise risk ratio; the generator passes a
// precomputed table, everything else the direct computation.
template <typename RrFn>
GateResult evaluate_rr_gate_with(std::span<const ConceptIdx> selected, ConceptIdx candidate, const GenConfig& cfg,
                                 RrFn&& rr_of) {
  GateResult r;
  bool all_in_band = true;
  for (auto s : selected) {
    const std::optional<double> rr = rr_of(s, candidate);
    r.pairs.emplace_back(s, rr);
    if (!rr) continue;
    if (!r.aggregate || *rr > *r.aggregate) r.aggregate = rr;
    if (!(*rr > cfg.rr_low && *rr <= cfg.rr_high)) all_in_band = false;
  }
  if (!r.aggregate) {
    r.pass = false;  // no defined pair: never admit on zero evidence
  } else if (cfg.gate_mode == GateMode::Aggregate) {
    r.pass = *r.aggregate > cfg.rr_low && *r.aggregate <= cfg.rr_high;
  } else {
    r.pass = all_in_band;
  }
  return r;
}

inline GateResult evaluate_rr_gate(const CohortStats& stats, std::span<const ConceptIdx> selected,
                                   ConceptIdx candidate, const GenConfig& cfg) {
  return evaluate_rr_gate_with(selected, candidate, cfg,
                               [&](ConceptIdx s, ConceptIdx v) { return risk_ratio(stats, s, v, cfg.outcome); });
}

inline bool passes_rr_gate(const CohortStats& stats, std::span<const ConceptIdx> selected,
                           ConceptIdx candidate, const GenConfig& cfg) {
  return evaluate_rr_gate(stats, selected, candidate, cfg).pass;
}

inline GateResult evaluate_rr_exceeds(const CohortStats& stats, std::span<const ConceptIdx> selected,
                                      ConceptIdx candidate, double threshold, ConceptIdx outcome) {
  GateResult r;
  for (auto s : selected) {
    auto rr = risk_ratio(stats, s, candidate, outcome);
    r.pairs.emplace_back(s, rr);
    if (!rr) continue;
    if (!r.aggregate || *rr > *r.aggregate) r.aggregate = rr;
    if (*rr > threshold) r.pass = true;
  }
  return r;
}

inline bool any_rr_exceeds(const CohortStats& stats, std::span<const ConceptIdx> selected,
                           ConceptIdx candidate, double threshold, ConceptIdx outcome) {
  return evaluate_rr_exceeds(stats, selected, candidate, threshold, outcome).pass;
}

// ---------------------------------------------------------------------------
// Response-probability port

class ResponsePredictor {
 public:
  virtual ~ResponsePredictor() = default;
  virtual double predict(const CohortStats& stats, std::span<const ConceptIdx> selected,
                         ConceptIdx outcome) const = 0;
};

// Baseline: start from the cohort log-odds of response and add ln RR(f -> outcome)
// (add-one smoothed) for every selected feature; clipped to [0.01, 0.99].
class LogOddsPredictor final : public ResponsePredictor {
 public:
  double predict(const CohortStats& stats, std::span<const ConceptIdx> selected,
                 ConceptIdx outcome) const override {
    const double base = stats.response(outcome).smoothed();
    double logit = std::log(base / (1.0 - base));
    for (auto f : selected) logit += std::log(outcome_risk_ratio(stats, f, outcome));
    const double p = 1.0 / (1.0 + std::exp(-logit));
    return std::clamp(p, 0.01, 0.99);
  }
};

class GenerationError : public Error {
 public:
  GenerationError(MedicalProfile partial, const std::string& what)
      : Error(what), partial_(std::move(partial)) {}
  const MedicalProfile& partial() const noexcept { return partial_; }

 private:
  MedicalProfile partial_;
};

/// Phase-1 generator: top-K relevance filter, demographic seeding,
/// independence-screened selection, and bounded diversity expansion.
///
/// Stage-1 and residual pools are computed once; generate() is const and
/// may run concurrently for different patient indices.
class ProfileGenerator {
 public:
  ProfileGenerator(const CohortStats& stats, DemographicDistribution gender,
                   DemographicDistribution age, GenConfig cfg, const ResponsePredictor& predictor)
      : stats_(stats),
        gender_(std::move(gender)),
        age_(std::move(age)),
        cfg_(cfg),
        predictor_(predictor) {
    cfg_.validate();
    if (gender_.categories.empty() || age_.categories.empty())
      throw ConfigError("demographic distributions must be non-empty");
    top_k_ = rank_top_k_predictors(stats_, cfg_.outcome, cfg_.top_k);
    std::vector<char> in_v(stats_.ontology().size(), 0);
    for (auto v : top_k_) in_v[to_index(v)] = 1;
    const auto& o = stats_.ontology();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const auto c = static_cast<ConceptIdx>(i);
      if (in_v[i] || !is_clinical(o.code(c).vocabulary) || stats_.support(c) == 0) continue;
      residual_.push_back(c);
    }
    // Stage 3 only pairs demographic seeds and top-K members with top-K
    // candidates, so those ratios are tabulated once.
    row_of_.assign(o.size(), -1);
    col_of_.assign(o.size(), -1);
    std::vector<ConceptIdx> rows;
    for (const auto* d : {&gender_, &age_})
      for (const auto& [c, w] : d->categories) rows.push_back(c);
    rows.insert(rows.end(), top_k_.begin(), top_k_.end());
    for (auto c : rows)
      if (row_of_[to_index(c)] < 0) row_of_[to_index(c)] = static_cast<std::int32_t>(n_rows_++);
    for (std::size_t j = 0; j < top_k_.size(); ++j) col_of_[to_index(top_k_[j])] = static_cast<std::int32_t>(j);
    rr_table_.resize(n_rows_ * top_k_.size());
    for (auto c : rows) {
      const auto r = static_cast<std::size_t>(row_of_[to_index(c)]);
      for (std::size_t j = 0; j < top_k_.size(); ++j)
        rr_table_[r * top_k_.size() + j] = risk_ratio(stats_, c, top_k_[j], cfg_.outcome);
    }
  }

  const std::vector<ConceptIdx>& top_k() const noexcept { return top_k_; }
  const std::vector<ConceptIdx>& residual() const noexcept { return residual_; }
  const GenConfig& config() const noexcept { return cfg_; }

  MedicalProfile generate(std::size_t patient_index) const {
    const auto& o = stats_.ontology();
    const std::uint64_t seed = cfg_.rng_seed + patient_index;
    Rng rng(seed);

    MedicalProfile prof;
    prof.profile_id = make_profile_id(patient_index);
    prof.outcome = o.code(cfg_.outcome);
    prof.seed = seed;

    std::vector<ConceptIdx> selected;
    std::vector<std::pair<ConceptIdx, Provenance>> admitted;

    // Stage 2: demographic seed.
    const auto gw = gender_.weights();
    const auto aw = age_.weights();
    const auto gender = gender_.categories[rng.weighted(gw)].first;
    const auto age = age_.categories[rng.weighted(aw)].first;
    selected.push_back(gender);
    selected.push_back(age);

    // Stage 3: independence screen over V in random order.
    std::vector<ConceptIdx> pool = top_k_;
    rng.shuffle(pool);
    for (auto v : pool) {
      auto g = evaluate_rr_gate_with(selected, v, cfg_, [&](ConceptIdx a, ConceptIdx b) { return table_rr(a, b); });
      prof.decisions.push_back({o.code(v).id, Stage::IndependenceScreen, g.pass, g.aggregate});
      if (!g.pass) continue;
      admitted.emplace_back(v, to_provenance(Stage::IndependenceScreen, g));
      selected.push_back(v);
    }

    // Stage 4: diversity expansion against the Stage-3 snapshot.
    const std::vector<ConceptIdx> intermediate = selected;
    std::vector<ConceptIdx> residual = residual_;
    rng.shuffle(residual);
    std::size_t added = 0;
    for (auto u : residual) {
      if (added >= cfg_.max_residual_additions) break;
      auto g = evaluate_rr_exceeds(stats_, intermediate, u, cfg_.diversity_threshold, cfg_.outcome);
      prof.decisions.push_back({o.code(u).id, Stage::DiversityExpansion, g.pass, g.aggregate});
      if (!g.pass) continue;
      admitted.emplace_back(u, to_provenance(Stage::DiversityExpansion, g));
      selected.push_back(u);
      ++added;
    }

    // Assemble sections.
    auto& demo = prof.section(SectionKind::Demographics);
    const auto age_label = o.display_name(age);
    const auto age_years = age_bin_midpoint(age_label);
    demo.facts.push_back({"1.1", o.code(age),
                          "Age: " + (age_years ? std::to_string(*age_years) : age_label),
                          {Stage::DemographicSeed, {}, std::nullopt}, std::nullopt});
    demo.facts.push_back({"1.2", o.code(gender), "Gender: " + o.display_name(gender),
                          {Stage::DemographicSeed, {}, std::nullopt}, std::nullopt});
    for (auto& [c, prov] : admitted) {
      auto& sec = prof.section(section_for(o.code(c).vocabulary));
      sec.facts.push_back({fact_index(sec.number, sec.facts.size() + 1), o.code(c),
                           o.display_name(c), std::move(prov), std::nullopt});
    }

    try {
      prof.predicted_response = predictor_.predict(stats_, selected, cfg_.outcome);
    } catch (const std::exception& e) {
      throw GenerationError(std::move(prof), std::string("response predictor failed: ") + e.what());
    }
    if (!(prof.predicted_response >= 0.0 && prof.predicted_response <= 1.0))
      throw GenerationError(std::move(prof), "response predictor returned a value outside [0, 1]");
    return prof;
  }

  // Generates cfg.n_patients profiles; each worker owns disjoint indices.
  std::vector<MedicalProfile> generate_all(unsigned workers = 1) const {
    std::vector<MedicalProfile> out(cfg_.n_patients);
    workers = std::max(1u, workers);
    if (workers == 1) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = generate(j);
      return out;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t j = w; j < out.size(); j += workers) out[j] = generate(j);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return out;
  }

  static std::string make_profile_id(std::size_t index) {
    std::ostringstream os;
    os << 'P' << std::setw(5) << std::setfill('0') << index;
    return os.str();
  }

 private:
  std::optional<double> table_rr(ConceptIdx s, ConceptIdx v) const {
    const auto r = row_of_[to_index(s)], c = col_of_[to_index(v)];
    if (r < 0 || c < 0) return risk_ratio(stats_, s, v, cfg_.outcome);
    return rr_table_[static_cast<std::size_t>(r) * top_k_.size() + static_cast<std::size_t>(c)];
  }

  Provenance to_provenance(Stage stage, const GateResult& g) const {
    Provenance p{stage, {}, g.aggregate};
    for (const auto& [s, rr] : g.pairs) p.pairs.push_back({stats_.ontology().code(s).id, rr});
    return p;
  }

  const CohortStats& stats_;
  DemographicDistribution gender_;
  DemographicDistribution age_;
  GenConfig cfg_;
  const ResponsePredictor& predictor_;
  std::vector<ConceptIdx> top_k_;
  std::vector<ConceptIdx> residual_;
  std::vector<std::int32_t> row_of_, col_of_;
  std::size_t n_rows_ = 0;
  std::vector<std::optional<double>> rr_table_;
};

inline MedicalProfile generate_profile(const CohortStats& stats, const DemographicDistribution& gender,
                                       const DemographicDistribution& age, const GenConfig& cfg,
                                       const ResponsePredictor& predictor,
                                       std::size_t patient_index = 0) {
  return ProfileGenerator(stats, gender, age, cfg, predictor).generate(patient_index);
}

// ---------------------------------------------------------------------------
// Phase 2: sigma-band plan and stratified selection

inline double binomial_pmf(long n, long k, double p) {
  if (k < 0 || k > n) return 0.0;
  const long double ln = std::lgamma(static_cast<long double>(n) + 1) -
                         std::lgamma(static_cast<long double>(k) + 1) -
                         std::lgamma(static_cast<long double>(n - k) + 1) +
                         k * std::log(static_cast<long double>(p)) +
                         (n - k) * std::log1p(-static_cast<long double>(p));
  return static_cast<double>(std::exp(ln));
}

struct SigmaBand {
  long k_lo = 0;  // inclusive; k_lo > k_hi marks an empty band
  long k_hi = -1;
  double target_mass = 0.0;

  bool contains(long k) const { return k >= k_lo && k <= k_hi; }
};

struct SigmaBandPlan {
  long n = 0;
  double p = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  std::array<SigmaBand, 7> bands{};

  // Band holding success count k (clamped to [0, n]).
  std::size_t band_of(long k) const {
    k = std::clamp(k, 0L, n);
    for (std::size_t b = 0; b < bands.size(); ++b)
      if (bands[b].contains(k)) return b;
    return bands.size() - 1;
  }

  std::size_t band_of_probability(double p_hat) const {
    return band_of(std::lround(p_hat * static_cast<double>(n)));
  }
};

/// Seven bands cut at floor(mu + j*sigma) for j = -3..3 (j != 0), covering
/// success counts 0..n; each band's target mass is its exact binomial mass.
inline SigmaBandPlan sigma_band_plan(long n, double p) {
  if (n < 1) throw ConfigError("sigma-band plan needs n >= 1");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("sigma-band plan needs 0 < p < 1");
  SigmaBandPlan plan;
  plan.n = n;
  plan.p = p;
  plan.mu = static_cast<double>(n) * p;
  plan.sigma = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
  std::array<long, 6> cuts{};
  const int mult[6] = {-3, -2, -1, 1, 2, 3};
  for (int i = 0; i < 6; ++i)
    cuts[i] = static_cast<long>(std::floor(plan.mu + mult[i] * plan.sigma));
  long lo = 0;
  for (int b = 0; b < 7; ++b) {
    long hi = b < 6 ? std::min(cuts[b], n) : n;
    SigmaBand band{std::max(lo, 0L), hi, 0.0};
    for (long k = band.k_lo; k <= band.k_hi; ++k) band.target_mass += binomial_pmf(n, k, p);
    plan.bands[b] = band;
    lo = std::max(lo, hi + 1);
  }
  return plan;
}

// Largest-remainder apportionment of `total` over non-negative weights,
// with optional per-slot caps. Ties go to the lower slot index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total,
                                                  std::span<const std::size_t> caps = {}) {
  const std::size_t n = weights.size();
  std::vector<std::size_t> out(n, 0);
  auto cap = [&](std::size_t i) { return caps.empty() ? SIZE_MAX : caps[i]; };
  std::size_t remaining = total;
  while (remaining > 0) {
    double wsum = 0.0;
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i] < cap(i)) {
        open.push_back(i);
        wsum += weights[i];
      }
    }
    if (open.empty()) break;
    std::vector<double> share(n, 0.0);
    for (auto i : open)
      share[i] = wsum > 0.0 ? static_cast<double>(remaining) * weights[i] / wsum
                            : static_cast<double>(remaining) / static_cast<double>(open.size());
    std::size_t given = 0;
    std::vector<std::pair<double, std::size_t>> rema;
    for (auto i : open) {
      auto whole = static_cast<std::size_t>(std::floor(share[i]));
      whole = std::min(whole, cap(i) - out[i]);
      out[i] += whole;
      given += whole;
      if (out[i] < cap(i)) rema.emplace_back(share[i] - std::floor(share[i]), i);
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [frac, i] : rema) {
      if (given >= remaining) break;
      ++out[i];
      ++given;
    }
    remaining -= std::min(given, remaining);
    if (given == 0) break;
  }
  return out;
}

struct CohortSelection {
  std::vector<std::size_t> selected;      // input indices, ascending
  std::array<std::size_t, 7> quotas{};    // largest-remainder quotas over plan masses
  std::array<std::size_t, 7> available{};
  std::array<std::size_t, 7> taken{};
};

inline CohortSelection select_cohort_indices(std::span<const double> p_hat, const SigmaBandPlan& plan,
                                             std::size_t m, std::uint64_t seed) {
  if (m > p_hat.size())
    throw ConfigError("cannot select " + std::to_string(m) + " of " +
                      std::to_string(p_hat.size()) + " profiles");
  CohortSelection sel;
  std::array<std::vector<std::size_t>, 7> members;
  for (std::size_t i = 0; i < p_hat.size(); ++i) members[plan.band_of_probability(p_hat[i])].push_back(i);
  std::array<double, 7> mass{};
  for (std::size_t b = 0; b < 7; ++b) {
    mass[b] = plan.bands[b].target_mass;
    sel.available[b] = members[b].size();
  }
  auto quotas = largest_remainder(mass, m);
  std::copy(quotas.begin(), quotas.end(), sel.quotas.begin());

  // Fill quotas, then hand any shortfall to bands with spare members.
  std::size_t shortfall = 0;
  for (std::size_t b = 0; b < 7; ++b) {
    sel.taken[b] = std::min(sel.quotas[b], sel.available[b]);
    shortfall += sel.quotas[b] - sel.taken[b];
  }
  if (shortfall > 0) {
    std::vector<std::size_t> spare(7);
    for (std::size_t b = 0; b < 7; ++b) spare[b] = sel.available[b] - sel.taken[b];
    auto extra = largest_remainder(mass, shortfall, spare);
    for (std::size_t b = 0; b < 7; ++b) sel.taken[b] += extra[b];
  }

  Rng rng(seed);
  for (std::size_t b = 0; b < 7; ++b) {
    rng.shuffle(members[b]);
    sel.selected.insert(sel.selected.end(), members[b].begin(),
                        members[b].begin() + static_cast<std::ptrdiff_t>(sel.taken[b]));
  }
  std::sort(sel.selected.begin(), sel.selected.end());
  return sel;
}

inline std::vector<MedicalProfile> select_cohort(const std::vector<MedicalProfile>& profiles,
                                                 const SigmaBandPlan& plan, std::size_t m,
                                                 std::uint64_t seed) {
  std::vector<double> p;
  for (const auto& pr : profiles) p.push_back(pr.predicted_response);
  auto sel = select_cohort_indices(p, plan, m, seed);
  std::vector<MedicalProfile> out;
  for (auto i : sel.selected) out.push_back(profiles[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Profile records (one JSON object per line)

inline nlohmann::json to_json(const ConceptCode& c) {
  return {{"id", c.id}, {"vocabulary", std::string(to_string(c.vocabulary))}};
}

inline ConceptCode concept_from_json(const nlohmann::json& j) {
  auto v = parse_vocabulary(j.at("vocabulary").get<std::string>());
  if (!v) throw ParseError("unknown vocabulary in profile record");
  return {j.at("id").get<std::string>(), *v};
}

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::optional<double> opt_double(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline nlohmann::json to_json(const MedicalProfile& p, bool with_decisions = true) {
  nlohmann::json j;
  j["profile_id"] = p.profile_id;
  j["outcome"] = to_json(p.outcome);
  j["seed"] = p.seed;
  j["predicted_response"] = p.predicted_response;
  j["sections"] = nlohmann::json::array();
  for (const auto& s : p.sections) {
    nlohmann::json sj{{"number", s.number}, {"title", s.title}, {"facts", nlohmann::json::array()}};
    for (const auto& f : s.facts) {
      nlohmann::json fj{{"index", f.index},
                        {"concept", to_json(f.code)},
                        {"text", f.text},
                        {"stage", std::string(to_string(f.provenance.stage))},
                        {"aggregate_rr", opt_json(f.provenance.aggregate)}};
      fj["pairs"] = nlohmann::json::array();
      for (const auto& pr : f.provenance.pairs) fj["pairs"].push_back({pr.against, opt_json(pr.rr)});
      if (f.original) fj["original"] = to_json(*f.original);
      sj["facts"].push_back(std::move(fj));
    }
    j["sections"].push_back(std::move(sj));
  }
  if (with_decisions) {
    j["decisions"] = nlohmann::json::array();
    for (const auto& d : p.decisions)
      j["decisions"].push_back({d.candidate, std::string(to_string(d.stage)), d.admitted,
                                opt_json(d.aggregate)});
  }
  return j;
}

inline MedicalProfile profile_from_json(const nlohmann::json& j) {
  MedicalProfile p;
  p.profile_id = j.at("profile_id").get<std::string>();
  p.outcome = concept_from_json(j.at("outcome"));
  p.seed = j.at("seed").get<std::uint64_t>();
  p.predicted_response = j.at("predicted_response").get<double>();
  const auto& secs = j.at("sections");
  if (!secs.is_array() || secs.size() != 4) throw ParseError("profile must have four sections");
  for (std::size_t i = 0; i < 4; ++i) {
    auto& s = p.sections[i];
    s.number = secs[i].at("number").get<int>();
    s.title = secs[i].at("title").get<std::string>();
    for (const auto& fj : secs[i].at("facts")) {
      Fact f;
      f.index = fj.at("index").get<std::string>();
      f.code = concept_from_json(fj.at("concept"));
      f.text = fj.at("text").get<std::string>();
      f.provenance.stage = parse_stage(fj.at("stage").get<std::string>());
      f.provenance.aggregate = opt_double(fj.at("aggregate_rr"));
      for (const auto& pr : fj.at("pairs"))
        f.provenance.pairs.push_back({pr.at(0).get<std::string>(), opt_double(pr.at(1))});
      if (fj.contains("original")) f.original = concept_from_json(fj.at("original"));
      s.facts.push_back(std::move(f));
    }
  }
  if (j.contains("decisions")) {
    for (const auto& d : j.at("decisions"))
      p.decisions.push_back({d.at(0).get<std::string>(), parse_stage(d.at(1).get<std::string>()),
                             d.at(2).get<bool>(), opt_double(d.at(3))});
  }
  return p;
}

inline void write_profiles(std::ostream& out, const std::vector<MedicalProfile>& profiles,
                           bool with_decisions = true) {
  for (const auto& p : profiles) out << to_json(p, with_decisions).dump() << '\n';
}

inline std::vector<MedicalProfile> read_profiles(std::istream& in) {
  std::vector<MedicalProfile> out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(profile_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("profile record " + std::to_string(row) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace patsim
