#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/ontology.hpp"
#include "patsim/rng.hpp"

namespace patsim {

// Cells with fewer outcome-observed patients than this yield undefined risk ratios.
inline constexpr std::size_t kMinJointSupport = 5;

struct PatientRecord {
  std::string patient_id;
  std::vector<ConceptIdx> concepts;         // sorted, unique
  std::map<ConceptIdx, bool> outcomes;      // OUTCOME code -> responded
};

struct ResponseCounts {
  std::size_t observed = 0;   // patients with the outcome recorded
  std::size_t responded = 0;  // of those, responders

  std::optional<double> probability() const {
    if (observed == 0) return std::nullopt;
    return static_cast<double>(responded) / static_cast<double>(observed);
  }
  // Add-one (Laplace) estimate; always defined.
  double smoothed() const {
    return (static_cast<double>(responded) + 1.0) / (static_cast<double>(observed) + 2.0);
  }
  friend bool operator==(const ResponseCounts&, const ResponseCounts&) = default;
};

/// Counts derived from a cohort, answering the conditional-response queries
/// the profile generator needs.
///
/// Single-concept counts are tabulated at construction. Pair counts are
/// intersected from posting lists on first use and memoized; the memo is the
/// only mutable state and is guarded for concurrent readers.
class CohortStats {
 public:
  CohortStats(std::shared_ptr<const Ontology> ontology, const std::vector<PatientRecord>& records)
      : ontology_(std::move(ontology)),
        n_total_(records.size()),
        postings_(ontology_->size()),
        cache_(std::make_unique<Cache>()) {
    for (std::uint32_t p = 0; p < records.size(); ++p) {
      for (auto c : records[p].concepts) postings_[to_index(c)].push_back(p);
      for (auto [o, resp] : records[p].outcomes) {
        auto& state = outcome_state_[o];
        if (state.empty()) state.assign(n_total_, kAbsent);
        state[p] = resp ? kYes : kNo;
      }
    }
    for (auto& [o, state] : outcome_state_) {
      outcomes_.push_back(o);
      auto& single = single_[o];
      single.resize(ontology_->size());
      ResponseCounts all;
      for (std::uint32_t p = 0; p < n_total_; ++p) tally(all, state[p]);
      overall_[o] = all;
      for (std::size_t c = 0; c < postings_.size(); ++c) {
        for (auto p : postings_[c]) tally(single[c], state[p]);
      }
    }
  }

  CohortStats(CohortStats&&) noexcept = default;
  CohortStats& operator=(CohortStats&&) noexcept = default;

  const Ontology& ontology() const noexcept { return *ontology_; }
  std::shared_ptr<const Ontology> ontology_ptr() const noexcept { return ontology_; }
  std::size_t n_total() const noexcept { return n_total_; }
  std::size_t support(ConceptIdx c) const { return postings_.at(to_index(c)).size(); }
  const std::vector<ConceptIdx>& outcomes() const noexcept { return outcomes_; }

  std::size_t pair_support(ConceptIdx a, ConceptIdx b) const {
    return cached(a, b, std::nullopt).observed;
  }

  ResponseCounts response(ConceptIdx outcome) const {
    auto it = overall_.find(outcome);
    return it == overall_.end() ? ResponseCounts{} : it->second;
  }

  ResponseCounts response_given(ConceptIdx outcome, ConceptIdx c) const {
    auto it = single_.find(outcome);
    if (it == single_.end()) return {};
    return it->second[to_index(c)];
  }

  ResponseCounts response_given(ConceptIdx outcome, ConceptIdx a, ConceptIdx b) const {
    if (a == b) return response_given(outcome, a);
    if (!outcome_state_.contains(outcome)) return {};
    return cached(a, b, outcome);
  }

 private:
  static constexpr std::int8_t kAbsent = -1, kNo = 0, kYes = 1;

  static void tally(ResponseCounts& rc, std::int8_t s) {
    if (s == kAbsent) return;
    ++rc.observed;
    if (s == kYes) ++rc.responded;
  }

  struct Key {
    std::uint32_t a, b, o;
    friend bool operator==(const Key&, const Key&) = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept {
      return static_cast<std::size_t>(
          mix_seed(mix_seed((std::uint64_t{k.a} << 32) | k.b), k.o));
    }
  };
  struct Cache {
    std::shared_mutex mu;
    std::unordered_map<Key, ResponseCounts, KeyHash> map;
  };

  // Without an outcome, `observed` holds the raw intersection size.
  ResponseCounts cached(ConceptIdx a, ConceptIdx b, std::optional<ConceptIdx> outcome) const {
    auto ia = static_cast<std::uint32_t>(to_index(a));
    auto ib = static_cast<std::uint32_t>(to_index(b));
    if (ia > ib) std::swap(ia, ib);
    const Key key{ia, ib, outcome ? static_cast<std::uint32_t>(to_index(*outcome)) : UINT32_MAX};
    {
      std::shared_lock lock(cache_->mu);
      auto it = cache_->map.find(key);
      if (it != cache_->map.end()) return it->second;
    }
    ResponseCounts rc;
    const auto& pa = postings_[ia];
    const auto& pb = postings_[ib];
    const std::vector<std::int8_t>* state = outcome ? &outcome_state_.at(*outcome) : nullptr;
    std::size_t i = 0, j = 0;
    while (i < pa.size() && j < pb.size()) {
      if (pa[i] < pb[j]) {
        ++i;
      } else if (pb[j] < pa[i]) {
        ++j;
      } else {
        if (state) {
          tally(rc, (*state)[pa[i]]);
        } else {
          ++rc.observed;
        }
        ++i;
        ++j;
      }
    }
    std::unique_lock lock(cache_->mu);
    cache_->map.emplace(key, rc);
    return rc;
  }

  std::shared_ptr<const Ontology> ontology_;
  std::size_t n_total_ = 0;
  std::vector<std::vector<std::uint32_t>> postings_;
  std::map<ConceptIdx, std::vector<std::int8_t>> outcome_state_;
  std::vector<ConceptIdx> outcomes_;
  std::map<ConceptIdx, ResponseCounts> overall_;
  std::map<ConceptIdx, std::vector<ResponseCounts>> single_;
  std::unique_ptr<Cache> cache_;
};

struct Cohort {
  std::vector<PatientRecord> records;  // sorted by patient_id
  CohortStats stats;
};

// Patient-record file: one JSON object per line,
//   {"patient_id": "...", "concepts": ["id", ...], "outcomes": {"outcome-id": true}}
// Records are sorted by patient_id so that statistics and everything seeded
// downstream are independent of row order.
inline Cohort parse_cohort(std::istream& in, std::shared_ptr<const Ontology> ontology) {
  std::vector<PatientRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(row, std::string("malformed record: ") + e.what());
    }
    if (!j.is_object() || !j.contains("patient_id") || !j["patient_id"].is_string())
      throw IngestError(row, "missing patient_id");
    PatientRecord rec;
    rec.patient_id = j["patient_id"].get<std::string>();
    if (rec.patient_id.empty()) throw IngestError(row, "empty patient_id");
    if (!seen.insert(rec.patient_id).second)
      throw IngestError(row, "duplicate patient_id '" + rec.patient_id + "'");
    if (!j.contains("concepts") || !j["concepts"].is_array())
      throw IngestError(row, "missing concepts array");
    for (const auto& cj : j["concepts"]) {
      if (!cj.is_string()) throw IngestError(row, "concept ids must be strings");
      auto c = ontology->find(cj.get<std::string>());
      if (!c) throw IngestError(row, "unresolvable concept '" + cj.get<std::string>() + "'");
      rec.concepts.push_back(*c);
    }
    std::sort(rec.concepts.begin(), rec.concepts.end());
    rec.concepts.erase(std::unique(rec.concepts.begin(), rec.concepts.end()), rec.concepts.end());
    if (rec.concepts.empty()) throw IngestError(row, "patient has no concepts");
    if (j.contains("outcomes")) {
      if (!j["outcomes"].is_object()) throw IngestError(row, "outcomes must be an object");
      for (const auto& [k, v] : j["outcomes"].items()) {
        auto o = ontology->find(k);
        if (!o) throw IngestError(row, "unresolvable outcome '" + k + "'");
        if (ontology->code(*o).vocabulary != Vocabulary::Outcome)
          throw IngestError(row, "outcome key '" + k + "' is not an OUTCOME concept");
        if (!v.is_boolean()) throw IngestError(row, "outcome values must be booleans");
        rec.outcomes[*o] = v.get<bool>();
      }
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw IngestError(0, "empty cohort");
  std::sort(records.begin(), records.end(),
            [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
  CohortStats stats(ontology, records);
  return Cohort{std::move(records), std::move(stats)};
}

inline Cohort ingest_cohort(const std::string& path, std::shared_ptr<const Ontology> ontology) {
  std::ifstream in(path);
  if (!in) throw IngestError(0, "cannot open patient-record file '" + path + "'");
  return parse_cohort(in, std::move(ontology));
}

inline void write_patient_record(std::ostream& out, const Ontology& o, const PatientRecord& r) {
  nlohmann::json j;
  j["patient_id"] = r.patient_id;
  j["concepts"] = nlohmann::json::array();
  for (auto c : r.concepts) j["concepts"].push_back(o.code(c).id);
  j["outcomes"] = nlohmann::json::object();
  for (auto [k, v] : r.outcomes) j["outcomes"][o.code(k).id] = v;
  out << j.dump() << '\n';
}

/// RR(s, v) = P(response | s and v) / P(response | s), on raw proportions.
///
/// Undefined when the s-and-v cell has fewer than kMinJointSupport
/// outcome-observed patients or when P(response | s) is zero.
inline std::optional<double> risk_ratio(const CohortStats& stats, ConceptIdx s, ConceptIdx v,
                                        ConceptIdx outcome) {
  const auto given_s = stats.response_given(outcome, s);
  if (given_s.observed == 0 || given_s.responded == 0) return std::nullopt;
  const auto joint = stats.response_given(outcome, s, v);
  if (joint.observed < kMinJointSupport) return std::nullopt;
  return *joint.probability() / *given_s.probability();
}

inline std::optional<double> risk_ratio(const CohortStats& stats, const ConceptCode& s,
                                        const ConceptCode& v, const ConceptCode& outcome) {
  const auto& o = stats.ontology();
  return risk_ratio(stats, o.require(s), o.require(v), o.require(outcome));
}

// Smoothed P(resp | f) / P(resp | not f).
inline double outcome_risk_ratio(const CohortStats& stats, ConceptIdx feature, ConceptIdx outcome) {
  const auto with = stats.response_given(outcome, feature);
  const auto all = stats.response(outcome);
  const ResponseCounts without{all.observed - with.observed, all.responded - with.responded};
  return with.smoothed() / without.smoothed();
}

inline bool is_clinical(Vocabulary v) {
  return v == Vocabulary::Diagnosis || v == Vocabulary::Medication || v == Vocabulary::Procedure;
}

struct RankedPredictor {
  ConceptIdx term{};
  double score = 0.0;
};

// Relevance is |ln RR(feature -> outcome)| with add-one smoothing. Only
// clinical concepts with at least kMinJointSupport outcome-observed patients
// are eligible. Descending score, ties by concept id.
inline std::vector<RankedPredictor> rank_predictors(const CohortStats& stats, ConceptIdx outcome) {
  const auto& o = stats.ontology();
  std::vector<RankedPredictor> ranked;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    if (!is_clinical(o.code(c).vocabulary)) continue;
    if (stats.response_given(outcome, c).observed < kMinJointSupport) continue;
    ranked.push_back({c, std::abs(std::log(outcome_risk_ratio(stats, c, outcome)))});
  }
  std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return o.code(a.term).id < o.code(b.term).id;
  });
  return ranked;
}

inline std::vector<ConceptIdx> rank_top_k_predictors(const CohortStats& stats, ConceptIdx outcome,
                                                     std::size_t k) {
  auto ranked = rank_predictors(stats, outcome);
  std::vector<ConceptIdx> out;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(ranked[i].term);
  return out;
}

// ---------------------------------------------------------------------------
// Demographics

enum class DemographicKind { Gender, AgeBin };

// Demographic category concepts hang below a DEMOGRAPHIC root with id
// "GENDER" or "AGE_BIN".
inline constexpr std::string_view kGenderRoot = "GENDER";
inline constexpr std::string_view kAgeBinRoot = "AGE_BIN";

inline std::optional<DemographicKind> demographic_kind(const Ontology& o, ConceptIdx c) {
  if (o.code(c).vocabulary != Vocabulary::Demographic) return std::nullopt;
  for (auto [root, kind] : {std::pair{kGenderRoot, DemographicKind::Gender},
                            std::pair{kAgeBinRoot, DemographicKind::AgeBin}}) {
    auto r = o.find(root);
    if (r && *r != c && o.reaches_upward(c, *r)) return kind;
  }
  return std::nullopt;
}

struct DemographicDistribution {
  DemographicKind kind = DemographicKind::Gender;
  std::vector<std::pair<ConceptIdx, double>> categories;  // sorted by concept id

  std::vector<double> weights() const {
    std::vector<double> w;
    for (const auto& [c, p] : categories) w.push_back(p);
    return w;
  }
};

inline DemographicDistribution demographic_distribution(const std::vector<PatientRecord>& records,
                                                        const Ontology& o, DemographicKind kind) {
  std::map<std::string, std::pair<ConceptIdx, std::size_t>> counts;
  for (const auto& r : records) {
    std::optional<ConceptIdx> found;
    for (auto c : r.concepts) {
      if (demographic_kind(o, c) != kind) continue;
      if (found)
        throw IngestError(0, "patient '" + r.patient_id + "' has more than one " +
                                 (kind == DemographicKind::Gender ? "gender" : "age bin"));
      found = c;
    }
    if (!found)
      throw IngestError(0, "patient '" + r.patient_id + "' has no " +
                               (kind == DemographicKind::Gender ? "gender" : "age bin"));
    auto& slot = counts[o.code(*found).id];
    slot.first = *found;
    ++slot.second;
  }
  DemographicDistribution d{kind, {}};
  for (const auto& [id, cc] : counts)
    d.categories.emplace_back(cc.first,
                              static_cast<double>(cc.second) / static_cast<double>(records.size()));
  return d;
}

// Representative integer age for an age-bin label such as "30-39" (midpoint,
// rounded down) or "80+" (the bound itself).
inline std::optional<int> age_bin_midpoint(std::string_view label) {
  std::vector<int> nums;
  int cur = -1;
  for (char ch : label) {
    if (ch >= '0' && ch <= '9') {
      cur = (cur < 0 ? 0 : cur * 10) + (ch - '0');
    } else if (cur >= 0) {
      nums.push_back(cur);
      cur = -1;
    }
  }
  if (cur >= 0) nums.push_back(cur);
  if (nums.empty()) return std::nullopt;
  if (nums.size() == 1) return nums[0];
  return (nums[0] + nums[1]) / 2;
}

}  // namespace patsim
