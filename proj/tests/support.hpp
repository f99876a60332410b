#pragma once

// Small builders shared by the unit tests and the acceptance binary.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <bit>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>

#include "patsim/cohort.hpp"
#include "patsim/ontology.hpp"
#include "patsim/profilegen.hpp"
#include "patsim/rng.hpp"
#include "patsim/synthetic.hpp"

namespace patsim::testing {

struct NodeSpec {
  std::string id;
  Vocabulary vocabulary = Vocabulary::Diagnosis;
  std::string name;
  std::vector<std::string> parents;
};

inline Ontology make_ontology(const std::vector<NodeSpec>& specs) {
  std::vector<ConceptNode> nodes;
  for (const auto& s : specs) nodes.push_back({{s.id, s.vocabulary}, s.name.empty() ? s.id : s.name, s.parents});
  return Ontology::from_nodes(std::move(nodes));
}

inline std::string node_id(std::size_t i) {
  std::ostringstream os;
  os << 'N' << i;
  return os.str();
}

// Random DAG: node i may take parents only among nodes < i.
inline Ontology random_dag(std::size_t n, std::uint64_t seed, double edge_prob = 0.08, std::size_t max_parents = 3,
                           Vocabulary vocab = Vocabulary::Diagnosis) {
  Rng rng(seed);
  std::vector<NodeSpec> specs;
  for (std::size_t i = 0; i < n; ++i) {
    NodeSpec s{node_id(i), vocab, "node " + std::to_string(i), {}};
    for (std::size_t j = 0; j < i && s.parents.size() < max_parents; ++j)
      if (rng.uniform() < edge_prob) s.parents.push_back(node_id(j));
    specs.push_back(std::move(s));
  }
  return make_ontology(specs);
}

// Reflexive-transitive "reaches upward" matrix by Floyd-Warshall style closure.
inline std::vector<std::vector<char>> reachability_matrix(const Ontology& o) {
  const auto n = o.size();
  std::vector<std::vector<char>> r(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i) {
    r[i][i] = 1;
    for (auto p : o.parents(static_cast<ConceptIdx>(i))) r[i][to_index(p)] = 1;
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      if (r[i][k])
        for (std::size_t j = 0; j < n; ++j)
          if (r[k][j]) r[i][j] = 1;
  return r;
}

// All-pairs undirected shortest paths by repeated relaxation over an
// adjacency matrix; kUnreachable when disconnected.
inline std::vector<std::vector<std::size_t>> distance_matrix(const Ontology& o) {
  const auto n = o.size();
  std::vector<std::vector<std::size_t>> d(n, std::vector<std::size_t>(n, kUnreachable));
  for (std::size_t i = 0; i < n; ++i) {
    d[i][i] = 0;
    for (auto p : o.parents(static_cast<ConceptIdx>(i))) {
      d[i][to_index(p)] = 1;
      d[to_index(p)][i] = 1;
    }
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      if (d[i][k] == kUnreachable) continue;
      for (std::size_t j = 0; j < n; ++j)
        if (d[k][j] != kUnreachable && d[i][k] + d[k][j] < d[i][j]) d[i][j] = d[i][k] + d[k][j];
    }
  return d;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("patsim_" + tag + "_" + std::to_string(mix_seed(std::random_device{}(), reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Synthetic cohort bundle

struct SynthWorld {
  std::shared_ptr<const Ontology> ontology;
  std::vector<PatientRecord> records;
  CohortStats stats;
};

inline std::unique_ptr<SynthWorld> synth_world(std::size_t n_concepts, std::size_t n_patients, std::uint64_t seed = 7) {
  auto o = std::make_shared<const Ontology>(synthetic::build_ontology(n_concepts));
  auto records = synthetic::build_cohort(*o, {n_patients, 6, seed, 0.04});
  CohortStats stats(o, records);
  return std::unique_ptr<SynthWorld>(new SynthWorld{o, std::move(records), std::move(stats)});
}

// Risk ratios recomputed from patient bitsets, sharing no code with
// CohortStats. Pair values are memoized in a dense table.
class RrOracle {
 public:
  RrOracle(const Ontology& o, const std::vector<PatientRecord>& records, ConceptIdx outcome)
      : n_(o.size()), words_((records.size() + 63) / 64), has_(n_ * words_, 0), observed_(words_, 0),
        responded_(words_, 0), memo_(n_ * n_), done_(n_ * n_, 0) {
    for (std::size_t p = 0; p < records.size(); ++p) {
      const auto bit = std::uint64_t{1} << (p % 64);
      for (auto c : records[p].concepts) has_[to_index(c) * words_ + p / 64] |= bit;
      auto it = records[p].outcomes.find(outcome);
      if (it == records[p].outcomes.end()) continue;
      observed_[p / 64] |= bit;
      if (it->second) responded_[p / 64] |= bit;
    }
  }

  std::optional<double> rr(ConceptIdx s, ConceptIdx v) {
    const auto key = to_index(s) * n_ + to_index(v);
    if (done_[key]) return memo_[key];
    std::size_t so = 0, sr = 0, jo = 0, jr = 0;
    const auto* hs = &has_[to_index(s) * words_];
    const auto* hv = &has_[to_index(v) * words_];
    for (std::size_t w = 0; w < words_; ++w) {
      const auto a = hs[w] & observed_[w];
      const auto b = a & hv[w];
      so += static_cast<std::size_t>(std::popcount(a));
      sr += static_cast<std::size_t>(std::popcount(a & responded_[w]));
      jo += static_cast<std::size_t>(std::popcount(b));
      jr += static_cast<std::size_t>(std::popcount(b & responded_[w]));
    }
    std::optional<double> out;
    if (so > 0 && sr > 0 && jo >= 5)
      out = (static_cast<double>(jr) / static_cast<double>(jo)) / (static_cast<double>(sr) / static_cast<double>(so));
    memo_[key] = out;
    done_[key] = 1;
    return out;
  }

 private:
  std::size_t n_, words_;
  std::vector<std::uint64_t> has_, observed_, responded_;
  std::vector<std::optional<double>> memo_;
  std::vector<char> done_;
};

inline bool same_rr(const std::optional<double>& a, const std::optional<double>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || std::abs(*a - *b) <= 1e-12 * std::max(1.0, std::abs(*b));
}

struct AuditResult {
  std::size_t stage3_facts = 0;
  std::size_t stage4_facts = 0;
  std::size_t decisions = 0;
  std::vector<std::string> violations;
};

/// Replays every Stage-3/4 decision of a profile in order against the oracle:
/// the recorded aggregate, the admit/reject outcome, each admitted fact's
/// pairwise provenance, and the Stage-4 cap.
inline AuditResult audit_profile(const MedicalProfile& prof, const Ontology& o, RrOracle& oracle, const GenConfig& cfg) {
  AuditResult out;
  auto bad = [&](const std::string& what) { out.violations.push_back(prof.profile_id + ": " + what); };
  std::map<std::string, const Fact*> by_id;
  prof.for_each_fact([&](const Section&, const Fact& f) { by_id[f.code.id] = &f; });

  std::vector<ConceptIdx> selected;
  const Fact* gender = prof.find_fact("1.2");
  const Fact* age = prof.find_fact("1.1");
  if (!gender || !age) {
    bad("missing demographic facts");
    return out;
  }
  selected.push_back(o.require(gender->code));
  selected.push_back(o.require(age->code));

  std::vector<ConceptIdx> intermediate;
  bool in_stage4 = false;
  std::size_t admitted4 = 0;
  for (const auto& d : prof.decisions) {
    ++out.decisions;
    const auto cand = o.require(d.candidate);
    if (d.stage == Stage::DiversityExpansion && !in_stage4) {
      in_stage4 = true;
      intermediate = selected;
    }
    const auto& against = in_stage4 ? intermediate : selected;
    std::optional<double> agg;
    bool any_above = false, all_in = true;
    std::vector<std::optional<double>> vals;
    for (auto s : against) {
      const auto r = oracle.rr(s, cand);
      vals.push_back(r);
      if (!r) continue;
      if (!agg || *r > *agg) agg = r;
      any_above |= *r > cfg.diversity_threshold;
      all_in &= *r > cfg.rr_low && *r <= cfg.rr_high;
    }
    bool expect;
    if (in_stage4) {
      expect = any_above;
    } else if (!agg) {
      expect = false;
    } else {
      expect = cfg.gate_mode == GateMode::Aggregate ? (*agg > cfg.rr_low && *agg <= cfg.rr_high) : all_in;
    }
    if (!same_rr(d.aggregate, agg)) bad(d.candidate + ": recorded aggregate differs from recomputation");
    if (d.admitted != expect) bad(d.candidate + ": admit decision differs from recomputation");
    if (!d.admitted) continue;

    auto it = by_id.find(d.candidate);
    if (it == by_id.end()) {
      bad(d.candidate + ": admitted but not in profile");
      continue;
    }
    const auto& prov = it->second->provenance;
    if (prov.stage != d.stage) bad(d.candidate + ": provenance stage mismatch");
    if (prov.pairs.size() != against.size()) {
      bad(d.candidate + ": provenance pair count mismatch");
    } else {
      for (std::size_t i = 0; i < against.size(); ++i) {
        if (prov.pairs[i].against != o.code(against[i]).id) bad(d.candidate + ": provenance pair order mismatch");
        if (!same_rr(prov.pairs[i].rr, vals[i])) bad(d.candidate + ": provenance RR differs from recomputation");
      }
    }
    if (in_stage4) {
      ++out.stage4_facts;
      ++admitted4;
    } else {
      ++out.stage3_facts;
      selected.push_back(cand);
    }
  }
  if (admitted4 > cfg.max_residual_additions) bad("too many diversity additions");
  std::size_t clinical = 0;
  prof.for_each_fact([&](const Section& s, const Fact&) { clinical += s.number != 1; });
  if (clinical != out.stage3_facts + out.stage4_facts) bad("profile holds facts without an admitting decision");
  return out;
}

}  // namespace patsim::testing
