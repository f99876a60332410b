#pragma once

// Wiring shared by the CLI and the end-to-end checks: loads the ontology,
// cohort and personas named by a Config, and exposes the stub ports and the
// generate / perturb / evaluate steps over them.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "patsim/cohort.hpp"
#include "patsim/config.hpp"
#include "patsim/embedding.hpp"
#include "patsim/experiment.hpp"
#include "patsim/metrics.hpp"
#include "patsim/perturbation.hpp"
#include "patsim/persona.hpp"
#include "patsim/profilegen.hpp"
#include "patsim/reporting.hpp"
#include "patsim/stubs.hpp"

namespace patsim {

inline GateMode parse_gate_mode(std::string_view s) {
  if (s == "aggregate") return GateMode::Aggregate;
  if (s == "strict") return GateMode::StrictPerPair;
  throw ConfigError("gate_mode must be 'aggregate' or 'strict', got '" + std::string(s) + "'");
}

/// Everything the offline ports and metrics read. Members hold references
/// into each other, so a World is built in place and never moved.
class World {
 public:
  World(std::shared_ptr<const Ontology> ontology, Cohort cohort, const Config& cfg)
      : ontology_(std::move(ontology)),
        cohort_(std::move(cohort)),
        lexicon_(build_lexicon(*ontology_)),
        embedder_(cfg.count("embed_dims"), cfg.count("embed_seed")),
        index_(*ontology_, embedder_),
        search_(index_, embedder_),
        drugs_(DrugFeatureTable::from_cohort(cohort_.stats, cfg.count("aid_top_k"))),
        personas_(PersonaLibrary::load(cfg.path("personas").empty() ? default_data_dir() / "personas"
                                                                    : cfg.path("personas"))),
        outcome_(ontology_->require(cfg.str("outcome"))),
        aid_{cfg.count("aid_depth"), cfg.real("aid_accept")},
        depression_(depression_stub()),
        toxicity_(toxicity_stub()) {}

  World(const World&) = delete;
  World& operator=(const World&) = delete;

  static std::unique_ptr<World> load(const Config& cfg) {
    auto o = std::make_shared<const Ontology>(load_ontology(cfg.path("ontology").string()));
    auto c = ingest_cohort(cfg.path("cohort").string(), o);
    return std::make_unique<World>(o, std::move(c), cfg);
  }

  const Ontology& ontology() const noexcept { return *ontology_; }
  const Cohort& cohort() const noexcept { return cohort_; }
  const Lexicon& lexicon() const noexcept { return lexicon_; }
  const Embedder& embedder() const noexcept { return embedder_; }
  const ConceptVectorIndex& index() const noexcept { return index_; }
  const ConceptSearch& search() const noexcept { return search_; }
  const DrugFeatureTable& drugs() const noexcept { return drugs_; }
  const PersonaLibrary& personas() const noexcept { return personas_; }
  ConceptIdx outcome() const noexcept { return outcome_; }
  const StubAidConfig& aid() const noexcept { return aid_; }

  MetricPorts stub_metric_ports() const {
    return {ontology_.get(), &lexicon_, &embedder_, &depression_, &toxicity_};
  }

  PortFactory stub_ports() const {
    PortFactory f;
    f.chat = [](const CellKey& cell, std::uint64_t seed) -> std::unique_ptr<ChatPort> {
      return std::make_unique<StubPatientChat>(cell.linguistic, cell.behavioral, seed);
    };
    f.sut = [this](const CellKey&) -> std::unique_ptr<SutPort> {
      return std::make_unique<StubDecisionAid>(search_, drugs_, aid_);
    };
    return f;
  }

 private:
  std::shared_ptr<const Ontology> ontology_;
  Cohort cohort_;
  Lexicon lexicon_;
  HashEmbedder embedder_;
  ConceptVectorIndex index_;
  ConceptSearch search_;
  DrugFeatureTable drugs_;
  PersonaLibrary personas_;
  ConceptIdx outcome_;
  StubAidConfig aid_;
  KeywordClassifier depression_;
  KeywordClassifier toxicity_;
};

// ---------------------------------------------------------------------------
// Generation

struct GenerationRun {
  SigmaBandPlan plan;
  CohortSelection selection;
  std::vector<MedicalProfile> candidates;
  std::vector<MedicalProfile> profiles;  // the selected cohort
};

inline GenConfig gen_config(const World& w, const Config& cfg) {
  GenConfig g;
  g.outcome = w.outcome();
  g.n_patients = cfg.count("candidates");
  g.top_k = cfg.count("top_k");
  g.rr_high = cfg.real("rr_high");
  g.rr_low = cfg.real("rr_low");
  g.diversity_threshold = cfg.real("diversity_threshold");
  g.max_residual_additions = cfg.count("max_residual_additions");
  g.rng_seed = mix_seed(cfg.count("seed"), stable_hash("profiles"));
  g.gate_mode = parse_gate_mode(cfg.str("gate_mode"));
  return g;
}

// Plan success probability: explicit plan_p, else the observed response rate.
inline double plan_probability(const World& w, const Config& cfg) {
  if (!cfg.str("plan_p").empty()) return cfg.real("plan_p");
  auto p = w.cohort().stats.response(w.outcome()).probability();
  if (!p) throw ConfigError("outcome '" + cfg.str("outcome") + "' is never observed in the cohort");
  return *p;
}

inline GenerationRun generate_profiles(const World& w, const Config& cfg) {
  const auto& stats = w.cohort().stats;
  const auto gender = demographic_distribution(w.cohort().records, w.ontology(), DemographicKind::Gender);
  const auto age = demographic_distribution(w.cohort().records, w.ontology(), DemographicKind::AgeBin);
  LogOddsPredictor predictor;
  ProfileGenerator gen(stats, gender, age, gen_config(w, cfg), predictor);

  GenerationRun run;
  run.candidates = gen.generate_all(static_cast<unsigned>(cfg.count("workers")));
  run.plan = sigma_band_plan(static_cast<long>(cfg.count("plan_n")), plan_probability(w, cfg));
  std::vector<double> p;
  for (const auto& c : run.candidates) p.push_back(c.predicted_response);
  run.selection = select_cohort_indices(p, run.plan, cfg.count("cohort_size"),
                                        mix_seed(cfg.count("seed"), stable_hash("cohort")));
  for (auto i : run.selection.selected) run.profiles.push_back(run.candidates[i]);
  return run;
}

inline ReferencePolicy build_policy(const World& w, const std::vector<MedicalProfile>& profiles) {
  ReferencePolicy p;
  for (const auto& pr : profiles) p[pr.profile_id] = reference_recommendation(w.drugs(), w.ontology(), pr);
  return p;
}

// ---------------------------------------------------------------------------
// Perturbation

inline PerturbationPlan perturbation_plan(const Config& cfg) {
  PerturbationPlan p;
  p.target_fraction = cfg.real("perturb_fraction");
  p.candidate_pool_size = cfg.count("perturb_pool");
  p.min_distance = cfg.count("perturb_min_distance");
  p.seed = mix_seed(cfg.count("seed"), stable_hash("perturb"));
  p.relaxation = default_relaxation(p.candidate_pool_size, p.min_distance);
  p.validate();
  return p;
}

inline ProfileSet perturb_profiles(const World& w, const Config& cfg, std::vector<MedicalProfile> profiles) {
  ProfileSet set;
  const auto plan = perturbation_plan(cfg);
  const auto chosen = select_profiles_for_perturbation(profiles, cfg.real("perturb_profile_fraction"), plan.seed);
  for (const auto& p : profiles) {
    if (!chosen.contains(p.profile_id)) continue;
    auto pp = perturb_profile(p, w.index(), plan);
    set.perturbations[p.profile_id] = std::move(pp.records);
    set.perturbed.emplace(p.profile_id, std::move(pp.profile));
  }
  set.reference = std::move(profiles);
  return set;
}

inline std::vector<PerturbationRecord> flatten(const ProfileSet& set) {
  std::vector<PerturbationRecord> out;
  for (const auto& [id, recs] : set.perturbations) out.insert(out.end(), recs.begin(), recs.end());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<ConversationMetrics> evaluate_logs(const std::vector<ConversationLog>& logs,
                                                      const MetricPorts& ports, unsigned workers = 1) {
  std::vector<ConversationMetrics> out(logs.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(std::max(1u, workers));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < errors.size(); ++t)
      pool.emplace_back([&, t] {
        try {
          for (auto i = next.fetch_add(1); i < logs.size(); i = next.fetch_add(1))
            out[i] = evaluate_conversation(logs[i], ports);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline void write_evaluation(const std::filesystem::path& dir, const std::vector<ConversationMetrics>& ms) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.tsv", std::ios::binary);
    write_metrics_header(out);
    for (const auto& m : ms) write_metrics_row(out, m);
  }
  {
    std::ofstream out(dir / "rank_items.tsv", std::ios::binary);
    write_rank_items(out, ms);
  }
  std::vector<RankItem> items;
  for (const auto& m : ms) items.insert(items.end(), m.rank_items.begin(), m.rank_items.end());
  const auto r = retrieval_rank_metrics(items);
  std::ofstream out(dir / "retrieval.tsv", std::ios::binary);
  out << "items\trank1\tbeyond_rank1\twithin_top20\tnot_retrieved\tmean_nontop1_rank\n"
      << r.items << '\t' << r.rank1 << '\t' << r.beyond_rank1 << '\t' << r.within_top20 << '\t'
      << r.not_retrieved << '\t' << fmt_num(r.mean_nontop1_rank) << '\n';
}

// ---------------------------------------------------------------------------
// Profile and record files

inline std::vector<MedicalProfile> load_profiles(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open profile file '" + p.string() + "'");
  return read_profiles(in);
}

inline std::vector<PerturbationRecord> load_perturbations(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open perturbation file '" + p.string() + "'");
  return read_perturbations(in);
}

inline ReferencePolicy load_policy(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open policy file '" + p.string() + "'");
  return read_policy(in, p.filename().string());
}

// Rebuilds a ProfileSet from the reference file plus optional perturbed
// profiles and records.
inline ProfileSet assemble_profile_set(std::vector<MedicalProfile> reference,
                                       const std::vector<MedicalProfile>& perturbed,
                                       const std::vector<PerturbationRecord>& records) {
  ProfileSet set;
  std::set<std::string> known;
  for (const auto& p : reference) known.insert(p.profile_id);
  for (const auto& p : perturbed) {
    if (!known.contains(p.profile_id))
      throw ConfigError("perturbed profile '" + p.profile_id + "' is not in the reference set");
    set.perturbed.emplace(p.profile_id, p);
  }
  for (const auto& r : records) {
    if (!set.perturbed.contains(r.profile_id))
      throw ConfigError("perturbation record for '" + r.profile_id + "' has no perturbed profile");
    set.perturbations[r.profile_id].push_back(r);
  }
  set.reference = std::move(reference);
  return set;
}

// ---------------------------------------------------------------------------
// Runs and reports

inline std::vector<ConversationLog> load_run(const std::filesystem::path& dir) {
  return load_manifest_logs(load_manifest(dir / "manifest.json"), dir);
}

// A set holding one annotator is named after it, otherwise after the file.
inline NamedAnnotations load_named_annotations(const std::filesystem::path& p) {
  auto set = load_annotations(p);
  const auto names = set.annotators();
  return {names.size() == 1 ? *names.begin() : p.stem().string(), std::move(set)};
}

struct ReportSources {
  std::filesystem::path logs;
  std::filesystem::path policy;
  std::vector<std::filesystem::path> annotations;
  std::optional<std::filesystem::path> judge;
};

inline nlohmann::json to_json(const ReportSources& s) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& p : s.annotations) a.push_back(p.string());
  return {{"logs", s.logs.string()},
          {"policy", s.policy.string()},
          {"annotations", a},
          {"judge", s.judge ? nlohmann::json(s.judge->string()) : nlohmann::json(nullptr)}};
}

inline ReportSources report_sources_from_json(const nlohmann::json& j) {
  ReportSources s;
  s.logs = j.at("logs").get<std::string>();
  s.policy = j.at("policy").get<std::string>();
  for (const auto& a : j.at("annotations")) s.annotations.emplace_back(a.get<std::string>());
  if (!j.at("judge").is_null()) s.judge = j.at("judge").get<std::string>();
  return s;
}

inline ReportInputs load_report_inputs(const World& w, const ReportSources& src, unsigned workers = 1) {
  ReportInputs in;
  in.logs = load_run(src.logs);
  in.metrics = evaluate_logs(in.logs, w.stub_metric_ports(), workers);
  in.policy = load_policy(src.policy);
  for (const auto& p : src.annotations) in.annotators.push_back(load_named_annotations(p));
  if (src.judge) in.judge = load_annotations(*src.judge);
  return in;
}

}  // namespace patsim
