#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "patsim/pipeline.hpp"
#include "support.hpp"

using namespace patsim;
namespace pt = patsim::testing;

namespace {

Config fixture_config() { return Config::load(default_data_dir() / "fixtures" / "patsim.conf"); }

struct Fixture {
  Config cfg = fixture_config();
  std::unique_ptr<World> world;
  GenerationRun gen;
  ProfileSet set;
};

const Fixture& fx() {
  static const Fixture f = [] {
    Fixture f;
    f.world = World::load(f.cfg);
    f.gen = generate_profiles(*f.world, f.cfg);
    f.set = perturb_profiles(*f.world, f.cfg, f.gen.profiles);
    return f;
  }();
  return f;
}

// One stub run of the 5x3 grid, shared by the evaluation and report tests.
struct RunFixture {
  pt::TempDir dir{"pipeline_run"};
  std::vector<ConversationLog> logs;

  RunFixture() {
    const auto& f = fx();
    const auto design = load_design(default_data_dir() / "fixtures" / "design_grid.json");
    run_experiment(design, f.set, f.world->personas(), f.world->stub_ports(), dir.path() / "run");
    logs = load_run(dir.path() / "run");
  }
};

const RunFixture& run() {
  static const RunFixture r;
  return r;
}

std::string profiles_text(const std::vector<MedicalProfile>& ps) {
  std::ostringstream out;
  write_profiles(out, ps);
  return out.str();
}

}  // namespace

TEST(World, LoadsBundledFixture) {
  const auto& w = *fx().world;
  EXPECT_GT(w.ontology().size(), 500u);
  EXPECT_EQ(w.ontology().code(w.outcome()).id, "RESP_FLUOXETINE");
  EXPECT_FALSE(w.cohort().records.empty());
  EXPECT_EQ(w.personas().linguistic_count(), 5u);
  const auto ports = w.stub_metric_ports();
  EXPECT_NE(ports.ontology, nullptr);
  EXPECT_NE(ports.depression, nullptr);
  EXPECT_NE(ports.toxicity, nullptr);
}

TEST(World, MissingFilesAndBadOutcomeAreReported) {
  auto cfg = fixture_config();
  cfg.set("ontology", "no_such_file.tsv");
  EXPECT_THROW(World::load(cfg), Error);
  cfg = fixture_config();
  cfg.set("outcome", "NOT_A_CONCEPT");
  EXPECT_THROW(World::load(cfg), Error);
}

TEST(Generation, SelectsConfiguredCohortFromCandidates) {
  const auto& f = fx();
  EXPECT_EQ(f.gen.candidates.size(), f.cfg.count("candidates"));
  ASSERT_EQ(f.gen.profiles.size(), f.cfg.count("cohort_size"));
  std::set<std::string> ids;
  for (const auto& p : f.gen.profiles) ids.insert(p.profile_id);
  EXPECT_EQ(ids.size(), f.gen.profiles.size());
  std::size_t taken = 0;
  for (std::size_t b = 0; b < 7; ++b) {
    EXPECT_LE(f.gen.selection.taken[b], f.gen.selection.available[b]);
    taken += f.gen.selection.taken[b];
  }
  EXPECT_EQ(taken, f.gen.profiles.size());
  // The fixture predictor spreads candidates over several bands.
  std::size_t occupied = 0;
  for (auto a : f.gen.selection.available) occupied += a > 0;
  EXPECT_GE(occupied, 5u);
}

TEST(Generation, PlanUsesObservedRateUnlessPinned) {
  const auto& f = fx();
  const auto observed = *f.world->cohort().stats.response(f.world->outcome()).probability();
  EXPECT_DOUBLE_EQ(f.gen.plan.p, observed);
  auto cfg = fixture_config();
  cfg.set("plan_p", "0.4");
  EXPECT_DOUBLE_EQ(plan_probability(*f.world, cfg), 0.4);
}

TEST(Generation, OutputIsIndependentOfWorkerCount) {
  const auto& f = fx();
  auto one = fixture_config();
  one.set("workers", "1");
  const auto serial = generate_profiles(*f.world, one);
  EXPECT_EQ(profiles_text(serial.candidates), profiles_text(f.gen.candidates));
  EXPECT_EQ(serial.selection.selected, f.gen.selection.selected);
}

TEST(Generation, SeedChangesTheCohort) {
  const auto& f = fx();
  auto cfg = fixture_config();
  cfg.set("seed", "8");
  EXPECT_NE(profiles_text(generate_profiles(*f.world, cfg).profiles), profiles_text(f.gen.profiles));
}

TEST(Generation, GateModeIsValidated) {
  EXPECT_EQ(parse_gate_mode("aggregate"), GateMode::Aggregate);
  EXPECT_EQ(parse_gate_mode("strict"), GateMode::StrictPerPair);
  auto cfg = fixture_config();
  cfg.set("gate_mode", "loose");
  EXPECT_THROW(gen_config(*fx().world, cfg), ConfigError);
}

TEST(Policy, CoversEveryProfileWithAKnownDrug) {
  const auto& f = fx();
  const auto policy = build_policy(*f.world, f.gen.profiles);
  ASSERT_EQ(policy.size(), f.gen.profiles.size());
  for (const auto& p : f.gen.profiles) EXPECT_FALSE(policy.at(p.profile_id).empty());
  std::stringstream io;
  write_policy(io, policy);
  EXPECT_EQ(read_policy(io), policy);
}

TEST(Perturb, RecordsMatchPerturbedFacts) {
  const auto& f = fx();
  // perturb_profile_fraction defaults to 1.0.
  EXPECT_EQ(f.set.perturbed.size(), f.gen.profiles.size());
  std::size_t records = 0;
  for (const auto& [id, recs] : f.set.perturbations) {
    const auto& prof = f.set.perturbed.at(id);
    records += recs.size();
    for (const auto& r : recs) {
      EXPECT_EQ(r.profile_id, id);
      const auto* fact = prof.find_fact(r.index);
      ASSERT_NE(fact, nullptr) << id << ' ' << r.index;
      EXPECT_EQ(fact->code.id, r.replacement.id);
      ASSERT_TRUE(fact->original.has_value());
      EXPECT_EQ(fact->original->id, r.original.id);
      EXPECT_GE(r.distance, r.effective_min_distance);
    }
  }
  EXPECT_EQ(flatten(f.set).size(), records);
  EXPECT_GT(records, 0u);
}

TEST(Perturb, ProfileFractionLimitsPerturbedProfiles) {
  const auto& f = fx();
  auto cfg = fixture_config();
  cfg.set("perturb_profile_fraction", "0.25");
  const auto set = perturb_profiles(*f.world, cfg, f.gen.profiles);
  EXPECT_EQ(set.perturbed.size(), 25u);
  EXPECT_EQ(set.reference.size(), f.gen.profiles.size());
  cfg.set("perturb_fraction", "0");
  EXPECT_THROW(perturb_profiles(*f.world, cfg, f.gen.profiles), ConfigError);
}

TEST(Files, ProfileSetReassemblesFromFiles) {
  const auto& f = fx();
  pt::TempDir dir("pipeline_files");
  std::vector<MedicalProfile> perturbed;
  for (const auto& [id, p] : f.set.perturbed) perturbed.push_back(p);
  {
    std::ofstream a(dir.path() / "ref.jsonl"), b(dir.path() / "pert.jsonl"), c(dir.path() / "recs.jsonl");
    write_profiles(a, f.set.reference);
    write_profiles(b, perturbed);
    write_perturbations(c, flatten(f.set));
  }
  const auto back = assemble_profile_set(load_profiles(dir.path() / "ref.jsonl"),
                                         load_profiles(dir.path() / "pert.jsonl"),
                                         load_perturbations(dir.path() / "recs.jsonl"));
  EXPECT_EQ(profiles_text(back.reference), profiles_text(f.set.reference));
  EXPECT_EQ(back.perturbed.size(), f.set.perturbed.size());
  EXPECT_EQ(flatten(back).size(), flatten(f.set).size());
  EXPECT_THROW(load_profiles(dir.path() / "absent.jsonl"), ParseError);
  EXPECT_THROW(load_policy(dir.path() / "absent.tsv"), ParseError);
}

TEST(Files, AssemblyRejectsStrayProfilesAndRecords) {
  const auto& f = fx();
  std::vector<MedicalProfile> ref(f.set.reference.begin(), f.set.reference.begin() + 2);
  const auto& stray = f.set.perturbed.rbegin()->second;
  EXPECT_THROW(assemble_profile_set(ref, {stray}, {}), ConfigError);
  const auto recs = f.set.perturbations.at(ref[0].profile_id);
  EXPECT_THROW(assemble_profile_set(ref, {}, recs), ConfigError);
  EXPECT_NO_THROW(assemble_profile_set(ref, {f.set.perturbed.at(ref[0].profile_id)}, recs));
}

TEST(Evaluate, MetricsAreIndependentOfWorkerCount) {
  const auto& f = fx();
  const auto& logs = run().logs;
  ASSERT_EQ(logs.size(), 30u);
  const auto ports = f.world->stub_metric_ports();
  const auto a = evaluate_logs(logs, ports, 1), b = evaluate_logs(logs, ports, 4);
  ASSERT_EQ(a.size(), logs.size());
  std::ostringstream sa, sb;
  for (const auto& m : a) write_metrics_row(sa, m);
  for (const auto& m : b) write_metrics_row(sb, m);
  EXPECT_EQ(sa.str(), sb.str());
  for (std::size_t i = 0; i < logs.size(); ++i) EXPECT_EQ(a[i].conversation_id, logs[i].conversation.id);
}

TEST(Evaluate, WritesMetricAndRetrievalFiles) {
  const auto& f = fx();
  const auto ms = evaluate_logs(run().logs, f.world->stub_metric_ports());
  pt::TempDir dir("pipeline_eval");
  write_evaluation(dir.path() / "eval", ms);
  std::istringstream metrics(pt::slurp(dir.path() / "eval" / "metrics.tsv"));
  std::size_t lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  EXPECT_EQ(lines, ms.size() + 1);
  std::istringstream ret(pt::slurp(dir.path() / "eval" / "retrieval.tsv"));
  std::string header, row;
  std::getline(ret, header);
  std::getline(ret, row);
  const auto f5 = text::split(row, '\t');
  ASSERT_EQ(f5.size(), 6u);
  // rank1 + beyond_rank1 + not_retrieved = items
  EXPECT_EQ(std::stoul(f5[1]) + std::stoul(f5[2]) + std::stoul(f5[4]), std::stoul(f5[0]));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "eval" / "rank_items.tsv"));
}

TEST(Report, SourcesRoundTripThroughJson) {
  ReportSources s{"/r/run", "/r/policy.tsv", {"/r/a.tsv", "/r/b.tsv"}, std::nullopt};
  auto back = report_sources_from_json(to_json(s));
  EXPECT_EQ(back.logs, s.logs);
  EXPECT_EQ(back.annotations, s.annotations);
  EXPECT_FALSE(back.judge.has_value());
  s.judge = "/r/judge.tsv";
  back = report_sources_from_json(to_json(s));
  EXPECT_EQ(back.judge, s.judge);
}

TEST(Report, LoadsInputsAndRendersFullTables) {
  const auto& f = fx();
  const auto& r = run();
  const auto root = r.dir.path();
  {
    std::ofstream p(root / "policy.tsv");
    write_policy(p, build_policy(*f.world, f.gen.profiles));
    std::ofstream k(root / "key.tsv");
    write_annotations(k, answer_key(r.logs, "key"));
    std::ofstream n(root / "noisy.tsv");
    write_annotations(n, noisy_annotator(answer_key(r.logs), "noisy", 0.1, 3));
  }
  ReportSources src{root / "run", root / "policy.tsv", {root / "key.tsv", root / "noisy.tsv"}, root / "key.tsv"};
  const auto in = load_report_inputs(*f.world, src, 2);
  ASSERT_EQ(in.annotators.size(), 2u);
  EXPECT_EQ(in.annotators[0].name, "key");
  EXPECT_EQ(in.annotators[1].name, "noisy");
  const auto bundle = report_tables(in);
  ASSERT_EQ(bundle.tables.size(), 8u);
  for (const auto& t : bundle.tables) {
    if (t.name == "table05_agreement") continue;
    for (const auto& row : t.rows)
      for (const auto& cell : row) EXPECT_NE(cell, "MISSING") << t.name;
  }
  write_report(bundle, root / "report");
  EXPECT_TRUE(verify_report(report_tables(load_report_inputs(*f.world, src)), root / "report").empty());
}
