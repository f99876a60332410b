// patsim command-line driver.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "patsim/live_ports.hpp"
#include "patsim/pipeline.hpp"
#include "patsim/synthetic.hpp"

namespace fs = std::filesystem;
using namespace patsim;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

fs::path bundled_config() { return default_data_dir() / "fixtures" / "patsim.conf"; }

// Without --config the bundled fixture configuration is used.
Config load_config(const Globals& g) {
  Config c = Config::load(g.config.empty() ? bundled_config() : fs::path(g.config));
  if (g.seed_set) c.set("seed", std::to_string(g.seed));
  return c;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  return out;
}

void write_agreement_row(std::ostream& out, const std::string& pair, const AgreementReport& r) {
  out << pair << '\t' << r.n_items << '\t' << fmt_num(r.micro.f1, 6) << '\t' << fmt_num(r.kappa, 6) << '\t'
      << r.abstained << '\t' << r.free_mentions_a << '\t' << r.free_mentions_b << '\n';
}

std::unique_ptr<ChatPort> make_judge(const std::string& mode, const World& w) {
  if (mode == "stub") return std::make_unique<ReferenceMatchJudge>(w.lexicon());
  if (mode == "live") return std::make_unique<HttpChatPort>(HttpChatPort::from_env("PATSIM_JUDGE"));
  throw ConfigError("judge mode must be 'stub' or 'live', got '" + mode + "'");
}

JudgeTemplate judge_template(const Config& cfg, const std::string& override_path) {
  if (!override_path.empty()) return JudgeTemplate::load(override_path);
  if (!cfg.path("judge_template").empty()) return JudgeTemplate::load(cfg.path("judge_template"));
  JudgeTemplate t{std::string(kDefaultJudgeTemplate)};
  t.check();
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patsim: simulated-patient evaluation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file");
  auto* seed_opt = app.add_option("--seed", g.seed, "master seed (overrides the config)");

  // gen-profiles
  auto* gen = app.add_subcommand("gen-profiles", "generate candidates and select a stratified cohort");
  std::string gen_out, gen_policy, gen_candidates;
  gen->add_option("--out", gen_out, "selected profiles (JSONL)")->required();
  gen->add_option("--policy", gen_policy, "reference recommendation per profile (TSV)");
  gen->add_option("--candidates", gen_candidates, "also write every candidate profile (JSONL)");

  // perturb
  auto* pert = app.add_subcommand("perturb", "replace a fraction of facts with near-miss concepts");
  std::string pert_in, pert_out, pert_records;
  pert->add_option("--profiles", pert_in, "reference profiles (JSONL)")->required();
  pert->add_option("--out", pert_out, "perturbed profiles (JSONL)")->required();
  pert->add_option("--records", pert_records, "ground-truth perturbation records (JSONL)")->required();

  // simulate
  auto* sim = app.add_subcommand("simulate", "run the conversations of an experiment design");
  std::string sim_design, sim_mode = "stub", sim_profiles, sim_perturbed, sim_records, sim_out;
  sim->add_option("--design", sim_design, "design file (JSON)")->required();
  sim->add_option("--mode", sim_mode, "stub or live")->check(CLI::IsMember({"stub", "live"}));
  sim->add_option("--profiles", sim_profiles, "reference profiles (JSONL)")->required();
  sim->add_option("--perturbed", sim_perturbed, "perturbed profiles (JSONL)");
  sim->add_option("--records", sim_records, "perturbation records (JSONL)");
  sim->add_option("--out", sim_out, "run directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "compute per-conversation metrics");
  std::string eval_logs, eval_out, eval_classifier = "stub";
  eval->add_option("--logs", eval_logs, "run directory holding manifest.json")->required();
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->add_option("--classifier", eval_classifier, "stub or live")->check(CLI::IsMember({"stub", "live"}));

  // annotate
  auto* ann = app.add_subcommand("annotate", "produce an annotation set for a run");
  std::string ann_logs, ann_out, ann_source = "key", ann_name, ann_base, ann_template;
  double ann_flip = 0.1;
  ann->add_option("--logs", ann_logs, "run directory")->required();
  ann->add_option("--out", ann_out, "annotation file (TSV)")->required();
  ann->add_option("--source", ann_source, "key, noisy, stub-judge or live-judge")
      ->check(CLI::IsMember({"key", "noisy", "stub-judge", "live-judge"}));
  ann->add_option("--name", ann_name, "annotator name");
  ann->add_option("--base", ann_base, "base annotation file for noisy (default: the answer key)");
  ann->add_option("--flip", ann_flip, "label flip probability for noisy");
  ann->add_option("--template", ann_template, "judge prompt template");

  // agree
  auto* agr = app.add_subcommand("agree", "agreement, paired bootstrap and adjudication");
  std::string agr_a, agr_b, agr_c, agr_judge, agr_logs, agr_template, agr_resolution, agr_out;
  std::size_t agr_resamples = 0;
  bool agr_cluster = false;
  agr->add_option("--a", agr_a, "annotation file A")->required();
  agr->add_option("--b", agr_b, "annotation file B")->required();
  agr->add_option("--c", agr_c, "third annotation file for the bootstrap comparison");
  agr->add_option("--judge", agr_judge, "annotate --logs with a judge (stub or live) and compare it")
      ->check(CLI::IsMember({"stub", "live"}));
  agr->add_option("--logs", agr_logs, "run directory for --judge");
  agr->add_option("--template", agr_template, "judge prompt template");
  agr->add_option("--resamples", agr_resamples, "bootstrap resamples (default from config)");
  agr->add_flag("--cluster-by-conversation", agr_cluster, "resample whole conversations");
  agr->add_option("--resolution", agr_resolution, "consensus labels for disagreements (TSV)");
  agr->add_option("--out", agr_out, "output directory");

  // report
  auto* rep = app.add_subcommand("report", "render the report tables");
  ReportSources rep_src;
  std::string rep_logs, rep_policy, rep_judge, rep_out;
  std::vector<std::string> rep_ann;
  rep->add_option("--logs", rep_logs, "run directory")->required();
  rep->add_option("--policy", rep_policy, "reference policy (TSV)")->required();
  rep->add_option("--annotations", rep_ann, "annotation files for pairwise agreement");
  rep->add_option("--judge-annotations", rep_judge, "judge annotation file");
  rep->add_option("--out", rep_out, "report directory")->required();

  // verify
  auto* ver = app.add_subcommand("verify", "recompute a report and diff it against its files");
  std::string ver_dir;
  ver->add_option("--report", ver_dir, "report directory")->required();

  // synth-fixture
  auto* syn = app.add_subcommand("synth-fixture", "write a synthetic ontology and cohort");
  std::string syn_out;
  std::size_t syn_concepts = 500, syn_patients = 2000;
  syn->add_option("--out", syn_out, "output directory")->required();
  syn->add_option("--concepts", syn_concepts, "clinical concept count");
  syn->add_option("--patients", syn_patients, "patient count");

  CLI11_PARSE(app, argc, argv);
  g.seed_set = seed_opt->count() > 0;

  try {
    const Config cfg = load_config(g);

    if (*syn) {
      const auto o = synthetic::build_ontology(syn_concepts);
      const auto records = synthetic::build_cohort(o, {syn_patients, 6, cfg.count("seed")});
      auto oo = open_out(fs::path(syn_out) / "ontology.tsv");
      write_ontology(oo, o);
      auto co = open_out(fs::path(syn_out) / "cohort.jsonl");
      for (const auto& r : records) write_patient_record(co, o, r);
      std::printf("wrote %zu concepts, %zu patients to %s\n", o.size(), records.size(), syn_out.c_str());
      return 0;
    }

    if (*ver) {
      std::ifstream in(fs::path(ver_dir) / "inputs.json");
      if (!in) throw ParseError("report directory lacks inputs.json");
      const auto j = nlohmann::json::parse(in);
      Config vc = Config::load(j.at("config").is_null() ? bundled_config() : fs::path(j.at("config").get<std::string>()));
      if (!j.at("seed").is_null()) vc.set("seed", std::to_string(j.at("seed").get<std::uint64_t>()));
      const auto world = World::load(vc);
      const auto inputs = load_report_inputs(*world, report_sources_from_json(j.at("sources")),
                                             static_cast<unsigned>(vc.count("workers")));
      const auto diffs = verify_report(report_tables(inputs), ver_dir);
      for (const auto& d : diffs) std::printf("DIFF %s: %s\n", d.table.c_str(), d.detail.c_str());
      std::printf("%s: %zu table(s) differ\n", diffs.empty() ? "OK" : "FAIL", diffs.size());
      return diffs.empty() ? 0 : 1;
    }

    const auto world = World::load(cfg);
    const auto workers = static_cast<unsigned>(cfg.count("workers"));

    if (*gen) {
      const auto run = generate_profiles(*world, cfg);
      {
        auto out = open_out(gen_out);
        write_profiles(out, run.profiles);
      }
      if (!gen_candidates.empty()) {
        auto out = open_out(gen_candidates);
        write_profiles(out, run.candidates);
      }
      if (!gen_policy.empty()) {
        auto out = open_out(gen_policy);
        write_policy(out, build_policy(*world, run.profiles));
      }
      std::printf("plan n=%ld p=%.6f mu=%.4f sigma=%.5f\n", run.plan.n, run.plan.p, run.plan.mu, run.plan.sigma);
      for (std::size_t b = 0; b < 7; ++b)
        std::printf("band %zu [%ld,%ld] mass=%.6f quota=%zu available=%zu taken=%zu\n", b, run.plan.bands[b].k_lo,
                    run.plan.bands[b].k_hi, run.plan.bands[b].target_mass, run.selection.quotas[b],
                    run.selection.available[b], run.selection.taken[b]);
      std::printf("selected %zu of %zu candidates\n", run.profiles.size(), run.candidates.size());
      return 0;
    }

    if (*pert) {
      const auto set = perturb_profiles(*world, cfg, load_profiles(pert_in));
      std::vector<MedicalProfile> perturbed;
      for (const auto& [id, p] : set.perturbed) perturbed.push_back(p);
      {
        auto out = open_out(pert_out);
        write_profiles(out, perturbed);
      }
      const auto recs = flatten(set);
      auto out = open_out(pert_records);
      write_perturbations(out, recs);
      std::size_t relaxed = 0;
      for (const auto& r : recs) relaxed += r.relaxation_level > 0;
      std::printf("perturbed %zu profiles, %zu facts (%zu relaxed)\n", perturbed.size(), recs.size(), relaxed);
      return 0;
    }

    if (*sim) {
      auto design = load_design(sim_design);
      std::vector<MedicalProfile> perturbed;
      std::vector<PerturbationRecord> records;
      if (!sim_perturbed.empty()) perturbed = load_profiles(sim_perturbed);
      if (!sim_records.empty()) records = load_perturbations(sim_records);
      const auto set = assemble_profile_set(load_profiles(sim_profiles), perturbed, records);
      PortFactory ports = world->stub_ports();
      if (sim_mode == "live") {
        ports.chat = [](const CellKey&, std::uint64_t) -> std::unique_ptr<ChatPort> {
          return std::make_unique<HttpChatPort>(HttpChatPort::from_env());
        };
        ports.sut = [](const CellKey&) -> std::unique_ptr<SutPort> {
          return std::make_unique<HttpSutPort>(HttpSutPort::from_env());
        };
      }
      const auto m = run_experiment(design, set, world->personas(), ports, sim_out);
      std::size_t aborted = 0, failures = 0;
      for (const auto& c : m.cells) {
        aborted += c.aborted;
        failures += c.parse_failures;
      }
      std::printf("%zu conversations in %zu cells, %zu aborted, %zu parse failures\n", m.conversation_count(),
                  m.cells.size(), aborted, failures);
      return aborted == 0 ? 0 : 3;
    }

    if (*eval) {
      const auto logs = load_run(eval_logs);
      auto ports = world->stub_metric_ports();
      std::optional<HttpClassifier> dep, tox;
      if (eval_classifier == "live") {
        auto url = env("PATSIM_CLASSIFIER_BASE_URL");
        if (!url) throw ConfigError("PATSIM_CLASSIFIER_BASE_URL is not set");
        dep.emplace(Endpoint::parse(*url), "depression");
        tox.emplace(Endpoint::parse(*url), "toxicity");
        ports.depression = &*dep;
        ports.toxicity = &*tox;
      }
      const auto ms = evaluate_logs(logs, ports, workers);
      write_evaluation(eval_out, ms);
      std::printf("evaluated %zu conversations into %s\n", ms.size(), eval_out.c_str());
      return 0;
    }

    if (*ann) {
      const auto logs = load_run(ann_logs);
      AnnotationSet out_set;
      if (ann_source == "key") {
        out_set = answer_key(logs, ann_name.empty() ? "key" : ann_name);
      } else if (ann_source == "noisy") {
        const auto base = ann_base.empty() ? answer_key(logs) : load_annotations(ann_base);
        out_set = noisy_annotator(base, ann_name.empty() ? "noisy" : ann_name, ann_flip, cfg.count("seed"));
      } else {
        auto judge = make_judge(ann_source == "stub-judge" ? "stub" : "live", *world);
        auto run = judge_annotate(logs, *judge, judge_template(cfg, ann_template), ann_name.empty() ? "judge" : ann_name,
                                  judge->single_flight() ? 1 : workers);
        for (const auto& f : run.failures)
          std::fprintf(stderr, "judge failure %s turn %zu: %s\n", f.conversation.c_str(), f.turn, f.error.c_str());
        std::printf("judge abstained on %zu items\n", run.abstained);
        out_set = std::move(run.annotations);
      }
      out_set.validate();
      auto out = open_out(ann_out);
      write_annotations(out, out_set);
      std::printf("wrote %zu annotations to %s\n", out_set.items.size(), ann_out.c_str());
      return 0;
    }

    if (*agr) {
      const auto a = load_named_annotations(agr_a), b = load_named_annotations(agr_b);
      std::optional<NamedAnnotations> c, j;
      if (!agr_c.empty()) c = load_named_annotations(agr_c);
      if (!agr_judge.empty()) {
        if (agr_logs.empty()) throw ConfigError("--judge needs --logs");
        auto judge = make_judge(agr_judge, *world);
        auto run = judge_annotate(load_run(agr_logs), *judge, judge_template(cfg, agr_template), "judge",
                                  judge->single_flight() ? 1 : workers);
        j = NamedAnnotations{"judge", std::move(run.annotations)};
      }
      std::ostringstream table;
      table << "pair\tn\tf1_micro\tkappa\tabstained\tfree_a\tfree_b\n";
      const auto la = labels_of(a.set), lb = labels_of(b.set);
      write_agreement_row(table, a.name + "~" + b.name, agreement(la, lb));
      if (j) {
        const auto lj = labels_of(j->set);
        write_agreement_row(table, a.name + "~judge", agreement(la, lj));
        write_agreement_row(table, b.name + "~judge", agreement(lb, lj));
      }
      const NamedAnnotations* third = c ? &*c : (j ? &*j : nullptr);
      if (third) {
        const auto resamples = agr_resamples ? agr_resamples : cfg.count("bootstrap_resamples");
        const auto r = compare_agreement(la, lb, labels_of(third->set), resamples,
                                         mix_seed(cfg.count("seed"), stable_hash("bootstrap")), agr_cluster);
        table << "# bootstrap kappa(" << a.name << "," << b.name << ") - kappa(" << a.name << "," << third->name
              << ") delta=" << fmt_num(r.delta) << " p=" << fmt_num(r.p_value) << " resamples=" << r.resamples
              << " redraws=" << r.redraws << (agr_cluster ? " unit=conversation" : " unit=item") << '\n';
      }
      std::optional<AnnotationSet> resolution;
      if (!agr_resolution.empty()) resolution = load_annotations(agr_resolution);
      const auto adj = adjudicate(a.set, b.set, resolution);
      table << "# adjudication consensus=" << adj.consensus.items.size()
            << " unresolved=" << adj.disagreements.size() << '\n';
      std::cout << table.str();
      if (!agr_out.empty()) {
        auto out = open_out(fs::path(agr_out) / "agreement.tsv");
        out << table.str();
        auto cons = open_out(fs::path(agr_out) / "consensus.tsv");
        write_annotations(cons, adj.consensus);
        auto dis = open_out(fs::path(agr_out) / "disagreements.tsv");
        dis << "conversation\tturn\tkey\ta\tb\n";
        auto lab = [](const std::optional<Label>& l) { return l ? std::string(to_string(*l)) : std::string(kAbstain); };
        for (const auto& d : adj.disagreements)
          dis << d.item.conversation << '\t' << d.item.turn << '\t' << d.item.key << '\t' << lab(d.a) << '\t'
              << lab(d.b) << '\n';
        if (j) {
          auto jo = open_out(fs::path(agr_out) / "judge.tsv");
          write_annotations(jo, j->set);
        }
      }
      return 0;
    }

    if (*rep) {
      rep_src.logs = fs::absolute(rep_logs);
      rep_src.policy = fs::absolute(rep_policy);
      for (const auto& p : rep_ann) rep_src.annotations.push_back(fs::absolute(p));
      if (!rep_judge.empty()) rep_src.judge = fs::absolute(rep_judge);
      const auto inputs = load_report_inputs(*world, rep_src, workers);
      const auto bundle = report_tables(inputs);
      write_report(bundle, rep_out);
      nlohmann::json j{{"sources", to_json(rep_src)},
                       {"config", g.config.empty() ? nlohmann::json(nullptr)
                                                   : nlohmann::json(fs::absolute(g.config).string())},
                       {"seed", g.seed_set ? nlohmann::json(g.seed) : nlohmann::json(nullptr)}};
      auto out = open_out(fs::path(rep_out) / "inputs.json");
      out << j.dump(2) << '\n';
      std::printf("wrote %zu tables to %s\n", bundle.tables.size(), rep_out.c_str());
      return 0;
    }
  } catch (const AlignmentError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    for (std::size_t i = 0; i < e.orphans().size() && i < 10; ++i)
      std::fprintf(stderr, "  orphan %s\n", e.orphans()[i].c_str());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
