#pragma once

// Experiment designs: (linguistic x behavioral x medical profile) cells,
// deduplicated across settings, executed by a worker pool with one log file
// per conversation and a manifest of cell -> files.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/orchestrator.hpp"
#include "patsim/persona.hpp"
#include "patsim/rng.hpp"

namespace patsim {

struct DesignSetting {
  std::string name;
  std::vector<LinguisticKind> linguistic;
  std::vector<BehavioralKind> behavioral;
  std::size_t profile_count = 0;          // first N profiles of the pool
  std::vector<std::string> profile_ids;   // explicit list; overrides profile_count
  std::size_t replicates = 1;
};

struct ExperimentDesign {
  std::string design_id = "design";
  std::uint64_t seed = 0;
  std::vector<DesignSetting> settings;
  RunLimits limits;
  unsigned workers = 1;
};

struct CellKey {
  LinguisticKind linguistic;
  BehavioralKind behavioral;
  std::string profile_id;
  std::size_t replicate = 0;
  auto operator<=>(const CellKey&) const = default;

  std::string conversation_id() const {
    return std::string(to_string(linguistic)) + "__" + std::string(to_string(behavioral)) + "__" +
           profile_id + "__r" + std::to_string(replicate);
  }
};

// Paper-scale design: five linguistic profiles under the cooperative
// behavior, three behaviors under functional literacy, and a 5x3
// intersection over a smaller profile subset.
inline ExperimentDesign paper_design(std::size_t main_profiles = 60, std::size_t intersection_profiles = 10) {
  ExperimentDesign d;
  d.design_id = "paper";
  const std::vector<LinguisticKind> all_l(kLinguisticKinds.begin(), kLinguisticKinds.end());
  const std::vector<BehavioralKind> all_b(kOperationalBehaviors.begin(), kOperationalBehaviors.end());
  d.settings.push_back({"linguistic_variation", all_l, {BehavioralKind::StructuredCooperative}, main_profiles, {}, 1});
  d.settings.push_back({"behavioral_variation", {LinguisticKind::FunctionalHL}, all_b, main_profiles, {}, 1});
  d.settings.push_back({"intersection", all_l, all_b, intersection_profiles, {}, 1});
  return d;
}

/// Union of all settings' cells in sorted order. Shared cells (same
/// linguistic, behavioral, profile and replicate) are run once.
inline std::vector<CellKey> expand_design(const ExperimentDesign& d, const std::vector<std::string>& pool) {
  std::set<CellKey> cells;
  for (const auto& s : d.settings) {
    std::vector<std::string> ids = s.profile_ids;
    if (ids.empty()) {
      if (s.profile_count > pool.size())
        throw ConfigError("setting '" + s.name + "' wants " + std::to_string(s.profile_count) +
                          " profiles but only " + std::to_string(pool.size()) + " are available");
      ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(s.profile_count));
    }
    for (auto l : s.linguistic)
      for (auto b : s.behavioral)
        for (const auto& p : ids)
          for (std::size_t r = 0; r < s.replicates; ++r) cells.insert({l, b, p, r});
  }
  return {cells.begin(), cells.end()};
}

// ---------------------------------------------------------------------------
// Design file (JSON)
//
//   {"design_id": "...", "seed": 7, "workers": 4, "max_turns": 30, "max_retries": 2,
//    "wall_clock_seconds": 600,
//    "settings": [{"name": "...", "linguistic": ["LIMITED_HL", ...],
//                  "behavioral": ["STRUCTURED_COOPERATIVE", ...],
//                  "profiles": 60 | ["P00001", ...], "replicates": 1}]}

inline ExperimentDesign design_from_json(const nlohmann::json& j) {
  ExperimentDesign d;
  try {
    d.design_id = j.value("design_id", std::string("design"));
    d.seed = j.value("seed", std::uint64_t{0});
    d.workers = j.value("workers", 1u);
    d.limits.max_turns = j.value("max_turns", std::size_t{30});
    d.limits.max_retries = j.value("max_retries", std::size_t{2});
    if (j.contains("wall_clock_seconds"))
      d.limits.wall_clock = std::chrono::seconds(j.at("wall_clock_seconds").get<long>());
    for (const auto& sj : j.at("settings")) {
      DesignSetting s;
      s.name = sj.value("name", std::string("setting"));
      for (const auto& l : sj.at("linguistic")) s.linguistic.push_back(parse_linguistic(l.get<std::string>()));
      for (const auto& b : sj.at("behavioral")) s.behavioral.push_back(parse_behavioral(b.get<std::string>()));
      const auto& p = sj.at("profiles");
      if (p.is_array())
        s.profile_ids = p.get<std::vector<std::string>>();
      else
        s.profile_count = p.get<std::size_t>();
      s.replicates = sj.value("replicates", std::size_t{1});
      if (s.replicates < 1) throw ConfigError("replicates must be >= 1");
      d.settings.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("design file: ") + e.what());
  }
  if (d.workers < 1) d.workers = 1;
  return d;
}

inline ExperimentDesign load_design(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open design file '" + path.string() + "'");
  try {
    return design_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("design file '" + path.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Execution

struct PortFactory {
  std::function<std::unique_ptr<ChatPort>(const CellKey&, std::uint64_t seed)> chat;
  std::function<std::unique_ptr<SutPort>(const CellKey&)> sut;
};

struct CellEntry {
  std::string linguistic;
  std::string behavioral;
  std::vector<std::string> profiles;
  std::vector<std::string> files;
  std::size_t count = 0;
  std::size_t aborted = 0;
  std::size_t parse_failures = 0;
  std::vector<std::string> failures;  // conversation id: reason
};

struct RunManifest {
  std::string design_id;
  std::uint64_t seed = 0;
  std::string toolkit_version{kToolkitVersion};
  std::vector<CellEntry> cells;  // sorted by (linguistic, behavioral)

  std::size_t conversation_count() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.count;
    return n;
  }
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : m.cells)
    cells.push_back({{"linguistic", c.linguistic},
                     {"behavioral", c.behavioral},
                     {"profiles", c.profiles},
                     {"count", c.count},
                     {"files", c.files},
                     {"aborted", c.aborted},
                     {"parse_failures", c.parse_failures},
                     {"failures", c.failures}});
  return {{"design_id", m.design_id}, {"seed", m.seed}, {"toolkit_version", m.toolkit_version},
          {"cells", cells}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.design_id = j.at("design_id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.toolkit_version = j.at("toolkit_version").get<std::string>();
  for (const auto& c : j.at("cells")) {
    CellEntry e;
    e.linguistic = c.at("linguistic").get<std::string>();
    e.behavioral = c.at("behavioral").get<std::string>();
    e.profiles = c.at("profiles").get<std::vector<std::string>>();
    e.count = c.at("count").get<std::size_t>();
    e.files = c.at("files").get<std::vector<std::string>>();
    e.aborted = c.at("aborted").get<std::size_t>();
    e.parse_failures = c.at("parse_failures").get<std::size_t>();
    e.failures = c.at("failures").get<std::vector<std::string>>();
    m.cells.push_back(std::move(e));
  }
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest '" + path.string() + "'");
  return manifest_from_json(nlohmann::json::parse(in));
}

struct ProfileSet {
  std::vector<MedicalProfile> reference;                                  // in pool order
  std::map<std::string, MedicalProfile> perturbed;                        // by profile id
  std::map<std::string, std::vector<PerturbationRecord>> perturbations;  // by profile id
};

/// Runs every deduplicated cell. Conversation seeds derive from the design
/// seed and the conversation id, so results do not depend on worker count or
/// scheduling. The manifest is written even when cells fail.
inline RunManifest run_experiment(const ExperimentDesign& design, const ProfileSet& profiles,
                                  const PersonaLibrary& library, const PortFactory& ports,
                                  const std::filesystem::path& out_dir) {
  std::vector<std::string> pool;
  std::map<std::string, const MedicalProfile*> by_id;
  for (const auto& p : profiles.reference) {
    pool.push_back(p.profile_id);
    by_id[p.profile_id] = &p;
  }
  const auto cells = expand_design(design, pool);
  for (const auto& c : cells)
    if (!by_id.contains(c.profile_id)) throw ConfigError("design references unknown profile '" + c.profile_id + "'");
  std::filesystem::create_directories(out_dir / "logs");

  struct Outcome {
    bool aborted = false;
    std::size_t parse_failures = 0;
    std::string failure;
  };
  std::vector<Outcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex chat_mu, sut_mu;

  auto worker = [&] {
    while (true) {
      const auto i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const auto& cell = cells[i];
      const auto id = cell.conversation_id();
      const auto& ref = *by_id.at(cell.profile_id);
      auto pit = profiles.perturbed.find(cell.profile_id);
      const MedicalProfile& sim = pit == profiles.perturbed.end() ? ref : pit->second;
      ConversationSetup setup{id,
                              {sim, library.linguistic(cell.linguistic), library.behavioral(cell.behavioral)},
                              cell.replicate,
                              mix_seed(design.seed, stable_hash(id))};
      ConversationLog log;
      try {
        auto chat = ports.chat(cell, setup.seed);
        auto sut = ports.sut(cell);
        std::unique_lock<std::mutex> cl(chat_mu, std::defer_lock), sl(sut_mu, std::defer_lock);
        if (chat->single_flight()) cl.lock();
        if (sut->single_flight()) sl.lock();
        log.conversation = run_conversation(setup, *chat, *sut, design.limits);
      } catch (const Error& e) {
        log.conversation.id = id;
        log.conversation.linguistic = std::string(to_string(cell.linguistic));
        log.conversation.behavioral = std::string(to_string(cell.behavioral));
        log.conversation.profile_id = cell.profile_id;
        log.conversation.replicate = cell.replicate;
        log.conversation.seed = setup.seed;
        log.conversation.status = ConversationStatus::Aborted;
        log.conversation.abort_reason = e.what();
      }
      log.reference_profile = ref;
      log.simulator_profile = sim;
      if (auto it = profiles.perturbations.find(cell.profile_id); it != profiles.perturbations.end())
        log.perturbations = it->second;
      log.design_id = design.design_id;
      std::ofstream out(out_dir / "logs" / (id + ".jsonl"), std::ios::binary);
      write_conversation_log(out, log);
      auto& o = outcomes[i];
      o.aborted = log.conversation.status == ConversationStatus::Aborted;
      o.parse_failures = log.conversation.parse_failures();
      if (o.aborted) o.failure = id + ": " + log.conversation.abort_reason;
    }
  };
  {
    std::vector<std::jthread> threads;
    const unsigned n = std::max(1u, std::min<unsigned>(design.workers, static_cast<unsigned>(cells.size())));
    for (unsigned t = 0; t < n; ++t) threads.emplace_back(worker);
  }

  RunManifest m;
  m.design_id = design.design_id;
  m.seed = design.seed;
  std::map<std::pair<std::string, std::string>, CellEntry> grouped;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    auto key = std::pair{std::string(to_string(c.linguistic)), std::string(to_string(c.behavioral))};
    auto& e = grouped[key];
    e.linguistic = key.first;
    e.behavioral = key.second;
    if (std::find(e.profiles.begin(), e.profiles.end(), c.profile_id) == e.profiles.end())
      e.profiles.push_back(c.profile_id);
    e.files.push_back("logs/" + c.conversation_id() + ".jsonl");
    ++e.count;
    e.aborted += outcomes[i].aborted;
    e.parse_failures += outcomes[i].parse_failures;
    if (!outcomes[i].failure.empty()) e.failures.push_back(outcomes[i].failure);
  }
  for (auto& [k, e] : grouped) m.cells.push_back(std::move(e));
  std::ofstream mout(out_dir / "manifest.json", std::ios::binary);
  mout << to_json(m).dump(2) << '\n';
  return m;
}

/// Checks that every file a manifest references exists and parses and that
/// per-cell counts match the file lists.
inline std::vector<ConversationLog> load_manifest_logs(const RunManifest& m, const std::filesystem::path& dir) {
  std::vector<ConversationLog> logs;
  for (const auto& c : m.cells) {
    if (c.count != c.files.size())
      throw ParseError("manifest cell " + c.linguistic + "/" + c.behavioral + " count mismatch");
    for (const auto& f : c.files) {
      std::ifstream in(dir / f);
      if (!in) throw ParseError("manifest references missing log '" + f + "'");
      logs.push_back(read_conversation_log(in, f));
    }
  }
  return logs;
}

}  // namespace patsim
