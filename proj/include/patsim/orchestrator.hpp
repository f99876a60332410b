#pragma once

// Conversation runner between a persona-conditioned patient simulator and a
// decision aid under test, plus the line-delimited conversation log format.

#include <chrono>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/perturbation.hpp"
#include "patsim/persona.hpp"
#include "patsim/profilegen.hpp"
#include "patsim/schema.hpp"
#include "patsim/text.hpp"

namespace patsim {

inline constexpr std::string_view kToolkitVersion = "0.3.0";
inline constexpr std::string_view kNoRecommendation = "NO_RECOMMENDATION";

enum class IntakeStage {
  Rapport,
  IllnessHistory,
  AntidepressantHistory,
  CurrentMedications,
  Procedures,
  Recommendation
};

inline constexpr std::array<IntakeStage, 6> kIntakeStages = {
    IntakeStage::Rapport,            IntakeStage::IllnessHistory, IntakeStage::AntidepressantHistory,
    IntakeStage::CurrentMedications, IntakeStage::Procedures,     IntakeStage::Recommendation};

inline std::string_view to_string(IntakeStage s) {
  switch (s) {
    case IntakeStage::Rapport: return "rapport";
    case IntakeStage::IllnessHistory: return "illness_history";
    case IntakeStage::AntidepressantHistory: return "antidepressant_history";
    case IntakeStage::CurrentMedications: return "current_medications";
    case IntakeStage::Procedures: return "procedures";
    case IntakeStage::Recommendation: return "recommendation";
  }
  return "?";
}

inline IntakeStage parse_intake_stage(std::string_view s) {
  for (auto st : kIntakeStages)
    if (to_string(st) == s) return st;
  throw ParseError("unknown intake stage '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Ports

struct ChatMessage {
  std::string role;  // "user" (decision aid) or "assistant" (simulator)
  std::string content;
};

class ChatPort {
 public:
  virtual ~ChatPort() = default;
  virtual std::string request(const std::string& system, const std::vector<ChatMessage>& history) = 0;
  // True when the backend cannot take concurrent calls; the runner then
  // serializes access.
  virtual bool single_flight() const { return false; }
};

struct DialogueTurn {
  IntakeStage stage = IntakeStage::Rapport;
  std::string aid_utterance;
  std::string patient_text;  // markup stripped; empty when the turn failed
};

struct AidQuestion {
  IntakeStage stage = IntakeStage::Rapport;
  std::string utterance;
};

// One mention the decision aid extracted from a patient utterance, with its
// ranked normalization candidates (best first).
struct IntakeMention {
  std::string text;
  std::vector<std::string> candidates;
  std::vector<double> scores;
  std::optional<std::string> accepted;  // concept id taken into the record
};

class SutPort {
 public:
  virtual ~SutPort() = default;
  virtual AidQuestion next_question(const std::vector<DialogueTurn>& history) = 0;
  virtual std::string recommend(const std::vector<DialogueTurn>& history) = 0;
  // Intake record for one patient utterance. Backends without an intake
  // endpoint return nothing and recall/rank metrics come out empty.
  virtual std::vector<IntakeMention> intake(std::string_view) { return {}; }
  virtual bool single_flight() const { return false; }
};

// ---------------------------------------------------------------------------
// Conversation

enum class TurnStatus { Ok, ParseFailed };
enum class ConversationStatus { Completed, Aborted };

struct ConversationTurn {
  std::size_t number = 0;  // 1-based
  IntakeStage stage = IntakeStage::Rapport;
  std::string aid_utterance;
  TurnStatus status = TurnStatus::Ok;
  std::optional<SimulatorTurn> patient;
  std::vector<std::string> failed_attempts;  // raw text of rejected replies
  std::vector<std::string> errors;
  std::vector<IntakeMention> intake;
};

struct Conversation {
  std::string id;
  std::string linguistic;
  std::string behavioral;
  std::string profile_id;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  std::vector<ConversationTurn> turns;
  std::optional<std::string> final_recommendation;
  ConversationStatus status = ConversationStatus::Completed;
  std::string abort_reason;

  std::size_t parse_failures() const {
    std::size_t n = 0;
    for (const auto& t : turns) n += t.status == TurnStatus::ParseFailed;
    return n;
  }
};

struct RunLimits {
  std::size_t max_turns = 30;
  std::size_t max_retries = 2;
  std::optional<std::chrono::milliseconds> wall_clock;  // live mode only
};

struct ConversationSetup {
  std::string id;
  PersonaPromptSpec persona;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<ChatMessage> chat_history(const std::vector<ConversationTurn>& turns,
                                             std::string_view next_aid) {
  std::vector<ChatMessage> msgs;
  for (const auto& t : turns) {
    msgs.push_back({"user", t.aid_utterance});
    if (t.patient)
      msgs.push_back({"assistant", serialize_turn(*t.patient)});
    else if (!t.failed_attempts.empty())
      msgs.push_back({"assistant", t.failed_attempts.back()});
  }
  msgs.push_back({"user", std::string(next_aid)});
  return msgs;
}

}  // namespace detail

/// Alternates aid questions and simulator replies until the aid reaches its
/// recommendation stage or a cap is hit. Each reply is parsed and validated;
/// a reply that fails validation is retried up to max_retries times and then
/// recorded as a parse_failed turn. Port failures abort the conversation
/// with the partial transcript kept.
inline Conversation run_conversation(const ConversationSetup& setup, ChatPort& chat, SutPort& sut,
                                     const RunLimits& limits = {}) {
  Conversation c;
  c.id = setup.id;
  c.linguistic = std::string(to_string(setup.persona.linguistic.kind));
  c.behavioral = std::string(to_string(setup.persona.behavioral.kind));
  c.profile_id = setup.persona.medical.profile_id;
  c.replicate = setup.replicate;
  c.seed = setup.seed;
  const std::string system = assemble_persona_prompt(setup.persona);
  const auto start = std::chrono::steady_clock::now();
  std::vector<DialogueTurn> dialogue;

  try {
    while (true) {
      if (c.turns.size() >= limits.max_turns) {
        c.status = ConversationStatus::Aborted;
        c.abort_reason = "turn cap " + std::to_string(limits.max_turns) + " reached";
        break;
      }
      if (limits.wall_clock && std::chrono::steady_clock::now() - start > *limits.wall_clock) {
        c.status = ConversationStatus::Aborted;
        c.abort_reason = "wall-clock cap reached";
        break;
      }
      auto q = sut.next_question(dialogue);
      std::optional<std::string> rec;
      if (q.stage == IntakeStage::Recommendation) rec = sut.recommend(dialogue);

      ConversationTurn t;
      t.number = c.turns.size() + 1;
      t.stage = q.stage;
      t.aid_utterance = q.utterance;
      const auto msgs = detail::chat_history(c.turns, q.utterance);
      for (std::size_t attempt = 0; attempt <= limits.max_retries; ++attempt) {
        std::string raw = chat.request(system, msgs);
        try {
          t.patient = parse_simulator_turn(raw);
          break;
        } catch (const SchemaError& e) {
          t.failed_attempts.push_back(std::move(raw));
          t.errors.push_back(e.what());
        }
      }
      DialogueTurn d{q.stage, q.utterance, {}};
      if (t.patient) {
        d.patient_text = text::strip_markup(t.patient->response);
        t.intake = sut.intake(d.patient_text);
      } else {
        t.status = TurnStatus::ParseFailed;
      }
      dialogue.push_back(std::move(d));
      c.turns.push_back(std::move(t));
      if (rec) {
        c.final_recommendation = *rec;
        c.status = ConversationStatus::Completed;
        break;
      }
    }
  } catch (const PortError& e) {
    c.status = ConversationStatus::Aborted;
    c.abort_reason = std::string("port failure: ") + e.what();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Log records
//
// One JSON object per line: a header, one line per turn, an outcome footer.
// Logs carry everything metric computation needs: persona ids, both the
// reference and the simulator-facing profile, perturbation records, seeds.

struct ConversationLog {
  Conversation conversation;
  MedicalProfile reference_profile;
  MedicalProfile simulator_profile;
  std::vector<PerturbationRecord> perturbations;
  std::string design_id;
};

inline nlohmann::json to_json(const IntakeMention& m) {
  nlohmann::json j{{"text", m.text}, {"candidates", m.candidates}, {"scores", m.scores}};
  j["accepted"] = m.accepted ? nlohmann::json(*m.accepted) : nlohmann::json(nullptr);
  return j;
}

inline IntakeMention intake_mention_from_json(const nlohmann::json& j) {
  IntakeMention m;
  m.text = j.at("text").get<std::string>();
  m.candidates = j.at("candidates").get<std::vector<std::string>>();
  m.scores = j.at("scores").get<std::vector<double>>();
  if (!j.at("accepted").is_null()) m.accepted = j.at("accepted").get<std::string>();
  return m;
}

inline void write_conversation_log(std::ostream& out, const ConversationLog& log) {
  const auto& c = log.conversation;
  nlohmann::json header{{"record", "header"},
                        {"toolkit_version", kToolkitVersion},
                        {"design_id", log.design_id},
                        {"conversation_id", c.id},
                        {"linguistic", c.linguistic},
                        {"behavioral", c.behavioral},
                        {"profile_id", c.profile_id},
                        {"replicate", c.replicate},
                        {"seed", c.seed},
                        {"aid_wording", "toolkit-authored"},
                        {"reference_profile", to_json(log.reference_profile, false)},
                        {"simulator_profile", to_json(log.simulator_profile, false)}};
  auto pert = nlohmann::json::array();
  for (const auto& r : log.perturbations) pert.push_back(to_json(r));
  header["perturbations"] = std::move(pert);
  out << header.dump() << '\n';

  for (const auto& t : c.turns) {
    nlohmann::json j{{"record", "turn"},
                     {"turn", t.number},
                     {"stage", to_string(t.stage)},
                     {"aid", t.aid_utterance},
                     {"status", t.status == TurnStatus::Ok ? "ok" : "parse_failed"},
                     {"failed_attempts", t.failed_attempts},
                     {"errors", t.errors}};
    j["patient"] = t.patient ? to_json(*t.patient) : nlohmann::json(nullptr);
    auto intake = nlohmann::json::array();
    for (const auto& m : t.intake) intake.push_back(to_json(m));
    j["intake"] = std::move(intake);
    out << j.dump() << '\n';
  }

  nlohmann::json footer{{"record", "outcome"},
                        {"status", c.status == ConversationStatus::Completed ? "completed" : "aborted"},
                        {"abort_reason", c.abort_reason},
                        {"turns", c.turns.size()},
                        {"parse_failures", c.parse_failures()}};
  footer["recommendation"] =
      c.final_recommendation ? nlohmann::json(*c.final_recommendation) : nlohmann::json(nullptr);
  out << footer.dump() << '\n';
}

inline ConversationLog read_conversation_log(std::istream& in, const std::string& source = "log") {
  ConversationLog log;
  auto& c = log.conversation;
  std::string line;
  std::size_t lineno = 0;
  bool header = false, footer = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto kind = j.at("record").get<std::string>();
      if (kind == "header") {
        header = true;
        log.design_id = j.at("design_id").get<std::string>();
        c.id = j.at("conversation_id").get<std::string>();
        c.linguistic = j.at("linguistic").get<std::string>();
        c.behavioral = j.at("behavioral").get<std::string>();
        c.profile_id = j.at("profile_id").get<std::string>();
        c.replicate = j.at("replicate").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        log.reference_profile = profile_from_json(j.at("reference_profile"));
        log.simulator_profile = profile_from_json(j.at("simulator_profile"));
        for (const auto& r : j.at("perturbations")) log.perturbations.push_back(perturbation_from_json(r));
      } else if (kind == "turn") {
        ConversationTurn t;
        t.number = j.at("turn").get<std::size_t>();
        t.stage = parse_intake_stage(j.at("stage").get<std::string>());
        t.aid_utterance = j.at("aid").get<std::string>();
        t.status = j.at("status").get<std::string>() == "ok" ? TurnStatus::Ok : TurnStatus::ParseFailed;
        t.failed_attempts = j.at("failed_attempts").get<std::vector<std::string>>();
        t.errors = j.at("errors").get<std::vector<std::string>>();
        if (!j.at("patient").is_null()) t.patient = parse_simulator_turn(j.at("patient").dump());
        for (const auto& m : j.at("intake")) t.intake.push_back(intake_mention_from_json(m));
        c.turns.push_back(std::move(t));
      } else if (kind == "outcome") {
        footer = true;
        c.status = j.at("status").get<std::string>() == "completed" ? ConversationStatus::Completed
                                                                     : ConversationStatus::Aborted;
        c.abort_reason = j.at("abort_reason").get<std::string>();
        if (!j.at("recommendation").is_null())
          c.final_recommendation = j.at("recommendation").get<std::string>();
      } else {
        throw ParseError("unknown record '" + kind + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const SchemaError& e) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) throw ParseError(source + ": missing header record");
  if (!footer) throw ParseError(source + ": missing outcome record");
  return log;
}

}  // namespace patsim
