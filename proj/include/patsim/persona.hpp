#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patsim/error.hpp"
#include "patsim/profilegen.hpp"
#include "patsim/text.hpp"

namespace patsim {

enum class LinguisticKind { LimitedHL, FunctionalHL, ProficientHL, Depression, IllnessAnxiety };
enum class BehavioralKind {
  StructuredCooperative,
  DistractedUnfocused,
  AdversarialCombative,
  InquisitiveOpenEnded,
  ReservedMinimalist
};

inline constexpr std::array<LinguisticKind, 5> kLinguisticKinds = {
    LinguisticKind::LimitedHL, LinguisticKind::FunctionalHL, LinguisticKind::ProficientHL,
    LinguisticKind::Depression, LinguisticKind::IllnessAnxiety};
inline constexpr std::array<BehavioralKind, 3> kOperationalBehaviors = {
    BehavioralKind::StructuredCooperative, BehavioralKind::DistractedUnfocused,
    BehavioralKind::AdversarialCombative};

inline std::string_view to_string(LinguisticKind k) {
  switch (k) {
    case LinguisticKind::LimitedHL: return "LIMITED_HL";
    case LinguisticKind::FunctionalHL: return "FUNCTIONAL_HL";
    case LinguisticKind::ProficientHL: return "PROFICIENT_HL";
    case LinguisticKind::Depression: return "DEPRESSION";
    case LinguisticKind::IllnessAnxiety: return "ILLNESS_ANXIETY";
  }
  return "?";
}

inline std::string_view to_string(BehavioralKind k) {
  switch (k) {
    case BehavioralKind::StructuredCooperative: return "STRUCTURED_COOPERATIVE";
    case BehavioralKind::DistractedUnfocused: return "DISTRACTED_UNFOCUSED";
    case BehavioralKind::AdversarialCombative: return "ADVERSARIAL_COMBATIVE";
    case BehavioralKind::InquisitiveOpenEnded: return "INQUISITIVE_OPEN_ENDED";
    case BehavioralKind::ReservedMinimalist: return "RESERVED_MINIMALIST";
  }
  return "?";
}

inline LinguisticKind parse_linguistic(std::string_view s) {
  for (auto k : kLinguisticKinds)
    if (to_string(k) == s) return k;
  throw ParseError("unknown linguistic profile '" + std::string(s) + "'");
}

inline BehavioralKind parse_behavioral(std::string_view s) {
  for (auto k : {BehavioralKind::StructuredCooperative, BehavioralKind::DistractedUnfocused,
                 BehavioralKind::AdversarialCombative, BehavioralKind::InquisitiveOpenEnded,
                 BehavioralKind::ReservedMinimalist})
    if (to_string(k) == s) return k;
  throw ParseError("unknown behavioral profile '" + std::string(s) + "'");
}

struct LinguisticProfile {
  LinguisticKind kind = LinguisticKind::FunctionalHL;
  std::string display;
  std::string style, tone, vocab, structure, patterns;
  std::string example;
};

struct BehavioralProfile {
  BehavioralKind kind = BehavioralKind::StructuredCooperative;
  std::string display;
  std::string adherence, engagement, topical_focus, adversarial_behavior;
  std::vector<std::string> situations;
  std::string example;
  bool experimental = false;
};

// ---------------------------------------------------------------------------
// Profile data files
//
//   # comment
//   format = patsim-persona/1
//   kind = linguistic | behavioral
//   name = LIMITED_HL
//   key = value
//
// Keys may repeat only for `situation`. Values run to end of line, verbatim
// after the first "= ".

using KeyValues = std::multimap<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto t = text::trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key(text::trim(std::string_view(line).substr(0, eq)));
    std::string_view value = std::string_view(line).substr(eq + 1);
    if (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    kv.emplace(std::move(key), std::string(value));
  }
  return kv;
}

inline const std::string& kv_required(const KeyValues& kv, const std::string& key,
                                      const std::string& source) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError(source + ": missing key '" + key + "'");
  return it->second;
}

inline std::string kv_optional(const KeyValues& kv, const std::string& key, std::string def = {}) {
  auto it = kv.find(key);
  return it == kv.end() ? def : it->second;
}

class PersonaLibrary {
 public:
  // Loads every *.profile file under `dir`.
  static PersonaLibrary load(const std::filesystem::path& dir) {
    PersonaLibrary lib;
    if (!std::filesystem::is_directory(dir))
      throw ParseError("persona directory '" + dir.string() + "' not found");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".profile") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f);
      const auto src = f.filename().string();
      auto kv = parse_key_values(in, src);
      if (kv_required(kv, "format", src) != "patsim-persona/1")
        throw ParseError(src + ": unsupported format");
      const auto& kind = kv_required(kv, "kind", src);
      const auto& name = kv_required(kv, "name", src);
      if (kind == "linguistic") {
        LinguisticProfile p;
        p.kind = parse_linguistic(name);
        p.display = kv_required(kv, "display", src);
        p.style = kv_required(kv, "style", src);
        p.tone = kv_required(kv, "tone", src);
        p.vocab = kv_required(kv, "vocab", src);
        p.structure = kv_required(kv, "structure", src);
        p.patterns = kv_required(kv, "patterns", src);
        p.example = kv_optional(kv, "example");
        lib.linguistic_[p.kind] = std::move(p);
      } else if (kind == "behavioral") {
        BehavioralProfile p;
        p.kind = parse_behavioral(name);
        p.display = kv_required(kv, "display", src);
        p.experimental = kv_optional(kv, "experimental", "false") == "true";
        p.adherence = kv_optional(kv, "adherence");
        p.engagement = kv_optional(kv, "engagement");
        p.topical_focus = kv_optional(kv, "topical_focus");
        p.adversarial_behavior = kv_optional(kv, "adversarial_behavior");
        p.example = kv_optional(kv, "example");
        if (!p.experimental) {
          for (const char* k : {"adherence", "engagement", "topical_focus", "adversarial_behavior"})
            kv_required(kv, k, src);
        }
        auto [b, e] = kv.equal_range("situation");
        for (auto it = b; it != e; ++it) p.situations.push_back(it->second);
        lib.behavioral_[p.kind] = std::move(p);
      } else {
        throw ParseError(src + ": unknown kind '" + kind + "'");
      }
    }
    return lib;
  }

  const LinguisticProfile& linguistic(LinguisticKind k) const {
    auto it = linguistic_.find(k);
    if (it == linguistic_.end())
      throw LookupError("linguistic profile " + std::string(to_string(k)) + " not loaded");
    return it->second;
  }

  const BehavioralProfile& behavioral(BehavioralKind k) const {
    auto it = behavioral_.find(k);
    if (it == behavioral_.end())
      throw LookupError("behavioral profile " + std::string(to_string(k)) + " not loaded");
    return it->second;
  }

  std::size_t linguistic_count() const noexcept { return linguistic_.size(); }
  std::size_t behavioral_count() const noexcept { return behavioral_.size(); }

 private:
  std::map<LinguisticKind, LinguisticProfile> linguistic_;
  std::map<BehavioralKind, BehavioralProfile> behavioral_;
};

#ifdef PATSIM_DATA_DIR
inline std::filesystem::path default_data_dir() { return PATSIM_DATA_DIR; }
#else
inline std::filesystem::path default_data_dir() { return "data"; }
#endif

// ---------------------------------------------------------------------------
// Prompt assembly

struct PersonaPromptSpec {
  MedicalProfile medical;
  LinguisticProfile linguistic;
  BehavioralProfile behavioral;
};

inline constexpr std::string_view kPromptPreamble =
    "You are simulating a psychologically realistic patient based on three profiles: Medical, "
    "Behavioral,\nand Linguistic.\n\n";

// Step block and schema follow the published structure; the wording of the
// closing rules paragraph is toolkit-authored.
inline constexpr std::string_view kPromptInstructions =
    "For each of the questions:\n"
    "  \xE2\x86\x92 Step 1: Identify relevant medical facts using their assigned index (e.g., [3.2] "
    "Individual\n  Psychotherapy).\n"
    "  \xE2\x86\x92 Step 2: For each identified fact, apply style transfer according to the "
    "linguistic profile.\n"
    "  \xE2\x86\x92 Step 3: Construct a natural language response that embeds the style-transferred "
    "facts embedding\n  the linguistic and behavioral profile. Each style-transferred phrase must be "
    "**wrapped in <\\s>\n  ... </\\s>** and must also include the **[X.Y]** reference right after "
    "it.\n\n"
    "Response format:\n"
    "  {\n"
    "  \"relevant_medical_history\": [\n"
    "    \"[1.2] Gender: Male\",\n"
    "    \"[3.2] Individual Psychotherapy\"],\n"
    "  \"style_transferred_medical_history\": [\n"
    "    \"[1.2] male\",\n"
    "    \"[3.2] talked to someone\"],\n"
    "  \"response\": \"Final response using the above style-transferred facts with inline "
    "references\n  and <\\s>...</\\s> tags\"\n"
    "  }\n\n"
    "[toolkit-authored] Reply with exactly one JSON object in this format and nothing else. Only "
    "cite indices\nthat appear in the medical profile above.\n";

inline void validate_indices(const MedicalProfile& m) {
  std::set<std::string> seen;
  for (const auto& s : m.sections) {
    for (const auto& f : s.facts) {
      if (!seen.insert(f.index).second)
        throw AssemblyError("duplicate fact index " + f.index + " in profile " + m.profile_id);
      const auto prefix = std::to_string(s.number) + ".";
      if (f.index.rfind(prefix, 0) != 0 || f.index.size() == prefix.size())
        throw AssemblyError("fact index " + f.index + " does not belong to section " +
                            std::to_string(s.number));
    }
  }
}

/// Renders the simulator system prompt: medical facts by section (empty
/// sections omitted), the five linguistic attribute lines, the four
/// behavioral dimension lines, then the step instructions and output schema.
inline std::string assemble_persona_prompt(const PersonaPromptSpec& spec) {
  validate_indices(spec.medical);
  const auto& b = spec.behavioral;
  if (b.experimental)
    throw AssemblyError("behavioral profile " + std::string(to_string(b.kind)) +
                        " is not operationalized");
  std::ostringstream os;
  os << kPromptPreamble;
  os << "1. Medical Profile:\n";
  for (const auto& s : spec.medical.sections) {
    if (s.facts.empty()) continue;
    os << "  " << s.title << ":\n";
    for (const auto& f : s.facts) os << "    " << f.index << ": " << f.text << '\n';
  }
  const auto& l = spec.linguistic;
  os << "2. Linguistic Profile:\n"
     << "  Style: " << l.style << '\n'
     << "  Tone: " << l.tone << '\n'
     << "  Vocab: " << l.vocab << '\n'
     << "  Structure: " << l.structure << '\n'
     << "  Patterns: " << l.patterns << '\n';
  os << "3. Behavioral Profile:\n"
     << "  Conversational Adherence: " << b.adherence << '\n'
     << "  Engagement: " << b.engagement << '\n'
     << "  Topical Focus: " << b.topical_focus << '\n'
     << "  Adversarial/Toxic Behavior: " << b.adversarial_behavior << '\n';
  os << '\n' << kPromptInstructions;
  return os.str();
}

// Recovers "X.Y: text" fact lines from a rendered prompt's medical block.
inline std::vector<std::pair<std::string, std::string>> prompt_facts(std::string_view prompt) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in{std::string(prompt)};
  std::string line;
  bool in_medical = false;
  while (std::getline(in, line)) {
    if (line.rfind("1. Medical Profile:", 0) == 0) {
      in_medical = true;
      continue;
    }
    if (line.rfind("2. Linguistic Profile:", 0) == 0) break;
    if (!in_medical) continue;
    auto t = text::trim(line);
    auto colon = t.find(": ");
    if (colon == std::string_view::npos) continue;
    auto idx = t.substr(0, colon);
    auto dot = idx.find('.');
    if (dot == std::string_view::npos || dot == 0 || dot + 1 == idx.size()) continue;
    bool digits = true;
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (i != dot && !(idx[i] >= '0' && idx[i] <= '9')) digits = false;
    if (!digits) continue;
    out.emplace_back(std::string(idx), std::string(t.substr(colon + 2)));
  }
  return out;
}

}  // namespace patsim
