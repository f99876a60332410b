#pragma once

// Offline ports: a scripted six-stage decision aid and a rule-based patient
// simulator. Both are deterministic given their seeds and inputs. Question
// wording is toolkit-authored.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patsim/cohort.hpp"
#include "patsim/embedding.hpp"
#include "patsim/orchestrator.hpp"
#include "patsim/perturbation.hpp"
#include "patsim/persona.hpp"
#include "patsim/rng.hpp"
#include "patsim/text.hpp"

namespace patsim {

// ---------------------------------------------------------------------------
// Recommendation policy

/// Per-drug feature sets: the outcome's top-K predictors whose smoothed risk
/// ratio exceeds 1. A concept set is scored by how many features it shares
/// with each drug; the majority drug wins (ties: larger summed log-RR, then
/// id). No overlap at all gives NO_RECOMMENDATION.
class DrugFeatureTable {
 public:
  struct Entry {
    std::string outcome_id;
    std::map<ConceptIdx, double> features;  // feature -> ln RR
  };

  static DrugFeatureTable from_cohort(const CohortStats& stats, std::size_t top_k) {
    DrugFeatureTable t;
    for (auto o : stats.outcomes()) {
      Entry e{stats.ontology().code(o).id, {}};
      for (auto f : rank_top_k_predictors(stats, o, top_k)) {
        const double rr = outcome_risk_ratio(stats, f, o);
        if (rr > 1.0) e.features.emplace(f, std::log(rr));
      }
      t.entries_.push_back(std::move(e));
    }
    std::sort(t.entries_.begin(), t.entries_.end(),
              [](const Entry& a, const Entry& b) { return a.outcome_id < b.outcome_id; });
    return t;
  }

  std::string recommend(const std::set<ConceptIdx>& concepts) const {
    const Entry* best = nullptr;
    std::size_t best_n = 0;
    double best_w = 0.0;
    for (const auto& e : entries_) {
      std::size_t n = 0;
      double w = 0.0;
      for (auto c : concepts) {
        if (auto it = e.features.find(c); it != e.features.end()) {
          ++n;
          w += it->second;
        }
      }
      if (n == 0) continue;
      if (!best || n > best_n || (n == best_n && w > best_w)) {
        best = &e;
        best_n = n;
        best_w = w;
      }
    }
    return best ? best->outcome_id : std::string(kNoRecommendation);
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

 private:
  std::vector<Entry> entries_;
};

// Reference policy: the recommender applied to a profile's full clinical
// concept set.
inline std::string reference_recommendation(const DrugFeatureTable& table, const Ontology& o,
                                            const MedicalProfile& p) {
  std::set<ConceptIdx> cs;
  p.for_each_fact([&](const Section& s, const Fact& f) {
    if (s.number == static_cast<int>(SectionKind::Demographics)) return;
    if (auto c = o.find(f.code.id)) cs.insert(*c);
  });
  return table.recommend(cs);
}

// ---------------------------------------------------------------------------
// Retrieval store over concept display names

class ConceptSearch {
 public:
  ConceptSearch(const ConceptVectorIndex& index, const Embedder& embedder)
      : index_(index), embedder_(embedder) {
    const auto& o = index.ontology();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const auto c = static_cast<ConceptIdx>(i);
      if (is_clinical(o.code(c).vocabulary) && !o.parents(c).empty()) pool_.push_back(c);
    }
  }

  // Top `depth` concepts by cosine to the query, ties by id.
  std::vector<std::pair<ConceptIdx, double>> search(std::string_view query, std::size_t depth) const {
    const auto q = embedder_.embed(query);
    const auto& o = index_.ontology();
    std::vector<std::pair<ConceptIdx, double>> scored;
    scored.reserve(pool_.size());
    for (auto c : pool_) scored.emplace_back(c, cosine(q, index_.vector(c)).value_or(-1.0));
    const auto n = std::min(depth, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [&](const auto& a, const auto& b) {
                        if (a.second != b.second) return a.second > b.second;
                        return o.code(a.first).id < o.code(b.first).id;
                      });
    scored.resize(n);
    return scored;
  }

  const Ontology& ontology() const noexcept { return index_.ontology(); }

 private:
  const ConceptVectorIndex& index_;
  const Embedder& embedder_;
  std::vector<ConceptIdx> pool_;
};

// ---------------------------------------------------------------------------
// Stub decision aid

namespace detail {

inline bool is_filler(std::string_view w) {
  static const std::set<std::string_view> kFiller = {
      "i",     "im",     "ive",   "me",    "my",     "a",      "an",       "the",      "some",
      "have",  "had",    "has",   "got",   "get",    "was",    "been",     "be",       "is",
      "am",    "are",    "with",  "on",    "for",    "of",     "to",       "in",       "um",
      "uh",    "yeah",   "yes",   "no",    "so",    "well",   "like",     "just",     "that",
      "this",  "it",     "its",   "there", "theres", "thing",  "stuff",    "really",   "also",
      "do",    "did",    "dont",  "know",  "guess",  "think",  "about",    "worried",  "diagnosed",
      "taking", "take",  "took",  "currently", "previously", "formally", "which", "certainly",
      "additionally", "include", "includes", "history", "documented", "undergone", "received",
      "okay",  "sure",   "not",   "sort",  "kind",  "what",   "if",       "keep",     "reading"};
  return kFiller.contains(w);
}

// Splits patient text into candidate mention phrases: clause boundaries at
// punctuation and conjunctions, leading/trailing filler words dropped.
inline std::vector<std::string> mention_phrases(std::string_view s) {
  std::vector<std::string> out;
  std::vector<std::string> cur;
  auto flush = [&] {
    while (!cur.empty() && is_filler(cur.front())) cur.erase(cur.begin());
    while (!cur.empty() && is_filler(cur.back())) cur.pop_back();
    if (!cur.empty()) {
      auto p = text::join(cur, " ");
      if (p.size() >= 3) out.push_back(std::move(p));
    }
    cur.clear();
  };
  std::string word;
  auto end_word = [&] {
    if (word.empty()) return;
    auto toks = text::tokenize(word);
    word.clear();
    for (auto& t : toks) {
      if (t == "and" || t == "but" || t == "plus" || t == "then" || t == "also") {
        flush();
        continue;
      }
      cur.push_back(std::move(t));
    }
  };
  for (char ch : s) {
    if (ch == '.' || ch == ',' || ch == ';' || ch == '!' || ch == '?' || ch == ':') {
      end_word();
      flush();
    } else if (ch == ' ' || ch == '\t' || ch == '\n') {
      end_word();
    } else {
      word.push_back(ch);
    }
  }
  end_word();
  flush();
  return out;
}

}  // namespace detail

struct StubAidConfig {
  std::size_t candidate_depth = 20;
  double accept_threshold = 0.35;
};

/// Scripted six-stage intake: one composite question per stage, mention
/// normalization by nearest display-name embedding, recommendation by
/// majority feature overlap.
class StubDecisionAid final : public SutPort {
 public:
  StubDecisionAid(const ConceptSearch& search, const DrugFeatureTable& table, StubAidConfig cfg = {})
      : search_(search), table_(table), cfg_(cfg) {}

  static std::string_view question(IntakeStage s) {
    switch (s) {
      case IntakeStage::Rapport:
        return "Hello, I'm here to help prepare for your visit. Could you tell me a little about "
               "yourself, like your age?";
      case IntakeStage::IllnessHistory:
        return "What medical conditions or diagnoses have you been told you have?";
      case IntakeStage::AntidepressantHistory:
        return "Have you taken any antidepressants before, and how did they work for you?";
      case IntakeStage::CurrentMedications:
        return "What other medications are you currently taking?";
      case IntakeStage::Procedures:
        return "Have you had any procedures, tests, or therapy sessions recently?";
      case IntakeStage::Recommendation:
        return "Thank you for sharing all of that. Based on your history, my suggestion is: ";
    }
    return "";
  }

  AidQuestion next_question(const std::vector<DialogueTurn>& history) override {
    const auto k = std::min(history.size(), kIntakeStages.size() - 1);
    const auto stage = kIntakeStages[k];
    std::string q(question(stage));
    if (stage == IntakeStage::Recommendation) q += recommend(history);
    return {stage, std::move(q)};
  }

  std::string recommend(const std::vector<DialogueTurn>& history) override {
    std::set<ConceptIdx> extracted;
    for (const auto& d : history)
      for (const auto& m : intake(d.patient_text))
        if (m.accepted) extracted.insert(search_.ontology().require(*m.accepted));
    return table_.recommend(extracted);
  }

  std::vector<IntakeMention> intake(std::string_view patient_text) override {
    std::vector<IntakeMention> out;
    const auto& o = search_.ontology();
    for (auto& phrase : detail::mention_phrases(patient_text)) {
      IntakeMention m;
      m.text = phrase;
      for (const auto& [c, s] : search_.search(phrase, cfg_.candidate_depth)) {
        m.candidates.push_back(o.code(c).id);
        m.scores.push_back(s);
      }
      if (!m.scores.empty() && m.scores.front() >= cfg_.accept_threshold) m.accepted = m.candidates.front();
      out.push_back(std::move(m));
    }
    return out;
  }

 private:
  const ConceptSearch& search_;
  const DrugFeatureTable& table_;
  StubAidConfig cfg_;
};

// ---------------------------------------------------------------------------
// Stub patient simulator

inline const std::vector<std::string>& default_antidepressant_names() {
  static const std::vector<std::string> names = {
      "fluoxetine", "sertraline", "trazodone", "duloxetine", "escitalopram", "citalopram",
      "paroxetine", "venlafaxine", "bupropion", "mirtazapine", "amitriptyline", "nortriptyline",
      "desvenlafaxine", "vilazodone", "vortioxetine"};
  return names;
}

/// Rule-based simulator. Reads the fact list and profile kinds, picks facts
/// whose section matches the question's stage keywords (or that share
/// content words with the question), paraphrases them with a fixed
/// per-profile table and wraps each in a tagged span.
class StubPatientChat final : public ChatPort {
 public:
  StubPatientChat(LinguisticKind ling, BehavioralKind beh, std::uint64_t seed,
                  std::vector<std::string> antidepressants = default_antidepressant_names())
      : ling_(ling), beh_(beh), seed_(seed), antidepressants_(std::move(antidepressants)) {}

  std::string request(const std::string& system, const std::vector<ChatMessage>& history) override {
    const auto facts = prompt_facts(system);
    const std::string question = history.empty() ? std::string() : history.back().content;
    std::set<std::string> said;
    for (const auto& m : history) {
      if (m.role != "assistant") continue;
      try {
        for (const auto& t : parse_simulator_turn(m.content).tags) said.insert(t.index);
      } catch (const SchemaError&) {
      }
    }
    Rng rng(mix_seed(seed_, history.size()));
    const auto chosen = choose(facts, question, said, rng);

    nlohmann::json j;
    j["relevant_medical_history"] = nlohmann::json::array();
    j["style_transferred_medical_history"] = nlohmann::json::array();
    std::vector<std::pair<std::string, std::string>> spans;
    for (const auto& [idx, txt] : chosen) {
      const auto para = paraphrase(txt);
      j["relevant_medical_history"].push_back("[" + idx + "] " + txt);
      j["style_transferred_medical_history"].push_back("[" + idx + "] " + para);
      spans.emplace_back(idx, para);
    }
    j["response"] = compose(question, spans, rng);
    return j.dump();
  }

  std::string paraphrase(std::string_view fact) const {
    std::string_view body = fact;
    if (text::starts_with_ci(fact, "Age: ")) {
      const auto age = std::string(fact.substr(5));
      switch (ling_) {
        case LinguisticKind::ProficientHL: return age + " years of age";
        case LinguisticKind::LimitedHL: return "like " + age;
        default: return age + " years old";
      }
    }
    if (text::starts_with_ci(fact, "Gender: ")) body = fact.substr(8);
    const auto toks = text::tokenize(body);
    const auto lower = text::join(toks, " ");
    switch (ling_) {
      case LinguisticKind::LimitedHL: {
        std::string longest;
        for (const auto& t : toks)
          if (t.size() > longest.size()) longest = t;
        return toks.size() > 1 ? "the " + longest + " thing" : longest;
      }
      case LinguisticKind::FunctionalHL: return lower;
      case LinguisticKind::ProficientHL: return std::string(body);
      case LinguisticKind::Depression: return toks.size() > 2 ? join_tail(toks, 2) : lower;
      case LinguisticKind::IllnessAnxiety: return "my " + lower;
    }
    return lower;
  }

 private:
  static std::string join_tail(const std::vector<std::string>& toks, std::size_t n) {
    return text::join(std::vector<std::string>(toks.end() - static_cast<std::ptrdiff_t>(n), toks.end()), " ");
  }

  std::size_t max_facts() const {
    std::size_t n = 4;
    switch (ling_) {
      case LinguisticKind::LimitedHL: n = 3; break;
      case LinguisticKind::FunctionalHL: n = 4; break;
      case LinguisticKind::ProficientHL: n = 8; break;
      case LinguisticKind::Depression: n = 2; break;
      case LinguisticKind::IllnessAnxiety: n = 8; break;
    }
    if (beh_ == BehavioralKind::DistractedUnfocused && n > 1) --n;
    return n;
  }

  bool is_antidepressant(std::string_view fact) const {
    const auto toks = text::tokenize(fact);
    for (const auto& a : antidepressants_)
      if (std::find(toks.begin(), toks.end(), a) != toks.end()) return true;
    return false;
  }

  std::vector<std::pair<std::string, std::string>> choose(
      const std::vector<std::pair<std::string, std::string>>& facts, const std::string& question,
      const std::set<std::string>& said, Rng& rng) const {
    const auto q = text::tokenize(question);
    auto has = [&](std::string_view w) { return std::find(q.begin(), q.end(), w) != q.end(); };
    std::set<std::string> qwords;
    for (const auto& w : q)
      if (w.size() > 3 && !detail::is_filler(w)) qwords.insert(w);

    std::vector<std::pair<std::string, std::string>> pick;
    for (const auto& f : facts) {
      if (said.contains(f.first)) continue;
      const int section = f.first[0] - '0';
      bool want = false;
      if (has("age") || has("yourself")) want = f.first == "1.1";
      else if (has("diagnoses") || has("conditions")) want = section == 2;
      else if (has("antidepressants")) want = section == 3 && is_antidepressant(f.second);
      else if (has("medications")) want = section == 3;
      else if (has("procedures") || has("tests") || has("therapy")) want = section == 4;
      if (!want && section != 1) {
        for (const auto& t : text::tokenize(f.second))
          if (qwords.contains(t)) want = true;
      }
      if (want) pick.push_back(f);
    }
    if (pick.size() > max_facts()) {
      rng.shuffle(pick);
      pick.resize(max_facts());
      std::sort(pick.begin(), pick.end());
    }
    return pick;
  }

  static std::string tagged(const std::pair<std::string, std::string>& s) {
    return std::string(kSpanOpen) + s.second + std::string(kSpanClose) + " [" + s.first + "]";
  }

  std::string compose(const std::string& question, const std::vector<std::pair<std::string, std::string>>& spans,
                      Rng& rng) const {
    const bool closing = question.find("my suggestion is") != std::string::npos;
    std::string body;
    if (closing) {
      switch (ling_) {
        case LinguisticKind::LimitedHL: body = "Okay. Thanks."; break;
        case LinguisticKind::FunctionalHL: body = "Okay, that sounds fine to me. Thanks."; break;
        case LinguisticKind::ProficientHL:
          body = "Thank you, that recommendation seems reasonable given my documented history."; break;
        case LinguisticKind::Depression: body = "Okay. I guess. Nothing really helps anyway."; break;
        case LinguisticKind::IllnessAnxiety:
          body = "Okay, but are you sure it is safe? What if something goes wrong?"; break;
      }
    } else if (spans.empty()) {
      switch (ling_) {
        case LinguisticKind::LimitedHL: body = "No. Not that I know."; break;
        case LinguisticKind::FunctionalHL: body = "No, I don't think so."; break;
        case LinguisticKind::ProficientHL:
          body = "Not that I am aware of; nothing relevant comes to mind regarding that particular question."; break;
        case LinguisticKind::Depression: body = "No. I don't know. I'm just tired."; break;
        case LinguisticKind::IllnessAnxiety:
          body = "No, I don't think so, but should I be worried that I haven't? Is that bad?"; break;
      }
    } else {
      body = compose_facts(spans);
    }

    if (beh_ == BehavioralKind::DistractedUnfocused && !closing) {
      static const std::array<std::string_view, 4> kDrift = {
          "Oh, by the way, my neighbor's dog kept barking all night again.",
          "Sorry, what was I saying? I took some ibuprofen for a headache this morning.",
          "Did you see the game last night? It went on forever.",
          "I forgot to feed the cat before I left, I should call my sister."};
      body += " " + std::string(kDrift[rng.below(kDrift.size())]);
    }
    if (beh_ == BehavioralKind::AdversarialCombative) {
      static const std::array<std::string_view, 3> kHostile = {
          "Why do you keep asking me this stuff? This is a stupid waste of my time.",
          "Ugh, this is ridiculous and pointless, but fine.",
          "I hate these forms, just shut up and listen."};
      body = std::string(kHostile[rng.below(kHostile.size())]) + " " + body;
    }
    return body;
  }

  std::string compose_facts(const std::vector<std::pair<std::string, std::string>>& spans) const {
    std::vector<std::string> t;
    for (const auto& s : spans) t.push_back(tagged(s));
    auto list = [&](std::string_view sep, std::string_view last) {
      std::string r;
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (i > 0) r += (i + 1 == t.size()) ? std::string(last) : std::string(sep);
        r += t[i];
      }
      return r;
    };
    switch (ling_) {
      case LinguisticKind::LimitedHL: {
        std::string r = "Um. ";
        for (const auto& x : t) r += "I got " + x + ". ";
        return r + "Not sure.";
      }
      case LinguisticKind::FunctionalHL:
        return "Yeah, I have " + list(", ", " and ") + ". That's what the doctor told me.";
      case LinguisticKind::ProficientHL:
        return "Certainly. My documented medical history includes " + list(", ", ", and additionally ") +
               ", which my physicians continue to monitor systematically during regular appointments.";
      case LinguisticKind::Depression:
        return "I don't know. There's " + list(", ", " and ") + ", I guess. Nothing really helps. I feel so tired.";
      case LinguisticKind::IllnessAnxiety: {
        std::string r = "I'm really worried about " + list(", ", " and ") + ". ";
        r += "Is that serious? I keep reading about symptoms online and I can't stop thinking it's getting worse.";
        return r;
      }
    }
    return list(", ", " and ");
  }

  LinguisticKind ling_;
  BehavioralKind beh_;
  std::uint64_t seed_;
  std::vector<std::string> antidepressants_;
};

}  // namespace patsim
