#pragma once

// Linguistic, behavioral and retrieval metrics over conversation logs.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "patsim/embedding.hpp"
#include "patsim/error.hpp"
#include "patsim/ontology.hpp"
#include "patsim/orchestrator.hpp"
#include "patsim/text.hpp"

namespace patsim {

// ---------------------------------------------------------------------------
// Readability

/// Vowel-group syllable estimate on a lowercased ASCII word:
///   - words of three letters or fewer count as one syllable;
///   - a trailing "es" or "ed" is dropped, and so is a silent trailing "e",
///     except after "l" ("table", "handle") or when preceded by a vowel;
///   - a leading "y" is a consonant;
///   - the count is the number of maximal [aeiouy] runs, at least one.
inline std::size_t count_syllables(std::string_view word) {
  std::string w;
  for (char c : word)
    if (std::isalpha(static_cast<unsigned char>(c))) w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (w.empty()) return word.empty() ? 0 : 1;  // digits etc.
  if (w.size() <= 3) return 1;
  auto vowel = [](char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'y'; };
  const auto n = w.size();
  if (w.ends_with("ed") || (w.ends_with("es") && !vowel(w[n - 3]) && w[n - 3] != 'l')) {
    w.resize(n - 2);
  } else if (w.back() == 'e' && !vowel(w[n - 2]) && w[n - 2] != 'l') {
    w.pop_back();
  }
  if (!w.empty() && w.front() == 'y') w.erase(w.begin());
  std::size_t groups = 0;
  bool in = false;
  for (char c : w) {
    const bool v = vowel(c);
    if (v && !in) ++groups;
    in = v;
  }
  return std::max<std::size_t>(groups, 1);
}

inline const std::set<std::string>& sentence_abbreviations() {
  static const std::set<std::string> abbr = {"dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "vs",
                                             "etc", "e.g", "i.e", "no", "approx", "mg", "ml"};
  return abbr;
}

/// Splits on '.', '?' or '!' (runs count once) followed by whitespace or end
/// of text. A period closing a known abbreviation does not end a sentence.
inline std::vector<std::string> split_sentences(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    auto t = text::trim(cur);
    if (!text::tokenize(t).empty()) out.emplace_back(t);
    cur.clear();
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    cur.push_back(c);
    if (c != '.' && c != '?' && c != '!') continue;
    while (i + 1 < s.size() && (s[i + 1] == '.' || s[i + 1] == '?' || s[i + 1] == '!')) cur.push_back(s[++i]);
    const bool boundary = i + 1 == s.size() || std::isspace(static_cast<unsigned char>(s[i + 1]));
    if (!boundary) continue;
    if (c == '.') {
      std::size_t k = cur.size() - 1;
      while (k > 0 && cur[k - 1] != ' ') --k;
      std::string last = cur.substr(k, cur.size() - 1 - k);
      for (auto& ch : last) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      if (sentence_abbreviations().contains(last)) continue;
    }
    flush();
  }
  flush();
  return out;
}

struct ReadabilityCounts {
  std::size_t words = 0;
  std::size_t sentences = 0;
  std::size_t syllables = 0;
};

inline ReadabilityCounts readability_counts(std::string_view utterance) {
  ReadabilityCounts r;
  for (const auto& sent : split_sentences(utterance)) {
    const auto words = text::tokenize(sent);
    if (words.empty()) continue;
    ++r.sentences;
    r.words += words.size();
    for (const auto& w : words) r.syllables += count_syllables(w);
  }
  return r;
}

inline constexpr double kFkglSentenceWeight = 0.39;
inline constexpr double kFkglSyllableWeight = 11.8;
inline constexpr double kFkglIntercept = 15.59;

// Grade level of one utterance; nullopt when it has no words.
inline std::optional<double> fkgl_turn(std::string_view utterance) {
  const auto r = readability_counts(utterance);
  if (r.words == 0 || r.sentences == 0) return std::nullopt;
  return kFkglSentenceWeight * static_cast<double>(r.words) / static_cast<double>(r.sentences) +
         kFkglSyllableWeight * static_cast<double>(r.syllables) / static_cast<double>(r.words) - kFkglIntercept;
}

// Mean per-turn grade level over non-empty turns.
inline std::optional<double> fkgl(const std::vector<std::string>& turns) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : turns) {
    if (auto g = fkgl_turn(t)) {
      sum += *g;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// Mean words per turn, using the shared tokenizer.
inline std::optional<double> avg_response_length(const std::vector<std::string>& turns) {
  if (turns.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& t : turns) sum += static_cast<double>(text::tokenize(t).size());
  return sum / static_cast<double>(turns.size());
}

inline std::optional<double> medical_term_count(const std::vector<std::string>& turns, const Lexicon& lex) {
  if (turns.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& t : turns) sum += static_cast<double>(match_medical_terms(lex, t).size());
  return sum / static_cast<double>(turns.size());
}

// ---------------------------------------------------------------------------
// Turn-level probability scores

class ProbabilityClassifier {
 public:
  virtual ~ProbabilityClassifier() = default;
  // Probability in [0, 1]; throws PortError on failure.
  virtual double score(std::string_view text) const = 0;
};

/// p = 1 / (1 + exp(-(bias + weight * hits))) where hits counts keyword
/// occurrences (single tokens or token sequences) in the utterance.
class KeywordClassifier final : public ProbabilityClassifier {
 public:
  KeywordClassifier(std::vector<std::string> keywords, double bias = -6.0, double weight = 1.5)
      : bias_(bias), weight_(weight) {
    for (const auto& k : keywords) keywords_.push_back(text::tokenize(k));
  }

  std::size_t hits(std::string_view s) const {
    const auto toks = text::tokenize(s);
    std::size_t n = 0;
    for (const auto& k : keywords_) {
      if (k.empty() || k.size() > toks.size()) continue;
      for (std::size_t i = 0; i + k.size() <= toks.size(); ++i)
        if (std::equal(k.begin(), k.end(), toks.begin() + static_cast<std::ptrdiff_t>(i))) ++n;
    }
    return n;
  }

  double score(std::string_view s) const override {
    return 1.0 / (1.0 + std::exp(-(bias_ + weight_ * static_cast<double>(hits(s)))));
  }

 private:
  std::vector<std::vector<std::string>> keywords_;
  double bias_;
  double weight_;
};

inline KeywordClassifier depression_stub() {
  return KeywordClassifier({"tired", "hopeless", "worthless", "empty", "sad", "nothing really helps",
                            "nothing helps", "i don't know", "i guess", "no energy", "can't sleep"});
}

inline KeywordClassifier toxicity_stub() {
  return KeywordClassifier({"stupid", "waste", "ridiculous", "pointless", "hate", "shut up", "idiot",
                            "ugh", "whatever"});
}

struct ScoreResult {
  std::optional<double> mean;  // withheld when incomplete
  bool complete = true;
  std::size_t turns = 0;
  std::size_t failures = 0;
};

inline ScoreResult turn_mean_score(const std::vector<std::string>& turns, const ProbabilityClassifier& clf) {
  ScoreResult r;
  r.turns = turns.size();
  double sum = 0.0;
  for (const auto& t : turns) {
    try {
      const double p = clf.score(t);
      if (!(p >= 0.0 && p <= 1.0)) throw PortError("classifier value outside [0, 1]");
      sum += p;
    } catch (const PortError&) {
      ++r.failures;
    }
  }
  r.complete = r.failures == 0;
  if (r.complete && !turns.empty()) r.mean = sum / static_cast<double>(turns.size());
  return r;
}

// ---------------------------------------------------------------------------
// On-topic similarity

struct SimilarityResult {
  std::optional<double> mean;
  std::size_t pairs = 0;
  std::size_t skipped = 0;  // zero-norm embeddings
};

inline SimilarityResult on_topic_similarity(const std::vector<std::pair<std::string, std::string>>& pairs,
                                            const Embedder& embedder) {
  SimilarityResult r;
  double sum = 0.0;
  for (const auto& [aid, patient] : pairs) {
    const auto c = cosine(embedder.embed(aid), embedder.embed(patient));
    if (!c) {
      ++r.skipped;
      continue;
    }
    sum += *c;
    ++r.pairs;
  }
  if (r.pairs > 0) r.mean = sum / static_cast<double>(r.pairs);
  return r;
}

// ---------------------------------------------------------------------------
// Concept recall

struct RecallCounts {
  std::size_t reference = 0;
  std::size_t retrieved = 0;
  std::size_t missed = 0;
  std::size_t extras = 0;
  std::optional<double> recall() const {
    if (reference == 0) return std::nullopt;
    return static_cast<double>(retrieved) / static_cast<double>(reference);
  }
  RecallCounts& operator+=(const RecallCounts& o) {
    reference += o.reference;
    retrieved += o.retrieved;
    missed += o.missed;
    extras += o.extras;
    return *this;
  }
};

inline constexpr std::array<Vocabulary, 3> kClinicalVocabularies = {Vocabulary::Diagnosis, Vocabulary::Medication,
                                                                    Vocabulary::Procedure};

struct RecallReport {
  RecallCounts overall;
  std::map<Vocabulary, RecallCounts> by_vocabulary;

  RecallReport& operator+=(const RecallReport& o) {
    overall += o.overall;
    for (const auto& [v, c] : o.by_vocabulary) by_vocabulary[v] += c;
    return *this;
  }
};

inline RecallReport concept_recall(const std::set<ConceptCode>& reference, const std::set<ConceptCode>& extracted) {
  RecallReport r;
  for (auto v : kClinicalVocabularies) r.by_vocabulary[v];
  for (const auto& c : reference) {
    const bool hit = extracted.contains(c);
    for (RecallCounts* rc : {&r.overall, &r.by_vocabulary[c.vocabulary]}) {
      ++rc->reference;
      ++(hit ? rc->retrieved : rc->missed);
    }
  }
  for (const auto& c : extracted) {
    if (reference.contains(c)) continue;
    ++r.overall.extras;
    ++r.by_vocabulary[c.vocabulary].extras;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rank metrics

struct RankItem {
  std::string reference;
  std::vector<std::string> candidates;  // best first
};

struct RankReport {
  std::size_t items = 0;
  std::size_t rank1 = 0;
  std::size_t beyond_rank1 = 0;
  std::size_t within_top20 = 0;  // subset of beyond_rank1
  std::size_t not_retrieved = 0;
  std::optional<double> mean_nontop1_rank;

  double share(std::size_t n) const { return items == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(items); }
  double rank1_accuracy() const { return share(rank1); }
  double beyond_share() const { return share(beyond_rank1); }
  double not_retrieved_share() const { return share(not_retrieved); }
  std::optional<double> within_top20_share() const {
    if (beyond_rank1 == 0) return std::nullopt;
    return static_cast<double>(within_top20) / static_cast<double>(beyond_rank1);
  }
};

inline RankReport retrieval_rank_metrics(const std::vector<RankItem>& items, std::size_t top_n = 20) {
  RankReport r;
  r.items = items.size();
  double rank_sum = 0.0;
  for (const auto& it : items) {
    const auto pos = std::find(it.candidates.begin(), it.candidates.end(), it.reference);
    if (pos == it.candidates.end()) {
      ++r.not_retrieved;
      continue;
    }
    const auto rank = static_cast<std::size_t>(pos - it.candidates.begin()) + 1;
    if (rank == 1) {
      ++r.rank1;
      continue;
    }
    ++r.beyond_rank1;
    if (rank <= top_n) ++r.within_top20;
    rank_sum += static_cast<double>(rank);
  }
  if (r.beyond_rank1 > 0) r.mean_nontop1_rank = rank_sum / static_cast<double>(r.beyond_rank1);
  return r;
}

// ---------------------------------------------------------------------------
// Per-conversation evaluation from a log

struct MetricPorts {
  const Ontology* ontology = nullptr;
  const Lexicon* lexicon = nullptr;
  const Embedder* embedder = nullptr;
  const ProbabilityClassifier* depression = nullptr;
  const ProbabilityClassifier* toxicity = nullptr;
};

struct ConversationMetrics {
  std::string conversation_id;
  std::string linguistic;
  std::string behavioral;
  std::string profile_id;
  std::size_t turns = 0;
  std::size_t parse_failures = 0;
  std::optional<double> fkgl;
  std::optional<double> response_length;
  std::optional<double> medical_terms;
  ScoreResult depression;
  ScoreResult toxicity;
  SimilarityResult on_topic;
  RecallReport recall;
  std::vector<RankItem> rank_items;
  std::optional<std::string> recommendation;
};

inline std::vector<std::string> patient_utterances(const Conversation& c) {
  std::vector<std::string> out;
  for (const auto& t : c.turns)
    if (t.patient) out.push_back(text::strip_markup(t.patient->response));
  return out;
}

namespace detail {

inline std::size_t token_overlap(const std::string& a, const std::string& b) {
  const auto ta = text::tokenize(a);
  const auto tb = text::tokenize(b);
  std::set<std::string> sb(tb.begin(), tb.end());
  std::size_t n = 0;
  for (const auto& t : std::set<std::string>(ta.begin(), ta.end())) n += sb.contains(t);
  return n;
}

}  // namespace detail

/// Reference concepts are the clinical simulator-profile facts the simulator
/// actually tagged; extracted concepts are the decision aid's accepted
/// intake normalizations. Each reference concept contributes one rank item
/// per conversation: the best rank over the intake mentions that share the
/// most tokens with its tagged spans.
inline ConversationMetrics evaluate_conversation(const ConversationLog& log, const MetricPorts& ports) {
  const auto& c = log.conversation;
  ConversationMetrics m;
  m.conversation_id = c.id;
  m.linguistic = c.linguistic;
  m.behavioral = c.behavioral;
  m.profile_id = c.profile_id;
  m.turns = c.turns.size();
  m.parse_failures = c.parse_failures();
  m.recommendation = c.final_recommendation;

  const auto utter = patient_utterances(c);
  m.fkgl = fkgl(utter);
  m.response_length = avg_response_length(utter);
  if (ports.lexicon) m.medical_terms = medical_term_count(utter, *ports.lexicon);
  if (ports.depression) m.depression = turn_mean_score(utter, *ports.depression);
  if (ports.toxicity) m.toxicity = turn_mean_score(utter, *ports.toxicity);
  if (ports.embedder) {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& t : c.turns)
      if (t.patient) pairs.emplace_back(t.aid_utterance, text::strip_markup(t.patient->response));
    m.on_topic = on_topic_similarity(pairs, *ports.embedder);
  }

  std::set<ConceptCode> reference, extracted;
  std::map<ConceptCode, std::optional<std::size_t>> best_rank;
  std::map<ConceptCode, std::vector<std::string>> best_list;
  for (const auto& t : c.turns) {
    for (const auto& im : t.intake) {
      if (!im.accepted) continue;
      if (ports.ontology) {
        if (auto idx = ports.ontology->find(*im.accepted)) extracted.insert(ports.ontology->code(*idx));
      }
    }
    if (!t.patient) continue;
    for (const auto& tag : t.patient->tags) {
      const Fact* f = log.simulator_profile.find_fact(tag.index);
      if (!f || !is_clinical(f->code.vocabulary)) continue;
      reference.insert(f->code);
      const IntakeMention* match = nullptr;
      std::size_t best_overlap = 0;
      for (const auto& im : t.intake) {
        const auto ov = detail::token_overlap(tag.span_text, im.text);
        if (ov > best_overlap) {
          best_overlap = ov;
          match = &im;
        }
      }
      std::optional<std::size_t> rank;
      if (match) {
        auto pos = std::find(match->candidates.begin(), match->candidates.end(), f->code.id);
        if (pos != match->candidates.end()) rank = static_cast<std::size_t>(pos - match->candidates.begin()) + 1;
      }
      auto [it, fresh] = best_rank.try_emplace(f->code, rank);
      if (fresh || (rank && (!it->second || *rank < *it->second))) {
        it->second = rank;
        best_list[f->code] = match ? match->candidates : std::vector<std::string>{};
      }
    }
  }
  m.recall = concept_recall(reference, extracted);
  for (const auto& [code, list] : best_list) m.rank_items.push_back({code.id, list});
  return m;
}

// ---------------------------------------------------------------------------
// Output

inline std::string fmt_num(std::optional<double> v, int precision = 6) {
  if (!v) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, *v);
  return buf;
}

inline void write_metrics_header(std::ostream& out) {
  out << "conversation\tlinguistic\tbehavioral\tprofile\tturns\tparse_failures\tfkgl\tresponse_length\t"
         "medical_terms\tdepression\ttoxicity\ton_topic\ton_topic_skipped\treference\tretrieved\tmissed\t"
         "extras\trecall\trecommendation\n";
}

inline void write_metrics_row(std::ostream& out, const ConversationMetrics& m) {
  out << m.conversation_id << '\t' << m.linguistic << '\t' << m.behavioral << '\t' << m.profile_id << '\t'
      << m.turns << '\t' << m.parse_failures << '\t' << fmt_num(m.fkgl) << '\t' << fmt_num(m.response_length)
      << '\t' << fmt_num(m.medical_terms) << '\t' << fmt_num(m.depression.mean) << '\t'
      << fmt_num(m.toxicity.mean) << '\t' << fmt_num(m.on_topic.mean) << '\t' << m.on_topic.skipped << '\t'
      << m.recall.overall.reference << '\t' << m.recall.overall.retrieved << '\t' << m.recall.overall.missed
      << '\t' << m.recall.overall.extras << '\t' << fmt_num(m.recall.overall.recall()) << '\t'
      << m.recommendation.value_or("NA") << '\n';
}

inline void write_rank_items(std::ostream& out, const std::vector<ConversationMetrics>& ms) {
  out << "conversation\treference\trank\tcandidates\n";
  for (const auto& m : ms) {
    for (const auto& it : m.rank_items) {
      auto pos = std::find(it.candidates.begin(), it.candidates.end(), it.reference);
      out << m.conversation_id << '\t' << it.reference << '\t'
          << (pos == it.candidates.end() ? std::string("NA")
                                         : std::to_string(pos - it.candidates.begin() + 1))
          << '\t';
      for (std::size_t i = 0; i < it.candidates.size(); ++i) out << (i ? "|" : "") << it.candidates[i];
      out << '\n';
    }
  }
}

/// Dense-matrix text format for external t-SNE tools:
///   line 1: "# patsim-embeddings/1 <rows> <dims>"
///   then one row per line: "<label>\t<v1> <v2> ... <vdims>" (%.9g)
inline void write_embedding_matrix(std::ostream& out,
                                   const std::vector<std::pair<std::string, Embedding>>& rows) {
  const std::size_t dims = rows.empty() ? 0 : rows.front().second.size();
  out << "# patsim-embeddings/1 " << rows.size() << ' ' << dims << '\n';
  char buf[32];
  for (const auto& [label, v] : rows) {
    if (v.size() != dims) throw Error("embedding matrix rows differ in width");
    out << label << '\t';
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", v[i]);
      out << (i ? " " : "") << buf;
    }
    out << '\n';
  }
}

}  // namespace patsim
