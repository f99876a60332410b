#pragma once

// Cell-by-metric report tables computed from conversation logs, annotation
// sets and a reference recommendation policy. Every table is a pure function
// of those inputs, so a report directory can be recomputed and diffed.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "patsim/agreement.hpp"
#include "patsim/metrics.hpp"
#include "patsim/orchestrator.hpp"
#include "patsim/persona.hpp"

namespace patsim {

inline constexpr std::string_view kMissing = "MISSING";

// ---------------------------------------------------------------------------
// Weighted precision / recall / F1

struct ClassScore {
  std::string label;
  std::size_t support = 0;  // true count
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct WeightedScores {
  std::size_t n = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::vector<ClassScore> classes;  // sorted by label
};

/// Support-weighted averages of per-class scores over the classes seen in
/// either vector. A zero denominator scores 0 for that class.
inline WeightedScores weighted_prf(const std::vector<std::string>& truth, const std::vector<std::string>& pred) {
  if (truth.size() != pred.size()) throw AlignmentError({}, "truth and prediction lengths differ");
  WeightedScores w;
  w.n = truth.size();
  if (w.n == 0) return w;
  std::set<std::string> labels(truth.begin(), truth.end());
  labels.insert(pred.begin(), pred.end());
  for (const auto& l : labels) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool t = truth[i] == l, p = pred[i] == l;
      tp += t && p;
      fp += !t && p;
      fn += t && !p;
    }
    ClassScore c;
    c.label = l;
    c.support = tp + fn;
    c.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    c.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    c.f1 = c.precision + c.recall == 0.0 ? 0.0 : 2.0 * c.precision * c.recall / (c.precision + c.recall);
    const double wt = static_cast<double>(c.support) / static_cast<double>(w.n);
    w.precision += wt * c.precision;
    w.recall += wt * c.recall;
    w.f1 += wt * c.f1;
    w.classes.push_back(std::move(c));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Reference policy: profile id -> expected recommendation

using ReferencePolicy = std::map<std::string, std::string>;

inline void write_policy(std::ostream& out, const ReferencePolicy& p) {
  out << "profile\texpected\n";
  for (const auto& [k, v] : p) out << k << '\t' << v << '\n';
}

inline ReferencePolicy read_policy(std::istream& in, const std::string& source = "policy") {
  ReferencePolicy p;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty() || line.starts_with("#") || (lineno == 1 && line.starts_with("profile\t")))
      continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 2) throw ParseError(source + ":" + std::to_string(lineno) + ": expected 2 columns");
    p[f[0]] = f[1];
  }
  return p;
}

// ---------------------------------------------------------------------------
// Tables

struct Table {
  std::string name;   // file stem
  std::string title;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string render() const {
    std::ostringstream os;
    os << "# " << title << '\n';
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "\t" : "") << header[i];
    os << '\n';
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "\t" : "") << r[i];
      os << '\n';
    }
    return os.str();
  }
};

struct ReportBundle {
  std::vector<Table> tables;

  const Table* find(std::string_view name) const {
    for (const auto& t : tables)
      if (t.name == name) return &t;
    return nullptr;
  }
};

struct NamedAnnotations {
  std::string name;
  AnnotationSet set;
};

struct ReportInputs {
  std::vector<ConversationLog> logs;
  std::vector<ConversationMetrics> metrics;  // one per log, same order
  std::optional<AnnotationSet> judge;
  std::vector<NamedAnnotations> annotators;  // pairwise agreement rows
  ReferencePolicy policy;
};

namespace detail {

inline std::string pct(std::optional<double> v) { return v ? fmt_num(*v * 100.0, 2) : std::string(kMissing); }

inline std::string mean_of(const std::vector<std::optional<double>>& xs) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : xs)
    if (x) {
      s += *x;
      ++n;
    }
  return n == 0 ? std::string(kMissing) : fmt_num(s / static_cast<double>(n), 4);
}

inline std::string display_linguistic(LinguisticKind k) {
  switch (k) {
    case LinguisticKind::LimitedHL: return "Limited HL";
    case LinguisticKind::FunctionalHL: return "Functional HL";
    case LinguisticKind::ProficientHL: return "Proficient HL";
    case LinguisticKind::Depression: return "Depression";
    case LinguisticKind::IllnessAnxiety: return "Illness Anxiety Disorder";
  }
  return "?";
}

inline std::string display_behavioral(BehavioralKind k) {
  switch (k) {
    case BehavioralKind::StructuredCooperative: return "Structured & Cooperative";
    case BehavioralKind::DistractedUnfocused: return "Distracted & Unfocused";
    case BehavioralKind::AdversarialCombative: return "Adversarial & Combative";
    default: return std::string(to_string(k));
  }
}

inline std::set<std::pair<std::string, std::string>> perturbed_keys(const std::vector<ConversationLog>& logs) {
  std::set<std::pair<std::string, std::string>> s;
  for (const auto& l : logs)
    for (const auto& r : l.perturbations) s.emplace(l.conversation.id, r.index);
  return s;
}

}  // namespace detail

/// Tables 5-12 shapes. Rows are enumerated from the fixed profile lists, so
/// a cell without data shows MISSING instead of disappearing.
inline ReportBundle report_tables(const ReportInputs& in) {
  if (in.logs.size() != in.metrics.size()) throw Error("report inputs: logs and metrics differ in length");
  ReportBundle b;
  const auto coop = std::string(to_string(BehavioralKind::StructuredCooperative));
  const auto func = std::string(to_string(LinguisticKind::FunctionalHL));

  // Table 5: pairwise agreement, unperturbed vs perturbed items.
  {
    Table t{"table05_agreement", "Agreement on unperturbed and perturbed concept labels", {"subset", "pair", "n", "f1_micro", "kappa"}, {}};
    const auto pk = detail::perturbed_keys(in.logs);
    for (std::size_t i = 0; i < in.annotators.size(); ++i) {
      for (std::size_t j = i + 1; j < in.annotators.size(); ++j) {
        const auto la = labels_of(in.annotators[i].set), lb = labels_of(in.annotators[j].set);
        for (bool perturbed : {false, true}) {
          std::map<ItemKey, std::optional<Label>> sa, sb;
          for (const auto& [k, l] : la)
            if (k.is_free_mention() || pk.contains({k.conversation, k.key}) == perturbed) sa[k] = l;
          for (const auto& [k, l] : lb)
            if (k.is_free_mention() || pk.contains({k.conversation, k.key}) == perturbed) sb[k] = l;
          const auto r = agreement(sa, sb);
          const auto pair = in.annotators[i].name + "~" + in.annotators[j].name;
          const std::string subset = perturbed ? "perturbed" : "unperturbed";
          if (r.n_items == 0)
            t.rows.push_back({subset, pair, "0", std::string(kMissing), std::string(kMissing)});
          else
            t.rows.push_back({subset, pair, std::to_string(r.n_items), fmt_num(r.micro.f1, 4),
                              r.kappa ? fmt_num(*r.kappa, 4) : std::string(kMissing)});
        }
      }
    }
    if (t.rows.empty()) t.rows.push_back({std::string(kMissing), std::string(kMissing), "0", std::string(kMissing), std::string(kMissing)});
    b.tables.push_back(std::move(t));
  }

  // Tables 6 and 7: judge label counts per profile.
  std::map<std::string, std::pair<std::string, std::string>> cell_of;  // conversation -> (ling, beh)
  for (const auto& l : in.logs) cell_of[l.conversation.id] = {l.conversation.linguistic, l.conversation.behavioral};
  auto label_table = [&](std::string name, std::string title, bool by_ling) {
    Table t{std::move(name), std::move(title), {"profile", "accurate", "inaccurate", "unsupported"}, {}};
    std::map<std::string, std::array<std::size_t, 3>> counts;
    std::set<std::string> present;
    for (const auto& [id, cell] : cell_of) {
      if (by_ling ? cell.second == coop : cell.first == func) present.insert(by_ling ? cell.first : cell.second);
    }
    if (in.judge) {
      for (const auto& it : in.judge->items) {
        if (!it.label) continue;
        auto c = cell_of.find(it.item.conversation);
        if (c == cell_of.end()) continue;
        const auto& [ling, beh] = c->second;
        if (by_ling && beh == coop) ++counts[ling][static_cast<std::size_t>(*it.label)];
        if (!by_ling && ling == func) ++counts[beh][static_cast<std::size_t>(*it.label)];
      }
    }
    auto row = [&](const std::string& key, const std::string& display) {
      if (!in.judge || !present.contains(key)) {
        t.rows.push_back({display, std::string(kMissing), std::string(kMissing), std::string(kMissing)});
        return;
      }
      const auto& c = counts[key];
      t.rows.push_back({display, std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2])});
    };
    if (by_ling)
      for (auto k : kLinguisticKinds) row(std::string(to_string(k)), detail::display_linguistic(k));
    else
      for (auto k : kOperationalBehaviors) row(std::string(to_string(k)), detail::display_behavioral(k));
    return t;
  };
  b.tables.push_back(label_table("table06_labels_by_linguistic",
                                 "Judge labels by linguistic profile under Structured & Cooperative", true));
  b.tables.push_back(label_table("table07_labels_by_behavioral",
                                 "Judge labels by behavioral profile under Functional HL", false));

  // Table 8: linguistic metric means under the cooperative behavior.
  {
    Table t{"table08_linguistic_metrics", "Linguistic profile metrics under Structured & Cooperative",
            {"profile", "conversations", "reading_level", "response_length", "medical_terms", "depression_score"}, {}};
    for (auto k : kLinguisticKinds) {
      std::vector<std::optional<double>> f, len, med, dep;
      for (const auto& m : in.metrics) {
        if (m.linguistic != to_string(k) || m.behavioral != coop) continue;
        f.push_back(m.fkgl);
        len.push_back(m.response_length);
        med.push_back(m.medical_terms);
        dep.push_back(m.depression.mean);
      }
      if (f.empty())
        t.rows.push_back({detail::display_linguistic(k), "0", std::string(kMissing), std::string(kMissing),
                          std::string(kMissing), std::string(kMissing)});
      else
        t.rows.push_back({detail::display_linguistic(k), std::to_string(f.size()), detail::mean_of(f),
                          detail::mean_of(len), detail::mean_of(med), detail::mean_of(dep)});
    }
    b.tables.push_back(std::move(t));
  }

  // Table 9: behavioral metric means under functional literacy.
  {
    Table t{"table09_behavioral_metrics", "Behavioral profile metrics under Functional HL",
            {"profile", "conversations", "on_topic_similarity", "toxicity"}, {}};
    for (auto k : kOperationalBehaviors) {
      std::vector<std::optional<double>> sim, tox;
      for (const auto& m : in.metrics) {
        if (m.behavioral != to_string(k) || m.linguistic != func) continue;
        sim.push_back(m.on_topic.mean);
        tox.push_back(m.toxicity.mean);
      }
      if (sim.empty())
        t.rows.push_back({detail::display_behavioral(k), "0", std::string(kMissing), std::string(kMissing)});
      else
        t.rows.push_back({detail::display_behavioral(k), std::to_string(sim.size()), detail::mean_of(sim),
                          detail::mean_of(tox)});
    }
    b.tables.push_back(std::move(t));
  }

  // Table 10: recall breakdown over all conversations.
  {
    RecallReport total;
    for (const auto& m : in.metrics) total += m.recall;
    Table t{"table10_recall", "Intake system concept recall against simulator-generated reference concepts",
            {"metric", "overall", "diagnosis", "medication", "procedure"}, {}};
    std::vector<const RecallCounts*> cols = {&total.overall};
    for (auto v : kClinicalVocabularies) cols.push_back(&total.by_vocabulary[v]);
    auto row = [&](std::string name, auto get) {
      std::vector<std::string> r{std::move(name)};
      for (const auto* c : cols) r.push_back(get(*c));
      t.rows.push_back(std::move(r));
    };
    row("reference_concepts", [](const RecallCounts& c) { return std::to_string(c.reference); });
    row("retrieved", [](const RecallCounts& c) { return std::to_string(c.retrieved); });
    row("missed", [](const RecallCounts& c) { return std::to_string(c.missed); });
    row("recall_pct", [](const RecallCounts& c) { return detail::pct(c.recall()); });
    row("outside_reference", [](const RecallCounts& c) { return std::to_string(c.extras); });
    b.tables.push_back(std::move(t));
  }

  // Table 11: rank metrics over all conversations.
  {
    std::vector<RankItem> items;
    for (const auto& m : in.metrics) items.insert(items.end(), m.rank_items.begin(), m.rank_items.end());
    const auto r = retrieval_rank_metrics(items);
    Table t{"table11_rank", "Concept retrieval rank metrics", {"metric", "value", "count"}, {}};
    t.rows.push_back({"conversations", std::to_string(in.metrics.size()), std::to_string(in.metrics.size())});
    t.rows.push_back({"reference_concepts", std::to_string(r.items), std::to_string(r.items)});
    if (r.items == 0) {
      for (const char* k : {"rank1_pct", "beyond_rank1_pct", "within_top20_of_non_rank1_pct", "not_retrieved_pct"})
        t.rows.push_back({k, std::string(kMissing), "0"});
    } else {
      t.rows.push_back({"rank1_pct", detail::pct(r.rank1_accuracy()), std::to_string(r.rank1)});
      t.rows.push_back({"beyond_rank1_pct", detail::pct(r.beyond_share()), std::to_string(r.beyond_rank1)});
      t.rows.push_back({"within_top20_of_non_rank1_pct", detail::pct(r.within_top20_share()), std::to_string(r.within_top20)});
      t.rows.push_back({"not_retrieved_pct", detail::pct(r.not_retrieved_share()), std::to_string(r.not_retrieved)});
    }
    t.rows.push_back({"mean_nontop1_rank", r.mean_nontop1_rank ? fmt_num(*r.mean_nontop1_rank, 2) : std::string(kMissing),
                      std::to_string(r.beyond_rank1)});
    b.tables.push_back(std::move(t));
  }

  // Table 12: weighted P/R/F1 of final recommendations vs the reference policy.
  {
    Table t{"table12_recommendation", "Recommendation scores against the reference policy",
            {"behavioral", "linguistic", "conversations", "precision", "recall", "f1"}, {}};
    for (auto bk : kOperationalBehaviors) {
      for (auto lk : kLinguisticKinds) {
        std::vector<std::string> truth, pred;
        for (const auto& l : in.logs) {
          const auto& c = l.conversation;
          if (c.linguistic != to_string(lk) || c.behavioral != to_string(bk)) continue;
          auto p = in.policy.find(c.profile_id);
          if (p == in.policy.end()) continue;
          truth.push_back(p->second);
          pred.push_back(c.final_recommendation.value_or(std::string(kNoRecommendation)));
        }
        if (truth.empty()) {
          t.rows.push_back({detail::display_behavioral(bk), detail::display_linguistic(lk), "0",
                            std::string(kMissing), std::string(kMissing), std::string(kMissing)});
          continue;
        }
        const auto w = weighted_prf(truth, pred);
        t.rows.push_back({detail::display_behavioral(bk), detail::display_linguistic(lk), std::to_string(w.n),
                          fmt_num(w.precision, 4), fmt_num(w.recall, 4), fmt_num(w.f1, 4)});
      }
    }
    b.tables.push_back(std::move(t));
  }
  return b;
}

inline void write_report(const ReportBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : b.tables) {
    std::ofstream out(dir / (t.name + ".tsv"), std::ios::binary);
    out << t.render();
  }
}

struct VerifyDiff {
  std::string table;
  std::string detail;
};

// Re-renders every table and compares with the files in `dir`.
inline std::vector<VerifyDiff> verify_report(const ReportBundle& b, const std::filesystem::path& dir) {
  std::vector<VerifyDiff> diffs;
  for (const auto& t : b.tables) {
    std::ifstream in(dir / (t.name + ".tsv"), std::ios::binary);
    if (!in) {
      diffs.push_back({t.name, "file missing"});
      continue;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    const auto want = t.render();
    const auto got = ss.str();
    if (got == want) continue;
    std::istringstream a(want), g(got);
    std::string la, lg;
    std::size_t line = 0;
    while (true) {
      ++line;
      const bool ea = !std::getline(a, la), eg = !std::getline(g, lg);
      if (ea && eg) break;
      if (ea != eg || la != lg) {
        diffs.push_back({t.name, "line " + std::to_string(line) + ": expected '" + (ea ? "" : la) + "' found '" +
                                     (eg ? "" : lg) + "'"});
        break;
      }
    }
  }
  return diffs;
}

}  // namespace patsim
