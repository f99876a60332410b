#pragma once

// Three-label annotation schema, agreement statistics, adjudication and the
// judge annotation flow.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/ontology.hpp"
#include "patsim/orchestrator.hpp"
#include "patsim/rng.hpp"
#include "patsim/schema.hpp"
#include "patsim/text.hpp"

namespace patsim {

enum class Label { Accurate, Inaccurate, Unsupported };

inline constexpr std::array<Label, 3> kLabels = {Label::Accurate, Label::Inaccurate, Label::Unsupported};
inline constexpr std::string_view kAbstain = "ABSTAIN";
inline constexpr std::string_view kFreeMentionPrefix = "free:";
inline constexpr std::string_view kConsensusAnnotator = "consensus";

inline std::string_view to_string(Label l) {
  switch (l) {
    case Label::Accurate: return "ACCURATE";
    case Label::Inaccurate: return "INACCURATE";
    case Label::Unsupported: return "UNSUPPORTED";
  }
  return "?";
}

inline std::optional<Label> parse_label(std::string_view s) {
  for (auto l : kLabels)
    if (to_string(l) == s) return l;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Statistics on aligned label vectors

template <typename L>
struct Confusion {
  std::vector<L> classes;                        // sorted
  std::vector<std::vector<std::size_t>> counts;  // [a-class][b-class]
  std::size_t n = 0;

  std::size_t row_sum(std::size_t i) const {
    std::size_t s = 0;
    for (auto c : counts[i]) s += c;
    return s;
  }
  std::size_t col_sum(std::size_t j) const {
    std::size_t s = 0;
    for (const auto& r : counts) s += r[j];
    return s;
  }
};

template <typename L>
Confusion<L> confusion(std::span<const L> a, std::span<const L> b, std::vector<L> classes = {}) {
  if (a.size() != b.size()) throw AlignmentError({}, "label vectors differ in length");
  if (classes.empty()) {
    std::set<L> cs(a.begin(), a.end());
    cs.insert(b.begin(), b.end());
    classes.assign(cs.begin(), cs.end());
  }
  Confusion<L> c;
  c.classes = classes;
  c.counts.assign(classes.size(), std::vector<std::size_t>(classes.size(), 0));
  auto pos = [&](const L& l) {
    auto it = std::lower_bound(c.classes.begin(), c.classes.end(), l);
    if (it == c.classes.end() || *it != l) throw Error("label outside the class list");
    return static_cast<std::size_t>(it - c.classes.begin());
  };
  for (std::size_t i = 0; i < a.size(); ++i) ++c.counts[pos(a[i])][pos(b[i])];
  c.n = a.size();
  return c;
}

// kappa = (n*d - sum r_i c_i) / (n^2 - sum r_i c_i), the integer form of
// (p_o - p_e) / (1 - p_e). nullopt when p_e = 1.
template <typename L>
std::optional<double> cohens_kappa(const Confusion<L>& c) {
  if (c.n == 0) return std::nullopt;
  long double diag = 0, marg = 0;
  for (std::size_t i = 0; i < c.classes.size(); ++i) {
    diag += static_cast<long double>(c.counts[i][i]);
    marg += static_cast<long double>(c.row_sum(i)) * static_cast<long double>(c.col_sum(i));
  }
  const long double n = static_cast<long double>(c.n);
  const long double den = n * n - marg;
  if (den == 0) return std::nullopt;
  return static_cast<double>((n * diag - marg) / den);
}

template <typename L>
std::optional<double> cohens_kappa(std::span<const L> a, std::span<const L> b) {
  if (a.empty()) throw Error("kappa needs at least one item");
  return cohens_kappa(confusion(a, b));
}

template <typename L>
std::optional<double> cohens_kappa(const std::vector<L>& a, const std::vector<L>& b) {
  return cohens_kappa(std::span<const L>(a), std::span<const L>(b));
}

struct MicroF1 {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
};

// Micro-averaged over classes from per-class TP/FP/FN, with exact-match
// accuracy computed separately; the two must agree for single-label items.
template <typename L>
MicroF1 micro_f1(std::span<const L> a, std::span<const L> reference) {
  const auto c = confusion(a, reference);
  if (c.n == 0) throw Error("micro-F1 needs at least one item");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t k = 0; k < c.classes.size(); ++k) {
    tp += c.counts[k][k];
    fp += c.row_sum(k) - c.counts[k][k];
    fn += c.col_sum(k) - c.counts[k][k];
  }
  MicroF1 r;
  r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.f1 = r.precision + r.recall == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == reference[i];
  r.accuracy = static_cast<double>(same) / static_cast<double>(a.size());
  if (std::abs(r.f1 - r.accuracy) > 1e-12) throw Error("micro-F1 and accuracy disagree on single-label items");
  return r;
}

template <typename L>
MicroF1 micro_f1(const std::vector<L>& a, const std::vector<L>& reference) {
  return micro_f1(std::span<const L>(a), std::span<const L>(reference));
}

// ---------------------------------------------------------------------------
// Paired bootstrap

struct BootstrapResult {
  double delta = 0.0;  // kappa(a,b) - kappa(a,c) on the full sample
  double p_value = 1.0;
  std::size_t resamples = 0;
  std::size_t redraws = 0;  // resamples discarded for an undefined kappa
  std::uint64_t seed = 0;
};

namespace detail {

struct KappaAccumulator {
  std::size_t k;
  std::vector<std::size_t> cells;  // k*k
  explicit KappaAccumulator(std::size_t classes) : k(classes), cells(classes * classes, 0) {}
  void clear() { std::fill(cells.begin(), cells.end(), 0); }
  void add(std::size_t i, std::size_t j, std::size_t w = 1) { cells[i * k + j] += w; }
  std::optional<double> kappa() const {
    long double n = 0, diag = 0, marg = 0;
    std::vector<long double> row(k, 0), col(k, 0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const auto v = static_cast<long double>(cells[i * k + j]);
        row[i] += v;
        col[j] += v;
        n += v;
        if (i == j) diag += v;
      }
    for (std::size_t i = 0; i < k; ++i) marg += row[i] * col[i];
    const long double den = n * n - marg;
    if (n == 0 || den == 0) return std::nullopt;
    return static_cast<double>((n * diag - marg) / den);
  }
};

}  // namespace detail

/// Resamples items (or whole clusters when `clusters` is given) with
/// replacement and recomputes kappa(a,b) - kappa(a,c). Two-sided p is twice
/// the fraction of resampled deltas whose sign is opposite to, or zero
/// against, the observed delta, capped at 1. A zero observed delta gives
/// p = 1. Resamples with an undefined kappa are redrawn.
template <typename L>
BootstrapResult paired_bootstrap_kappa(std::span<const L> a, std::span<const L> b, std::span<const L> c,
                                       std::size_t resamples, std::uint64_t seed,
                                       std::span<const std::size_t> clusters = {}) {
  if (a.size() != b.size() || a.size() != c.size()) throw AlignmentError({}, "annotators differ in item count");
  if (a.empty()) throw Error("bootstrap needs at least one item");
  if (resamples < 1) throw ConfigError("resamples must be >= 1");
  if (!clusters.empty() && clusters.size() != a.size()) throw ConfigError("cluster ids must align with items");

  std::set<L> cs(a.begin(), a.end());
  cs.insert(b.begin(), b.end());
  cs.insert(c.begin(), c.end());
  const std::vector<L> classes(cs.begin(), cs.end());
  auto code = [&](const L& l) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), l) - classes.begin());
  };
  std::vector<std::size_t> ia(a.size()), ib(a.size()), ic(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ia[i] = code(a[i]);
    ib[i] = code(b[i]);
    ic[i] = code(c[i]);
  }

  // Resampling units: single items, or the member lists of each cluster.
  std::vector<std::vector<std::size_t>> units;
  if (clusters.empty()) {
    units.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) units[i] = {i};
  } else {
    std::map<std::size_t, std::vector<std::size_t>> by;
    for (std::size_t i = 0; i < a.size(); ++i) by[clusters[i]].push_back(i);
    for (auto& [id, v] : by) units.push_back(std::move(v));
  }

  detail::KappaAccumulator ab(classes.size()), ac(classes.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab.add(ia[i], ib[i]);
    ac.add(ia[i], ic[i]);
  }
  const auto k_ab = ab.kappa(), k_ac = ac.kappa();
  if (!k_ab || !k_ac) throw Error("kappa undefined on the full sample");

  BootstrapResult r;
  r.delta = *k_ab - *k_ac;
  r.resamples = resamples;
  r.seed = seed;
  Rng rng(seed);
  std::size_t against = 0;
  const std::size_t max_redraws = 100 * resamples + 1000;
  std::vector<std::size_t> mult(units.size());
  for (std::size_t s = 0; s < resamples;) {
    std::fill(mult.begin(), mult.end(), 0);
    for (std::size_t u = 0; u < units.size(); ++u) ++mult[rng.below(units.size())];
    ab.clear();
    ac.clear();
    for (std::size_t u = 0; u < units.size(); ++u) {
      if (mult[u] == 0) continue;
      for (auto i : units[u]) {
        ab.add(ia[i], ib[i], mult[u]);
        ac.add(ia[i], ic[i], mult[u]);
      }
    }
    const auto x = ab.kappa(), y = ac.kappa();
    if (!x || !y) {
      if (++r.redraws > max_redraws) throw Error("bootstrap: too many undefined resamples");
      continue;
    }
    const double d = *x - *y;
    if (r.delta == 0.0 || d == 0.0 || (d > 0) != (r.delta > 0)) ++against;
    ++s;
  }
  r.p_value = r.delta == 0.0 ? 1.0
                             : std::min(1.0, 2.0 * static_cast<double>(against) / static_cast<double>(resamples));
  return r;
}

template <typename L>
BootstrapResult paired_bootstrap_kappa(const std::vector<L>& a, const std::vector<L>& b, const std::vector<L>& c,
                                       std::size_t resamples, std::uint64_t seed,
                                       const std::vector<std::size_t>& clusters = {}) {
  return paired_bootstrap_kappa(std::span<const L>(a), std::span<const L>(b), std::span<const L>(c), resamples,
                                seed, std::span<const std::size_t>(clusters));
}

// ---------------------------------------------------------------------------
// Annotation sets

struct ItemKey {
  std::string conversation;
  std::size_t turn = 0;
  std::string key;  // fact index "X.Y" or "free:<mention>"
  auto operator<=>(const ItemKey&) const = default;

  bool is_free_mention() const { return key.starts_with(kFreeMentionPrefix); }
  std::string str() const { return conversation + "/" + std::to_string(turn) + "/" + key; }
};

struct AnnotationItem {
  ItemKey item;
  std::string annotator;
  std::optional<Label> label;  // nullopt = ABSTAIN status
};

struct AnnotationSet {
  std::string schema_version = "patsim-annotation/1";
  std::vector<AnnotationItem> items;

  // Throws on a duplicate (item, annotator) pair.
  void validate() const {
    std::set<std::pair<ItemKey, std::string>> seen;
    for (const auto& it : items)
      if (!seen.emplace(it.item, it.annotator).second)
        throw ParseError("duplicate annotation for " + it.item.str() + " by " + it.annotator);
  }

  std::set<std::string> annotators() const {
    std::set<std::string> s;
    for (const auto& it : items) s.insert(it.annotator);
    return s;
  }
};

inline void write_annotations(std::ostream& out, const AnnotationSet& s) {
  out << "conversation\tturn\tkey\tannotator\tlabel\n";
  auto items = s.items;
  std::sort(items.begin(), items.end(), [](const auto& x, const auto& y) {
    return std::tie(x.item, x.annotator) < std::tie(y.item, y.annotator);
  });
  for (const auto& it : items)
    out << it.item.conversation << '\t' << it.item.turn << '\t' << it.item.key << '\t' << it.annotator << '\t'
        << (it.label ? to_string(*it.label) : kAbstain) << '\n';
}

inline AnnotationSet read_annotations(std::istream& in, const std::string& source = "annotations") {
  AnnotationSet s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty() || line.starts_with("#")) continue;
    if (lineno == 1 && line.starts_with("conversation\t")) continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 5) throw ParseError(source + ":" + std::to_string(lineno) + ": expected 5 columns");
    AnnotationItem it;
    it.item.conversation = f[0];
    try {
      it.item.turn = std::stoul(f[1]);
    } catch (const std::exception&) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": bad turn '" + f[1] + "'");
    }
    it.item.key = f[2];
    it.annotator = f[3];
    if (f[4] != kAbstain) {
      it.label = parse_label(f[4]);
      if (!it.label) throw ParseError(source + ":" + std::to_string(lineno) + ": unknown label '" + f[4] + "'");
    }
    s.items.push_back(std::move(it));
  }
  s.validate();
  return s;
}

inline AnnotationSet load_annotations(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open annotation file '" + p.string() + "'");
  return read_annotations(in, p.string());
}

// Labels of one annotator (or of the only annotator present), keyed by item.
inline std::map<ItemKey, std::optional<Label>> labels_of(const AnnotationSet& s, const std::string& annotator = {}) {
  std::map<ItemKey, std::optional<Label>> m;
  for (const auto& it : s.items)
    if (annotator.empty() || it.annotator == annotator) m[it.item] = it.label;
  return m;
}

// ---------------------------------------------------------------------------
// Agreement report between two annotation sets

struct AgreementReport {
  MicroF1 micro;
  std::optional<double> kappa;
  std::array<std::array<std::size_t, 3>, 3> confusion{};  // [a][b] in kLabels order
  std::size_t n_items = 0;
  std::size_t abstained = 0;       // items dropped for an ABSTAIN on either side
  std::size_t free_mentions_a = 0;  // outside the reference key-space
  std::size_t free_mentions_b = 0;
  std::optional<BootstrapResult> bootstrap;
};

struct AlignedLabels {
  std::vector<ItemKey> keys;
  std::vector<Label> a, b;
  std::size_t abstained = 0;
  std::size_t free_a = 0, free_b = 0;
};

/// Aligns two single-annotator label maps on the reference key-space. Free
/// mentions are counted and set aside; items either side abstained on are
/// dropped and counted. Any other key present on one side only is an
/// alignment error.
inline AlignedLabels align_labels(const std::map<ItemKey, std::optional<Label>>& a,
                                  const std::map<ItemKey, std::optional<Label>>& b) {
  AlignedLabels r;
  std::vector<std::string> orphans;
  for (const auto& [k, l] : a) {
    if (k.is_free_mention()) {
      ++r.free_a;
      continue;
    }
    auto it = b.find(k);
    if (it == b.end()) {
      orphans.push_back("a:" + k.str());
      continue;
    }
    if (!l || !it->second) {
      ++r.abstained;
      continue;
    }
    r.keys.push_back(k);
    r.a.push_back(*l);
    r.b.push_back(*it->second);
  }
  for (const auto& [k, l] : b) {
    if (k.is_free_mention()) {
      ++r.free_b;
      continue;
    }
    if (!a.contains(k)) orphans.push_back("b:" + k.str());
  }
  if (!orphans.empty())
    throw AlignmentError(orphans, std::to_string(orphans.size()) + " items are not shared by both annotators");
  return r;
}

inline AgreementReport agreement(const std::map<ItemKey, std::optional<Label>>& a,
                                 const std::map<ItemKey, std::optional<Label>>& b) {
  const auto al = align_labels(a, b);
  AgreementReport r;
  r.n_items = al.a.size();
  r.abstained = al.abstained;
  r.free_mentions_a = al.free_a;
  r.free_mentions_b = al.free_b;
  if (al.a.empty()) return r;
  const std::vector<Label> classes(kLabels.begin(), kLabels.end());
  const auto c = confusion(std::span<const Label>(al.a), std::span<const Label>(al.b), classes);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) r.confusion[i][j] = c.counts[i][j];
  r.kappa = cohens_kappa(c);
  r.micro = micro_f1(al.a, al.b);
  return r;
}

/// Paired bootstrap of kappa(a,b) - kappa(a,c) over the items all three
/// label. With `by_conversation` the resampling unit is a conversation.
inline BootstrapResult compare_agreement(const std::map<ItemKey, std::optional<Label>>& a,
                                         const std::map<ItemKey, std::optional<Label>>& b,
                                         const std::map<ItemKey, std::optional<Label>>& c, std::size_t resamples,
                                         std::uint64_t seed, bool by_conversation = false) {
  const auto ab = align_labels(a, b);
  align_labels(a, c);  // same key-space check
  std::vector<Label> xa, xb, xc;
  std::vector<std::size_t> clusters;
  std::map<std::string, std::size_t> conv;
  for (std::size_t i = 0; i < ab.keys.size(); ++i) {
    const auto& l = c.at(ab.keys[i]);
    if (!l) continue;
    xa.push_back(ab.a[i]);
    xb.push_back(ab.b[i]);
    xc.push_back(*l);
    clusters.push_back(conv.try_emplace(ab.keys[i].conversation, conv.size()).first->second);
  }
  if (!by_conversation) clusters.clear();
  return paired_bootstrap_kappa(xa, xb, xc, resamples, seed, clusters);
}

// ---------------------------------------------------------------------------
// Adjudication

struct Disagreement {
  ItemKey item;
  std::optional<Label> a, b;
};

struct AdjudicationResult {
  AnnotationSet consensus;  // annotator = "consensus"
  std::vector<Disagreement> disagreements;  // still unresolved
  bool complete = true;
};

/// Agreements pass through; disagreements are resolved from `resolution`
/// (annotator "consensus") when present, else listed. Never invents labels:
/// every consensus label comes from one of the inputs or the resolution.
inline AdjudicationResult adjudicate(const AnnotationSet& a, const AnnotationSet& b,
                                     const std::optional<AnnotationSet>& resolution = std::nullopt) {
  const auto la = labels_of(a), lb = labels_of(b);
  std::map<ItemKey, std::optional<Label>> res;
  if (resolution) res = labels_of(*resolution, std::string(kConsensusAnnotator));
  std::set<ItemKey> keys;
  for (const auto& [k, l] : la) keys.insert(k);
  for (const auto& [k, l] : lb) keys.insert(k);
  std::vector<std::string> orphans;
  for (const auto& k : keys)
    if (!la.contains(k) || !lb.contains(k)) orphans.push_back(k.str());
  if (!orphans.empty()) throw AlignmentError(orphans, "annotation sets cover different items");

  AdjudicationResult r;
  for (const auto& k : keys) {
    const auto& x = la.at(k);
    const auto& y = lb.at(k);
    if (x && y && *x == *y) {
      r.consensus.items.push_back({k, std::string(kConsensusAnnotator), x});
      continue;
    }
    if (auto it = res.find(k); it != res.end() && it->second) {
      r.consensus.items.push_back({k, std::string(kConsensusAnnotator), it->second});
      continue;
    }
    r.disagreements.push_back({k, x, y});
  }
  r.complete = r.disagreements.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Judge annotation

inline constexpr std::string_view kRubric =
    "ACCURATE: Medical fact present in the reference medical history and correctly expressed; minor "
    "colloquialisms are acceptable if the core meaning is preserved.\n"
    "INACCURATE: Medical fact present in the reference medical history but misrepresented, distorting "
    "critical clinical details or using implausible phrasing.\n"
    "UNSUPPORTED: Medical fact not present in the reference medical history; fabricated, speculative, or "
    "unrelated to the provided profile.\n";

struct JudgeTemplate {
  std::string text;

  static JudgeTemplate load(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open judge template '" + p.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    JudgeTemplate t{ss.str()};
    t.check();
    return t;
  }

  void check() const {
    for (const char* slot : {"{{profile}}", "{{turn}}", "{{rubric}}"})
      if (text.find(slot) == std::string::npos)
        throw ConfigError(std::string("judge template lacks the ") + slot + " slot");
  }

  std::string fill(std::string_view profile, std::string_view turn) const {
    std::string out = text;
    auto sub = [&](std::string_view slot, std::string_view value) {
      for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + value.size()))
        out.replace(pos, slot.size(), value);
    };
    sub("{{rubric}}", kRubric);
    sub("{{profile}}", profile);
    sub("{{turn}}", turn);
    return out;
  }
};

inline std::string render_reference_facts(const MedicalProfile& p) {
  std::string out;
  p.for_each_fact([&](const Section&, const Fact& f) { out += f.index + ": " + f.text + "\n"; });
  return out;
}

struct JudgeFailure {
  std::string conversation;
  std::size_t turn = 0;
  std::string error;
};

struct JudgeRun {
  AnnotationSet annotations;
  std::vector<JudgeFailure> failures;  // port failures; affected items are missing
  std::size_t abstained = 0;
};

namespace detail {

// Parses {"labels": [{"index", "label"}], "free_mentions": [{"text", "label"}]}
// (code fences tolerated). Indices the judge skipped or mislabeled become
// ABSTAIN items.
inline void read_judge_reply(const std::string& raw, const std::string& conv, std::size_t turn,
                             const std::set<std::string>& expected, const std::string& annotator, JudgeRun& run) {
  std::map<std::string, std::optional<Label>> got;
  std::vector<std::pair<std::string, Label>> free;
  try {
    const auto j = nlohmann::json::parse(unwrap_payload(raw));
    for (const auto& e : j.at("labels")) {
      const auto idx = e.at("index").get<std::string>();
      if (expected.contains(idx)) got[idx] = parse_label(e.at("label").get<std::string>());
    }
    if (j.contains("free_mentions")) {
      for (const auto& e : j.at("free_mentions")) {
        auto l = parse_label(e.at("label").get<std::string>());
        const auto t = text::normalize_term(e.at("text").get<std::string>());
        if (l && !t.empty()) free.emplace_back(t, *l);
      }
    }
  } catch (const nlohmann::json::exception&) {
    got.clear();
    free.clear();
  }
  for (const auto& idx : expected) {
    auto it = got.find(idx);
    std::optional<Label> l = it == got.end() ? std::nullopt : it->second;
    if (!l) ++run.abstained;
    run.annotations.items.push_back({{conv, turn, idx}, annotator, l});
  }
  std::set<std::string> seen;
  for (const auto& [t, l] : free)
    if (seen.insert(t).second)
      run.annotations.items.push_back({{conv, turn, std::string(kFreeMentionPrefix) + t}, annotator, l});
}

}  // namespace detail

/// One judge request per patient turn that cites facts. The judge sees the
/// reference profile (before any perturbation) and the turn's relevant
/// facts and response, and must label every cited index.
inline JudgeRun judge_annotate(const std::vector<ConversationLog>& logs, ChatPort& judge, const JudgeTemplate& tpl,
                               const std::string& annotator = "judge", unsigned workers = 1) {
  tpl.check();
  std::vector<JudgeRun> parts(logs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto work = [&] {
    while (true) {
      const auto i = next.fetch_add(1);
      if (i >= logs.size()) return;
      const auto& log = logs[i];
      const auto ref = render_reference_facts(log.reference_profile);
      for (const auto& t : log.conversation.turns) {
        if (!t.patient) continue;
        std::set<std::string> expected;
        for (const auto& tag : t.patient->tags) expected.insert(tag.index);
        if (expected.empty() && text::strip_markup(t.patient->response).empty()) continue;
        const auto prompt = tpl.fill(ref, serialize_turn(*t.patient));
        std::string reply;
        try {
          std::unique_lock lock(mu, std::defer_lock);
          if (judge.single_flight()) lock.lock();
          reply = judge.request(prompt, {});
        } catch (const PortError& e) {
          parts[i].failures.push_back({log.conversation.id, t.number, e.what()});
          continue;
        }
        detail::read_judge_reply(reply, log.conversation.id, t.number, expected, annotator, parts[i]);
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const unsigned n = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, logs.size()))));
    for (unsigned k = 0; k < n; ++k) pool.emplace_back(work);
  }
  JudgeRun out;
  for (auto& p : parts) {
    out.annotations.items.insert(out.annotations.items.end(), p.annotations.items.begin(), p.annotations.items.end());
    out.failures.insert(out.failures.end(), p.failures.begin(), p.failures.end());
    out.abstained += p.abstained;
  }
  return out;
}

/// Offline judge. Compares each cited fact's text with the reference fact
/// under the same index (equal: ACCURATE, different: INACCURATE, index not
/// in the reference: UNSUPPORTED) and reports lexicon terms said outside
/// any span that match no reference fact as UNSUPPORTED free mentions.
class ReferenceMatchJudge final : public ChatPort {
 public:
  explicit ReferenceMatchJudge(const Lexicon& lexicon) : lexicon_(lexicon) {}

  std::string request(const std::string& prompt, const std::vector<ChatMessage>&) override {
    std::map<std::string, std::string> ref;
    std::set<std::string> ref_terms;
    const auto pb = prompt.find("<reference>");
    const auto pe = prompt.find("</reference>");
    const auto tb = prompt.find("<turn>");
    const auto te = prompt.find("</turn>");
    if (pb == std::string::npos || pe == std::string::npos || tb == std::string::npos || te == std::string::npos)
      return "unable to locate the profile or turn";
    std::istringstream in(prompt.substr(pb + 11, pe - pb - 11));
    std::string line;
    while (std::getline(in, line)) {
      const auto colon = line.find(": ");
      if (colon == std::string::npos) continue;
      ref[line.substr(0, colon)] = line.substr(colon + 2);
      ref_terms.insert(text::normalize_term(line.substr(colon + 2)));
    }
    SimulatorTurn turn;
    try {
      turn = parse_simulator_turn(prompt.substr(tb + 6, te - tb - 6));
    } catch (const SchemaError&) {
      return "unparseable turn";
    }
    std::map<std::string, std::string> relevant;
    for (const auto& f : turn.relevant_medical_history) relevant[f.index] = f.text;

    nlohmann::json labels = nlohmann::json::array();
    std::set<std::string> done;
    for (const auto& tag : turn.tags) {
      if (!done.insert(tag.index).second) continue;
      Label l = Label::Unsupported;
      if (auto it = ref.find(tag.index); it != ref.end())
        l = text::normalize_term(it->second) == text::normalize_term(relevant[tag.index]) ? Label::Accurate
                                                                                          : Label::Inaccurate;
      labels.push_back({{"index", tag.index}, {"label", to_string(l)}});
    }
    // Untagged remainder of the response.
    std::string rest;
    std::size_t pos = 0;
    for (const auto& tag : turn.tags) {
      rest += turn.response.substr(pos, tag.span_begin - kSpanOpen.size() - pos) + " . ";
      pos = turn.response.find(']', tag.tag_offset) + 1;
    }
    rest += turn.response.substr(std::min(pos, turn.response.size()));
    nlohmann::json free = nlohmann::json::array();
    const auto toks = text::tokenize(rest);
    for (const auto& m : match_medical_terms(lexicon_, toks)) {
      std::vector<std::string> span(toks.begin() + static_cast<std::ptrdiff_t>(m.begin),
                                    toks.begin() + static_cast<std::ptrdiff_t>(m.end));
      const auto term = text::join(span, " ");
      if (!ref_terms.contains(term)) free.push_back({{"text", term}, {"label", "UNSUPPORTED"}});
    }
    return nlohmann::json{{"labels", labels}, {"free_mentions", free}}.dump();
  }

 private:
  const Lexicon& lexicon_;
};

inline constexpr std::string_view kDefaultJudgeTemplate =
    "You are auditing a simulated patient's reply against the patient's reference medical history.\n\n"
    "Labels:\n{{rubric}}\n"
    "<reference>\n{{profile}}</reference>\n\n"
    "<turn>\n{{turn}}\n</turn>\n\n"
    "Label every index cited in the response. Report medical facts mentioned outside the tagged spans as "
    "free mentions.\n"
    "Answer with one JSON object: {\"labels\": [{\"index\": \"X.Y\", \"label\": \"ACCURATE|INACCURATE|"
    "UNSUPPORTED\"}], \"free_mentions\": [{\"text\": \"...\", \"label\": \"UNSUPPORTED\"}]}\n";

// Answer key from perturbation records: every cited index is ACCURATE unless
// its fact was perturbed for that profile, in which case it is INACCURATE.
inline AnnotationSet answer_key(const std::vector<ConversationLog>& logs, const std::string& annotator = "key") {
  AnnotationSet s;
  for (const auto& log : logs) {
    std::set<std::string> perturbed;
    for (const auto& r : log.perturbations) perturbed.insert(r.index);
    for (const auto& t : log.conversation.turns) {
      if (!t.patient) continue;
      std::set<std::string> idx;
      for (const auto& tag : t.patient->tags) idx.insert(tag.index);
      for (const auto& i : idx)
        s.items.push_back({{log.conversation.id, t.number, i}, annotator,
                           perturbed.contains(i) ? Label::Inaccurate : Label::Accurate});
    }
  }
  return s;
}

/// Synthetic annotator for offline runs: copies `base` and replaces each
/// label, with probability `flip`, by one of the two other labels. Draws
/// are keyed on (seed, annotator, item) so they do not depend on order.
inline AnnotationSet noisy_annotator(const AnnotationSet& base, const std::string& annotator, double flip,
                                     std::uint64_t seed) {
  AnnotationSet s;
  for (const auto& it : base.items) {
    if (it.item.is_free_mention()) continue;
    auto l = it.label;
    Rng rng(mix_seed(seed, stable_hash(annotator + "|" + it.item.str())));
    if (l && rng.uniform() < flip) {
      const auto cur = static_cast<std::size_t>(*l);
      l = kLabels[(cur + 1 + rng.below(2)) % 3];
    }
    s.items.push_back({it.item, annotator, l});
  }
  return s;
}

}  // namespace patsim
