#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "patsim/error.hpp"
#include "patsim/text.hpp"

namespace patsim {

enum class Vocabulary { Diagnosis, Medication, Procedure, Demographic, Outcome };

inline std::string_view to_string(Vocabulary v) {
  switch (v) {
    case Vocabulary::Diagnosis: return "DIAGNOSIS";
    case Vocabulary::Medication: return "MEDICATION";
    case Vocabulary::Procedure: return "PROCEDURE";
    case Vocabulary::Demographic: return "DEMOGRAPHIC";
    case Vocabulary::Outcome: return "OUTCOME";
  }
  return "?";
}

inline std::optional<Vocabulary> parse_vocabulary(std::string_view s) {
  for (auto v : {Vocabulary::Diagnosis, Vocabulary::Medication, Vocabulary::Procedure,
                 Vocabulary::Demographic, Vocabulary::Outcome}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

struct ConceptCode {
  std::string id;
  Vocabulary vocabulary = Vocabulary::Diagnosis;

  friend auto operator<=>(const ConceptCode&, const ConceptCode&) = default;
};

struct ConceptNode {
  ConceptCode code;
  std::string display_name;
  std::vector<std::string> parent_ids;
};

// Dense position of a concept inside one Ontology.
enum class ConceptIdx : std::uint32_t {};

constexpr std::size_t to_index(ConceptIdx c) noexcept { return static_cast<std::size_t>(c); }

// Hierarchical distance between concepts that share no undirected path.
inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

/// Concept vocabulary with a multi-parent is-a hierarchy.
///
/// Immutable once constructed. Concept ids are unique across vocabularies,
/// which lets patient records and parent columns reference concepts by id.
class Ontology {
 public:
  Ontology() = default;

  // Validates and links nodes. Throws ResolutionError for unknown parents or
  // self-parenting, StructureError naming a concept on the first cycle found.
  static Ontology from_nodes(std::vector<ConceptNode> nodes) {
    Ontology o;
    o.nodes_ = std::move(nodes);
    const std::size_t n = o.nodes_.size();
    o.by_id_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& code = o.nodes_[i].code;
      if (code.id.empty()) throw ParseError("concept with empty id");
      if (!o.by_id_.emplace(code.id, static_cast<ConceptIdx>(i)).second)
        throw ParseError("duplicate concept id '" + code.id + "'");
    }
    o.parents_.resize(n);
    o.children_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& pid : o.nodes_[i].parent_ids) {
        if (pid == o.nodes_[i].code.id)
          throw ResolutionError("concept '" + pid + "' lists itself as parent");
        auto it = o.by_id_.find(pid);
        if (it == o.by_id_.end())
          throw ResolutionError("concept '" + o.nodes_[i].code.id + "' references unknown parent '" +
                                pid + "'");
        o.parents_[i].push_back(it->second);
        o.children_[to_index(it->second)].push_back(static_cast<ConceptIdx>(i));
      }
      if (o.parents_[i].empty()) o.roots_.push_back(static_cast<ConceptIdx>(i));
    }
    o.check_acyclic();
    return o;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const ConceptNode& node(ConceptIdx c) const { return nodes_.at(to_index(c)); }
  const ConceptCode& code(ConceptIdx c) const { return node(c).code; }
  const std::string& display_name(ConceptIdx c) const { return node(c).display_name; }
  const std::vector<ConceptIdx>& parents(ConceptIdx c) const { return parents_.at(to_index(c)); }
  const std::vector<ConceptIdx>& children(ConceptIdx c) const { return children_.at(to_index(c)); }
  const std::vector<ConceptIdx>& roots() const noexcept { return roots_; }

  std::optional<ConceptIdx> find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  ConceptIdx require(std::string_view id) const {
    if (auto c = find(id)) return *c;
    throw LookupError("unknown concept '" + std::string(id) + "'");
  }

  ConceptIdx require(const ConceptCode& code) const {
    auto c = require(code.id);
    if (this->code(c).vocabulary != code.vocabulary)
      throw LookupError("concept '" + code.id + "' is not in vocabulary " +
                        std::string(to_string(code.vocabulary)));
    return c;
  }

  // Kahn order, parents before children.
  std::vector<ConceptIdx> topological_order() const {
    std::vector<std::size_t> indegree(size());
    for (std::size_t i = 0; i < size(); ++i) indegree[i] = parents_[i].size();
    std::vector<ConceptIdx> order;
    order.reserve(size());
    std::queue<ConceptIdx> ready;
    for (auto r : roots_) ready.push(r);
    while (!ready.empty()) {
      auto c = ready.front();
      ready.pop();
      order.push_back(c);
      for (auto ch : children_[to_index(c)]) {
        if (--indegree[to_index(ch)] == 0) ready.push(ch);
      }
    }
    return order;
  }

  // True when `to` is reachable from `from` following parent links (reflexive).
  bool reaches_upward(ConceptIdx from, ConceptIdx to) const {
    if (from == to) return true;
    std::vector<char> seen(size(), 0);
    std::vector<ConceptIdx> stack{from};
    seen[to_index(from)] = 1;
    while (!stack.empty()) {
      auto c = stack.back();
      stack.pop_back();
      for (auto p : parents_[to_index(c)]) {
        if (p == to) return true;
        if (!seen[to_index(p)]) {
          seen[to_index(p)] = 1;
          stack.push_back(p);
        }
      }
    }
    return false;
  }

  bool is_ancestor_or_descendant(ConceptIdx a, ConceptIdx b) const {
    return reaches_upward(a, b) || reaches_upward(b, a);
  }

  // Shortest undirected path length over parent links; kUnreachable if none.
  std::size_t hierarchical_distance(ConceptIdx a, ConceptIdx b) const {
    if (a == b) return 0;
    std::vector<std::size_t> dist(size(), kUnreachable);
    std::queue<ConceptIdx> q;
    dist[to_index(a)] = 0;
    q.push(a);
    while (!q.empty()) {
      auto c = q.front();
      q.pop();
      const auto d = dist[to_index(c)] + 1;
      auto visit = [&](ConceptIdx n) {
        if (dist[to_index(n)] != kUnreachable) return false;
        dist[to_index(n)] = d;
        if (n == b) return true;
        q.push(n);
        return false;
      };
      for (auto p : parents_[to_index(c)])
        if (visit(p)) return d;
      for (auto ch : children_[to_index(c)])
        if (visit(ch)) return d;
    }
    return kUnreachable;
  }

 private:
  void check_acyclic() const {
    enum : char { kWhite, kGrey, kBlack };
    std::vector<char> color(size(), kWhite);
    for (std::size_t start = 0; start < size(); ++start) {
      if (color[start] != kWhite) continue;
      // Iterative DFS over parent edges.
      std::vector<std::pair<std::size_t, std::size_t>> stack{{start, 0}};
      color[start] = kGrey;
      while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < parents_[node].size()) {
          const auto p = to_index(parents_[node][next++]);
          if (color[p] == kGrey) {
            const auto& id = nodes_[p].code.id;
            throw StructureError(id, "cycle in concept hierarchy through '" + id + "'");
          }
          if (color[p] == kWhite) {
            color[p] = kGrey;
            stack.emplace_back(p, 0);
          }
        } else {
          color[node] = kBlack;
          stack.pop_back();
        }
      }
    }
  }

  std::vector<ConceptNode> nodes_;
  std::unordered_map<std::string, ConceptIdx> by_id_;
  std::vector<std::vector<ConceptIdx>> parents_;
  std::vector<std::vector<ConceptIdx>> children_;
  std::vector<ConceptIdx> roots_;
};

// Concept table: tab-separated `id, vocabulary, display_name, parent_ids`
// with parent ids joined by '|'. Lines starting with '#' and a header line
// beginning with "id<TAB>" are skipped.
inline Ontology parse_ontology(std::istream& in) {
  std::vector<ConceptNode> nodes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty() || line.front() == '#') continue;
    if (line.rfind("id\t", 0) == 0) continue;
    auto cols = text::split(line, '\t');
    if (cols.size() < 3 || cols.size() > 4)
      throw ParseError("concept table line " + std::to_string(lineno) + ": expected 3 or 4 columns");
    auto vocab = parse_vocabulary(text::trim(cols[1]));
    if (!vocab)
      throw ParseError("concept table line " + std::to_string(lineno) + ": unknown vocabulary '" +
                       cols[1] + "'");
    ConceptNode node{{std::string(text::trim(cols[0])), *vocab},
                     std::string(text::trim(cols[2])),
                     {}};
    if (cols.size() == 4 && !text::trim(cols[3]).empty()) {
      for (auto& p : text::split(text::trim(cols[3]), '|')) {
        auto t = text::trim(p);
        if (!t.empty()) node.parent_ids.emplace_back(t);
      }
    }
    nodes.push_back(std::move(node));
  }
  return Ontology::from_nodes(std::move(nodes));
}

inline Ontology load_ontology(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open concept table '" + path + "'");
  return parse_ontology(in);
}

inline void write_ontology(std::ostream& out, const Ontology& o) {
  out << "id\tvocabulary\tdisplay_name\tparent_ids\n";
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto& n = o.node(static_cast<ConceptIdx>(i));
    out << n.code.id << '\t' << to_string(n.code.vocabulary) << '\t' << n.display_name << '\t'
        << text::join(n.parent_ids, "|") << '\n';
  }
}

inline bool is_ancestor_or_descendant(const Ontology& o, const ConceptCode& a, const ConceptCode& b) {
  return o.is_ancestor_or_descendant(o.require(a), o.require(b));
}

inline std::size_t hierarchical_distance(const Ontology& o, const ConceptCode& a, const ConceptCode& b) {
  return o.hierarchical_distance(o.require(a), o.require(b));
}

// ---------------------------------------------------------------------------
// Lexicon and greedy term matching

inline constexpr std::size_t kMaxTermTokens = 6;

class Lexicon {
 public:
  void add(std::string_view term, ConceptIdx target) {
    auto key = text::normalize_term(term);
    if (key.empty()) return;
    auto ntok = static_cast<std::size_t>(std::count(key.begin(), key.end(), ' ')) + 1;
    if (ntok > kMaxTermTokens) return;
    entries_.emplace(std::move(key), target);  // first writer wins
  }

  std::optional<ConceptIdx> lookup(const std::string& normalized) const {
    auto it = entries_.find(normalized);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::string, ConceptIdx>& entries() const noexcept { return entries_; }

 private:
  std::map<std::string, ConceptIdx> entries_;
};

// Lexicon over display names of the clinical vocabularies. Concepts are
// added in ontology order, so a name shared by two concepts maps to the first.
inline Lexicon build_lexicon(const Ontology& o,
                             std::initializer_list<Vocabulary> vocabularies = {
                                 Vocabulary::Diagnosis, Vocabulary::Medication,
                                 Vocabulary::Procedure}) {
  Lexicon lex;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto c = static_cast<ConceptIdx>(i);
    if (std::find(vocabularies.begin(), vocabularies.end(), o.code(c).vocabulary) !=
        vocabularies.end())
      lex.add(o.display_name(c), c);
  }
  return lex;
}

struct TermMatch {
  std::size_t begin = 0;  // token offsets, half-open
  std::size_t end = 0;
  ConceptIdx term{};

  friend bool operator==(const TermMatch&, const TermMatch&) = default;
};

// Left-to-right scan; at each position the longest lexicon n-gram (n <= 6)
// wins and the scan resumes after it.
inline std::vector<TermMatch> match_medical_terms(const Lexicon& lex,
                                                  const std::vector<std::string>& tokens) {
  std::vector<TermMatch> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    bool hit = false;
    for (std::size_t len = std::min(kMaxTermTokens, tokens.size() - i); len >= 1; --len) {
      std::string key = tokens[i];
      for (std::size_t k = 1; k < len; ++k) key += ' ' + tokens[i + k];
      if (auto c = lex.lookup(key)) {
        out.push_back({i, i + len, *c});
        i += len;
        hit = true;
        break;
      }
    }
    if (!hit) ++i;
  }
  return out;
}

inline std::vector<TermMatch> match_medical_terms(const Lexicon& lex, std::string_view utterance) {
  return match_medical_terms(lex, text::tokenize(utterance));
}

}  // namespace patsim
