#pragma once

// Strict three-field simulator turn: parsing, validation, canonical form.

#include <algorithm>
#include <cctype>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/text.hpp"

namespace patsim {

enum class SchemaErrorKind { Unparseable, MissingField, MalformedItem, DanglingIndex, MalformedSpan };

inline std::string_view to_string(SchemaErrorKind k) {
  switch (k) {
    case SchemaErrorKind::Unparseable: return "unparseable";
    case SchemaErrorKind::MissingField: return "missing_field";
    case SchemaErrorKind::MalformedItem: return "malformed_item";
    case SchemaErrorKind::DanglingIndex: return "dangling_index";
    case SchemaErrorKind::MalformedSpan: return "malformed_span";
  }
  return "?";
}

class SchemaError : public Error {
 public:
  SchemaError(SchemaErrorKind kind, std::string raw, const std::string& what,
              std::vector<std::string> offending = {})
      : Error(std::string(to_string(kind)) + ": " + what),
        kind_(kind),
        raw_(std::move(raw)),
        offending_(std::move(offending)) {}
  SchemaErrorKind kind() const noexcept { return kind_; }
  const std::string& raw() const noexcept { return raw_; }
  const std::vector<std::string>& offending() const noexcept { return offending_; }

 private:
  SchemaErrorKind kind_;
  std::string raw_;
  std::vector<std::string> offending_;
};

inline constexpr std::string_view kSpanOpen = "<\\s>";
inline constexpr std::string_view kSpanClose = "</\\s>";

struct IndexedText {
  std::string index;  // "X.Y"
  std::string text;
  bool operator==(const IndexedText&) const = default;
};

struct SpanTag {
  std::string index;
  std::size_t span_begin = 0;  // byte offset of the span text inside response
  std::size_t span_end = 0;
  std::size_t tag_offset = 0;  // byte offset of '['
  std::string span_text;
  bool operator==(const SpanTag&) const = default;
};

struct SimulatorTurn {
  std::vector<IndexedText> relevant_medical_history;
  std::vector<IndexedText> style_transferred_medical_history;
  std::string response;
  std::vector<SpanTag> tags;
  bool operator==(const SimulatorTurn&) const = default;
};

namespace detail {

inline bool is_index(std::string_view s) {
  const auto dot = s.find('.');
  if (dot == std::string_view::npos || dot == 0 || dot + 1 == s.size()) return false;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != dot && !std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

// "[2.1] text" -> {"2.1", "text"}
inline std::optional<IndexedText> parse_item(std::string_view s) {
  s = text::trim(s);
  if (s.empty() || s.front() != '[') return std::nullopt;
  const auto close = s.find(']');
  if (close == std::string_view::npos) return std::nullopt;
  const auto idx = s.substr(1, close - 1);
  if (!is_index(idx)) return std::nullopt;
  return IndexedText{std::string(idx), std::string(text::trim(s.substr(close + 1)))};
}

// Reads a "[X.Y]" tag starting exactly at pos; returns the index and end.
inline std::optional<std::pair<std::string, std::size_t>> read_tag(std::string_view s, std::size_t pos) {
  if (pos >= s.size() || s[pos] != '[') return std::nullopt;
  const auto close = s.find(']', pos);
  if (close == std::string_view::npos) return std::nullopt;
  const auto idx = s.substr(pos + 1, close - pos - 1);
  if (!is_index(idx)) return std::nullopt;
  return std::pair{std::string(idx), close + 1};
}

// Strips markdown fences and supplies missing outer braces.
inline std::string unwrap_payload(std::string_view raw) {
  std::string_view s = text::trim(raw);
  if (s.starts_with("```")) {
    const auto nl = s.find('\n');
    s = nl == std::string_view::npos ? std::string_view{} : s.substr(nl + 1);
    const auto fence = s.rfind("```");
    if (fence != std::string_view::npos) s = s.substr(0, fence);
    s = text::trim(s);
  }
  if (!s.empty() && s.front() != '{') {
    const auto brace = s.find('{');
    const auto key = s.find('"');
    if (brace != std::string_view::npos && (key == std::string_view::npos || brace < key))
      s = s.substr(brace);
    else
      return "{" + std::string(s) + "}";
  }
  if (!s.empty() && s.front() == '{') {
    const auto end = s.rfind('}');
    if (end != std::string_view::npos) s = s.substr(0, end + 1);
  }
  return std::string(s);
}

inline std::vector<IndexedText> read_list(const nlohmann::json& j, const char* field,
                                          const std::string& raw) {
  if (!j.contains(field) || j.at(field).is_null())
    throw SchemaError(SchemaErrorKind::MissingField, raw, std::string("field '") + field + "' absent");
  const auto& arr = j.at(field);
  if (!arr.is_array())
    throw SchemaError(SchemaErrorKind::MissingField, raw, std::string("field '") + field + "' is not a list");
  std::vector<IndexedText> out;
  for (const auto& e : arr) {
    if (!e.is_string())
      throw SchemaError(SchemaErrorKind::MalformedItem, raw, std::string(field) + " entry is not a string");
    auto item = parse_item(e.get<std::string>());
    if (!item)
      throw SchemaError(SchemaErrorKind::MalformedItem, raw,
                        std::string(field) + " entry lacks an [X.Y] prefix: " + e.get<std::string>(),
                        {e.get<std::string>()});
    out.push_back(std::move(*item));
  }
  return out;
}

}  // namespace detail

/// Scans a response for `<\s>span</\s> [X.Y]` constructs. Spans must not
/// nest or overlap and each must be followed (after optional spaces) by a
/// tag; a tag with no span before it is also malformed.
inline std::vector<SpanTag> extract_tags(std::string_view response, const std::string& raw = {}) {
  std::vector<SpanTag> tags;
  std::size_t i = 0;
  auto fail = [&](const std::string& why) -> void {
    throw SchemaError(SchemaErrorKind::MalformedSpan, raw.empty() ? std::string(response) : raw,
                      why + " at byte " + std::to_string(i));
  };
  while (i < response.size()) {
    if (response.substr(i).starts_with(kSpanClose)) fail("closing marker without opening");
    if (response.substr(i).starts_with(kSpanOpen)) {
      const std::size_t begin = i + kSpanOpen.size();
      const auto close = response.find(kSpanClose, begin);
      const auto reopen = response.find(kSpanOpen, begin);
      if (close == std::string_view::npos) fail("unterminated span");
      if (reopen != std::string_view::npos && reopen < close) {
        i = reopen;
        fail("nested span");
      }
      SpanTag t;
      t.span_begin = begin;
      t.span_end = close;
      t.span_text = std::string(response.substr(begin, close - begin));
      if (text::trim(t.span_text).empty()) fail("empty span");
      std::size_t j = close + kSpanClose.size();
      while (j < response.size() && response[j] == ' ') ++j;
      auto tag = detail::read_tag(response, j);
      if (!tag) {
        i = j;
        fail("span not followed by an [X.Y] tag");
      }
      t.tag_offset = j;
      t.index = tag->first;
      tags.push_back(std::move(t));
      i = tag->second;
      continue;
    }
    if (response[i] == '[' && detail::read_tag(response, i)) fail("tag without a preceding span");
    ++i;
  }
  return tags;
}

/// Parses and validates one simulator reply.
inline SimulatorTurn parse_simulator_turn(std::string_view raw) {
  const std::string raw_s(raw);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::unwrap_payload(raw));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(SchemaErrorKind::Unparseable, raw_s, e.what());
  }
  if (!j.is_object()) throw SchemaError(SchemaErrorKind::Unparseable, raw_s, "payload is not an object");

  SimulatorTurn t;
  t.relevant_medical_history = detail::read_list(j, "relevant_medical_history", raw_s);
  t.style_transferred_medical_history = detail::read_list(j, "style_transferred_medical_history", raw_s);
  if (!j.contains("response") || j.at("response").is_null())
    throw SchemaError(SchemaErrorKind::MissingField, raw_s, "field 'response' absent");
  if (!j.at("response").is_string())
    throw SchemaError(SchemaErrorKind::MissingField, raw_s, "field 'response' is not a string");
  t.response = j.at("response").get<std::string>();
  t.tags = extract_tags(t.response, raw_s);

  std::set<std::string> known;
  for (const auto& f : t.relevant_medical_history) known.insert(f.index);
  std::vector<std::string> dangling;
  for (const auto& f : t.style_transferred_medical_history)
    if (!known.contains(f.index)) dangling.push_back(f.index);
  for (const auto& tag : t.tags)
    if (!known.contains(tag.index)) dangling.push_back(tag.index);
  if (!dangling.empty()) {
    std::string list;
    for (const auto& d : dangling) list += (list.empty() ? "" : ", ") + d;
    throw SchemaError(SchemaErrorKind::DanglingIndex, raw_s,
                      "indices not in relevant_medical_history: " + list, dangling);
  }
  return t;
}

inline nlohmann::json to_json(const SimulatorTurn& t) {
  auto list = [](const std::vector<IndexedText>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& f : v) a.push_back("[" + f.index + "] " + f.text);
    return a;
  };
  return {{"relevant_medical_history", list(t.relevant_medical_history)},
          {"style_transferred_medical_history", list(t.style_transferred_medical_history)},
          {"response", t.response}};
}

// Canonical serialization: compact JSON, keys sorted, items "[X.Y] text".
inline std::string serialize_turn(const SimulatorTurn& t) { return to_json(t).dump(); }

}  // namespace patsim
