#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace patsim::text {

// Word tokenizer shared by lexicon matching and every text metric.
//
//   1. ASCII letters are lowercased; other bytes (including UTF-8) pass through.
//   2. Whitespace and '/' separate tokens.
//   3. Every other ASCII punctuation byte is deleted, so "pre-hypertension"
//      becomes "prehypertension" and "don't" becomes "dont".
//   4. Tokens left empty are dropped.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || c == '/') {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Lexicon key for a concept display name: tokenized, single-space joined.
inline std::string normalize_term(std::string_view s) { return join(tokenize(s), " "); }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) !=
        std::tolower(static_cast<unsigned char>(prefix[i])))
      return false;
  }
  return true;
}

// Removes simulator markup: the <\s> and </\s> span markers and [X.Y] fact tags.
// Whitespace left behind is collapsed.
inline std::string strip_markup(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
  while (i < s.size()) {
    if (s.substr(i, 4) == "<\\s>") {
      i += 4;
      continue;
    }
    if (s.substr(i, 5) == "</\\s>") {
      i += 5;
      continue;
    }
    if (s[i] == '[') {
      std::size_t j = i + 1;
      std::size_t a = j;
      while (j < s.size() && is_digit(s[j])) ++j;
      if (j > a && j < s.size() && s[j] == '.') {
        std::size_t b = ++j;
        while (j < s.size() && is_digit(s[j])) ++j;
        if (j > b && j < s.size() && s[j] == ']') {
          i = j + 1;
          continue;
        }
      }
    }
    out.push_back(s[i]);
    ++i;
  }
  std::string collapsed;
  bool space = false;
  for (char c : out) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
    } else {
      if (space && !collapsed.empty()) {
        // No space before closing punctuation left behind by a removed tag.
        if (!(c == '.' || c == ',' || c == '?' || c == '!' || c == ';' || c == ':'))
          collapsed.push_back(' ');
      }
      space = false;
      collapsed.push_back(c);
    }
  }
  return collapsed;
}

}  // namespace patsim::text
