#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patsim/rng.hpp"
#include "patsim/text.hpp"

namespace patsim {

using Embedding = std::vector<double>;

// Embedding port. Implementations must return the same vector for the same
// input string.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Embedding embed(std::string_view text) const = 0;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Cosine similarity; nullopt when either vector has zero norm.
inline std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return dot(a, b) / (na * nb);
}

/// Offline stand-in for a sentence-embedding service: character trigrams of
/// the normalized text are hashed into buckets and projected to `dims`
/// dimensions by a seeded random +/-1 matrix, then unit-normalized.
class HashEmbedder final : public Embedder {
 public:
  explicit HashEmbedder(std::size_t dims = 256, std::uint64_t seed = 17, std::size_t buckets = 4096)
      : dims_(dims), seed_(seed), buckets_(buckets) {}

  Embedding embed(std::string_view s) const override {
    Embedding v(dims_, 0.0);
    const std::string t = "  " + text::normalize_term(s) + "  ";
    if (t.size() <= 4) return v;
    for (std::size_t i = 0; i + 3 <= t.size(); ++i) {
      const auto bucket = stable_hash(std::string_view(t).substr(i, 3)) % buckets_;
      const std::uint64_t row = mix_seed(seed_, bucket);
      for (std::size_t d = 0; d < dims_; d += 64) {
        const std::uint64_t bits = mix_seed(row, d);
        for (std::size_t k = 0; k < 64 && d + k < dims_; ++k)
          v[d + k] += ((bits >> k) & 1U) ? 1.0 : -1.0;
      }
    }
    const double n = norm(v);
    if (n > 0.0)
      for (auto& x : v) x /= n;
    return v;
  }

 private:
  std::size_t dims_;
  std::uint64_t seed_;
  std::size_t buckets_;
};

}  // namespace patsim
