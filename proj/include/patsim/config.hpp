#pragma once

// Single key-value configuration file shared by every CLI verb.
//
//   # comment
//   key = value
//
// Relative paths are resolved against the directory holding the file.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "patsim/error.hpp"
#include "patsim/persona.hpp"

namespace patsim {

inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "7"},
      {"ontology", "ontology.tsv"},
      {"cohort", "cohort.jsonl"},
      {"personas", ""},  // empty: bundled persona data
      {"judge_template", ""},
      {"outcome", "RESP_FLUOXETINE"},
      {"candidates", "400"},
      {"top_k", "500"},
      {"rr_high", "7"},
      {"rr_low", "0.6666666666666666"},
      {"diversity_threshold", "1.5"},
      {"max_residual_additions", "5"},
      {"gate_mode", "aggregate"},
      {"cohort_size", "100"},
      {"plan_n", "100"},
      {"plan_p", ""},  // empty: observed response rate of the outcome
      {"perturb_fraction", "0.16"},
      {"perturb_pool", "20"},
      {"perturb_min_distance", "3"},
      {"perturb_profile_fraction", "1.0"},
      {"embed_dims", "256"},
      {"embed_seed", "17"},
      {"aid_depth", "20"},
      {"aid_accept", "0.35"},
      {"aid_top_k", "150"},
      {"workers", "1"},
      {"bootstrap_resamples", "10000"},
  };
  return d;
}

class Config {
 public:
  Config() = default;

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    Config c;
    c.base_ = path.parent_path();
    for (const auto& [k, v] : parse_key_values(in, path.string())) c.set(k, v);
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!config_defaults().contains(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  std::string str(const std::string& key) const {
    if (auto it = values_.find(key); it != values_.end()) return it->second;
    auto d = config_defaults().find(key);
    if (d == config_defaults().end()) throw ConfigError("unknown config key '" + key + "'");
    return d->second;
  }

  double real(const std::string& key) const {
    const auto s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  std::uint64_t count(const std::string& key) const {
    const auto s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }

  // Empty value yields an empty path.
  std::filesystem::path path(const std::string& key) const {
    const auto s = str(key);
    if (s.empty()) return {};
    std::filesystem::path p(s);
    return p.is_absolute() ? p : base_ / p;
  }

  const std::filesystem::path& base() const noexcept { return base_; }
  void set_base(std::filesystem::path p) { base_ = std::move(p); }

 private:
  std::map<std::string, std::string> values_;
  std::filesystem::path base_;
};

}  // namespace patsim
