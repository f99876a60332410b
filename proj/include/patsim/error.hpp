#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace patsim {

// Base of every error the toolkit throws. "Undefined result" conditions
// (zero-support risk ratios, degenerate kappa, ...) are reported through
// std::optional instead and never reach this hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

// Cycle in the concept hierarchy.
class StructureError : public Error {
 public:
  StructureError(std::string code, const std::string& what)
      : Error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Parent reference that does not resolve.
class ResolutionError : public Error {
 public:
  using Error::Error;
};

class IngestError : public Error {
 public:
  IngestError(std::size_t row, const std::string& what)
      : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class AlignmentError : public Error {
 public:
  AlignmentError(std::vector<std::string> orphans, const std::string& what)
      : Error(what), orphans_(std::move(orphans)) {}
  const std::vector<std::string>& orphans() const noexcept { return orphans_; }

 private:
  std::vector<std::string> orphans_;
};

class AssemblyError : public Error {
 public:
  using Error::Error;
};

// Transport or protocol failure talking to a chat / decision-aid / classifier port.
class PortError : public Error {
 public:
  using Error::Error;
};

}  // namespace patsim
