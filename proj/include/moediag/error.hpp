#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moediag {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metric input outside the operation's domain (all-zero counts, constant ranks...).
class MetricError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or scenario description.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Structural problem in analysis inputs (layer mismatch, overlapping chunks).
class AnalysisError : public Error {
 public:
  using Error::Error;
};

// An analysis needs full probability vectors but the trace only has top-K.
class DegradedModeError : public Error {
 public:
  using Error::Error;
};

// Trace content violating a format rule or invariant.
//
// `line` is 1-based for line-delimited traces and 0 when not applicable;
// `offset` is a byte offset into the file when known.
class TraceError : public Error {
 public:
  TraceError(std::string rule, std::string field = {}, std::size_t line = 0,
             std::size_t offset = npos)
      : Error(compose(rule, field, line, offset)),
        rule_(std::move(rule)),
        field_(std::move(field)),
        line_(line),
        offset_(offset) {}

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  const std::string& rule() const noexcept { return rule_; }
  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  static std::string compose(const std::string& rule, const std::string& field,
                             std::size_t line, std::size_t offset) {
    std::string msg;
    if (line != 0) msg += "line " + std::to_string(line) + ": ";
    if (offset != npos) msg += "byte " + std::to_string(offset) + ": ";
    if (!field.empty()) msg += "field '" + field + "': ";
    msg += rule;
    return msg;
  }

  std::string rule_;
  std::string field_;
  std::size_t line_;
  std::size_t offset_;
};

}  // namespace moediag
