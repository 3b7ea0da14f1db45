#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace postsel {

enum class ErrorKind {
  InvalidRegion,
  DegenerateMass,
  SingularCovariance,
  InvalidInit,
  NoSelection,
  InsufficientSamples,
  NotSelected,
  BracketFailure,
  NonConvergence,
  EmptyFold,
  SaturatedModel,
  RankDeficient,
  DimensionTooLarge,
  InvalidArgument,
  Parse,
  Config,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidRegion: return "invalid-region";
    case ErrorKind::DegenerateMass: return "degenerate-mass";
    case ErrorKind::SingularCovariance: return "singular-covariance";
    case ErrorKind::InvalidInit: return "invalid-init";
    case ErrorKind::NoSelection: return "no-selection";
    case ErrorKind::InsufficientSamples: return "insufficient-samples";
    case ErrorKind::NotSelected: return "not-selected";
    case ErrorKind::BracketFailure: return "bracket-failure";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::EmptyFold: return "empty-fold";
    case ErrorKind::SaturatedModel: return "saturated-model";
    case ErrorKind::RankDeficient: return "rank-deficient";
    case ErrorKind::DimensionTooLarge: return "dimension-too-large";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Parse: return "parse-error";
    case ErrorKind::Config: return "config-error";
  }
  return "unknown";
}

// All library failures are reported through this type; `kind()` is what
// callers (and the CLI exit-code mapping) switch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // The message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace postsel
