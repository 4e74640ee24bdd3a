#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace skinlab {

enum class ErrorCode {
  MissingColumn,
  EmptyManifest,
  DuplicateId,
  RatioSum,
  ClassTooSmall,
  BadTarget,
  RangeTagMismatch,
  IoFailure,
  BadSpec,
  ShapeMismatch,
  Diverged,
  InsufficientData,
  CheckpointMismatch,
  MissingCheckpoint,
  WeightsUnavailable,
  EmptySplit,
  UnknownLabel,
  EmptyMatrix,
  DegenerateLabels,
  ModelCallFailure,
  SingularFit,
  StaleUpstream,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this exception; `code()` is the
// machine-readable kind, `what()` carries the human detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code), detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace skinlab
