#include "skinlab/error.hpp"

namespace skinlab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::RatioSum: return "RatioSum";
    case ErrorCode::ClassTooSmall: return "ClassTooSmall";
    case ErrorCode::BadTarget: return "BadTarget";
    case ErrorCode::RangeTagMismatch: return "RangeTagMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::WeightsUnavailable: return "WeightsUnavailable";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::EmptyMatrix: return "EmptyMatrix";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::ModelCallFailure: return "ModelCallFailure";
    case ErrorCode::SingularFit: return "SingularFit";
    case ErrorCode::StaleUpstream: return "StaleUpstream";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace skinlab
