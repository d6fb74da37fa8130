// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/error.hpp"

namespace mergeforge {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DtypeMismatch: return "DtypeMismatch";
    case ErrorCode::KeyMismatch: return "KeyMismatch";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::OverlappingRanges: return "OverlappingRanges";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::MissingShard: return "MissingShard";
    case ErrorCode::DuplicateKey: return "DuplicateKey";
    case ErrorCode::Io: return "Io";
    case ErrorCode::InvalidRecipe: return "InvalidRecipe";
    case ErrorCode::UnknownMethod: return "UnknownMethod";
    case ErrorCode::KindMismatch: return "KindMismatch";
    case ErrorCode::AsymmetricGram: return "AsymmetricGram";
    case ErrorCode::NegativeFisher: return "NegativeFisher";
    case ErrorCode::InvalidMask: return "InvalidMask";
    case ErrorCode::MissingStats: return "MissingStats";
    case ErrorCode::BaseModelMismatch: return "BaseModelMismatch";
    case ErrorCode::GramShapeMismatch: return "GramShapeMismatch";
    case ErrorCode::SolverFailure: return "SolverFailure";
    case ErrorCode::ConsensusRequiresTwoTasks: return "ConsensusRequiresTwoTasks";
    case ErrorCode::ZeroFinetunedScore: return "ZeroFinetunedScore";
    case ErrorCode::MissingScore: return "MissingScore";
    case ErrorCode::InvalidScoreTable: return "InvalidScoreTable";
    case ErrorCode::HookFailure: return "HookFailure";
    case ErrorCode::SearchFailed: return "SearchFailed";
    }
    return "Unknown";
}

ErrorCategory category_of(ErrorCode code) {
    switch (code) {
    case ErrorCode::MalformedHeader:
    case ErrorCode::OverlappingRanges:
    case ErrorCode::UnsupportedDtype:
    case ErrorCode::MissingShard:
    case ErrorCode::DuplicateKey:
    case ErrorCode::Io:
        return ErrorCategory::Io;
    case ErrorCode::KindMismatch:
    case ErrorCode::AsymmetricGram:
    case ErrorCode::NegativeFisher:
    case ErrorCode::InvalidMask:
    case ErrorCode::MissingStats:
    case ErrorCode::BaseModelMismatch:
    case ErrorCode::GramShapeMismatch:
    case ErrorCode::SolverFailure:
        return ErrorCategory::Stats;
    case ErrorCode::ZeroFinetunedScore:
    case ErrorCode::MissingScore:
    case ErrorCode::InvalidScoreTable:
    case ErrorCode::HookFailure:
    case ErrorCode::SearchFailed:
        return ErrorCategory::Evaluation;
    default:
        return ErrorCategory::Validation;
    }
}

Error::Error(ErrorCode code, std::string message, std::string key, std::vector<std::string> details)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      mCode(code), mKey(std::move(key)), mDetails(std::move(details)) {
}

} // namespace mergeforge
