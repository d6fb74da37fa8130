// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mergeforge {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    DtypeMismatch,
    KeyMismatch,
    MalformedHeader,
    OverlappingRanges,
    UnsupportedDtype,
    MissingShard,
    DuplicateKey,
    Io,
    InvalidRecipe,
    UnknownMethod,
    KindMismatch,
    AsymmetricGram,
    NegativeFisher,
    InvalidMask,
    MissingStats,
    BaseModelMismatch,
    GramShapeMismatch,
    SolverFailure,
    ConsensusRequiresTwoTasks,
    ZeroFinetunedScore,
    MissingScore,
    InvalidScoreTable,
    HookFailure,
    SearchFailed,
};

std::string_view to_string(ErrorCode code);

/// Broad failure class, used by the CLI to pick an exit status.
enum class ErrorCategory { Validation, Io, Stats, Evaluation };

ErrorCategory category_of(ErrorCode code);

/// Every failure raised by the library. `key()` names the offending parameter
/// or path when there is one; `details()` carries extra structured lines such
/// as the first mismatched keys of an incompatible checkpoint set.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string message, std::string key = {},
          std::vector<std::string> details = {});

    ErrorCode code() const noexcept { return mCode; }
    const std::string& key() const noexcept { return mKey; }
    const std::vector<std::string>& details() const noexcept { return mDetails; }

private:
    ErrorCode mCode;
    std::string mKey;
    std::vector<std::string> mDetails;
};

} // namespace mergeforge
