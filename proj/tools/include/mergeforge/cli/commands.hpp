// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace mergeforge::cli {

/// Process exit statuses.
enum ExitCode : int {
    kExitOk = 0,
    kExitValidation = 1,
    kExitIo = 2,
    kExitStats = 3,
};

int cmd_merge(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err);
int cmd_search(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err);
int cmd_validate(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err);

struct ReportOptions {
    std::vector<std::filesystem::path> score_tables;
    /// Require and print the forgetting score.
    bool forgetting = false;
    /// Search logs or merge run-metadata files to tabulate runtimes from.
    std::vector<std::filesystem::path> runtime_logs;
    bool json = false;
};

int cmd_report(const ReportOptions& options, std::ostream& out, std::ostream& err);

/// Full command-line entry point (argument parsing, thread configuration,
/// dispatch).
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

} // namespace mergeforge::cli
