#ifndef LMM_CLI_HPP
#define LMM_CLI_HPP

#include <string>
#include <vector>

namespace lmm::cli {

/// Exit codes: 0 success, 2 usage or configuration error, 3 data error,
/// 4 numeric failure during training. Failures print one JSON line to stderr.
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace lmm::cli

#endif  // LMM_CLI_HPP
