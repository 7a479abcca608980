#pragma once

#include <atomic>
#include <iosfwd>
#include <string>
#include <vector>

namespace d2g::cli {

// Process exit codes. Each failure class has its own code and a one-line
// "d2g: <class>: <detail>" diagnostic on stderr.
enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingFile = 3,
  kBadConfig = 4,
  kIncompatibleVersion = 5,
  kBadFormat = 6,
  kNumerical = 7,
  kInterrupted = 130,
};

inline constexpr const char* kDataRootEnv = "D2G_DATA_ROOT";

// Runs one command line (args exclude the program name). Long-running
// commands poll `stop` and return kInterrupted once it is set.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const std::atomic<bool>* stop = nullptr);

}  // namespace d2g::cli
