#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gadt3 {

// Configuration or argument problems. The CLI maps these to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (graph files, checkpoints). Exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced during a forward computation. Exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using WarningHandler = std::function<void(std::string_view)>;

// Installs a process-wide sink for non-fatal warnings and returns the
// previous one. The default handler writes to stderr.
WarningHandler set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

}  // namespace gadt3
