#pragma once
#include <stdexcept>
#include <string>

namespace kinlb {

// Errors carry a symbolic code used by the CLI for exit-status mapping:
// validation errors exit 1, numerical failures exit 2.
struct KinError : std::runtime_error {
  std::string code;
  bool numerical;
  KinError(std::string c, const std::string& msg, bool num)
      : std::runtime_error(c + ": " + msg), code(std::move(c)), numerical(num) {}
};

[[noreturn]] inline void fail_validation(const std::string& code, const std::string& msg) {
  throw KinError(code, msg, false);
}

[[noreturn]] inline void fail_numerical(const std::string& code, const std::string& msg) {
  throw KinError(code, msg, true);
}

}  // namespace kinlb
