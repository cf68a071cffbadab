#pragma once

#include <stdexcept>
#include <string>

namespace crossmpi {

/// Error categories surfaced by the CLI as distinct exit codes.
enum class ErrorCode : int {
  kInvalidArgument = 2,
  kMissingInput = 3,
  kMissingModel = 4,
  kMalformedConfig = 5,
  kCheckpointVersion = 6,
  kFormat = 7,
  kNumeric = 8,
  kIo = 9,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace crossmpi
