#include "crossmpi/errors.hpp"

namespace crossmpi {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kMissingInput: return "missing_input";
    case ErrorCode::kMissingModel: return "missing_model";
    case ErrorCode::kMalformedConfig: return "malformed_config";
    case ErrorCode::kCheckpointVersion: return "checkpoint_version";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

}  // namespace crossmpi
