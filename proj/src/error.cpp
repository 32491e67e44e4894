#include "locfuse/error.hpp"

namespace locfuse {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kDegenerateQuaternion: return "degenerate quaternion";
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kStaleState: return "stale state";
    case ErrorCode::kUnderConstrained: return "under-constrained";
    case ErrorCode::kLocalizationFailure: return "localization failure";
    case ErrorCode::kInsufficientMatches: return "insufficient matches";
    case ErrorCode::kIo: return "i/o";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kStage: return "stage failure";
  }
  return "unknown";
}

}  // namespace locfuse
