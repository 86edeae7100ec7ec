#pragma once

#include <stdexcept>
#include <string>

namespace pcv {

// Invalid run configuration or model configuration. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataErrorCode {
  kBadMagic,
  kTruncatedPayload,
  kUnsupportedChannels,
  kTrailingBytes,
  kBadHeader,
  kMissingFile,
  kNonContiguousLabels,
  kUnknownSplit,
  kMalformedManifest,
  kEmptySplit,
  kShapeMismatch,
  kIo,
};

const char* to_string(DataErrorCode code);

// Malformed or inconsistent dataset content. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  DataError(DataErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  DataErrorCode code() const { return code_; }

 private:
  DataErrorCode code_;
};

// Non-finite loss or activation. CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const char* to_string(DataErrorCode code) {
  switch (code) {
    case DataErrorCode::kBadMagic: return "bad magic";
    case DataErrorCode::kTruncatedPayload: return "truncated payload";
    case DataErrorCode::kUnsupportedChannels: return "unsupported channel count";
    case DataErrorCode::kTrailingBytes: return "trailing bytes";
    case DataErrorCode::kBadHeader: return "bad header";
    case DataErrorCode::kMissingFile: return "missing file";
    case DataErrorCode::kNonContiguousLabels: return "non-contiguous labels";
    case DataErrorCode::kUnknownSplit: return "unknown split";
    case DataErrorCode::kMalformedManifest: return "malformed manifest";
    case DataErrorCode::kEmptySplit: return "empty split";
    case DataErrorCode::kShapeMismatch: return "shape mismatch";
    case DataErrorCode::kIo: return "io error";
  }
  return "data error";
}

}  // namespace pcv
