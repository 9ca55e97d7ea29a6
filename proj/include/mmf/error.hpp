#pragma once

#include <stdexcept>
#include <string>

namespace mmf {

// Error categories double as CLI exit codes.
enum class ErrorCategory {
  kConfig = 2,
  kData = 3,
  kDivergence = 4,
  kIo = 5,
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kData: return "data";
    case ErrorCategory::kDivergence: return "divergence";
    case ErrorCategory::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message),
        category_(category),
        kind_(std::move(kind)) {}

  ErrorCategory category() const { return category_; }
  int exit_code() const { return static_cast<int>(category_); }
  // Fine-grained error kind, e.g. "dimension", "bad-magic".
  const std::string& kind() const { return kind_; }

 private:
  ErrorCategory category_;
  std::string kind_;
};

#define MMF_DEFINE_ERROR(Name, category, kind)                     \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& message)                      \
        : Error(ErrorCategory::category, kind, message) {}         \
  };

// Shape and contract violations on numeric inputs.
MMF_DEFINE_ERROR(DimensionError, kData, "dimension")
MMF_DEFINE_ERROR(InvalidMaskError, kData, "invalid-mask")
MMF_DEFINE_ERROR(ContractError, kData, "contract")
MMF_DEFINE_ERROR(EmptyModalityError, kData, "empty-modality")
MMF_DEFINE_ERROR(EmptyRecordError, kData, "empty-record")
MMF_DEFINE_ERROR(PatchingError, kData, "patching")
MMF_DEFINE_ERROR(ConsistencyError, kData, "consistency")
MMF_DEFINE_ERROR(UndefinedMetricError, kData, "undefined-metric")
MMF_DEFINE_ERROR(DataError, kData, "data")

MMF_DEFINE_ERROR(ParameterError, kConfig, "parameter")
MMF_DEFINE_ERROR(ConfigError, kConfig, "config")

MMF_DEFINE_ERROR(DivergenceError, kDivergence, "training-divergence")

MMF_DEFINE_ERROR(IoError, kIo, "io")
MMF_DEFINE_ERROR(BadMagicError, kIo, "bad-magic")
MMF_DEFINE_ERROR(VersionMismatchError, kIo, "version-mismatch")
MMF_DEFINE_ERROR(TruncatedError, kIo, "truncated")

#undef MMF_DEFINE_ERROR

}  // namespace mmf
