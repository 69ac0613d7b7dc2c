#pragma once

#include <stdexcept>
#include <string>

namespace fixattn {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kNumerical = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kUsage)
      : std::runtime_error(what), code_(code) {}

  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

#define FIXATTN_DEFINE_ERROR(Name, Code)                                  \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(#Name ": " + what, Code) {} \
  }

FIXATTN_DEFINE_ERROR(UsageError, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(ConfigError, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(InvalidKind, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(InvalidLength, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(EmptySupport, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(ShapeError, ExitCode::kUsage);
FIXATTN_DEFINE_ERROR(InvalidInput, ExitCode::kData);
FIXATTN_DEFINE_ERROR(LengthError, ExitCode::kData);
FIXATTN_DEFINE_ERROR(SegmentationMismatch, ExitCode::kData);
FIXATTN_DEFINE_ERROR(CorpusError, ExitCode::kData);
FIXATTN_DEFINE_ERROR(EncodingError, ExitCode::kData);
FIXATTN_DEFINE_ERROR(NumericalError, ExitCode::kNumerical);

#undef FIXATTN_DEFINE_ERROR

}  // namespace fixattn
