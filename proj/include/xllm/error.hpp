// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xllm {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kOrdering = 3,
  kData = 4,
  kDivergence = 5,
};

// Base of every library error; each subclass knows its exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what, ExitCode code)
      : std::runtime_error(what), kind_(std::move(kind)), code_(code) {}

  const std::string& kind() const { return kind_; }
  ExitCode exit_code() const { return code_; }

 private:
  std::string kind_;
  ExitCode code_;
};

#define XLLM_DEFINE_ERROR(Name, kind, code)                \
  class Name : public Error {                              \
   public:                                                 \
    explicit Name(const std::string& what)                 \
        : Error(kind, what, code) {}                       \
  };

XLLM_DEFINE_ERROR(DimensionError, "dimension error", ExitCode::kData)
XLLM_DEFINE_ERROR(ShapeError, "shape error", ExitCode::kData)
XLLM_DEFINE_ERROR(LengthError, "length error", ExitCode::kData)
XLLM_DEFINE_ERROR(ConfigError, "configuration error", ExitCode::kData)
XLLM_DEFINE_ERROR(CheckpointError, "checkpoint error", ExitCode::kData)
XLLM_DEFINE_ERROR(VocabularyError, "vocabulary error", ExitCode::kData)
XLLM_DEFINE_ERROR(DataError, "data error", ExitCode::kData)
XLLM_DEFINE_ERROR(UndefinedRateError, "undefined-rate error", ExitCode::kData)
XLLM_DEFINE_ERROR(UndefinedRatioError, "undefined-ratio error", ExitCode::kData)
XLLM_DEFINE_ERROR(OrderingError, "ordering error", ExitCode::kOrdering)
XLLM_DEFINE_ERROR(NumericalError, "numerical error", ExitCode::kDivergence)
XLLM_DEFINE_ERROR(DegenerateWeightError, "degenerate-weight error",
                  ExitCode::kDivergence)
XLLM_DEFINE_ERROR(DivergenceError, "divergence error", ExitCode::kDivergence)
XLLM_DEFINE_ERROR(InvariantViolation, "internal invariant violation",
                  ExitCode::kFailure)

#undef XLLM_DEFINE_ERROR

// Throws E with `what` unless `cond` holds.
template <typename E>
inline void require(bool cond, const std::string& what) {
  if (!cond) throw E(what);
}

}  // namespace xllm
