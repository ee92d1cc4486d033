#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deemd {

enum class ErrorKind {
  MissingColumn,
  DuplicateSampleId,
  MalformedRow,
  InsufficientSamples,
  DimensionMismatch,
  EmptyInput,
  ChannelMismatch,
  GridMismatch,
  MissingCount,
  ShapeMismatch,
  DomainError,
  RankOutOfRange,
  DegenerateLabels,
  DegenerateData,
  NegativeMoi,
  IoError,
  CheckpointMismatch,
  InvalidConfig,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` carries the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

/// Median with the even-size convention: mean of the two central order
/// statistics. Throws EmptyInput on an empty set.
double median(std::span<const double> values);

/// r-th greatest element, 1-based. Throws RankOutOfRange unless 1 <= r <= n.
double kth_greatest(std::span<const double> values, std::size_t r);

}  // namespace deemd
