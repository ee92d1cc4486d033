#include "deemd/common.hpp"

#include <algorithm>
#include <functional>

namespace deemd {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::DuplicateSampleId: return "DuplicateSampleId";
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::ChannelMismatch: return "ChannelMismatch";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::MissingCount: return "MissingCount";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::RankOutOfRange: return "RankOutOfRange";
    case ErrorKind::DegenerateLabels: return "DegenerateLabels";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::NegativeMoi: return "NegativeMoi";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

double median(std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::EmptyInput, "median of empty set");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double kth_greatest(std::span<const double> values, std::size_t r) {
  if (r < 1 || r > values.size()) {
    fail(ErrorKind::RankOutOfRange,
         "rank " + std::to_string(r) + " outside [1, " + std::to_string(values.size()) + "]");
  }
  std::vector<double> v(values.begin(), values.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(r - 1), v.end(),
                   std::greater<>());
  return v[r - 1];
}

}  // namespace deemd
