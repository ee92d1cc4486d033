#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace deemd {

enum class Condition { Mock, UVInactivated, Infected };
enum class Split { Train, Validation, UntreatedTest, TreatedTest };

/// Binary class: c+ (infected) is 1, c- (non-infected) is 0.
enum class ClassLabel : int { Negative = 0, Positive = 1 };

std::string_view to_string(Condition c);
std::string_view to_string(Split s);
std::optional<Condition> parse_condition(std::string_view text);
std::optional<Split> parse_split(std::string_view text);

struct SampleRecord {
  std::string sample_id;
  std::string plate;
  std::string well;
  int site = 1;
  Condition condition = Condition::Mock;
  std::optional<std::string> treatment;
  std::optional<double> concentration;  // micromolar
  std::vector<std::filesystem::path> image_paths;  // one per channel, as written in the file
  std::optional<Split> split;  // empty until split_dataset runs (untreated only)

  bool treated() const { return treatment.has_value(); }
};

struct Manifest {
  std::vector<SampleRecord> records;
  int channel_count = 0;
  bool merge_controls = true;
  std::filesystem::path root;  // relative image paths resolve against this

  /// Label rule. With merged controls Mock and UVInactivated are both c-;
  /// without merging only Mock is c- and UVInactivated has no label.
  std::optional<ClassLabel> label(const SampleRecord& r) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::vector<std::filesystem::path> resolved_paths(const SampleRecord& r) const;
  const SampleRecord* find(std::string_view sample_id) const;
  std::vector<const SampleRecord*> in_split(Split s) const;
};

/// Reads `sample_id,plate,well,site,condition,treatment,concentration,split,
/// channel_1..channel_C`. Empty cells mean absent. Treated rows are assigned
/// to TreatedTest.
Manifest load_manifest(const std::filesystem::path& path, bool merge_controls);

void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct SplitFractions {
  double train = 0.6;
  double validation = 0.2;
  double untreated_test = 0.2;
};

/// Seeded class-stratified assignment of untreated records to
/// Train/Validation/UntreatedTest; treated records go to TreatedTest.
Manifest split_dataset(const Manifest& manifest, std::uint64_t seed, SplitFractions fractions);

}  // namespace deemd
