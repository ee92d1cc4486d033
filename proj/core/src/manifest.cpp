#include "deemd/manifest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "deemd/common.hpp"

namespace deemd {
namespace {

constexpr std::array<std::string_view, 8> kFixedColumns = {
    "sample_id", "plate", "well", "site", "condition", "treatment", "concentration", "split"};

std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::Mock: return "Mock";
    case Condition::UVInactivated: return "UVInactivated";
    case Condition::Infected: return "Infected";
  }
  return "?";
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::UntreatedTest: return "untreated_test";
    case Split::TreatedTest: return "treated_test";
  }
  return "?";
}

std::optional<Condition> parse_condition(std::string_view text) {
  const std::string t = lower(text);
  if (t == "mock") return Condition::Mock;
  if (t == "uvinactivated" || t == "uv_inactivated" || t == "uv inactivated") return Condition::UVInactivated;
  if (t == "infected" || t == "active") return Condition::Infected;
  return std::nullopt;
}

std::optional<Split> parse_split(std::string_view text) {
  const std::string t = lower(text);
  if (t == "train") return Split::Train;
  if (t == "validation" || t == "val") return Split::Validation;
  if (t == "untreated_test") return Split::UntreatedTest;
  if (t == "treated_test") return Split::TreatedTest;
  return std::nullopt;
}

std::optional<ClassLabel> Manifest::label(const SampleRecord& r) const {
  switch (r.condition) {
    case Condition::Infected: return ClassLabel::Positive;
    case Condition::Mock: return ClassLabel::Negative;
    case Condition::UVInactivated:
      return merge_controls ? std::optional(ClassLabel::Negative) : std::nullopt;
  }
  return std::nullopt;
}

std::filesystem::path Manifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : root / p;
}

std::vector<std::filesystem::path> Manifest::resolved_paths(const SampleRecord& r) const {
  std::vector<std::filesystem::path> out;
  out.reserve(r.image_paths.size());
  for (const auto& p : r.image_paths) out.push_back(resolve(p));
  return out;
}

const SampleRecord* Manifest::find(std::string_view sample_id) const {
  for (const auto& r : records)
    if (r.sample_id == sample_id) return &r;
  return nullptr;
}

std::vector<const SampleRecord*> Manifest::in_split(Split s) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

Manifest load_manifest(const std::filesystem::path& path, bool merge_controls) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open manifest " + path.string());

  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::MissingColumn, "manifest has no header row");
  const auto header = split_csv_line(line);

  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column[header[i]] = i;
  for (auto name : kFixedColumns) {
    if (!column.count(std::string(name))) fail(ErrorKind::MissingColumn, std::string(name));
  }
  std::vector<std::size_t> channel_columns;
  for (int c = 1;; ++c) {
    auto it = column.find("channel_" + std::to_string(c));
    if (it == column.end()) break;
    channel_columns.push_back(it->second);
  }
  if (channel_columns.empty()) fail(ErrorKind::MissingColumn, "channel_1");

  Manifest m;
  m.channel_count = static_cast<int>(channel_columns.size());
  m.merge_controls = merge_controls;
  m.root = path.parent_path();

  std::set<std::string> seen;
  std::size_t row_index = 0;
  while (std::getline(in, line)) {
    ++row_index;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    auto bad = [&](const std::string& why) {
      fail(ErrorKind::MalformedRow, "row " + std::to_string(row_index) + ": " + why);
    };
    if (cells.size() != header.size()) bad("expected " + std::to_string(header.size()) + " cells");
    auto cell = [&](std::string_view name) -> const std::string& {
      return cells[column.at(std::string(name))];
    };

    SampleRecord r;
    r.sample_id = cell("sample_id");
    if (r.sample_id.empty()) bad("empty sample_id");
    r.plate = cell("plate");
    r.well = cell("well");
    auto site = parse_int(cell("site"));
    if (!site || *site < 1) bad("site '" + cell("site") + "'");
    r.site = *site;
    auto cond = parse_condition(cell("condition"));
    if (!cond) bad("condition '" + cell("condition") + "'");
    r.condition = *cond;
    if (!cell("treatment").empty()) r.treatment = cell("treatment");
    if (!cell("concentration").empty()) {
      auto conc = parse_double(cell("concentration"));
      if (!conc || !(*conc > 0.0) || !std::isfinite(*conc))
        bad("concentration '" + cell("concentration") + "'");
      r.concentration = conc;
    }
    if (r.treatment.has_value() != r.concentration.has_value())
      bad("treatment and concentration must both be present or both absent");
    if (r.treated() && r.condition != Condition::Infected) bad("treated sample must be Infected");
    if (!cell("split").empty()) {
      auto s = parse_split(cell("split"));
      if (!s) bad("split '" + cell("split") + "'");
      if ((*s == Split::TreatedTest) != r.treated()) bad("split inconsistent with treatment");
      r.split = s;
    }
    if (r.treated()) r.split = Split::TreatedTest;
    for (auto idx : channel_columns) {
      if (cells[idx].empty()) bad("missing channel path");
      r.image_paths.emplace_back(cells[idx]);
    }

    if (!seen.insert(r.sample_id).second) fail(ErrorKind::DuplicateSampleId, r.sample_id);
    if (!merge_controls && r.condition == Condition::UVInactivated) {
      spdlog::info("manifest: dropping unlabeled UVInactivated sample {} (controls not merged)",
                   r.sample_id);
      continue;
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write manifest " + path.string());
  for (auto name : kFixedColumns) out << name << ',';
  for (int c = 1; c <= manifest.channel_count; ++c)
    out << "channel_" << c << (c == manifest.channel_count ? "\n" : ",");
  for (const auto& r : manifest.records) {
    out << r.sample_id << ',' << r.plate << ',' << r.well << ',' << r.site << ','
        << to_string(r.condition) << ',' << r.treatment.value_or("") << ','
        << (r.concentration ? format_double(*r.concentration) : "") << ','
        << (r.split ? to_string(*r.split) : "") << ',';
    for (std::size_t c = 0; c < r.image_paths.size(); ++c)
      out << r.image_paths[c].generic_string() << (c + 1 == r.image_paths.size() ? "\n" : ",");
  }
  if (!out) fail(ErrorKind::IoError, "write failed for " + path.string());
}

Manifest split_dataset(const Manifest& manifest, std::uint64_t seed, SplitFractions fractions) {
  const std::array<double, 3> weights = {fractions.train, fractions.validation,
                                         fractions.untreated_test};
  const double total = weights[0] + weights[1] + weights[2];
  if (!(total > 0.0) || std::any_of(weights.begin(), weights.end(), [](double w) { return w < 0; }))
    fail(ErrorKind::InvalidConfig, "split fractions must be non-negative with positive sum");

  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.treated()) continue;
    auto label = manifest.label(r);
    if (!label) fail(ErrorKind::MalformedRow, "untreated sample without label: " + r.sample_id);
    by_class[static_cast<int>(*label)].push_back(i);
  }
  const std::size_t per_class = std::min(by_class[0].size(), by_class[1].size());

  // Largest-remainder apportionment of per_class across the three splits.
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainders{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = static_cast<double>(per_class) * weights[s] / total;
    counts[s] = static_cast<std::size_t>(std::floor(exact));
    remainders[s] = exact - std::floor(exact);
    assigned += counts[s];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remainders[a] > remainders[b]; });
  for (int i = 0; assigned < per_class; i = (i + 1) % 3) {
    if (weights[order[i]] > 0) {
      ++counts[order[i]];
      ++assigned;
    }
  }
  for (int s = 0; s < 3; ++s) {
    if (weights[s] > 0 && counts[s] == 0) {
      fail(ErrorKind::InsufficientSamples,
           std::to_string(per_class) + " balanced samples per class cannot fill split " +
               std::string(to_string(static_cast<Split>(s))));
    }
  }

  Manifest out = manifest;
  std::vector<bool> keep(manifest.records.size(), true);
  for (int cls = 0; cls < 2; ++cls) {
    auto idx = by_class[cls];
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(cls) + 1);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t j = 0; j < counts[s]; ++j) out.records[idx[pos++]].split = static_cast<Split>(s);
    }
    for (; pos < idx.size(); ++pos) {
      keep[idx[pos]] = false;
      spdlog::info("split: dropping surplus {} sample {} to keep classes balanced",
                   cls == 1 ? "c+" : "c-", manifest.records[idx[pos]].sample_id);
    }
  }
  std::vector<SampleRecord> records;
  records.reserve(out.records.size());
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    if (!keep[i]) continue;
    if (out.records[i].treated()) out.records[i].split = Split::TreatedTest;
    records.push_back(std::move(out.records[i]));
  }
  out.records = std::move(records);
  return out;
}

}  // namespace deemd
