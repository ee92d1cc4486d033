#include "deemd/synthscreen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "deemd/common.hpp"
#include "deemd/parallel.hpp"

namespace deemd {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string padded(int value, int width) {
  std::ostringstream s;
  s << std::setw(width) << std::setfill('0') << value;
  return s.str();
}

std::string format_number(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  return cells;
}

}  // namespace

double poisson_infection_probability(double moi) {
  if (!(moi >= 0.0)) fail(ErrorKind::NegativeMoi, "moi must be >= 0");
  return -std::expm1(-moi);
}

void validate(const SynthConfig& cfg) {
  auto bad = [](const std::string& why) { fail(ErrorKind::InvalidConfig, "synth: " + why); };
  if (cfg.moi < 0.0) fail(ErrorKind::NegativeMoi, "moi must be >= 0");
  if (cfg.image_size <= 0 || cfg.channels < 2) bad("need a positive image size and >= 2 channels");
  if (cfg.min_cells < 0 || cfg.max_cells < cfg.min_cells) bad("cell count range");
  if (cfg.replicates < 1) bad("replicates must be >= 1");
  if (cfg.sites_per_well != 1 && cfg.sites_per_well != 4) bad("sites_per_well must be 1 or 4");
  for (const auto& t : cfg.treatments) {
    if (t.name.empty() || t.concentrations.empty() ||
        t.concentrations.size() != t.effectiveness.size())
      bad("treatment '" + t.name + "' needs matching concentrations and effectiveness");
    for (double q : t.effectiveness)
      if (!(q >= 0.0 && q <= 1.0)) bad("effectiveness outside [0,1] for " + t.name);
    for (double c : t.concentrations)
      if (!(c > 0.0)) bad("concentrations must be positive for " + t.name);
  }
  cfg.grid.validate(cfg.image_size, cfg.image_size);
}

std::vector<SampleSpec> plan_samples(const SynthConfig& cfg) {
  validate(cfg);
  std::vector<SampleSpec> specs;
  std::uint64_t index = 0;
  auto add_well = [&](const std::string& well, Condition cond, std::optional<std::string> treatment,
                      std::optional<double> conc, double effectiveness) {
    for (int site = 1; site <= cfg.sites_per_well; ++site) {
      SampleSpec s;
      s.index = index++;
      s.effectiveness = effectiveness;
      s.record.sample_id = well + "_s" + std::to_string(site);
      s.record.plate = "SYN1";
      s.record.well = well;
      s.record.site = site;
      s.record.condition = cond;
      s.record.treatment = treatment;
      s.record.concentration = conc;
      if (treatment) s.record.split = Split::TreatedTest;
      for (int c = 1; c <= cfg.channels; ++c)
        s.record.image_paths.emplace_back("images/" + s.record.sample_id + "_ch" + std::to_string(c) + ".png");
      specs.push_back(std::move(s));
    }
  };
  for (int i = 0; i < cfg.mock_samples; ++i) add_well("M" + padded(i, 4), Condition::Mock, {}, {}, 0.0);
  for (int i = 0; i < cfg.uv_samples; ++i) add_well("V" + padded(i, 4), Condition::UVInactivated, {}, {}, 0.0);
  for (int i = 0; i < cfg.infected_samples; ++i) add_well("I" + padded(i, 4), Condition::Infected, {}, {}, 0.0);
  for (const auto& t : cfg.treatments) {
    for (std::size_t d = 0; d < t.concentrations.size(); ++d)
      for (int r = 0; r < cfg.replicates; ++r)
        add_well(t.name + "_d" + std::to_string(d) + "_r" + std::to_string(r), Condition::Infected,
                 t.name, t.concentrations[d], t.effectiveness[d]);
  }
  return specs;
}

std::vector<int> patch_labels(const std::vector<Cell>& cells, const GridConfig& grid, int height,
                              int width) {
  const int n = grid.patch_count(height, width);
  std::vector<int> labels(n, 0);
  for (int j = 0; j < n; ++j) {
    const auto o = patch_origin(grid, width, j);
    for (const auto& c : cells) {
      if (c.infected && c.y >= o.y && c.y < o.y + grid.patch_size && c.x >= o.x &&
          c.x < o.x + grid.patch_size) {
        labels[j] = 1;
        break;
      }
    }
  }
  return labels;
}

RenderedSample render_sample(const SynthConfig& cfg, const SampleSpec& spec) {
  const int size = cfg.image_size;
  std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(spec.index + 1)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  double infection_probability = 0.0;
  double severity = 1.0;
  if (spec.record.condition == Condition::Infected) {
    infection_probability = (1.0 - spec.effectiveness) * poisson_infection_probability(cfg.moi);
    if (spec.record.treated() && cfg.attenuate_treated_cpe) severity = 1.0 - spec.effectiveness;
  }

  const int count = std::uniform_int_distribution<int>(cfg.min_cells, cfg.max_cells)(rng);
  const double margin = cfg.nucleus_radius;
  std::vector<Cell> cells;
  std::vector<std::uint64_t> cell_seeds;
  for (int i = 0; i < count; ++i) {
    Cell c;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      c.y = margin + unit(rng) * (size - 2 * margin);
      c.x = margin + unit(rng) * (size - 2 * margin);
      placed = std::none_of(cells.begin(), cells.end(), [&](const Cell& o) {
        return std::hypot(o.y - c.y, o.x - c.x) < cfg.min_cell_spacing;
      });
    }
    const std::uint64_t cell_seed = rng();
    if (!placed) continue;
    cells.push_back(c);
    cell_seeds.push_back(cell_seed);
  }
  const std::uint64_t noise_seed = rng();

  RenderedSample out;
  out.image = Image(cfg.channels, size, size, 0.0);
  Image& img = out.image;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    Cell& c = cells[i];
    std::mt19937_64 cell_rng(cell_seeds[i]);
    const double infect_coin = unit(cell_rng);
    const double loss_coin = unit(cell_rng);
    const double nucleus_scale = 0.85 + 0.3 * unit(cell_rng);
    const double brightness = 0.9 + 0.2 * unit(cell_rng);
    c.infected = infect_coin < infection_probability;
    c.nucleus_lost = c.infected && loss_coin < cfg.cell_loss;

    const double rn = cfg.nucleus_radius * nucleus_scale;
    const double sn = 0.6 * rn;
    const double sc = 0.6 * cfg.cell_radius;
    const int reach = static_cast<int>(std::ceil(std::max(3.0 * sc, cfg.cpe_radius + 2.0)));
    const int y0 = std::max(0, static_cast<int>(c.y) - reach), y1 = std::min(size - 1, static_cast<int>(c.y) + reach);
    const int x0 = std::max(0, static_cast<int>(c.x) - reach), x1 = std::min(size - 1, static_cast<int>(c.x) + reach);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double texture = unit(cell_rng);
        const double speckle_coin = unit(cell_rng);
        const double r2 = (y - c.y) * (y - c.y) + (x - c.x) * (x - c.x);
        const double r = std::sqrt(r2);
        if (!c.nucleus_lost)
          img.at(0, y, x) += cfg.nucleus_intensity * brightness * std::exp(-r2 / (2.0 * sn * sn));
        const double cyto = cfg.cytoplasm_intensity * brightness * std::exp(-r2 / (2.0 * sc * sc)) *
                            (0.7 + 0.6 * texture);
        double cpe = 0.0;
        if (c.infected) {
          const double edge = std::clamp((cfg.cpe_radius - r) / 1.5, 0.0, 1.0);
          const double rounded = edge * edge * (3.0 - 2.0 * edge);
          cpe = severity * cfg.cpe_intensity * rounded;
          if (rounded > 0.0 && speckle_coin < cfg.speckle_probability)
            cpe += severity * cfg.speckle_intensity;
        }
        for (int ch = 1; ch < cfg.channels; ++ch) {
          const double channel_gain = 1.0 - 0.15 * ((ch - 1) % 3);
          img.at(ch, y, x) += channel_gain * cyto + cpe;
        }
      }
    }
  }

  std::mt19937_64 noise_rng(noise_seed);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  for (double& v : img.data()) v = std::clamp(v + cfg.background + noise(noise_rng), 0.0, 1.0);

  out.truth.patch_labels = patch_labels(cells, cfg.grid, size, size);
  out.truth.total_cells = static_cast<int>(cells.size());
  out.truth.infected_cells =
      static_cast<int>(std::count_if(cells.begin(), cells.end(), [](const Cell& c) { return c.infected; }));
  out.truth.infected_fraction =
      cells.empty() ? 0.0 : static_cast<double>(out.truth.infected_cells) / static_cast<double>(cells.size());
  out.truth.bag_label = std::any_of(out.truth.patch_labels.begin(), out.truth.patch_labels.end(),
                                    [](int l) { return l == 1; })
                            ? 1
                            : 0;
  out.cells = std::move(cells);
  return out;
}

SynthScreen generate_screen(const SynthConfig& cfg, const std::filesystem::path& out_dir, int jobs) {
  const auto specs = plan_samples(cfg);
  std::filesystem::create_directories(out_dir / "images");

  std::vector<SampleTruth> truths(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) {
    auto rendered = render_sample(cfg, specs[i]);
    for (int c = 0; c < cfg.channels; ++c)
      save_channel(rendered.image, c, out_dir / specs[i].record.image_paths[c], 16);
    truths[i] = std::move(rendered.truth);
  });

  SynthScreen screen;
  screen.manifest.channel_count = cfg.channels;
  screen.manifest.merge_controls = true;
  screen.manifest.root = out_dir;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    screen.manifest.records.push_back(specs[i].record);
    screen.truth.samples[specs[i].record.sample_id] = truths[i];
  }
  for (const auto& t : cfg.treatments) {
    const auto top = std::max_element(t.concentrations.begin(), t.concentrations.end()) - t.concentrations.begin();
    screen.truth.treatment_top_effectiveness[t.name] = t.effectiveness[top];
    if (t.effectiveness[top] >= cfg.planted_threshold) screen.truth.planted_effective.insert(t.name);
  }

  write_manifest(screen.manifest, out_dir / "manifest.csv");
  {
    std::ofstream gt(out_dir / "ground_truth.csv");
    std::ofstream st(out_dir / "samples_truth.csv");
    if (!gt || !st) fail(ErrorKind::IoError, "cannot write ground truth under " + out_dir.string());
    gt << "sample_id,patch_index,instance_label\n";
    st << "sample_id,bag_label,infected_cells,total_cells,infected_fraction\n" << std::setprecision(10);
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& id = specs[i].record.sample_id;
      const auto& t = truths[i];
      for (std::size_t j = 0; j < t.patch_labels.size(); ++j) gt << id << ',' << j << ',' << t.patch_labels[j] << '\n';
      st << id << ',' << t.bag_label << ',' << t.infected_cells << ',' << t.total_cells << ','
         << t.infected_fraction << '\n';
    }
  }
  {
    std::ofstream planted(out_dir / "planted.csv");
    if (!planted) fail(ErrorKind::IoError, "cannot write planted.csv");
    planted << "treatment,concentration,effectiveness,planted_effective\n";
    for (const auto& t : cfg.treatments)
      for (std::size_t d = 0; d < t.concentrations.size(); ++d)
        planted << t.name << ',' << format_number(t.concentrations[d]) << ','
                << format_number(t.effectiveness[d]) << ','
                << (screen.truth.planted_effective.count(t.name) ? 1 : 0) << '\n';
  }
  return screen;
}

SynthGroundTruth load_ground_truth(const std::filesystem::path& dir) {
  SynthGroundTruth truth;
  std::string line;
  {
    std::ifstream st(dir / "samples_truth.csv");
    if (!st) fail(ErrorKind::IoError, "missing samples_truth.csv in " + dir.string());
    std::getline(st, line);
    while (std::getline(st, line)) {
      const auto c = split_line(line);
      if (c.size() != 5) fail(ErrorKind::MalformedRow, "samples_truth.csv: " + line);
      auto& s = truth.samples[c[0]];
      s.bag_label = std::stoi(c[1]);
      s.infected_cells = std::stoi(c[2]);
      s.total_cells = std::stoi(c[3]);
      s.infected_fraction = std::stod(c[4]);
    }
  }
  {
    std::ifstream gt(dir / "ground_truth.csv");
    if (!gt) fail(ErrorKind::IoError, "missing ground_truth.csv in " + dir.string());
    std::getline(gt, line);
    while (std::getline(gt, line)) {
      const auto c = split_line(line);
      if (c.size() != 3) fail(ErrorKind::MalformedRow, "ground_truth.csv: " + line);
      auto& labels = truth.samples[c[0]].patch_labels;
      const auto j = static_cast<std::size_t>(std::stoul(c[1]));
      if (labels.size() <= j) labels.resize(j + 1, 0);
      labels[j] = std::stoi(c[2]);
    }
  }
  {
    std::ifstream planted(dir / "planted.csv");
    if (!planted) fail(ErrorKind::IoError, "missing planted.csv in " + dir.string());
    std::getline(planted, line);
    std::map<std::string, std::pair<double, double>> top;  // name -> (concentration, effectiveness)
    while (std::getline(planted, line)) {
      const auto c = split_line(line);
      if (c.size() != 4) fail(ErrorKind::MalformedRow, "planted.csv: " + line);
      const double conc = std::stod(c[1]), eff = std::stod(c[2]);
      auto it = top.find(c[0]);
      if (it == top.end() || conc > it->second.first) top[c[0]] = {conc, eff};
      if (c[3] == "1") truth.planted_effective.insert(c[0]);
    }
    for (const auto& [name, ce] : top) truth.treatment_top_effectiveness[name] = ce.second;
  }
  return truth;
}

}  // namespace deemd
